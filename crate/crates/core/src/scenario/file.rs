//! TOML schema for scenarios. A file names a coefficient family and supplies the
//! data that family needs; keys the family does not use are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    builtin_example_one, builtin_example_two_with, AffineBilinearPack, AffineBilinearSpec, CoefficientPack,
    ControlSet, ExampleTwoParams, LambdaConstraint, LambdaSet, Scenario, UncertaintyModel,
};
use crate::error::{Error, Result};
use crate::spaces::{HOperator, SemigroupSpec, SpaceEntry, SpaceRegistry, SpaceTag};

pub const FAMILY_AFFINE: &str = "affine_bilinear";
pub const FAMILY_EXAMPLE_ONE: &str = "builtin:example1";
pub const FAMILY_EXAMPLE_TWO: &str = "builtin:example2";

/// Γ labels, optional metric rows and the side constraints of Λ.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    /// `m×m`; the discrete metric when absent.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distance: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<LambdaConstraint>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Sine modes per component (`builtin:example2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_dim: Option<usize>,
    /// Diagonal generator, sorted nonincreasing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    /// Dense generator rows, as an alternative to `eigenvalues`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h1_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    /// Block lengths of the state; one block when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_blocks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_set: Option<ControlSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malliavin_regular: Option<bool>,
    /// One coefficient set per uncertainty point.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regimes: Vec<AffineBilinearSpec>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Keys that are set but meaningless for the family.
    fn stray_keys(&self, allowed: &[&str]) -> Vec<&'static str> {
        let present: [(&'static str, bool); 13] = [
            ("name", self.name.is_some()),
            ("modes", self.modes.is_some()),
            ("horizon", self.horizon.is_some()),
            ("state_dim", self.state_dim.is_some()),
            ("control_dim", self.control_dim.is_some()),
            ("eigenvalues", self.eigenvalues.is_some()),
            ("generator", self.generator.is_some()),
            ("h_weights", self.h_weights.is_some()),
            ("h1_weights", self.h1_weights.is_some()),
            ("initial_state", self.initial_state.is_some()),
            ("state_blocks", self.state_blocks.is_some()),
            ("control_set", self.control_set.is_some()),
            ("malliavin_regular", self.malliavin_regular.is_some()),
        ];
        let mut out: Vec<&'static str> =
            present.iter().filter(|(k, set)| *set && !allowed.contains(k)).map(|(k, _)| *k).collect();
        if !self.regimes.is_empty() && !allowed.contains(&"regimes") {
            out.push("regimes");
        }
        out
    }

    pub fn build(&self) -> Result<Scenario> {
        let scenario = match self.family.as_str() {
            FAMILY_EXAMPLE_ONE => {
                self.reject_stray(&["name"])?;
                let mut s = builtin_example_one();
                self.apply_uncertainty(&mut s)?;
                s
            }
            FAMILY_EXAMPLE_TWO => {
                self.reject_stray(&["name", "modes"])?;
                let modes = self.modes.unwrap_or(16);
                let mut s = builtin_example_two_with(ExampleTwoParams::default_for(modes))?;
                self.apply_uncertainty(&mut s)?;
                s
            }
            FAMILY_AFFINE => self.build_affine()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown family `{other}` (expected {FAMILY_AFFINE}, {FAMILY_EXAMPLE_ONE} or {FAMILY_EXAMPLE_TWO})"
                )))
            }
        };
        let mut scenario = scenario;
        if let Some(name) = &self.name {
            scenario.name.clone_from(name);
        }
        scenario.validate()?;
        Ok(scenario)
    }

    fn reject_stray(&self, allowed: &[&str]) -> Result<()> {
        let stray = self.stray_keys(allowed);
        if stray.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("family `{}` does not use key(s): {}", self.family, stray.join(", "))))
        }
    }

    /// Builtins keep their Γ labels and metric; only Λ side constraints may be added.
    fn apply_uncertainty(&self, s: &mut Scenario) -> Result<()> {
        if let Some(u) = &self.uncertainty {
            if !u.labels.is_empty() || !u.distance.is_empty() {
                return Err(Error::Config("builtin families fix uncertainty.labels and uncertainty.distance".into()));
            }
            s.uncertainty.lambda_set = LambdaSet { constraints: u.constraints.clone() };
        }
        Ok(())
    }

    fn build_affine(&self) -> Result<Scenario> {
        self.reject_stray(&[
            "name",
            "horizon",
            "state_dim",
            "control_dim",
            "eigenvalues",
            "generator",
            "h_weights",
            "h1_weights",
            "initial_state",
            "state_blocks",
            "control_set",
            "malliavin_regular",
            "regimes",
        ])?;
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| Error::Config(format!("missing key `{key}`")));
        let n = need(self.state_dim, "state_dim")?;
        let n1 = need(self.control_dim, "control_dim")?;
        if n == 0 || n1 == 0 {
            return Err(Error::Config("state_dim and control_dim must be positive".into()));
        }
        let horizon = self.horizon.ok_or_else(|| Error::Config("missing key `horizon`".into()))?;
        let semigroup = match (&self.eigenvalues, &self.generator) {
            (Some(e), None) => {
                if e.len() != n {
                    return Err(Error::Config(format!("eigenvalues must have length {n}")));
                }
                SemigroupSpec::diagonal(e.clone()).map_err(|e| Error::Config(format!("eigenvalues: {e}")))?
            }
            (None, Some(rows)) => SemigroupSpec::dense(
                HOperator::from_rows(rows, SpaceTag::H, SpaceTag::H)
                    .map_err(|e| Error::Config(format!("generator: {e}")))?,
            )?,
            (None, None) => SemigroupSpec::diagonal(vec![0.0; n])?,
            (Some(_), Some(_)) => return Err(Error::Config("give eigenvalues or generator, not both".into())),
        };
        let weights = |w: &Option<Vec<f64>>, d: usize, key: &str| -> Result<Vec<f64>> {
            match w {
                None => Ok(vec![1.0; d]),
                Some(w) if w.len() == d => Ok(w.clone()),
                Some(_) => Err(Error::Config(format!("{key} must have length {d}"))),
            }
        };
        let wh = weights(&self.h_weights, n, "h_weights")?;
        let wh1 = weights(&self.h1_weights, n1, "h1_weights")?;
        let mut entries = BTreeMap::new();
        entries.insert(SpaceTag::H, SpaceEntry { dim: n, weights: wh.clone() });
        entries.insert(SpaceTag::H1, SpaceEntry { dim: n1, weights: wh1 });
        entries.insert(SpaceTag::V, SpaceEntry { dim: n, weights: wh.clone() });
        entries.insert(SpaceTag::VDual, SpaceEntry { dim: n, weights: wh });
        let spaces = SpaceRegistry::new(entries).map_err(|e| Error::Config(e.to_string()))?;
        let u = self.uncertainty.clone().unwrap_or_default();
        let m = self.regimes.len();
        if m == 0 {
            return Err(Error::Config("at least one [[regimes]] table is required".into()));
        }
        let labels = if u.labels.is_empty() { (1..=m).map(|g| g.to_string()).collect() } else { u.labels.clone() };
        if labels.len() != m {
            return Err(Error::Config(format!("uncertainty.labels has {} entries for {m} regimes", labels.len())));
        }
        let mut uncertainty = UncertaintyModel::discrete(labels);
        if !u.distance.is_empty() {
            if u.distance.len() != m || u.distance.iter().any(|r| r.len() != m) {
                return Err(Error::Config(format!("uncertainty.distance must be {m}x{m}")));
            }
            uncertainty.distance = u.distance.concat();
        }
        uncertainty.lambda_set = LambdaSet { constraints: u.constraints };
        let packs = self
            .regimes
            .iter()
            .enumerate()
            .map(|(g, spec)| {
                AffineBilinearPack::new(spec, n, n1)
                    .map(|p| Arc::new(p) as Arc<dyn CoefficientPack>)
                    .map_err(|e| Error::Config(format!("regimes[{g}]: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let initial_state = match &self.initial_state {
            None => vec![0.0; n],
            Some(v) if v.len() == n => v.clone(),
            Some(_) => return Err(Error::Config(format!("initial_state must have length {n}"))),
        };
        let state_blocks = match &self.state_blocks {
            None => vec![(0, n)],
            Some(lens) => lens
                .iter()
                .scan(0, |start, &len| {
                    let b = (*start, len);
                    *start += len;
                    Some(b)
                })
                .collect(),
        };
        Ok(Scenario {
            name: "affine_bilinear".into(),
            spaces,
            semigroup,
            packs,
            uncertainty,
            control_set: self.control_set.clone().unwrap_or_else(|| ControlSet::unconstrained(n1, 1.0)),
            horizon,
            initial_state,
            malliavin_regular: self.malliavin_regular.unwrap_or(false),
            state_blocks,
        })
    }
}

/// Scenario from a source string: a builtin family name or a file path.
pub fn load_scenario(source: &str, modes: Option<usize>) -> Result<Scenario> {
    let file = if source.starts_with("builtin:") {
        ScenarioFile { family: source.to_string(), modes, ..Default::default() }
    } else {
        let f = ScenarioFile::load(Path::new(source))?;
        if modes.is_some() {
            return Err(Error::Config("scenario.modes applies to builtin:example2 only".into()));
        }
        f
    };
    file.build()
}
