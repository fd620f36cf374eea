//! Run configuration: a TOML file, overridden by `RSOC_*` environment variables,
//! overridden in turn by command line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::BasisSpec;
use crate::error::{Error, Result};
use crate::forward::{nulling_control, ControlProcess};
use crate::paths::TimeGrid;
use crate::robust::{ARGMAX_STD_FACTOR, SINGULAR_TOLERANCE};
use crate::scenario::{load_scenario, ExampleTwoParams, Scenario, FAMILY_EXAMPLE_TWO};

pub const MIN_PATHS: usize = 100;
pub const MIN_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// `builtin:example1`, `builtin:example2` or a scenario file path.
    pub source: String,
    /// Sine modes per component for `builtin:example2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Defaults to the scenario horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub paths: usize,
    /// Mandatory; may come from the flag or the environment instead of the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub antithetic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub basis: BasisSpec,
    pub singular_tolerance: f64,
    /// Argmax face tolerance in units of the largest cost standard error.
    pub argmax_std_factor: f64,
    /// Paths of the sub-ensemble used for the duality checks.
    pub duality_paths: usize,
    pub duality_trials: usize,
    pub probe_points: usize,
    pub integral_directions: usize,
    pub singularity_directions: usize,
    pub max_operator_values: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            basis: BasisSpec::default(),
            singular_tolerance: SINGULAR_TOLERANCE,
            argmax_std_factor: ARGMAX_STD_FACTOR,
            duality_paths: 2000,
            duality_trials: 8,
            probe_points: crate::conditions::DEFAULT_PROBE_POINTS,
            integral_directions: 8,
            singularity_directions: 8,
            max_operator_values: 60_000_000,
        }
    }
}

/// Candidate control. Variants are struct-like so that stray keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Zero {},
    Constant { value: Vec<f64> },
    /// The state-nulling Wiener control of `builtin:example2`.
    Nulling {},
}

impl Default for ControlSpec {
    fn default() -> Self {
        ControlSpec::Zero {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("rsoc-out"), formats: vec![OutputFormat::Json, OutputFormat::Csv] }
    }
}

impl OutputSection {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    pub grid: GridSection,
    pub mc: McSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default)]
    pub outputs: OutputSection,
}

/// Values that take precedence over the file (flags, then environment, resolved by clap).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
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

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.mc.seed = Some(v);
        }
        if let Some(v) = o.paths {
            self.mc.paths = v;
        }
        if let Some(v) = o.steps {
            self.grid.steps = v;
        }
        if let Some(v) = &o.out {
            self.outputs.directory.clone_from(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc.seed.is_none() {
            return Err(Error::Config(
                "missing key `mc.seed` (set it in the file, RSOC_SEED or --seed; there is no clock default)".into(),
            ));
        }
        if self.grid.steps < MIN_STEPS {
            return Err(Error::Config(format!("grid.steps must be at least {MIN_STEPS}")));
        }
        if self.mc.paths < MIN_PATHS {
            return Err(Error::Config(format!("mc.paths must be at least {MIN_PATHS}")));
        }
        if self.mc.antithetic && !self.mc.paths.is_multiple_of(2) {
            return Err(Error::Config("mc.paths must be even with mc.antithetic".into()));
        }
        if let Some(h) = self.grid.horizon {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config("grid.horizon must be positive".into()));
            }
        }
        let sv = &self.solver;
        if !(sv.singular_tolerance > 0.0) || !(sv.argmax_std_factor >= 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if sv.duality_trials == 0 || sv.probe_points == 0 || sv.integral_directions == 0 || sv.singularity_directions == 0
        {
            return Err(Error::Config("solver counts must be positive".into()));
        }
        if sv.duality_paths < MIN_PATHS {
            return Err(Error::Config(format!("solver.duality_paths must be at least {MIN_PATHS}")));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.mc.seed.ok_or_else(|| Error::Config("missing key `mc.seed`".into()))
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(self.to_toml()?.as_bytes()))
    }

    pub fn scenario(&self) -> Result<Scenario> {
        load_scenario(&self.scenario.source, self.scenario.modes)
    }

    pub fn grid(&self, s: &Scenario) -> Result<TimeGrid> {
        let h = self.grid.horizon.unwrap_or(s.horizon);
        if (h - s.horizon).abs() > 1e-12 * s.horizon {
            return Err(Error::Config(format!("grid.horizon {h} differs from the scenario horizon {}", s.horizon)));
        }
        TimeGrid::new(h, self.grid.steps)
    }

    pub fn control(&self, s: &Scenario) -> Result<ControlProcess> {
        match &self.control {
            ControlSpec::Zero {} => Ok(ControlProcess::zero(s.control_dim()).with_label("zero")),
            ControlSpec::Constant { value } => {
                if value.len() != s.control_dim() {
                    return Err(Error::Config(format!("control.value must have length {}", s.control_dim())));
                }
                Ok(ControlProcess::constant(value.clone()))
            }
            ControlSpec::Nulling {} => {
                if self.scenario.source != FAMILY_EXAMPLE_TWO {
                    return Err(Error::Config(format!("control kind `nulling` needs scenario {FAMILY_EXAMPLE_TWO}")));
                }
                Ok(nulling_control(&ExampleTwoParams::default_for(s.state_blocks[0].1)))
            }
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Stream seed for a named stage, derived from the master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[scenario]
source = "builtin:example1"

[grid]
steps = 50

[mc]
paths = 400
seed = 11

[control]
kind = "constant"
value = [1.0]
"#;

    #[test]
    fn parse_apply_validate() {
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.solver, SolverSection::default());
        c.apply(&Overrides { seed: Some(5), paths: Some(1000), ..Default::default() });
        assert_eq!((c.seed().unwrap(), c.mc.paths, c.grid.steps), (5, 1000, 50));
        let s = c.scenario().unwrap();
        assert_eq!(c.control(&s).unwrap().dim, 1);
        assert_eq!(c.grid(&s).unwrap().steps(), 50);
    }

    #[test]
    fn missing_seed_names_the_key() {
        let c = RunConfig::parse(&SAMPLE.replace("seed = 11", "")).unwrap();
        let e = c.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("mc.seed"), "{e}");
    }

    #[test]
    fn bad_values_rejected() {
        let e = RunConfig::parse(&SAMPLE.replace("paths = 400", "paths = 400\npath = 3")).unwrap_err();
        assert!(e.to_string().contains("path"), "{e}");
        let c = RunConfig::parse(&SAMPLE.replace("steps = 50", "steps = 1")).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::parse(&SAMPLE.replace("paths = 400", "paths = 99")).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::parse(&SAMPLE.replace("kind = \"constant\"", "kind = \"nulling\"\n#")).unwrap_err();
        assert!(c.to_string().contains("value"), "{c}");
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "bundle"), derive_seed(1, "bundle"));
        assert_ne!(derive_seed(1, "bundle"), derive_seed(1, "duality"));
        assert_ne!(derive_seed(1, "bundle"), derive_seed(2, "bundle"));
    }
}
