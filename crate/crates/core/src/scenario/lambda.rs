//! Admissible mixture sets Λ = simplex ∩ {Cλ ≤ b}.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One linear side constraint `row · λ ≤ bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaConstraint {
    pub row: Vec<f64>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSet {
    pub constraints: Vec<LambdaConstraint>,
}

/// Optimum of a linear objective over Λ.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOptimum {
    pub value: f64,
    pub lambda: Vec<f64>,
}

impl LambdaSet {
    pub fn full_simplex() -> Self {
        Self::default()
    }

    pub fn is_full_simplex(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn check_dims(&self, m: usize) -> Result<()> {
        if self.constraints.iter().any(|c| c.row.len() != m) {
            return Err(Error::Config(format!("lambda constraint rows must have length {m}")));
        }
        Ok(())
    }

    pub fn contains(&self, lambda: &[f64], tol: f64) -> bool {
        let sum: f64 = lambda.iter().sum();
        (sum - 1.0).abs() <= tol
            && lambda.iter().all(|l| *l >= -tol)
            && self
                .constraints
                .iter()
                .all(|c| c.row.iter().zip(lambda).map(|(a, l)| a * l).sum::<f64>() <= c.bound + tol)
    }

    /// Maximize `costs · λ` over Λ with the simplex method.
    pub fn maximize(&self, costs: &[f64]) -> Result<LinearOptimum> {
        let m = costs.len();
        self.check_dims(m)?;
        let mut problem = Problem::new(OptimizationDirection::Maximize);
        let vars: Vec<_> = costs.iter().map(|c| problem.add_var(*c, (0.0, 1.0))).collect();
        problem.add_constraint(vars.iter().map(|v| (*v, 1.0)).collect::<Vec<_>>(), ComparisonOp::Eq, 1.0);
        for c in &self.constraints {
            let expr: Vec<_> = vars.iter().zip(&c.row).map(|(v, a)| (*v, *a)).collect();
            problem.add_constraint(expr, ComparisonOp::Le, c.bound);
        }
        let sol = problem
            .solve()
            .map_err(|e| Error::Infeasible(format!("linear program over Λ failed: {e}")))?;
        let lambda: Vec<f64> = vars.iter().map(|v| sol[*v].max(0.0)).collect();
        let value = costs.iter().zip(&lambda).map(|(c, l)| c * l).sum();
        Ok(LinearOptimum { value, lambda })
    }

    /// Feasibility by solving a zero-objective program.
    pub fn is_feasible(&self, m: usize) -> bool {
        m > 0 && self.maximize(&vec![0.0; m]).is_ok()
    }

    /// All vertices by brute force: every choice of `m-1` active inequalities together
    /// with `Σλ = 1`, kept when feasible, deduplicated.
    pub fn vertices(&self, m: usize) -> Result<Vec<Vec<f64>>> {
        self.check_dims(m)?;
        if m == 0 {
            return Err(Error::InvalidArgument("empty uncertainty set".into()));
        }
        // inequality rows: -λ_i ≤ 0, then the side constraints
        let mut rows: Vec<(Vec<f64>, f64)> = (0..m)
            .map(|i| {
                let mut r = vec![0.0; m];
                r[i] = -1.0;
                (r, 0.0)
            })
            .collect();
        rows.extend(self.constraints.iter().map(|c| (c.row.clone(), c.bound)));
        let k = m - 1;
        if binomial(rows.len(), k) > 2_000_000 {
            return Err(Error::Unsupported("too many constraint combinations to enumerate".into()));
        }
        let mut out: Vec<Vec<f64>> = Vec::new();
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            let mut a = DMatrix::<f64>::zeros(m, m);
            let mut b = DVector::<f64>::zeros(m);
            for (r, &idx) in combo.iter().enumerate() {
                for j in 0..m {
                    a[(r, j)] = rows[idx].0[j];
                }
                b[r] = rows[idx].1;
            }
            for j in 0..m {
                a[(k, j)] = 1.0;
            }
            b[k] = 1.0;
            if let Some(sol) = a.lu().solve(&b) {
                let v: Vec<f64> = sol.iter().map(|x| if x.abs() < 1e-14 { 0.0 } else { *x }).collect();
                if v.iter().all(|x| x.is_finite())
                    && self.contains(&v, 1e-9)
                    && !out.iter().any(|w| w.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-9))
                {
                    out.push(v);
                }
            }
            if !next_combination(&mut combo, rows.len()) {
                break;
            }
        }
        if out.is_empty() {
            return Err(Error::Infeasible("Λ has no vertices".into()));
        }
        out.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        Ok(out)
    }

    /// Brute-force maximum over the vertex list.
    pub fn maximize_by_vertices(&self, costs: &[f64]) -> Result<LinearOptimum> {
        let verts = self.vertices(costs.len())?;
        let mut best: Option<LinearOptimum> = None;
        for v in verts {
            let value: f64 = costs.iter().zip(&v).map(|(c, l)| c * l).sum();
            if best.as_ref().is_none_or(|b| value > b.value) {
                best = Some(LinearOptimum { value, lambda: v });
            }
        }
        best.ok_or_else(|| Error::Infeasible("Λ is empty".into()))
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
