//! Truncated Hilbert spaces, bounded operators and the semigroup of the generator.
//!
//! Every space is a weighted ℓ² on Galerkin coordinates: `⟨u, v⟩ = Σ ω_n² u_n v_n`
//! where `ω_n` are the norm weights held by the [`SpaceRegistry`].

use std::collections::BTreeMap;
use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type accepted by the space layer.
pub trait Real: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {}

fn lit<S: Real>(v: f64) -> S {
    S::from_f64(v).expect("literal fits the scalar type")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpaceTag {
    H,
    H1,
    V,
    VDual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HVector<S: Real> {
    pub coords: Vec<S>,
    pub tag: SpaceTag,
}

impl<S: Real> HVector<S> {
    pub fn new(coords: Vec<S>, tag: SpaceTag) -> Self {
        Self { coords, tag }
    }

    pub fn zeros(n: usize, tag: SpaceTag) -> Self {
        Self { coords: vec![S::zero(); n], tag }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Bounded linear map `domain -> codomain`, stored row-major (`rows = dim codomain`).
#[derive(Debug, Clone, PartialEq)]
pub struct HOperator<S: Real> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
    pub domain: SpaceTag,
    pub codomain: SpaceTag,
}

impl<S: Real> HOperator<S> {
    pub fn zeros(rows: usize, cols: usize, domain: SpaceTag, codomain: SpaceTag) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols], domain, codomain }
    }

    pub fn identity(n: usize, tag: SpaceTag) -> Self {
        let mut m = Self::zeros(n, n, tag, tag);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<S>], domain: SpaceTag, codomain: SpaceTag) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged operator rows".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.concat(), domain, codomain })
    }

    pub fn diagonal(diag: &[S], tag: SpaceTag) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n, tag, tag);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn apply(&self, x: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.rows];
        matvec(&self.data, self.rows, self.cols, x, &mut out);
        out
    }

    /// Composition `self ∘ rhs`.
    pub fn compose(&self, rhs: &HOperator<S>) -> Result<HOperator<S>> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "cannot compose {}x{} with {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = HOperator::zeros(self.rows, rhs.cols, rhs.domain, self.codomain);
        matmul(&self.data, &rhs.data, self.rows, self.cols, rhs.cols, &mut out.data);
        Ok(out)
    }

    /// Plain (unweighted) transpose with swapped tags.
    pub fn transpose(&self) -> HOperator<S> {
        let mut out = HOperator::zeros(self.cols, self.rows, self.codomain, self.domain);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Frobenius norm; an upper bound for the operator norm in unit weights.
    pub fn frobenius(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, v| acc + *v * *v).sqrt()
    }

    pub fn max_abs_diff(&self, other: &HOperator<S>) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (a, b)| acc.max((*a - *b).abs()))
    }
}

/// Generator description; the diagonal kind is the spectral (eigenbasis) case.
#[derive(Debug, Clone, PartialEq)]
pub enum SemigroupSpec<S: Real> {
    Diagonal { eigenvalues: Vec<S> },
    Dense { matrix: HOperator<S> },
}

impl<S: Real> SemigroupSpec<S> {
    pub fn diagonal(eigenvalues: Vec<S>) -> Result<Self> {
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("eigenvalues must be sorted nonincreasing".into()));
        }
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("eigenvalues must be finite".into()));
        }
        Ok(SemigroupSpec::Diagonal { eigenvalues })
    }

    pub fn dense(matrix: HOperator<S>) -> Result<Self> {
        if matrix.rows != matrix.cols {
            return Err(Error::Dimension("dense generator must be square".into()));
        }
        Ok(SemigroupSpec::Dense { matrix })
    }

    /// Dirichlet Laplacian on (0,1) in the sine basis: `λ_n = -(nπ)²`.
    pub fn dirichlet_laplacian(modes: usize) -> Self {
        let pi = lit::<S>(std::f64::consts::PI);
        let eig = (1..=modes).map(|n| -(lit::<S>(n as f64) * pi).powi(2)).collect();
        SemigroupSpec::Diagonal { eigenvalues: eig }
    }

    pub fn dim(&self) -> usize {
        match self {
            SemigroupSpec::Diagonal { eigenvalues } => eigenvalues.len(),
            SemigroupSpec::Dense { matrix } => matrix.rows,
        }
    }

    /// Generator matrix in H coordinates.
    pub fn generator(&self) -> HOperator<S> {
        match self {
            SemigroupSpec::Diagonal { eigenvalues } => HOperator::diagonal(eigenvalues, SpaceTag::H),
            SemigroupSpec::Dense { matrix } => matrix.clone(),
        }
    }

    pub fn exp_at(&self, t: S) -> Result<HOperator<S>> {
        if t < S::zero() || !t.is_finite() {
            return Err(Error::InvalidArgument("semigroup time must be nonnegative".into()));
        }
        Ok(match self {
            SemigroupSpec::Diagonal { eigenvalues } => {
                let d: Vec<S> = eigenvalues.iter().map(|l| (*l * t).exp()).collect();
                HOperator::diagonal(&d, SpaceTag::H)
            }
            SemigroupSpec::Dense { matrix } => dense_exp(matrix, t),
        })
    }

    /// One-step propagator `e^{A dt}` prepared for repeated application.
    pub fn propagator(&self, dt: S) -> Result<Propagator<S>> {
        Ok(match self {
            SemigroupSpec::Diagonal { eigenvalues } => {
                if dt < S::zero() {
                    return Err(Error::InvalidArgument("semigroup time must be nonnegative".into()));
                }
                Propagator::Diagonal(eigenvalues.iter().map(|l| (*l * dt).exp()).collect())
            }
            SemigroupSpec::Dense { matrix } => {
                let n = matrix.rows;
                let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || matrix.get(i, j) == S::zero()));
                if diagonal && dt >= S::zero() {
                    Propagator::Diagonal((0..n).map(|i| (matrix.get(i, i) * dt).exp()).collect())
                } else {
                    Propagator::Dense(self.exp_at(dt)?)
                }
            }
        })
    }
}

/// `e^{A dt}` for a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub enum Propagator<S: Real> {
    Diagonal(Vec<S>),
    Dense(HOperator<S>),
}

impl<S: Real> Propagator<S> {
    pub fn dim(&self) -> usize {
        match self {
            Propagator::Diagonal(d) => d.len(),
            Propagator::Dense(m) => m.rows,
        }
    }

    pub fn apply_in_place(&self, v: &mut [S], scratch: &mut [S]) {
        match self {
            Propagator::Diagonal(d) => v.iter_mut().zip(d).for_each(|(x, f)| *x = *x * *f),
            Propagator::Dense(m) => {
                matvec(&m.data, m.rows, m.cols, v, scratch);
                v.copy_from_slice(&scratch[..v.len()]);
            }
        }
    }

    /// Row-major matrix of the propagator.
    pub fn matrix(&self) -> Vec<S> {
        match self {
            Propagator::Diagonal(d) => HOperator::diagonal(d, SpaceTag::H).data,
            Propagator::Dense(m) => m.data.clone(),
        }
    }

    /// Adjoint with respect to diagonal H weights (`W⁻¹ Eᵀ W`).
    pub fn adjoint(&self, weights: &[S]) -> Propagator<S> {
        match self {
            Propagator::Diagonal(d) => Propagator::Diagonal(d.clone()),
            Propagator::Dense(m) => {
                let n = m.rows;
                let mut out = m.transpose();
                for i in 0..n {
                    for j in 0..n {
                        let w = weights[j] * weights[j] / (weights[i] * weights[i]);
                        out.data[i * n + j] = out.data[i * n + j] * w;
                    }
                }
                Propagator::Dense(out)
            }
        }
    }
}

fn dense_exp<S: Real>(a: &HOperator<S>, t: S) -> HOperator<S> {
    let n = a.rows;
    let mut scaled: Vec<S> = a.data.iter().map(|v| *v * t).collect();
    let norm = scaled.iter().fold(S::zero(), |acc, v| acc + v.abs());
    let mut squarings = 0;
    let half = lit::<S>(0.5);
    let mut nm = norm;
    while nm > half {
        nm = nm * half;
        squarings += 1;
    }
    let scale = lit::<S>(2f64.powi(-squarings));
    scaled.iter_mut().for_each(|v| *v = *v * scale);
    let mut result = HOperator::<S>::identity(n, SpaceTag::H).data;
    let mut term = result.clone();
    let mut tmp = vec![S::zero(); n * n];
    for k in 1..=20 {
        matmul(&term, &scaled, n, n, n, &mut tmp);
        let inv_k = S::one() / lit::<S>(k as f64);
        for (dst, src) in term.iter_mut().zip(&tmp) {
            *dst = *src * inv_k;
        }
        result.iter_mut().zip(&term).for_each(|(r, v)| *r = *r + *v);
    }
    for _ in 0..squarings {
        matmul(&result, &result, n, n, n, &mut tmp);
        result.copy_from_slice(&tmp);
    }
    HOperator { rows: n, cols: n, data: result, domain: a.domain, codomain: a.codomain }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceEntry<S: Real> {
    pub dim: usize,
    /// Norm weights `ω_n > 0`.
    pub weights: Vec<S>,
}

/// Dimensions and weights for H, H1, V and V*.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceRegistry<S: Real> {
    entries: BTreeMap<SpaceTag, SpaceEntry<S>>,
}

impl<S: Real> SpaceRegistry<S> {
    pub fn new(entries: BTreeMap<SpaceTag, SpaceEntry<S>>) -> Result<Self> {
        for (tag, e) in &entries {
            if e.weights.len() != e.dim {
                return Err(Error::Dimension(format!("{tag:?}: weight count != dimension")));
            }
            if e.weights.iter().any(|w| !(*w > S::zero()) || !w.is_finite()) {
                return Err(Error::InvalidArgument(format!("{tag:?}: weights must be positive")));
            }
        }
        for tag in [SpaceTag::H, SpaceTag::H1] {
            if !entries.contains_key(&tag) {
                return Err(Error::InvalidArgument(format!("registry lacks {tag:?}")));
            }
        }
        Ok(Self { entries })
    }

    /// Unit weights for H (dim `n`) and H1 (dim `n1`); V and V* coincide with H.
    pub fn unit(n: usize, n1: usize) -> Self {
        let mut e = BTreeMap::new();
        let one = |d: usize| SpaceEntry { dim: d, weights: vec![S::one(); d] };
        e.insert(SpaceTag::H, one(n));
        e.insert(SpaceTag::H1, one(n1));
        e.insert(SpaceTag::V, one(n));
        e.insert(SpaceTag::VDual, one(n));
        Self { entries: e }
    }

    /// Sine-basis surrogate for products of `blocks` copies of L²(0,1) with `modes`
    /// modes each: H unit weights, V and H1 weights `nπ`, V* weights `1/(nπ)`.
    pub fn sine_blocks(modes: usize, blocks: usize) -> Self {
        let pi = lit::<S>(std::f64::consts::PI);
        let grad: Vec<S> = (0..blocks)
            .flat_map(|_| (1..=modes).map(move |n| lit::<S>(n as f64) * pi))
            .collect();
        let n = modes * blocks;
        let mut e = BTreeMap::new();
        e.insert(SpaceTag::H, SpaceEntry { dim: n, weights: vec![S::one(); n] });
        e.insert(SpaceTag::H1, SpaceEntry { dim: n, weights: grad.clone() });
        e.insert(SpaceTag::V, SpaceEntry { dim: n, weights: grad.clone() });
        e.insert(
            SpaceTag::VDual,
            SpaceEntry { dim: n, weights: grad.iter().map(|w| S::one() / *w).collect() },
        );
        Self { entries: e }
    }

    pub fn entry(&self, tag: SpaceTag) -> Result<&SpaceEntry<S>> {
        self.entries
            .get(&tag)
            .ok_or_else(|| Error::InvalidArgument(format!("registry lacks {tag:?}")))
    }

    pub fn dim(&self, tag: SpaceTag) -> usize {
        self.entries.get(&tag).map_or(0, |e| e.dim)
    }

    pub fn weights(&self, tag: SpaceTag) -> &[S] {
        self.entries.get(&tag).map_or(&[], |e| &e.weights)
    }

    /// Squared weights `ω_n²`, the diagonal of the Gram matrix.
    pub fn metric(&self, tag: SpaceTag) -> Vec<S> {
        self.weights(tag).iter().map(|w| *w * *w).collect()
    }

    pub fn inner(&self, u: &HVector<S>, v: &HVector<S>) -> Result<S> {
        if u.tag != v.tag {
            return Err(Error::Dimension(format!("inner product of {:?} and {:?}", u.tag, v.tag)));
        }
        let e = self.entry(u.tag)?;
        if u.len() != e.dim || v.len() != e.dim {
            return Err(Error::Dimension(format!(
                "{:?} has dimension {}, got {} and {}",
                u.tag,
                e.dim,
                u.len(),
                v.len()
            )));
        }
        Ok(weighted_dot(&e.weights, &u.coords, &v.coords))
    }

    pub fn norm(&self, v: &HVector<S>) -> Result<S> {
        Ok(self.inner(v, v)?.sqrt())
    }

    /// Adjoint with respect to the registry weights: `M* = W_dom⁻¹ Mᵀ W_cod`.
    pub fn adjoint(&self, m: &HOperator<S>) -> Result<HOperator<S>> {
        let wd = self.entry(m.domain)?;
        let wc = self.entry(m.codomain)?;
        if wd.dim != m.cols || wc.dim != m.rows {
            return Err(Error::Dimension("operator shape disagrees with its tags".into()));
        }
        let mut out = m.transpose();
        for i in 0..m.cols {
            for j in 0..m.rows {
                let num = wc.weights[j] * wc.weights[j];
                let den = wd.weights[i] * wd.weights[i];
                if num != den {
                    out.data[i * m.rows + j] = out.data[i * m.rows + j] * num / den;
                }
            }
        }
        Ok(out)
    }

    /// Riesz representative of a coordinate gradient: divides by `ω_n²`.
    pub fn riesz(&self, tag: SpaceTag, grad: &mut [S]) {
        for (g, w) in grad.iter_mut().zip(self.weights(tag)) {
            *g = *g / (*w * *w);
        }
    }

    /// Hilbert–Schmidt norm² of the embedding V ⊂ H at this truncation level.
    pub fn embedding_hs_norm_sq(&self) -> Result<S> {
        let v = self.entry(SpaceTag::V)?;
        let h = self.entry(SpaceTag::H)?;
        if v.dim != h.dim {
            return Err(Error::Dimension("V and H must share coordinates".into()));
        }
        Ok(v.weights
            .iter()
            .zip(&h.weights)
            .fold(S::zero(), |acc, (wv, wh)| acc + (*wh / *wv).powi(2)))
    }
}

pub fn weighted_dot<S: Real>(w: &[S], u: &[S], v: &[S]) -> S {
    w.iter()
        .zip(u.iter().zip(v))
        .fold(S::zero(), |acc, (w, (a, b))| acc + *w * *w * *a * *b)
}

pub fn dot<S: Real>(u: &[S], v: &[S]) -> S {
    u.iter().zip(v).fold(S::zero(), |acc, (a, b)| acc + *a * *b)
}

/// `out = M x` for row-major `M` (`rows × cols`).
pub fn matvec<S: Real>(m: &[S], rows: usize, cols: usize, x: &[S], out: &mut [S]) {
    for i in 0..rows {
        let row = &m[i * cols..(i + 1) * cols];
        out[i] = dot(row, x);
    }
}

/// `out = Mᵀ x` for row-major `M` (`rows × cols`).
pub fn matvec_t<S: Real>(m: &[S], rows: usize, cols: usize, x: &[S], out: &mut [S]) {
    out[..cols].iter_mut().for_each(|v| *v = S::zero());
    for i in 0..rows {
        let xi = x[i];
        if xi == S::zero() {
            continue;
        }
        for j in 0..cols {
            out[j] = out[j] + m[i * cols + j] * xi;
        }
    }
}

/// `out = A B` with `A: n×k`, `B: k×m`, all row-major.
pub fn matmul<S: Real>(a: &[S], b: &[S], n: usize, k: usize, m: usize, out: &mut [S]) {
    out[..n * m].iter_mut().for_each(|v| *v = S::zero());
    for i in 0..n {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == S::zero() {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + ail * *bv;
            }
        }
    }
}

/// Sine coefficients `∫ f(ξ) √2 sin(nπξ) dξ`, `n = 1..=modes`, by composite Simpson
/// quadrature on `panels` (even) subintervals.
pub fn sine_coefficients<S: Real>(f: impl Fn(S) -> S, modes: usize, panels: usize) -> Vec<S> {
    let panels = panels + panels % 2;
    let h = S::one() / lit::<S>(panels as f64);
    let pi = lit::<S>(std::f64::consts::PI);
    let sqrt2 = lit::<S>(std::f64::consts::SQRT_2);
    (1..=modes)
        .map(|n| {
            let nn = lit::<S>(n as f64);
            let mut acc = S::zero();
            for i in 0..=panels {
                let xi = h * lit::<S>(i as f64);
                let c = if i == 0 || i == panels {
                    S::one()
                } else if i % 2 == 1 {
                    lit(4.0)
                } else {
                    lit(2.0)
                };
                acc = acc + c * f(xi) * sqrt2 * (nn * pi * xi).sin();
            }
            acc * h / lit(3.0)
        })
        .collect()
}

/// `∫₀¹ sin(kπξ) dξ` for any integer `k`.
fn int_sin<S: Real>(k: i64) -> S {
    if k % 2 == 0 {
        S::zero()
    } else {
        lit::<S>(2.0) / (lit::<S>(k as f64) * lit::<S>(std::f64::consts::PI))
    }
}

/// Triple-product constants `c[j][k][m] = 2√2 ∫₀¹ sin(jπξ) sin(kπξ) sin(mπξ) dξ`
/// (indices from 1), giving the sine coefficients of the pointwise product of two
/// sine series: `(uv)_m = Σ_{jk} c_{jkm} u_j v_k`. Returned flat as `[(j*n + k)*n + m]`.
pub fn sine_product_tensor<S: Real>(modes: usize) -> Vec<S> {
    let n = modes;
    let mut out = vec![S::zero(); n * n * n];
    let quarter = lit::<S>(0.25);
    let scale = lit::<S>(2.0 * std::f64::consts::SQRT_2);
    for j in 1..=n as i64 {
        for k in 1..=n as i64 {
            for m in 1..=n as i64 {
                let v = quarter
                    * (int_sin::<S>(m + j - k) + int_sin::<S>(m - j + k)
                        - int_sin::<S>(m + j + k)
                        - int_sin::<S>(m - j - k));
                let idx = ((j as usize - 1) * n + (k as usize - 1)) * n + (m as usize - 1);
                out[idx] = scale * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pi() -> f64 {
        std::f64::consts::PI
    }

    #[test]
    fn exp_at_zero_is_identity() {
        let s = SemigroupSpec::diagonal(vec![-pi() * pi()]).unwrap();
        assert_eq!(s.exp_at(0.0).unwrap(), HOperator::identity(1, SpaceTag::H));
    }

    #[test]
    fn exp_at_diagonal_entries() {
        let p2 = pi() * pi();
        let s = SemigroupSpec::diagonal(vec![-p2, -4.0 * p2]).unwrap();
        let e = s.exp_at(1.0).unwrap();
        assert_eq!(e.get(0, 0), (-p2).exp());
        assert_eq!(e.get(1, 1), (-4.0 * p2).exp());
        assert_eq!(e.get(0, 1), 0.0);
    }

    #[test]
    fn exp_at_zero_generator_dense() {
        let s = SemigroupSpec::dense(HOperator::zeros(1, 1, SpaceTag::H, SpaceTag::H)).unwrap();
        assert_eq!(s.exp_at(5.0).unwrap().data, vec![1.0]);
    }

    #[test]
    fn exp_rejects_negative_time() {
        let s = SemigroupSpec::<f64>::dirichlet_laplacian(3);
        assert!(matches!(s.exp_at(-0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dense_exp_matches_rotation() {
        let gen =
            HOperator::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]], SpaceTag::H, SpaceTag::H)
                .unwrap();
        let e = SemigroupSpec::dense(gen).unwrap().exp_at(2.0).unwrap();
        assert!((e.get(0, 0) - 2f64.cos()).abs() < 1e-13);
        assert!((e.get(1, 0) - 2f64.sin()).abs() < 1e-13);
    }

    #[test]
    fn unsorted_eigenvalues_rejected() {
        assert!(SemigroupSpec::diagonal(vec![-2.0, -1.0]).is_err());
    }

    #[test]
    fn inner_examples() {
        let r = SpaceRegistry::<f64>::unit(2, 2);
        let e1 = HVector::new(vec![1.0, 0.0], SpaceTag::H);
        let e2 = HVector::new(vec![0.0, 1.0], SpaceTag::H);
        assert_eq!(r.inner(&e1, &e2).unwrap(), 0.0);
        let a = HVector::new(vec![1.0, 2.0], SpaceTag::H);
        let b = HVector::new(vec![3.0, 4.0], SpaceTag::H);
        assert_eq!(r.inner(&a, &b).unwrap(), 11.0);
        assert_eq!(r.inner(&a, &a).unwrap(), 5.0);
    }

    #[test]
    fn inner_rejects_mismatched_tags() {
        let r = SpaceRegistry::<f64>::unit(2, 2);
        let a = HVector::new(vec![1.0, 2.0], SpaceTag::H);
        let b = HVector::new(vec![3.0, 4.0], SpaceTag::H1);
        assert!(matches!(r.inner(&a, &b), Err(Error::Dimension(_))));
        let c = HVector::new(vec![3.0], SpaceTag::H);
        assert!(r.inner(&a, &c).is_err());
    }

    #[test]
    fn adjoint_examples() {
        let r = SpaceRegistry::<f64>::unit(2, 2);
        let id = HOperator::identity(2, SpaceTag::H);
        assert_eq!(r.adjoint(&id).unwrap(), id);
        let m = HOperator::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]], SpaceTag::H, SpaceTag::H)
            .unwrap();
        assert_eq!(r.adjoint(&m).unwrap().data, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn f32_instantiation() {
        let r = SpaceRegistry::<f32>::sine_blocks(3, 1);
        let v = HVector::new(vec![1.0f32, 0.0, 0.0], SpaceTag::H1);
        let n = r.norm(&v).unwrap();
        assert!((n - std::f32::consts::PI).abs() < 1e-5);
        let e = SemigroupSpec::<f32>::dirichlet_laplacian(2).exp_at(0.0).unwrap();
        assert_eq!(e.data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn hilbert_schmidt_embedding_is_summable() {
        let r = SpaceRegistry::<f64>::sine_blocks(200, 1);
        let hs = r.embedding_hs_norm_sq().unwrap();
        // Σ 1/(nπ)² → 1/6
        assert!((hs - 1.0 / 6.0).abs() < 1e-3);
    }

    #[test]
    fn product_tensor_matches_quadrature() {
        let n = 5;
        let c = sine_product_tensor::<f64>(n);
        for j in 1..=n {
            for k in 1..=n {
                let f = |x: f64| 2.0 * (j as f64 * pi() * x).sin() * (k as f64 * pi() * x).sin();
                let q = sine_coefficients(f, n, 4000);
                for m in 1..=n {
                    let idx = ((j - 1) * n + (k - 1)) * n + (m - 1);
                    assert!((c[idx] - q[m - 1]).abs() < 1e-9, "c[{j}{k}{m}]");
                }
            }
        }
    }

    #[test]
    fn propagator_adjoint_weighted() {
        let gen = HOperator::from_rows(
            &[vec![-1.0, 0.5], vec![0.2, -2.0]],
            SpaceTag::H,
            SpaceTag::H,
        )
        .unwrap();
        let p = SemigroupSpec::dense(gen).unwrap().propagator(0.3).unwrap();
        let w = [1.0, 2.0];
        let pa = p.adjoint(&w);
        let (x, y) = ([0.3, -1.1], [0.7, 0.4]);
        let mut px = x;
        let mut s = [0.0; 2];
        p.apply_in_place(&mut px, &mut s);
        let mut pay = y;
        pa.apply_in_place(&mut pay, &mut s);
        let lhs = weighted_dot(&w, &px, &y);
        let rhs = weighted_dot(&w, &x, &pay);
        assert!((lhs - rhs).abs() < 1e-14);
    }
}
