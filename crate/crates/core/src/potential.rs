//! Physical potential and Gaussian bias potentials.
//!
//! The physical potential is the separable multi-well family
//!
//! ```text
//! V(x) = Σ_i α_i (x_i² − 1)²
//! ```
//!
//! Bias potentials are weighted sums of *unnormalized* Gaussian bumps,
//! `Ñ(y; μ, Σ) = exp(−½ (y−μ)·Σ⁻¹(y−μ))`, so each bump equals exactly one at
//! its own mean.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Multidimensional double-well potential with per-axis barrier heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PotentialSpec {
    alpha: Vec<f64>,
}

impl PotentialSpec {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Input("potential needs at least one dimension".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::Input(format!("barrier heights must be positive, got {a}")));
        }
        Ok(Self { alpha })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.value_unchecked(x))
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.gradient_into(x, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn value_unchecked(&self, x: &[f64]) -> f64 {
        self.alpha
            .iter()
            .zip(x)
            .map(|(a, xi)| {
                let s = xi * xi - 1.0;
                a * s * s
            })
            .sum()
    }

    /// Writes `∇V(x)` into `out`. Lengths are not checked.
    #[inline]
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, a), xi) in out.iter_mut().zip(&self.alpha).zip(x) {
            *o = 4.0 * a * xi * (xi * xi - 1.0);
        }
    }
}

impl TryFrom<Vec<f64>> for PotentialSpec {
    type Error = Error;
    fn try_from(alpha: Vec<f64>) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<PotentialSpec> for Vec<f64> {
    fn from(p: PotentialSpec) -> Self {
        p.alpha
    }
}

/// Inverts a symmetric positive-definite matrix.
///
/// Diagonal matrices are inverted entrywise so that the isotropic fast path in
/// [`GaussianBump`] sees exactly the same precision values as the general path.
pub(crate) fn spd_inverse(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(Error::Input("covariance must be a non-empty square matrix".into()));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("covariance has non-finite entries".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if cov[(i, j)] != cov[(j, i)] {
                return Err(Error::Input("covariance is not symmetric".into()));
            }
        }
    }
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || cov[(i, j)] == 0.0));
    if diagonal {
        if (0..n).any(|i| cov[(i, i)] <= 0.0) {
            return Err(Error::Input("covariance is not positive definite".into()));
        }
        return Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / cov[(i, i)] } else { 0.0 }));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Input("covariance is not positive definite".into()))?;
    Ok(chol.inverse())
}

/// `out = P z` for a row-major square matrix, summed left to right.
#[inline]
pub(crate) fn mat_vec(precision: &[f64], z: &[f64], out: &mut [f64]) {
    let n = z.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &precision[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for (p, zj) in row.iter().zip(z) {
            acc += p * zj;
        }
        *o = acc;
    }
}

/// Gaussian bump with precomputed precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBump {
    weight: f64,
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    /// Row-major `Σ⁻¹`.
    precision: Vec<f64>,
    /// Set when `Σ = c·Id`; holds `1/c`.
    isotropic: Option<f64>,
}

impl GaussianBump {
    pub fn new(weight: f64, mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), covariance.nrows())?;
        if !weight.is_finite() || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Input("bump weight and mean must be finite".into()));
        }
        let inv = spd_inverse(&covariance)?;
        let n = mean.len();
        let precision: Vec<f64> = (0..n * n).map(|k| inv[(k / n, k % n)]).collect();
        let c0 = covariance[(0, 0)];
        let isotropic = (0..n)
            .all(|i| (0..n).all(|j| covariance[(i, j)] == if i == j { c0 } else { 0.0 }))
            .then_some(precision[0]);
        Ok(Self { weight, mean, covariance, precision, isotropic })
    }

    /// Bump with covariance `variance · Id`.
    pub fn isotropic(weight: f64, mean: Vec<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(weight, mean, DMatrix::from_diagonal_element(n, n, variance))
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ⁻¹` in row-major order.
    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    /// Copy of this bump with a different weight.
    pub fn with_weight(&self, weight: f64) -> Self {
        Self { weight, ..self.clone() }
    }

    /// Writes `Σ⁻¹ (y − μ)` into `pz` (using `z` as scratch) and returns the
    /// quadratic form `(y−μ)·Σ⁻¹(y−μ)`.
    #[inline]
    pub(crate) fn whiten(&self, y: &[f64], z: &mut [f64], pz: &mut [f64], general: bool) -> f64 {
        for ((zi, yi), mi) in z.iter_mut().zip(y).zip(&self.mean) {
            *zi = yi - mi;
        }
        match self.isotropic {
            Some(p) if !general => {
                for (o, zi) in pz.iter_mut().zip(z.iter()) {
                    *o = p * zi;
                }
            }
            _ => mat_vec(&self.precision, z, pz),
        }
        let mut q = 0.0;
        for (zi, wi) in z.iter().zip(pz.iter()) {
            q += zi * wi;
        }
        q
    }

    /// Unnormalized density `Ñ(y; μ, Σ)` (without the weight).
    pub fn shape(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), y.len())?;
        let n = self.dim();
        let (mut z, mut pz) = (vec![0.0; n], vec![0.0; n]);
        Ok((-0.5 * self.whiten(y, &mut z, &mut pz, false)).exp())
    }
}

/// Weighted sum of unnormalized Gaussian bumps on a space of dimension
/// `space_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasPotential {
    space_dim: usize,
    bumps: Vec<GaussianBump>,
}

impl BiasPotential {
    pub fn empty(space_dim: usize) -> Self {
        Self { space_dim, bumps: Vec::new() }
    }

    pub fn new(space_dim: usize, bumps: Vec<GaussianBump>) -> Result<Self> {
        if space_dim == 0 {
            return Err(Error::Input("bias space dimension must be at least 1".into()));
        }
        for b in &bumps {
            check_dim(space_dim, b.dim())?;
        }
        Ok(Self { space_dim, bumps })
    }

    pub fn space_dim(&self) -> usize {
        self.space_dim
    }

    pub fn bumps(&self) -> &[GaussianBump] {
        &self.bumps
    }

    pub fn len(&self) -> usize {
        self.bumps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bumps.is_empty()
    }

    pub fn push(&mut self, bump: GaussianBump) -> Result<()> {
        check_dim(self.space_dim, bump.dim())?;
        self.bumps.push(bump);
        Ok(())
    }

    pub fn value(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.space_dim, y.len())?;
        let mut scratch = BiasScratch::new(self.space_dim);
        Ok(self.value_with(y, &mut scratch))
    }

    pub fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.space_dim, y.len())?;
        let mut scratch = BiasScratch::new(self.space_dim);
        let mut out = vec![0.0; self.space_dim];
        self.gradient_with(y, &mut out, &mut scratch, false);
        Ok(out)
    }

    /// Gradient evaluated without the isotropic fast path. Used to check that
    /// both paths agree.
    pub fn gradient_general(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.space_dim, y.len())?;
        let mut scratch = BiasScratch::new(self.space_dim);
        let mut out = vec![0.0; self.space_dim];
        self.gradient_with(y, &mut out, &mut scratch, true);
        Ok(out)
    }

    pub(crate) fn value_with(&self, y: &[f64], s: &mut BiasScratch) -> f64 {
        let mut acc = 0.0;
        for b in &self.bumps {
            let q = b.whiten(y, &mut s.z, &mut s.pz, false);
            acc += b.weight * (-0.5 * q).exp();
        }
        acc
    }

    /// `out = Σ_m η_m (−Ñ_m(y)) Σ_m⁻¹ (y − μ_m)`.
    #[inline]
    pub(crate) fn gradient_with(&self, y: &[f64], out: &mut [f64], s: &mut BiasScratch, general: bool) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for b in &self.bumps {
            let q = b.whiten(y, &mut s.z, &mut s.pz, general);
            let factor = b.weight * (-0.5 * q).exp();
            for (o, w) in out.iter_mut().zip(&s.pz) {
                *o -= factor * w;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Reusable buffers for bias evaluation in hot loops.
#[derive(Debug, Clone)]
pub(crate) struct BiasScratch {
    z: Vec<f64>,
    pz: Vec<f64>,
}

impl BiasScratch {
    pub(crate) fn new(dim: usize) -> Self {
        Self { z: vec![0.0; dim], pz: vec![0.0; dim] }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BumpDoc {
    weight: f64,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BiasDoc {
    space_dim: usize,
    bumps: Vec<BumpDoc>,
}

impl Serialize for BiasPotential {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let doc = BiasDoc {
            space_dim: self.space_dim,
            bumps: self
                .bumps
                .iter()
                .map(|b| BumpDoc {
                    weight: b.weight,
                    mean: b.mean.clone(),
                    covariance: b
                        .covariance
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                })
                .collect(),
        };
        doc.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for BiasPotential {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = BiasDoc::deserialize(de)?;
        let bumps = doc
            .bumps
            .into_iter()
            .map(|b| {
                let n = b.mean.len();
                if b.covariance.len() != n || b.covariance.iter().any(|r| r.len() != n) {
                    return Err(Error::Input("covariance shape does not match mean".into()));
                }
                let cov = DMatrix::from_fn(n, n, |i, j| b.covariance[i][j]);
                GaussianBump::new(b.weight, b.mean, cov)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        BiasPotential::new(doc.space_dim, bumps).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_bump_1d() -> BiasPotential {
        BiasPotential::new(1, vec![GaussianBump::isotropic(1.0, vec![0.0], 0.5).unwrap()]).unwrap()
    }

    fn central_fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }

    #[test]
    fn potential_values() {
        let p = PotentialSpec::new(vec![5.0]).unwrap();
        assert_eq!(p.value(&[-1.0]).unwrap(), 0.0);
        assert_eq!(p.value(&[0.0]).unwrap(), 5.0);
        let p2 = PotentialSpec::new(vec![5.0, 5.0]).unwrap();
        assert_eq!(p2.value(&[0.0, 1.0]).unwrap(), 5.0);
    }

    #[test]
    fn potential_gradient_values() {
        let p = PotentialSpec::new(vec![5.0]).unwrap();
        assert_eq!(p.gradient(&[1.0]).unwrap(), vec![0.0]);
        assert_eq!(p.gradient(&[-1.0]).unwrap(), vec![0.0]);
        assert_eq!(p.gradient(&[0.5]).unwrap(), vec![-7.5]);
    }

    #[test]
    fn potential_rejects_bad_input() {
        assert!(PotentialSpec::new(vec![]).is_err());
        assert!(PotentialSpec::new(vec![1.0, 0.0]).is_err());
        assert!(PotentialSpec::new(vec![-2.0]).is_err());
        let p = PotentialSpec::new(vec![1.0, 1.0]).unwrap();
        assert!(matches!(p.value(&[0.0]), Err(Error::Dimension { expected: 2, got: 1 })));
        assert!(p.gradient(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn potential_vanishes_at_all_corners() {
        let p = PotentialSpec::new(vec![1.0, 2.0, 3.0]).unwrap();
        for mask in 0..8u32 {
            let x: Vec<f64> = (0..3).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            assert_eq!(p.value(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn bias_closed_forms() {
        let empty = BiasPotential::empty(2);
        assert_eq!(empty.value(&[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(empty.gradient(&[0.3, -1.0]).unwrap(), vec![0.0, 0.0]);

        let b = one_bump_1d();
        assert_eq!(b.value(&[0.0]).unwrap(), 1.0);
        assert!((b.value(&[1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(b.gradient(&[0.0]).unwrap(), vec![0.0]);
        assert!((b.gradient(&[1.0]).unwrap()[0] + 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((b.gradient(&[1.0]).unwrap()[0] + 0.735759).abs() < 1e-6);
    }

    #[test]
    fn bias_dimension_errors() {
        let b = one_bump_1d();
        assert!(b.value(&[0.0, 1.0]).is_err());
        assert!(b.gradient(&[]).is_err());
        let mut b2 = BiasPotential::empty(2);
        assert!(b2.push(GaussianBump::isotropic(1.0, vec![0.0], 0.5).unwrap()).is_err());
    }

    #[test]
    fn covariance_must_be_spd() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianBump::new(1.0, vec![0.0, 0.0], bad).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianBump::new(1.0, vec![0.0, 0.0], asym).is_err());
        assert!(GaussianBump::isotropic(1.0, vec![0.0], -0.5).is_err());
    }

    #[test]
    fn general_covariance_matches_explicit_quadratic_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.3, 0.5]);
        let bump = GaussianBump::new(1.5, vec![0.2, -0.4], cov.clone()).unwrap();
        let y = [0.7, 0.1];
        let z = nalgebra::DVector::from_vec(vec![0.5, 0.5]);
        let q = (z.transpose() * cov.try_inverse().unwrap() * &z)[(0, 0)];
        let b = BiasPotential::new(2, vec![bump]).unwrap();
        assert!((b.value(&y).unwrap() - 1.5 * (-0.5 * q).exp()).abs() < 1e-14);
    }

    #[test]
    fn isotropic_fast_path_is_bit_identical() {
        let bumps = (0..5)
            .map(|m| GaussianBump::isotropic(0.3 + m as f64, vec![m as f64 * 0.1, -0.2, 0.4], 0.5).unwrap())
            .collect();
        let b = BiasPotential::new(3, bumps).unwrap();
        for y in [[0.1, 0.2, 0.3], [-1.3, 2.0, 0.0], [0.0, 0.0, 0.0]] {
            let fast = b.gradient(&y).unwrap();
            let general = b.gradient_general(&y).unwrap();
            assert_eq!(
                fast.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                general.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn json_round_trip_preserves_bits() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.8, 0.1 + 0.2, 0.1 + 0.2, 0.5]);
        let b = BiasPotential::new(
            2,
            vec![
                GaussianBump::new(1.0 / 3.0, vec![std::f64::consts::PI, -1e-300], cov).unwrap(),
                GaussianBump::isotropic(0.95f64.powi(7), vec![0.1, 0.7], 0.5).unwrap(),
            ],
        )
        .unwrap();
        let back = BiasPotential::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back, b);
        let v: serde_json::Value = serde_json::from_str(&b.to_json().unwrap()).unwrap();
        assert_eq!(v["space_dim"], 2);
        assert_eq!(v["bumps"][0]["covariance"][0].as_array().unwrap().len(), 2);
    }

    #[test]
    fn json_rejects_unknown_and_malformed() {
        assert!(BiasPotential::from_json(r#"{"space_dim":1,"bumps":[],"extra":1}"#).is_err());
        assert!(BiasPotential::from_json(
            r#"{"space_dim":1,"bumps":[{"weight":1,"mean":[0],"covariance":[[0.5,0]]}]}"#
        )
        .is_err());
        assert!(BiasPotential::from_json(
            r#"{"space_dim":2,"bumps":[{"weight":1,"mean":[0],"covariance":[[0.5]]}]}"#
        )
        .is_err());
    }

    fn arb_bias(dim: usize) -> impl Strategy<Value = BiasPotential> {
        prop::collection::vec(
            (0.1f64..2.0, prop::collection::vec(-2.0f64..2.0, dim), 0.2f64..1.5),
            0..6,
        )
        .prop_map(move |bs| {
            let bumps = bs
                .into_iter()
                .map(|(w, m, v)| GaussianBump::isotropic(w, m, v).unwrap())
                .collect();
            BiasPotential::new(dim, bumps).unwrap()
        })
    }

    proptest! {
        #[test]
        fn potential_gradient_matches_finite_differences(
            alpha in prop::collection::vec(0.1f64..8.0, 1..5),
            seed in prop::collection::vec(-2.5f64..2.5, 5),
        ) {
            let p = PotentialSpec::new(alpha.clone()).unwrap();
            let x = &seed[..alpha.len()];
            let g = p.gradient(x).unwrap();
            let fd = central_fd(|y| p.value(y).unwrap(), x, 1e-5);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!(rel_err(*a, *b) <= 1e-6, "{a} vs {b}");
            }
        }

        #[test]
        fn potential_is_nonnegative(
            alpha in prop::collection::vec(0.1f64..8.0, 1..5),
            seed in prop::collection::vec(-3.0f64..3.0, 5),
        ) {
            let p = PotentialSpec::new(alpha.clone()).unwrap();
            prop_assert!(p.value(&seed[..alpha.len()]).unwrap() >= 0.0);
        }

        #[test]
        fn bias_gradient_matches_finite_differences(
            b in arb_bias(2),
            y in prop::collection::vec(-2.5f64..2.5, 2),
        ) {
            let g = b.gradient(&y).unwrap();
            let fd = central_fd(|z| b.value(z).unwrap(), &y, 1e-5);
            for (a, c) in g.iter().zip(&fd) {
                prop_assert!(rel_err(*a, *c) <= 1e-6, "{a} vs {c}");
            }
        }

        #[test]
        fn bias_is_permutation_invariant(
            b in arb_bias(2),
            y in prop::collection::vec(-2.5f64..2.5, 2),
        ) {
            let mut rev: Vec<_> = b.bumps().to_vec();
            rev.reverse();
            let r = BiasPotential::new(2, rev).unwrap();
            let (a, c) = (b.value(&y).unwrap(), r.value(&y).unwrap());
            prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn bias_json_round_trip(b in arb_bias(3)) {
            let back = BiasPotential::from_json(&b.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, b);
        }
    }
}
