//! The preference vector field, its derivatives, and the geometric sets
//! (attracting simplex, trapping sets, symmetry sectors) built on it.
//!
//! State coordinates and seller indices are 0-based throughout. Attractiveness
//! is stored sorted non-decreasing; [`MarketParams::permutation`] maps sorted
//! positions back to the caller's original seller labels.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Default tolerance for set-membership checks.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Friction and attractiveness: the complete parameterization of the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketParams {
    gamma: f64,
    attractiveness: Vec<f64>,
    #[serde(skip)]
    permutation: Vec<usize>,
}

impl MarketParams {
    /// Validates and stably sorts the attractiveness vector.
    pub fn new(gamma: f64, attractiveness: Vec<f64>) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "gamma must be a positive finite number, got {gamma}"
            )));
        }
        if attractiveness.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "attractiveness needs at least 2 sellers, got {}",
                attractiveness.len()
            )));
        }
        if let Some((i, a)) = attractiveness
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0))
        {
            return Err(Error::InvalidInput(format!(
                "attractiveness[{i}] must be a positive finite number, got {a}"
            )));
        }
        let mut permutation: Vec<usize> = (0..attractiveness.len()).collect();
        permutation.sort_by(|&x, &y| attractiveness[x].total_cmp(&attractiveness[y]));
        let sorted = permutation.iter().map(|&i| attractiveness[i]).collect();
        Ok(Self {
            gamma,
            attractiveness: sorted,
            permutation,
        })
    }

    pub fn homogeneous(n: usize, a: f64, gamma: f64) -> Result<Self> {
        Self::new(gamma, vec![a; n])
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Sorted attractiveness a_1 <= ... <= a_N.
    pub fn attractiveness(&self) -> &[f64] {
        &self.attractiveness
    }

    pub fn n(&self) -> usize {
        self.attractiveness.len()
    }

    /// `permutation()[i]` is the original label of the seller at sorted position `i`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn a_max(&self) -> f64 {
        self.attractiveness[self.n() - 1]
    }

    pub fn is_homogeneous(&self) -> bool {
        self.attractiveness.iter().all(|&a| a == self.attractiveness[0])
    }

    /// Same attractiveness, different friction.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "gamma must be a positive finite number, got {gamma}"
            )));
        }
        Ok(Self {
            gamma,
            ..self.clone()
        })
    }

    /// Reorders a vector given in original seller labels into sorted order.
    pub fn to_sorted(&self, original: &[f64]) -> Vec<f64> {
        self.permutation.iter().map(|&i| original[i]).collect()
    }

    /// Inverse of [`MarketParams::to_sorted`].
    pub fn to_original(&self, sorted: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; sorted.len()];
        for (pos, &label) in self.permutation.iter().enumerate() {
            out[label] = sorted[pos];
        }
        out
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Buyer preferences J, one entry per seller.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PreferenceState(Vec<f64>);

impl PreferenceState {
    pub fn new(j: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = j.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "preference J[{i}] is not finite ({v})"
            )));
        }
        Ok(Self(j))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for PreferenceState {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Differences Δ_i = J_i - J_base for every i != base, in increasing i.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaState {
    base: usize,
    deltas: Vec<f64>,
}

impl DeltaState {
    pub fn new(base: usize, deltas: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = deltas.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("delta[{i}] is not finite ({v})")));
        }
        if base > deltas.len() {
            return Err(Error::IndexOutOfRange {
                index: base,
                n: deltas.len() + 1,
            });
        }
        Ok(Self { base, deltas })
    }

    pub fn from_state(s: &PreferenceState, base: usize) -> Result<Self> {
        if base >= s.len() {
            return Err(Error::IndexOutOfRange {
                index: base,
                n: s.len(),
            });
        }
        let jb = s[base];
        let deltas = s
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != base)
            .map(|(_, &v)| v - jb)
            .collect();
        Ok(Self { base, deltas })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Seller index of the `pos`-th difference coordinate.
    pub fn seller(&self, pos: usize) -> usize {
        if pos < self.base {
            pos
        } else {
            pos + 1
        }
    }
}

/// Sectors of (R*)^{N-1} used to split the homogeneous stability analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SectorLabel {
    AllNegative,
    /// Position (in the difference vector) of the largest, positive coordinate.
    MaxPositiveAt(usize),
}

/// Sector containing `d`, or `None` when some coordinate is exactly zero.
pub fn sector_of(d: &DeltaState) -> Option<SectorLabel> {
    if d.deltas.iter().any(|&x| x == 0.0) {
        return None;
    }
    let (pos, &max) = d
        .deltas
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if max < 0.0 {
        Some(SectorLabel::AllNegative)
    } else {
        Some(SectorLabel::MaxPositiveAt(pos))
    }
}

/// Numerically stable softmax: writes exp(x_i) / Σ exp(x_k) into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Something that can drive the integrator: a vector field over the
/// preference space of a given market.
pub trait Dynamics: Sync {
    fn params(&self) -> &MarketParams;

    /// Unchecked evaluation; `j` and `out` have length `params().n()`.
    fn eval(&self, j: &[f64], out: &mut [f64]);
}

impl Dynamics for MarketParams {
    fn params(&self) -> &MarketParams {
        self
    }

    fn eval(&self, j: &[f64], out: &mut [f64]) {
        softmax_into(j, out);
        for ((o, &a), &ji) in out.iter_mut().zip(&self.attractiveness).zip(j) {
            *o = -self.gamma * ji + a * *o;
        }
    }
}

/// F_i(J) = -γ J_i + a_i exp(J_i) / Σ_k exp(J_k).
pub fn vector_field(p: &MarketParams, s: &PreferenceState) -> Result<Vec<f64>> {
    p.check_len(s.len())?;
    let mut out = vec![0.0; s.len()];
    p.eval(s, &mut out);
    Ok(out)
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn jacobian_unchecked(p: &MarketParams, j: &[f64]) -> DMatrix<f64> {
    let q = softmax(j);
    let a = p.attractiveness();
    DMatrix::from_fn(j.len(), j.len(), |r, c| {
        if r == c {
            -p.gamma() + a[r] * q[r] * (1.0 - q[r])
        } else {
            -a[r] * q[r] * q[c]
        }
    })
}

/// Jacobian of [`vector_field`]; row i holds ∂F_i/∂J_·.
pub fn jacobian(p: &MarketParams, s: &PreferenceState) -> Result<DMatrix<f64>> {
    p.check_len(s.len())?;
    Ok(jacobian_unchecked(p, s))
}

fn delta_terms(d: &[f64]) -> (f64, Vec<f64>, f64) {
    // Scale by exp(-m) so large differences cannot overflow.
    let m = d.iter().copied().fold(0.0, f64::max);
    let e: Vec<f64> = d.iter().map(|&x| (x - m).exp()).collect();
    let base = (-m).exp();
    let denom = base + e.iter().sum::<f64>();
    (base, e, denom)
}

/// Difference dynamics G_i^j = -γ Δ_i + (a_i e^{Δ_i} - a_j) / (1 + Σ_{k≠j} e^{Δ_k}).
pub fn delta_field(p: &MarketParams, d: &DeltaState) -> Result<Vec<f64>> {
    p.check_len(d.deltas.len() + 1)?;
    let a = p.attractiveness();
    let aj = a[d.base];
    let (base, e, denom) = delta_terms(&d.deltas);
    Ok(d.deltas
        .iter()
        .enumerate()
        .map(|(pos, &x)| -p.gamma() * x + (a[d.seller(pos)] * e[pos] - aj * base) / denom)
        .collect())
}

/// Analytic Jacobian of [`delta_field`] with respect to the difference coordinates.
pub fn delta_jacobian(p: &MarketParams, d: &DeltaState) -> Result<DMatrix<f64>> {
    p.check_len(d.deltas.len() + 1)?;
    let a = p.attractiveness();
    let aj = a[d.base];
    let (base, e, denom) = delta_terms(&d.deltas);
    let m = d.deltas.len();
    Ok(DMatrix::from_fn(m, m, |r, c| {
        let ai = a[d.seller(r)];
        if r == c {
            -p.gamma() + e[r] * (ai * (denom - e[r]) + aj * base) / (denom * denom)
        } else {
            -e[c] * (ai * e[r] - aj * base) / (denom * denom)
        }
    }))
}

/// r = Σ J_i / a_i - 1/γ; zero exactly on the attracting simplex.
pub fn simplex_residual(p: &MarketParams, s: &PreferenceState) -> Result<f64> {
    p.check_len(s.len())?;
    Ok(simplex_residual_unchecked(p, s))
}

pub(crate) fn simplex_residual_unchecked(p: &MarketParams, j: &[f64]) -> f64 {
    j.iter()
        .zip(p.attractiveness())
        .map(|(&x, &a)| x / a)
        .sum::<f64>()
        - 1.0 / p.gamma()
}

/// Gradient potential V(J) = (γ/2) Σ J_i² - a log Σ exp(J_i), equal attractiveness only.
pub fn potential(p: &MarketParams, s: &PreferenceState) -> Result<f64> {
    p.check_len(s.len())?;
    if !p.is_homogeneous() {
        return Err(Error::Unsupported(
            "the field is a gradient only when all attractiveness values are equal".into(),
        ));
    }
    let a = p.attractiveness()[0];
    let sq: f64 = s.iter().map(|x| x * x).sum();
    Ok(0.5 * p.gamma() * sq - a * log_sum_exp(s))
}

/// Membership of the trapping set S_top: J_i - J_top <= log(a_top / a_i) + tol for all i.
pub fn in_trapping_set(p: &MarketParams, s: &PreferenceState, top: usize, tol: f64) -> Result<bool> {
    p.check_len(s.len())?;
    if top >= p.n() {
        return Err(Error::IndexOutOfRange { index: top, n: p.n() });
    }
    Ok(trapping_margin(p, s, top) <= tol)
}

/// Largest violation max_i (J_i - J_top - log(a_top / a_i)); non-positive inside S_top.
pub(crate) fn trapping_margin(p: &MarketParams, j: &[f64], top: usize) -> f64 {
    let a = p.attractiveness();
    j.iter()
        .zip(a)
        .map(|(&ji, &ai)| ji - j[top] - (a[top] / ai).ln())
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(v: &[f64]) -> PreferenceState {
        PreferenceState::new(v.to_vec()).unwrap()
    }

    #[test]
    fn field_at_symmetric_origin() {
        let p = MarketParams::new(1.0, vec![1.0, 1.0]).unwrap();
        let f = vector_field(&p, &state(&[0.0, 0.0])).unwrap();
        assert_eq!(f, vec![0.5, 0.5]);
    }

    #[test]
    fn homogeneous_fixed_point_is_stationary() {
        let p = MarketParams::homogeneous(3, 1.0, 0.4).unwrap();
        let f = vector_field(&p, &state(&[5.0 / 6.0; 3])).unwrap();
        assert!(sup_norm(&f) < 1e-15);
    }

    #[test]
    fn field_matches_hand_evaluation() {
        let p = MarketParams::new(1.0, vec![1.0, 2.0]).unwrap();
        let f = vector_field(&p, &state(&[0.0, 2f64.ln()])).unwrap();
        assert!((f[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((f[1] - (4.0 / 3.0 - 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn field_survives_large_preferences() {
        let p = MarketParams::new(1.0, vec![1.0, 2.0, 3.0]).unwrap();
        let f = vector_field(&p, &state(&[700.0, 699.0, -700.0])).unwrap();
        assert!(f.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn non_finite_state_is_rejected() {
        assert!(matches!(
            PreferenceState::new(vec![0.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = MarketParams::new(1.0, vec![1.0, 2.0]).unwrap();
        assert_eq!(
            vector_field(&p, &state(&[0.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        );
    }

    #[test]
    fn params_are_validated_and_sorted() {
        assert!(MarketParams::new(0.0, vec![1.0, 1.0]).is_err());
        assert!(MarketParams::new(1.0, vec![1.0]).is_err());
        assert!(MarketParams::new(1.0, vec![1.0, -2.0]).is_err());

        let p = MarketParams::new(1.0, vec![3.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(p.attractiveness(), &[1.0, 1.0, 2.0, 3.0]);
        // stable: the two 1.0 sellers keep their relative order
        assert_eq!(p.permutation(), &[1, 3, 2, 0]);
        let orig = [30.0, 10.0, 20.0, 11.0];
        let sorted = p.to_sorted(&orig);
        assert_eq!(sorted, vec![10.0, 11.0, 20.0, 30.0]);
        assert_eq!(p.to_original(&sorted), orig.to_vec());
    }

    #[test]
    fn jacobian_at_symmetric_origin() {
        let p = MarketParams::new(1.0, vec![1.0, 1.0]).unwrap();
        let m = jacobian(&p, &state(&[0.0, 0.0])).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[-0.75, -0.25, -0.25, -0.75]));
    }

    #[test]
    fn delta_field_examples() {
        let p = MarketParams::homogeneous(4, 1.3, 0.7).unwrap();
        let d = DeltaState::new(3, vec![0.0; 3]).unwrap();
        assert_eq!(delta_field(&p, &d).unwrap(), vec![0.0; 3]);

        let p = MarketParams::new(1.0, vec![1.0, 2.0]).unwrap();
        let d = DeltaState::new(1, vec![0.0]).unwrap();
        assert_eq!(delta_field(&p, &d).unwrap(), vec![-0.5]);
    }

    #[test]
    fn delta_state_indexing() {
        let s = state(&[1.0, 4.0, 2.0, 8.0]);
        let d = DeltaState::from_state(&s, 2).unwrap();
        assert_eq!(d.deltas(), &[-1.0, 2.0, 6.0]);
        assert_eq!((0..3).map(|k| d.seller(k)).collect::<Vec<_>>(), vec![0, 1, 3]);
        assert!(DeltaState::from_state(&s, 4).is_err());
    }

    #[test]
    fn sectors() {
        let d = DeltaState::new(2, vec![-1.0, -0.5]).unwrap();
        assert_eq!(sector_of(&d), Some(SectorLabel::AllNegative));
        let d = DeltaState::new(2, vec![0.3, 0.9]).unwrap();
        assert_eq!(sector_of(&d), Some(SectorLabel::MaxPositiveAt(1)));
        let d = DeltaState::new(2, vec![0.0, 0.9]).unwrap();
        assert_eq!(sector_of(&d), None);
    }

    #[test]
    fn simplex_residual_examples() {
        let p = MarketParams::homogeneous(3, 1.0, 0.4).unwrap();
        assert!(simplex_residual(&p, &state(&[5.0 / 6.0; 3])).unwrap().abs() < 1e-15);
        let p = MarketParams::new(1.0, vec![1.0, 2.0]).unwrap();
        assert_eq!(simplex_residual(&p, &state(&[1.0, 1.0])).unwrap(), 0.5);
    }

    #[test]
    fn potential_examples() {
        let p = MarketParams::homogeneous(2, 1.0, 1.0).unwrap();
        let v = potential(&p, &state(&[0.0, 0.0])).unwrap();
        assert!((v + 2f64.ln()).abs() < 1e-15);
        let p = MarketParams::new(1.0, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            potential(&p, &state(&[0.0, 0.0])),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn trapping_set_examples() {
        let p = MarketParams::homogeneous(3, 1.0, 0.3).unwrap();
        assert!(in_trapping_set(&p, &state(&[0.2, 1.1, -3.0]), 1, 0.0).unwrap());

        let p = MarketParams::new(1.0, vec![1.0, 2.0]).unwrap();
        assert!(!in_trapping_set(&p, &state(&[0.8, 0.1]), 1, 0.0).unwrap());
        assert!(in_trapping_set(&p, &state(&[0.6, 0.1]), 1, 0.0).unwrap());
        assert!(matches!(
            in_trapping_set(&p, &state(&[0.6, 0.1]), 2, 0.0),
            Err(Error::IndexOutOfRange { index: 2, n: 2 })
        ));
    }

    #[test]
    fn log_sum_exp_is_overflow_safe() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
