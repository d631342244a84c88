//! Stationary points and their stability.
//!
//! Three regimes are solved exactly through scalar reductions:
//!
//! - equal attractiveness: every equilibrium has at most two distinct
//!   coordinate values, fixed by Δ = g_k(Δ);
//! - two sellers, and more generally two clusters `a_1 = … = a_k < a_{k+1} = … = a_N`
//!   restricted to cluster configurations: the scalar field G_1(Δ_1), whose
//!   roots are bracketed on its monotone pieces.
//!
//! Everything else goes through multistart damped Newton on the attracting
//! simplex, which is a heuristic: it may miss points.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    jacobian_unchecked, simplex_residual_unchecked, softmax, sup_norm, Dynamics, MarketParams,
    PreferenceState,
};
use crate::sampling::halton;

/// Eigenvalues with real part inside ±STABILITY_MARGIN are treated as zero.
pub const STABILITY_MARGIN: f64 = 1e-8;

/// Sup-norm distance below which two roots are the same point.
pub const DEDUP_TOL: f64 = 1e-7;

pub const MAX_ENUMERATION_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

impl Stability {
    /// Classification from the largest real part of a spectrum (or a 1-D slope).
    pub fn from_max_real(max_re: f64) -> Self {
        if max_re < -STABILITY_MARGIN {
            Stability::Stable
        } else if max_re > STABILITY_MARGIN {
            Stability::Unstable
        } else {
            Stability::Marginal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RootSign {
    Negative,
    Zero,
    Positive,
}

/// Monotone piece of the scalar reduced field a root was found on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarBranch {
    /// The field is monotone on the whole line.
    Unique,
    Left,
    Middle,
    Right,
    /// Double root sitting on a critical point of the field.
    Fold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "solver", rename_all = "snake_case")]
pub enum Provenance {
    /// `k` coordinates offset by a root of the given sign from the rest
    /// (k = 0 is the symmetric point).
    HomogeneousBranch { k: usize, sign: RootSign },
    TwoSellerBranch { branch: ScalarBranch },
    TwoClusterBranch { branch: ScalarBranch },
    MultistartNewton,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::HomogeneousBranch { k, sign } => {
                let s = match sign {
                    RootSign::Negative => "-",
                    RootSign::Zero => "0",
                    RootSign::Positive => "+",
                };
                write!(f, "homogeneous(k={k},{s})")
            }
            Provenance::TwoSellerBranch { branch } => write!(f, "two_seller({})", format!("{branch:?}").to_lowercase()),
            Provenance::TwoClusterBranch { branch } => write!(f, "two_cluster({})", format!("{branch:?}").to_lowercase()),
            Provenance::MultistartNewton => write!(f, "multistart_newton"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPoint {
    pub state: PreferenceState,
    /// Sup-norm of the vector field at `state`.
    pub residual: f64,
    /// Jacobian spectrum sorted by (real, imaginary) part.
    pub eigenvalues: Vec<Complex<f64>>,
    /// Full-space stability from the Jacobian spectrum.
    pub stability: Stability,
    /// Stability for the scalar reduced dynamics, when the point came from one.
    pub reduced_stability: Option<Stability>,
    pub provenance: Provenance,
}

impl StationaryPoint {
    pub fn new(p: &MarketParams, state: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let state = PreferenceState::new(state)?;
        let (eigenvalues, stability) = classify_stability(p, &state)?;
        let mut f = vec![0.0; p.n()];
        p.eval(&state, &mut f);
        Ok(Self {
            residual: sup_norm(&f),
            state,
            eigenvalues,
            stability,
            reduced_stability: None,
            provenance,
        })
    }

    pub fn max_real_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_real_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.re).fold(f64::INFINITY, f64::min)
    }

    pub fn simplex_residual(&self, p: &MarketParams) -> f64 {
        simplex_residual_unchecked(p, &self.state)
    }
}

/// Jacobian spectrum, sorted by (real, imaginary) part.
///
/// The Jacobian is -γI + diag(a)(diag(q) - q qᵀ) with q = softmax(J), which
/// is similar to the symmetric matrix -γI + A^{1/2}(diag(q) - q qᵀ)A^{1/2}.
/// The spectrum is therefore real and is computed by a symmetric solver.
pub fn jacobian_spectrum(p: &MarketParams, j: &[f64]) -> Vec<Complex<f64>> {
    let q = softmax(j);
    let root_a: Vec<f64> = p.attractiveness().iter().map(|a| a.sqrt()).collect();
    let n = j.len();
    let sym = DMatrix::from_fn(n, n, |r, c| {
        let m = if r == c { q[r] * (1.0 - q[r]) } else { -q[r] * q[c] };
        let v = root_a[r] * m * root_a[c];
        if r == c {
            v - p.gamma()
        } else {
            v
        }
    });
    let mut ev: Vec<Complex<f64>> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|&re| Complex::new(re, 0.0))
        .collect();
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    ev
}

/// Jacobian spectrum and the resulting stability class. The state must be
/// stationary to within 1e-8. One eigenvalue is always close to -γ: it
/// belongs to the direction transverse to the attracting simplex.
pub fn classify_stability(
    p: &MarketParams,
    s: &PreferenceState,
) -> Result<(Vec<Complex<f64>>, Stability)> {
    if s.len() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            got: s.len(),
        });
    }
    let mut f = vec![0.0; p.n()];
    p.eval(s, &mut f);
    let r = sup_norm(&f);
    if r >= 1e-8 {
        return Err(Error::Precondition(format!(
            "state is not stationary: field sup-norm {r:e} >= 1e-8"
        )));
    }
    let ev = jacobian_spectrum(p, s);
    let max_re = ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok((ev, Stability::from_max_real(max_re)))
}

/// Sufficient condition γ > a_N / 2 for a unique, globally attracting equilibrium.
pub fn contraction_certificate(p: &MarketParams) -> bool {
    p.gamma() > 0.5 * p.a_max()
}

// ---------------------------------------------------------------------------
// Equal attractiveness

/// g_k(Δ) = (a/γ)(e^Δ - 1)/(k e^Δ + N - k), evaluated without overflow.
pub fn homogeneous_map(n: usize, k: usize, a: f64, gamma: f64, delta: f64) -> f64 {
    let (nf, kf) = (n as f64, k as f64);
    let scale = a / gamma;
    if delta > 0.0 {
        let e = (-delta).exp();
        scale * -(-delta).exp_m1() / (kf + (nf - kf) * e)
    } else {
        scale * delta.exp_m1() / (kf * delta.exp() + nf - kf)
    }
}

/// Bisection on a sign change of `f` over [lo, hi] down to an absolute width
/// of 1e-13 (or floating-point resolution).
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let s_lo = f(lo).signum();
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-13 || mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        if v == 0.0 {
            return mid;
        }
        if v.signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One Newton step from `x`, kept only if it stays in [lo, hi] and improves |f|.
fn polish(x: f64, lo: f64, hi: f64, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> f64 {
    let fx = f(x);
    let d = df(x);
    if d == 0.0 || !d.is_finite() {
        return x;
    }
    let y = x - fx / d;
    if y >= lo && y <= hi && f(y).abs() <= fx.abs() {
        y
    } else {
        x
    }
}

/// Nonzero roots Δ of Δ = g_k(Δ) for one offset count k.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomogeneousRoots {
    pub k: usize,
    /// Sorted. For γ < a/N exactly one negative and one positive root.
    /// For a/N <= γ < aN/(4k(N-k)) there can be two roots of the same sign.
    pub roots: Vec<f64>,
}

impl HomogeneousRoots {
    pub fn negative(&self) -> Option<f64> {
        self.roots.iter().copied().find(|&d| d < 0.0)
    }

    pub fn positive(&self) -> Option<f64> {
        self.roots.iter().rev().copied().find(|&d| d > 0.0)
    }
}

/// Offsets closer to zero than this are the symmetric point itself.
const ZERO_ROOT_TOL: f64 = 1e-9;

/// Nonzero solutions of Δ = g_k(Δ). Writing h(Δ) = γ(g_k(Δ) - Δ), h is the
/// two-cluster field with equal attractiveness, so it has at most three
/// monotone pieces and Δ = 0 is always one of its roots.
pub fn homogeneous_roots(n: usize, k: usize, a: f64, gamma: f64) -> Result<HomogeneousRoots> {
    let field = ReducedField::new(ClusterSpec::new(n, k, a, a)?, gamma)?;
    let roots = field
        .roots()
        .into_iter()
        .map(|r| r.delta)
        .filter(|d| d.abs() > ZERO_ROOT_TOL)
        .collect();
    Ok(HomogeneousRoots { k, roots })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousEquilibriumSet {
    /// a/N: the symmetric point is stable above it and unstable below.
    pub gamma_critical: f64,
    /// aN/(4(N-1)): above it the symmetric point is the only stationary point.
    pub gamma_unique: f64,
    /// Symmetric point first, then by (k, root, placement).
    pub points: Vec<StationaryPoint>,
    /// One entry per k in 1..N.
    pub roots: Vec<HomogeneousRoots>,
}

/// All stationary points for equal attractiveness.
///
/// Relative to the last seller, a stationary point has k coordinates offset
/// by a common Δ solving Δ = g_k(Δ) and the other N - k equal; the offset is
/// placed on every k-subset of the first N - 1 sellers. For γ < a/N this
/// gives 2^N - 1 points. For N >= 3 and a/N <= γ < aN/(4(N-1)) the
/// symmetric point coexists with pairs of same-sign offsets born in folds of
/// g_k, so the count there is larger than one.
pub fn solve_homogeneous(p: &MarketParams) -> Result<HomogeneousEquilibriumSet> {
    if !p.is_homogeneous() {
        return Err(Error::Unsupported(
            "solve_homogeneous needs equal attractiveness".into(),
        ));
    }
    let n = p.n();
    if n > MAX_ENUMERATION_N {
        return Err(Error::CombinatorialExplosion(n));
    }
    let a = p.attractiveness()[0];
    let gamma = p.gamma();
    let nf = n as f64;

    let mut points = vec![StationaryPoint::new(
        p,
        vec![a / (nf * gamma); n],
        Provenance::HomogeneousBranch {
            k: 0,
            sign: RootSign::Zero,
        },
    )?];
    if n == 1 {
        return Ok(HomogeneousEquilibriumSet {
            gamma_critical: a,
            gamma_unique: a,
            points,
            roots: Vec::new(),
        });
    }

    let roots = (1..n)
        .map(|k| homogeneous_roots(n, k, a, gamma))
        .collect::<Result<Vec<_>>>()?;

    let mut placements: Vec<Vec<u32>> = vec![Vec::new(); n];
    for mask in 1u32..(1u32 << (n - 1)) {
        placements[mask.count_ones() as usize].push(mask);
    }

    let mut specs = Vec::new();
    for r in &roots {
        for &delta in &r.roots {
            let sign = if delta < 0.0 {
                RootSign::Negative
            } else {
                RootSign::Positive
            };
            for &mask in &placements[r.k] {
                specs.push((r.k, sign, delta, mask));
            }
        }
    }
    let branch_points: Result<Vec<StationaryPoint>> = specs
        .par_iter()
        .map(|&(k, sign, delta, mask)| {
            let base = (a / gamma - k as f64 * delta) / nf;
            let state = (0..n)
                .map(|i| {
                    if i < n - 1 && mask & (1 << i) != 0 {
                        base + delta
                    } else {
                        base
                    }
                })
                .collect();
            StationaryPoint::new(p, state, Provenance::HomogeneousBranch { k, sign })
        })
        .collect();
    points.extend(branch_points?);

    Ok(HomogeneousEquilibriumSet {
        gamma_critical: a / nf,
        gamma_unique: a * nf / (4.0 * (nf - 1.0)),
        points,
        roots,
    })
}

// ---------------------------------------------------------------------------
// Two clusters (two sellers is the case N = 2, k = 1)

/// A market `a_1 = … = a_k = a_low <= a_{k+1} = … = a_N = a_high`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterSpec {
    pub n: usize,
    pub k: usize,
    pub a_low: f64,
    pub a_high: f64,
}

impl ClusterSpec {
    pub fn new(n: usize, k: usize, a_low: f64, a_high: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput(format!("cluster needs n >= 2, got {n}")));
        }
        if k == 0 || k >= n {
            return Err(Error::InvalidInput(format!(
                "low cluster size k must be in [1, {}], got {k}",
                n - 1
            )));
        }
        if !(a_low.is_finite() && a_high.is_finite() && a_low > 0.0 && a_low <= a_high) {
            return Err(Error::InvalidInput(format!(
                "cluster attractiveness must satisfy 0 < a_low <= a_high, got {a_low}, {a_high}"
            )));
        }
        Ok(Self {
            n,
            k,
            a_low,
            a_high,
        })
    }

    pub fn params(&self, gamma: f64) -> Result<MarketParams> {
        let mut a = vec![self.a_low; self.k];
        a.resize(self.n, self.a_high);
        MarketParams::new(gamma, a)
    }

    /// Recognizes a sorted two-valued attractiveness vector.
    pub fn from_params(p: &MarketParams) -> Result<Self> {
        let a = p.attractiveness();
        let k = a.iter().take_while(|&&x| x == a[0]).count();
        if k == a.len() {
            return Err(Error::Unsupported(
                "equal attractiveness has no cluster split; choose k explicitly".into(),
            ));
        }
        if a[k..].iter().any(|&x| x != a[k]) {
            return Err(Error::Unsupported(
                "attractiveness takes more than two distinct values".into(),
            ));
        }
        Self::new(a.len(), k, a[0], a[k])
    }

    /// (N-k) a_low + k a_high.
    pub(crate) fn weight(&self) -> f64 {
        (self.n - self.k) as f64 * self.a_low + self.k as f64 * self.a_high
    }

    /// a_low/(4k) + a_high/(4(N-k)): the maximum slope of the exchange term.
    pub fn peak_gamma(&self) -> f64 {
        self.weight() / (4.0 * (self.k * (self.n - self.k)) as f64)
    }
}

/// The scalar field governing cluster configurations:
/// G(Δ) = -γΔ + (a_low e^Δ - a_high)/(N - k + k e^Δ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedField {
    pub spec: ClusterSpec,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarRoot {
    pub delta: f64,
    /// G'(Δ) at the root.
    pub slope: f64,
    pub branch: ScalarBranch,
}

impl ScalarRoot {
    pub fn stability(&self) -> Stability {
        Stability::from_max_real(self.slope)
    }
}

impl ReducedField {
    pub fn new(spec: ClusterSpec, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "gamma must be a positive finite number, got {gamma}"
            )));
        }
        Ok(Self { spec, gamma })
    }

    fn exchange(&self, d: f64) -> f64 {
        let c = &self.spec;
        let (nk, k) = ((c.n - c.k) as f64, c.k as f64);
        if d > 0.0 {
            let e = (-d).exp();
            (c.a_low - c.a_high * e) / (nk * e + k)
        } else {
            let e = d.exp();
            (c.a_low * e - c.a_high) / (nk + k * e)
        }
    }

    pub fn value(&self, d: f64) -> f64 {
        -self.gamma * d + self.exchange(d)
    }

    pub fn slope(&self, d: f64) -> f64 {
        let c = &self.spec;
        let (nk, k) = ((c.n - c.k) as f64, c.k as f64);
        let w = c.weight();
        let bump = if d > 0.0 {
            let e = (-d).exp();
            w * e / (nk * e + k).powi(2)
        } else {
            let e = d.exp();
            w * e / (nk + k * e).powi(2)
        };
        -self.gamma + bump
    }

    /// Critical points Δ⁻ < Δ⁺ of G (where G' = 0), present iff γ is below
    /// the peak slope. They are symmetric about log((N-k)/k).
    pub fn critical_points(&self) -> Option<(f64, f64)> {
        let c = &self.spec;
        let nk = (c.n - c.k) as f64;
        let k = c.k as f64;
        let b = c.weight() / (k * nk * self.gamma);
        if b <= 4.0 {
            return None;
        }
        let y = b / 2.0 - 1.0 + (b * (b / 4.0 - 1.0)).sqrt();
        let centre = (nk / k).ln();
        let half = y.ln();
        Some((centre - half, centre + half))
    }

    /// |G(Δ)| at or below this counts as zero when deciding tangency.
    pub fn tangency_tol(&self) -> f64 {
        let c = &self.spec;
        let scale = (c.a_low / c.k as f64).max(c.a_high / (c.n - c.k) as f64);
        1e-12 * scale.max(1.0)
    }

    fn sign(&self, v: f64) -> i8 {
        if v.abs() <= self.tangency_tol() {
            0
        } else if v > 0.0 {
            1
        } else {
            -1
        }
    }

    /// All roots, in increasing order. Each monotone piece holds at most one
    /// simple root; a critical value within tolerance of zero is a double root.
    pub fn roots(&self) -> Vec<ScalarRoot> {
        let c = &self.spec;
        let bound = (c.a_low / c.k as f64).max(c.a_high / (c.n - c.k) as f64) / self.gamma;
        let crit = self.critical_points();
        let reach = crit.map_or(0.0, |(lo, hi)| lo.abs().max(hi.abs()));
        let outer = bound + reach + 1.0;

        let mut pieces = Vec::new();
        let mut folds = Vec::new();
        match crit {
            None => pieces.push((-outer, outer, ScalarBranch::Unique)),
            Some((dm, dp)) => {
                pieces.push((-outer, dm, ScalarBranch::Left));
                pieces.push((dm, dp, ScalarBranch::Middle));
                pieces.push((dp, outer, ScalarBranch::Right));
                for d in [dm, dp] {
                    if self.sign(self.value(d)) == 0 {
                        folds.push(d);
                    }
                }
            }
        }

        let mut roots = Vec::new();
        for (lo, hi, branch) in pieces {
            let (slo, shi) = (self.sign(self.value(lo)), self.sign(self.value(hi)));
            if slo * shi < 0 {
                let f = |d: f64| self.value(d);
                let d = polish(bisect(lo, hi, f), lo, hi, f, |d| self.slope(d));
                roots.push(ScalarRoot {
                    delta: d,
                    slope: self.slope(d),
                    branch,
                });
            }
        }
        for d in folds {
            roots.push(ScalarRoot {
                delta: d,
                slope: self.slope(d),
                branch: ScalarBranch::Fold,
            });
        }
        roots.sort_by(|a, b| a.delta.total_cmp(&b.delta));
        roots
    }

    /// Cluster configuration on the simplex with J_low - J_high = Δ.
    pub fn lift(&self, d: f64) -> Vec<f64> {
        let c = &self.spec;
        let (k, nk) = (c.k as f64, (c.n - c.k) as f64);
        let high = (1.0 / self.gamma - k * d / c.a_low) / (k / c.a_low + nk / c.a_high);
        let low = high + d;
        let mut j = vec![low; c.k];
        j.resize(c.n, high);
        j
    }
}

fn reduced_points(
    p: &MarketParams,
    field: &ReducedField,
    provenance: impl Fn(ScalarBranch) -> Provenance,
) -> Result<Vec<StationaryPoint>> {
    field
        .roots()
        .into_iter()
        .map(|r| {
            let mut sp = StationaryPoint::new(p, field.lift(r.delta), provenance(r.branch))?;
            sp.reduced_stability = Some(r.stability());
            Ok(sp)
        })
        .collect()
}

/// Stationary points of a two-seller market, ordered by Δ_1 = J_1 - J_2.
pub fn solve_two_seller(p: &MarketParams) -> Result<Vec<StationaryPoint>> {
    if p.n() != 2 {
        return Err(Error::Unsupported(format!(
            "solve_two_seller needs 2 sellers, got {}",
            p.n()
        )));
    }
    let a = p.attractiveness();
    let field = ReducedField::new(ClusterSpec::new(2, 1, a[0], a[1])?, p.gamma())?;
    reduced_points(p, &field, |branch| Provenance::TwoSellerBranch { branch })
}

/// Stationary points inside the two-cluster subspace, ordered by Δ_1.
/// `stability` is the full N-dimensional classification; `reduced_stability`
/// is the classification within the cluster subspace. They can differ.
pub fn solve_two_cluster(c: &ClusterSpec, gamma: f64) -> Result<Vec<StationaryPoint>> {
    let c = ClusterSpec::new(c.n, c.k, c.a_low, c.a_high)?;
    let p = c.params(gamma)?;
    let field = ReducedField::new(c, gamma)?;
    reduced_points(&p, &field, |branch| Provenance::TwoClusterBranch { branch })
}

// ---------------------------------------------------------------------------
// General case

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralSolution {
    /// Deduplicated roots sorted lexicographically by coordinates.
    pub points: Vec<StationaryPoint>,
    pub converged_starts: usize,
    pub failed_starts: usize,
    /// Always true: multistart search carries no completeness guarantee.
    pub heuristic: bool,
}

/// Reconstructs J_N from the first N-1 coordinates via the simplex identity.
fn complete_on_simplex(p: &MarketParams, x: &[f64], out: &mut Vec<f64>) {
    let a = p.attractiveness();
    let n = p.n();
    out.clear();
    out.extend_from_slice(x);
    let partial: f64 = x.iter().zip(a).map(|(&v, &ai)| v / ai).sum();
    out.push(a[n - 1] * (1.0 / p.gamma() - partial));
}

fn newton_on_simplex(p: &MarketParams, start: &[f64]) -> Option<Vec<f64>> {
    let n = p.n();
    let m = n - 1;
    let a = p.attractiveness();
    let blowup = 1e3 * (p.a_max() / p.gamma() + 1.0);

    let mut x: Vec<f64> = start[..m].to_vec();
    let mut j = Vec::with_capacity(n);
    let mut f = vec![0.0; n];
    let merit = |x: &[f64], j: &mut Vec<f64>, f: &mut Vec<f64>| {
        complete_on_simplex(p, x, j);
        p.eval(j, f);
        f[..m].iter().map(|v| v * v).sum::<f64>()
    };

    let mut phi = merit(&x, &mut j, &mut f);
    for _ in 0..100 {
        if sup_norm(&f) < 1e-14 {
            break;
        }
        let full = jacobian_unchecked(p, &j);
        let reduced = DMatrix::from_fn(m, m, |r, c| full[(r, c)] - a[n - 1] / a[c] * full[(r, n - 1)]);
        let rhs = DVector::from_iterator(m, f[..m].iter().map(|v| -v));
        let step = reduced.lu().solve(&rhs)?;

        let mut lambda = 1.0;
        let mut trial = vec![0.0; m];
        loop {
            for c in 0..m {
                trial[c] = x[c] + lambda * step[c];
            }
            let phi_trial = merit(&trial, &mut j, &mut f);
            if phi_trial.is_finite() && phi_trial <= (1.0 - 1e-4 * lambda) * phi {
                x.copy_from_slice(&trial);
                phi = phi_trial;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-8 {
                // Stalled: accept only if already at a root.
                complete_on_simplex(p, &x, &mut j);
                p.eval(&j, &mut f);
                return (sup_norm(&f) < 1e-10).then(|| j.clone());
            }
        }
        if x.iter().any(|v| v.abs() > blowup) {
            return None;
        }
    }
    complete_on_simplex(p, &x, &mut j);
    p.eval(&j, &mut f);
    (sup_norm(&f) < 1e-10).then_some(j)
}

/// Multistart damped Newton on the simplex Σ J_i/a_i = 1/γ, eliminating J_N.
/// Starts are Halton points (rotated by `seed`) mapped uniformly onto the
/// part of the simplex where every J_i > 0, which contains every equilibrium.
pub fn solve_general(p: &MarketParams, starts: usize, seed: u64) -> Result<GeneralSolution> {
    if starts == 0 {
        return Err(Error::InvalidInput("starts must be at least 1".into()));
    }
    let n = p.n();
    if n > 32 {
        return Err(Error::Unsupported(format!(
            "multistart search supports at most 32 sellers, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let a = p.attractiveness();

    let found: Vec<Option<Vec<f64>>> = (0..starts)
        .into_par_iter()
        .map(|i| {
            let u = halton(i as u64, n, &shift);
            let w: Vec<f64> = u.iter().map(|&v| -(1.0 - v).ln() + 1e-12).collect();
            let total: f64 = w.iter().sum();
            let start: Vec<f64> = w
                .iter()
                .zip(a)
                .map(|(&wi, &ai)| ai * wi / (total * p.gamma()))
                .collect();
            newton_on_simplex(p, &start)
        })
        .collect();

    let converged_starts = found.iter().filter(|r| r.is_some()).count();
    let mut roots: Vec<Vec<f64>> = found.into_iter().flatten().collect();
    roots.sort_by(|x, y| {
        x.iter()
            .zip(y)
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut unique: Vec<Vec<f64>> = Vec::new();
    for r in roots {
        let dup = unique.iter().any(|u| {
            u.iter()
                .zip(&r)
                .all(|(x, y)| (x - y).abs() < DEDUP_TOL)
        });
        if !dup {
            unique.push(r);
        }
    }
    let points = unique
        .into_iter()
        .map(|s| StationaryPoint::new(p, s, Provenance::MultistartNewton))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneralSolution {
        points,
        converged_starts,
        failed_starts: starts - converged_starts,
        heuristic: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stability_thresholds() {
        assert_eq!(Stability::from_max_real(-2e-8), Stability::Stable);
        assert_eq!(Stability::from_max_real(2e-8), Stability::Unstable);
        assert_eq!(Stability::from_max_real(5e-9), Stability::Marginal);
        assert_eq!(Stability::from_max_real(-5e-9), Stability::Marginal);
    }

    #[test]
    fn classify_rejects_non_stationary_states() {
        let p = MarketParams::homogeneous(2, 1.0, 1.0).unwrap();
        let s = PreferenceState::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(classify_stability(&p, &s), Err(Error::Precondition(_))));
    }

    #[test]
    fn contraction_boundary_is_strict() {
        let p = MarketParams::new(1.6, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(contraction_certificate(&p));
        assert!(!contraction_certificate(&p.with_gamma(1.5).unwrap()));
    }

    #[test]
    fn homogeneous_map_branches_agree_at_zero() {
        for d in [-1e-9, 0.0, 1e-9] {
            let v = homogeneous_map(3, 1, 1.0, 0.3, d);
            assert!((v - d / (0.3 * 3.0)).abs() < 1e-15);
        }
        // asymptotes a/(γk) and -a/(γ(N-k))
        assert!((homogeneous_map(4, 1, 1.0, 0.5, 800.0) - 2.0).abs() < 1e-12);
        assert!((homogeneous_map(4, 1, 1.0, 0.5, -800.0) + 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn offset_roots_around_threshold() {
        assert!(homogeneous_roots(3, 1, 1.0, 0.4).unwrap().roots.is_empty());
        assert!(homogeneous_roots(2, 1, 1.0, 0.5).unwrap().roots.is_empty());
        let r = homogeneous_roots(3, 1, 1.0, 0.3).unwrap();
        assert_eq!(r.roots.len(), 2);
        assert!(r.negative().unwrap() < 0.0 && r.positive().unwrap() > 0.0);
        // just above a/N, a fold pair of positive offsets for k = 1
        let r = homogeneous_roots(3, 1, 1.0, 0.35).unwrap();
        assert_eq!(r.roots.len(), 2);
        assert!(r.roots.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn heterogeneous_input_is_unsupported() {
        let p = MarketParams::new(0.2, vec![1.0, 2.0, 2.0]).unwrap();
        assert!(matches!(solve_homogeneous(&p), Err(Error::Unsupported(_))));
        assert!(matches!(solve_two_seller(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn enumeration_size_is_capped() {
        let p = MarketParams::homogeneous(26, 1.0, 0.01).unwrap();
        assert_eq!(solve_homogeneous(&p), Err(Error::CombinatorialExplosion(26)));
    }

    #[test]
    fn cluster_spec_validation() {
        assert!(ClusterSpec::new(4, 0, 1.0, 2.0).is_err());
        assert!(ClusterSpec::new(4, 4, 1.0, 2.0).is_err());
        assert!(ClusterSpec::new(4, 2, 2.0, 1.0).is_err());
        let c = ClusterSpec::new(4, 3, 1.0, 2.0).unwrap();
        assert_eq!(c.params(0.5).unwrap().attractiveness(), &[1.0, 1.0, 1.0, 2.0]);
        assert_eq!(ClusterSpec::from_params(&c.params(0.5).unwrap()).unwrap(), c);
        let three = MarketParams::new(0.5, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(ClusterSpec::from_params(&three).is_err());
    }

    #[test]
    fn lifted_points_sit_on_the_simplex() {
        let c = ClusterSpec::new(5, 3, 1.0, 1.7).unwrap();
        let f = ReducedField::new(c, 0.2).unwrap();
        let p = c.params(0.2).unwrap();
        for d in [-3.0, 0.0, 0.7] {
            let j = f.lift(d);
            assert!((j[0] - j[4] - d).abs() < 1e-12);
            assert!(simplex_residual_unchecked(&p, &j).abs() < 1e-12);
        }
    }

    #[test]
    fn reduced_field_is_overflow_safe() {
        let c = ClusterSpec::new(8, 7, 1.0, 1.5).unwrap();
        let f = ReducedField::new(c, 1e-3).unwrap();
        for d in [-2000.0, 2000.0] {
            assert!(f.value(d).is_finite());
            assert!(f.slope(d).is_finite());
        }
    }
}
