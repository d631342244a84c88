//! Fold thresholds in the friction γ and γ sweeps.
//!
//! In the two-seller and two-cluster regimes the number of cluster
//! equilibria is 3 when the reduced field G has a negative local minimum and
//! a positive local maximum, and 1 otherwise. Writing h⁺(γ) = G(Δ⁺(γ)) and
//! h⁻(γ) = G(Δ⁻(γ)) for the critical values, every threshold is a zero of
//! h⁺ or h⁻ on (0, γ_peak), where γ_peak is the largest γ at which G still
//! has critical points.

use serde::{Deserialize, Serialize};

use crate::equilibria::{
    solve_homogeneous, solve_two_cluster, homogeneous_roots, ClusterSpec, ReducedField,
    Stability, StationaryPoint,
};
use crate::error::{Error, Result};
use crate::model::MarketParams;

/// Critical values (h⁻, h⁺) of the reduced field at γ, if it has critical points.
pub fn fold_values(c: &ClusterSpec, gamma: f64) -> Option<(f64, f64)> {
    let f = ReducedField { spec: *c, gamma };
    f.critical_points()
        .map(|(dm, dp)| (f.value(dm), f.value(dp)))
}

/// Bisection for a sign change of `f` on (lo, hi) given the signs at the
/// ends, so that neither end is evaluated. Converges to float resolution.
fn bisect_signed(mut lo: f64, mut hi: f64, lo_positive: bool, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) > 0.0) == lo_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn upper_fold(c: &ClusterSpec, gamma: f64) -> f64 {
    fold_values(c, gamma).map_or(f64::NAN, |v| v.1)
}

fn lower_fold(c: &ClusterSpec, gamma: f64) -> f64 {
    fold_values(c, gamma).map_or(f64::NAN, |v| v.0)
}

/// The friction γ* at which a two-seller market (a1 < a2) changes from
/// three equilibria to one. It is the zero of h⁺, which decreases from a1
/// at γ → 0 to (a1 - a2)/2 at γ = (a1 + a2)/4.
pub fn critical_gamma_two_seller(a1: f64, a2: f64) -> Result<f64> {
    if !(a1.is_finite() && a2.is_finite() && a1 > 0.0) {
        return Err(Error::InvalidInput(format!(
            "attractiveness must be positive and finite, got ({a1}, {a2})"
        )));
    }
    if a1 >= a2 {
        return Err(Error::Precondition(format!(
            "need a1 < a2, got ({a1}, {a2}); equal values bifurcate at a/2 by symmetry"
        )));
    }
    let c = ClusterSpec::new(2, 1, a1, a2)?;
    Ok(bisect_signed(0.0, c.peak_gamma(), true, |g| upper_fold(&c, g)))
}

/// A = (N-k) a_low (1 - L/2) - k a_high (1 + L/2) with L = log((N-k)/k).
/// With k > N-k, A > 0 is the condition for non-monotone equilibrium counts.
pub fn cluster_a(c: &ClusterSpec) -> f64 {
    let (n, k) = (c.n as f64, c.k as f64);
    let l = ((n - k) / k).ln();
    (n - k) * c.a_low * (1.0 - 0.5 * l) - k * c.a_high * (1.0 + 0.5 * l)
}

/// ((N-k) a_low + k a_high)/N²: the γ at which Δ⁺ or Δ⁻ passes through zero.
pub fn split_gamma(c: &ClusterSpec) -> f64 {
    let (n, k) = (c.n as f64, c.k as f64);
    ((n - k) * c.a_low + k * c.a_high) / (n * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum ThresholdRegime {
    /// Three equilibria below γ*, one above.
    Unimodal { gamma_star: f64 },
    /// Counts 3, 1, 3, 1 across (0, γ1), (γ1, γ2), (γ2, γ3), (γ3, ∞).
    NonMonotone { gamma1: f64, gamma2: f64, gamma3: f64 },
}

impl ThresholdRegime {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            ThresholdRegime::Unimodal { gamma_star } => vec![gamma_star],
            ThresholdRegime::NonMonotone {
                gamma1,
                gamma2,
                gamma3,
            } => vec![gamma1, gamma2, gamma3],
        }
    }
}

/// Saddle-node thresholds of the two-cluster field.
///
/// h⁺ starts at a_low/k and h⁻ at -a_high/(N-k) as γ → 0; both reach
/// A/(2k(N-k)) at γ_peak. When k > N-k and A > 0, h⁺ dips to
/// (a_low - a_high)/N < 0 at γ_split and comes back up, giving γ1 and γ2,
/// while h⁻ turns positive at γ3. Otherwise only h⁺ changes sign.
pub fn two_cluster_thresholds(c: &ClusterSpec) -> Result<ThresholdRegime> {
    let c = ClusterSpec::new(c.n, c.k, c.a_low, c.a_high)?;
    if c.a_low >= c.a_high {
        return Err(Error::Precondition(
            "cluster thresholds need a_low < a_high; equal attractiveness is the homogeneous case"
                .into(),
        ));
    }
    let peak = c.peak_gamma();
    let a = cluster_a(&c);
    if 2 * c.k > c.n && a > 0.0 {
        let split = split_gamma(&c);
        let gamma1 = bisect_signed(0.0, split, true, |g| upper_fold(&c, g));
        let gamma2 = bisect_signed(split, peak, false, |g| upper_fold(&c, g));
        let gamma3 = bisect_signed(0.0, peak, false, |g| lower_fold(&c, g));
        Ok(ThresholdRegime::NonMonotone {
            gamma1,
            gamma2,
            gamma3,
        })
    } else if a >= 0.0 {
        // A = 0 exactly: h⁺ only reaches zero at the peak.
        Ok(ThresholdRegime::Unimodal { gamma_star: peak })
    } else {
        Ok(ThresholdRegime::Unimodal {
            gamma_star: bisect_signed(0.0, peak, true, |g| upper_fold(&c, g)),
        })
    }
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeTag {
    Homogeneous,
    TwoSeller,
    TwoCluster,
}

impl std::str::FromStr for RegimeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(RegimeTag::Homogeneous),
            "two_seller" => Ok(RegimeTag::TwoSeller),
            "two_cluster" => Ok(RegimeTag::TwoCluster),
            other => Err(Error::InvalidInput(format!(
                "unknown regime '{other}' (expected homogeneous, two_seller or two_cluster)"
            ))),
        }
    }
}

/// A one-parameter family of markets indexed by γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum SweepFamily {
    Homogeneous { n: usize, a: f64 },
    TwoSeller { a1: f64, a2: f64 },
    TwoCluster { cluster: ClusterSpec },
}

impl SweepFamily {
    /// The family through `p` for the given solver; mismatches are errors.
    pub fn from_params(p: &MarketParams, tag: RegimeTag) -> Result<Self> {
        let a = p.attractiveness();
        match tag {
            RegimeTag::Homogeneous if p.is_homogeneous() => Ok(SweepFamily::Homogeneous {
                n: p.n(),
                a: a[0],
            }),
            RegimeTag::Homogeneous => Err(Error::InvalidInput(
                "regime homogeneous needs equal attractiveness".into(),
            )),
            RegimeTag::TwoSeller if p.n() == 2 => Ok(SweepFamily::TwoSeller { a1: a[0], a2: a[1] }),
            RegimeTag::TwoSeller => Err(Error::InvalidInput(format!(
                "regime two_seller needs 2 sellers, got {}",
                p.n()
            ))),
            RegimeTag::TwoCluster => ClusterSpec::from_params(p)
                .map(|cluster| SweepFamily::TwoCluster { cluster })
                .map_err(|e| Error::InvalidInput(format!("regime two_cluster: {e}"))),
        }
    }

    pub fn params(&self, gamma: f64) -> Result<MarketParams> {
        match *self {
            SweepFamily::Homogeneous { n, a } => MarketParams::homogeneous(n, a, gamma),
            SweepFamily::TwoSeller { a1, a2 } => MarketParams::new(gamma, vec![a1, a2]),
            SweepFamily::TwoCluster { cluster } => cluster.params(gamma),
        }
    }

    fn cluster(&self) -> Option<ClusterSpec> {
        match *self {
            SweepFamily::Homogeneous { .. } => None,
            SweepFamily::TwoSeller { a1, a2 } => ClusterSpec::new(2, 1, a1, a2).ok(),
            SweepFamily::TwoCluster { cluster } => Some(cluster),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            SweepFamily::Homogeneous { n, a } => MarketParams::homogeneous(n, a, 1.0).map(|_| ()),
            SweepFamily::TwoSeller { a1, a2 } => ClusterSpec::new(2, 1, a1.min(a2), a1.max(a2))
                .map(|_| ()),
            SweepFamily::TwoCluster { cluster } => {
                ClusterSpec::new(cluster.n, cluster.k, cluster.a_low, cluster.a_high).map(|_| ())
            }
        }
    }

    /// a/N when every seller has the same attractiveness.
    fn symmetric_gamma(&self) -> Option<f64> {
        match *self {
            SweepFamily::Homogeneous { n, a } => Some(a / n as f64),
            SweepFamily::TwoSeller { a1, a2 } if a1 == a2 => Some(a1 / 2.0),
            SweepFamily::TwoCluster { cluster } if cluster.a_low == cluster.a_high => {
                Some(cluster.a_low / cluster.n as f64)
            }
            _ => None,
        }
    }

    /// Number of equilibria (within the cluster subspace for cluster families).
    pub fn root_count(&self, gamma: f64) -> Result<usize> {
        match *self {
            SweepFamily::Homogeneous { n, a } => {
                let mut count = 1usize;
                let mut binom = 1usize;
                for k in 1..n {
                    binom = binom * (n - k) / k;
                    count += binom * homogeneous_roots(n, k, a, gamma)?.roots.len();
                }
                Ok(count)
            }
            _ => {
                let c = self.cluster().expect("scalar family");
                Ok(ReducedField::new(c, gamma)?.roots().len())
            }
        }
    }

    fn solve(&self, gamma: f64) -> Result<Vec<StationaryPoint>> {
        match *self {
            SweepFamily::Homogeneous { .. } => Ok(solve_homogeneous(&self.params(gamma)?)?.points),
            SweepFamily::TwoSeller { a1, a2 } => {
                let p = MarketParams::new(gamma, vec![a1, a2])?;
                // solve_two_seller expects sorted input; the params already are
                crate::equilibria::solve_two_seller(&p)
            }
            SweepFamily::TwoCluster { cluster } => solve_two_cluster(&cluster, gamma),
        }
    }

    /// Thresholds known in closed form or by one-dimensional bisection.
    fn known_thresholds(&self) -> Vec<f64> {
        match *self {
            SweepFamily::Homogeneous { .. } => Vec::new(),
            SweepFamily::TwoSeller { a1, a2 } if a1 < a2 => {
                critical_gamma_two_seller(a1, a2).map(|g| vec![g]).unwrap_or_default()
            }
            SweepFamily::TwoCluster { cluster } => two_cluster_thresholds(&cluster)
                .map(|r| r.values())
                .unwrap_or_default(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    SaddleNode,
    SymmetryBreaking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Threshold {
    pub gamma: f64,
    pub kind: ThresholdKind,
    pub count_below: usize,
    pub count_above: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootSample {
    /// J_1 - J_N in sorted seller order.
    pub delta: f64,
    pub stability: Stability,
    pub reduced_stability: Option<Stability>,
    /// Continuous-branch label, stable across slices.
    pub branch: usize,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slice {
    pub gamma: f64,
    /// True for points inserted by the sweep rather than taken from the grid.
    pub refined: bool,
    pub roots: Vec<RootSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BifurcationDiagram {
    pub family: SweepFamily,
    /// Increasing, including refinement points.
    pub gammas: Vec<f64>,
    pub slices: Vec<Slice>,
    pub thresholds: Vec<Threshold>,
    /// Root counts on the intervals between count-changing thresholds.
    pub regime_string: String,
}

/// Root gap below which a slice is considered near a fold.
const TANGENCY_GAP: f64 = 1e-6;

/// `n` points from `lo` to `hi` with a constant ratio.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
        return Err(Error::InvalidInput(format!(
            "geometric grid needs 0 < lo < hi, got ({lo}, {hi})"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("grid needs at least 2 points, got {n}")));
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    let mut g: Vec<f64> = (0..n).map(|i| lo * (ratio * i as f64).exp()).collect();
    g[n - 1] = hi;
    Ok(g)
}

fn refine_count_change(family: &SweepFamily, mut lo: f64, mut hi: f64, c_lo: usize) -> Result<f64> {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-13 * hi {
            break;
        }
        if family.root_count(mid)? == c_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn slice_at(family: &SweepFamily, gamma: f64, refined: bool) -> Result<Slice> {
    let roots = family
        .solve(gamma)?
        .into_iter()
        .map(|sp| {
            let j = sp.state.to_vec();
            RootSample {
                delta: j[0] - j[j.len() - 1],
                stability: sp.stability,
                reduced_stability: sp.reduced_stability,
                branch: usize::MAX,
                state: j,
            }
        })
        .collect();
    Ok(Slice {
        gamma,
        refined,
        roots,
    })
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

/// Greedy nearest-neighbour continuation of branch labels between slices.
fn assign_branches(slices: &mut [Slice]) {
    let mut next = 0usize;
    for i in 0..slices.len() {
        let (done, rest) = slices.split_at_mut(i);
        let cur = &mut rest[0];
        if let Some(prev) = done.last() {
            let mut pairs = Vec::new();
            for (a, r) in cur.roots.iter().enumerate() {
                for (b, q) in prev.roots.iter().enumerate() {
                    pairs.push((distance(&r.state, &q.state), a, b));
                }
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut used = vec![false; prev.roots.len()];
            for (_, a, b) in pairs {
                if cur.roots[a].branch == usize::MAX && !used[b] {
                    cur.roots[a].branch = prev.roots[b].branch;
                    used[b] = true;
                }
            }
        }
        for r in cur.roots.iter_mut().filter(|r| r.branch == usize::MAX) {
            r.branch = next;
            next += 1;
        }
    }
}

fn near_tangency(slice: &Slice) -> bool {
    let mut d: Vec<f64> = slice.roots.iter().map(|r| r.delta).collect();
    d.sort_by(f64::total_cmp);
    d.windows(2).any(|w| w[1] - w[0] < TANGENCY_GAP && w[1] != w[0])
}

/// Equilibria of `family` along `gammas` (increasing, at least two points).
///
/// Root-count changes between neighbouring grid points are refined by
/// bisection on the count. Thresholds known from the scalar analysis are
/// added when the grid steps over them without a net count change, and a/N
/// is recorded as symmetry breaking for equal attractiveness.
pub fn sweep(family: &SweepFamily, gammas: &[f64]) -> Result<BifurcationDiagram> {
    family.validate()?;
    if gammas.len() < 2 {
        return Err(Error::InvalidInput("gamma grid needs at least 2 points".into()));
    }
    if gammas.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(Error::InvalidInput("gamma grid values must be positive".into()));
    }
    if gammas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("gamma grid must be strictly increasing".into()));
    }
    let (g_lo, g_hi) = (gammas[0], gammas[gammas.len() - 1]);
    let counts = gammas
        .iter()
        .map(|&g| family.root_count(g))
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::new();
    for i in 0..gammas.len() - 1 {
        if counts[i] != counts[i + 1] {
            values.push(refine_count_change(family, gammas[i], gammas[i + 1], counts[i])?);
        }
    }
    for t in family.known_thresholds() {
        if t > g_lo && t < g_hi && values.iter().all(|v| (v - t).abs() > 1e-9 * t.max(1.0)) {
            values.push(t);
        }
    }
    let symmetric = family.symmetric_gamma().filter(|&s| s > g_lo && s < g_hi);
    if let Some(s) = symmetric {
        if values.iter().all(|v| (v - s).abs() > 1e-9) {
            values.push(s);
        }
    }
    values.sort_by(f64::total_cmp);

    // Count on each open interval between consecutive thresholds.
    let mut bounds = vec![g_lo];
    bounds.extend(&values);
    bounds.push(g_hi);
    let mut interval_counts = Vec::with_capacity(bounds.len() - 1);
    for w in bounds.windows(2) {
        let inside: Vec<usize> = gammas
            .iter()
            .zip(&counts)
            .filter(|(g, _)| **g > w[0] && **g < w[1])
            .map(|(_, c)| *c)
            .collect();
        let c = match inside.first() {
            Some(&c) => c,
            None => family.root_count(0.5 * (w[0] + w[1]))?,
        };
        interval_counts.push(c);
    }
    let thresholds: Vec<Threshold> = values
        .iter()
        .enumerate()
        .map(|(i, &g)| Threshold {
            gamma: g,
            kind: match symmetric {
                Some(s) if (g - s).abs() <= 1e-9 => ThresholdKind::SymmetryBreaking,
                _ => ThresholdKind::SaddleNode,
            },
            count_below: interval_counts[i],
            count_above: interval_counts[i + 1],
        })
        .collect();

    let mut regime: Vec<usize> = Vec::new();
    for c in interval_counts {
        if regime.last() != Some(&c) {
            regime.push(c);
        }
    }
    let regime_string = regime
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");

    // Slices: grid, thresholds, and midpoints next to near-tangent slices.
    let mut slices: Vec<Slice> = gammas
        .iter()
        .map(|&g| slice_at(family, g, false))
        .collect::<Result<_>>()?;
    let mut extra: Vec<f64> = values.clone();
    for (i, s) in slices.iter().enumerate() {
        if near_tangency(s) {
            if i > 0 {
                extra.push(0.5 * (gammas[i - 1] + gammas[i]));
            }
            if i + 1 < gammas.len() {
                extra.push(0.5 * (gammas[i] + gammas[i + 1]));
            }
        }
    }
    for g in extra {
        if gammas.iter().all(|&x| x != g) {
            slices.push(slice_at(family, g, true)?);
        }
    }
    slices.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    slices.dedup_by(|a, b| a.gamma == b.gamma);
    assign_branches(&mut slices);

    Ok(BifurcationDiagram {
        family: *family,
        gammas: slices.iter().map(|s| s.gamma).collect(),
        slices,
        thresholds,
        regime_string,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_criterion_values() {
        let c = ClusterSpec::new(8, 7, 1.0, 1.5).unwrap();
        assert!((cluster_a(&c) - 1.6889833570680524).abs() < 1e-12);
        let c = ClusterSpec::new(4, 3, 1.0, 2.0).unwrap();
        assert!((cluster_a(&c) + 1.1548569896616159).abs() < 1e-12);
        let c = ClusterSpec::new(6, 3, 1.0, 2.0).unwrap();
        assert!((cluster_a(&c) - 3.0 * (1.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn two_seller_preconditions() {
        assert!(matches!(critical_gamma_two_seller(2.0, 1.0), Err(Error::Precondition(_))));
        assert!(matches!(critical_gamma_two_seller(1.0, 1.0), Err(Error::Precondition(_))));
        assert!(critical_gamma_two_seller(-1.0, 1.0).is_err());
    }

    #[test]
    fn endpoint_values_of_fold_curves() {
        let c = ClusterSpec::new(8, 7, 1.0, 1.5).unwrap();
        let (lo, hi) = fold_values(&c, 1e-6).unwrap();
        assert!((hi - 1.0 / 7.0).abs() < 1e-3);
        assert!((lo + 1.5).abs() < 1e-3);
        let (lo, hi) = fold_values(&c, c.peak_gamma() * (1.0 - 1e-12)).unwrap();
        let end = cluster_a(&c) / (2.0 * 7.0);
        assert!((lo - end).abs() < 1e-5 && (hi - end).abs() < 1e-5);
        let (_, hi) = fold_values(&c, split_gamma(&c)).unwrap();
        assert!((hi - (1.0 - 1.5) / 8.0).abs() < 1e-12);
    }

    #[test]
    fn grid_is_geometric() {
        let g = geometric_grid(0.01, 1.0, 3).unwrap();
        assert!((g[1] - 0.1).abs() < 1e-15);
        assert_eq!(g[2], 1.0);
        assert!(geometric_grid(0.0, 1.0, 3).is_err());
        assert!(geometric_grid(0.1, 1.0, 1).is_err());
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let f = SweepFamily::TwoSeller { a1: 1.0, a2: 2.0 };
        assert!(sweep(&f, &[0.1]).is_err());
        assert!(sweep(&f, &[0.2, 0.1]).is_err());
        assert!(sweep(&f, &[-0.1, 0.1]).is_err());
    }

    #[test]
    fn regime_tag_parsing_and_mismatch() {
        assert_eq!("two_cluster".parse::<RegimeTag>().unwrap(), RegimeTag::TwoCluster);
        assert!("cluster".parse::<RegimeTag>().is_err());
        let p = MarketParams::new(0.3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(SweepFamily::from_params(&p, RegimeTag::TwoSeller).is_err());
        assert!(SweepFamily::from_params(&p, RegimeTag::Homogeneous).is_err());
        assert!(SweepFamily::from_params(&p, RegimeTag::TwoCluster).is_err());
    }
}
