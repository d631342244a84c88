//! Executable property suite.
//!
//! Each check turns one analytical statement about the dynamics into a
//! reproducible experiment with a verdict and quantitative margins. A failed
//! check always carries a counterexample that can be replayed from the
//! recorded seed and trial index.
//!
//! Integrations go through [`SuiteField`], which is the model field plus an
//! optional constant bias on the first coordinate. The bias exists only as a
//! negative control: with it set, the suite must fail.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bifurcation::{cluster_a, critical_gamma_two_seller, two_cluster_thresholds, ThresholdRegime};
use crate::equilibria::{
    solve_homogeneous, solve_two_cluster, solve_two_seller, ClusterSpec, Stability,
};
use crate::error::{Error, Result};
use crate::integrator::{basin_sample_dynamics, integrate_dynamics, IntegrationOptions, Trajectory};
use crate::model::{
    delta_field, jacobian, potential, simplex_residual, sup_norm, vector_field, DeltaState,
    Dynamics, MarketParams, PreferenceState,
};
use crate::sampling::{index_rng, uniform_in_box};

/// Check names paired with the statement each one tests, in suite order.
pub const CLAIMS: &[(&str, &str)] = &[
    ("simplex_decay", "the simplex residual obeys dr/dt = -γ r exactly"),
    ("gronwall_bound", "solutions stay below the exponential envelope J_i(0)e^{-γt} + (a_i/γ)(1 - e^{-γt})"),
    ("monotone_ordering", "initial conditions ordered like the attractiveness never change order"),
    ("eventual_ordering", "the coordinate ordering is eventually constant"),
    ("trapping", "after the last ordering change the state stays in the trapping set of the leader"),
    ("cooperative_region", "the difference dynamics are cooperative inside the trapping set"),
    ("convergence_census", "almost every trajectory converges to a stationary point"),
    ("homogeneous_census", "equal attractiveness: 2^N - 1 stationary points below a/N, N of them stable, otherwise a unique point"),
    ("contraction", "γ > a_N/2 gives a unique, globally attracting point ordered like the attractiveness"),
    ("gradient_structure", "the field is a gradient exactly when all attractiveness values are equal"),
    ("two_seller_regimes", "two sellers: three equilibria below a fold γ*, two at it, one above"),
    ("two_cluster_regimes", "two clusters: counts 3,1,3,1 iff k > N-k and A > 0, otherwise 3,1"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The parameters are outside the check's regime.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub seed: u64,
    pub trial: Option<usize>,
    pub initial_condition: Option<Vec<f64>>,
    pub state: Option<Vec<f64>>,
    pub time: Option<f64>,
    pub description: String,
}

impl Counterexample {
    fn new(seed: u64, description: impl Into<String>) -> Self {
        Self {
            seed,
            trial: None,
            initial_condition: None,
            state: None,
            time: None,
            description: description.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check_name: String,
    pub claim: String,
    pub params_used: Value,
    pub seed: u64,
    pub verdict: Verdict,
    pub details: BTreeMap<String, Value>,
    pub counterexample: Option<Counterexample>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.verdict != Verdict::Fail
    }
}

/// Accumulates details and the first counterexample for one check.
struct Builder {
    name: &'static str,
    params: Value,
    seed: u64,
    details: BTreeMap<String, Value>,
    counterexample: Option<Counterexample>,
    skipped: bool,
}

impl Builder {
    fn new(name: &'static str, params: Value, seed: u64) -> Self {
        Self {
            name,
            params,
            seed,
            details: BTreeMap::new(),
            counterexample: None,
            skipped: false,
        }
    }

    fn detail(&mut self, key: &str, v: impl Serialize) {
        self.details
            .insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    fn fail(&mut self, c: Counterexample) {
        if self.counterexample.is_none() {
            self.counterexample = Some(c);
        }
    }

    fn require(&mut self, ok: bool, description: impl FnOnce() -> String) {
        if !ok {
            let c = Counterexample::new(self.seed, description());
            self.fail(c);
        }
    }

    fn skip(mut self, reason: &str) -> CheckReport {
        self.skipped = true;
        self.detail("skip_reason", reason);
        self.finish()
    }

    fn finish(self) -> CheckReport {
        let verdict = if self.counterexample.is_some() {
            Verdict::Fail
        } else if self.skipped {
            Verdict::Skipped
        } else {
            Verdict::Pass
        };
        let claim = CLAIMS
            .iter()
            .find(|(n, _)| *n == self.name)
            .map_or("", |(_, c)| c);
        CheckReport {
            check_name: self.name.to_string(),
            claim: claim.to_string(),
            params_used: self.params,
            seed: self.seed,
            verdict,
            details: self.details,
            counterexample: self.counterexample,
        }
    }
}

fn params_json(p: &MarketParams) -> Value {
    json!({ "gamma": p.gamma(), "attractiveness": p.attractiveness() })
}

/// The model field with an optional bias added to dJ_1/dt.
#[derive(Debug, Clone)]
pub struct SuiteField {
    params: MarketParams,
    bias: f64,
}

impl SuiteField {
    pub fn new(params: MarketParams, bias: f64) -> Self {
        Self { params, bias }
    }

    pub fn exact(params: MarketParams) -> Self {
        Self::new(params, 0.0)
    }
}

impl Dynamics for SuiteField {
    fn params(&self) -> &MarketParams {
        &self.params
    }

    fn eval(&self, j: &[f64], out: &mut [f64]) {
        self.params.eval(j, out);
        out[0] += self.bias;
    }
}

/// Box used for random initial conditions: [-1, a_i/γ + 1] per coordinate.
pub fn initial_box(p: &MarketParams) -> (PreferenceState, PreferenceState) {
    let lower = vec![-1.0; p.n()];
    let upper = p.attractiveness().iter().map(|a| a / p.gamma() + 1.0).collect();
    (
        PreferenceState::new(lower).expect("finite"),
        PreferenceState::new(upper).expect("finite"),
    )
}

/// Initial condition `trial` of the stream for `seed`.
pub fn random_initial_condition(p: &MarketParams, seed: u64, trial: usize) -> Vec<f64> {
    let (lo, hi) = initial_box(p);
    uniform_in_box(&mut index_rng(seed, trial as u64), &lo, &hi)
}

fn trial_counterexample(seed: u64, trial: usize, s0: &[f64], description: String) -> Counterexample {
    Counterexample {
        seed,
        trial: Some(trial),
        initial_condition: Some(s0.to_vec()),
        state: None,
        time: None,
        description,
    }
}

fn run_trials(
    field: &SuiteField,
    trials: usize,
    opts: &IntegrationOptions,
    initial: impl Fn(usize) -> Vec<f64> + Sync,
) -> Vec<(usize, Vec<f64>, Result<Trajectory>)> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let s0 = initial(t);
            let traj = PreferenceState::new(s0.clone()).and_then(|s| integrate_dynamics(field, &s, opts));
            (t, s0, traj)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Individual checks

/// |r(t) - r(0)e^{-γt}| <= 100 abs_tol max(1, |r(0)|) at every sample. The
/// integrator controls error relative to |J|, so the bound scales with the
/// initial residual.
pub fn check_simplex_decay(field: &SuiteField, s0: &PreferenceState, opts: &IntegrationOptions, seed: u64) -> CheckReport {
    let p = field.params();
    let mut b = Builder::new("simplex_decay", params_json(p), seed);
    let traj = match integrate_dynamics(field, s0, opts) {
        Ok(t) => t,
        Err(e) => {
            b.fail(Counterexample::new(seed, format!("integration failed: {e}")));
            return b.finish();
        }
    };
    let r0 = simplex_residual(p, s0).unwrap_or(f64::NAN);
    let tol = 100.0 * opts.abs_tol * r0.abs().max(1.0);
    let mut worst = (0.0f64, 0usize);
    for (k, (t, s)) in traj.times.iter().zip(&traj.states).enumerate() {
        let r = simplex_residual(p, s).unwrap_or(f64::NAN);
        let err = (r - r0 * (-p.gamma() * t).exp()).abs();
        if !(err <= worst.0) {
            worst = (err, k);
        }
    }
    b.detail("max_deviation", worst.0);
    b.detail("tolerance", tol);
    b.detail("samples", traj.times.len());
    b.detail("initial_residual", r0);
    if !(worst.0 <= tol) {
        b.fail(Counterexample {
            seed,
            trial: None,
            initial_condition: Some(s0.to_vec()),
            state: Some(traj.states[worst.1].to_vec()),
            time: Some(traj.times[worst.1]),
            description: format!("residual deviates from r(0)e^(-γt) by {:e}", worst.0),
        });
    }
    b.finish()
}

/// J_i(t) <= J_i(0)e^{-γt} + (a_i/γ)(1 - e^{-γt}) + 10 abs_tol at every sample.
pub fn check_gronwall_bound(field: &SuiteField, s0: &PreferenceState, opts: &IntegrationOptions, seed: u64) -> CheckReport {
    let p = field.params();
    let mut b = Builder::new("gronwall_bound", params_json(p), seed);
    let traj = match integrate_dynamics(field, s0, opts) {
        Ok(t) => t,
        Err(e) => {
            b.fail(Counterexample::new(seed, format!("integration failed: {e}")));
            return b.finish();
        }
    };
    let slack = 10.0 * opts.abs_tol;
    let mut worst = (f64::NEG_INFINITY, 0usize);
    for (k, (t, s)) in traj.times.iter().zip(&traj.states).enumerate() {
        let decay = (-p.gamma() * t).exp();
        for (i, &ji) in s.iter().enumerate() {
            let bound = s0[i] * decay + p.attractiveness()[i] / p.gamma() * (1.0 - decay);
            let excess = ji - bound;
            if excess > worst.0 {
                worst = (excess, k);
            }
        }
    }
    b.detail("max_excess_over_bound", worst.0);
    b.detail("slack", slack);
    if !(worst.0 <= slack) {
        b.fail(Counterexample {
            seed,
            trial: None,
            initial_condition: Some(s0.to_vec()),
            state: Some(traj.states[worst.1].to_vec()),
            time: Some(traj.times[worst.1]),
            description: format!("a coordinate exceeds its envelope by {:e}", worst.0),
        });
    }
    b.finish()
}

/// Sorted initial conditions (concordant with the sorted attractiveness)
/// produce no ordering flips.
pub fn check_monotone_ordering(field: &SuiteField, seed: u64, trials: usize, opts: &IntegrationOptions) -> CheckReport {
    let p = field.params();
    let mut b = Builder::new("monotone_ordering", params_json(p), seed);
    let results = run_trials(field, trials, opts, |t| {
        let mut s = random_initial_condition(p, seed, t);
        s.sort_by(f64::total_cmp);
        s
    });
    let mut total_flips = 0usize;
    for (t, s0, traj) in results {
        match traj {
            Err(e) => b.fail(trial_counterexample(seed, t, &s0, format!("integration failed: {e}"))),
            Ok(traj) => {
                let flips: Vec<_> = traj.ordering_flips().collect();
                total_flips += flips.len();
                if let Some(f) = flips.first() {
                    let mut c = trial_counterexample(
                        seed,
                        t,
                        &s0,
                        format!("sellers {} and {} swap order", f.i + 1, f.j + 1),
                    );
                    c.time = Some(f.time);
                    b.fail(c);
                }
            }
        }
    }
    b.detail("trials", trials);
    b.detail("total_flips", total_flips);
    b.finish()
}

/// No ordering flips after `burn_in_fraction` of the horizon.
pub fn check_eventual_ordering(
    field: &SuiteField,
    seed: u64,
    trials: usize,
    opts: &IntegrationOptions,
    burn_in_fraction: f64,
) -> CheckReport {
    let p = field.params();
    let mut b = Builder::new("eventual_ordering", params_json(p), seed);
    let cutoff = burn_in_fraction * opts.t_max;
    let results = run_trials(field, trials, opts, |t| random_initial_condition(p, seed, t));
    let mut latest = 0.0f64;
    let mut total = 0usize;
    for (t, s0, traj) in results {
        match traj {
            Err(e) => b.fail(trial_counterexample(seed, t, &s0, format!("integration failed: {e}"))),
            Ok(traj) => {
                for f in traj.ordering_flips() {
                    total += 1;
                    latest = latest.max(f.time);
                    if f.time > cutoff {
                        let mut c = trial_counterexample(
                            seed,
                            t,
                            &s0,
                            format!("sellers {} and {} swap order after the burn-in", f.i + 1, f.j + 1),
                        );
                        c.time = Some(f.time);
                        b.fail(c);
                    }
                }
            }
        }
    }
    b.detail("trials", trials);
    b.detail("horizon", opts.t_max);
    b.detail("burn_in", cutoff);
    b.detail("total_flips", total);
    b.detail("latest_flip_time", latest);
    b.finish()
}

/// After max(last flip, burn_in_fraction · t_end) every sample lies in the
/// trapping set of the final leader, up to `tol`.
pub fn check_trapping(
    field: &SuiteField,
    seed: u64,
    trials: usize,
    opts: &IntegrationOptions,
    burn_in_fraction: f64,
    tol: f64,
) -> CheckReport {
    let p = field.params();
    let mut b = Builder::new("trapping", params_json(p), seed);
    let results = run_trials(field, trials, opts, |t| random_initial_condition(p, seed, t));
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0usize;
    for (t, s0, traj) in results {
        let traj = match traj {
            Ok(tr) => tr,
            Err(e) => {
                b.fail(trial_counterexample(seed, t, &s0, format!("integration failed: {e}")));
                continue;
            }
        };
        let last = traj.final_state();
        let top = (0..p.n())
            .max_by(|&x, &y| last[x].total_cmp(&last[y]))
            .unwrap_or(0);
        let start = traj
            .last_flip_time()
            .unwrap_or(0.0)
            .max(burn_in_fraction * traj.final_time());
        for (time, s) in traj.times.iter().zip(&traj.states) {
            if *time < start {
                continue;
            }
            checked += 1;
            let margin = s
                .iter()
                .zip(p.attractiveness())
                .map(|(&ji, &ai)| ji - s[top] - (p.attractiveness()[top] / ai).ln())
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(margin);
            if margin > tol {
                let mut c = trial_counterexample(
                    seed,
                    t,
                    &s0,
                    format!("outside the trapping set of seller {} by {margin:e}", top + 1),
                );
                c.time = Some(*time);
                c.state = Some(s.to_vec());
                b.fail(c);
                break;
            }
        }
    }
    b.detail("trials", trials);
    b.detail("samples_checked", checked);
    b.detail("max_violation", worst);
    b.detail("tolerance", tol);
    b.finish()
}

/// Off-diagonal entries of the difference-field Jacobian, by central
/// differences, are nonnegative inside Σ_j and positive in its interior.
pub fn check_cooperative_region(p: &MarketParams, seed: u64, samples: usize) -> CheckReport {
    let mut b = Builder::new("cooperative_region", params_json(p), seed);
    let n = p.n();
    let a = p.attractiveness();
    let h = 1e-6;
    let worst: Vec<(f64, f64, usize, Vec<f64>)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = index_rng(seed, s as u64);
            let base = (uniform_in_box(&mut rng, &[0.0], &[n as f64])[0] as usize).min(n - 1);
            let depth = uniform_in_box(&mut rng, &vec![0.0; n - 1], &vec![6.0; n - 1]);
            let deltas: Vec<f64> = (0..n - 1)
                .map(|pos| {
                    let seller = if pos < base { pos } else { pos + 1 };
                    (a[base] / a[seller]).ln() - depth[pos]
                })
                .collect();
            let eval = |d: &[f64]| delta_field(p, &DeltaState::new(base, d.to_vec()).expect("finite")).expect("sized");
            let mut min_entry = f64::INFINITY;
            let mut scale = 0.0f64;
            for c in 0..n - 1 {
                let mut up = deltas.clone();
                let mut dn = deltas.clone();
                up[c] += h;
                dn[c] -= h;
                let (fu, fd) = (eval(&up), eval(&dn));
                for r in 0..n - 1 {
                    let d = (fu[r] - fd[r]) / (2.0 * h);
                    scale = scale.max(d.abs());
                    if r != c {
                        min_entry = min_entry.min(d);
                    }
                }
            }
            (min_entry, scale, base, deltas)
        })
        .collect();
    let mut min_seen = f64::INFINITY;
    for (min_entry, scale, base, deltas) in &worst {
        min_seen = min_seen.min(*min_entry);
        if n > 2 && *min_entry < -1e-8 * scale.max(1.0) {
            let mut c = Counterexample::new(
                seed,
                format!("negative off-diagonal {min_entry:e} with base seller {}", base + 1),
            );
            c.state = Some(deltas.clone());
            b.fail(c);
        }
    }
    b.detail("samples", samples);
    b.detail("min_off_diagonal", if n > 2 { json!(min_seen) } else { Value::Null });
    b.finish()
}

/// Converged limits must be stationary for the model field; trajectories
/// that hit the horizon are reported, not failed.
pub fn check_convergence_census(field: &SuiteField, seed: u64, trials: usize, opts: &IntegrationOptions) -> CheckReport {
    let p = field.params();
    let mut b = Builder::new("convergence_census", params_json(p), seed);
    let (lo, hi) = initial_box(p);
    let outcomes = match basin_sample_dynamics(field, &lo, &hi, trials, seed, opts) {
        Ok(o) => o,
        Err(e) => {
            b.fail(Counterexample::new(seed, format!("integration failed: {e}")));
            return b.finish();
        }
    };
    let mut converged = 0usize;
    let mut non_converged = Vec::new();
    let mut worst_residual = 0.0f64;
    let mut limits: Vec<Vec<f64>> = Vec::new();
    for o in &outcomes {
        match &o.limit {
            None => non_converged.push(o.index),
            Some(l) => {
                converged += 1;
                let r = sup_norm(&vector_field(p, l).expect("sized"));
                worst_residual = worst_residual.max(r);
                if r > 1e-8 {
                    b.fail(Counterexample {
                        seed,
                        trial: Some(o.index),
                        initial_condition: Some(o.start.to_vec()),
                        state: Some(l.to_vec()),
                        time: Some(o.t_end),
                        description: format!("limit is not stationary: field norm {r:e}"),
                    });
                }
                if !limits.iter().any(|m| m.iter().zip(l.iter()).all(|(x, y)| (x - y).abs() < 1e-6)) {
                    limits.push(l.to_vec());
                }
            }
        }
    }
    b.detail("trials", trials);
    b.detail("converged", converged);
    b.detail("converged_fraction", converged as f64 / trials as f64);
    b.detail("non_converged_trials", non_converged);
    b.detail("distinct_limits", limits.len());
    b.detail("max_limit_residual", worst_residual);
    b.finish()
}

/// Point count and stable structure for equal attractiveness.
pub fn check_homogeneous_census(p: &MarketParams) -> CheckReport {
    let mut b = Builder::new("homogeneous_census", params_json(p), 0);
    if !p.is_homogeneous() {
        return b.skip("attractiveness values differ");
    }
    let set = match solve_homogeneous(p) {
        Ok(s) => s,
        Err(e) => {
            b.fail(Counterexample::new(0, format!("enumeration failed: {e}")));
            return b.finish();
        }
    };
    let n = p.n();
    let gamma = p.gamma();
    let stable: Vec<_> = set.points.iter().filter(|s| s.stability == Stability::Stable).collect();
    let worst_residual = set.points.iter().map(|s| s.residual).fold(0.0, f64::max);
    b.detail("points", set.points.len());
    b.detail("stable", stable.len());
    b.detail("gamma_critical", set.gamma_critical);
    b.detail("max_residual", worst_residual);
    b.require(worst_residual < 1e-10, || format!("residual {worst_residual:e} >= 1e-10"));
    if gamma < set.gamma_critical {
        let expected = (1usize << n) - 1;
        b.require(set.points.len() == expected, || {
            format!("{} stationary points, expected {expected}", set.points.len())
        });
        b.require(stable.len() == n, || format!("{} stable points, expected {n}", stable.len()));
        for s in &stable {
            let mut j = s.state.to_vec();
            j.sort_by(f64::total_cmp);
            let equal = (j[n - 2] - j[0]).abs() < 1e-9;
            let larger = j[n - 1] > j[n - 2];
            if !(equal && larger) {
                let mut c = Counterexample::new(0, "stable point without one dominant coordinate");
                c.state = Some(s.state.to_vec());
                b.fail(c);
            }
        }
    } else if set.points.len() != 1 {
        // The symmetric point is not alone: report the first other point.
        let mut c = Counterexample::new(
            0,
            format!(
                "{} stationary points at γ >= a/N; uniqueness holds from γ = {}",
                set.points.len(),
                set.gamma_unique
            ),
        );
        c.state = Some(set.points[1].state.to_vec());
        b.fail(c);
    }
    b.finish()
}

/// One shared, concordantly ordered limit when γ > a_N/2.
pub fn check_contraction(field: &SuiteField, seed: u64, trials: usize, opts: &IntegrationOptions) -> CheckReport {
    let p = field.params();
    let mut b = Builder::new("contraction", params_json(p), seed);
    if p.gamma() <= 0.5 * p.a_max() {
        return b.skip("γ <= a_N/2");
    }
    let (lo, hi) = initial_box(p);
    let outcomes = match basin_sample_dynamics(field, &lo, &hi, trials, seed, opts) {
        Ok(o) => o,
        Err(e) => {
            b.fail(Counterexample::new(seed, format!("integration failed: {e}")));
            return b.finish();
        }
    };
    let reference = outcomes.iter().find_map(|o| o.limit.clone());
    let mut max_spread = 0.0f64;
    for o in &outcomes {
        let Some(l) = &o.limit else {
            b.fail(Counterexample {
                seed,
                trial: Some(o.index),
                initial_condition: Some(o.start.to_vec()),
                state: None,
                time: Some(o.t_end),
                description: "no convergence within the horizon".into(),
            });
            continue;
        };
        let r = reference.as_ref().expect("some limit exists");
        let d = l.iter().zip(r.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        max_spread = max_spread.max(d);
        if d >= 1e-6 {
            b.fail(Counterexample {
                seed,
                trial: Some(o.index),
                initial_condition: Some(o.start.to_vec()),
                state: Some(l.to_vec()),
                time: Some(o.t_end),
                description: format!("limit differs from the first limit by {d:e}"),
            });
        }
    }
    if let Some(r) = &reference {
        let a = p.attractiveness();
        let ordered = (1..p.n()).all(|i| {
            if a[i] > a[i - 1] {
                r[i] > r[i - 1]
            } else {
                (r[i] - r[i - 1]).abs() < 1e-6
            }
        });
        b.detail("limit", r.to_vec());
        b.require(ordered, || "limit coordinates are not ordered like the attractiveness".into());
        let res = sup_norm(&vector_field(p, r).expect("sized"));
        b.detail("limit_residual", res);
        b.require(res < 1e-8, || format!("limit is not stationary for the model: {res:e}"));
    }
    b.detail("trials", trials);
    b.detail("max_pairwise_spread", max_spread);
    b.finish()
}

fn central_jacobian(p: &MarketParams, j: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = j.len();
    let mut out = vec![vec![0.0; n]; n];
    for c in 0..n {
        let mut up = j.to_vec();
        let mut dn = j.to_vec();
        up[c] += h;
        dn[c] -= h;
        let fu = vector_field(p, &PreferenceState::new(up).expect("finite")).expect("sized");
        let fd = vector_field(p, &PreferenceState::new(dn).expect("finite")).expect("sized");
        for r in 0..n {
            out[r][c] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    out
}

fn relative_error(x: f64, y: f64) -> f64 {
    (x - y).abs() / y.abs().max(1.0)
}

/// Derivative consistency plus the gradient dichotomy: for equal
/// attractiveness -∇V = F and the Jacobian is symmetric; otherwise some
/// sampled Jacobian is measurably asymmetric.
pub fn check_gradient_structure(p: &MarketParams, seed: u64, samples: usize) -> CheckReport {
    let mut b = Builder::new("gradient_structure", params_json(p), seed);
    let n = p.n();
    let (lo, hi) = initial_box(p);
    let h = 1e-5;
    let per_sample: Vec<(f64, f64, f64, Vec<f64>)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let j = uniform_in_box(&mut index_rng(seed, s as u64), &lo, &hi);
            let state = PreferenceState::new(j.clone()).expect("finite");
            let jac = jacobian(p, &state).expect("sized");
            let fd = central_jacobian(p, &j, h);
            let mut jac_err = 0.0f64;
            let mut asym = 0.0f64;
            for r in 0..n {
                for c in 0..n {
                    jac_err = jac_err.max(relative_error(jac[(r, c)], fd[r][c]));
                    asym = asym.max((jac[(r, c)] - jac[(c, r)]).abs());
                }
            }
            let mut grad_err = f64::NAN;
            if p.is_homogeneous() {
                let f = vector_field(p, &state).expect("sized");
                grad_err = 0.0;
                for i in 0..n {
                    let mut up = j.clone();
                    let mut dn = j.clone();
                    up[i] += h;
                    dn[i] -= h;
                    let vu = potential(p, &PreferenceState::new(up).expect("finite")).expect("homogeneous");
                    let vd = potential(p, &PreferenceState::new(dn).expect("finite")).expect("homogeneous");
                    grad_err = grad_err.max(relative_error(-(vu - vd) / (2.0 * h), f[i]));
                }
            }
            (jac_err, asym, grad_err, j)
        })
        .collect();

    let worst_jac = per_sample.iter().map(|x| x.0).fold(0.0, f64::max);
    let worst_asym = per_sample.iter().map(|x| x.1).fold(0.0, f64::max);
    b.detail("samples", samples);
    b.detail("max_jacobian_relative_error", worst_jac);
    b.detail("max_jacobian_asymmetry", worst_asym);
    if let Some(x) = per_sample.iter().find(|x| !(x.0 < 1e-6)) {
        let mut c = Counterexample::new(seed, format!("Jacobian differs from finite differences by {:e}", x.0));
        c.state = Some(x.3.clone());
        b.fail(c);
    }
    if p.is_homogeneous() {
        let worst_grad = per_sample.iter().map(|x| x.2).fold(0.0, f64::max);
        b.detail("max_gradient_relative_error", worst_grad);
        if let Some(x) = per_sample.iter().find(|x| !(x.2 < 1e-6)) {
            let mut c = Counterexample::new(seed, format!("-∇V differs from F by {:e}", x.2));
            c.state = Some(x.3.clone());
            b.fail(c);
        }
        if let Some(x) = per_sample.iter().find(|x| x.1 > 1e-12) {
            let mut c = Counterexample::new(seed, format!("Jacobian asymmetric by {:e}", x.1));
            c.state = Some(x.3.clone());
            b.fail(c);
        }
    } else {
        b.require(worst_asym > 1e-6, || "no asymmetric Jacobian found among the samples".into());
    }
    b.finish()
}

fn two_seller_count(a1: f64, a2: f64, gamma: f64) -> Result<Vec<crate::equilibria::StationaryPoint>> {
    solve_two_seller(&MarketParams::new(gamma, vec![a1, a2])?)
}

/// Root counts 3 / 2 (one marginal) / 1 across the two-seller fold.
pub fn check_two_seller_regimes(a1: f64, a2: f64) -> CheckReport {
    let mut b = Builder::new("two_seller_regimes", json!({ "attractiveness": [a1, a2] }), 0);
    let gs = match critical_gamma_two_seller(a1, a2) {
        Ok(g) => g,
        Err(e) => {
            b.fail(Counterexample::new(0, format!("threshold search failed: {e}")));
            return b.finish();
        }
    };
    let top = (a1 + a2) / 4.0;
    b.detail("gamma_star", gs);
    b.detail("bracket_upper", top);
    b.require(gs > 0.0 && gs < top, || format!("γ* = {gs} outside (0, {top})"));
    let probes = [
        ("below", gs * 0.9, 3usize),
        ("just_below", gs - 1e-9, 3),
        ("at", gs, 2),
        ("just_above", gs + 1e-9, 1),
        ("above", gs * 1.1, 1),
        ("beyond_bracket", top * 1.05, 1),
    ];
    let mut counts = BTreeMap::new();
    for (label, gamma, expected) in probes {
        match two_seller_count(a1, a2, gamma) {
            Err(e) => b.fail(Counterexample::new(0, format!("solve at γ = {gamma} failed: {e}"))),
            Ok(pts) => {
                counts.insert(label, pts.len());
                b.require(pts.len() == expected, || {
                    format!("{} roots at γ = {gamma}, expected {expected}", pts.len())
                });
                if label == "at" {
                    let marginal = pts.iter().filter(|s| s.stability == Stability::Marginal).count();
                    b.require(marginal == 1, || format!("{marginal} marginal roots at γ*"));
                }
                if label == "below" && pts.len() == 3 {
                    let st: Vec<_> = pts.iter().map(|s| s.stability).collect();
                    b.require(st == [Stability::Stable, Stability::Unstable, Stability::Stable], || {
                        format!("stabilities {st:?} below γ*")
                    });
                }
                if label == "beyond_bracket" && pts.len() == 1 {
                    let d = pts[0].state[0] - pts[0].state[1];
                    b.require(d < 0.0 && pts[0].stability == Stability::Stable, || {
                        format!("unique root has Δ = {d} and is {:?}", pts[0].stability)
                    });
                }
            }
        }
    }
    b.detail("root_counts", counts);
    b.finish()
}

/// Threshold dichotomy and the count sequence between thresholds.
pub fn check_two_cluster_regimes(c: &ClusterSpec) -> CheckReport {
    let mut b = Builder::new("two_cluster_regimes", serde_json::to_value(c).unwrap_or(Value::Null), 0);
    let regime = match two_cluster_thresholds(c) {
        Ok(r) => r,
        Err(e) => {
            b.fail(Counterexample::new(0, format!("threshold search failed: {e}")));
            return b.finish();
        }
    };
    let a = cluster_a(c);
    let peak = c.peak_gamma();
    b.detail("a_criterion", a);
    b.detail("peak_gamma", peak);
    b.detail("thresholds", regime);
    let predicted = 2 * c.k > c.n && a > 0.0;
    let non_monotone = matches!(regime, ThresholdRegime::NonMonotone { .. });
    b.require(predicted == non_monotone, || "regime disagrees with the A criterion".into());

    let values = regime.values();
    b.require(values.windows(2).all(|w| w[0] < w[1]), || "thresholds not increasing".into());
    b.require(values.iter().all(|&g| g > 0.0 && g < peak), || "threshold outside (0, γ_peak)".into());
    let mut bounds = vec![0.0];
    bounds.extend(&values);
    bounds.push(peak * 1.5);
    let mut counts = Vec::new();
    for w in bounds.windows(2) {
        match solve_two_cluster(c, 0.5 * (w[0] + w[1])) {
            Ok(pts) => counts.push(pts.len()),
            Err(e) => {
                b.fail(Counterexample::new(0, format!("solve failed: {e}")));
                return b.finish();
            }
        }
    }
    let expected: Vec<usize> = if non_monotone { vec![3, 1, 3, 1] } else { vec![3, 1] };
    let regime_string = counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    b.detail("regime_string", &regime_string);
    b.require(counts == expected, || format!("counts {regime_string} between thresholds"));
    b.finish()
}

// ---------------------------------------------------------------------------
// Suite

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub params: MarketParams,
    /// Two-seller pair for the fold check when `params` is not one.
    pub two_seller: Option<(f64, f64)>,
    pub cluster: Option<ClusterSpec>,
    pub seed: u64,
    pub trials: usize,
    pub samples: usize,
    pub options: IntegrationOptions,
    /// Fraction of the horizon after which ordering must be settled.
    pub burn_in_fraction: f64,
    pub trapping_tol: f64,
    /// Check names to run, in suite order; `None` runs all of them.
    pub checks: Option<Vec<String>>,
    /// Negative-control bias added to dJ_1/dt during integrations.
    pub field_bias: f64,
    /// Initial condition for the single-trajectory checks.
    pub initial_condition: Option<Vec<f64>>,
}

impl SuiteConfig {
    pub fn new(params: MarketParams) -> Self {
        let options = IntegrationOptions::for_params(&params);
        Self {
            params,
            two_seller: None,
            cluster: None,
            seed: 0,
            trials: 100,
            samples: 100,
            options,
            burn_in_fraction: 0.5,
            trapping_tol: 1e-6,
            checks: None,
            field_bias: 0.0,
            initial_condition: None,
        }
    }
}

/// Names in `requested` that are not checks.
pub fn unknown_checks(requested: &[String]) -> Vec<String> {
    requested
        .iter()
        .filter(|r| !CLAIMS.iter().any(|(n, _)| n == r))
        .cloned()
        .collect()
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckReport>> {
    if let Some(names) = &cfg.checks {
        let unknown = unknown_checks(names);
        if !unknown.is_empty() {
            return Err(Error::InvalidInput(format!("unknown check(s): {}", unknown.join(", "))));
        }
    }
    cfg.options.validate()?;
    if cfg.trials == 0 || cfg.samples == 0 {
        return Err(Error::InvalidInput("trials and samples must be at least 1".into()));
    }
    if !(cfg.burn_in_fraction > 0.0 && cfg.burn_in_fraction < 1.0) {
        return Err(Error::InvalidInput("burn_in_fraction must lie in (0, 1)".into()));
    }
    let p = &cfg.params;
    let s0 = match &cfg.initial_condition {
        Some(v) => PreferenceState::new(p.to_sorted(v))?,
        None => PreferenceState::new(random_initial_condition(p, cfg.seed, 0))?,
    };
    if s0.len() != p.n() {
        return Err(Error::DimensionMismatch { expected: p.n(), got: s0.len() });
    }
    let field = SuiteField::new(p.clone(), cfg.field_bias);
    let opts = &cfg.options;
    let selected = |name: &str| cfg.checks.as_ref().map_or(true, |c| c.iter().any(|x| x == name));

    let mut reports = Vec::new();
    for (name, _) in CLAIMS {
        if !selected(name) {
            continue;
        }
        let report = match *name {
            "simplex_decay" => check_simplex_decay(&field, &s0, opts, cfg.seed),
            "gronwall_bound" => check_gronwall_bound(&field, &s0, opts, cfg.seed),
            "monotone_ordering" => check_monotone_ordering(&field, cfg.seed, cfg.trials, opts),
            "eventual_ordering" => {
                check_eventual_ordering(&field, cfg.seed, cfg.trials, opts, cfg.burn_in_fraction)
            }
            "trapping" => check_trapping(
                &field,
                cfg.seed,
                cfg.trials,
                opts,
                cfg.burn_in_fraction,
                cfg.trapping_tol,
            ),
            "cooperative_region" => check_cooperative_region(p, cfg.seed, cfg.samples),
            "convergence_census" => check_convergence_census(&field, cfg.seed, cfg.trials, opts),
            "homogeneous_census" => check_homogeneous_census(p),
            "contraction" => check_contraction(&field, cfg.seed, cfg.trials, opts),
            "gradient_structure" => check_gradient_structure(p, cfg.seed, cfg.samples),
            "two_seller_regimes" => {
                let a = p.attractiveness();
                let pair = if p.n() == 2 && a[0] < a[1] {
                    Some((a[0], a[1]))
                } else {
                    cfg.two_seller
                };
                match pair {
                    Some((a1, a2)) => check_two_seller_regimes(a1, a2),
                    None => Builder::new("two_seller_regimes", Value::Null, 0)
                        .skip("no two-seller pair with a1 < a2 configured"),
                }
            }
            "two_cluster_regimes" => match &cfg.cluster {
                Some(c) => check_two_cluster_regimes(c),
                None => Builder::new("two_cluster_regimes", Value::Null, 0)
                    .skip("no cluster configured"),
            },
            _ => unreachable!("manifest entries are exhaustive"),
        };
        reports.push(report);
    }
    Ok(reports)
}
