//! Explicit time integration of the preference dynamics with event detection.
//!
//! Two schemes are available: classical fixed-step RK4 and the adaptive
//! Dormand-Prince 5(4) pair. Both report ordering flips (sign changes of
//! J_i - J_j, refined on the cubic Hermite interpolant of each step), entries
//! into the trapping set of the current leader, and convergence.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    sup_norm, trapping_margin, Dynamics, MarketParams, PreferenceState, MEMBERSHIP_TOL,
};
use crate::sampling::{index_rng, uniform_in_box};

/// Number of consecutive accepted steps the field norm must stay below
/// `convergence_tol` before convergence is declared.
pub const CONVERGENCE_STREAK: usize = 5;

const MIN_STEP: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FixedStepRk4,
    AdaptiveRk45,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrationOptions {
    pub scheme: Scheme,
    /// Initial step for the adaptive scheme, the step for RK4.
    pub dt_init: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub t_max: f64,
    /// Threshold on the sup-norm of the field.
    pub convergence_tol: f64,
    /// Minimum spacing between recorded samples.
    pub record_every: f64,
}

impl IntegrationOptions {
    /// Defaults scaled to the friction time constant: horizon 200/γ.
    pub fn for_params(p: &MarketParams) -> Self {
        let tau = 1.0 / p.gamma();
        Self {
            scheme: Scheme::AdaptiveRk45,
            dt_init: 1e-2 * tau.min(1.0),
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            t_max: 200.0 * tau,
            convergence_tol: 1e-10,
            record_every: 0.05 * tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt_init", self.dt_init),
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("t_max", self.t_max),
            ("convergence_tol", self.convergence_tol),
            ("record_every", self.record_every),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be a positive finite number, got {v}"
                )));
            }
        }
        for (name, v) in [("rel_tol", self.rel_tol), ("abs_tol", self.abs_tol)] {
            if v < 1e-13 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be at least 1e-13, got {v:e}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// J_i - J_j changed sign (i < j).
    OrderingFlip { i: usize, j: usize },
    EnteredTrappingSet { top: usize },
    Converged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderingEvent {
    pub time: f64,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PreferenceState>,
    /// Field value at each recorded sample, used for Hermite interpolation.
    pub slopes: Vec<Vec<f64>>,
    pub events: Vec<Event>,
    pub converged_to: Option<PreferenceState>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &PreferenceState {
        self.states.last().expect("trajectory always holds the initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory always holds the initial state")
    }

    pub fn converged(&self) -> bool {
        self.converged_to.is_some()
    }

    pub fn ordering_flips(&self) -> impl Iterator<Item = OrderingEvent> + '_ {
        self.events.iter().filter_map(|e| match e.kind {
            EventKind::OrderingFlip { i, j } => Some(OrderingEvent { time: e.time, i, j }),
            _ => None,
        })
    }

    pub fn last_flip_time(&self) -> Option<f64> {
        self.ordering_flips().map(|e| e.time).last()
    }
}

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th-order weights minus embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Stepper<'a, D: Dynamics> {
    field: &'a D,
    k: [Vec<f64>; 7],
    stage: Vec<f64>,
}

impl<'a, D: Dynamics> Stepper<'a, D> {
    fn new(field: &'a D) -> Self {
        let n = field.params().n();
        Self {
            field,
            k: std::array::from_fn(|_| vec![0.0; n]),
            stage: vec![0.0; n],
        }
    }

    /// One Dormand-Prince step. Returns the scaled error norm; `f_out` is the
    /// field at `y_out` (first-same-as-last).
    fn dp45(
        &mut self,
        y: &[f64],
        f0: &[f64],
        h: f64,
        opts: &IntegrationOptions,
        y_out: &mut [f64],
        f_out: &mut [f64],
    ) -> f64 {
        let n = y.len();
        self.k[0].copy_from_slice(f0);
        for s in 1..7 {
            for c in 0..n {
                let mut acc = 0.0;
                for (r, &w) in A[s][..s].iter().enumerate() {
                    acc += w * self.k[r][c];
                }
                self.stage[c] = y[c] + h * acc;
            }
            let (_, rest) = self.k.split_at_mut(s);
            self.field.eval(&self.stage, &mut rest[0]);
        }
        // Stage 7 was evaluated at the 5th-order solution.
        y_out.copy_from_slice(&self.stage);
        f_out.copy_from_slice(&self.k[6]);
        let mut err = 0.0f64;
        for c in 0..n {
            let e: f64 = (0..7).map(|s| E[s] * self.k[s][c]).sum::<f64>() * h;
            let scale = opts.abs_tol + opts.rel_tol * y[c].abs().max(y_out[c].abs());
            err = err.max(e.abs() / scale);
        }
        err
    }

    fn rk4(&mut self, y: &[f64], f0: &[f64], h: f64, y_out: &mut [f64], f_out: &mut [f64]) {
        let n = y.len();
        self.k[0].copy_from_slice(f0);
        for (s, frac) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
            for c in 0..n {
                self.stage[c] = y[c] + frac * h * self.k[s - 1][c];
            }
            let (_, rest) = self.k.split_at_mut(s);
            self.field.eval(&self.stage, &mut rest[0]);
        }
        for c in 0..n {
            y_out[c] = y[c]
                + h / 6.0 * (self.k[0][c] + 2.0 * self.k[1][c] + 2.0 * self.k[2][c] + self.k[3][c]);
        }
        self.field.eval(y_out, f_out);
    }
}

fn hermite(theta: f64, h: f64, y0: f64, f0: f64, y1: f64, f1: f64) -> f64 {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0
        + (t3 - 2.0 * t2 + theta) * h * f0
        + (-2.0 * t3 + 3.0 * t2) * y1
        + (t3 - t2) * h * f1
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Relative size below which a difference J_i - J_j is rounding noise. Two
/// sellers with equal attractiveness merge exponentially, and their
/// difference then dithers around zero at the ulp level.
const FLIP_DEADBAND: f64 = 1e-12;

/// Sign changes of J_i - J_j across one interval, located by bisection on the
/// cubic Hermite interpolant. Changes that stay inside the rounding deadband
/// at both ends are ignored.
fn scan_flips(
    t0: f64,
    h: f64,
    y0: &[f64],
    f0: &[f64],
    y1: &[f64],
    f1: &[f64],
    out: &mut Vec<OrderingEvent>,
) {
    let start = out.len();
    let n = y0.len();
    for i in 0..n {
        for j in i + 1..n {
            let d0 = y0[i] - y0[j];
            let d1 = y1[i] - y1[j];
            let (s0, s1) = (sign(d0), sign(d1));
            if s0 * s1 >= 0 {
                continue;
            }
            let scale = 1.0 + y0[i].abs().max(y0[j].abs());
            if d0.abs().max(d1.abs()) <= FLIP_DEADBAND * scale {
                continue;
            }
            let diff = |theta: f64| {
                hermite(theta, h, y0[i], f0[i], y1[i], f1[i])
                    - hermite(theta, h, y0[j], f0[j], y1[j], f1[j])
            };
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..48 {
                let mid = 0.5 * (lo + hi);
                if sign(diff(mid)) == s0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push(OrderingEvent {
                time: t0 + 0.5 * (lo + hi) * h,
                i,
                j,
            });
        }
    }
    out[start..].sort_by(|a, b| a.time.total_cmp(&b.time));
}

fn leader(j: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in j.iter().enumerate() {
        if v > j[best] {
            best = i;
        }
    }
    best
}

/// Integrates the preference dynamics from `s0`.
pub fn integrate(
    p: &MarketParams,
    s0: &PreferenceState,
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    integrate_dynamics(p, s0, opts)
}

/// Integrates any [`Dynamics`] implementation. Halts at the first of
/// sustained convergence or `t_max`.
pub fn integrate_dynamics<D: Dynamics>(
    field: &D,
    s0: &PreferenceState,
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    let p = field.params();
    let n = p.n();
    if s0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: s0.len(),
        });
    }

    let mut stepper = Stepper::new(field);
    let mut y = s0.as_slice().to_vec();
    let mut f = vec![0.0; n];
    field.eval(&y, &mut f);
    let mut y_new = vec![0.0; n];
    let mut f_new = vec![0.0; n];

    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![s0.clone()],
        slopes: vec![f.clone()],
        events: Vec::new(),
        converged_to: None,
        accepted_steps: 0,
        rejected_steps: 0,
    };

    let mut trapped_leader = None;
    let mut note_trapping = |t: f64, y: &[f64], events: &mut Vec<Event>| {
        let top = leader(y);
        let inside = trapping_margin(p, y, top) <= MEMBERSHIP_TOL;
        if inside && trapped_leader != Some(top) {
            events.push(Event {
                time: t,
                kind: EventKind::EnteredTrappingSet { top },
            });
        }
        trapped_leader = if inside { Some(top) } else { None };
    };
    note_trapping(0.0, &y, &mut traj.events);

    let mut streak = 0usize;
    let mut streak_start = 0.0;
    if sup_norm(&f) < opts.convergence_tol {
        streak = 1;
    }

    // Gershgorin: every Jacobian eigenvalue has modulus <= γ + a_max/2. Capping
    // h|λ| at 2 keeps the Dormand-Prince map contracting near stable points.
    let h_max = 2.0 / (p.gamma() + 0.5 * p.a_max());
    let mut t = 0.0;
    let mut h = opts.dt_init.min(opts.t_max).min(h_max);
    let mut last_record = 0.0;
    let mut flips = Vec::new();

    loop {
        if streak >= CONVERGENCE_STREAK {
            traj.events.push(Event {
                time: streak_start,
                kind: EventKind::Converged,
            });
            traj.converged_to = Some(PreferenceState::new(y.clone())?);
            break;
        }
        if t >= opts.t_max {
            break;
        }
        let step = match opts.scheme {
            Scheme::FixedStepRk4 => opts.dt_init,
            Scheme::AdaptiveRk45 => h,
        }
        .min(opts.t_max - t);

        let accepted = match opts.scheme {
            Scheme::FixedStepRk4 => {
                stepper.rk4(&y, &f, step, &mut y_new, &mut f_new);
                true
            }
            Scheme::AdaptiveRk45 => {
                let err = stepper.dp45(&y, &f, step, opts, &mut y_new, &mut f_new);
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                h = (step * factor).min(h_max);
                if err <= 1.0 {
                    true
                } else {
                    traj.rejected_steps += 1;
                    if h < MIN_STEP {
                        return Err(Error::StepSizeUnderflow { t, h });
                    }
                    false
                }
            }
        };
        if !accepted {
            continue;
        }
        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "integration produced a non-finite state at t = {t}"
            )));
        }

        flips.clear();
        scan_flips(t, step, &y, &f, &y_new, &f_new, &mut flips);
        traj.events.extend(flips.iter().map(|e| Event {
            time: e.time,
            kind: EventKind::OrderingFlip { i: e.i, j: e.j },
        }));

        // Land exactly on t_max rather than one ulp short of it.
        t = if opts.t_max - (t + step) <= 1e-12 * opts.t_max {
            opts.t_max
        } else {
            t + step
        };
        traj.accepted_steps += 1;
        std::mem::swap(&mut y, &mut y_new);
        std::mem::swap(&mut f, &mut f_new);
        note_trapping(t, &y, &mut traj.events);

        if sup_norm(&f) < opts.convergence_tol {
            if streak == 0 {
                streak_start = t;
            }
            streak += 1;
        } else {
            streak = 0;
        }

        let finishing = streak >= CONVERGENCE_STREAK || t >= opts.t_max;
        if t - last_record >= opts.record_every || finishing {
            traj.times.push(t);
            traj.states.push(PreferenceState::new(y.clone())?);
            traj.slopes.push(f.clone());
            last_record = t;
        }
    }
    Ok(traj)
}

/// Ordering flips resolved from the recorded samples alone, using the stored
/// slopes for Hermite interpolation between consecutive samples.
pub fn detect_ordering_events(traj: &Trajectory) -> Vec<OrderingEvent> {
    let mut out = Vec::new();
    for w in 0..traj.times.len().saturating_sub(1) {
        let h = traj.times[w + 1] - traj.times[w];
        scan_flips(
            traj.times[w],
            h,
            &traj.states[w],
            &traj.slopes[w],
            &traj.states[w + 1],
            &traj.slopes[w + 1],
            &mut out,
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinOutcome {
    pub index: usize,
    pub start: PreferenceState,
    /// `None` when `t_max` was reached without convergence.
    pub limit: Option<PreferenceState>,
    pub t_end: f64,
}

/// Integrates `count` initial conditions drawn uniformly from the box
/// `[lower, upper]`. Item `k` uses its own random stream, so the result is
/// independent of scheduling.
pub fn basin_sample(
    p: &MarketParams,
    lower: &PreferenceState,
    upper: &PreferenceState,
    count: usize,
    seed: u64,
    opts: &IntegrationOptions,
) -> Result<Vec<BasinOutcome>> {
    basin_sample_dynamics(p, lower, upper, count, seed, opts)
}

pub fn basin_sample_dynamics<D: Dynamics>(
    field: &D,
    lower: &PreferenceState,
    upper: &PreferenceState,
    count: usize,
    seed: u64,
    opts: &IntegrationOptions,
) -> Result<Vec<BasinOutcome>> {
    let n = field.params().n();
    if count == 0 {
        return Err(Error::InvalidInput("count must be at least 1".into()));
    }
    for b in [lower, upper] {
        if b.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.len(),
            });
        }
    }
    if lower.iter().zip(upper.iter()).any(|(lo, hi)| lo > hi) {
        return Err(Error::InvalidInput("box lower bound exceeds upper bound".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = index_rng(seed, k as u64);
            let start = PreferenceState::new(uniform_in_box(&mut rng, lower, upper))?;
            let traj = integrate_dynamics(field, &start, opts)?;
            Ok(BasinOutcome {
                index: k,
                t_end: traj.final_time(),
                limit: traj.converged_to,
                start,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vector_field;

    fn state(v: &[f64]) -> PreferenceState {
        PreferenceState::new(v.to_vec()).unwrap()
    }

    #[test]
    fn options_are_validated() {
        let p = MarketParams::homogeneous(2, 1.0, 1.0).unwrap();
        let mut o = IntegrationOptions::for_params(&p);
        assert!(o.validate().is_ok());
        o.rel_tol = 1e-14;
        assert!(o.validate().is_err());
        let mut o = IntegrationOptions::for_params(&p);
        o.t_max = -1.0;
        assert!(matches!(integrate(&p, &state(&[0.0, 0.0]), &o), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stationary_start_converges_at_zero() {
        let p = MarketParams::homogeneous(3, 1.0, 0.4).unwrap();
        let s0 = state(&[5.0 / 6.0; 3]);
        let traj = integrate(&p, &s0, &IntegrationOptions::for_params(&p)).unwrap();
        let conv = traj
            .events
            .iter()
            .find(|e| e.kind == EventKind::Converged)
            .unwrap();
        assert_eq!(conv.time, 0.0);
        let limit = traj.converged_to.unwrap();
        assert!(sup_norm(&vector_field(&p, &limit).unwrap()) < 1e-10);
    }

    #[test]
    fn hermite_reproduces_cubics() {
        // y = t^3 on [0, 2]: y0 = 0, y1 = 8, f0 = 0, f1 = 12
        let v = hermite(0.5, 2.0, 0.0, 0.0, 8.0, 12.0);
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn flip_is_located_inside_step() {
        // J_0 - J_1 goes from -1 to 1 linearly.
        let mut out = Vec::new();
        scan_flips(1.0, 2.0, &[0.0, 1.0], &[1.0, 0.0], &[2.0, 1.0], &[1.0, 0.0], &mut out);
        assert_eq!(out.len(), 1);
        assert!((out[0].time - 2.0).abs() < 1e-10);
        assert_eq!((out[0].i, out[0].j), (0, 1));
    }

    #[test]
    fn rounding_dither_is_not_a_flip() {
        let mut out = Vec::new();
        let (a, b) = (0.7, 0.7 + 2e-16);
        scan_flips(0.0, 1.0, &[a, b], &[0.0, 0.0], &[b, a], &[0.0, 0.0], &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn touching_zero_is_not_a_flip() {
        let mut out = Vec::new();
        scan_flips(0.0, 1.0, &[1.0, 1.0], &[0.0, 1.0], &[1.0, 2.0], &[0.0, 1.0], &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn basin_sample_rejects_bad_boxes() {
        let p = MarketParams::homogeneous(2, 1.0, 1.0).unwrap();
        let o = IntegrationOptions::for_params(&p);
        let lo = state(&[1.0, 0.0]);
        let hi = state(&[0.0, 1.0]);
        assert!(basin_sample(&p, &lo, &hi, 3, 0, &o).is_err());
        assert!(basin_sample(&p, &hi, &hi, 0, 0, &o).is_err());
    }
}
