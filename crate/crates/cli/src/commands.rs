//! The five subcommands. Seller labels in every output are 1-based and
//! follow the order in which attractiveness values were given.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use wkh_core::bifurcation::{geometric_grid, sweep, RegimeTag, SweepFamily};
use wkh_core::equilibria::{
    solve_general, solve_homogeneous, solve_two_cluster, solve_two_seller, ClusterSpec,
    StationaryPoint, MAX_ENUMERATION_N,
};
use wkh_core::integrator::{integrate, EventKind};
use wkh_core::model::{delta_field, simplex_residual, DeltaState};
use wkh_core::verify::{run_suite, unknown_checks, SuiteConfig, Verdict};
use wkh_core::{MarketParams, PreferenceState};

use crate::config::{config_error, Format, RunConfig, Solver, Spacing};
use crate::output::{emit, json_bytes, num, sidecar, write_atomic, Csv};
use crate::CliError;

fn runtime(e: wkh_core::Error) -> CliError {
    match e {
        wkh_core::Error::StepSizeUnderflow { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

/// snake_case name of a serde unit variant.
fn variant_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        _ => String::new(),
    }
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EventRecord {
    time: f64,
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    i: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    j: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top: Option<usize>,
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let p = cfg.params()?;
    let opts = cfg.integration_options(&p)?;
    let j0 = cfg.initial_condition.clone().ok_or_else(|| {
        CliError::Config("initial_condition: missing (use --j0 or the config key)".into())
    })?;
    if j0.len() != p.n() {
        return Err(CliError::Config(format!(
            "initial_condition: expected {} values, got {}",
            p.n(),
            j0.len()
        )));
    }
    let s0 = PreferenceState::new(p.to_sorted(&j0))
        .map_err(|e| CliError::Config(format!("initial_condition: {e}")))?;
    let traj = integrate(&p, &s0, &opts).map_err(runtime)?;

    let label = |sorted: usize| p.permutation()[sorted] + 1;
    let events: Vec<EventRecord> = traj
        .events
        .iter()
        .map(|e| {
            let mut r = EventRecord {
                time: e.time,
                kind: "",
                i: None,
                j: None,
                top: None,
            };
            match e.kind {
                EventKind::OrderingFlip { i, j } => {
                    let (a, b) = (label(i), label(j));
                    r.kind = "ordering_flip";
                    r.i = Some(a.min(b));
                    r.j = Some(a.max(b));
                }
                EventKind::EnteredTrappingSet { top } => {
                    r.kind = "entered_trapping_set";
                    r.top = Some(label(top));
                }
                EventKind::Converged => r.kind = "converged",
            }
            r
        })
        .collect();

    let residuals: Vec<f64> = traj
        .states
        .iter()
        .map(|s| simplex_residual(&p, s).expect("sized"))
        .collect();
    let states: Vec<Vec<f64>> = traj.states.iter().map(|s| p.to_original(s)).collect();
    let summary = json!({
        "converged": traj.converged(),
        "final_time": traj.final_time(),
        "accepted_steps": traj.accepted_steps,
        "rejected_steps": traj.rejected_steps,
        "events": events,
    });

    let bytes = match cfg.format() {
        Format::Csv => {
            let mut header = vec!["t".to_string()];
            header.extend(labels("J_", p.n()));
            header.push("residual".into());
            let mut csv = Csv::new(&header)?;
            for ((t, s), r) in traj.times.iter().zip(&states).zip(&residuals) {
                let mut row = vec![num(*t)];
                row.extend(s.iter().map(|x| num(*x)));
                row.push(num(*r));
                csv.row(&row)?;
            }
            csv.into_bytes()?
        }
        Format::Json => json_bytes(&json!({
            "t": traj.times,
            "states": states,
            "residual": residuals,
            "summary": summary,
        }))?,
    };
    emit(cfg.out.as_deref(), &bytes)?;
    if let Some(out) = &cfg.out {
        write_atomic(&sidecar(out, ".events.json"), &json_bytes(&summary)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PointRecord {
    index: usize,
    state: Vec<f64>,
    residual: f64,
    max_real_eigenvalue: f64,
    min_real_eigenvalue: f64,
    eigenvalues: Vec<[f64; 2]>,
    stability: wkh_core::equilibria::Stability,
    reduced_stability: Option<wkh_core::equilibria::Stability>,
    provenance: String,
}

fn solve_points(
    cfg: &RunConfig,
    p: &MarketParams,
) -> Result<(Vec<StationaryPoint>, &'static str), CliError> {
    let solver = cfg.equilibria.solver.unwrap_or(Solver::Auto);
    let distinct = {
        let a = p.attractiveness();
        1 + a.windows(2).filter(|w| w[1] != w[0]).count()
    };
    if solver == Solver::Auto {
        if p.is_homogeneous() && p.n() <= MAX_ENUMERATION_N {
            return Ok((solve_homogeneous(p).map_err(runtime)?.points, "homogeneous"));
        }
        if p.n() == 2 {
            return Ok((solve_two_seller(p).map_err(runtime)?, "two_seller"));
        }
        if distinct == 2 {
            let c = ClusterSpec::from_params(p).map_err(runtime)?;
            return Ok((
                solve_two_cluster(&c, p.gamma()).map_err(runtime)?,
                "two_cluster",
            ));
        }
    }
    let starts = cfg.equilibria.starts.unwrap_or(500);
    if starts == 0 {
        return Err(CliError::Config("starts: must be at least 1".into()));
    }
    let sol = solve_general(p, starts, cfg.seed()).map_err(runtime)?;
    Ok((sol.points, "multistart_newton"))
}

pub fn equilibria(cfg: &RunConfig) -> Result<(), CliError> {
    let p = cfg.params()?;
    let (points, solver) = solve_points(cfg, &p)?;
    let records: Vec<PointRecord> = points
        .iter()
        .enumerate()
        .map(|(k, s)| PointRecord {
            index: k + 1,
            state: p.to_original(&s.state),
            residual: s.residual,
            max_real_eigenvalue: s.max_real_eigenvalue(),
            min_real_eigenvalue: s.min_real_eigenvalue(),
            eigenvalues: s.eigenvalues.iter().map(|z| [z.re, z.im]).collect(),
            stability: s.stability,
            reduced_stability: s.reduced_stability,
            provenance: s.provenance.to_string(),
        })
        .collect();
    let bytes = match cfg.format() {
        Format::Csv => {
            let mut header = vec!["index".to_string()];
            header.extend(labels("J_", p.n()));
            header.extend(
                [
                    "residual",
                    "max_real_eigenvalue",
                    "min_real_eigenvalue",
                    "stability",
                    "reduced_stability",
                    "provenance",
                ]
                .map(String::from),
            );
            let mut csv = Csv::new(&header)?;
            for r in &records {
                let mut row = vec![r.index.to_string()];
                row.extend(r.state.iter().map(|x| num(*x)));
                row.push(num(r.residual));
                row.push(num(r.max_real_eigenvalue));
                row.push(num(r.min_real_eigenvalue));
                row.push(variant_name(&r.stability));
                row.push(
                    r.reduced_stability
                        .map_or(String::new(), |s| variant_name(&s)),
                );
                row.push(r.provenance.clone());
                csv.row(&row)?;
            }
            csv.into_bytes()?
        }
        Format::Json => json_bytes(&json!({
            "gamma": p.gamma(),
            "attractiveness": p.to_original(p.attractiveness()),
            "solver": solver,
            "count": records.len(),
            "points": records,
        }))?,
    };
    emit(cfg.out.as_deref(), &bytes)
}

// ---------------------------------------------------------------------------

fn sweep_family(cfg: &RunConfig) -> Result<SweepFamily, CliError> {
    let regime = cfg
        .sweep
        .regime
        .as_deref()
        .map(|r| {
            r.parse::<RegimeTag>()
                .map_err(|e| CliError::Config(format!("regime: {e}")))
        })
        .transpose()?;
    if let (None, Some(c)) = (&cfg.attractiveness, cfg.cluster_spec()?) {
        if regime.is_some_and(|r| r != RegimeTag::TwoCluster) {
            return Err(CliError::Config(
                "regime: a cluster configuration implies two_cluster".into(),
            ));
        }
        return Ok(SweepFamily::TwoCluster { cluster: c });
    }
    let a = cfg.attractiveness.clone().ok_or_else(|| {
        CliError::Config(
            "attractiveness: missing (use --attractiveness, the config key or a cluster)".into(),
        )
    })?;
    // γ does not matter for the family; any valid value will do.
    let p = MarketParams::new(cfg.gamma.unwrap_or(1.0), a).map_err(config_error)?;
    let tag = match regime {
        Some(t) => t,
        None if p.is_homogeneous() => RegimeTag::Homogeneous,
        None if p.n() == 2 => RegimeTag::TwoSeller,
        None => RegimeTag::TwoCluster,
    };
    SweepFamily::from_params(&p, tag).map_err(|e| CliError::Config(format!("regime: {e}")))
}

/// Upper end of the default grid: past the last threshold of the family.
fn default_gamma_max(f: &SweepFamily) -> f64 {
    match *f {
        SweepFamily::Homogeneous { n, a } => 1.25 * a * n as f64 / (4.0 * (n as f64 - 1.0)),
        SweepFamily::TwoSeller { a1, a2 } => 1.25 * (a1 + a2) / 4.0,
        SweepFamily::TwoCluster { cluster } => 1.1 * cluster.peak_gamma(),
    }
}

fn gamma_grid(cfg: &RunConfig, f: &SweepFamily) -> Result<Vec<f64>, CliError> {
    let s = &cfg.sweep;
    if let Some(g) = &s.gammas {
        return Ok(g.clone());
    }
    let hi = s.gamma_max.unwrap_or_else(|| default_gamma_max(f));
    let lo = s.gamma_min.unwrap_or(1e-3 * hi);
    let n = s.points.unwrap_or(400);
    match s.spacing.unwrap_or(Spacing::Geometric) {
        Spacing::Geometric => {
            geometric_grid(lo, hi, n).map_err(|e| CliError::Config(format!("grid: {e}")))
        }
        Spacing::Linear => {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo && n >= 2) {
                return Err(CliError::Config(format!(
                    "grid: need 0 < gamma_min < gamma_max and points >= 2, got ({lo}, {hi}, {n})"
                )));
            }
            Ok((0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect())
        }
    }
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let family = sweep_family(cfg)?;
    let gammas = gamma_grid(cfg, &family)?;
    let diagram = sweep(&family, &gammas).map_err(|e| match e {
        wkh_core::Error::InvalidInput(m) => CliError::Config(format!("grid: {m}")),
        other => runtime(other),
    })?;
    let thresholds = json!({
        "family": diagram.family,
        "regime_string": diagram.regime_string,
        "thresholds": diagram.thresholds,
    });
    let bytes = match cfg.format() {
        Format::Csv => {
            let header = ["gamma", "branch", "delta_1", "stability"].map(String::from);
            let mut csv = Csv::new(&header)?;
            for slice in &diagram.slices {
                for r in &slice.roots {
                    csv.row(&[
                        num(slice.gamma),
                        r.branch.to_string(),
                        num(r.delta),
                        variant_name(&r.stability),
                    ])?;
                }
            }
            csv.into_bytes()?
        }
        Format::Json => json_bytes(&diagram)?,
    };
    emit(cfg.out.as_deref(), &bytes)?;
    if let Some(out) = &cfg.out {
        write_atomic(&sidecar(out, ".thresholds.json"), &json_bytes(&thresholds)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn streamfield(cfg: &RunConfig) -> Result<(), CliError> {
    let p = cfg.params()?;
    if p.n() != 3 {
        return Err(CliError::Config(format!(
            "attractiveness: the stream field needs 3 sellers, got {}",
            p.n()
        )));
    }
    let s = &cfg.streamfield;
    let (lo, hi) = (s.min.unwrap_or(-3.0), s.max.unwrap_or(3.0));
    let points = s.points.unwrap_or(201);
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(CliError::Config(format!(
            "streamfield: need min < max, got ({lo}, {hi})"
        )));
    }
    if points < 2 {
        return Err(CliError::Config(format!(
            "streamfield: points must be at least 2, got {points}"
        )));
    }
    let base = s.base.unwrap_or(3);
    if !(1..=3).contains(&base) {
        return Err(CliError::Config(format!(
            "base: must be a seller label in 1..=3, got {base}"
        )));
    }
    // Sorted positions: DeltaState lists differences in increasing sorted index.
    let perm = p.permutation();
    let base_pos = perm
        .iter()
        .position(|&l| l == base - 1)
        .expect("permutation");
    let axes: Vec<usize> = (1..=3).filter(|&l| l != base).collect();
    let order: Vec<usize> = (0..3)
        .filter(|&pos| pos != base_pos)
        .map(|pos| perm[pos] + 1)
        .collect();
    let step = (hi - lo) / (points - 1) as f64;
    let coord = |i: usize| {
        if i + 1 == points {
            hi
        } else {
            lo + step * i as f64
        }
    };

    let rows: Vec<[f64; 4]> = (0..points * points)
        .into_par_iter()
        .map(|idx| {
            let (d1, d2) = (coord(idx / points), coord(idx % points));
            let by_axis = |label: usize| if label == axes[0] { d1 } else { d2 };
            let deltas: Vec<f64> = order.iter().map(|&l| by_axis(l)).collect();
            let g = delta_field(&p, &DeltaState::new(base_pos, deltas).expect("finite"))
                .expect("sized");
            let g_of = |label: usize| g[order.iter().position(|&l| l == label).expect("axis")];
            [d1, d2, g_of(axes[0]), g_of(axes[1])]
        })
        .collect();

    let bytes = match cfg.format() {
        Format::Csv => {
            let header = ["delta_1", "delta_2", "g_1", "g_2"].map(String::from);
            let mut csv = Csv::new(&header)?;
            for r in &rows {
                csv.row(&r.map(num))?;
            }
            csv.into_bytes()?
        }
        Format::Json => json_bytes(&json!({
            "base": base,
            "axes": axes,
            "min": lo,
            "max": hi,
            "points": points,
            "rows": rows,
        }))?,
    };
    emit(cfg.out.as_deref(), &bytes)
}

// ---------------------------------------------------------------------------

/// Runs the suite; returns whether every check passed.
pub fn verify(cfg: &RunConfig, field_bias: f64) -> Result<bool, CliError> {
    if cfg.format == Some(Format::Csv) {
        return Err(CliError::Config(
            "format: verify reports are JSON only".into(),
        ));
    }
    let v = &cfg.verify;
    if let Some(names) = &v.checks {
        let unknown = unknown_checks(names);
        if !unknown.is_empty() {
            return Err(CliError::Config(format!(
                "checks: unknown check(s) {}",
                unknown.join(", ")
            )));
        }
    }
    let p = cfg.params()?;
    let mut suite = SuiteConfig::new(p.clone());
    suite.options = cfg.integration_options(&p)?;
    suite.seed = cfg.seed();
    suite.checks = v.checks.clone();
    suite.field_bias = field_bias;
    if let Some(t) = v.trials {
        suite.trials = t;
    }
    if let Some(s) = v.samples {
        suite.samples = s;
    }
    if let Some(b) = v.burn_in_fraction {
        suite.burn_in_fraction = b;
    }
    if let Some(t) = v.trapping_tol {
        suite.trapping_tol = t;
    }
    suite.two_seller = v.two_seller.map(|[a1, a2]| (a1, a2));
    suite.cluster = match cfg.cluster_spec()? {
        Some(c) => Some(c),
        None => ClusterSpec::from_params(&p).ok(),
    };
    if let Some(j0) = &cfg.initial_condition {
        if j0.len() != p.n() {
            return Err(CliError::Config(format!(
                "initial_condition: expected {} values, got {}",
                p.n(),
                j0.len()
            )));
        }
        suite.initial_condition = Some(j0.clone());
    }
    let reports = run_suite(&suite).map_err(|e| CliError::Config(format!("verify: {e}")))?;
    let all_passed = reports.iter().all(|r| r.passed());
    for r in &reports {
        let tag = match r.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skipped => "SKIP",
        };
        eprintln!("[{tag}] {}", r.check_name);
    }
    let doc: Value = json!({
        "seed": suite.seed,
        "all_passed": all_passed,
        "reports": reports,
    });
    emit(cfg.out.as_deref(), &json_bytes(&doc)?)?;
    Ok(all_passed)
}

pub fn ensure_parent(out: Option<&Path>) -> Result<(), CliError> {
    if let Some(dir) = out
        .and_then(Path::parent)
        .filter(|d| !d.as_os_str().is_empty())
    {
        if !dir.is_dir() {
            return Err(CliError::Config(format!(
                "out: directory {} does not exist",
                dir.display()
            )));
        }
    }
    Ok(())
}
