//! Cost accounting, trade-off sweeps, the exhaustive verification oracle,
//! and operation-count estimates for comparing the solvers.

use crate::dp::{
    self, backward_solve_benchmark, backward_solve_dpecms, eval_benchmark_candidate,
    forward_simulate_benchmark, forward_simulate_dpecms, start_state, BackupMode,
    BenchmarkConfig, DpEcmsConfig, SimError, SolveError, Solution, TerminalCost, TerminalSpec,
    Trajectory,
};
use crate::grid::StageGrids;
use crate::powertrain::VehicleParams;
use crate::route::{Route, RoutePoint, DEFAULT_V_FLOOR_MPS};
use crate::shooting::{shoot, ShootingConfig, ShootingError, ShootingResult};
use crate::spatial::{ControlBenchmark, ProblemConfig, StateVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{self, Write};
use thiserror::Error;

/// The weight schedule used for the standard trade-off sweep.
pub const GAMMA_SCHEDULE: [f64; 8] = [0.3, 0.4, 0.5, 0.65, 0.7, 0.75, 0.8, 0.82];

/// Which solver produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Benchmark,
    DpEcms,
    Lookahead,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Benchmark => "benchmark",
            SolverKind::DpEcms => "dpecms",
            SolverKind::Lookahead => "lookahead",
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Cumulative totals of one trajectory under one weight setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub gamma: f64,
    pub fuel_kg: f64,
    pub time_s: f64,
    /// Stage-summed weighted cost; equals the closed form
    /// `γ·fuel/norm + (1−γ)·time` to machine precision.
    pub cost: f64,
    pub solver: SolverKind,
    /// Whether the net state-of-charge change stayed within the terminal
    /// tolerance.
    pub soc_neutral: bool,
    pub soc_initial: f64,
    pub soc_final: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Shooting(#[from] ShootingError),
    #[error("exhaustive enumeration would visit {sequences} control sequences (limit {limit})")]
    TooLarge { sequences: u128, limit: u128 },
    #[error("reports are not comparable: {0}")]
    Mismatch(String),
}

/// Totals of a completed trajectory, checked against the closed-form cost
/// identity.
///
/// Panics if the stage-summed cost and the closed form
/// `γ·fuel/norm + (1−γ)·time` disagree beyond accumulated rounding — that
/// would mean the stage costs and the totals came from different numbers.
pub fn cumulative_cost(
    traj: &Trajectory,
    problem: &ProblemConfig,
    solver: SolverKind,
) -> CostReport {
    let closed =
        problem.gamma * traj.fuel_kg / problem.mdot_norm_kg_s + (1.0 - problem.gamma) * traj.time_s;
    let scale = closed.abs().max(1.0);
    assert!(
        (traj.cost - closed).abs() <= 1e-9 * scale,
        "stage-summed cost {} disagrees with closed form {}",
        traj.cost,
        closed
    );
    let soc_initial = traj.soc_initial();
    let soc_final = traj.soc_final();
    CostReport {
        gamma: problem.gamma,
        fuel_kg: traj.fuel_kg,
        time_s: traj.time_s,
        cost: traj.cost,
        solver,
        soc_neutral: (soc_final - soc_initial).abs() <= problem.soc_terminal_tol,
        soc_initial,
        soc_final,
    }
}

/// Percentage increase of `b`'s cost over `a`'s: `100·(J_b − J_a)/J_a`.
///
/// Refuses to compare across different weights or trajectories that are
/// not both charge-neutral — a cheaper cost achieved by draining the
/// battery is not a comparable cost.
pub fn cost_increment(a: &CostReport, b: &CostReport) -> Result<f64, EvalError> {
    if a.gamma != b.gamma {
        return Err(EvalError::Mismatch(format!(
            "weights differ: {} vs {}",
            a.gamma, b.gamma
        )));
    }
    if !a.soc_neutral || !b.soc_neutral {
        return Err(EvalError::Mismatch(format!(
            "both runs must be charge-neutral (got {} and {})",
            a.soc_neutral, b.soc_neutral
        )));
    }
    Ok(100.0 * (b.cost - a.cost) / a.cost)
}

/// Benchmark solve + replay with the charge-sustaining terminal window.
pub fn solve_benchmark_report(
    route: &Route,
    params: &VehicleParams,
    problem: &ProblemConfig,
    cfg: &BenchmarkConfig,
) -> Result<(CostReport, Trajectory, Solution<ControlBenchmark>), EvalError> {
    let sol = backward_solve_benchmark(
        route,
        params,
        problem,
        cfg,
        TerminalCost::Spec(TerminalSpec::charge_neutral(problem)),
    )?;
    let traj = forward_simulate_benchmark(&sol, start_state(route, problem), route, params, problem)?;
    Ok((cumulative_cost(&traj, problem, SolverKind::Benchmark), traj, sol))
}

/// Full-route torque-demand solve: tunes the equivalence-factor offset for
/// charge sustainability, then solves and replays at the tuned offset. The
/// terminal stays free — the offset carries the charge balance, and the
/// deliberately coarse SoC axis cannot represent a one-cell terminal window.
pub fn solve_dpecms_report(
    route: &Route,
    params: &VehicleParams,
    problem: &ProblemConfig,
    template: &DpEcmsConfig,
    shooting: &ShootingConfig,
) -> Result<
    (
        CostReport,
        Trajectory,
        Solution<dp::DpEcmsDecision>,
        ShootingResult,
    ),
    EvalError,
> {
    let tuned = shoot(route, params, problem, template, shooting)?;
    let mut cfg = template.clone();
    cfg.ecms.lambda0 = tuned.lambda0;
    let sol = backward_solve_dpecms(
        route,
        params,
        problem,
        &cfg,
        TerminalCost::Spec(TerminalSpec::SpeedEnvelopeOnly),
    )?;
    let traj =
        forward_simulate_dpecms(&sol, start_state(route, problem), route, params, problem, &cfg.ecms)?;
    Ok((
        cumulative_cost(&traj, problem, SolverKind::DpEcms),
        traj,
        sol,
        tuned,
    ))
}

/// One sweep entry: either a report or the failure that prevented it.
#[derive(Debug, Clone)]
pub struct ParetoEntry {
    pub gamma: f64,
    pub result: Result<CostReport, String>,
}

/// Solves the route once per weight value with the selected solver,
/// continuing past per-weight failures. The torque-demand solver re-tunes
/// its offset at every weight. Reports come back sorted by weight.
pub fn pareto_sweep(
    route: &Route,
    params: &VehicleParams,
    problem: &ProblemConfig,
    gammas: &[f64],
    solver: SolverKind,
    bench_cfg: &BenchmarkConfig,
    dpecms_template: &DpEcmsConfig,
    shooting: &ShootingConfig,
) -> Result<Vec<ParetoEntry>, EvalError> {
    if let SolverKind::Lookahead = solver {
        return Err(EvalError::Config(
            "sweeps cover the full-route solvers; run the receding-horizon controller directly"
                .into(),
        ));
    }
    if gammas.iter().any(|g| !(0.0 < *g && *g < 1.0)) {
        return Err(EvalError::Config(format!(
            "weights must lie strictly inside (0, 1), got {gammas:?}"
        )));
    }
    let mut order: Vec<usize> = (0..gammas.len()).collect();
    order.sort_by(|&a, &b| gammas[a].partial_cmp(&gammas[b]).unwrap());
    let mut out = Vec::with_capacity(gammas.len());
    for idx in order {
        let gamma = gammas[idx];
        let mut prob = problem.clone();
        prob.gamma = gamma;
        let result = match solver {
            SolverKind::Benchmark => solve_benchmark_report(route, params, &prob, bench_cfg)
                .map(|(report, _, _)| report),
            SolverKind::DpEcms => {
                solve_dpecms_report(route, params, &prob, dpecms_template, shooting)
                    .map(|(report, _, _, _)| report)
            }
            SolverKind::Lookahead => unreachable!("rejected above"),
        };
        out.push(ParetoEntry {
            gamma,
            result: result.map_err(|e| e.to_string()),
        });
    }
    Ok(out)
}

/// Writes successful sweep entries as CSV.
pub fn write_pareto_csv<W: Write>(entries: &[ParetoEntry], w: &mut W) -> io::Result<()> {
    writeln!(w, "gamma,fuel_kg,time_s,cost,solver,soc_neutral")?;
    for e in entries {
        if let Ok(r) = &e.result {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.gamma, r.fuel_kg, r.time_s, r.cost, r.solver, r.soc_neutral
            )?;
        }
    }
    Ok(())
}

/// Writes a per-weight comparison of two report sets (matched by weight)
/// with the percentage increment of the second over the first.
pub fn write_increments_csv<W: Write>(
    baseline: &[CostReport],
    comparison: &[CostReport],
    w: &mut W,
) -> Result<(), EvalError> {
    writeln!(w, "gamma,cost_baseline,cost_comparison,increment_pct")
        .map_err(|e| EvalError::Mismatch(e.to_string()))?;
    for a in baseline {
        let Some(b) = comparison.iter().find(|b| b.gamma == a.gamma) else {
            continue;
        };
        let inc = cost_increment(a, b)?;
        writeln!(w, "{},{},{},{}", a.gamma, a.cost, b.cost, inc)
            .map_err(|e| EvalError::Mismatch(e.to_string()))?;
    }
    Ok(())
}

/// Result of exhaustively enumerating every admissible control sequence of
/// a snapped tiny problem.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    /// Optimal total cost from the snapped start node; infinite when no
    /// sequence is admissible.
    pub cost: f64,
    /// An optimal control sequence (empty when no path exists).
    pub controls: Vec<ControlBenchmark>,
    /// Upper bound on sequences the guard admitted.
    pub sequences_bound: u128,
}

const ORACLE_SEQUENCE_LIMIT: u128 = 10_000_000;
const ORACLE_MAX_STAGES: usize = 6;

/// Exhaustively enumerates all control sequences of a tiny benchmark
/// problem with nearest-node state snapping between stages, sharing the
/// per-candidate evaluation path with the backward solver so agreement is
/// exact rather than approximate.
///
/// The start state is snapped to its nearest stage-0 node first, mirroring
/// how the nearest-node backup mode reads a query state.
pub fn brute_force_oracle(
    route: &Route,
    params: &VehicleParams,
    problem: &ProblemConfig,
    cfg: &BenchmarkConfig,
    x1: &StateVector,
) -> Result<OracleOutcome, EvalError> {
    if cfg.mode != BackupMode::NearestNode {
        return Err(EvalError::Config(
            "exhaustive enumeration is defined for the nearest-node backup mode only".into(),
        ));
    }
    let n = route.n_stages();
    if n > ORACLE_MAX_STAGES {
        return Err(EvalError::Config(format!(
            "enumeration is limited to {ORACLE_MAX_STAGES} stages, got {n}"
        )));
    }
    let n_controls = (cfg.t_eng_axis.len() * cfg.t_bsg_axis.len()) as u128;
    let sequences = n_controls.saturating_pow(n as u32);
    if sequences > ORACLE_SEQUENCE_LIMIT {
        return Err(EvalError::TooLarge {
            sequences,
            limit: ORACLE_SEQUENCE_LIMIT,
        });
    }

    let grids = StageGrids::build(route, problem, cfg.n_e, cfg.n_soc);
    let terminal = TerminalSpec::charge_neutral(problem);

    struct Ctx<'a> {
        route: &'a Route,
        params: &'a VehicleParams,
        problem: &'a ProblemConfig,
        cfg: &'a BenchmarkConfig,
        grids: &'a StageGrids,
        terminal: TerminalSpec,
        n: usize,
    }

    // Best tail cost and controls from a stage-k node state, enumerated
    // depth-first over the full control product (no memoization: shared
    // prefixes are re-walked, which is the point of an oracle).
    fn explore(ctx: &Ctx, k: usize, x: StateVector) -> (f64, Vec<ControlBenchmark>) {
        let mut best = f64::INFINITY;
        let mut best_ctls: Vec<ControlBenchmark> = Vec::new();
        for &t_eng in &ctx.cfg.t_eng_axis {
            for &t_bsg in &ctx.cfg.t_bsg_axis {
                let ctl = ControlBenchmark {
                    t_eng_cmd_nm: t_eng,
                    t_bsg_nm: t_bsg,
                };
                let mut tail: Vec<ControlBenchmark> = Vec::new();
                let evaluated = if k + 1 == ctx.n {
                    let next_cost = |nx: &StateVector| {
                        let s = &ctx.grids.stages[ctx.n];
                        ctx.terminal.cost(nx, s.v_lo_mps, s.v_hi_mps)
                    };
                    eval_benchmark_candidate(
                        x, ctl, k, ctx.route, ctx.params, ctx.problem, &next_cost,
                    )
                } else {
                    // one transition to find the snapped successor …
                    let probe = |nx: &StateVector| match ctx.grids.nearest(k + 1, nx) {
                        Some(_) => 0.0,
                        None => f64::INFINITY,
                    };
                    match eval_benchmark_candidate(
                        x, ctl, k, ctx.route, ctx.params, ctx.problem, &probe,
                    ) {
                        None => None,
                        Some((_, out)) => {
                            // … then the true tail from that node, combined
                            // through the same evaluation path the solver uses
                            let (i, j) = ctx
                                .grids
                                .nearest(k + 1, &out.next)
                                .expect("probe admitted this successor");
                            let node = ctx.grids.node(k + 1, i, j);
                            let (tail_cost, tail_ctls) = explore(ctx, k + 1, node);
                            tail = tail_ctls;
                            let next_cost = |_: &StateVector| tail_cost;
                            eval_benchmark_candidate(
                                x, ctl, k, ctx.route, ctx.params, ctx.problem, &next_cost,
                            )
                        }
                    }
                };
                if let Some((total, _)) = evaluated {
                    if total < best {
                        best = total;
                        let mut ctls = Vec::with_capacity(ctx.n - k);
                        ctls.push(ctl);
                        ctls.extend(tail);
                        best_ctls = ctls;
                    }
                }
            }
        }
        (best, best_ctls)
    }

    let ctx = Ctx {
        route,
        params,
        problem,
        cfg,
        grids: &grids,
        terminal,
        n,
    };
    let Some((i0, j0)) = grids.nearest(0, x1) else {
        return Ok(OracleOutcome {
            cost: f64::INFINITY,
            controls: Vec::new(),
            sequences_bound: sequences,
        });
    };
    let (cost, controls) = explore(&ctx, 0, grids.node(0, i0, j0));
    Ok(OracleOutcome {
        cost,
        controls: if cost.is_finite() { controls } else { Vec::new() },
        sequences_bound: sequences,
    })
}

/// A randomized tiny problem instance for oracle cross-checks:
/// a short route, small nearest-node grids, and a start state on the
/// stage-0 grid.
#[derive(Debug, Clone)]
pub struct TinyFixture {
    pub route: Route,
    pub problem: ProblemConfig,
    pub cfg: BenchmarkConfig,
    pub x1: StateVector,
}

/// Deterministically generates a tiny fixture from a seed. Envelopes are
/// kept wide and the start state low so most instances admit feasible
/// paths; occasional all-infeasible instances are valid fixtures too (the
/// oracle and the solver must agree on those as well).
pub fn random_tiny_fixture(seed: u64) -> TinyFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 10.0;
    let n_points = rng.gen_range(3..=5usize);
    let mid_stop = n_points >= 4 && rng.gen_bool(0.25);
    let v_floor = DEFAULT_V_FLOOR_MPS;
    let points: Vec<RoutePoint> = (0..n_points)
        .map(|k| {
            let stop = mid_stop && k == n_points / 2;
            let v_max = if stop {
                v_floor
            } else {
                rng.gen_range(7.0..14.0)
            };
            RoutePoint {
                d_m: k as f64 * step,
                v_min_mps: v_floor,
                v_max_mps: v_max,
                grade_rad: rng.gen_range(-0.02..0.02),
                stop,
            }
        })
        .collect();
    let route = Route::from_parts(points, step, v_floor);

    let mut problem = ProblemConfig::default();
    problem.gamma = rng.gen_range(0.35..0.8);

    let n_e = rng.gen_range(3..=4usize);
    let n_soc = rng.gen_range(2..=3usize);
    // small hand-rolled control axes: always one strong positive torque so
    // cruising is possible, plus braking and coasting entries
    let mut t_eng_axis = vec![
        rng.gen_range(-300.0..-100.0),
        0.0,
        rng.gen_range(60.0..120.0),
        rng.gen_range(140.0..200.0),
    ];
    if rng.gen_bool(0.5) {
        t_eng_axis.push(rng.gen_range(10.0..50.0));
    }
    t_eng_axis.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t_bsg_axis = match rng.gen_range(0..3u8) {
        0 => vec![0.0, 40.0],
        1 => vec![-40.0, 0.0],
        _ => vec![-40.0, 0.0, 40.0],
    };
    let cfg = BenchmarkConfig {
        n_e,
        n_soc,
        t_eng_axis,
        t_bsg_axis,
        mode: BackupMode::NearestNode,
    };

    let grids = StageGrids::build(&route, &problem, n_e, n_soc);
    let i0 = rng.gen_range(0..(n_e + 1) / 2); // lower half: reachable speeds
    let j0 = rng.gen_range(0..n_soc);
    let x1 = grids.node(0, i0, j0);
    TinyFixture {
        route,
        problem,
        cfg,
        x1,
    }
}

/// Analytic per-formula operation counts for the two solvers on given
/// grid shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexityReport {
    pub stages: u64,
    /// stages · n_E · n_soc · n_Teng · n_Tbsg
    pub benchmark_ops: u64,
    /// stages · n_E · n_soc · n_Tpt · n_split
    pub dpecms_ops: u64,
}

impl ComplexityReport {
    /// Benchmark-to-reduced operation ratio; `None` for a stageless route.
    pub fn ratio(&self) -> Option<f64> {
        if self.dpecms_ops == 0 {
            None
        } else {
            Some(self.benchmark_ops as f64 / self.dpecms_ops as f64)
        }
    }
}

/// Closed-form operation counts for a route of `n_points` grid points.
pub fn complexity_estimate(
    n_points: usize,
    bench: &BenchmarkConfig,
    dpecms: &DpEcmsConfig,
) -> ComplexityReport {
    let stages = n_points.saturating_sub(1) as u64;
    let benchmark_ops = stages
        * bench.n_e as u64
        * bench.n_soc as u64
        * bench.t_eng_axis.len() as u64
        * bench.t_bsg_axis.len() as u64;
    let dpecms_ops = stages
        * dpecms.n_e as u64
        * dpecms.n_soc as u64
        * dpecms.t_pt_axis.len() as u64
        * dpecms.ecms.n_split as u64;
    ComplexityReport {
        stages,
        benchmark_ops,
        dpecms_ops,
    }
}
