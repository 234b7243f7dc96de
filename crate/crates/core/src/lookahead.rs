//! Receding-horizon torque-demand control with per-horizon selection of
//! the equivalence-factor offset.
//!
//! At each replan stage `j` the remaining problem is truncated to a short
//! window whose terminal cost is the full-route solution's own cost-to-go
//! layer at the window end (the rollout base policy); at the route end the
//! window inherits the base terminal condition. The window is solved once
//! per offset in the candidate grid — sharing candidate slices across the
//! grid — and the offset whose window cost at the current state is
//! smallest drives the plant for the next `stride` stages.
//!
//! Because the window terminal already encodes the base policy's
//! state-of-charge preferences, no hard terminal window applies inside a
//! horizon; charge sustainability emerges from the base layer instead of a
//! constraint.

use crate::dp::{
    backward_solve_dpecms, backward_solve_dpecms_multi, replay_step_dpecms, DpEcmsConfig,
    DpEcmsDecision, MultiDpEcms, SimError, SolveError, SolveStats, Solution, TerminalCost,
    TerminalSpec, TerminalTable, Trajectory, TrajectoryBuilder, CSV_HEADER,
};
use crate::powertrain::VehicleParams;
use crate::route::Route;
use crate::shooting::{shoot, ShootingConfig, ShootingError, ShootingResult};
use crate::spatial::{stage_cost, ProblemConfig, StateVector};
use std::io::{self, Write};
use thiserror::Error;

/// Horizon length, offset grid, and replan cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadConfig {
    /// Window length in stages; windows shrink near the route end.
    pub n_h: usize,
    /// Offset-grid bounds.
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Number of equally spaced offsets over the bounds (1 ⇒ midpoint).
    pub n_i: usize,
    /// Stages driven per replan.
    pub stride: usize,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        LookaheadConfig {
            n_h: 20,
            lambda_lo: 2.0,
            lambda_hi: 4.2,
            n_i: 10,
            stride: 1,
        }
    }
}

impl LookaheadConfig {
    /// Equally spaced candidate offsets, ascending. A single-candidate
    /// grid sits at the midpoint of the bounds.
    pub fn lambda_grid(&self) -> Vec<f64> {
        if self.n_i == 1 {
            return vec![0.5 * (self.lambda_lo + self.lambda_hi)];
        }
        let span = self.lambda_hi - self.lambda_lo;
        (0..self.n_i)
            .map(|i| self.lambda_lo + span * i as f64 / (self.n_i - 1) as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_h < 2 {
            return Err(format!("horizon must span at least 2 stages, got {}", self.n_h));
        }
        if self.n_i < 1 {
            return Err("offset grid needs at least one candidate".into());
        }
        if self.stride < 1 {
            return Err("stride must be at least 1".into());
        }
        if !(self.lambda_lo.is_finite() && self.lambda_hi.is_finite() && self.lambda_lo > 0.0) {
            return Err(format!(
                "offset bounds must be positive and finite, got [{}, {}]",
                self.lambda_lo, self.lambda_hi
            ));
        }
        if self.lambda_lo > self.lambda_hi {
            return Err(format!(
                "offset bounds must be ordered, got [{}, {}]",
                self.lambda_lo, self.lambda_hi
            ));
        }
        Ok(())
    }
}

/// Record of one replan: the candidate window costs at the entry state and
/// the choice made.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    /// Route stage the plan was made at.
    pub stage: usize,
    /// Window length actually solved (shrinks near the route end).
    pub horizon_len: usize,
    /// Window cost at the entry state per candidate offset (aligned with
    /// the config's `lambda_grid()`); infinite where infeasible.
    pub costs: Vec<f64>,
    /// Index of the chosen offset (smallest cost, ties toward the smaller
    /// offset).
    pub selected: usize,
    /// The chosen offset value.
    pub lambda: f64,
}

/// A completed receding-horizon run.
#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadRun {
    pub trajectory: Trajectory,
    /// One entry per replan, in route order.
    pub plans: Vec<StagePlan>,
    /// Offset that produced each trajectory row (the terminal row repeats
    /// the last plan's offset). Same length as `trajectory.points`.
    pub lambda_by_row: Vec<f64>,
    /// Work done by all window solves combined; candidate slices are
    /// counted once per window regardless of the offset-grid size.
    pub solve_stats: SolveStats,
}

impl LookaheadRun {
    /// Trajectory dump with the selected offset appended as a `lambda`
    /// column.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER},lambda")?;
        for (p, l) in self.trajectory.points.iter().zip(&self.lambda_by_row) {
            writeln!(w, "{},{}", p.csv_row(), l)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LookaheadError {
    #[error("invalid look-ahead configuration: {0}")]
    Config(String),
    #[error("window solve at stage {stage} failed: {source}")]
    Solve { stage: usize, source: SolveError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("base tuning failed: {0}")]
    Shooting(#[from] ShootingError),
    #[error("base solve failed: {0}")]
    BaseSolve(SolveError),
}

/// State-of-charge axis size whose spacing is fine enough for a hard
/// terminal charge window to propagate backward under bilinear
/// interpolation: half the window half-width per cell, so several adjacent
/// columns can reach the window at the last stage and the finite region
/// stays contiguous.
fn charge_window_axis_len(problem: &ProblemConfig) -> usize {
    let span = problem.soc_max - problem.soc_min;
    (span / (0.5 * problem.soc_terminal_tol)).ceil() as usize + 1
}

/// Bound on how far one stage can move the state of charge, used to size
/// the span a window solve can actually reach.
const SOC_DRIFT_PER_STAGE: f64 = 0.009;
///// Depth of the terminal boundary zone in stages: close enough to the
/// route end that base layers solved under the hard charge window have
/// collapsed to the near-terminal charge band. Windows that would end
/// inside it run to the route end instead, closing on the terminal
/// condition directly — its exact edges propagate cleanly, where the
/// collapsed layers (often a single cell wide, sometimes gapped) poison
/// every nearby value query. Only hard-terminal bases have such a zone,
/// so the guard is skipped for free-terminal bases.
const TAIL_GUARD_STAGES: usize = 24;
/// Cushion beyond the reachable state-of-charge span.
const WINDOW_SOC_MARGIN: f64 = 0.02;
/// Node spacing for interior-window state-of-charge axes: fine enough to
/// resolve the base layers' feasible band (which narrows toward the route
/// end) without paying for full-axis coverage.
const WINDOW_SOC_SPACING: f64 = 0.012;

/// Focuses a window solve on its entry state: the state-of-charge axis
/// covers only the span `h` stages can reach from `soc0`, at a spacing
/// fine enough to resolve the base layers' feasible band (or the hard
/// terminal charge window, when the window closes on one).
///
/// A global axis at the template's resolution cannot do this job: the
/// feasible band of a late base layer is narrower than one coarse cell, so
/// every bilinear query near it touches an infinite corner and the whole
/// window reads as infeasible, well before the state is actually lost.
/// Since the axis is built from the problem's state-of-charge bounds, the
/// narrowed span travels in a clipped copy of the problem — which also
/// prunes in-window excursions the entry state could never produce.
fn focus_window(
    template: &DpEcmsConfig,
    problem: &ProblemConfig,
    soc0: f64,
    h: usize,
    hard_end: bool,
) -> (DpEcmsConfig, ProblemConfig) {
    let reach = h as f64 * SOC_DRIFT_PER_STAGE + WINDOW_SOC_MARGIN;
    let lo = (soc0 - reach).max(problem.soc_min);
    let hi = (soc0 + reach).min(problem.soc_max);
    let spacing = if hard_end {
        0.5 * problem.soc_terminal_tol
    } else {
        WINDOW_SOC_SPACING
    };
    let n = ((hi - lo) / spacing).ceil() as usize + 1;
    let mut cfg = template.clone();
    cfg.n_soc = cfg.n_soc.max(n);
    let mut focused = problem.clone();
    focused.soc_min = lo;
    focused.soc_max = hi;
    // windows never evaluate the initial/terminal charge target, but the
    // clipped bounds must still pass config validation
    focused.soc_init = problem.soc_init.clamp(lo, hi);
    (cfg, focused)
}

/// Solves the full-route base the rollout leans on: the equivalence-factor
/// offset is tuned for charge sustainability, then the route is solved with
/// the hard terminal charge window at that offset.
///
/// The charge window is what makes the base layers price battery energy: a
/// free-terminal solve at constant offset carries almost no
/// state-of-charge gradient near the route end, and a rollout steering
/// toward such layers drains the battery.
///
/// The backup stays bilinear — snapping would round sub-cell charge drifts
/// away and erase the very gradient the rollout needs — so the axis must
/// be dense enough for the window to propagate: a value query turns
/// infinite whenever a surrounding node is infinite, which strands the
/// backward pass unless several adjacent columns can land inside the
/// window at the last stage. The axis is densified to a fraction of the
/// window width; the coarse template grid still applies to the per-stage
/// window solves, which sample this base's layers through their own axes.
pub fn solve_rollout_base(
    route: &Route,
    params: &VehicleParams,
    problem: &ProblemConfig,
    template: &DpEcmsConfig,
    shooting: &ShootingConfig,
) -> Result<(Solution<DpEcmsDecision>, ShootingResult), LookaheadError> {
    let tuned = shoot(route, params, problem, template, shooting)?;
    let mut cfg = template.clone();
    cfg.ecms.lambda0 = tuned.lambda0;
    cfg.n_soc = cfg.n_soc.max(charge_window_axis_len(problem));
    let sol = backward_solve_dpecms(
        route,
        params,
        problem,
        &cfg,
        TerminalCost::Spec(TerminalSpec::charge_neutral(problem)),
    )
    .map_err(LookaheadError::BaseSolve)?;
    Ok((sol, tuned))
}

/// The route restricted to stages `j..j+h` (inclusive endpoints), keeping
/// absolute distances, grades, and stop flags.
pub fn horizon_window(route: &Route, j: usize, h: usize) -> Route {
    assert!(j + h <= route.n_stages(), "window exceeds the route");
    Route::from_parts(
        route.points()[j..=j + h].to_vec(),
        route.step_m(),
        route.v_floor_mps(),
    )
}

/// Terminal cost for a window ending at stage `j_end` of the base
/// solution: the base cost-to-go layer there, sampled with its own axes,
/// or the base terminal condition when the window reaches the route end.
pub fn horizon_terminal(base: &Solution<DpEcmsDecision>, j_end: usize) -> TerminalCost {
    if j_end == base.n_stages() {
        return base.terminal.clone();
    }
    TerminalCost::Table(TerminalTable {
        e_axis: base.grids.stages[j_end].e_axis.clone(),
        soc_axis: base.grids.soc_axis.clone(),
        values: base.values[j_end].clone(),
    })
}

/// Solves the `h`-stage window starting at stage `j` for every offset in
/// `lambdas` in one shared sweep, with the base solution supplying the
/// window terminal. Window solutions index stages from 0.
pub fn horizon_solve_multi(
    route: &Route,
    base: &Solution<DpEcmsDecision>,
    j: usize,
    h: usize,
    lambdas: &[f64],
    params: &VehicleParams,
    problem: &ProblemConfig,
    template: &DpEcmsConfig,
) -> Result<MultiDpEcms, SolveError> {
    if h < 1 || j + h > route.n_stages() {
        return Err(SolveError::Config(format!(
            "window [{j}, {}] does not fit a route of {} stages",
            j + h,
            route.n_stages()
        )));
    }
    if base.n_stages() != route.n_stages() {
        return Err(SolveError::Config(format!(
            "base solution has {} stages but the route has {}",
            base.n_stages(),
            route.n_stages()
        )));
    }
    let window = horizon_window(route, j, h);
    let terminal = horizon_terminal(base, j + h);
    // A window closed by the hard charge window needs the same axis density
    // as the base: on a coarse axis the window cannot propagate backward
    // under bilinear interpolation (see `solve_rollout_base`).
    if let TerminalCost::Spec(TerminalSpec::ChargeNeutral { .. }) = &terminal {
        let mut dense = template.clone();
        dense.n_soc = dense.n_soc.max(charge_window_axis_len(problem));
        return backward_solve_dpecms_multi(&window, params, problem, &dense, lambdas, terminal);
    }
    backward_solve_dpecms_multi(&window, params, problem, template, lambdas, terminal)
}

/// Single-offset window solve; see [`horizon_solve_multi`].
pub fn horizon_solve(
    route: &Route,
    base: &Solution<DpEcmsDecision>,
    j: usize,
    h: usize,
    lambda0: f64,
    params: &VehicleParams,
    problem: &ProblemConfig,
    template: &DpEcmsConfig,
) -> Result<Solution<DpEcmsDecision>, SolveError> {
    let mut multi =
        horizon_solve_multi(route, base, j, h, &[lambda0], params, problem, template)?;
    Ok(multi.solutions.pop().expect("one offset in, one solution out"))
}

/// Index of the smallest window cost, ties toward the smaller offset
/// (candidates are scanned in ascending-offset order with a strict
/// comparison). `None` when every candidate is infeasible.
pub fn select_lambda(costs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &c) in costs.iter().enumerate() {
        if c == f64::INFINITY {
            continue;
        }
        if best.map_or(true, |b| c < costs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Runs the receding-horizon controller over the route.
///
/// `route` may differ from the one the base was solved on (an en-route
/// perturbation): windows are built from `route`, while the window
/// terminals still come from the base layers with their own sampling axes.
/// The base must cover the same number of stages and share `problem`'s γ.
pub fn receding_horizon_run(
    route: &Route,
    x1: StateVector,
    params: &VehicleParams,
    problem: &ProblemConfig,
    cfg: &LookaheadConfig,
    base: &Solution<DpEcmsDecision>,
    template: &DpEcmsConfig,
) -> Result<LookaheadRun, LookaheadError> {
    cfg.validate().map_err(LookaheadError::Config)?;
    let n = route.n_stages();
    let lambdas = cfg.lambda_grid();
    let mut x = x1;
    let mut tb = TrajectoryBuilder::new();
    let mut plans: Vec<StagePlan> = Vec::new();
    let mut lambda_by_row: Vec<f64> = Vec::new();
    let mut stats = SolveStats::default();

    let hard_base = matches!(
        base.terminal,
        TerminalCost::Spec(TerminalSpec::ChargeNeutral { .. })
    );
    let tail_guard = if hard_base { TAIL_GUARD_STAGES } else { 0 };

    let mut j = 0usize;
    while j < n {
        let h = if n - j <= cfg.n_h + tail_guard {
            n - j
        } else {
            cfg.n_h
        };
        let hard_end = hard_base && j + h == n;
        let (win_cfg, win_problem) = focus_window(template, problem, x.soc, h, hard_end);
        let multi =
            horizon_solve_multi(route, base, j, h, &lambdas, params, &win_problem, &win_cfg)
                .map_err(|source| LookaheadError::Solve { stage: j, source })?;
        stats.transitions += multi.batch_stats.transitions;
        stats.split_plant_evals += multi.batch_stats.split_plant_evals;
        stats.split_completions += multi.batch_stats.split_completions;

        let costs: Vec<f64> = multi
            .solutions
            .iter()
            .map(|s| s.cost_to_go(0, &x))
            .collect();
        let Some(selected) = select_lambda(&costs) else {
            return Err(if j == 0 {
                SimError::NoFeasiblePath.into()
            } else {
                SimError::Diverged { stage: j }.into()
            });
        };
        let window_sol = &multi.solutions[selected];
        let mut ecms_sel = template.ecms.clone();
        ecms_sel.lambda0 = lambdas[selected];
        plans.push(StagePlan {
            stage: j,
            horizon_len: h,
            costs,
            selected,
            lambda: lambdas[selected],
        });

        let window = horizon_window(route, j, h);
        let steps = cfg.stride.min(h);
        for s in 0..steps {
            let (ctl, out) =
                replay_step_dpecms(window_sol, s, x, &window, params, problem, &ecms_sel)
                    .map_err(|e| match e {
                        SimError::Diverged { stage } => SimError::Diverged { stage: j + stage },
                        other => other,
                    })?;
            let g = stage_cost(&out, problem);
            tb.push_stage(
                j + s,
                route.point(j + s).d_m,
                &x,
                &out,
                ctl.t_eng_cmd_nm,
                ctl.t_bsg_nm,
                g,
            );
            lambda_by_row.push(lambdas[selected]);
            x = out.next;
        }
        j += steps;
    }

    // terminal row repeats the last applied offset
    let last_lambda = lambda_by_row.last().copied().unwrap_or(f64::NAN);
    lambda_by_row.push(last_lambda);
    let trajectory = tb.finish(n, route.point(n).d_m, &x);
    Ok(LookaheadRun {
        trajectory,
        plans,
        lambda_by_row,
        solve_stats: stats,
    })
}
