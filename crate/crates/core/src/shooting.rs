//! Bisection tuning of the constant equivalence-factor offset for
//! charge-sustaining behavior over a whole route.
//!
//! Each iterate solves the torque-demand problem with the candidate offset
//! and a free terminal state of charge, replays it, and reads the residual
//! `r(λ) = ξ_N − ξ_1`. A larger offset prices battery energy higher, so
//! the residual is (empirically) non-decreasing in λ; bisection drives it
//! into the terminal tolerance. Bisection is preferred over a secant step
//! because every residual evaluation costs a full backward solve and the
//! residual is mildly non-smooth from grid snapping.

use crate::dp::{
    backward_solve_dpecms, forward_simulate_dpecms, start_state, DpEcmsConfig, SimError,
    SolveError, TerminalCost, TerminalSpec,
};
use crate::powertrain::VehicleParams;
use crate::route::Route;
use crate::spatial::ProblemConfig;
use thiserror::Error;

/// Bracket and budget for the bisection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingConfig {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Maximum residual evaluations, bracket endpoints included.
    pub max_iters: usize,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig {
            lambda_lo: 0.5,
            lambda_hi: 10.0,
            max_iters: 20,
        }
    }
}

/// One residual evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingIterate {
    pub lambda0: f64,
    /// Terminal minus initial state of charge at this offset.
    pub residual: f64,
}

/// Outcome of the tuning run: the best offset found and the full residual
/// trace behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingResult {
    /// Offset of the best iterate (smallest `|residual|`).
    pub lambda0: f64,
    /// Residual recorded at `lambda0`.
    pub residual: f64,
    /// Residual evaluations performed; equals `trace.len()`.
    pub iterations: usize,
    /// Every iterate in evaluation order.
    pub trace: Vec<ShootingIterate>,
    /// Whether `|residual| <= tol` was reached within the budget.
    pub converged: bool,
    /// Set when the evaluated residuals, ordered by offset, are not
    /// non-decreasing — the expected monotonicity was violated somewhere,
    /// and the bisection proceeded on the bracket anyway.
    pub monotone_warning: bool,
}

#[derive(Debug, Error)]
pub enum ShootingError {
    #[error(
        "residual does not change sign over [{lambda_lo}, {lambda_hi}]: \
         r(lo) = {r_lo:.6}, r(hi) = {r_hi:.6}"
    )]
    Bracket {
        lambda_lo: f64,
        lambda_hi: f64,
        r_lo: f64,
        r_hi: f64,
    },
    #[error("backward solve failed at offset {lambda0}: {source}")]
    Solve {
        lambda0: f64,
        source: SolveError,
    },
    #[error("replay failed at offset {lambda0}: {source}")]
    Sim {
        lambda0: f64,
        source: SimError,
    },
    #[error(
        "the {side} bracket endpoint stayed infeasible after {attempts} moves \
         toward the interior; last failure at offset {lambda0}: {message}"
    )]
    EndpointInfeasible {
        side: &'static str,
        attempts: usize,
        lambda0: f64,
        message: String,
    },
    #[error("invalid shooting configuration: {0}")]
    Config(String),
}

/// Fraction of the current bracket span an infeasible endpoint moves inward.
const ENDPOINT_STEP: f64 = 0.25;
/// How many inward moves an endpoint gets before tuning gives up.
const ENDPOINT_MOVES: usize = 5;

/// Collects iterates and tracks residual monotonicity in offset order.
struct Trace {
    iterates: Vec<ShootingIterate>,
    by_lambda: Vec<ShootingIterate>,
    monotone_warning: bool,
}

impl Trace {
    fn new() -> Self {
        Trace {
            iterates: Vec::new(),
            by_lambda: Vec::new(),
            monotone_warning: false,
        }
    }

    fn record(&mut self, lambda0: f64, residual: f64) {
        let it = ShootingIterate { lambda0, residual };
        self.iterates.push(it);
        let pos = self
            .by_lambda
            .partition_point(|p| p.lambda0 < lambda0);
        self.by_lambda.insert(pos, it);
        if pos > 0 && self.by_lambda[pos - 1].residual > residual {
            self.monotone_warning = true;
        }
        if pos + 1 < self.by_lambda.len() && residual > self.by_lambda[pos + 1].residual {
            self.monotone_warning = true;
        }
    }

    fn best(&self) -> ShootingIterate {
        *self
            .iterates
            .iter()
            .min_by(|a, b| {
                a.residual
                    .abs()
                    .partial_cmp(&b.residual.abs())
                    .expect("residuals are finite")
            })
            .expect("at least one iterate recorded")
    }

    fn finish(self, best: ShootingIterate, converged: bool) -> ShootingResult {
        ShootingResult {
            lambda0: best.lambda0,
            residual: best.residual,
            iterations: self.iterates.len(),
            trace: self.iterates,
            converged,
            monotone_warning: self.monotone_warning,
        }
    }
}

/// Tunes the constant equivalence-factor offset by bisection on the
/// free-terminal state-of-charge residual.
///
/// The template's own `ecms.lambda0` is ignored; each iterate overrides
/// it. Convergence means `|ξ_N − ξ_1| ≤ problem.soc_terminal_tol`. If the
/// budget runs out first, the best iterate is returned with `converged`
/// unset. A bracket whose endpoint already satisfies the tolerance
/// returns that endpoint without evaluating further.
///
/// A bracket endpoint at which no trajectory exists — an extreme offset can
/// force so much charging or discharging that the state of charge leaves
/// its corridor — is walked toward the interior a few times before the run
/// is abandoned, so generous default brackets still tune.
pub fn shoot(
    route: &Route,
    params: &VehicleParams,
    problem: &ProblemConfig,
    template: &DpEcmsConfig,
    cfg: &ShootingConfig,
) -> Result<ShootingResult, ShootingError> {
    if !(cfg.lambda_lo.is_finite() && cfg.lambda_hi.is_finite() && cfg.lambda_lo > 0.0) {
        return Err(ShootingError::Config(format!(
            "bracket must be positive and finite, got [{}, {}]",
            cfg.lambda_lo, cfg.lambda_hi
        )));
    }
    if cfg.lambda_lo >= cfg.lambda_hi {
        return Err(ShootingError::Config(format!(
            "bracket must satisfy lo < hi, got [{}, {}]",
            cfg.lambda_lo, cfg.lambda_hi
        )));
    }
    if cfg.max_iters < 2 {
        return Err(ShootingError::Config(format!(
            "need at least 2 iterations to evaluate the bracket, got {}",
            cfg.max_iters
        )));
    }
    let tol = problem.soc_terminal_tol;
    let x1 = start_state(route, problem);

    let residual = |lambda0: f64| -> Result<f64, ShootingError> {
        let mut solve_cfg = template.clone();
        solve_cfg.ecms.lambda0 = lambda0;
        let sol = backward_solve_dpecms(
            route,
            params,
            problem,
            &solve_cfg,
            TerminalCost::Spec(TerminalSpec::SpeedEnvelopeOnly),
        )
        .map_err(|source| ShootingError::Solve { lambda0, source })?;
        let traj = forward_simulate_dpecms(&sol, x1, route, params, problem, &solve_cfg.ecms)
            .map_err(|source| ShootingError::Sim { lambda0, source })?;
        Ok(traj.soc_final() - traj.soc_initial())
    };

    let mut trace = Trace::new();
    let (mut lo, mut hi) = (cfg.lambda_lo, cfg.lambda_hi);

    // Evaluates an endpoint, nudging it inward (toward `other`) while the
    // solve or replay reports the offset unrealizable.
    let eval_endpoint = |at: &mut f64,
                             other: f64,
                             side: &'static str|
     -> Result<f64, ShootingError> {
        let mut attempts = 0;
        loop {
            match residual(*at) {
                Ok(r) => return Ok(r),
                Err(ShootingError::Sim { lambda0, source }) => {
                    if attempts == ENDPOINT_MOVES {
                        return Err(ShootingError::EndpointInfeasible {
                            side,
                            attempts,
                            lambda0,
                            message: source.to_string(),
                        });
                    }
                    attempts += 1;
                    *at += ENDPOINT_STEP * (other - *at);
                }
                Err(e) => return Err(e),
            }
        }
    };

    let mut r_lo = eval_endpoint(&mut lo, hi, "low")?;
    trace.record(lo, r_lo);
    if r_lo.abs() <= tol {
        let best = ShootingIterate {
            lambda0: lo,
            residual: r_lo,
        };
        return Ok(trace.finish(best, true));
    }
    let r_hi = eval_endpoint(&mut hi, lo, "high")?;
    trace.record(hi, r_hi);
    if r_hi.abs() <= tol {
        let best = ShootingIterate {
            lambda0: hi,
            residual: r_hi,
        };
        return Ok(trace.finish(best, true));
    }
    if r_lo.signum() == r_hi.signum() {
        return Err(ShootingError::Bracket {
            lambda_lo: lo,
            lambda_hi: hi,
            r_lo,
            r_hi,
        });
    }

    while trace.iterates.len() < cfg.max_iters {
        let mid = 0.5 * (lo + hi);
        let r_mid = residual(mid)?;
        trace.record(mid, r_mid);
        if r_mid.abs() <= tol {
            let best = ShootingIterate {
                lambda0: mid,
                residual: r_mid,
            };
            return Ok(trace.finish(best, true));
        }
        if r_mid.signum() == r_lo.signum() {
            lo = mid;
            r_lo = r_mid;
        } else {
            hi = mid;
        }
    }
    let best = trace.best();
    Ok(trace.finish(best, false))
}
