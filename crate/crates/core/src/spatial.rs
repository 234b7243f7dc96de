//! Distance-domain problem formulation: state, controls, stage transition,
//! running cost, and path constraints.
//!
//! The state is `(E, soc)` where `E = v²` is kinetic energy per unit mass.
//! Advancing one grid step of length `Δd` under net specific force
//! `(F_trc - F_road) / M` is exact in `E` (`E' = E + 2Δd·a`), and stage time
//! follows from the mean of entry and exit speed. All plant quantities are
//! evaluated at the stage entry speed.
//!
//! Friction brakes are folded into the commanded torque: the engine axis of
//! [`ControlBenchmark`] may go below the engine's own braking line down to
//! `brake_torque_floor_nm`, with the shortfall interpreted as friction
//! braking (no fuel or electrical effect, but full effect on the wheels).

use crate::powertrain::{
    self, battery_step, bsg_electrical_power, driveline_force, engine_speed, fuel_rate, road_load,
    torque_limits, VehicleParams,
};
use crate::route::Route;

/// Continuous state: squared speed and battery state of charge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    /// Kinetic energy per unit mass, `v²` (m²/s²).
    pub e_m2_s2: f64,
    /// Battery state of charge, fraction of capacity.
    pub soc: f64,
}

impl StateVector {
    pub fn new(e_m2_s2: f64, soc: f64) -> Self {
        StateVector { e_m2_s2, soc }
    }

    /// Vehicle speed (m/s).
    pub fn v_mps(&self) -> f64 {
        self.e_m2_s2.sqrt()
    }
}

/// Benchmark-solver control: engine-axis torque command (friction braking
/// below the engine braking line) and BSG torque, both crank-side N·m
/// (the BSG value is the torque at its own shaft).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlBenchmark {
    pub t_eng_cmd_nm: f64,
    pub t_bsg_nm: f64,
}

/// Reduced-solver control: total powertrain torque demand at the crank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDpEcms {
    pub t_pt_nm: f64,
}

/// Which constraint a candidate violated. `Stall` means the vehicle would
/// lose all speed mid-stage (non-positive `E'`), which also voids the time
/// accounting, so it is reported separately from the speed envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintTag {
    SpeedEnvelope,
    SocBounds,
    Acceleration,
    EngineTorque,
    BsgTorque,
    BatteryPower,
    Stall,
    TerminalSoc,
    TerminalSpeed,
}

impl ConstraintTag {
    /// Stable machine-readable name (used in CLI error output).
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintTag::SpeedEnvelope => "speed-envelope",
            ConstraintTag::SocBounds => "soc-bounds",
            ConstraintTag::Acceleration => "acceleration",
            ConstraintTag::EngineTorque => "engine-torque",
            ConstraintTag::BsgTorque => "bsg-torque",
            ConstraintTag::BatteryPower => "battery-power",
            ConstraintTag::Stall => "stall",
            ConstraintTag::TerminalSoc => "terminal-soc",
            ConstraintTag::TerminalSpeed => "terminal-speed",
        }
    }
}

impl std::fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything one stage evaluation produces. `violation` is `Some` when the
/// candidate is inadmissible; numeric fields are then only partially filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOutput {
    pub next: StateVector,
    /// Stage travel time (s).
    pub t_s: f64,
    /// Fuel mass flow during the stage (kg/s).
    pub fuel_rate_kg_s: f64,
    /// Fuel burned over the stage (kg).
    pub fuel_kg: f64,
    /// Longitudinal acceleration implied by the energy change (m/s²).
    pub accel_m_s2: f64,
    /// Electrical power at the battery terminals (W, discharge positive).
    pub p_elec_w: f64,
    /// Effective battery current including the bias drain (A).
    pub current_a: f64,
    /// Total crank torque demand (engine command + belt-scaled BSG).
    pub t_pt_nm: f64,
    pub violation: Option<ConstraintTag>,
}

impl StageOutput {
    pub fn feasible(&self) -> bool {
        self.violation.is_none()
    }

    fn rejected(tag: ConstraintTag) -> Self {
        StageOutput {
            next: StateVector::new(0.0, 0.0),
            t_s: 0.0,
            fuel_rate_kg_s: 0.0,
            fuel_kg: 0.0,
            accel_m_s2: 0.0,
            p_elec_w: 0.0,
            current_a: 0.0,
            t_pt_nm: 0.0,
            violation: Some(tag),
        }
    }
}

/// Optimization-problem settings shared by all solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    /// Fuel/time trade-off weight in [0, 1]; higher weighs fuel more.
    pub gamma: f64,
    /// Fuel-flow normalization making the fuel term dimensionless (kg/s).
    pub mdot_norm_kg_s: f64,
    pub a_min_m_s2: f64,
    pub a_max_m_s2: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    /// Initial (and target terminal) state of charge.
    pub soc_init: f64,
    /// Half-width of the terminal charge-neutrality window.
    pub soc_terminal_tol: f64,
    /// Width of the speed band tolerated above the floor at pinned stop
    /// points. Grid controls cannot hit an exact speed, so a stop accepts
    /// anything inside `[v_floor, v_floor + stop_band]`.
    pub stop_band_mps: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            gamma: 0.65,
            mdot_norm_kg_s: 1e-3,
            a_min_m_s2: -3.0,
            a_max_m_s2: 3.0,
            soc_min: 0.3,
            soc_max: 0.8,
            soc_init: 0.55,
            soc_terminal_tol: 0.005,
            stop_band_mps: 1.5,
        }
    }
}

impl ProblemConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        ProblemConfig {
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if self.mdot_norm_kg_s <= 0.0 {
            return Err("mdot_norm_kg_s must be positive".into());
        }
        if self.a_min_m_s2 >= self.a_max_m_s2 {
            return Err("a_min must be below a_max".into());
        }
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return Err("need 0 <= soc_min < soc_max <= 1".into());
        }
        if !(self.soc_min <= self.soc_init && self.soc_init <= self.soc_max) {
            return Err("soc_init must lie inside the soc bounds".into());
        }
        if self.soc_terminal_tol <= 0.0 || self.stop_band_mps <= 0.0 {
            return Err("soc_terminal_tol and stop_band_mps must be positive".into());
        }
        Ok(())
    }

    /// Effective speed bounds at grid point `k`: the route envelope, with
    /// stop points widened to the crawl band.
    pub fn speed_bounds(&self, route: &Route, k: usize) -> (f64, f64) {
        let p = route.point(k);
        if p.stop {
            (p.v_min_mps, p.v_min_mps + self.stop_band_mps)
        } else {
            (p.v_min_mps, p.v_max_mps)
        }
    }
}

/// Slack for comparing derived quantities (accelerations, speeds, socs)
/// against bounds, absorbing float noise from interpolated controls.
const BOUND_SLACK: f64 = 1e-9;

/// Advances the state one grid step under the given controls.
///
/// The engine runs at the speed implied by the stage entry state; it is
/// commanded off only when both ends of the stage are stop points (passing
/// through an isolated stop keeps it idling so the vehicle can pull away).
/// Candidates outside the torque envelope, beyond the battery's power
/// capability, or losing all speed mid-stage come back with a `violation`
/// tag instead of numbers.
pub fn transition(
    x: StateVector,
    ctl: ControlBenchmark,
    k: usize,
    route: &Route,
    params: &VehicleParams,
) -> StageOutput {
    let v = x.v_mps();
    let pt = route.point(k);
    let engine_stop = pt.stop && route.point(k + 1).stop;
    let es = engine_speed(v, engine_stop, params);
    let lim = torque_limits(es.omega_rad_s, params);

    let slack = powertrain::TORQUE_SLACK_NM;
    if ctl.t_eng_cmd_nm < params.brake_torque_floor_nm - slack
        || ctl.t_eng_cmd_nm > lim.eng_max_nm + slack
    {
        return StageOutput::rejected(ConstraintTag::EngineTorque);
    }
    if ctl.t_bsg_nm < lim.bsg_min_nm - slack || ctl.t_bsg_nm > lim.bsg_max_nm + slack {
        return StageOutput::rejected(ConstraintTag::BsgTorque);
    }

    // Below the engine braking line the remainder is friction: fuel sees the
    // clamped torque, the wheels see the full command.
    let t_eng_fuel = ctl.t_eng_cmd_nm.max(lim.eng_min_nm).min(lim.eng_max_nm);
    let mdot = match fuel_rate(t_eng_fuel, es.omega_rad_s, params) {
        Ok(m) => m,
        Err(_) => return StageOutput::rejected(ConstraintTag::EngineTorque),
    };
    let p_elec = match bsg_electrical_power(ctl.t_bsg_nm, lim.omega_bsg_rad_s, params) {
        Ok(p) => p,
        Err(_) => return StageOutput::rejected(ConstraintTag::BsgTorque),
    };
    let batt = match battery_step(p_elec, x.soc, params) {
        Ok(b) => b,
        Err(_) => return StageOutput::rejected(ConstraintTag::BatteryPower),
    };

    let t_pt = ctl.t_eng_cmd_nm + params.belt_ratio * ctl.t_bsg_nm;
    let dl = driveline_force(t_pt, es.omega_turb_rad_s, es.gear, params);
    let f_road = road_load(v, pt.grade_rad, params);
    let dd = route.step_m();
    let net_specific = (dl.force_n - f_road) / params.mass_kg;
    let e_next = x.e_m2_s2 + 2.0 * dd * net_specific;
    if e_next <= 0.0 {
        return StageOutput::rejected(ConstraintTag::Stall);
    }
    let v_next = e_next.sqrt();
    let v_avg = 0.5 * (v + v_next);
    let t_s = dd / v_avg;
    let soc_next = x.soc + batt.soc_rate_per_s * t_s;

    StageOutput {
        next: StateVector::new(e_next, soc_next),
        t_s,
        fuel_rate_kg_s: mdot,
        fuel_kg: mdot * t_s,
        accel_m_s2: (e_next - x.e_m2_s2) / (2.0 * dd),
        p_elec_w: p_elec,
        current_a: batt.effective_current_a,
        t_pt_nm: t_pt,
        violation: None,
    }
}

/// Weighted fuel/time running cost of one stage:
/// `(gamma * mdot / mdot_norm + (1 - gamma)) * t`.
pub fn stage_cost(out: &StageOutput, problem: &ProblemConfig) -> f64 {
    (problem.gamma * out.fuel_rate_kg_s / problem.mdot_norm_kg_s + (1.0 - problem.gamma)) * out.t_s
}

/// Validates the state path constraints after a transition: exit speed
/// inside the (stop-band-widened) envelope at `k_next`, state of charge
/// inside its static bounds, acceleration inside its box. Torque and
/// battery limits are already enforced inside [`transition`]. Returns the
/// first violated tag.
pub fn check_constraints(
    next: StateVector,
    accel: f64,
    k_next: usize,
    route: &Route,
    problem: &ProblemConfig,
) -> Result<(), ConstraintTag> {
    if accel < problem.a_min_m_s2 - BOUND_SLACK || accel > problem.a_max_m_s2 + BOUND_SLACK {
        return Err(ConstraintTag::Acceleration);
    }
    let v = next.v_mps();
    let (lo, hi) = problem.speed_bounds(route, k_next);
    if v < lo - BOUND_SLACK || v > hi + BOUND_SLACK {
        return Err(ConstraintTag::SpeedEnvelope);
    }
    if next.soc < problem.soc_min - BOUND_SLACK || next.soc > problem.soc_max + BOUND_SLACK {
        return Err(ConstraintTag::SocBounds);
    }
    Ok(())
}
