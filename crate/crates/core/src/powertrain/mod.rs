//! Quasi-static plant model of the P0 mild-hybrid powertrain.
//!
//! Conventions used throughout:
//! * torques in N·m, speeds in rad/s, powers in W, battery discharge positive;
//! * the belt starter generator (BSG) sits on the crankshaft side, geared up
//!   by `belt_ratio`, so crank torque from the BSG is `belt_ratio * t_bsg`;
//! * an engine speed of exactly zero means "engine off": the only admissible
//!   engine and BSG torque is zero and no fuel flows.

mod maps;
mod params;

pub use maps::MapSpec;
pub use params::{EngineEff, ParamError, VehicleParams};

/// Slack used when checking commanded torques against limit curves, so a
/// torque assembled by arithmetic (e.g. a split remainder) that lands on a
/// limit is not rejected for a rounding error.
pub const TORQUE_SLACK_NM: f64 = 1e-9;

/// Which actuator violated a torque limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TorqueAxis {
    Engine,
    Bsg,
}

impl std::fmt::Display for TorqueAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TorqueAxis::Engine => "engine",
            TorqueAxis::Bsg => "BSG",
        })
    }
}

/// Plant-level failure: a control outside the physical envelope.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("{axis} torque {value:.3} N·m outside [{lo:.3}, {hi:.3}] N·m at {omega:.3} rad/s")]
    TorqueOutOfLimits {
        axis: TorqueAxis,
        value: f64,
        lo: f64,
        hi: f64,
        omega: f64,
    },
    #[error("battery discharge request {requested:.1} W exceeds limit {limit:.1} W")]
    BatteryPowerLimit { requested: f64, limit: f64 },
}

/// Engine speed resolution for one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineSpeed {
    /// Crankshaft speed; exactly 0.0 when the stop flag shut the engine off.
    pub omega_rad_s: f64,
    /// Torque-converter turbine speed implied by the wheels.
    pub omega_turb_rad_s: f64,
    /// Active gear, 0-based.
    pub gear: usize,
}

/// Resolves engine speed from vehicle speed through the gearbox and torque
/// converter. The shift schedule depends on speed only. With the clutch
/// slip target at zero, the pump speed equals the turbine speed; below the
/// stall speed the engine idles instead of lugging, and a commanded engine
/// stop overrides both cases.
pub fn engine_speed(v: f64, engine_stop: bool, p: &VehicleParams) -> EngineSpeed {
    let gear = p.gear_for_speed(v);
    let omega_turb = p.final_drive_ratio * p.gear_ratio(gear) * v / p.wheel_radius_m;
    let omega = if engine_stop {
        0.0
    } else if omega_turb >= p.engine_stall_speed_rad_s {
        omega_turb
    } else {
        p.engine_idle_speed_rad_s
    };
    EngineSpeed {
        omega_rad_s: omega,
        omega_turb_rad_s: omega_turb,
        gear,
    }
}

/// Actuator torque envelope at one engine speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorqueLimits {
    pub eng_min_nm: f64,
    pub eng_max_nm: f64,
    pub bsg_min_nm: f64,
    pub bsg_max_nm: f64,
    /// BSG shaft speed the BSG limits were evaluated at.
    pub omega_bsg_rad_s: f64,
}

/// Torque limit curves at engine speed `omega`. The engine ceiling is flat
/// torque up to the corner speed and constant power beyond; the floor is the
/// (negative) engine braking line. BSG limits are symmetric, flat torque up
/// to the power limit. At zero speed everything collapses to zero so neither
/// machine can push the vehicle with the engine off.
pub fn torque_limits(omega: f64, p: &VehicleParams) -> TorqueLimits {
    if omega <= 0.0 {
        return TorqueLimits {
            eng_min_nm: 0.0,
            eng_max_nm: 0.0,
            bsg_min_nm: 0.0,
            bsg_max_nm: 0.0,
            omega_bsg_rad_s: 0.0,
        };
    }
    let eng_max = p.engine_torque_max_nm.min(p.engine_power_max_w / omega);
    let eng_min = -(p.engine_brake_torque_nm + p.engine_brake_torque_per_rad_s * omega);
    let omega_bsg = p.belt_ratio * omega;
    let bsg_mag = p.bsg_torque_max_nm.min(p.bsg_power_max_w / omega_bsg);
    TorqueLimits {
        eng_min_nm: eng_min,
        eng_max_nm: eng_max,
        bsg_min_nm: -bsg_mag,
        bsg_max_nm: bsg_mag,
        omega_bsg_rad_s: omega_bsg,
    }
}

/// Fuel mass flow for engine torque `t_eng` at speed `omega`.
///
/// The map is an idle offset plus a torque term scaled by the efficiency
/// surface: `idle + max(t, 0) * omega / (eff(t, omega) * lhv)`. Negative
/// (braking) torque burns idle fuel only. Errors if the torque is outside
/// the engine's own limit curves.
pub fn fuel_rate(t_eng: f64, omega: f64, p: &VehicleParams) -> Result<f64, PlantError> {
    if omega <= 0.0 {
        if t_eng != 0.0 {
            return Err(PlantError::TorqueOutOfLimits {
                axis: TorqueAxis::Engine,
                value: t_eng,
                lo: 0.0,
                hi: 0.0,
                omega,
            });
        }
        return Ok(0.0);
    }
    let lim = torque_limits(omega, p);
    if t_eng < lim.eng_min_nm - TORQUE_SLACK_NM || t_eng > lim.eng_max_nm + TORQUE_SLACK_NM {
        return Err(PlantError::TorqueOutOfLimits {
            axis: TorqueAxis::Engine,
            value: t_eng,
            lo: lim.eng_min_nm,
            hi: lim.eng_max_nm,
            omega,
        });
    }
    let burn = if t_eng > 0.0 {
        t_eng * omega / (p.engine_eff.eval(t_eng, omega) * p.fuel_lhv_j_kg)
    } else {
        0.0
    };
    Ok(p.idle_fuel_rate_kg_s + burn)
}

/// Electrical power drawn from (positive) or pushed into (negative) the
/// battery by the BSG at torque `t_bsg` and shaft speed `omega_bsg`.
/// Efficiency divides when motoring and multiplies when generating, so
/// losses always fall on the battery side.
pub fn bsg_electrical_power(t_bsg: f64, omega_bsg: f64, p: &VehicleParams) -> Result<f64, PlantError> {
    if omega_bsg <= 0.0 {
        if t_bsg != 0.0 {
            return Err(PlantError::TorqueOutOfLimits {
                axis: TorqueAxis::Bsg,
                value: t_bsg,
                lo: 0.0,
                hi: 0.0,
                omega: omega_bsg,
            });
        }
        return Ok(0.0);
    }
    let mag = p.bsg_torque_max_nm.min(p.bsg_power_max_w / omega_bsg);
    if t_bsg.abs() > mag + TORQUE_SLACK_NM {
        return Err(PlantError::TorqueOutOfLimits {
            axis: TorqueAxis::Bsg,
            value: t_bsg,
            lo: -mag,
            hi: mag,
            omega: omega_bsg,
        });
    }
    let eff = p.bsg_eff.eval(omega_bsg);
    let mech = t_bsg * omega_bsg;
    Ok(if t_bsg > 0.0 { mech / eff } else { mech * eff })
}

/// One battery evaluation at a requested terminal power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryStep {
    /// Terminal current from the equivalent-circuit model (discharge > 0).
    pub current_a: f64,
    /// Terminal current plus the auxiliary bias drain.
    pub effective_current_a: f64,
    /// Resulting state-of-charge time derivative (1/s).
    pub soc_rate_per_s: f64,
}

/// Solves the open-circuit-voltage / internal-resistance circuit for the
/// current delivering electrical power `p_elec` (discharge positive), then
/// adds the auxiliary bias current. Fails when the request exceeds the
/// maximum deliverable power `voc² / (4 r)`.
pub fn battery_step(p_elec: f64, soc: f64, p: &VehicleParams) -> Result<BatteryStep, PlantError> {
    let voc = p.battery_voc_v.eval(soc);
    let r = p.battery_resistance_ohm;
    let limit = voc * voc / (4.0 * r);
    if p_elec > limit {
        return Err(PlantError::BatteryPowerLimit {
            requested: p_elec,
            limit,
        });
    }
    let current = (voc - (voc * voc - 4.0 * r * p_elec).sqrt()) / (2.0 * r);
    let effective = current + p.battery_bias_current_a;
    Ok(BatteryStep {
        current_a: current,
        effective_current_a: effective,
        soc_rate_per_s: -effective / p.battery_capacity_as,
    })
}

/// Torque and force delivered at the wheels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrivelineForce {
    pub t_out_nm: f64,
    pub force_n: f64,
}

/// Propagates crank torque `t_pt` through gearbox and final drive.
/// Efficiency multiplies under traction and divides under braking/regen, so
/// the wheels always see the loss. `omega_turb` only feeds the efficiency
/// map lookup.
pub fn driveline_force(t_pt: f64, omega_turb: f64, gear: usize, p: &VehicleParams) -> DrivelineForce {
    let r_tot = p.final_drive_ratio * p.gear_ratio(gear);
    let eff = p.driveline_eff.eval(omega_turb);
    let t_out = if t_pt >= 0.0 {
        r_tot * t_pt * eff
    } else {
        r_tot * t_pt / eff
    };
    DrivelineForce {
        t_out_nm: t_out,
        force_n: t_out / p.wheel_radius_m,
    }
}

/// Opposing road force at speed `v` on grade `grade_rad`: aerodynamic drag
/// plus rolling resistance plus the gravity component along the road.
pub fn road_load(v: f64, grade_rad: f64, p: &VehicleParams) -> f64 {
    let (sin_a, cos_a) = grade_rad.sin_cos();
    let drag = 0.5 * p.drag_coeff * p.air_density_kg_m3 * p.frontal_area_m2 * v * v;
    let roll = p.mass_kg * p.gravity_m_s2 * cos_a * p.rolling_coeff.eval(v);
    let slope = p.mass_kg * p.gravity_m_s2 * sin_a;
    drag + roll + slope
}
