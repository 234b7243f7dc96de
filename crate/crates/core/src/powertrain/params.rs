//! Vehicle parameter set and its file loader.
//!
//! Parameters live in a flat TOML document with SI units encoded in the key
//! names. Scalar efficiencies may be replaced by breakpoint tables without
//! touching any code; unknown keys are rejected so typos fail loudly.

use std::path::Path;

use serde::Deserialize;

use super::maps::MapSpec;

/// Engine brake-specific-efficiency surface: either a constant or a smooth
/// bell over (torque, speed) peaking at `peak`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum EngineEff {
    Constant(f64),
    Bell {
        peak: f64,
        torque_peak_nm: f64,
        torque_width_nm: f64,
        speed_peak_rad_s: f64,
        speed_width_rad_s: f64,
    },
}

impl EngineEff {
    /// Efficiency at engine torque `t` (N·m) and speed `omega` (rad/s).
    /// Always in (0, 1] for a validated parameter set.
    pub fn eval(&self, t: f64, omega: f64) -> f64 {
        match *self {
            EngineEff::Constant(c) => c,
            EngineEff::Bell {
                peak,
                torque_peak_nm,
                torque_width_nm,
                speed_peak_rad_s,
                speed_width_rad_s,
            } => {
                let dt = (t - torque_peak_nm) / torque_width_nm;
                let dw = (omega - speed_peak_rad_s) / speed_width_rad_s;
                peak * (-(dt * dt + dw * dw)).exp()
            }
        }
    }
}

/// Full plant parameter set. Construct via [`VehicleParams::load`],
/// [`VehicleParams::from_toml_str`], or start from `VehicleParams::default()`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct VehicleParams {
    // -- body and road load --
    pub mass_kg: f64,
    pub frontal_area_m2: f64,
    pub drag_coeff: f64,
    pub air_density_kg_m3: f64,
    /// Rolling-resistance coefficient, optionally speed dependent.
    pub rolling_coeff: MapSpec,
    pub gravity_m_s2: f64,
    pub wheel_radius_m: f64,

    // -- driveline --
    pub final_drive_ratio: f64,
    /// Gearbox ratios, highest (launch) gear first.
    pub gear_ratios: Vec<f64>,
    /// Upshift speeds between consecutive gears; `gear_ratios.len() - 1`
    /// strictly increasing entries. Gear `g` is active from
    /// `gear_upshift_speeds_mps[g-1]` (inclusive) upward.
    pub gear_upshift_speeds_mps: Vec<f64>,
    /// Transmission efficiency, optionally a table over turbine speed.
    pub driveline_eff: MapSpec,
    /// Most negative commandable crank-referred torque. Demands below the
    /// engine's own braking ability are made up by friction brakes, so this
    /// bounds total deceleration authority, not the engine itself.
    pub brake_torque_floor_nm: f64,

    // -- engine --
    pub engine_idle_speed_rad_s: f64,
    /// Below this turbine-side speed the engine cannot stay coupled and
    /// falls back to idle speed.
    pub engine_stall_speed_rad_s: f64,
    pub engine_torque_max_nm: f64,
    /// Above `engine_power_max_w / engine_torque_max_nm` rad/s the torque
    /// ceiling follows constant power.
    pub engine_power_max_w: f64,
    /// Engine braking torque magnitude at zero speed (intercept of the
    /// negative torque limit).
    pub engine_brake_torque_nm: f64,
    /// Speed slope of the engine braking torque limit.
    pub engine_brake_torque_per_rad_s: f64,
    pub idle_fuel_rate_kg_s: f64,
    pub fuel_lhv_j_kg: f64,
    pub engine_eff: EngineEff,

    // -- belt starter generator --
    /// Belt speed-up ratio from crankshaft to BSG shaft.
    pub belt_ratio: f64,
    pub bsg_torque_max_nm: f64,
    pub bsg_power_max_w: f64,
    /// Electromechanical efficiency, optionally a table over BSG speed.
    pub bsg_eff: MapSpec,

    // -- battery --
    /// Open-circuit voltage, optionally a table over state of charge.
    pub battery_voc_v: MapSpec,
    pub battery_resistance_ohm: f64,
    /// Nominal charge capacity in ampere-seconds.
    pub battery_capacity_as: f64,
    /// Constant auxiliary drain added to the battery current.
    pub battery_bias_current_a: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass_kg: 1600.0,
            frontal_area_m2: 2.2,
            drag_coeff: 0.30,
            air_density_kg_m3: 1.225,
            rolling_coeff: MapSpec::Constant(0.009),
            gravity_m_s2: 9.81,
            wheel_radius_m: 0.32,
            final_drive_ratio: 3.2,
            gear_ratios: vec![4.0, 2.5, 1.7, 1.2, 1.0, 0.85],
            gear_upshift_speeds_mps: vec![5.0, 9.0, 14.0, 20.0, 27.0],
            driveline_eff: MapSpec::Constant(0.95),
            brake_torque_floor_nm: -650.0,
            engine_idle_speed_rad_s: 75.0,
            engine_stall_speed_rad_s: 90.0,
            engine_torque_max_nm: 200.0,
            engine_power_max_w: 90_000.0,
            engine_brake_torque_nm: 15.0,
            engine_brake_torque_per_rad_s: 0.03,
            idle_fuel_rate_kg_s: 2.0e-4,
            fuel_lhv_j_kg: 42.6e6,
            engine_eff: EngineEff::Bell {
                peak: 0.34,
                torque_peak_nm: 120.0,
                torque_width_nm: 150.0,
                speed_peak_rad_s: 250.0,
                speed_width_rad_s: 300.0,
            },
            belt_ratio: 2.5,
            bsg_torque_max_nm: 50.0,
            bsg_power_max_w: 12_000.0,
            bsg_eff: MapSpec::Constant(0.85),
            battery_voc_v: MapSpec::Constant(48.0),
            battery_resistance_ohm: 0.05,
            battery_capacity_as: 28_800.0,
            battery_bias_current_a: 2.0,
        }
    }
}

/// Parameter loading / validation failure.
#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("cannot read parameter file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse parameter file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

impl VehicleParams {
    /// Loads and validates a parameter file, rejecting unknown keys.
    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Parses and validates a parameter document.
    pub fn from_toml_str(text: &str) -> Result<Self, ParamError> {
        let p: VehicleParams = toml::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// Structural and range checks. `Default` passes by construction (there
    /// is a test pinning that).
    pub fn validate(&self) -> Result<(), ParamError> {
        let inv = |msg: String| Err(ParamError::Invalid(msg));

        for (name, v) in [
            ("mass_kg", self.mass_kg),
            ("frontal_area_m2", self.frontal_area_m2),
            ("air_density_kg_m3", self.air_density_kg_m3),
            ("gravity_m_s2", self.gravity_m_s2),
            ("wheel_radius_m", self.wheel_radius_m),
            ("final_drive_ratio", self.final_drive_ratio),
            ("engine_idle_speed_rad_s", self.engine_idle_speed_rad_s),
            ("engine_stall_speed_rad_s", self.engine_stall_speed_rad_s),
            ("engine_torque_max_nm", self.engine_torque_max_nm),
            ("engine_power_max_w", self.engine_power_max_w),
            ("fuel_lhv_j_kg", self.fuel_lhv_j_kg),
            ("belt_ratio", self.belt_ratio),
            ("bsg_torque_max_nm", self.bsg_torque_max_nm),
            ("bsg_power_max_w", self.bsg_power_max_w),
            ("battery_resistance_ohm", self.battery_resistance_ohm),
            ("battery_capacity_as", self.battery_capacity_as),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return inv(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.drag_coeff < 0.0 || !self.drag_coeff.is_finite() {
            return inv(format!("drag_coeff must be >= 0, got {}", self.drag_coeff));
        }
        if self.idle_fuel_rate_kg_s < 0.0 || !self.idle_fuel_rate_kg_s.is_finite() {
            return inv("idle_fuel_rate_kg_s must be >= 0".into());
        }
        if self.engine_brake_torque_nm < 0.0 || self.engine_brake_torque_per_rad_s < 0.0 {
            return inv("engine brake torque coefficients must be >= 0".into());
        }
        if !(self.brake_torque_floor_nm.is_finite() && self.brake_torque_floor_nm <= 0.0) {
            return inv("brake_torque_floor_nm must be <= 0".into());
        }
        if self.battery_bias_current_a < 0.0 || !self.battery_bias_current_a.is_finite() {
            return inv("battery_bias_current_a must be >= 0".into());
        }

        if self.gear_ratios.is_empty() {
            return inv("gear_ratios must not be empty".into());
        }
        if self.gear_ratios.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return inv("gear_ratios must all be positive".into());
        }
        if self.gear_upshift_speeds_mps.len() != self.gear_ratios.len() - 1 {
            return inv(format!(
                "expected {} gear_upshift_speeds_mps entries for {} gears, got {}",
                self.gear_ratios.len() - 1,
                self.gear_ratios.len(),
                self.gear_upshift_speeds_mps.len()
            ));
        }
        if self
            .gear_upshift_speeds_mps
            .windows(2)
            .any(|w| w[1] <= w[0])
            || self.gear_upshift_speeds_mps.iter().any(|&s| s <= 0.0)
        {
            return inv("gear_upshift_speeds_mps must be positive and strictly increasing".into());
        }

        for (name, map) in [
            ("rolling_coeff", &self.rolling_coeff),
            ("driveline_eff", &self.driveline_eff),
            ("bsg_eff", &self.bsg_eff),
            ("battery_voc_v", &self.battery_voc_v),
        ] {
            map.validate(name).map_err(ParamError::Invalid)?;
        }
        if self.rolling_coeff.min_value() < 0.0 {
            return inv("rolling_coeff must be >= 0".into());
        }
        for (name, map) in [("driveline_eff", &self.driveline_eff), ("bsg_eff", &self.bsg_eff)] {
            if map.min_value() <= 0.0 || map.max_value() > 1.0 {
                return inv(format!("{name} must lie in (0, 1]"));
            }
        }
        if self.battery_voc_v.min_value() <= 0.0 {
            return inv("battery_voc_v must be positive".into());
        }

        match self.engine_eff {
            EngineEff::Constant(c) => {
                if !(c > 0.0 && c <= 1.0) {
                    return inv(format!("engine_eff constant must be in (0, 1], got {c}"));
                }
            }
            EngineEff::Bell {
                peak,
                torque_peak_nm,
                torque_width_nm,
                speed_peak_rad_s,
                speed_width_rad_s,
            } => {
                if !(peak > 0.0 && peak <= 1.0) {
                    return inv(format!("engine_eff peak must be in (0, 1], got {peak}"));
                }
                if torque_width_nm <= 0.0 || speed_width_rad_s <= 0.0 {
                    return inv("engine_eff widths must be positive".into());
                }
                if torque_peak_nm < 0.0 || speed_peak_rad_s < 0.0 {
                    return inv("engine_eff peak location must be non-negative".into());
                }
                // Fuel rate must stay monotone in torque: d/dT [T / eff(T)] > 0
                // requires the torque bell to be wide relative to its peak
                // location (width > peak/sqrt(2)).
                if torque_width_nm <= torque_peak_nm / std::f64::consts::SQRT_2 {
                    return inv(format!(
                        "engine_eff torque_width_nm {torque_width_nm} too narrow for peak at \
                         {torque_peak_nm} N·m; fuel rate would decrease with torque"
                    ));
                }
            }
        }
        if self.engine_stall_speed_rad_s < self.engine_idle_speed_rad_s {
            return inv("engine_stall_speed_rad_s must be >= engine_idle_speed_rad_s".into());
        }
        Ok(())
    }

    /// Active gear (0-based) for vehicle speed `v`: the highest gear whose
    /// upshift speed has been reached, first gear below the first threshold.
    pub fn gear_for_speed(&self, v: f64) -> usize {
        self.gear_upshift_speeds_mps.partition_point(|&s| s <= v)
    }

    /// Gearbox ratio of 0-based gear `g`.
    pub fn gear_ratio(&self, g: usize) -> f64 {
        self.gear_ratios[g]
    }
}
