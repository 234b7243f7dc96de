//! Instantaneous equivalent-consumption split rule.
//!
//! For a demanded total crank torque, the BSG share is chosen by minimizing
//! fuel flow plus an equivalence-weighted battery term,
//! `mdot_f + factor * P_elec / Q_lhv`, over a candidate grid of BSG torques.
//! The `factor` is the charge-equivalence weight: a base value plus a
//! tan-shaped state-of-charge feedback that makes depleting the battery
//! progressively expensive and overcharging progressively cheap.
//!
//! The two cost terms of every candidate are kept separate so that scanning
//! many equivalence factors reuses one plant evaluation per candidate — the
//! per-factor cost is a scalar recombination, bit-identical to evaluating
//! that factor directly.

use crate::powertrain::{
    bsg_electrical_power, engine_speed, fuel_rate, torque_limits, EngineSpeed, TorqueLimits,
    VehicleParams, TORQUE_SLACK_NM,
};

/// Split-rule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EcmsConfig {
    /// Base equivalence factor (the tunable part).
    pub lambda0: f64,
    /// Slope of the state-of-charge feedback inside the tan.
    pub lambda1: f64,
    /// Desired state of charge the feedback regulates toward.
    pub soc_des: f64,
    /// Number of BSG torque candidates per demanded torque.
    pub n_split: usize,
    /// Margin keeping the tan argument away from its poles (rad).
    pub tan_margin: f64,
}

impl Default for EcmsConfig {
    fn default() -> Self {
        EcmsConfig {
            lambda0: 2.87,
            lambda1: 5.0,
            soc_des: 0.55,
            n_split: 21,
            tan_margin: 0.01,
        }
    }
}

impl EcmsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda0.is_finite() && self.lambda0 > 0.0) {
            return Err(format!("lambda0 must be positive, got {}", self.lambda0));
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(format!("lambda1 must be >= 0, got {}", self.lambda1));
        }
        if !(0.0..=1.0).contains(&self.soc_des) {
            return Err(format!("soc_des must be in [0, 1], got {}", self.soc_des));
        }
        if self.n_split < 2 {
            return Err(format!("n_split must be >= 2, got {}", self.n_split));
        }
        if !(self.tan_margin > 0.0 && self.tan_margin < std::f64::consts::FRAC_PI_2) {
            return Err(format!("tan_margin out of range: {}", self.tan_margin));
        }
        Ok(())
    }

    /// State-of-charge feedback part of the equivalence factor:
    /// `tan(-(soc - soc_des) * lambda1)`, argument clamped away from ±π/2.
    pub fn penalty_tan(&self, soc: f64) -> f64 {
        let hi = std::f64::consts::FRAC_PI_2 - self.tan_margin;
        let arg = (-(soc - self.soc_des) * self.lambda1).clamp(-hi, hi);
        arg.tan()
    }

    /// Full equivalence factor at state of charge `soc` for base value
    /// `lambda0`: equals `lambda0` exactly at `soc_des` and decreases
    /// strictly as charge builds up.
    pub fn soc_penalty(&self, soc: f64) -> f64 {
        self.lambda0 + self.penalty_tan(soc)
    }

    /// Equivalence factor using an explicit base value (for λ-grid scans).
    pub fn soc_penalty_with(&self, lambda0: f64, soc: f64) -> f64 {
        lambda0 + self.penalty_tan(soc)
    }
}

/// Engine operating point shared by every split evaluation at one
/// (stage, speed) pair: engine speed resolution plus torque limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub engine: EngineSpeed,
    pub limits: TorqueLimits,
}

/// Resolves the operating point at vehicle speed `v`.
pub fn operating_point(v: f64, engine_stop: bool, params: &VehicleParams) -> OperatingPoint {
    let engine = engine_speed(v, engine_stop, params);
    let limits = torque_limits(engine.omega_rad_s, params);
    OperatingPoint { engine, limits }
}

/// One feasible torque split with its two retained cost terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    /// BSG torque at its own shaft (N·m).
    pub t_bsg_nm: f64,
    /// Engine-axis command completing the demand (may dip below the engine
    /// braking line, the remainder being friction).
    pub t_eng_cmd_nm: f64,
    /// Fuel flow term (kg/s).
    pub fuel_term_kg_s: f64,
    /// Battery term `P_elec / Q_lhv` (kg/s-equivalent, discharge positive).
    pub batt_term_kg_s: f64,
    /// Electrical power at the battery (W).
    pub p_elec_w: f64,
}

impl SplitCandidate {
    /// ECMS cost under equivalence factor `factor`.
    pub fn cost(&self, factor: f64) -> f64 {
        self.fuel_term_kg_s + factor * self.batt_term_kg_s
    }
}

/// All feasible split candidates for one demanded torque, with the count of
/// reduced-plant evaluations it took to build them.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidates {
    pub candidates: Vec<SplitCandidate>,
    /// Reduced plant-model evaluations performed (one per grid candidate
    /// actually evaluated, independent of how many factors are scanned).
    pub plant_evals: u64,
}

/// The selected split for one equivalence factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub candidate: SplitCandidate,
    pub cost_kg_s: f64,
}

/// Evaluates the BSG candidate grid for demanded crank torque `t_pt` at a
/// fixed operating point. Candidates whose engine-side remainder cannot be
/// realized (above the torque ceiling or below the brake floor) are dropped;
/// the battery power limit is checked here too so every surviving candidate
/// is fully admissible at the plant level.
pub fn split_candidates(
    op: &OperatingPoint,
    t_pt: f64,
    params: &VehicleParams,
    cfg: &EcmsConfig,
) -> SplitCandidates {
    let lim = &op.limits;
    let omega = op.engine.omega_rad_s;
    let mut out = SplitCandidates {
        candidates: Vec::with_capacity(cfg.n_split),
        plant_evals: 0,
    };

    let n = if omega <= 0.0 { 1 } else { cfg.n_split };
    for i in 0..n {
        let t_bsg = if n == 1 {
            0.0
        } else {
            lim.bsg_min_nm
                + (lim.bsg_max_nm - lim.bsg_min_nm) * i as f64 / (n - 1) as f64
        };
        let t_eng_cmd = t_pt - params.belt_ratio * t_bsg;
        if t_eng_cmd > lim.eng_max_nm + TORQUE_SLACK_NM
            || t_eng_cmd < params.brake_torque_floor_nm - TORQUE_SLACK_NM
        {
            continue;
        }
        out.plant_evals += 1;
        let t_eng_fuel = t_eng_cmd.max(lim.eng_min_nm).min(lim.eng_max_nm);
        let fuel = match fuel_rate(t_eng_fuel, omega, params) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let p_elec = match bsg_electrical_power(t_bsg, lim.omega_bsg_rad_s, params) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let voc = params.battery_voc_v.min_value();
        if p_elec > voc * voc / (4.0 * params.battery_resistance_ohm) {
            continue;
        }
        out.candidates.push(SplitCandidate {
            t_bsg_nm: t_bsg,
            t_eng_cmd_nm: t_eng_cmd,
            fuel_term_kg_s: fuel,
            batt_term_kg_s: p_elec / params.fuel_lhv_j_kg,
            p_elec_w: p_elec,
        });
    }
    out
}

impl SplitCandidates {
    /// Argmin over candidates under equivalence factor `factor`, breaking
    /// exact cost ties toward the smaller BSG torque magnitude (and, if both
    /// magnitudes tie, toward the candidate scanned first, i.e. the more
    /// negative torque). Returns `None` when no candidate survived.
    pub fn best(&self, factor: f64) -> Option<SplitChoice> {
        let mut best: Option<(f64, f64, &SplitCandidate)> = None;
        for c in &self.candidates {
            let cost = c.cost(factor);
            let abs = c.t_bsg_nm.abs();
            let better = match &best {
                None => true,
                Some((bc, babs, _)) => cost < *bc || (cost == *bc && abs < *babs),
            };
            if better {
                best = Some((cost, abs, c));
            }
        }
        best.map(|(cost, _, c)| SplitChoice {
            candidate: *c,
            cost_kg_s: cost,
        })
    }
}

/// Full split search for one demanded torque and one equivalence factor.
pub fn optimal_split(
    op: &OperatingPoint,
    t_pt: f64,
    factor: f64,
    params: &VehicleParams,
    cfg: &EcmsConfig,
) -> Option<SplitChoice> {
    split_candidates(op, t_pt, params, cfg).best(factor)
}

/// Split search across a grid of equivalence factors with one shared
/// candidate evaluation. The returned choices are index-aligned with
/// `factors` and identical to calling [`optimal_split`] per factor.
pub fn batch_split_lambda_grid(
    op: &OperatingPoint,
    t_pt: f64,
    factors: &[f64],
    params: &VehicleParams,
    cfg: &EcmsConfig,
) -> (SplitCandidates, Vec<Option<SplitChoice>>) {
    let cands = split_candidates(op, t_pt, params, cfg);
    let choices = factors.iter().map(|&f| cands.best(f)).collect();
    (cands, choices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_rel(actual: f64, expected: f64, tol: f64) {
        let denom = expected.abs().max(1e-300);
        assert!(
            (actual - expected).abs() / denom <= tol,
            "actual {actual} vs expected {expected}"
        );
    }

    #[test]
    fn penalty_equals_base_at_desired_soc() {
        let cfg = EcmsConfig::default();
        assert_eq!(cfg.soc_penalty(cfg.soc_des), cfg.lambda0);
    }

    #[test]
    fn penalty_hand_value() {
        let cfg = EcmsConfig {
            lambda0: 2.87,
            lambda1: 5.0,
            soc_des: 0.5,
            ..Default::default()
        };
        // -(0.4 - 0.5) * 5 = 0.5 inside the unclamped region
        assert_rel(cfg.soc_penalty(0.4), 2.87 + 0.5_f64.tan(), 1e-9);
    }

    #[test]
    fn penalty_strictly_decreasing_in_soc() {
        let cfg = EcmsConfig::default();
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let soc = 0.3 + 0.5 * i as f64 / 100.0;
            let v = cfg.soc_penalty(soc);
            assert!(v < prev, "penalty not decreasing at soc={soc}");
            prev = v;
        }
    }

    #[test]
    fn penalty_clamped_stays_finite() {
        let cfg = EcmsConfig {
            lambda1: 1e6,
            ..Default::default()
        };
        let lo = cfg.soc_penalty(1.0);
        let hi = cfg.soc_penalty(0.0);
        assert!(lo.is_finite() && hi.is_finite());
        // clamped at tan(±(π/2 − margin))
        let bound = (std::f64::consts::FRAC_PI_2 - cfg.tan_margin).tan();
        assert_rel(hi, cfg.lambda0 + bound, 1e-12);
        assert_rel(lo, cfg.lambda0 - bound, 1e-12);
    }

    fn cruise_op(params: &VehicleParams) -> OperatingPoint {
        // v = 20 m/s: engine at 200 rad/s, BSG at 500 rad/s
        operating_point(20.0, false, params)
    }

    #[test]
    fn argmin_matches_exhaustive_scan() {
        let params = VehicleParams::default();
        let cfg = EcmsConfig {
            n_split: 5,
            ..Default::default()
        };
        let op = cruise_op(&params);
        let cands = split_candidates(&op, 120.0, &params, &cfg);
        assert!(!cands.candidates.is_empty());
        let factor = 3.1;
        let manual = cands
            .candidates
            .iter()
            .map(|c| c.fuel_term_kg_s + factor * c.batt_term_kg_s)
            .fold(f64::INFINITY, f64::min);
        let choice = cands.best(factor).unwrap();
        assert_eq!(choice.cost_kg_s, manual);
    }

    #[test]
    fn zero_factor_maximizes_electric_assist() {
        let params = VehicleParams::default();
        let cfg = EcmsConfig::default();
        let op = cruise_op(&params);
        let cands = split_candidates(&op, 120.0, &params, &cfg);
        let choice = cands.best(0.0).unwrap();
        // free electricity: the split leans on the largest feasible assist,
        // which minimizes the fuel term
        let max_assist = cands
            .candidates
            .iter()
            .map(|c| c.t_bsg_nm)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(choice.candidate.t_bsg_nm, max_assist);
        let min_fuel = cands
            .candidates
            .iter()
            .map(|c| c.fuel_term_kg_s)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(choice.candidate.fuel_term_kg_s, min_fuel);
    }

    #[test]
    fn discharge_non_increasing_in_factor() {
        let params = VehicleParams::default();
        let cfg = EcmsConfig::default();
        let op = cruise_op(&params);
        let cands = split_candidates(&op, 100.0, &params, &cfg);
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let factor = 0.2 + i as f64 * 0.4;
            let p = cands.best(factor).unwrap().candidate.p_elec_w;
            assert!(
                p <= prev + 1e-9,
                "discharge power rose with factor {factor}: {p} > {prev}"
            );
            prev = p;
        }
    }

    #[test]
    fn infeasible_demand_yields_no_split() {
        let params = VehicleParams::default();
        let cfg = EcmsConfig::default();
        let op = cruise_op(&params);
        // far beyond engine max + full assist
        let cands = split_candidates(&op, 1000.0, &params, &cfg);
        assert!(cands.candidates.is_empty());
        assert!(cands.best(3.0).is_none());
    }

    #[test]
    fn single_feasible_candidate_returned() {
        let params = VehicleParams::default();
        let cfg = EcmsConfig::default();
        let op = cruise_op(&params);
        let lim = op.limits;
        let step = (lim.bsg_max_nm - lim.bsg_min_nm) / (cfg.n_split - 1) as f64;
        // highest assist candidate on the grid the battery can actually
        // feed: the deliverable-power ceiling voc²/(4R) culls the top of
        // the discharge range at this speed
        let voc = params.battery_voc_v.min_value();
        let p_cap = voc * voc / (4.0 * params.battery_resistance_ohm);
        let t_cap = (0..cfg.n_split)
            .map(|i| {
                lim.bsg_min_nm
                    + (lim.bsg_max_nm - lim.bsg_min_nm) * i as f64 / (cfg.n_split - 1) as f64
            })
            .filter(|&t| {
                bsg_electrical_power(t, lim.omega_bsg_rad_s, &params)
                    .map(|p| p <= p_cap)
                    .unwrap_or(false)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(t_cap.is_finite() && t_cap < lim.bsg_max_nm);
        // demand sized so the engine remainder fits only for that candidate
        // (half a grid step of headroom): anything less assisted overloads
        // the engine, anything more assisted overloads the battery
        let t_pt = lim.eng_max_nm + params.belt_ratio * (t_cap - 0.5 * step);
        let cands = split_candidates(&op, t_pt, &params, &cfg);
        assert_eq!(cands.candidates.len(), 1);
        assert_eq!(cands.candidates[0].t_bsg_nm, t_cap);
        let choice = cands.best(2.87).unwrap();
        assert_eq!(choice.candidate.t_bsg_nm, t_cap);
    }

    #[test]
    fn chosen_electrical_power_monotone_in_factor() {
        // Exchange argument: the split minimizes fuel + factor·P over a
        // fixed candidate set, so the chosen electrical power can never
        // increase when electricity gets more expensive.
        let params = VehicleParams::default();
        let cfg = EcmsConfig::default();
        for v in [8.0, 12.0, 15.0, 19.0, 24.0] {
            let op = operating_point(v, false, &params);
            for t_pt in [-120.0, -30.0, 10.0, 40.0, 80.0, 140.0] {
                let mut prev_p = f64::INFINITY;
                let mut prev_t = f64::INFINITY;
                for factor in [0.5, 1.5, 2.5, 3.5, 5.0, 8.0] {
                    let choice = optimal_split(&op, t_pt, factor, &params, &cfg).unwrap();
                    assert!(
                        choice.candidate.p_elec_w <= prev_p,
                        "power rose with factor at v={v}, t_pt={t_pt}, factor={factor}"
                    );
                    assert!(
                        choice.candidate.t_bsg_nm <= prev_t,
                        "torque rose with factor at v={v}, t_pt={t_pt}, factor={factor}"
                    );
                    prev_p = choice.candidate.p_elec_w;
                    prev_t = choice.candidate.t_bsg_nm;
                }
            }
        }
    }

    #[test]
    fn batch_matches_separate_calls_bitwise() {
        let params = VehicleParams::default();
        let cfg = EcmsConfig::default();
        let op = cruise_op(&params);
        let factors: Vec<f64> = (0..10).map(|i| 0.5 + i as f64 * 0.9).collect();
        let (cands, batch) = batch_split_lambda_grid(&op, 90.0, &factors, &params, &cfg);
        assert_eq!(cands.plant_evals, 21);
        for (i, &f) in factors.iter().enumerate() {
            let separate = optimal_split(&op, 90.0, f, &params, &cfg);
            match (&batch[i], &separate) {
                (Some(a), Some(b)) => {
                    assert_eq!(a.candidate, b.candidate);
                    assert_eq!(a.cost_kg_s.to_bits(), b.cost_kg_s.to_bits());
                }
                (None, None) => {}
                _ => panic!("batch/separate disagree at factor {f}"),
            }
        }
    }

    #[test]
    fn plant_evals_independent_of_factor_count() {
        let params = VehicleParams::default();
        let cfg = EcmsConfig::default();
        let op = cruise_op(&params);
        let (c1, _) = batch_split_lambda_grid(&op, 90.0, &[2.87], &params, &cfg);
        let many: Vec<f64> = (0..40).map(|i| 0.5 + i as f64 * 0.2).collect();
        let (c40, _) = batch_split_lambda_grid(&op, 90.0, &many, &params, &cfg);
        assert_eq!(c1.plant_evals, c40.plant_evals);
    }

    #[test]
    fn engine_off_single_zero_candidate() {
        let params = VehicleParams::default();
        let cfg = EcmsConfig::default();
        let op = operating_point(1.0, true, &params);
        assert_eq!(op.engine.omega_rad_s, 0.0);
        let cands = split_candidates(&op, -20.0, &params, &cfg);
        assert_eq!(cands.candidates.len(), 1);
        assert_eq!(cands.candidates[0].t_bsg_nm, 0.0);
        assert_eq!(cands.candidates[0].fuel_term_kg_s, 0.0);
        assert_eq!(cands.candidates[0].t_eng_cmd_nm, -20.0);
    }
}
