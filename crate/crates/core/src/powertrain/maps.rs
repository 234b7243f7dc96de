//! Scalar lookup maps used by the plant model.
//!
//! Every map is either a constant or a sorted breakpoint table with linear
//! interpolation. Queries outside the table are clamped to the end values so
//! a slightly out-of-range speed never turns into an extrapolated efficiency.

use serde::Deserialize;

/// One-dimensional map specification as it appears in the parameter file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MapSpec {
    /// Single value, independent of the lookup variable.
    Constant(f64),
    /// Piecewise-linear table over strictly increasing breakpoints.
    Table { breakpoints: Vec<f64>, values: Vec<f64> },
}

impl MapSpec {
    /// Evaluates the map at `x`.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            MapSpec::Constant(c) => *c,
            MapSpec::Table { breakpoints, values } => interp1_clamped(breakpoints, values, x),
        }
    }

    /// Checks table shape: matching lengths, at least one entry, strictly
    /// increasing breakpoints, all values finite.
    pub fn validate(&self, name: &str) -> Result<(), String> {
        match self {
            MapSpec::Constant(c) => {
                if !c.is_finite() {
                    return Err(format!("{name}: constant must be finite"));
                }
            }
            MapSpec::Table { breakpoints, values } => {
                if breakpoints.is_empty() {
                    return Err(format!("{name}: empty breakpoint table"));
                }
                if breakpoints.len() != values.len() {
                    return Err(format!(
                        "{name}: {} breakpoints but {} values",
                        breakpoints.len(),
                        values.len()
                    ));
                }
                if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(format!("{name}: breakpoints must be strictly increasing"));
                }
                if breakpoints.iter().chain(values).any(|v| !v.is_finite()) {
                    return Err(format!("{name}: non-finite table entry"));
                }
            }
        }
        Ok(())
    }

    /// Smallest value the map can return (used for positivity checks).
    pub fn min_value(&self) -> f64 {
        match self {
            MapSpec::Constant(c) => *c,
            MapSpec::Table { values, .. } => values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Largest value the map can return.
    pub fn max_value(&self) -> f64 {
        match self {
            MapSpec::Constant(c) => *c,
            MapSpec::Table { values, .. } => {
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }
}

/// Linear interpolation over a sorted breakpoint table, clamped at both ends.
fn interp1_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    // partition_point returns the first index with breakpoint > x; safe to
    // subtract one because x > xs[0] here.
    let hi = xs.partition_point(|&b| b <= x);
    let lo = hi - 1;
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + w * (ys[hi] - ys[lo])
}
