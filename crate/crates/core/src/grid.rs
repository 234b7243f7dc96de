//! Discretization: stage-fitted state grids, control grids, and the
//! infeasible-aware bilinear table lookup both solvers share.
//!
//! The kinetic-energy axis at each stage spans exactly that stage's speed
//! envelope: breakpoints are uniform in speed and then squared, so node
//! spacing follows where the dynamics actually live. Torque axes are warped
//! quadratically toward zero, buying resolution around coasting and light
//! load where the fuel map bends fastest.
//!
//! Infeasible table entries hold `f64::INFINITY`. Interpolation treats that
//! value as a sentinel, checked before any arithmetic: if any corner that
//! would receive nonzero weight is infinite, the result is infinite rather
//! than a number polluted by `inf * 0`.

use crate::route::Route;
use crate::spatial::{ProblemConfig, StateVector};

/// Absolute slack when testing whether a coordinate sits inside an axis
/// span; points within this of the boundary are clamped onto it.
pub const HULL_SLACK: f64 = 1e-9;

/// Minimum speed span an energy axis is built over. A route point may pin
/// its envelope to a single speed; the grid still needs distinct nodes, so
/// the span is widened upward. Nodes above the true envelope are
/// unreachable (the arrival constraint check rejects them) and simply
/// carry infeasible values.
pub const MIN_GRID_SPAN_MPS: f64 = 0.5;

/// One stage's state-space axes. The state-of-charge axis is shared across
/// stages and lives in [`StageGrids`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageAxes {
    /// Squared-speed breakpoints, strictly ascending.
    pub e_axis: Vec<f64>,
    /// Speed envelope this axis was fitted to (m/s).
    pub v_lo_mps: f64,
    pub v_hi_mps: f64,
}

/// State grids for every route point, envelope-fitted per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGrids {
    pub stages: Vec<StageAxes>,
    /// Shared state-of-charge breakpoints, strictly ascending.
    pub soc_axis: Vec<f64>,
}

impl StageGrids {
    /// Builds the per-stage energy axes (uniform in speed over each stage's
    /// effective envelope, then squared) and the shared uniform
    /// state-of-charge axis.
    pub fn build(route: &Route, problem: &ProblemConfig, n_e: usize, n_soc: usize) -> Self {
        assert!(n_e >= 2 && n_soc >= 2, "state grids need at least 2 nodes per axis");
        let stages = (0..route.len())
            .map(|k| {
                let (v_lo, v_hi) = problem.speed_bounds(route, k);
                let v_hi = v_hi.max(v_lo + MIN_GRID_SPAN_MPS);
                let e_axis = (0..n_e)
                    .map(|i| {
                        let v = v_lo + (v_hi - v_lo) * i as f64 / (n_e - 1) as f64;
                        v * v
                    })
                    .collect();
                StageAxes {
                    e_axis,
                    v_lo_mps: v_lo,
                    v_hi_mps: v_hi,
                }
            })
            .collect();
        let soc_axis = (0..n_soc)
            .map(|j| {
                problem.soc_min
                    + (problem.soc_max - problem.soc_min) * j as f64 / (n_soc - 1) as f64
            })
            .collect();
        StageGrids {
            stages,
            soc_axis,
        }
    }

    pub fn n_e(&self) -> usize {
        self.stages[0].e_axis.len()
    }

    pub fn n_soc(&self) -> usize {
        self.soc_axis.len()
    }

    /// Flat index of node (i, j) in a stage table.
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n_soc() + j
    }

    /// The state at node (i, j) of stage `k`.
    pub fn node(&self, k: usize, i: usize, j: usize) -> StateVector {
        StateVector::new(self.stages[k].e_axis[i], self.soc_axis[j])
    }

    /// Interpolates a stage-`k` value table at `x`; infinite outside the
    /// hull or whenever an involved corner is infinite.
    pub fn interpolate(&self, k: usize, table: &[f64], x: &StateVector) -> f64 {
        interpolate_value(&self.stages[k].e_axis, &self.soc_axis, table, x)
    }

    /// Nearest grid node to `x` at stage `k` (ties round toward the lower
    /// index); `None` outside the hull.
    pub fn nearest(&self, k: usize, x: &StateVector) -> Option<(usize, usize)> {
        let i = nearest_node(&self.stages[k].e_axis, x.e_m2_s2)?;
        let j = nearest_node(&self.soc_axis, x.soc)?;
        Some((i, j))
    }
}

/// Torque axis with `n` points covering `[lo, hi]`, `lo <= 0 <= hi`,
/// quadratically compressed toward zero on each side. Points per side are
/// split in proportion to that side's span; `lo`, `0`, and `hi` are always
/// exact members.
pub fn torque_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo <= 0.0 && hi >= 0.0 && lo < hi, "torque grid must straddle zero: [{lo}, {hi}]");
    assert!(n >= 3, "torque grid needs at least 3 points");
    let span = hi - lo;
    let mut n_neg = ((n - 1) as f64 * (-lo) / span).round() as usize;
    if lo < 0.0 {
        n_neg = n_neg.max(1);
    }
    if hi > 0.0 {
        n_neg = n_neg.min(n - 2);
    }
    let n_pos = n - 1 - n_neg;
    let mut out = Vec::with_capacity(n);
    for k in (1..=n_neg).rev() {
        let s = k as f64 / n_neg as f64;
        out.push(lo * s * s);
    }
    out.push(0.0);
    for k in 1..=n_pos {
        let s = k as f64 / n_pos as f64;
        out.push(hi * s * s);
    }
    out
}

/// `n` evenly spaced points over `[lo, hi]` inclusive.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && hi > lo);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Locates `x` on a strictly ascending axis: `Inside(i, w)` means `x` sits
/// between nodes `i` and `i + 1` with weight `w` on the upper node
/// (`w = 0` exactly on node `i`).
fn locate(axis: &[f64], x: f64) -> Option<(usize, f64)> {
    let n = axis.len();
    let lo = axis[0];
    let hi = axis[n - 1];
    if x < lo - HULL_SLACK || x > hi + HULL_SLACK {
        return None;
    }
    let x = x.clamp(lo, hi);
    // first node strictly greater than x
    let hi_idx = axis.partition_point(|&a| a <= x);
    if hi_idx == n {
        return Some((n - 2, 1.0));
    }
    if hi_idx == 0 {
        return Some((0, 0.0));
    }
    let i = hi_idx - 1;
    if axis[i] == x {
        return Some((i, 0.0));
    }
    let w = (x - axis[i]) / (axis[i + 1] - axis[i]);
    Some((i, w))
}

/// Bilinear interpolation of `table` (row-major over `e_axis` then
/// `soc_axis`) at `x`. Corners carrying zero weight are ignored entirely,
/// so an exact node hit next to an infeasible neighbor stays finite; any
/// infinite corner with nonzero weight makes the result infinite; points
/// outside the axis hull are infinite.
pub fn interpolate_value(e_axis: &[f64], soc_axis: &[f64], table: &[f64], x: &StateVector) -> f64 {
    debug_assert_eq!(table.len(), e_axis.len() * soc_axis.len());
    let (ie, we) = match locate(e_axis, x.e_m2_s2) {
        Some(t) => t,
        None => return f64::INFINITY,
    };
    let (js, ws) = match locate(soc_axis, x.soc) {
        Some(t) => t,
        None => return f64::INFINITY,
    };
    let n_soc = soc_axis.len();
    let mut acc = 0.0;
    for (di, wi) in [(0usize, 1.0 - we), (1, we)] {
        for (dj, wj) in [(0usize, 1.0 - ws), (1, ws)] {
            let w = wi * wj;
            if w == 0.0 {
                continue;
            }
            let v = table[(ie + di) * n_soc + (js + dj)];
            if v == f64::INFINITY {
                return f64::INFINITY;
            }
            acc += w * v;
        }
    }
    acc
}

/// Index of the axis node nearest to `x` (ties toward the lower index);
/// `None` outside the hull.
pub fn nearest_node(axis: &[f64], x: f64) -> Option<usize> {
    let (i, w) = locate(axis, x)?;
    Some(if w > 0.5 { i + 1 } else { i })
}

/// Bilinear corner weights at `x`: the (i, j, weight) triples with strictly
/// positive weight (1, 2, or 4 entries). `None` outside the hull.
pub fn bilinear_weights(
    e_axis: &[f64],
    soc_axis: &[f64],
    x: &StateVector,
) -> Option<Vec<(usize, usize, f64)>> {
    let (ie, we) = locate(e_axis, x.e_m2_s2)?;
    let (js, ws) = locate(soc_axis, x.soc)?;
    let mut out = Vec::with_capacity(4);
    for (di, wi) in [(0usize, 1.0 - we), (1, we)] {
        for (dj, wj) in [(0usize, 1.0 - ws), (1, ws)] {
            let w = wi * wj;
            if w > 0.0 {
                out.push((ie + di, js + dj, w));
            }
        }
    }
    Some(out)
}
