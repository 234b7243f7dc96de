//! Route ingestion and resampling onto the uniform distance grid the
//! solvers run on.
//!
//! A raw route is an ordered list of distance-stamped records: speed
//! envelope, road grade, and stop markers. [`resample`] turns it into an
//! equally spaced grid where speed limits are held from the previous raw
//! point, grade is interpolated linearly, and each stop is snapped to its
//! nearest grid point and pinned to the crawl-speed floor. The first and
//! last grid points are always stops: trips start and end "at rest", with
//! standstill approximated by the floor speed so travel time per stage stays
//! finite.

use std::io::Read;
use std::path::Path;

use serde::Deserialize;

/// Default crawl speed standing in for a full stop, m/s.
pub const DEFAULT_V_FLOOR_MPS: f64 = 1.0;
/// Default grid spacing, m.
pub const DEFAULT_STEP_M: f64 = 10.0;

/// One record of an ingested route file, before resampling.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawRoutePoint {
    pub d_m: f64,
    pub v_min_mps: f64,
    pub v_max_mps: f64,
    pub grade_rad: f64,
    #[serde(deserialize_with = "deserialize_flag")]
    pub stop: bool,
}

fn deserialize_flag<'de, D: serde::Deserializer<'de>>(de: D) -> Result<bool, D::Error> {
    let raw = String::deserialize(de)?;
    match raw.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(serde::de::Error::custom(format!(
            "stop flag must be 0/1/true/false, got {other:?}"
        ))),
    }
}

/// Validated but not yet resampled route.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRoute {
    points: Vec<RawRoutePoint>,
}

/// One grid point of a resampled route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutePoint {
    pub d_m: f64,
    pub v_min_mps: f64,
    pub v_max_mps: f64,
    pub grade_rad: f64,
    pub stop: bool,
}

/// Uniformly spaced route the solvers operate on.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    points: Vec<RoutePoint>,
    step_m: f64,
    v_floor_mps: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RouteError {
    #[error("cannot read route file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse route file: {0}")]
    Csv(#[from] csv::Error),
    #[error("route row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("route needs at least two points")]
    NotEnoughPoints,
    #[error("grid step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("route length {length_m} m too short for grid step {step_m} m (needs two steps)")]
    TooShort { length_m: f64, step_m: f64 },
}

/// Loads a route CSV (`d_m,v_min_mps,v_max_mps,grade_rad,stop`, `#` comments
/// allowed) and validates it against the crawl floor `v_floor`.
pub fn load_route(path: &Path, v_floor: f64) -> Result<RawRoute, RouteError> {
    let file = std::fs::File::open(path)?;
    load_route_from_reader(file, v_floor)
}

/// Same as [`load_route`] for any reader; used by tests and by callers that
/// already have the bytes.
pub fn load_route_from_reader<R: Read>(reader: R, v_floor: f64) -> Result<RawRoute, RouteError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut points = Vec::new();
    for rec in rdr.deserialize() {
        let point: RawRoutePoint = rec?;
        points.push(point);
    }
    RawRoute::from_points(points, v_floor)
}

impl RawRoute {
    /// Validates an in-memory point list: strictly increasing distances,
    /// finite values, sane speed envelopes (above the floor at non-stop
    /// rows), grades strictly inside ±π/2.
    pub fn from_points(points: Vec<RawRoutePoint>, v_floor: f64) -> Result<Self, RouteError> {
        if points.len() < 2 {
            return Err(RouteError::NotEnoughPoints);
        }
        for (row, p) in points.iter().enumerate() {
            let err = |msg: String| Err(RouteError::Row { row, msg });
            if ![p.d_m, p.v_min_mps, p.v_max_mps, p.grade_rad]
                .iter()
                .all(|v| v.is_finite())
            {
                return err("non-finite value".into());
            }
            if p.grade_rad.abs() >= std::f64::consts::FRAC_PI_2 {
                return err(format!("grade {} rad out of range", p.grade_rad));
            }
            if !p.stop {
                if p.v_min_mps <= 0.0 {
                    return err(format!("v_min {} must be positive", p.v_min_mps));
                }
                if p.v_min_mps > p.v_max_mps {
                    return err(format!(
                        "v_min {} exceeds v_max {}",
                        p.v_min_mps, p.v_max_mps
                    ));
                }
                if p.v_max_mps < v_floor {
                    return err(format!(
                        "v_max {} below crawl floor {v_floor}",
                        p.v_max_mps
                    ));
                }
            }
            if row > 0 && p.d_m <= points[row - 1].d_m {
                return Err(RouteError::Row {
                    row,
                    msg: format!(
                        "distance {} not increasing past {}",
                        p.d_m,
                        points[row - 1].d_m
                    ),
                });
            }
        }
        Ok(RawRoute { points })
    }

    pub fn points(&self) -> &[RawRoutePoint] {
        &self.points
    }
}

/// Resamples a raw route onto a uniform grid with spacing `step_m`.
///
/// * Speed limits hold the value of the last raw point at or before each
///   grid point; grade interpolates linearly.
/// * Each raw stop maps to the nearest grid point (half-step ties round up),
///   which gets `v_min = v_max = v_floor`.
/// * The first and last grid points are forced to be stops.
/// * A trailing stretch shorter than one step is dropped.
///
/// Resampling an already resampled route with the same step is a no-op,
/// which makes pipelines safe to re-run on their own output.
pub fn resample(raw: &RawRoute, step_m: f64, v_floor: f64) -> Result<Route, RouteError> {
    if !(step_m.is_finite() && step_m > 0.0) {
        return Err(RouteError::InvalidStep(step_m));
    }
    let pts = raw.points();
    let d0 = pts[0].d_m;
    let length = pts[pts.len() - 1].d_m - d0;
    if length < 2.0 * step_m {
        return Err(RouteError::TooShort {
            length_m: length,
            step_m,
        });
    }
    let n = (length / step_m).floor() as usize + 1;

    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let d = d0 + i as f64 * step_m;
        // previous-point hold for the envelope
        let hold = pts.partition_point(|p| p.d_m <= d).saturating_sub(1);
        let held = &pts[hold];
        // linear interpolation for grade
        let grade = if hold + 1 < pts.len() && pts[hold].d_m < d {
            let a = &pts[hold];
            let b = &pts[hold + 1];
            let w = (d - a.d_m) / (b.d_m - a.d_m);
            a.grade_rad + w * (b.grade_rad - a.grade_rad)
        } else {
            held.grade_rad
        };
        points.push(RoutePoint {
            d_m: d,
            v_min_mps: held.v_min_mps.max(v_floor),
            v_max_mps: held.v_max_mps,
            grade_rad: grade,
            stop: false,
        });
    }

    for p in pts.iter().filter(|p| p.stop) {
        let k = (((p.d_m - d0) / step_m).round() as usize).min(n - 1);
        points[k].stop = true;
    }
    points[0].stop = true;
    points[n - 1].stop = true;
    for p in points.iter_mut().filter(|p| p.stop) {
        p.v_min_mps = v_floor;
        p.v_max_mps = v_floor;
    }

    Ok(Route {
        points,
        step_m,
        v_floor_mps: v_floor,
    })
}

impl Route {
    /// Builds a route directly from already-gridded points: used by the
    /// receding-horizon machinery to cut stage windows out of a parent
    /// route, and by tests needing synthetic profiles (e.g. cruise segments
    /// without the endpoint stops the CSV pipeline enforces).
    pub(crate) fn from_parts(points: Vec<RoutePoint>, step_m: f64, v_floor_mps: f64) -> Route {
        debug_assert!(points.len() >= 2);
        Route {
            points,
            step_m,
            v_floor_mps,
        }
    }

    /// Loads and resamples in one call with the given step and floor.
    pub fn load(path: &Path, step_m: f64, v_floor: f64) -> Result<Self, RouteError> {
        resample(&load_route(path, v_floor)?, step_m, v_floor)
    }

    pub fn points(&self) -> &[RoutePoint] {
        &self.points
    }

    pub fn point(&self, k: usize) -> &RoutePoint {
        &self.points[k]
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of stages (transitions between consecutive grid points).
    pub fn n_stages(&self) -> usize {
        self.points.len() - 1
    }

    pub fn step_m(&self) -> f64 {
        self.step_m
    }

    pub fn v_floor_mps(&self) -> f64 {
        self.v_floor_mps
    }

    /// Converts back to a raw route, e.g. to re-resample at a different step.
    pub fn to_raw(&self) -> RawRoute {
        RawRoute {
            points: self
                .points
                .iter()
                .map(|p| RawRoutePoint {
                    d_m: p.d_m,
                    v_min_mps: p.v_min_mps,
                    v_max_mps: p.v_max_mps,
                    grade_rad: p.grade_rad,
                    stop: p.stop,
                })
                .collect(),
        }
    }

    /// Returns a copy with `v_max` capped at `cap` for all points with
    /// `d_m >= from_d`. Stop pins are unaffected (they sit at the floor
    /// already). Used to inject en-route speed-limit changes.
    pub fn with_speed_cap(&self, from_d: f64, cap: f64) -> Route {
        let mut out = self.clone();
        for p in out.points.iter_mut().filter(|p| p.d_m >= from_d && !p.stop) {
            p.v_max_mps = p.v_max_mps.min(cap.max(self.v_floor_mps));
            p.v_min_mps = p.v_min_mps.min(p.v_max_mps);
        }
        out
    }
}
