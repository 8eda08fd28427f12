//! Constant-velocity scan trajectory generation.
//!
//! Plans are ordered point sequences `(t, x, y)` sampled at the point
//! frequency `f_s`: timestamps are exactly `i / f_s` and consecutive points
//! are `u_s / f_s` apart along the path, so the tip moves at the commanded
//! speed everywhere — including along raster turn blends and the Archimedean
//! spiral, where the sample positions come from inverting the exact arc
//! length. Plans are validated against the workspace on construction.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{TipPose, Workspace};

/// Absolute tolerance (mm of arc length) for the Newton inversion that places
/// spiral points.
pub const SPIRAL_ARC_TOL_MM: f64 = 1e-9;

/// Errors raised during plan generation.
#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid scan parameters: {0}")]
    InvalidParams(String),
    #[error(
        "plan point {index} at ({x_mm:.4}, {y_mm:.4}) mm leaves the workspace \
         (half-width {half_width_mm} mm about ({cx_mm:.4}, {cy_mm:.4}))"
    )]
    OutsideWorkspace {
        index: usize,
        x_mm: f64,
        y_mm: f64,
        half_width_mm: f64,
        cx_mm: f64,
        cy_mm: f64,
    },
    #[error("i/o error while exporting plan: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters shared by the trajectory generators. Fields not used by a given
/// pattern (for example `spiral_pitch_mm` for a linear scan) are ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanParams {
    /// Point emission frequency `f_s`, Hz. Normally matched to the probe
    /// frame rate so one plan point is consumed per frame.
    pub point_frequency_hz: f64,
    /// Constant path speed `u_s`, mm/s.
    pub speed_mm_per_s: f64,
    /// Scan length `l_s` of a linear scan or of each raster row, mm.
    pub length_mm: f64,
    /// Radial distance between adjacent spiral turns, mm.
    pub spiral_pitch_mm: f64,
    /// Spiral termination radius, mm.
    pub max_radius_mm: f64,
    /// Scan origin, mm: the first point of a linear or raster scan, or the
    /// pole of a spiral.
    pub origin: TipPose,
    /// Probe field-of-view diameter used only to warn about excessive spiral
    /// overlap, mm.
    pub fov_reference_mm: f64,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            point_frequency_hz: 120.0,
            speed_mm_per_s: 1.0,
            length_mm: 2.0,
            spiral_pitch_mm: 0.144,
            max_radius_mm: 0.43,
            origin: TipPose::new(0.0, 0.0),
            fov_reference_mm: 0.24,
        }
    }
}

impl ScanParams {
    /// Path distance between consecutive plan points, mm.
    pub fn step_mm(&self) -> f64 {
        self.speed_mm_per_s / self.point_frequency_hz
    }

    fn validate(&self) -> Result<(), TrajectoryError> {
        if !(self.point_frequency_hz > 0.0) {
            return Err(TrajectoryError::InvalidParams(format!(
                "point frequency must be positive, got {}",
                self.point_frequency_hz
            )));
        }
        if !(self.speed_mm_per_s > 0.0) {
            return Err(TrajectoryError::InvalidParams(format!(
                "scan speed must be positive, got {}",
                self.speed_mm_per_s
            )));
        }
        Ok(())
    }
}

/// Non-fatal conditions noted during plan generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanWarning {
    /// The spiral pitch is so small that a turn overlaps not just its
    /// neighbours but turns two away — almost everything is imaged twice.
    ExcessiveSpiralOverlap,
}

/// A single timed waypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanPoint {
    pub t_s: f64,
    pub x_mm: f64,
    pub y_mm: f64,
}

impl PlanPoint {
    pub fn pose(&self) -> TipPose {
        TipPose::new(self.x_mm, self.y_mm)
    }
}

/// An immutable, validated scan plan.
#[derive(Debug, Clone)]
pub struct ScanPlan {
    points: Vec<PlanPoint>,
    step_mm: f64,
    warnings: Vec<PlanWarning>,
}

impl ScanPlan {
    fn new(
        points: Vec<PlanPoint>,
        step_mm: f64,
        warnings: Vec<PlanWarning>,
        workspace: &Workspace,
    ) -> Result<Self, TrajectoryError> {
        for (index, p) in points.iter().enumerate() {
            if !workspace.contains(&p.pose()) {
                return Err(TrajectoryError::OutsideWorkspace {
                    index,
                    x_mm: p.x_mm,
                    y_mm: p.y_mm,
                    half_width_mm: workspace.half_width_mm,
                    cx_mm: workspace.centre.x_mm,
                    cy_mm: workspace.centre.y_mm,
                });
            }
        }
        Ok(Self {
            points,
            step_mm,
            warnings,
        })
    }

    pub fn points(&self) -> &[PlanPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Commanded distance between consecutive points, mm.
    pub fn step_mm(&self) -> f64 {
        self.step_mm
    }

    pub fn warnings(&self) -> &[PlanWarning] {
        &self.warnings
    }

    /// Timestamp of the final point, s.
    pub fn duration_s(&self) -> f64 {
        self.points.last().map(|p| p.t_s).unwrap_or(0.0)
    }

    /// First point of the plan.
    pub fn start(&self) -> PlanPoint {
        self.points[0]
    }

    /// Exports the plan as CSV with columns `t_s,x_mm,y_mm` at six decimal
    /// places.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), TrajectoryError> {
        writeln!(w, "t_s,x_mm,y_mm")?;
        for p in &self.points {
            writeln!(w, "{:.6},{:.6},{:.6}", p.t_s, p.x_mm, p.y_mm)?;
        }
        Ok(())
    }
}

/// Result of a nearest-in-time plan lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestPoint {
    pub index: usize,
    pub point: PlanPoint,
    /// Set when the query time has reached or passed the final plan point.
    pub end_of_plan: bool,
}

/// Generates a linear scan: points `(x_c + i u_s / f_s, y_c)` for
/// `i = 0..=n_p` with `n_p = floor(l_s f_s / u_s)`, so the path covers the
/// full commanded length at exact spacing.
pub fn linear_scan(params: &ScanParams, workspace: &Workspace) -> Result<ScanPlan, TrajectoryError> {
    params.validate()?;
    if !(params.length_mm > 0.0) {
        return Err(TrajectoryError::InvalidParams(format!(
            "linear scan length must be positive, got {}",
            params.length_mm
        )));
    }
    let step = params.step_mm();
    let n_p = (params.length_mm / step).floor() as usize;
    let points = (0..=n_p)
        .map(|i| PlanPoint {
            t_s: i as f64 / params.point_frequency_hz,
            x_mm: params.origin.x_mm + i as f64 * step,
            y_mm: params.origin.y_mm,
        })
        .collect();
    ScanPlan::new(points, step, Vec::new(), workspace)
}

/// One piece of a piecewise constant-speed path.
enum Segment {
    Line {
        x0: f64,
        y0: f64,
        ux: f64,
        uy: f64,
        len: f64,
    },
    /// Circular arc; `a0` is the starting angle and `sweep` the signed total
    /// angle, so the arc length is `r * |sweep|`.
    Arc {
        cx: f64,
        cy: f64,
        r: f64,
        a0: f64,
        sweep: f64,
    },
}

impl Segment {
    fn len(&self) -> f64 {
        match self {
            Segment::Line { len, .. } => *len,
            Segment::Arc { r, sweep, .. } => r * sweep.abs(),
        }
    }

    fn point_at(&self, s: f64) -> (f64, f64) {
        match self {
            Segment::Line { x0, y0, ux, uy, .. } => (x0 + ux * s, y0 + uy * s),
            Segment::Arc { cx, cy, r, a0, sweep } => {
                let a = a0 + sweep * (s / (r * sweep.abs()));
                (cx + r * a.cos(), cy + r * a.sin())
            }
        }
    }
}

/// Generates a serpentine raster: `rows` parallel rows of length `l_s`,
/// `row_spacing_mm` apart, joined by semicircular turn blends traversed at
/// the same constant speed. A single row degenerates to `linear_scan`.
pub fn raster_scan(
    params: &ScanParams,
    rows: usize,
    row_spacing_mm: f64,
    workspace: &Workspace,
) -> Result<ScanPlan, TrajectoryError> {
    params.validate()?;
    if rows == 0 {
        return Err(TrajectoryError::InvalidParams("raster needs at least one row".into()));
    }
    if rows == 1 {
        return linear_scan(params, workspace);
    }
    if !(params.length_mm > 0.0) || !(row_spacing_mm > 0.0) {
        return Err(TrajectoryError::InvalidParams(format!(
            "raster row length {} and spacing {} must be positive",
            params.length_mm, row_spacing_mm
        )));
    }

    let l = params.length_mm;
    let xc = params.origin.x_mm;
    let yc = params.origin.y_mm;
    let rb = row_spacing_mm / 2.0;
    let mut segments: Vec<Segment> = Vec::with_capacity(2 * rows - 1);
    for row in 0..rows {
        let y = yc + row as f64 * row_spacing_mm;
        let rightward = row % 2 == 0;
        let (x0, ux) = if rightward { (xc, 1.0) } else { (xc + l, -1.0) };
        segments.push(Segment::Line {
            x0,
            y0: y,
            ux,
            uy: 0.0,
            len: l,
        });
        if row + 1 < rows {
            // The blend bulges outward past the row end, keeping the tangent
            // continuous: counter-clockwise after a rightward row, clockwise
            // after a leftward one.
            let (cx, sweep) = if rightward {
                (xc + l, std::f64::consts::PI)
            } else {
                (xc, -std::f64::consts::PI)
            };
            segments.push(Segment::Arc {
                cx,
                cy: y + rb,
                r: rb,
                a0: -std::f64::consts::FRAC_PI_2,
                sweep,
            });
        }
    }

    let total_len: f64 = segments.iter().map(Segment::len).sum();
    let step = params.step_mm();
    let n_p = (total_len / step).floor() as usize;
    let mut points = Vec::with_capacity(n_p + 1);
    let mut seg_idx = 0usize;
    let mut seg_start = 0.0f64;
    for i in 0..=n_p {
        let s = i as f64 * step;
        while seg_idx + 1 < segments.len() && s > seg_start + segments[seg_idx].len() + 1e-12 {
            seg_start += segments[seg_idx].len();
            seg_idx += 1;
        }
        let local = (s - seg_start).min(segments[seg_idx].len());
        let (x, y) = segments[seg_idx].point_at(local);
        points.push(PlanPoint {
            t_s: i as f64 / params.point_frequency_hz,
            x_mm: x,
            y_mm: y,
        });
    }
    ScanPlan::new(points, step, Vec::new(), workspace)
}

/// Exact arc length of the Archimedean spiral `r = b φ` from the origin to
/// angle `phi`.
fn spiral_arc_length(b: f64, phi: f64) -> f64 {
    b / 2.0 * (phi * (1.0 + phi * phi).sqrt() + phi.asinh())
}

/// Generates an Archimedean spiral `r = (pitch / 2π) φ` from the centre out
/// to `max_radius_mm`, sampled at constant arc-length spacing by Newton
/// inversion of the exact arc length (tolerance [`SPIRAL_ARC_TOL_MM`]).
pub fn spiral_scan(params: &ScanParams, workspace: &Workspace) -> Result<ScanPlan, TrajectoryError> {
    params.validate()?;
    if !(params.spiral_pitch_mm > 0.0) {
        return Err(TrajectoryError::InvalidParams(format!(
            "spiral pitch must be positive, got {}",
            params.spiral_pitch_mm
        )));
    }
    if !(params.max_radius_mm > 0.0) {
        return Err(TrajectoryError::InvalidParams(format!(
            "spiral max radius must be positive, got {}",
            params.max_radius_mm
        )));
    }
    let b = params.spiral_pitch_mm / (2.0 * std::f64::consts::PI);
    let step = params.step_mm();
    let total_arc = spiral_arc_length(b, params.max_radius_mm / b);
    let n_p = (total_arc / step).floor() as usize;

    let mut points = Vec::with_capacity(n_p + 1);
    let mut phi = 0.0f64;
    for i in 0..=n_p {
        let target = i as f64 * step;
        if i > 0 {
            // Warm-start from the previous angle; ds/dφ = b √(1 + φ²).
            phi += step / (b * (1.0 + phi * phi).sqrt());
            for _ in 0..50 {
                let err = spiral_arc_length(b, phi) - target;
                if err.abs() <= SPIRAL_ARC_TOL_MM {
                    break;
                }
                phi -= err / (b * (1.0 + phi * phi).sqrt());
            }
            debug_assert!((spiral_arc_length(b, phi) - target).abs() <= SPIRAL_ARC_TOL_MM);
        }
        let r = b * phi;
        points.push(PlanPoint {
            t_s: i as f64 / params.point_frequency_hz,
            x_mm: params.origin.x_mm + r * phi.cos(),
            y_mm: params.origin.y_mm + r * phi.sin(),
        });
    }

    let mut warnings = Vec::new();
    if 2.0 * params.spiral_pitch_mm < params.fov_reference_mm {
        warnings.push(PlanWarning::ExcessiveSpiralOverlap);
    }
    ScanPlan::new(points, step, warnings, workspace)
}

/// Finds the plan point nearest in time to `t`, breaking exact ties toward
/// the earlier point. The `end_of_plan` flag is set once `t` reaches the
/// final timestamp.
pub fn nearest_plan_point(plan: &ScanPlan, t: f64) -> NearestPoint {
    let points = plan.points();
    assert!(!points.is_empty(), "plan has no points");
    let index = match points.binary_search_by(|p| p.t_s.partial_cmp(&t).unwrap()) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i == points.len() => points.len() - 1,
        Err(i) => {
            // Between i-1 and i; ties go to the earlier point.
            let before = t - points[i - 1].t_s;
            let after = points[i].t_s - t;
            if after < before {
                i
            } else {
                i - 1
            }
        }
    };
    NearestPoint {
        index,
        point: points[index],
        end_of_plan: t >= points[points.len() - 1].t_s,
    }
}
