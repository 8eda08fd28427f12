//! Actuation kinematics of the cantilever-based scanning instrument.
//!
//! Two motor-driven cams push the instrument shaft, which behaves as a hollow
//! cantilever beam: a cam displacement `r_p` at distance `a` from the fixed
//! end produces a tip deflection that is an exact linear amplification of the
//! cam motion. On top of that mechanical chain sits an end-to-end calibrated
//! linear map from drive voltage to tip displacement, which is what the scan
//! planner and the servo layer use day to day. The beam model is retained both
//! as documentation of where the amplification comes from and as a consistency
//! check: the two paths must agree to floating-point accuracy.
//!
//! Conventions: world axes are `x` right / `y` up, millimetres; drive axis 1
//! moves the tip along +x and axis 2 along +y; the cam azimuth is measured
//! from the +y axis.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative agreement required between the stepwise beam computation and its
/// closed form; both are exact algebra so anything worse than this indicates a
/// regression.
pub const BEAM_CLOSED_FORM_REL_TOL: f64 = 1e-12;

/// Errors raised by the kinematics layer.
#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("drive voltage {value} V on axis {axis} exceeds the ±{limit} V range")]
    VoltageOutOfRange { axis: u8, value: f64, limit: f64 },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// Mechanical and calibration constants of the scanner.
///
/// Defaults reproduce the instrument as built: 58 mm shaft, cams at the
/// midpoint, 3.3/2.7 mm tube section, 2.3438 °/V motor map and a calibrated
/// 664 µm/V end-to-end voltage-to-tip scale on both axes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScannerGeometry {
    /// Free shaft length from the fixed end to the tip, mm.
    pub shaft_length_mm: f64,
    /// Cam contact position measured from the fixed end, mm.
    pub cam_position_mm: f64,
    /// Shaft tube outer diameter, mm.
    pub outer_diameter_mm: f64,
    /// Shaft tube inner diameter, mm.
    pub inner_diameter_mm: f64,
    /// Elastic modulus of the shaft, GPa. Cancels out of the tip deflection;
    /// kept so the intermediate cam load is physically meaningful.
    pub elastic_modulus_gpa: f64,
    /// Motor map: cam rotation per drive volt, degrees/V.
    pub degrees_per_volt: f64,
    /// Calibrated end-to-end tip displacement per drive volt, µm/V.
    pub tip_um_per_volt: f64,
    /// Half of the usable drive range per axis, V.
    pub drive_half_range_v: f64,
    /// Cam displacement per degree of cam rotation, mm/°. `None` derives the
    /// value from the calibrated µm/V scale so that the motor → cam → beam
    /// chain reproduces the calibrated map exactly.
    pub cam_gain_mm_per_deg: Option<f64>,
}

impl Default for ScannerGeometry {
    fn default() -> Self {
        Self {
            shaft_length_mm: 58.0,
            cam_position_mm: 29.0,
            outer_diameter_mm: 3.3,
            inner_diameter_mm: 2.7,
            elastic_modulus_gpa: 209.0,
            degrees_per_volt: 2.3438,
            tip_um_per_volt: 664.0,
            drive_half_range_v: 10.0,
            cam_gain_mm_per_deg: None,
        }
    }
}

impl ScannerGeometry {
    /// Validates the structural parameters.
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if !(self.outer_diameter_mm > 0.0) {
            return Err(KinematicsError::InvalidGeometry(format!(
                "outer diameter must be positive, got {}",
                self.outer_diameter_mm
            )));
        }
        if self.inner_diameter_mm < 0.0 {
            return Err(KinematicsError::InvalidGeometry(format!(
                "inner diameter must be non-negative, got {}",
                self.inner_diameter_mm
            )));
        }
        if self.inner_diameter_mm >= self.outer_diameter_mm {
            return Err(KinematicsError::InvalidGeometry(format!(
                "inner diameter {} must be smaller than outer diameter {}",
                self.inner_diameter_mm, self.outer_diameter_mm
            )));
        }
        if !(self.shaft_length_mm > 0.0) || !(self.cam_position_mm > 0.0) {
            return Err(KinematicsError::InvalidGeometry(
                "shaft length and cam position must be positive".into(),
            ));
        }
        if self.cam_position_mm >= self.shaft_length_mm {
            return Err(KinematicsError::InvalidGeometry(format!(
                "cam position {} mm must lie below the tip at {} mm",
                self.cam_position_mm, self.shaft_length_mm
            )));
        }
        if !(self.degrees_per_volt > 0.0)
            || !(self.tip_um_per_volt > 0.0)
            || !(self.drive_half_range_v > 0.0)
        {
            return Err(KinematicsError::InvalidGeometry(
                "motor map, tip scale and drive range must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Geometric tip-to-cam amplification `(3 S_l - a) / (2 a)`; 2.5 for the
    /// default 58/29 mm geometry.
    pub fn beam_amplification(&self) -> f64 {
        (3.0 * self.shaft_length_mm - self.cam_position_mm) / (2.0 * self.cam_position_mm)
    }

    /// Cam displacement per degree of cam rotation. Either the configured
    /// value or the one derived from the calibrated end-to-end scale.
    pub fn cam_gain_mm_per_deg(&self) -> f64 {
        self.cam_gain_mm_per_deg.unwrap_or_else(|| {
            self.tip_um_per_volt / 1000.0 / (self.degrees_per_volt * self.beam_amplification())
        })
    }

    /// Calibrated tip displacement per volt in mm/V.
    pub fn tip_mm_per_volt(&self) -> f64 {
        self.tip_um_per_volt / 1000.0
    }
}

/// Reachable tip region: a square of side `2 * half_width_mm` about `centre`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workspace {
    pub half_width_mm: f64,
    pub centre: TipPose,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            half_width_mm: 1.85,
            centre: TipPose { x_mm: 0.0, y_mm: 0.0 },
        }
    }
}

impl Workspace {
    /// Area of the reachable square, mm²; 13.69 mm² for the default scanner.
    pub fn area_mm2(&self) -> f64 {
        let side = 2.0 * self.half_width_mm;
        side * side
    }

    /// Whether a pose lies inside (or on the boundary of) the workspace.
    pub fn contains(&self, pose: &TipPose) -> bool {
        (pose.x_mm - self.centre.x_mm).abs() <= self.half_width_mm
            && (pose.y_mm - self.centre.y_mm).abs() <= self.half_width_mm
    }
}

/// A drive command for the two actuation axes, volts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorCommand {
    pub v1: f64,
    pub v2: f64,
}

impl MotorCommand {
    pub fn new(v1: f64, v2: f64) -> Self {
        Self { v1, v2 }
    }
}

/// Displacement of the cam contact point in the cam plane, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CamPoint {
    pub x_mm: f64,
    pub y_mm: f64,
}

/// Tip position in the workspace plane, mm. The shaft is stiff along its own
/// axis, so the pose is two-dimensional (z ≡ 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipPose {
    pub x_mm: f64,
    pub y_mm: f64,
}

impl TipPose {
    pub fn new(x_mm: f64, y_mm: f64) -> Self {
        Self { x_mm, y_mm }
    }

    pub fn distance_mm(&self, other: &TipPose) -> f64 {
        ((self.x_mm - other.x_mm).powi(2) + (self.y_mm - other.y_mm).powi(2)).sqrt()
    }
}

/// A value that may have been clamped to the workspace boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped<T> {
    pub value: T,
    /// True when the requested input lay outside the workspace and the result
    /// sits on the boundary instead.
    pub saturated: bool,
}

/// Second moment of area of the hollow shaft section, mm⁴:
/// `I = π/64 (OD⁴ - ID⁴)`. 3.2127 mm⁴ for the default 3.3/2.7 mm tube.
pub fn second_moment_of_area(geometry: &ScannerGeometry) -> Result<f64, KinematicsError> {
    geometry.validate()?;
    let od = geometry.outer_diameter_mm;
    let id = geometry.inner_diameter_mm;
    Ok(std::f64::consts::PI / 64.0 * (od.powi(4) - id.powi(4)))
}

/// Converts drive voltages to cam rotation angles in degrees through the
/// motor map. Voltages outside the configured range are rejected.
pub fn volts_to_angles(
    cmd: &MotorCommand,
    geometry: &ScannerGeometry,
) -> Result<(f64, f64), KinematicsError> {
    let limit = geometry.drive_half_range_v;
    if cmd.v1.abs() > limit || !cmd.v1.is_finite() {
        return Err(KinematicsError::VoltageOutOfRange {
            axis: 1,
            value: cmd.v1,
            limit,
        });
    }
    if cmd.v2.abs() > limit || !cmd.v2.is_finite() {
        return Err(KinematicsError::VoltageOutOfRange {
            axis: 2,
            value: cmd.v2,
            limit,
        });
    }
    Ok((
        cmd.v1 * geometry.degrees_per_volt,
        cmd.v2 * geometry.degrees_per_volt,
    ))
}

/// Converts cam rotation angles (degrees) to the cam contact displacement via
/// the configured linear cam gain. Axis 1 displaces along x, axis 2 along y.
pub fn angles_to_cam(theta1_deg: f64, theta2_deg: f64, geometry: &ScannerGeometry) -> CamPoint {
    let gain = geometry.cam_gain_mm_per_deg();
    CamPoint {
        x_mm: theta1_deg * gain,
        y_mm: theta2_deg * gain,
    }
}

/// Maps a cam contact displacement to the tip deflection through beam theory.
///
/// The cam displacement `r_p` at azimuth `θ_p` (from +y) is converted to the
/// equivalent point load `P = 6 E I r_p / (2 a³)`, which deflects the tip by
/// `δ = P a² (3 S_l - a) / (6 E I)`; the deflection is decomposed as
/// `x_t = δ sin θ_p`, `y_t = δ cos θ_p`. The function asserts that the chain
/// agrees with the closed form `δ = r_p (3 S_l - a) / (2 a)` to 1e-12
/// relative — the modulus and section terms must cancel exactly.
pub fn cam_to_tip(cam: &CamPoint, geometry: &ScannerGeometry) -> Result<TipPose, KinematicsError> {
    let i = second_moment_of_area(geometry)?;
    let e = geometry.elastic_modulus_gpa;
    let a = geometry.cam_position_mm;
    let sl = geometry.shaft_length_mm;

    let r_p = (cam.x_mm * cam.x_mm + cam.y_mm * cam.y_mm).sqrt();
    if r_p == 0.0 {
        return Ok(TipPose::new(0.0, 0.0));
    }
    // Azimuth from the +y axis, so that a pure-x cam displacement sits at 90°.
    let theta_p = cam.x_mm.atan2(cam.y_mm);

    let load = 6.0 * e * i * r_p / (2.0 * a.powi(3));
    let delta = load * a * a / (6.0 * e * i) * (3.0 * sl - a);

    let closed_form = r_p * (3.0 * sl - a) / (2.0 * a);
    let rel = (delta - closed_form).abs() / closed_form.abs().max(f64::MIN_POSITIVE);
    assert!(
        rel <= BEAM_CLOSED_FORM_REL_TOL,
        "beam chain departed from its closed form: {delta} vs {closed_form} (rel {rel:e})"
    );

    Ok(TipPose::new(delta * theta_p.sin(), delta * theta_p.cos()))
}

/// Forward map: drive voltages to tip pose through the calibrated 664 µm/V
/// scale, relative to the workspace centre. Commands that would land outside
/// the workspace are clamped to its boundary and flagged.
pub fn volts_to_tip(
    cmd: &MotorCommand,
    geometry: &ScannerGeometry,
    workspace: &Workspace,
) -> Clamped<TipPose> {
    let scale = geometry.tip_mm_per_volt();
    let raw = TipPose::new(
        workspace.centre.x_mm + cmd.v1 * scale,
        workspace.centre.y_mm + cmd.v2 * scale,
    );
    clamp_to_workspace(raw, workspace)
}

/// Inverse map: desired tip pose to drive voltages. Targets outside the
/// workspace are clamped to its boundary (and flagged) before conversion, so
/// the returned command always respects the reachable region.
pub fn tip_to_volts(
    target: &TipPose,
    geometry: &ScannerGeometry,
    workspace: &Workspace,
) -> Clamped<MotorCommand> {
    let clamped = clamp_to_workspace(*target, workspace);
    let scale = geometry.tip_mm_per_volt();
    Clamped {
        value: MotorCommand::new(
            (clamped.value.x_mm - workspace.centre.x_mm) / scale,
            (clamped.value.y_mm - workspace.centre.y_mm) / scale,
        ),
        saturated: clamped.saturated,
    }
}

fn clamp_to_workspace(pose: TipPose, workspace: &Workspace) -> Clamped<TipPose> {
    let hw = workspace.half_width_mm;
    let cx = workspace.centre.x_mm;
    let cy = workspace.centre.y_mm;
    let x = pose.x_mm.clamp(cx - hw, cx + hw);
    let y = pose.y_mm.clamp(cy - hw, cy + hw);
    Clamped {
        saturated: x != pose.x_mm || y != pose.y_mm,
        value: TipPose::new(x, y),
    }
}
