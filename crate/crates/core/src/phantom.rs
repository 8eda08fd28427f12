//! Synthetic tissue phantoms and the world-side dynamics acting on them.
//!
//! A [`Scene`] is a high-resolution intensity field (1 µm/px by default) in
//! world coordinates, plus the transient state that moves it around: a rigid
//! whole-scene offset driven by a reflected random walk (the motorised-stage
//! disturbance) and a first-order drag deformation that follows the probe and
//! relaxes when it stops. Ablation marks are stored in material coordinates,
//! so they ride along with the tissue.
//!
//! Scene content generators and the sampling function are deterministic; all
//! randomness comes in through caller-seeded RNGs.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ImageBuf, RasterError};

/// Errors raised by the phantom layer.
#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom parameters: {0}")]
    InvalidParams(String),
    #[error("raster error: {0}")]
    Raster(#[from] RasterError),
    #[error("malformed scene header: {0}")]
    MalformedHeader(String),
}

/// Dimensions of the calibration grid pattern: bright lines over dark
/// squares. Defaults match the printed target used to validate the scanner
/// (73 µm lines, 237 µm squares, 310 µm period).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub line_thickness_um: f64,
    pub square_width_um: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            line_thickness_um: 73.0,
            square_width_um: 237.0,
        }
    }
}

impl GridSpec {
    pub fn period_um(&self) -> f64 {
        self.line_thickness_um + self.square_width_um
    }
}

/// Reflected random-walk disturbance: the whole scene translates at constant
/// speed inside a ±`amplitude_um` box, bouncing specularly off the walls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceModel {
    pub amplitude_um: f64,
    pub speed_mm_per_s: f64,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self {
            amplitude_um: 100.0,
            speed_mm_per_s: 1.0,
        }
    }
}

/// First-order tissue drag: every probe step drags the scene along by
/// `drag_coefficient` times the step, and the accumulated deformation relaxes
/// exponentially with `recovery_time_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationModel {
    pub drag_coefficient: f64,
    pub recovery_time_s: f64,
}

impl Default for DeformationModel {
    fn default() -> Self {
        Self {
            drag_coefficient: 0.0,
            recovery_time_s: 60.0,
        }
    }
}

/// A laser ablation mark burned into the tissue, in material coordinates.
/// Intensity is zero inside `diameter_um` and ramps linearly back to
/// unattenuated over `thermal_spread_um`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMark {
    pub centre_x_um: f64,
    pub centre_y_um: f64,
    pub diameter_um: f64,
    pub thermal_spread_um: f64,
}

impl AblationMark {
    /// Multiplicative attenuation at a material point.
    fn attenuation(&self, mx: f64, my: f64) -> f64 {
        let d = ((mx - self.centre_x_um).powi(2) + (my - self.centre_y_um).powi(2)).sqrt();
        let r = self.diameter_um / 2.0;
        if d <= r {
            0.0
        } else if d < r + self.thermal_spread_um {
            (d - r) / self.thermal_spread_um
        } else {
            1.0
        }
    }
}

/// One world sample: the intensity seen at a world point, and whether the
/// point fell inside the scene field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSample {
    pub value: f64,
    pub in_field: bool,
}

/// A synthetic tissue scene plus its motion state.
#[derive(Debug, Clone)]
pub struct Scene {
    field: ImageBuf,
    resolution_um_per_px: f64,
    /// Rigid whole-scene offset (disturbance), µm in world coordinates.
    pub rigid_offset_um: (f64, f64),
    /// Accumulated drag deformation, µm in world coordinates.
    pub deformation_um: (f64, f64),
    marks: Vec<AblationMark>,
}

impl Scene {
    /// Wraps an intensity field centred on the world origin.
    pub fn from_field(field: ImageBuf, resolution_um_per_px: f64) -> Self {
        assert!(resolution_um_per_px > 0.0);
        Self {
            field,
            resolution_um_per_px,
            rigid_offset_um: (0.0, 0.0),
            deformation_um: (0.0, 0.0),
            marks: Vec::new(),
        }
    }

    pub fn field(&self) -> &ImageBuf {
        &self.field
    }

    pub fn resolution_um_per_px(&self) -> f64 {
        self.resolution_um_per_px
    }

    pub fn marks(&self) -> &[AblationMark] {
        &self.marks
    }

    /// Side length of the field in µm (x extent, y extent).
    pub fn extent_um(&self) -> (f64, f64) {
        (
            self.field.width() as f64 * self.resolution_um_per_px,
            self.field.height() as f64 * self.resolution_um_per_px,
        )
    }

    /// Converts a world point to material (tissue) coordinates by removing
    /// the rigid offset and the drag deformation.
    pub fn world_to_material(&self, wx_um: f64, wy_um: f64) -> (f64, f64) {
        (
            wx_um - self.rigid_offset_um.0 - self.deformation_um.0,
            wy_um - self.rigid_offset_um.1 - self.deformation_um.1,
        )
    }

    /// Samples the scene at a world point with bilinear interpolation.
    /// Points outside the field return zero intensity with `in_field: false`;
    /// ablation marks attenuate the result.
    pub fn sample(&self, wx_um: f64, wy_um: f64) -> SceneSample {
        let (mx, my) = self.world_to_material(wx_um, wy_um);
        let cx = (self.field.width() - 1) as f64 / 2.0;
        let cy = (self.field.height() - 1) as f64 / 2.0;
        let px = mx / self.resolution_um_per_px + cx;
        let py = my / self.resolution_um_per_px + cy;
        match self.field.sample_bilinear(px, py) {
            None => SceneSample {
                value: 0.0,
                in_field: false,
            },
            Some(mut v) => {
                for mark in &self.marks {
                    if v == 0.0 {
                        break;
                    }
                    v *= mark.attenuation(mx, my);
                }
                SceneSample {
                    value: v,
                    in_field: true,
                }
            }
        }
    }

    /// Burns an ablation mark into the tissue.
    pub fn apply_mark(&mut self, mark: AblationMark) {
        self.marks.push(mark);
    }

    /// Advances the rigid-offset disturbance by `dt_s`. The offset travels
    /// exactly `speed * dt` of path, reflecting specularly off the ±amplitude
    /// box walls.
    pub fn step_disturbance<R: Rng>(&mut self, model: &DisturbanceModel, dt_s: f64, rng: &mut R) {
        if model.speed_mm_per_s <= 0.0 || dt_s <= 0.0 {
            return;
        }
        let step_um = model.speed_mm_per_s * 1000.0 * dt_s;
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let a = model.amplitude_um;
        let mut x = self.rigid_offset_um.0 + step_um * theta.cos();
        let mut y = self.rigid_offset_um.1 + step_um * theta.sin();
        // Fold back into the box; each fold preserves path length.
        let mut guard = 0;
        while (x.abs() > a || y.abs() > a) && guard < 64 {
            if x > a {
                x = 2.0 * a - x;
            } else if x < -a {
                x = -2.0 * a - x;
            }
            if y > a {
                y = 2.0 * a - y;
            } else if y < -a {
                y = -2.0 * a - y;
            }
            guard += 1;
        }
        self.rigid_offset_um = (x.clamp(-a, a), y.clamp(-a, a));
    }

    /// Advances the drag deformation: the probe step drags the tissue along
    /// by the drag coefficient, then the accumulated deformation relaxes
    /// toward zero with the model's recovery time constant.
    pub fn step_deformation(
        &mut self,
        model: &DeformationModel,
        probe_step_um: (f64, f64),
        dt_s: f64,
    ) {
        let c = model.drag_coefficient;
        let mut dx = self.deformation_um.0 + c * probe_step_um.0;
        let mut dy = self.deformation_um.1 + c * probe_step_um.1;
        if model.recovery_time_s > 0.0 && model.recovery_time_s.is_finite() && dt_s > 0.0 {
            let decay = (-dt_s / model.recovery_time_s).exp();
            dx *= decay;
            dy *= decay;
        }
        self.deformation_um = (dx, dy);
    }
}

/// Fraction of the 1-D span `[lo, hi)` covered by periodic lines of the given
/// thickness centred on integer multiples of `period`.
fn line_coverage(lo: f64, hi: f64, thickness: f64, period: f64) -> f64 {
    let half = thickness / 2.0;
    let k0 = ((lo - half) / period).floor() as i64;
    let k1 = ((hi + half) / period).ceil() as i64;
    let mut covered = 0.0;
    for k in k0..=k1 {
        let c = k as f64 * period;
        let a = (c - half).max(lo);
        let b = (c + half).min(hi);
        if b > a {
            covered += b - a;
        }
    }
    covered / (hi - lo)
}

/// Rounds a requested extent to an odd pixel count so one sample node sits
/// exactly at the scene origin.
fn odd_pixel_count(extent_mm: f64, resolution_um_per_px: f64) -> Result<usize, PhantomError> {
    if !(extent_mm > 0.0) || !(resolution_um_per_px > 0.0) {
        return Err(PhantomError::InvalidParams(format!(
            "extent {extent_mm} mm and resolution {resolution_um_per_px} µm/px must be positive"
        )));
    }
    let n = (extent_mm * 1000.0 / resolution_um_per_px).round() as usize;
    Ok(if n % 2 == 0 { n + 1 } else { n }.max(3))
}

/// Renders the calibration grid: bright lines of `line_thickness_um` in both
/// axes over dark squares, antialiased by exact per-pixel area coverage, with
/// a line crossing centred on the world origin.
pub fn make_grid(
    spec: &GridSpec,
    extent_mm: f64,
    resolution_um_per_px: f64,
) -> Result<Scene, PhantomError> {
    if !(spec.line_thickness_um > 0.0) || !(spec.square_width_um > 0.0) {
        return Err(PhantomError::InvalidParams(format!(
            "grid line thickness {} and square width {} must be positive",
            spec.line_thickness_um, spec.square_width_um
        )));
    }
    let n = odd_pixel_count(extent_mm, resolution_um_per_px)?;
    let period = spec.period_um();
    let res = resolution_um_per_px;
    let centre = (n - 1) as f64 / 2.0;

    // Separable coverage: a pixel is bright if it is on a vertical or a
    // horizontal line; I = 1 - (1 - cx)(1 - cy).
    let coverage: Vec<f64> = (0..n)
        .map(|i| {
            let m = (i as f64 - centre) * res;
            line_coverage(m - res / 2.0, m + res / 2.0, spec.line_thickness_um, period)
        })
        .collect();
    let mut field = ImageBuf::zeros(n, n);
    for iy in 0..n {
        let cy = coverage[iy];
        for ix in 0..n {
            let v = 1.0 - (1.0 - coverage[ix]) * (1.0 - cy);
            field.set(ix, iy, v as f32);
        }
    }
    Ok(Scene::from_field(field, res))
}

/// Generates a band-limited random texture: seeded white noise low-pass
/// filtered so the autocorrelation full width at half maximum lands on
/// `feature_scale_um`, then renormalised to mean 0.5 with standard deviation
/// 0.15 and clamped to `[0, 1]`.
pub fn make_texture<R: Rng>(
    rng: &mut R,
    extent_mm: f64,
    feature_scale_um: f64,
    resolution_um_per_px: f64,
) -> Result<Scene, PhantomError> {
    if !(feature_scale_um > 0.0) {
        return Err(PhantomError::InvalidParams(format!(
            "feature scale must be positive, got {feature_scale_um}"
        )));
    }
    let n = odd_pixel_count(extent_mm, resolution_um_per_px)?;
    let mut field = ImageBuf::zeros(n, n);
    for v in field.data_mut() {
        // Box-Muller keeps the dependency footprint small and is plenty fast.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        *v = ((-2.0 * u1.ln()).sqrt() * u2.cos()) as f32;
    }
    // Autocorrelation of g_sigma-filtered white noise is Gaussian with
    // sigma * sqrt(2); FWHM = 2 sqrt(2 ln 2) * sqrt(2) * sigma.
    let fwhm_factor = 2.0 * (2.0 * std::f64::consts::LN_2).sqrt() * std::f64::consts::SQRT_2;
    let sigma_px = feature_scale_um / fwhm_factor / resolution_um_per_px;
    let mut field = field.gaussian_blur(sigma_px);

    let mean = field.mean();
    let sd = field.std_dev().max(1e-12);
    for v in field.data_mut() {
        *v = (0.5 + 0.15 * ((*v as f64 - mean) / sd)) as f32;
    }
    field.clamp_unit();
    Ok(Scene::from_field(field, resolution_um_per_px))
}

/// JSON header written alongside a 16-bit scene graymap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneHeader {
    pub resolution_um_per_px: f64,
    /// World coordinate of the centre of pixel (0, 0), µm.
    pub origin_um: (f64, f64),
    pub width_px: usize,
    pub height_px: usize,
    #[serde(default)]
    pub marks: Vec<AblationMark>,
}

/// Serialises scene content as a 16-bit PGM plus a JSON header. Transient
/// motion state (rigid offset, deformation) is deliberately not persisted.
pub fn save_scene<W1: Write, W2: Write>(
    scene: &Scene,
    pgm: &mut W1,
    header: &mut W2,
) -> Result<(), PhantomError> {
    scene.field.write_pgm16(pgm)?;
    let h = SceneHeader {
        resolution_um_per_px: scene.resolution_um_per_px,
        origin_um: (
            -((scene.field.width() - 1) as f64) / 2.0 * scene.resolution_um_per_px,
            -((scene.field.height() - 1) as f64) / 2.0 * scene.resolution_um_per_px,
        ),
        width_px: scene.field.width(),
        height_px: scene.field.height(),
        marks: scene.marks.clone(),
    };
    serde_json::to_writer_pretty(header, &h)
        .map_err(|e| PhantomError::MalformedHeader(e.to_string()))?;
    Ok(())
}

/// Restores a scene from its 16-bit PGM and JSON header.
pub fn load_scene<R1: BufRead, R2: std::io::Read>(
    pgm: &mut R1,
    header: &mut R2,
) -> Result<Scene, PhantomError> {
    let h: SceneHeader = serde_json::from_reader(header)
        .map_err(|e| PhantomError::MalformedHeader(e.to_string()))?;
    let field = ImageBuf::read_pgm(pgm)?;
    if field.width() != h.width_px || field.height() != h.height_px {
        return Err(PhantomError::MalformedHeader(format!(
            "header claims {}x{} but graymap is {}x{}",
            h.width_px,
            h.height_px,
            field.width(),
            field.height()
        )));
    }
    let mut scene = Scene::from_field(field, h.resolution_um_per_px);
    for m in h.marks {
        scene.apply_mark(m);
    }
    Ok(scene)
}
