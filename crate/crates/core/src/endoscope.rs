//! Fibre-bundle endomicroscope image formation.
//!
//! The probe carries a coherent fibre bundle: a hexagonal lattice of cores,
//! each integrating light from one spot of tissue. A captured frame is formed
//! by sampling the scene at every core position (optionally with additive
//! sensor noise), splatting the core intensities back onto the pixel grid
//! with normalised Gaussian weights, and masking to the circular field stop.
//! [`Probe::preprocess`] subtracts the stored background (zero by default)
//! and applies the light Gaussian blur the mosaicking pipeline uses to
//! suppress residual core structure before correlation.
//!
//! Probe-frame axes match world axes when the bundle rotation is zero: +x
//! right, +y up, origin at the image centre. A positive bundle rotation
//! `rho` makes world content appear rotated counter-clockwise by `rho` in
//! the frame: a feature ahead of the tip along world +x shows up at frame
//! angle `+rho`.

use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::kinematics::TipPose;
use crate::phantom::Scene;
use crate::raster::ImageBuf;

/// Optical and sampling geometry of the probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    /// Square frame side, px.
    pub field_px: usize,
    /// Object-plane sampling pitch, µm per pixel.
    pub resolution_um_per_px: f64,
    /// Centre-to-centre fibre core spacing, µm.
    pub core_spacing_um: f64,
    /// Field-stop radius, px.
    pub mask_radius_px: f64,
    /// Preprocessing blur used to suppress the core pattern, px.
    pub preprocess_blur_px: f64,
    /// Frame rate, Hz.
    pub frame_rate_hz: f64,
    /// Additive Gaussian sensor noise per core (intensity units, 0 = off).
    pub noise_sigma: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            field_px: 256,
            resolution_um_per_px: 0.9375,
            core_spacing_um: 3.0,
            mask_radius_px: 128.0,
            preprocess_blur_px: 1.4,
            frame_rate_hz: 120.0,
            noise_sigma: 0.0,
        }
    }
}

impl ProbeSpec {
    /// Field-of-view diameter at the object plane, µm.
    pub fn fov_diameter_um(&self) -> f64 {
        self.field_px as f64 * self.resolution_um_per_px
    }

    pub fn frame_period_s(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }

    /// Capture instant of frame `k`: exactly `k / frame_rate`, so timestamps
    /// are reproducible to the bit across runs.
    pub fn frame_time_s(&self, k: usize) -> f64 {
        k as f64 / self.frame_rate_hz
    }

    /// Endless sequence of frame capture instants.
    pub fn frame_clock(&self) -> impl Iterator<Item = f64> + '_ {
        (0..).map(|k| self.frame_time_s(k))
    }
}

/// One captured frame plus its acquisition metadata.
#[derive(Debug, Clone)]
pub struct Frame {
    pixels: ImageBuf,
    /// Capture instant, s.
    pub t_s: f64,
    /// Ground-truth tip pose at capture. Diagnostics only — the servo must
    /// estimate position from image registration, never read this.
    pub tip_pose_at_capture: TipPose,
    /// True when any core sampled beyond the scene's material extent.
    pub out_of_field: bool,
}

impl Frame {
    pub fn pixels(&self) -> &ImageBuf {
        &self.pixels
    }

    pub fn into_pixels(self) -> ImageBuf {
        self.pixels
    }
}

/// One fibre core with its precomputed splat footprint.
#[derive(Debug, Clone)]
struct Core {
    /// Position in the probe frame, µm from the image centre.
    x_um: f64,
    y_um: f64,
    /// Flattened pixel indices and Gaussian weights.
    splat: Vec<(u32, f32)>,
}

/// A fibre-bundle probe with its core lattice and splat tables precomputed.
#[derive(Debug, Clone)]
pub struct Probe {
    spec: ProbeSpec,
    cores: Vec<Core>,
    /// Per-pixel sum of splat weights, for normalisation.
    weight_sum: Vec<f32>,
    /// Per-pixel field-stop mask.
    in_mask: Vec<bool>,
    /// Optional background frame subtracted during preprocessing.
    background: Option<ImageBuf>,
}

impl Probe {
    pub fn new(spec: ProbeSpec) -> Probe {
        assert!(spec.field_px >= 16);
        assert!(spec.resolution_um_per_px > 0.0 && spec.core_spacing_um > 0.0);
        let n = spec.field_px;
        let centre = (n - 1) as f64 / 2.0;
        let res = spec.resolution_um_per_px;
        let mask_r_um = spec.mask_radius_px * res;

        // Hexagonal lattice centred on the optical axis: rows spaced by
        // s * sqrt(3) / 2, odd rows shifted by s / 2.
        let s = spec.core_spacing_um;
        let row_pitch = s * 3.0f64.sqrt() / 2.0;
        let sigma_px = s / 2.5 / res;
        let splat_r = (3.0 * sigma_px).ceil() as i64;
        let j_max = (mask_r_um / row_pitch).ceil() as i64 + 1;
        let i_max = (mask_r_um / s).ceil() as i64 + 1;

        let mut cores = Vec::new();
        let mut weight_sum = vec![0.0f32; n * n];
        for j in -j_max..=j_max {
            let y_um = j as f64 * row_pitch;
            let x_shift = if j.rem_euclid(2) == 1 { s / 2.0 } else { 0.0 };
            for i in -i_max..=i_max {
                let x_um = i as f64 * s + x_shift;
                if x_um.hypot(y_um) > mask_r_um {
                    continue;
                }
                let px = x_um / res + centre;
                let py = y_um / res + centre;
                let cx = px.round() as i64;
                let cy = py.round() as i64;
                let mut splat = Vec::new();
                for iy in (cy - splat_r).max(0)..=(cy + splat_r).min(n as i64 - 1) {
                    for ix in (cx - splat_r).max(0)..=(cx + splat_r).min(n as i64 - 1) {
                        let d2 = (ix as f64 - px).powi(2) + (iy as f64 - py).powi(2);
                        let w = (-d2 / (2.0 * sigma_px * sigma_px)).exp() as f32;
                        if w > 1e-4 {
                            let idx = iy as usize * n + ix as usize;
                            splat.push((idx as u32, w));
                            weight_sum[idx] += w;
                        }
                    }
                }
                cores.push(Core { x_um, y_um, splat });
            }
        }

        let in_mask = (0..n * n)
            .map(|idx| {
                let ix = (idx % n) as f64 - centre;
                let iy = (idx / n) as f64 - centre;
                ix.hypot(iy) <= spec.mask_radius_px
            })
            .collect();
        Probe {
            spec,
            cores,
            weight_sum,
            in_mask,
            background: None,
        }
    }

    pub fn spec(&self) -> &ProbeSpec {
        &self.spec
    }

    pub fn core_count(&self) -> usize {
        self.cores.len()
    }

    /// Installs (or clears) the background frame subtracted by
    /// [`Probe::preprocess`].
    pub fn set_background(&mut self, background: Option<ImageBuf>) {
        if let Some(bg) = &background {
            assert_eq!(bg.width(), self.spec.field_px);
            assert_eq!(bg.height(), self.spec.field_px);
        }
        self.background = background;
    }

    /// Captures the frame at time `t_s` with the tip at `tip` and the bundle
    /// rotated by `rho_rad`. Sensor noise is drawn per core when the spec's
    /// `noise_sigma` is positive.
    pub fn capture<R: Rng>(
        &self,
        scene: &Scene,
        tip: &TipPose,
        rho_rad: f64,
        t_s: f64,
        rng: &mut R,
    ) -> Frame {
        let n = self.spec.field_px;
        let (cos_r, sin_r) = (rho_rad.cos(), rho_rad.sin());
        let tip_x_um = tip.x_mm * 1000.0;
        let tip_y_um = tip.y_mm * 1000.0;
        let mut acc = vec![0.0f32; n * n];
        let mut out_of_field = false;
        for core in &self.cores {
            // A core at probe position c looks at the world point
            // tip + R(-rho) c, which is what makes world content appear
            // rotated by +rho in the frame.
            let wx = tip_x_um + cos_r * core.x_um + sin_r * core.y_um;
            let wy = tip_y_um - sin_r * core.x_um + cos_r * core.y_um;
            let sample = scene.sample(wx, wy);
            out_of_field |= !sample.in_field;
            let mut v = sample.value;
            if self.spec.noise_sigma > 0.0 {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                v += self.spec.noise_sigma * (-2.0 * u1.ln()).sqrt() * u2.cos();
            }
            let v = v.clamp(0.0, 1.0) as f32;
            for &(idx, w) in &core.splat {
                acc[idx as usize] += w * v;
            }
        }
        for idx in 0..n * n {
            acc[idx] = if self.in_mask[idx] && self.weight_sum[idx] > 1e-6 {
                acc[idx] / self.weight_sum[idx]
            } else {
                0.0
            };
        }
        Frame {
            pixels: ImageBuf::from_vec(n, n, acc),
            t_s,
            tip_pose_at_capture: *tip,
            out_of_field,
        }
    }

    /// Background subtraction (floored at zero) followed by the light
    /// Gaussian blur that washes out residual core structure before
    /// correlation.
    pub fn preprocess(&self, raw: &ImageBuf) -> ImageBuf {
        match &self.background {
            None => raw.gaussian_blur(self.spec.preprocess_blur_px),
            Some(bg) => {
                let mut sub = raw.clone();
                for (v, b) in sub.data_mut().iter_mut().zip(bg.data()) {
                    *v = (*v - b).max(0.0);
                }
                sub.gaussian_blur(self.spec.preprocess_blur_px)
            }
        }
    }
}
