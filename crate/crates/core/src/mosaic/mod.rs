//! Real-time mosaicking: frame-to-frame registration, position integration,
//! and dead-leaf compositing onto a fixed canvas.
//!
//! Incoming preprocessed frames are first area-resized to the registration
//! working size (200 px across the 240 µm field → 1.2 µm/px); the canvas
//! lives at that same working scale. Each frame is registered against the
//! previous one, the integer-pixel displacement is accumulated into a running
//! position estimate, and the frame's circular field is pasted over the
//! canvas at that estimate (newest content wins). Frames whose template
//! carries too little structure to register — over a freshly ablated mark,
//! for example — fall back to dead-reckoning on the commanded displacement
//! and are flagged; a long run of them aborts the mosaic.

pub mod ncc;

pub use ncc::{NccBackend, RegisterError, Registration, RegistrationParams, Registrator};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::ImageBuf;

#[derive(Debug, Error)]
pub enum MosaicError {
    #[error("{run} consecutive unregistrable frames (limit {limit}); mosaic lost")]
    TrackingLost { run: usize, limit: usize },
    #[error(
        "frame at canvas origin ({0}, {1}) px falls outside the {2}x{3} canvas",
        origin.0, origin.1, canvas.0, canvas.1
    )]
    OutOfCanvas {
        origin: (i64, i64),
        canvas: (usize, usize),
    },
    #[error("only {found} grid line crossings measured (need {needed})")]
    InsufficientCrossings { found: usize, needed: usize },
}

/// What to do when a frame placement falls off the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Fail with [`MosaicError::OutOfCanvas`].
    Error,
    /// Enlarge the canvas to fit (with slack, to amortise reallocation).
    Grow,
}

/// Mosaicking configuration.
#[derive(Debug, Clone)]
pub struct MosaicParams {
    pub registration: RegistrationParams,
    pub backend: NccBackend,
    /// Radius of the pasted disc at the working scale, px; matches the probe
    /// field stop (100 px = 120 µm).
    pub mask_radius_px: f64,
    /// Consecutive dead-reckoned frames tolerated before aborting.
    pub max_consecutive_degenerate: usize,
    pub overflow: OverflowPolicy,
}

impl Default for MosaicParams {
    fn default() -> Self {
        Self {
            registration: RegistrationParams::default(),
            backend: NccBackend::Fft,
            mask_radius_px: 100.0,
            max_consecutive_degenerate: 10,
            overflow: OverflowPolicy::Error,
        }
    }
}

/// The composited output image plus a per-pixel fill mask.
#[derive(Debug, Clone)]
pub struct MosaicCanvas {
    image: ImageBuf,
    filled: Vec<bool>,
    resolution_um_per_px: f64,
}

impl MosaicCanvas {
    pub fn new(width_px: usize, height_px: usize, resolution_um_per_px: f64) -> MosaicCanvas {
        assert!(resolution_um_per_px > 0.0);
        MosaicCanvas {
            image: ImageBuf::zeros(width_px, height_px),
            filled: vec![false; width_px * height_px],
            resolution_um_per_px,
        }
    }

    pub fn image(&self) -> &ImageBuf {
        &self.image
    }

    pub fn filled(&self) -> &[bool] {
        &self.filled
    }

    pub fn resolution_um_per_px(&self) -> f64 {
        self.resolution_um_per_px
    }

    pub fn is_filled(&self, ix: usize, iy: usize) -> bool {
        self.filled[iy * self.image.width() + ix]
    }

    /// Dead-leaf paste: every frame pixel within `radius_px` of the frame
    /// centre overwrites the canvas. `origin` is the canvas position of
    /// frame pixel (0, 0); content falling off the canvas is dropped.
    pub fn paste_disc(&mut self, frame: &ImageBuf, radius_px: f64, origin: (i64, i64)) {
        let (cw, ch) = (self.image.width() as i64, self.image.height() as i64);
        let fcx = (frame.width() - 1) as f64 / 2.0;
        let fcy = (frame.height() - 1) as f64 / 2.0;
        let r2 = radius_px * radius_px;
        for fy in 0..frame.height() {
            let cy = origin.1 + fy as i64;
            if cy < 0 || cy >= ch {
                continue;
            }
            let dy = fy as f64 - fcy;
            for fx in 0..frame.width() {
                let cx = origin.0 + fx as i64;
                if cx < 0 || cx >= cw {
                    continue;
                }
                let dx = fx as f64 - fcx;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let idx = cy as usize * self.image.width() + cx as usize;
                self.image.set(cx as usize, cy as usize, frame.get(fx, fy));
                self.filled[idx] = true;
            }
        }
    }

    /// Pads the canvas by the given border widths, preserving content. The
    /// former pixel (0, 0) lands at `(left, top)`.
    pub fn grow(&mut self, left: usize, top: usize, right: usize, bottom: usize) {
        let (w, h) = (self.image.width(), self.image.height());
        let (nw, nh) = (w + left + right, h + top + bottom);
        let mut image = ImageBuf::zeros(nw, nh);
        let mut filled = vec![false; nw * nh];
        for iy in 0..h {
            for ix in 0..w {
                image.set(ix + left, iy + top, self.image.get(ix, iy));
                filled[(iy + top) * nw + ix + left] = self.filled[iy * w + ix];
            }
        }
        self.image = image;
        self.filled = filled;
    }

    /// Total composited area, mm².
    pub fn coverage_area_mm2(&self) -> f64 {
        let count = self.filled.iter().filter(|&&f| f).count();
        let px_mm = self.resolution_um_per_px / 1000.0;
        count as f64 * px_mm * px_mm
    }

    /// Bounding box of filled pixels as `(x0, y0, x1, y1)` inclusive.
    pub fn filled_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (w, h) = (self.image.width(), self.image.height());
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        let mut any = false;
        for iy in 0..h {
            for ix in 0..w {
                if self.filled[iy * w + ix] {
                    any = true;
                    x0 = x0.min(ix);
                    y0 = y0.min(iy);
                    x1 = x1.max(ix);
                    y1 = y1.max(iy);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// Crops to the filled bounding box with `pad` pixels of border.
    pub fn crop_to_content(&self, pad: usize) -> Option<ImageBuf> {
        let (x0, y0, x1, y1) = self.filled_bbox()?;
        let x0 = x0.saturating_sub(pad);
        let y0 = y0.saturating_sub(pad);
        let x1 = (x1 + pad).min(self.image.width() - 1);
        let y1 = (y1 + pad).min(self.image.height() - 1);
        let mut out = ImageBuf::zeros(x1 - x0 + 1, y1 - y0 + 1);
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                out.set(ix - x0, iy - y0, self.image.get(ix, iy));
            }
        }
        Some(out)
    }
}

/// Per-frame result reported by [`Mosaicker::add_frame`].
#[derive(Debug, Clone, Copy)]
pub struct FrameOutcome {
    /// Probe displacement applied this frame, working-scale px. Integer-valued
    /// when measured; the raw commanded value when dead-reckoned.
    pub shift_px: (f64, f64),
    /// Correlation peak (0 when dead-reckoned).
    pub peak: f64,
    /// True when registration was degenerate and the commanded displacement
    /// was used instead.
    pub dead_reckoned: bool,
}

/// Running counters over a mosaic.
#[derive(Debug, Clone, Default)]
pub struct MosaicStats {
    pub frames: usize,
    pub dead_reckoned_frames: usize,
    pub max_abs_shift_px: f64,
    peak_sum: f64,
    peak_count: usize,
}

impl MosaicStats {
    pub fn mean_peak(&self) -> f64 {
        if self.peak_count == 0 {
            0.0
        } else {
            self.peak_sum / self.peak_count as f64
        }
    }
}

/// Incremental mosaicker: feed preprocessed frames in capture order. Frames
/// larger than the working size are area-resized down before registration
/// and compositing, so native 256 px captures can be fed directly.
pub struct Mosaicker {
    params: MosaicParams,
    registrator: Registrator,
    canvas: MosaicCanvas,
    canvas_centre: (f64, f64),
    prev: Option<ImageBuf>,
    /// Integrated displacement since the first frame, working-scale px.
    /// Measured shifts contribute exact integers; only dead-reckoned frames
    /// can introduce fractional parts.
    position_px: (f64, f64),
    degenerate_run: usize,
    stats: MosaicStats,
}

impl Mosaicker {
    pub fn new(
        params: MosaicParams,
        canvas_width_px: usize,
        canvas_height_px: usize,
        working_res_um_per_px: f64,
    ) -> Mosaicker {
        let registrator = Registrator::new(params.registration.clone(), params.backend);
        Mosaicker {
            params,
            registrator,
            canvas: MosaicCanvas::new(canvas_width_px, canvas_height_px, working_res_um_per_px),
            canvas_centre: (
                (canvas_width_px - 1) as f64 / 2.0,
                (canvas_height_px - 1) as f64 / 2.0,
            ),
            prev: None,
            position_px: (0.0, 0.0),
            degenerate_run: 0,
            stats: MosaicStats::default(),
        }
    }

    /// Integrated probe position relative to the first frame, working px.
    pub fn position_px(&self) -> (f64, f64) {
        self.position_px
    }

    /// Canvas pixel where the first frame was centred (moves only when the
    /// canvas grows).
    pub fn canvas_centre_px(&self) -> (f64, f64) {
        self.canvas_centre
    }

    pub fn params(&self) -> &MosaicParams {
        &self.params
    }

    pub fn canvas(&self) -> &MosaicCanvas {
        &self.canvas
    }

    pub fn stats(&self) -> &MosaicStats {
        &self.stats
    }

    pub fn into_canvas(self) -> MosaicCanvas {
        self.canvas
    }

    /// Registers, integrates and composites one preprocessed frame.
    /// `commanded_step_px` is the displacement the controller asked for since
    /// the previous frame, working px; it only matters when registration is
    /// degenerate.
    pub fn add_frame(
        &mut self,
        frame: &ImageBuf,
        commanded_step_px: (f64, f64),
    ) -> Result<FrameOutcome, MosaicError> {
        let wk = self.params.registration.working_px;
        let frame = if frame.width() == wk && frame.height() == wk {
            frame.clone()
        } else {
            frame.resize_area(wk, wk)
        };
        let outcome = match &self.prev {
            None => FrameOutcome {
                shift_px: (0.0, 0.0),
                peak: 1.0,
                dead_reckoned: false,
            },
            Some(prev) => match self.registrator.register(prev, &frame) {
                Ok(reg) => {
                    self.degenerate_run = 0;
                    self.stats.peak_sum += reg.peak;
                    self.stats.peak_count += 1;
                    FrameOutcome {
                        shift_px: (reg.shift_px.0 as f64, reg.shift_px.1 as f64),
                        peak: reg.peak,
                        dead_reckoned: false,
                    }
                }
                Err(_) => {
                    self.degenerate_run += 1;
                    self.stats.dead_reckoned_frames += 1;
                    if self.degenerate_run > self.params.max_consecutive_degenerate {
                        return Err(MosaicError::TrackingLost {
                            run: self.degenerate_run,
                            limit: self.params.max_consecutive_degenerate,
                        });
                    }
                    FrameOutcome {
                        shift_px: commanded_step_px,
                        peak: 0.0,
                        dead_reckoned: true,
                    }
                }
            },
        };

        self.position_px.0 += outcome.shift_px.0;
        self.position_px.1 += outcome.shift_px.1;
        let shift_mag = outcome.shift_px.0.hypot(outcome.shift_px.1);
        self.stats.max_abs_shift_px = self.stats.max_abs_shift_px.max(shift_mag);
        self.stats.frames += 1;

        let origin = self.paste_origin(wk);
        let origin = match self.params.overflow {
            OverflowPolicy::Error => {
                let (cw, ch) = (self.canvas.image.width(), self.canvas.image.height());
                if origin.0 < 0
                    || origin.1 < 0
                    || origin.0 + wk as i64 > cw as i64
                    || origin.1 + wk as i64 > ch as i64
                {
                    return Err(MosaicError::OutOfCanvas {
                        origin,
                        canvas: (cw, ch),
                    });
                }
                origin
            }
            OverflowPolicy::Grow => {
                // Pad generously so repeated growth is rare.
                let slack = wk as i64;
                let (cw, ch) = (self.canvas.image.width() as i64, self.canvas.image.height() as i64);
                let left = (-origin.0 + slack).max(0) as usize * usize::from(origin.0 < 0);
                let top = (-origin.1 + slack).max(0) as usize * usize::from(origin.1 < 0);
                let right =
                    (origin.0 + wk as i64 - cw + slack).max(0) as usize
                        * usize::from(origin.0 + (wk as i64) > cw);
                let bottom =
                    (origin.1 + wk as i64 - ch + slack).max(0) as usize
                        * usize::from(origin.1 + (wk as i64) > ch);
                if left + top + right + bottom > 0 {
                    self.canvas.grow(left, top, right, bottom);
                    self.canvas_centre.0 += left as f64;
                    self.canvas_centre.1 += top as f64;
                }
                self.paste_origin(wk)
            }
        };
        self.canvas
            .paste_disc(&frame, self.params.mask_radius_px, origin);
        self.prev = Some(frame);
        Ok(outcome)
    }

    fn paste_origin(&self, wk: usize) -> (i64, i64) {
        (
            (self.canvas_centre.0 + self.position_px.0 - (wk - 1) as f64 / 2.0).round() as i64,
            (self.canvas_centre.1 + self.position_px.1 - (wk - 1) as f64 / 2.0).round() as i64,
        )
    }
}

/// Longest distance between any two filled pixels, mm. Candidate points are
/// the per-row filled extremes, which contain every convex-hull vertex.
pub fn measure_mosaic_diameter_mm(canvas: &MosaicCanvas) -> Option<f64> {
    let w = canvas.image().width();
    let h = canvas.image().height();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for iy in 0..h {
        let mut min_x = None;
        let mut max_x = None;
        for ix in 0..w {
            if canvas.filled()[iy * w + ix] {
                if min_x.is_none() {
                    min_x = Some(ix);
                }
                max_x = Some(ix);
            }
        }
        if let (Some(a), Some(b)) = (min_x, max_x) {
            pts.push((a as f64, iy as f64));
            if b != a {
                pts.push((b as f64, iy as f64));
            }
        }
    }
    if pts.is_empty() {
        return None;
    }
    let mut best = 0.0f64;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d2 = (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
            best = best.max(d2);
        }
    }
    Some(best.sqrt() * canvas.resolution_um_per_px() / 1000.0)
}

/// Grid geometry recovered from a mosaic: bright-line thickness and dark
/// square width, each as mean and sample standard deviation over many
/// independent crossings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMeasurement {
    pub line_thickness_mean_um: f64,
    pub line_thickness_sd_um: f64,
    pub square_width_mean_um: f64,
    pub square_width_sd_um: f64,
    pub line_samples: usize,
    pub square_samples: usize,
}

/// Measures the calibration grid from a mosaic of it.
///
/// Thin bands are swept across the filled region in both orientations. Each
/// band is averaged into an intensity profile; threshold crossings at half
/// contrast give one line-thickness sample per complete crossing and one
/// square-width sample per gap between adjacent crossings. Bands lying along
/// a grid line of the other orientation lose their contrast and are skipped
/// automatically. Errors unless at least `MIN_LINE_SAMPLES` crossings are
/// found.
pub fn measure_grid(canvas: &MosaicCanvas, min_contrast: f64) -> Result<GridMeasurement, MosaicError> {
    const MIN_LINE_SAMPLES: usize = 22;
    const BAND_PX: usize = 9;
    const BAND_STEP_PX: usize = 24;

    let mut line_px: Vec<f64> = Vec::new();
    let mut square_px: Vec<f64> = Vec::new();
    if let Some((x0, y0, x1, y1)) = canvas.filled_bbox() {
        for transposed in [false, true] {
            let (lo, hi) = if transposed { (x0, x1) } else { (y0, y1) };
            let mut start = lo;
            while start + BAND_PX <= hi + 1 {
                band_crossings(
                    canvas,
                    start..start + BAND_PX,
                    transposed,
                    min_contrast,
                    &mut line_px,
                    &mut square_px,
                );
                start += BAND_STEP_PX;
            }
        }
    }
    if line_px.len() < MIN_LINE_SAMPLES {
        return Err(MosaicError::InsufficientCrossings {
            found: line_px.len(),
            needed: MIN_LINE_SAMPLES,
        });
    }
    let res = canvas.resolution_um_per_px();
    let (line_mean, line_sd) = mean_sd(&line_px);
    let (sq_mean, sq_sd) = mean_sd(&square_px);
    Ok(GridMeasurement {
        line_thickness_mean_um: line_mean * res,
        line_thickness_sd_um: line_sd * res,
        square_width_mean_um: sq_mean * res,
        square_width_sd_um: sq_sd * res,
        line_samples: line_px.len(),
        square_samples: square_px.len(),
    })
}

/// Profiles one band and appends crossing widths (px) and gaps between
/// consecutive crossings (px). `transposed` scans column bands instead of
/// row bands.
fn band_crossings(
    canvas: &MosaicCanvas,
    band: std::ops::Range<usize>,
    transposed: bool,
    min_contrast: f64,
    line_px: &mut Vec<f64>,
    square_px: &mut Vec<f64>,
) {
    let along = if transposed {
        canvas.image().height()
    } else {
        canvas.image().width()
    };
    let band_len = band.len();
    // Mean over filled pixels; positions with under half the band filled are
    // invalid.
    let mut profile = vec![f64::NAN; along];
    for (i, slot) in profile.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in band.clone() {
            let (ix, iy) = if transposed { (j, i) } else { (i, j) };
            if canvas.is_filled(ix, iy) {
                sum += canvas.image().get(ix, iy) as f64;
                count += 1;
            }
        }
        if count * 2 >= band_len {
            *slot = sum / count as f64;
        }
    }

    // Longest contiguous valid span.
    let (mut best_start, mut best_len) = (0usize, 0usize);
    let (mut start, mut len) = (0usize, 0usize);
    for (i, v) in profile.iter().enumerate() {
        if v.is_nan() {
            len = 0;
        } else {
            if len == 0 {
                start = i;
            }
            len += 1;
            if len > best_len {
                best_start = start;
                best_len = len;
            }
        }
    }
    if best_len < 32 {
        return;
    }
    let span = &profile[best_start..best_start + best_len];
    let smooth: Vec<f64> = (0..span.len())
        .map(|i| {
            let a = span[i.saturating_sub(1)];
            let b = span[i];
            let c = span[(i + 1).min(span.len() - 1)];
            (a + b + c) / 3.0
        })
        .collect();
    let lo = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < min_contrast {
        return;
    }
    let thr = (hi + lo) / 2.0;

    let mut rising: Option<f64> = None;
    let mut last_fall: Option<f64> = None;
    for i in 1..smooth.len() {
        let (a, b) = (smooth[i - 1], smooth[i]);
        if a < thr && b >= thr {
            let r = (i - 1) as f64 + (thr - a) / (b - a);
            if let Some(f) = last_fall {
                square_px.push(r - f);
            }
            rising = Some(r);
        } else if a >= thr && b < thr {
            let f = (i - 1) as f64 + (thr - a) / (b - a);
            if let Some(r) = rising.take() {
                line_px.push(f - r);
                last_fall = Some(f);
            }
        }
    }
}

fn mean_sd(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endoscope::{Probe, ProbeSpec};
    use crate::kinematics::TipPose;
    use crate::phantom::{make_grid, make_texture, GridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Working-scale resolution for the default probe: 240 µm / 200 px.
    const WORKING_RES: f64 = 1.2;

    #[test]
    fn straight_strip_mosaic_integrates_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let scene = make_texture(&mut rng, 1.2, 30.0, 1.0).unwrap();
        let probe = Probe::new(ProbeSpec::default());
        let mut mosaicker = Mosaicker::new(MosaicParams::default(), 640, 320, WORKING_RES);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(0);

        // 8.4 µm per frame is exactly 7 working px, so every registered
        // shift should be exact and the integrated position drift-free.
        let n_frames = 30usize;
        let step_um = 8.4;
        let step_px = step_um / WORKING_RES;
        for i in 0..n_frames {
            let tip = TipPose::new(i as f64 * step_um / 1000.0, 0.0);
            let frame = probe.capture(&scene, &tip, 0.0, 0.0, &mut noise_rng);
            let pre = probe.preprocess(frame.pixels());
            let outcome = mosaicker.add_frame(&pre, (step_px, 0.0)).unwrap();
            assert!(!outcome.dead_reckoned);
            if i > 0 {
                assert_eq!(outcome.shift_px, (7.0, 0.0), "frame {i}");
            }
        }
        assert_eq!(mosaicker.position_px(), (203.0, 0.0));
        // Strip length = travel + field diameter.
        let expected_mm = ((n_frames - 1) as f64 * step_um + 240.0) / 1000.0;
        let measured = measure_mosaic_diameter_mm(mosaicker.canvas()).unwrap();
        assert!(
            (measured - expected_mm).abs() / expected_mm < 0.01,
            "diameter {measured} vs {expected_mm} mm"
        );
        assert_eq!(mosaicker.stats().frames, n_frames);
        assert_eq!(mosaicker.stats().dead_reckoned_frames, 0);
        assert!(mosaicker.stats().mean_peak() > 0.9);
    }

    #[test]
    fn featureless_frames_dead_reckon_then_abort() {
        let mut mosaicker = Mosaicker::new(MosaicParams::default(), 700, 400, WORKING_RES);
        let flat = ImageBuf::filled(256, 256, 0.5);
        mosaicker.add_frame(&flat, (0.0, 0.0)).unwrap();
        let step = (9.0, 0.0);
        // Ten consecutive degenerate frames are tolerated and dead-reckoned.
        for i in 1..=10 {
            let outcome = mosaicker.add_frame(&flat, step).unwrap();
            assert!(outcome.dead_reckoned, "frame {i}");
            assert_eq!(outcome.shift_px, step);
        }
        assert!((mosaicker.position_px().0 - 90.0).abs() < 1e-9);
        assert_eq!(mosaicker.stats().dead_reckoned_frames, 10);
        // The eleventh aborts.
        match mosaicker.add_frame(&flat, step) {
            Err(MosaicError::TrackingLost { run, limit }) => {
                assert_eq!(run, 11);
                assert_eq!(limit, 10);
            }
            other => panic!("expected tracking loss, got {other:?}"),
        }
    }

    #[test]
    fn recovered_registration_resets_the_degenerate_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let scene = make_texture(&mut rng, 0.8, 30.0, 1.0).unwrap();
        let probe = Probe::new(ProbeSpec::default());
        let mut mosaicker = Mosaicker::new(MosaicParams::default(), 600, 400, WORKING_RES);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(0);
        let frame = probe.capture(&scene, &TipPose::new(0.0, 0.0), 0.0, 0.0, &mut noise_rng);
        let textured = probe.preprocess(frame.pixels());
        let flat = ImageBuf::filled(256, 256, 0.5);
        mosaicker.add_frame(&textured, (0.0, 0.0)).unwrap();
        for _ in 0..6 {
            assert!(mosaicker.add_frame(&flat, (1.0, 0.0)).unwrap().dead_reckoned);
        }
        // The first textured frame still dead-reckons (its template comes
        // from the flat previous frame)...
        assert!(mosaicker
            .add_frame(&textured, (0.0, 0.0))
            .unwrap()
            .dead_reckoned);
        // ...but the next registration succeeds and clears the run...
        assert!(!mosaicker
            .add_frame(&textured, (0.0, 0.0))
            .unwrap()
            .dead_reckoned);
        // ...so ten more degenerate frames are tolerated again.
        for _ in 0..10 {
            assert!(mosaicker.add_frame(&flat, (1.0, 0.0)).unwrap().dead_reckoned);
        }
        assert!(mosaicker.add_frame(&flat, (1.0, 0.0)).is_err());
    }

    #[test]
    fn overflow_errors_by_default_and_grows_when_configured() {
        // A 300 px canvas cannot hold a frame dead-reckoned 200 px off
        // centre.
        let mut strict = Mosaicker::new(MosaicParams::default(), 300, 300, WORKING_RES);
        let flat = ImageBuf::filled(256, 256, 0.5);
        strict.add_frame(&flat, (0.0, 0.0)).unwrap();
        match strict.add_frame(&flat, (200.0, 0.0)) {
            Err(MosaicError::OutOfCanvas { origin, canvas }) => {
                assert_eq!(canvas, (300, 300));
                assert!(origin.0 + 200 > 300);
            }
            other => panic!("expected out-of-canvas, got {other:?}"),
        }

        let params = MosaicParams {
            overflow: OverflowPolicy::Grow,
            ..MosaicParams::default()
        };
        let mut growing = Mosaicker::new(params, 300, 300, WORKING_RES);
        growing.add_frame(&flat, (0.0, 0.0)).unwrap();
        let before = growing.canvas().coverage_area_mm2();
        growing.add_frame(&flat, (200.0, 0.0)).unwrap();
        assert!(growing.canvas().image().width() > 300);
        // Two full discs now; prior content survived the reallocation.
        let expected = 2.0 * std::f64::consts::PI * 0.12 * 0.12;
        let got = growing.canvas().coverage_area_mm2();
        assert!(got > before * 1.8 && (got - expected).abs() / expected < 0.05);
    }

    #[test]
    fn dead_leaf_compositing_keeps_the_newest_content() {
        let res = 1.0;
        let mut canvas = MosaicCanvas::new(300, 300, res);
        let first = ImageBuf::filled(100, 100, 0.25);
        let second = ImageBuf::filled(100, 100, 0.75);
        canvas.paste_disc(&first, 45.0, (60, 100));
        canvas.paste_disc(&second, 45.0, (100, 100));
        // Overlap region (between the two centres) shows the newest paste.
        assert_eq!(canvas.image().get(130, 150), 0.75);
        assert!(canvas.is_filled(130, 150));
        // Exclusive region of the first paste is untouched.
        assert_eq!(canvas.image().get(70, 150), 0.25);
        // Outside both discs nothing is filled.
        assert!(!canvas.is_filled(5, 5));
        assert_eq!(canvas.image().get(5, 5), 0.0);
    }

    #[test]
    fn coverage_area_matches_the_disc_footprint() {
        let mut canvas = MosaicCanvas::new(260, 260, WORKING_RES);
        let frame = ImageBuf::filled(200, 200, 0.5);
        canvas.paste_disc(&frame, 100.0, (22, 22));
        // 100 px at 1.2 µm/px is a 0.12 mm radius.
        let expected = std::f64::consts::PI * 0.12 * 0.12;
        let got = canvas.coverage_area_mm2();
        assert!((got - expected).abs() / expected < 0.01, "{got} vs {expected}");
    }

    #[test]
    fn single_frame_diameter_is_the_field_of_view() {
        let mut mosaicker = Mosaicker::new(MosaicParams::default(), 260, 260, WORKING_RES);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = make_texture(&mut rng, 0.6, 30.0, 1.0).unwrap();
        let probe = Probe::new(ProbeSpec::default());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(0);
        let frame = probe.capture(&scene, &TipPose::new(0.0, 0.0), 0.0, 0.0, &mut noise_rng);
        mosaicker
            .add_frame(&probe.preprocess(frame.pixels()), (0.0, 0.0))
            .unwrap();
        let d = measure_mosaic_diameter_mm(mosaicker.canvas()).unwrap();
        // One pasted frame spans the 240 µm field of view, ± one px.
        assert!((d - 0.240).abs() <= 0.0013, "single-frame diameter {d} mm");
        assert!(measure_mosaic_diameter_mm(&MosaicCanvas::new(10, 10, 1.0)).is_none());
    }

    #[test]
    fn grid_measurement_recovers_thickness_and_square_width() {
        // Paint grid content straight onto a canvas spanning several periods.
        let grid = make_grid(&GridSpec::default(), 2.0, WORKING_RES).unwrap();
        let n = grid.field().width();
        let c = (n as i64 - 1) / 2;
        let side = 1100usize;
        let mut canvas = MosaicCanvas::new(side, side, WORKING_RES);
        let mut patch = ImageBuf::zeros(side, side);
        for iy in 0..side {
            for ix in 0..side {
                let sx = (c - side as i64 / 2 + ix as i64) as usize;
                let sy = (c - side as i64 / 2 + iy as i64) as usize;
                patch.set(ix, iy, grid.field().get(sx, sy));
            }
        }
        canvas.paste_disc(&patch, 1e9, (0, 0));
        let m = measure_grid(&canvas, 0.2).unwrap();
        assert!(
            (m.line_thickness_mean_um - 73.0).abs() < 2.0,
            "thickness {} µm",
            m.line_thickness_mean_um
        );
        assert!(
            (m.square_width_mean_um - 237.0).abs() < 2.0,
            "square {} µm",
            m.square_width_mean_um
        );
        // A clean synthetic grid measures consistently.
        assert!(m.line_thickness_sd_um < 2.0);
        assert!(m.square_width_sd_um < 2.0);
        assert!(m.line_samples >= 22, "{} line samples", m.line_samples);
        assert!(m.square_samples >= 10, "{} square samples", m.square_samples);

        // Low-contrast content fails with a sample count, not a panic.
        let mut flat_canvas = MosaicCanvas::new(400, 400, WORKING_RES);
        flat_canvas.paste_disc(&ImageBuf::filled(400, 400, 0.5), 1e9, (0, 0));
        match measure_grid(&flat_canvas, 0.2) {
            Err(MosaicError::InsufficientCrossings { found, needed }) => {
                assert_eq!(found, 0);
                assert_eq!(needed, 22);
            }
            other => panic!("expected insufficient crossings, got {other:?}"),
        }
    }

    #[test]
    fn crop_to_content_bounds_the_filled_region() {
        let mut canvas = MosaicCanvas::new(500, 500, 1.0);
        let frame = ImageBuf::filled(64, 64, 0.9);
        canvas.paste_disc(&frame, 32.0, (200, 300));
        let (x0, y0, x1, y1) = canvas.filled_bbox().unwrap();
        assert!(x0 >= 200 && x1 <= 264 && y0 >= 300 && y1 <= 364);
        let crop = canvas.crop_to_content(4).unwrap();
        assert!(crop.width() <= 64 + 9 && crop.height() <= 64 + 9);
        assert!(MosaicCanvas::new(10, 10, 1.0).crop_to_content(0).is_none());
    }
}
