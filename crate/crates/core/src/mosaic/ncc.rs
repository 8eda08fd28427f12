//! Normalised cross-correlation frame-to-frame registration.
//!
//! Registration operates on frames already resized to the working scale
//! (200 px across the 240 µm field, 1.2 µm/px). A template is cut from the
//! centre of the previous frame and correlated against every placement in
//! the next frame; the correlation peak gives the placement offset of the
//! old content in the new frame, and the probe displacement is its negation.
//! Shifts are integer pixels — there is no subpixel refinement.
//!
//! Two backends produce the same correlation surface: a direct spatial
//! dot-product (reference) and an FFT path fast enough for frame-rate use.
//! Window means and variances come from summed-area tables in both cases.
//! With the default 200 px frame and 75 px template the search covers
//! displacements up to ±62 px per axis.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::raster::ImageBuf;

/// Registration geometry and degeneracy threshold.
#[derive(Debug, Clone)]
pub struct RegistrationParams {
    /// Side of the working frame the correlation runs on, px.
    pub working_px: usize,
    /// Side of the square template cut from the previous frame's centre, px.
    pub template_px: usize,
    /// Minimum template standard deviation (intensity units) below which the
    /// frame carries too little structure to register.
    pub degenerate_std_threshold: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            working_px: 200,
            template_px: 75,
            degenerate_std_threshold: 0.01,
        }
    }
}

impl RegistrationParams {
    /// Maximum per-axis displacement the search covers, px. Placements are
    /// restricted to the symmetric range so |shift| never exceeds half the
    /// working-minus-template margin.
    pub fn margin_px(&self) -> usize {
        (self.working_px - self.template_px) / 2
    }
}

/// Which correlation implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NccBackend {
    /// Spatial-domain dot products; slow, used as the reference.
    Direct,
    /// FFT correlation; the real-time path.
    Fft,
}

/// A successful registration.
#[derive(Debug, Clone, Copy)]
pub struct Registration {
    /// Probe displacement between the two frames, integer px (frame axes).
    pub shift_px: (i64, i64),
    /// Correlation coefficient at the peak, in `[-1, 1]`.
    pub peak: f64,
}

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("template standard deviation {std:.5} below threshold {threshold}")]
    DegenerateTemplate { std: f64, threshold: f64 },
    #[error(
        "template is one-dimensional (aperture problem): {axis}-profile std {std:.5} below threshold {threshold}"
    )]
    ApertureProblem { axis: char, std: f64, threshold: f64 },
    #[error("no search window carries usable contrast")]
    DegenerateSearch,
}

/// Frame-to-frame registrator. Owns the FFT plans and is cheap to reuse
/// across frames.
pub struct Registrator {
    params: RegistrationParams,
    backend: NccBackend,
    fft_n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Registrator {
    pub fn new(params: RegistrationParams, backend: NccBackend) -> Registrator {
        assert!(params.template_px >= 8, "template too small");
        assert!(
            params.working_px > params.template_px,
            "working frame must exceed the template"
        );
        let fft_n = params.working_px.next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_n);
        let inverse = planner.plan_fft_inverse(fft_n);
        Registrator {
            params,
            backend,
            fft_n,
            forward,
            inverse,
        }
    }

    pub fn params(&self) -> &RegistrationParams {
        &self.params
    }

    pub fn backend(&self) -> NccBackend {
        self.backend
    }

    /// Registers `next` against `prev`; both must already be at the working
    /// size. Returns the integer-pixel probe displacement.
    pub fn register(&self, prev: &ImageBuf, next: &ImageBuf) -> Result<Registration, RegisterError> {
        let w = self.params.working_px;
        let t = self.params.template_px;
        let margin = self.params.margin_px();
        let lags = 2 * margin + 1;
        assert_eq!(prev.width(), w, "frame not at the working size");
        assert_eq!(prev.height(), w);
        assert_eq!(next.width(), w);
        assert_eq!(next.height(), w);

        let prev_w = to_f64(prev);
        let next_w = to_f64(next);

        // Zero-meaned template from the centre of the previous frame.
        let m = (t * t) as f64;
        let mut template = vec![0.0f64; t * t];
        let mut t_sum = 0.0;
        for y in 0..t {
            for x in 0..t {
                let v = prev_w[(margin + y) * w + margin + x];
                template[y * t + x] = v;
                t_sum += v;
            }
        }
        let t_mean = t_sum / m;
        let mut e_t = 0.0;
        for v in template.iter_mut() {
            *v -= t_mean;
            e_t += *v * *v;
        }
        let t_std = (e_t / m).sqrt();
        if t_std < self.params.degenerate_std_threshold {
            return Err(RegisterError::DegenerateTemplate {
                std: t_std,
                threshold: self.params.degenerate_std_threshold,
            });
        }

        // Aperture check: structure along a single axis produces a ridge, not
        // a peak — the correlation is maximal anywhere along the structure, so
        // the shift component parallel to it is unobservable and the argmax
        // lands arbitrarily. Profile the zero-meaned template across each
        // axis; a flat profile means that axis carries no constraint. A frame
        // looking at one straight grid line between crossings is the
        // canonical case (the check targets axis-aligned structure, which is
        // what the calibration grids contain).
        let mut row_profile = vec![0.0f64; t];
        let mut col_profile = vec![0.0f64; t];
        for y in 0..t {
            for x in 0..t {
                let v = template[y * t + x];
                row_profile[y] += v / t as f64;
                col_profile[x] += v / t as f64;
            }
        }
        // Profiles of a zero-meaned template are themselves zero-mean.
        let profile_std =
            |p: &[f64]| (p.iter().map(|s| s * s).sum::<f64>() / p.len() as f64).sqrt();
        let y_std = profile_std(&row_profile);
        let x_std = profile_std(&col_profile);
        if y_std < self.params.degenerate_std_threshold {
            return Err(RegisterError::ApertureProblem {
                axis: 'y',
                std: y_std,
                threshold: self.params.degenerate_std_threshold,
            });
        }
        if x_std < self.params.degenerate_std_threshold {
            return Err(RegisterError::ApertureProblem {
                axis: 'x',
                std: x_std,
                threshold: self.params.degenerate_std_threshold,
            });
        }

        let num = match self.backend {
            NccBackend::Direct => self.direct_correlation(&template, &next_w),
            NccBackend::Fft => self.fft_correlation(&template, &next_w),
        };

        // Window energies from summed-area tables.
        let (sat, sat2) = summed_area_tables(&next_w, w);
        let mut r = vec![f64::NEG_INFINITY; lags * lags];
        let mut any = false;
        for ly in 0..lags {
            for lx in 0..lags {
                let s = window_sum(&sat, w + 1, lx, ly, t);
                let s2 = window_sum(&sat2, w + 1, lx, ly, t);
                let e_w = s2 - s * s / m;
                if e_w > 1e-9 {
                    r[ly * lags + lx] = num[ly * lags + lx] / (e_t * e_w).sqrt();
                    any = true;
                }
            }
        }
        if !any {
            return Err(RegisterError::DegenerateSearch);
        }

        let (lx, ly) = select_peak(&r, lags, margin);
        // Placement offset of old content in the new frame is the lag minus
        // the margin; probe displacement is its negation.
        Ok(Registration {
            shift_px: (-(lx as i64 - margin as i64), -(ly as i64 - margin as i64)),
            peak: r[ly * lags + lx],
        })
    }

    /// Reference numerator: explicit dot products of the zero-meaned
    /// template with every window.
    fn direct_correlation(&self, template: &[f64], next_w: &[f64]) -> Vec<f64> {
        let w = self.params.working_px;
        let t = self.params.template_px;
        let lags = 2 * self.params.margin_px() + 1;
        let mut num = vec![0.0f64; lags * lags];
        for ly in 0..lags {
            for lx in 0..lags {
                let mut acc = 0.0;
                for y in 0..t {
                    let trow = &template[y * t..y * t + t];
                    let wrow = &next_w[(ly + y) * w + lx..(ly + y) * w + lx + t];
                    for (a, b) in trow.iter().zip(wrow) {
                        acc += a * b;
                    }
                }
                num[ly * lags + lx] = acc;
            }
        }
        num
    }

    /// FFT numerator: circular correlation on a zero-padded grid. The
    /// transform size is at least the frame size, so no needed lag ever
    /// wraps.
    fn fft_correlation(&self, template: &[f64], next_w: &[f64]) -> Vec<f64> {
        let w = self.params.working_px;
        let t = self.params.template_px;
        let lags = 2 * self.params.margin_px() + 1;
        let n = self.fft_n;
        let mut a = vec![Complex::new(0.0, 0.0); n * n];
        for y in 0..t {
            for x in 0..t {
                a[y * n + x] = Complex::new(template[y * t + x], 0.0);
            }
        }
        let mut b = vec![Complex::new(0.0, 0.0); n * n];
        for y in 0..w {
            for x in 0..w {
                b[y * n + x] = Complex::new(next_w[y * w + x], 0.0);
            }
        }
        self.fft2(&mut a, false);
        self.fft2(&mut b, false);
        for (bv, av) in b.iter_mut().zip(&a) {
            *bv *= av.conj();
        }
        self.fft2(&mut b, true);
        let scale = 1.0 / (n * n) as f64;
        let mut num = vec![0.0f64; lags * lags];
        for ly in 0..lags {
            for lx in 0..lags {
                num[ly * lags + lx] = b[ly * n + lx].re * scale;
            }
        }
        num
    }

    /// In-place 2-D FFT: rows, transpose, rows, transpose.
    fn fft2(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let n = self.fft_n;
        let fft = if inverse { &self.inverse } else { &self.forward };
        fft.process(buf);
        transpose_square(buf, n);
        fft.process(buf);
        transpose_square(buf, n);
    }
}

/// Argmax over the correlation grid. Exact ties resolve toward the smaller
/// displacement magnitude, then the smaller lag indices (row-major scan), so
/// repeated runs and both backends agree.
fn select_peak(r: &[f64], lags: usize, margin: usize) -> (usize, usize) {
    let mut best = (0usize, 0usize);
    let mut best_r = f64::NEG_INFINITY;
    let mut best_d2 = i64::MAX;
    for ly in 0..lags {
        for lx in 0..lags {
            let v = r[ly * lags + lx];
            if v == f64::NEG_INFINITY {
                continue;
            }
            let dx = lx as i64 - margin as i64;
            let dy = ly as i64 - margin as i64;
            let d2 = dx * dx + dy * dy;
            if v > best_r || (v == best_r && d2 < best_d2) {
                best_r = v;
                best_d2 = d2;
                best = (lx, ly);
            }
        }
    }
    best
}

fn transpose_square(buf: &mut [Complex<f64>], n: usize) {
    for y in 0..n {
        for x in y + 1..n {
            buf.swap(y * n + x, x * n + y);
        }
    }
}

fn to_f64(img: &ImageBuf) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

/// Summed-area tables of values and squares, `(side + 1)` square with a zero
/// first row and column.
fn summed_area_tables(data: &[f64], side: usize) -> (Vec<f64>, Vec<f64>) {
    let n1 = side + 1;
    let mut sat = vec![0.0f64; n1 * n1];
    let mut sat2 = vec![0.0f64; n1 * n1];
    for y in 0..side {
        let mut row = 0.0;
        let mut row2 = 0.0;
        for x in 0..side {
            let v = data[y * side + x];
            row += v;
            row2 += v * v;
            sat[(y + 1) * n1 + x + 1] = sat[y * n1 + x + 1] + row;
            sat2[(y + 1) * n1 + x + 1] = sat2[y * n1 + x + 1] + row2;
        }
    }
    (sat, sat2)
}

fn window_sum(sat: &[f64], n1: usize, x0: usize, y0: usize, side: usize) -> f64 {
    let (x1, y1) = (x0 + side, y0 + side);
    sat[y1 * n1 + x1] - sat[y0 * n1 + x1] - sat[y1 * n1 + x0] + sat[y0 * n1 + x0]
}
