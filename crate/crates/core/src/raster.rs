//! Grayscale raster buffers shared by the phantom, probe and mosaicking layers.
//!
//! All images in the simulator use the same convention: intensities are `f32`
//! in `[0, 1]`, pixels are indexed `(ix, iy)` with `ix` growing towards +x and
//! `iy` growing towards +y of whatever frame the image lives in (world, probe
//! or mosaic). Portable graymap export flips rows so that the written file is
//! north-up, which is what image viewers expect.

use std::io::{self, BufRead, Write};

use thiserror::Error;

/// Errors raised by raster I/O.
#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PGM stream: {0}")]
    MalformedPgm(String),
    #[error("unsupported PGM maxval {0} (expected 255 or 65535)")]
    UnsupportedMaxval(u32),
    #[error("image dimensions {w}x{h} are invalid")]
    BadDimensions { w: usize, h: usize },
}

/// A dense grayscale image with `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    /// Creates a constant-valued image.
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Creates an all-zero image.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    /// Wraps an existing sample vector; `data.len()` must equal `width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "sample count mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f32 {
        debug_assert!(ix < self.width && iy < self.height);
        self.data[iy * self.width + ix]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, value: f32) {
        debug_assert!(ix < self.width && iy < self.height);
        self.data[iy * self.width + ix] = value;
    }

    /// Bilinear sample at fractional pixel coordinates. Coordinates are in
    /// pixel units with the sample point of pixel `(i, j)` at `(i, j)` exactly.
    /// Points outside the image return `None`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.get(x0, y0) as f64;
        let v10 = self.get(x1, y0) as f64;
        let v01 = self.get(x0, y1) as f64;
        let v11 = self.get(x1, y1) as f64;
        Some(v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy
            + v11 * fx * fy)
    }

    /// Clamps every sample into `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mean of all samples.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation of all samples.
    pub fn std_dev(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mean = self.mean();
        let var = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64;
        var.sqrt()
    }

    /// Separable Gaussian blur with the given sigma in pixels. Borders are
    /// handled by renormalising the kernel over the in-bounds support, so flat
    /// images stay flat. `sigma <= 0` is a no-op.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageBuf {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();

        let mut tmp = vec![0.0f32; self.data.len()];
        // Horizontal pass.
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            for x in 0..self.width {
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for (ki, w) in kernel.iter().enumerate() {
                    let sx = x as i64 + ki as i64 - radius;
                    if sx >= 0 && (sx as usize) < self.width {
                        acc += w * row[sx as usize] as f64;
                        wsum += w;
                    }
                }
                tmp[y * self.width + x] = (acc / wsum) as f32;
            }
        }
        // Vertical pass.
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0f64;
                let mut wsum = 0.0f64;
                for (ki, w) in kernel.iter().enumerate() {
                    let sy = y as i64 + ki as i64 - radius;
                    if sy >= 0 && (sy as usize) < self.height {
                        acc += w * tmp[sy as usize * self.width + x] as f64;
                        wsum += w;
                    }
                }
                out[y * self.width + x] = (acc / wsum) as f32;
            }
        }
        ImageBuf::from_vec(self.width, self.height, out)
    }

    /// Downscales (or upscales) to `dst_w x dst_h` by exact area averaging:
    /// every destination pixel is the mean of the source area it covers.
    pub fn resize_area(&self, dst_w: usize, dst_h: usize) -> ImageBuf {
        assert!(dst_w > 0 && dst_h > 0, "resize target must be non-empty");
        if dst_w == self.width && dst_h == self.height {
            return self.clone();
        }
        let wx = area_weights(self.width, dst_w);
        let wy = area_weights(self.height, dst_h);

        // Horizontal pass into a dst_w x src_h intermediate.
        let mut tmp = vec![0.0f64; dst_w * self.height];
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            for (dx, spans) in wx.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(sx, w) in spans {
                    acc += row[sx] as f64 * w;
                }
                tmp[y * dst_w + dx] = acc;
            }
        }
        let mut out = vec![0.0f32; dst_w * dst_h];
        for (dy, spans) in wy.iter().enumerate() {
            for dx in 0..dst_w {
                let mut acc = 0.0f64;
                for &(sy, w) in spans {
                    acc += tmp[sy * dst_w + dx] * w;
                }
                out[dy * dst_w + dx] = acc as f32;
            }
        }
        ImageBuf::from_vec(dst_w, dst_h, out)
    }

    /// Writes an 8-bit binary PGM (`P5`, maxval 255). Samples are clamped to
    /// `[0, 1]` and quantised by rounding. Rows are written north-up.
    pub fn write_pgm8<W: Write>(&self, w: &mut W) -> Result<(), RasterError> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let mut row = vec![0u8; self.width];
        for iy in (0..self.height).rev() {
            for ix in 0..self.width {
                row[ix] = (self.get(ix, iy).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            w.write_all(&row)?;
        }
        Ok(())
    }

    /// Writes a 16-bit binary PGM (`P5`, maxval 65535, big-endian samples).
    pub fn write_pgm16<W: Write>(&self, w: &mut W) -> Result<(), RasterError> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut row = vec![0u8; self.width * 2];
        for iy in (0..self.height).rev() {
            for ix in 0..self.width {
                let q = (self.get(ix, iy).clamp(0.0, 1.0) * 65535.0).round() as u16;
                row[2 * ix..2 * ix + 2].copy_from_slice(&q.to_be_bytes());
            }
            w.write_all(&row)?;
        }
        Ok(())
    }

    /// Reads a binary PGM (`P5`) with maxval 255 or 65535, inverting the
    /// north-up row order used by the writers.
    pub fn read_pgm<R: BufRead>(r: &mut R) -> Result<ImageBuf, RasterError> {
        let magic = read_pnm_token(r)?;
        if magic != "P5" {
            return Err(RasterError::MalformedPgm(format!(
                "expected magic P5, found {magic:?}"
            )));
        }
        let w: usize = parse_pnm_int(&read_pnm_token(r)?)?;
        let h: usize = parse_pnm_int(&read_pnm_token(r)?)?;
        let maxval: u32 = parse_pnm_int(&read_pnm_token(r)?)? as u32;
        if w == 0 || h == 0 {
            return Err(RasterError::BadDimensions { w, h });
        }
        let mut data = vec![0.0f32; w * h];
        match maxval {
            255 => {
                let mut row = vec![0u8; w];
                for iy in (0..h).rev() {
                    r.read_exact(&mut row)?;
                    for ix in 0..w {
                        data[iy * w + ix] = row[ix] as f32 / 255.0;
                    }
                }
            }
            65535 => {
                let mut row = vec![0u8; w * 2];
                for iy in (0..h).rev() {
                    r.read_exact(&mut row)?;
                    for ix in 0..w {
                        let q = u16::from_be_bytes([row[2 * ix], row[2 * ix + 1]]);
                        data[iy * w + ix] = q as f32 / 65535.0;
                    }
                }
            }
            other => return Err(RasterError::UnsupportedMaxval(other)),
        }
        Ok(ImageBuf::from_vec(w, h, data))
    }
}

/// For each destination index, the list of `(source index, weight)` pairs of
/// an exact 1-D area resample; weights sum to 1.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let start = d as f64 * ratio;
            let end = (d + 1) as f64 * ratio;
            let mut spans = Vec::new();
            let mut s = start.floor() as usize;
            while (s as f64) < end && s < src {
                let overlap = end.min((s + 1) as f64) - start.max(s as f64);
                if overlap > 1e-12 {
                    spans.push((s, overlap / ratio));
                }
                s += 1;
            }
            spans
        })
        .collect()
}

fn read_pnm_token<R: BufRead>(r: &mut R) -> Result<String, RasterError> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    // Skip whitespace and `#` comments.
    loop {
        r.read_exact(&mut byte)?;
        match byte[0] {
            b' ' | b'\t' | b'\r' | b'\n' => continue,
            b'#' => {
                while byte[0] != b'\n' {
                    r.read_exact(&mut byte)?;
                }
            }
            c => {
                token.push(c as char);
                break;
            }
        }
    }
    loop {
        match r.read_exact(&mut byte) {
            Ok(()) => match byte[0] {
                b' ' | b'\t' | b'\r' | b'\n' => break,
                c => token.push(c as char),
            },
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(token)
}

fn parse_pnm_int(token: &str) -> Result<usize, RasterError> {
    token
        .parse::<usize>()
        .map_err(|_| RasterError::MalformedPgm(format!("expected integer, found {token:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_matches_hand_computed_value() {
        let img = ImageBuf::from_vec(2, 2, vec![0.0, 1.0, 0.5, 1.0]);
        // At (0.5, 0.5): mean of all four corners.
        let v = img.sample_bilinear(0.5, 0.5).unwrap();
        assert!((v - 0.625).abs() < 1e-12);
        // On a node the sample is exact.
        assert_eq!(img.sample_bilinear(1.0, 0.0).unwrap(), 1.0);
        // Outside the support.
        assert!(img.sample_bilinear(-0.1, 0.0).is_none());
        assert!(img.sample_bilinear(0.0, 1.5).is_none());
    }

    #[test]
    fn gaussian_blur_preserves_flat_images() {
        let img = ImageBuf::filled(32, 32, 0.6);
        let blurred = img.gaussian_blur(1.4);
        for &v in blurred.data() {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_blur_spreads_an_impulse_symmetrically() {
        let mut img = ImageBuf::zeros(21, 21);
        img.set(10, 10, 1.0);
        let blurred = img.gaussian_blur(1.4);
        assert!((blurred.get(8, 10) - blurred.get(12, 10)).abs() < 1e-7);
        assert!((blurred.get(10, 7) - blurred.get(10, 13)).abs() < 1e-7);
        assert!(blurred.get(10, 10) > blurred.get(11, 10));
        // Mass is conserved away from borders.
        let total: f32 = blurred.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn area_resize_preserves_mean_and_halves_exactly() {
        let img = ImageBuf::from_vec(4, 2, vec![0.0, 1.0, 0.0, 1.0, 0.2, 0.4, 0.6, 0.8]);
        let half = img.resize_area(2, 1);
        assert_eq!(half.width(), 2);
        // Each output pixel is the mean of a 2x2 block.
        assert!((half.get(0, 0) - 0.4).abs() < 1e-6);
        assert!((half.get(1, 0) - 0.6).abs() < 1e-6);
        let big = ImageBuf::filled(256, 256, 0.37);
        let small = big.resize_area(200, 200);
        for &v in small.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn area_weights_sum_to_one() {
        for (src, dst) in [(256, 200), (200, 75), (7, 3), (3, 7)] {
            for spans in area_weights(src, dst) {
                let sum: f64 = spans.iter().map(|&(_, w)| w).sum();
                assert!((sum - 1.0).abs() < 1e-9, "{src}->{dst}: {sum}");
            }
        }
    }

    #[test]
    fn pgm8_roundtrip_quantises_to_one_step() {
        let mut img = ImageBuf::zeros(5, 4);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f32) / 19.0;
        }
        let mut bytes = Vec::new();
        img.write_pgm8(&mut bytes).unwrap();
        let back = ImageBuf::read_pgm(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.width(), 5);
        assert_eq!(back.height(), 4);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pgm16_roundtrip_is_nearly_lossless() {
        let mut img = ImageBuf::zeros(3, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f32) / 8.0;
        }
        let mut bytes = Vec::new();
        img.write_pgm16(&mut bytes).unwrap();
        let back = ImageBuf::read_pgm(&mut bytes.as_slice()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn pgm_reader_rejects_garbage() {
        let mut junk: &[u8] = b"P6\n2 2\n255\n0000";
        assert!(matches!(
            ImageBuf::read_pgm(&mut junk),
            Err(RasterError::MalformedPgm(_))
        ));
        let mut badmax: &[u8] = b"P5\n1 1\n1000\n\x00\x00";
        assert!(matches!(
            ImageBuf::read_pgm(&mut badmax),
            Err(RasterError::UnsupportedMaxval(1000))
        ));
    }
}
