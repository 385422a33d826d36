//! Grayscale rasters, binary PGM I/O, bilinear sampling and Sobel gradients.
//!
//! Intensities are normalized to `[0, 1]` everywhere inside the crate; 8-bit
//! values only exist at the PGM boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("data length {actual} does not match {width}x{height}")]
    DataLength {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("image is {width}x{height}, need at least {min_width}x{min_height}")]
    TooSmall {
        width: usize,
        height: usize,
        min_width: usize,
        min_height: usize,
    },
    #[error("sample coordinate ({x}, {y}) outside {width}x{height} image")]
    CoordinateOutOfRange {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PgmError {
    #[error("bad magic number, expected P5")]
    BadMagic,
    #[error("malformed PGM header field `{field}`")]
    BadHeader { field: &'static str },
    #[error("PGM maxval {0} outside [1, 255]")]
    MaxvalOutOfRange(u32),
    #[error("truncated PGM payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
}

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::TooSmall {
                width,
                height,
                min_width: 1,
                min_height: 1,
            });
        }
        if data.len() != width * height {
            return Err(ImageError::DataLength {
                width,
                height,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::IntensityOutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`
    /// and NaN maps to 0.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp_unit(f(x, y)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    /// Wraps data already known to satisfy the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with edge replication for out-of-range indices.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn sample_bilinear(&self, x: f64, y: f64) -> Result<f64, ImageError> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
            return Err(ImageError::CoordinateOutOfRange {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(bilinear(&self.data, self.width, self.height, x, y))
    }

    /// Same as [`sample_bilinear`](Self::sample_bilinear) but the caller
    /// guarantees the coordinate is in range.
    #[inline]
    pub(crate) fn sample_unchecked(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.width, self.height, x, y)
    }

    /// Sobel derivatives at one pixel; identical to the `sobel_gradients` planes.
    #[inline]
    pub(crate) fn sobel_at(&self, x: usize, y: usize) -> (f64, f64) {
        let (w, h) = (self.width, self.height);
        let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let d = &self.data;
        let (rm, r0, rp) = (ym * w, y * w, yp * w);
        let vs = |c: usize| d[rm + c] + 2.0 * d[r0 + c] + d[rp + c];
        let hs = |r: usize| d[r + xm] + 2.0 * d[r + x] + d[r + xp];
        ((vs(xp) - vs(xm)) / 8.0, (hs(rp) - hs(rm)) / 8.0)
    }

    /// Bilinear sample of the Sobel derivative planes without building them.
    #[inline]
    pub(crate) fn sample_gradient_unchecked(&self, x: f64, y: f64) -> (f64, f64) {
        let (w, h) = (self.width, self.height);
        let x0 = (x.floor() as usize).min(w - 1);
        let y0 = (y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let (a00, b00) = self.sobel_at(x0, y0);
        let (a10, b10) = self.sobel_at(x1, y0);
        let (a01, b01) = self.sobel_at(x0, y1);
        let (a11, b11) = self.sobel_at(x1, y1);
        let lerp = |p00: f64, p10: f64, p01: f64, p11: f64| {
            let top = p00 + fx * (p10 - p00);
            let bottom = p01 + fx * (p11 - p01);
            top + fy * (bottom - top)
        };
        (lerp(a00, a10, a01, a11), lerp(b00, b10, b01, b11))
    }

    pub fn sobel_gradients(&self) -> Result<GradientField, ImageError> {
        if self.width < 3 || self.height < 3 {
            return Err(ImageError::TooSmall {
                width: self.width,
                height: self.height,
                min_width: 3,
                min_height: 3,
            });
        }
        Ok(sobel(self))
    }

    /// Returns a copy with `v` added to every pixel, clamped to `[0, 1]`.
    pub fn offset(&self, v: f64) -> Self {
        Self::from_raw(
            self.width,
            self.height,
            self.data.iter().map(|&p| clamp_unit(p + v)).collect(),
        )
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = data[y0 * width + x0];
    let p10 = data[y0 * width + x1];
    let p01 = data[y1 * width + x0];
    let p11 = data[y1 * width + x1];
    let top = p00 + fx * (p10 - p00);
    let bottom = p01 + fx * (p11 - p01);
    top + fy * (bottom - top)
}

/// Sub-pixel image position (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned pixel rectangle; `x..x + width` by `y..y + height`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x + self.width <= width && self.y + self.height <= height
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64
            && y >= self.y as f64
            && x < (self.x + self.width) as f64
            && y < (self.y + self.height) as f64
    }
}

/// Unbounded real-valued raster (gradients, response maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    #[inline]
    #[cfg(test)]
    pub(crate) fn sample_unchecked(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.width, self.height, x, y)
    }
}

/// Horizontal and vertical image derivatives, in intensity per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub ix: Plane,
    pub iy: Plane,
}

impl GradientField {
    pub fn width(&self) -> usize {
        self.ix.width
    }

    pub fn height(&self) -> usize {
        self.ix.height
    }
}

// 3x3 Sobel scaled by 1/8 so a unit ramp has unit slope; edges replicate.
pub(crate) fn sobel(img: &GrayImage) -> GradientField {
    let (w, h) = (img.width, img.height);
    let mut ix = Plane::zeros(w, h);
    let mut iy = Plane::zeros(w, h);
    if w == 1 {
        // Replicated columns cancel horizontally; the vertical kernel sums to 4.
        for y in 0..h {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            iy.data[y] = (4.0 * img.data[yp] - 4.0 * img.data[ym]) / 8.0;
        }
        return GradientField { ix, iy };
    }
    // Horizontal [1 2 1] smoothing of every row, edges replicated.
    let mut hs = vec![0.0; w * h];
    for (row, out) in img.data.chunks_exact(w).zip(hs.chunks_exact_mut(w)) {
        out[0] = row[0] + 2.0 * row[0] + row[1];
        for (o, t) in out[1..w - 1].iter_mut().zip(row.windows(3)) {
            *o = t[0] + 2.0 * t[1] + t[2];
        }
        out[w - 1] = row[w - 2] + 2.0 * row[w - 1] + row[w - 1];
    }
    let mut vs = vec![0.0; w];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        let rm = &img.data[ym * w..(ym + 1) * w];
        let r0 = &img.data[y * w..(y + 1) * w];
        let rp = &img.data[yp * w..(yp + 1) * w];
        for (((v, a), b), c) in vs.iter_mut().zip(rm).zip(r0).zip(rp) {
            *v = a + 2.0 * b + c;
        }
        let gx = &mut ix.data[y * w..(y + 1) * w];
        gx[0] = (vs[1] - vs[0]) / 8.0;
        for (g, t) in gx[1..w - 1].iter_mut().zip(vs.windows(3)) {
            *g = (t[2] - t[0]) / 8.0;
        }
        gx[w - 1] = (vs[w - 1] - vs[w - 2]) / 8.0;
        let (hm, hp) = (&hs[ym * w..(ym + 1) * w], &hs[yp * w..(yp + 1) * w]);
        for ((g, a), b) in iy.data[y * w..(y + 1) * w].iter_mut().zip(hp).zip(hm) {
            *g = (a - b) / 8.0;
        }
    }
    GradientField { ix, iy }
}

/// Parses a binary (P5) PGM.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut pos = 2;
    let width = header_field(bytes, &mut pos, "width")?;
    let height = header_field(bytes, &mut pos, "height")?;
    let maxval = header_field(bytes, &mut pos, "maxval")?;
    if width == 0 {
        return Err(PgmError::BadHeader { field: "width" });
    }
    if height == 0 {
        return Err(PgmError::BadHeader { field: "height" });
    }
    if !(1..=255).contains(&maxval) {
        return Err(PgmError::MaxvalOutOfRange(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::BadHeader { field: "maxval" }),
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let scale = maxval as f64;
    let data = payload[..expected]
        .iter()
        .map(|&v| (v as f64 / scale).min(1.0))
        .collect();
    Ok(GrayImage::from_raw(width, height, data))
}

fn header_field(bytes: &[u8], pos: &mut usize, field: &'static str) -> Result<u32, PgmError> {
    // Skip whitespace and comments.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(PgmError::BadHeader { field }),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(PgmError::BadHeader { field });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PgmError::BadHeader { field })
}

/// Encodes as binary PGM with maxval 255.
pub fn save_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| (v * 255.0).round() as u8));
    out
}
