//! Shi-Tomasi corner response and greedy corner selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{GradientField, GrayImage, Plane, Rect};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CornerError {
    #[error("image {width}x{height} too small for window radius {radius} (need {min}x{min})")]
    ImageTooSmall {
        width: usize,
        height: usize,
        radius: usize,
        min: usize,
    },
    #[error("detection region is empty")]
    EmptyRoi,
    #[error("detection region {0:?} is not inside the image")]
    RoiOutsideImage(Rect),
    #[error("invalid detection parameter: {0}")]
    InvalidParams(&'static str),
}

/// Window-summed gradient products `[a b; b c]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StructureTensor {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl StructureTensor {
    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(self)
    }
}

/// Smaller eigenvalue of the symmetric 2x2 tensor, floored at zero.
pub fn min_eigenvalue(t: &StructureTensor) -> f64 {
    let mean = 0.5 * (t.a + t.c);
    let half_diff = 0.5 * (t.a - t.c);
    let r = (half_diff * half_diff + t.b * t.b).sqrt();
    (mean - r).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub response: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    pub max_corners: usize,
    /// Fraction of the strongest response in the region a candidate must exceed.
    pub quality_level: f64,
    pub min_distance: f64,
    pub window_radius: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            max_corners: 20,
            quality_level: 0.05,
            min_distance: 15.0,
            window_radius: 2,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<(), CornerError> {
        if self.max_corners < 1 {
            return Err(CornerError::InvalidParams("max_corners must be >= 1"));
        }
        if !(self.quality_level > 0.0 && self.quality_level <= 1.0) {
            return Err(CornerError::InvalidParams("quality_level must be in (0, 1]"));
        }
        if !(self.min_distance >= 0.0) {
            return Err(CornerError::InvalidParams("min_distance must be >= 0"));
        }
        if self.window_radius < 1 {
            return Err(CornerError::InvalidParams("window_radius must be >= 1"));
        }
        Ok(())
    }
}

fn check_size(image: &GrayImage, radius: usize) -> Result<(), CornerError> {
    let min = 2 * radius + 3;
    if image.width() < min || image.height() < min {
        return Err(CornerError::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            radius,
            min,
        });
    }
    Ok(())
}

/// Shi-Tomasi response at every pixel of the image.
pub fn response_map(image: &GrayImage, window_radius: usize) -> Result<Plane, CornerError> {
    check_size(image, window_radius)?;
    let grads = image
        .sobel_gradients()
        .expect("size already checked against a 3x3 minimum");
    let full = Rect::new(0, 0, image.width(), image.height());
    Ok(response_in_rect(&grads, full, window_radius))
}

/// Response restricted to `rect`; the returned plane has the rectangle's size.
/// Windows that leave the image read replicated border gradients.
pub(crate) fn response_in_rect(grads: &GradientField, rect: Rect, radius: usize) -> Plane {
    let (w, h) = (grads.width(), grads.height());
    let r = radius as isize;
    let row_lo = rect.y.saturating_sub(radius);
    let row_hi = (rect.y + rect.height + radius).min(h);
    let rows = row_hi - row_lo;
    let cols = rect.width;

    // Horizontal pass over every row the vertical pass will touch.
    let mut ha = vec![0.0; rows * cols];
    let mut hb = vec![0.0; rows * cols];
    let mut hc = vec![0.0; rows * cols];
    for (ri, yy) in (row_lo..row_hi).enumerate() {
        for ci in 0..cols {
            let x = (rect.x + ci) as isize;
            let (mut sa, mut sb, mut sc) = (0.0, 0.0, 0.0);
            for dx in -r..=r {
                let xs = (x + dx).clamp(0, w as isize - 1) as usize;
                let gx = grads.ix.data[yy * w + xs];
                let gy = grads.iy.data[yy * w + xs];
                sa += gx * gx;
                sb += gx * gy;
                sc += gy * gy;
            }
            ha[ri * cols + ci] = sa;
            hb[ri * cols + ci] = sb;
            hc[ri * cols + ci] = sc;
        }
    }

    let mut out = Plane::zeros(cols, rect.height);
    for oy in 0..rect.height {
        let y = (rect.y + oy) as isize;
        for ci in 0..cols {
            let mut t = StructureTensor::default();
            for dy in -r..=r {
                let ys = (y + dy).clamp(0, h as isize - 1) as usize;
                let ri = ys - row_lo;
                t.a += ha[ri * cols + ci];
                t.b += hb[ri * cols + ci];
                t.c += hc[ri * cols + ci];
            }
            out.data[oy * cols + ci] = min_eigenvalue(&t);
        }
    }
    out
}

/// Greedy Shi-Tomasi corner selection inside `roi`, strongest first.
pub fn detect_corners(
    image: &GrayImage,
    roi: Rect,
    params: &DetectParams,
) -> Result<Vec<Corner>, CornerError> {
    params.validate()?;
    if roi.is_empty() {
        return Err(CornerError::EmptyRoi);
    }
    if !roi.fits_in(image.width(), image.height()) {
        return Err(CornerError::RoiOutsideImage(roi));
    }
    check_size(image, params.window_radius)?;
    let grads = image
        .sobel_gradients()
        .expect("size already checked against a 3x3 minimum");
    let response = response_in_rect(&grads, roi, params.window_radius);
    Ok(select_corners(&response, roi, params))
}

pub(crate) fn select_corners(response: &Plane, roi: Rect, params: &DetectParams) -> Vec<Corner> {
    let max = response.data.iter().copied().fold(0.0, f64::max);
    let threshold = params.quality_level * max;
    let mut candidates: Vec<Corner> = Vec::new();
    for oy in 0..response.height {
        for ox in 0..response.width {
            let v = response.get(ox, oy);
            if v > threshold {
                candidates.push(Corner {
                    x: roi.x + ox,
                    y: roi.y + oy,
                    response: v,
                });
            }
        }
    }
    // Row-major tie-break: candidates were pushed in row-major order and the sort is stable.
    candidates.sort_by(|a, b| b.response.total_cmp(&a.response));

    let min_d2 = params.min_distance * params.min_distance;
    let mut picked: Vec<Corner> = Vec::with_capacity(params.max_corners);
    for c in candidates {
        if picked.len() >= params.max_corners {
            break;
        }
        let crowded = picked.iter().any(|p| {
            let dx = p.x as f64 - c.x as f64;
            let dy = p.y as f64 - c.y as f64;
            dx * dx + dy * dy < min_d2
        });
        if !crowded {
            picked.push(c);
        }
    }
    picked
}
