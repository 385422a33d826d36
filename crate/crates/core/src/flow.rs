//! Pyramidal iterative Lucas-Kanade tracking of single points.
//!
//! Forward-additive formulation: the template window and its Sobel gradients
//! come from the previous frame and stay fixed for all iterations on a level,
//! so the 2x2 normal matrix is built once per level and only the mismatch
//! vector is re-evaluated against the next frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corners::{min_eigenvalue, StructureTensor};
use crate::imaging::{GrayImage, Point};

/// Smallest side length a pyramid level may have.
pub const MIN_LEVEL_SIZE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("point ({x}, {y}) is closer than {margin} px to the image border")]
    PointNearBorder { x: f64, y: f64, margin: usize },
    #[error("pyramid size mismatch: {prev:?} vs {next:?}")]
    SizeMismatch {
        prev: (usize, usize),
        next: (usize, usize),
    },
    #[error("invalid tracking parameter: {0}")]
    InvalidParams(&'static str),
}

/// Image pyramid; level 0 is full resolution, each level a 2x2 box average of
/// the one above. Sobel gradients are cached per level.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
}

impl Pyramid {
    pub fn build(image: &GrayImage, levels: usize) -> Self {
        build_pyramid(image, levels)
    }

    pub fn levels(&self) -> &[GrayImage] {
        &self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn base(&self) -> &GrayImage {
        &self.levels[0]
    }

}

/// Builds up to `levels` levels, stopping early rather than going below 8x8.
pub fn build_pyramid(image: &GrayImage, levels: usize) -> Pyramid {
    let mut out = vec![image.clone()];
    while out.len() < levels.max(1) {
        let parent = out.last().unwrap();
        let (w, h) = (parent.width() / 2, parent.height() / 2);
        if w < MIN_LEVEL_SIZE || h < MIN_LEVEL_SIZE {
            break;
        }
        let pw = parent.width();
        let pd = parent.data();
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let r0 = &pd[2 * y * pw..];
            let r1 = &pd[(2 * y + 1) * pw..];
            for x in 0..w {
                data.push(0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]));
            }
        }
        out.push(GrayImage::from_raw(w, h, data));
    }
    Pyramid { levels: out }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LkParams {
    /// Half-width of the tracking window; the window is `(2r+1)^2` pixels.
    pub window_radius: usize,
    pub pyramid_levels: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the update step, in pixels.
    pub epsilon: f64,
    /// Floor on the smaller eigenvalue of the normal matrix divided by the
    /// window pixel count.
    pub min_eigen_threshold: f64,
    /// Largest accepted mean absolute window difference after convergence.
    pub residual_cap: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            window_radius: 10,
            pyramid_levels: 3,
            max_iterations: 30,
            epsilon: 0.01,
            min_eigen_threshold: 1e-4,
            residual_cap: 0.08,
        }
    }
}

impl LkParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.window_radius < 2 {
            return Err(FlowError::InvalidParams("window_radius must be >= 2"));
        }
        if self.pyramid_levels < 1 {
            return Err(FlowError::InvalidParams("pyramid_levels must be >= 1"));
        }
        if self.max_iterations < 1 {
            return Err(FlowError::InvalidParams("max_iterations must be >= 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(FlowError::InvalidParams("epsilon must be > 0"));
        }
        if !(self.min_eigen_threshold > 0.0) {
            return Err(FlowError::InvalidParams("min_eigen_threshold must be > 0"));
        }
        if !(self.residual_cap > 0.0) {
            return Err(FlowError::InvalidParams("residual_cap must be > 0"));
        }
        Ok(())
    }

    /// Distance from the border a tracked point must keep.
    pub fn border_margin(&self) -> usize {
        self.window_radius + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LostReason {
    OutOfBounds,
    IllConditioned,
    Diverged,
    HighResidual,
}

impl LostReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            LostReason::OutOfBounds => "OutOfBounds",
            LostReason::IllConditioned => "IllConditioned",
            LostReason::Diverged => "Diverged",
            LostReason::HighResidual => "HighResidual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackStatus {
    Tracked,
    Lost(LostReason),
}

impl TrackStatus {
    pub fn is_tracked(&self) -> bool {
        matches!(self, TrackStatus::Tracked)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrackStatus::Tracked => "Tracked",
            TrackStatus::Lost(r) => r.as_str(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowResult {
    /// Position in the next frame (last estimate when lost).
    pub point: Point,
    pub status: TrackStatus,
    /// Mean absolute intensity difference over the final window.
    pub residual: f64,
}

impl FlowResult {
    fn lost(point: Point, reason: LostReason, residual: f64) -> Self {
        Self {
            point,
            status: TrackStatus::Lost(reason),
            residual,
        }
    }
}

fn near_border(p: Point, w: usize, h: usize, margin: usize) -> bool {
    let m = margin as f64;
    !(p.x >= m && p.y >= m && p.x <= (w - 1) as f64 - m && p.y <= (h - 1) as f64 - m)
}

#[inline]
fn window_fits(x: f64, y: f64, r: f64, w: usize, h: usize) -> bool {
    x - r >= 0.0 && y - r >= 0.0 && x + r <= (w - 1) as f64 && y + r <= (h - 1) as f64
}

/// Tracks `point` from `prev` into `next`.
pub fn lk_track(
    prev: &Pyramid,
    next: &Pyramid,
    point: Point,
    params: &LkParams,
) -> Result<FlowResult, FlowError> {
    params.validate()?;
    let (w0, h0) = (prev.base().width(), prev.base().height());
    let next_dims = (next.base().width(), next.base().height());
    if (w0, h0) != next_dims {
        return Err(FlowError::SizeMismatch {
            prev: (w0, h0),
            next: next_dims,
        });
    }
    let margin = params.border_margin();
    if near_border(point, w0, h0, margin) {
        return Err(FlowError::PointNearBorder {
            x: point.x,
            y: point.y,
            margin,
        });
    }

    let levels = params.pyramid_levels.min(prev.depth()).min(next.depth());
    let r = params.window_radius as isize;
    let rf = params.window_radius as f64;
    let n = (2 * params.window_radius + 1).pow(2);
    let max_step = (2 * params.window_radius + 1) as f64;

    let mut template = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];

    // Flow estimate in the current level's pixel units.
    let (mut fx, mut fy) = (0.0, 0.0);
    for level in (0..levels).rev() {
        let scale = (1u32 << level) as f64;
        let cx = (point.x + 0.5) / scale - 0.5;
        let cy = (point.y + 0.5) / scale - 0.5;
        let prev_img = &prev.levels[level];
        let next_img = &next.levels[level];
        let (w, h) = (prev_img.width(), prev_img.height());
        let here = |fx: f64, fy: f64| Point::new(point.x + fx * scale, point.y + fy * scale);

        if !window_fits(cx, cy, rf, w, h) {
            return Ok(FlowResult::lost(here(fx, fy), LostReason::OutOfBounds, f64::NAN));
        }
        let mut g = StructureTensor::default();
        let mut k = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (sx, sy) = (cx + dx as f64, cy + dy as f64);
                template[k] = prev_img.sample_unchecked(sx, sy);
                let (ix, iy) = prev_img.sample_gradient_unchecked(sx, sy);
                gx[k] = ix;
                gy[k] = iy;
                g.a += ix * ix;
                g.b += ix * iy;
                g.c += iy * iy;
                k += 1;
            }
        }
        let det = g.a * g.c - g.b * g.b;
        if min_eigenvalue(&g) / (n as f64) < params.min_eigen_threshold || !(det > 0.0) {
            if level == 0 {
                return Ok(FlowResult::lost(here(fx, fy), LostReason::IllConditioned, f64::NAN));
            }
            // Blurred coarse levels may lack texture; carry the guess down.
            fx *= 2.0;
            fy *= 2.0;
            continue;
        }
        let (inv_a, inv_b, inv_c) = (g.c / det, -g.b / det, g.a / det);

        let (mut vx, mut vy) = (0.0, 0.0);
        for _ in 0..params.max_iterations {
            let (qx, qy) = (cx + fx + vx, cy + fy + vy);
            if !window_fits(qx, qy, rf, w, h) {
                return Ok(FlowResult::lost(
                    here(fx + vx, fy + vy),
                    LostReason::OutOfBounds,
                    f64::NAN,
                ));
            }
            let (mut bx, mut by) = (0.0, 0.0);
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let diff = template[k] - next_img.sample_unchecked(qx + dx as f64, qy + dy as f64);
                    bx += diff * gx[k];
                    by += diff * gy[k];
                    k += 1;
                }
            }
            let dxs = inv_a * bx + inv_b * by;
            let dys = inv_b * bx + inv_c * by;
            vx += dxs;
            vy += dys;
            if vx.hypot(vy) > max_step {
                return Ok(FlowResult::lost(
                    here(fx + vx, fy + vy),
                    LostReason::Diverged,
                    f64::NAN,
                ));
            }
            if dxs.hypot(dys) < params.epsilon {
                break;
            }
        }
        if !window_fits(cx + fx + vx, cy + fy + vy, rf, w, h) {
            return Ok(FlowResult::lost(
                here(fx + vx, fy + vy),
                LostReason::OutOfBounds,
                f64::NAN,
            ));
        }
        fx += vx;
        fy += vy;
        if level > 0 {
            fx *= 2.0;
            fy *= 2.0;
        }
    }

    let end = Point::new(point.x + fx, point.y + fy);
    let base_next = next.base();
    if near_border(end, w0, h0, margin) {
        return Ok(FlowResult::lost(end, LostReason::OutOfBounds, f64::NAN));
    }
    let prev_base = prev.base();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let (dxf, dyf) = (dx as f64, dy as f64);
            let a = prev_base.sample_unchecked(point.x + dxf, point.y + dyf);
            let b = base_next.sample_unchecked(end.x + dxf, end.y + dyf);
            total += (a - b).abs();
        }
    }
    let residual = total / n as f64;
    if residual > params.residual_cap {
        return Ok(FlowResult::lost(end, LostReason::HighResidual, residual));
    }
    Ok(FlowResult {
        point: end,
        status: TrackStatus::Tracked,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(x: f64, y: f64) -> f64 {
        0.5 + 0.18 * (0.37 * x + 0.11 * y).sin()
            + 0.14 * (0.23 * y - 0.29 * x + 1.3).sin()
            + 0.1 * (0.41 * y + 0.05 * x + 0.4).cos()
    }

    fn shifted(w: usize, h: usize, tx: f64, ty: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| smooth(x as f64 - tx, y as f64 - ty))
    }

    #[test]
    fn pyramid_shapes() {
        let img = GrayImage::filled(4, 4, 0.5);
        assert_eq!(build_pyramid(&img, 1).depth(), 1);
        // 4x4 cannot go below 8x8, so depth clamps to 1.
        assert_eq!(build_pyramid(&img, 2).depth(), 1);

        let big = GrayImage::filled(70, 33, 0.5);
        let p = build_pyramid(&big, 5);
        let dims: Vec<_> = p.levels().iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(dims, vec![(70, 33), (35, 16), (17, 8)]);
    }

    #[test]
    fn box_average_levels() {
        let flat = GrayImage::filled(16, 16, 0.5);
        let p = build_pyramid(&flat, 2);
        assert!(p.levels()[1].data().iter().all(|&v| v == 0.5));

        let checker = GrayImage::from_fn(16, 16, |x, y| ((x + y) % 2) as f64);
        let p = build_pyramid(&checker, 2);
        assert_eq!(p.levels()[1].width(), 8);
        assert!(p.levels()[1].data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_frames_are_a_fixpoint() {
        let img = shifted(96, 96, 0.0, 0.0);
        let pyr = build_pyramid(&img, 3);
        let p = Point::new(47.3, 51.8);
        let res = lk_track(&pyr, &pyr, p, &LkParams::default()).unwrap();
        assert_eq!(res.status, TrackStatus::Tracked);
        assert_eq!(res.point, p);
        assert_eq!(res.residual, 0.0);
    }

    #[test]
    fn recovers_integer_and_fractional_shift() {
        let prev = build_pyramid(&shifted(128, 128, 0.0, 0.0), 3);
        for (tx, ty) in [(3.0, -2.0), (0.5, 0.25), (-1.75, 4.5)] {
            let next = build_pyramid(&shifted(128, 128, tx, ty), 3);
            let p = Point::new(64.0, 60.0);
            let res = lk_track(&prev, &next, p, &LkParams::default()).unwrap();
            assert!(res.status.is_tracked(), "{res:?}");
            let err = (res.point.x - p.x - tx).hypot(res.point.y - p.y - ty);
            assert!(err < 0.1, "shift ({tx},{ty}) err {err}");
        }
    }

    #[test]
    fn uniform_window_is_ill_conditioned() {
        let img = GrayImage::filled(128, 128, 0.4);
        let pyr = build_pyramid(&img, 3);
        let res = lk_track(&pyr, &pyr, Point::new(64.0, 64.0), &LkParams::default()).unwrap();
        assert_eq!(res.status, TrackStatus::Lost(LostReason::IllConditioned));
    }

    #[test]
    fn rejects_points_near_border_and_size_mismatch() {
        let a = build_pyramid(&shifted(64, 64, 0.0, 0.0), 3);
        let b = build_pyramid(&shifted(64, 48, 0.0, 0.0), 3);
        let params = LkParams::default();
        assert!(matches!(
            lk_track(&a, &a, Point::new(10.0, 30.0), &params),
            Err(FlowError::PointNearBorder { margin: 11, .. })
        ));
        assert!(lk_track(&a, &a, Point::new(11.0, 30.0), &params).is_ok());
        assert!(matches!(
            lk_track(&a, &b, Point::new(32.0, 30.0), &params),
            Err(FlowError::SizeMismatch { .. })
        ));
        let bad = LkParams {
            window_radius: 1,
            ..params
        };
        assert!(matches!(
            lk_track(&a, &a, Point::new(32.0, 30.0), &bad),
            Err(FlowError::InvalidParams(_))
        ));
    }

    #[test]
    fn content_change_is_high_residual() {
        let prev = build_pyramid(&shifted(96, 96, 0.0, 0.0), 1);
        // Same geometry, inverted contrast: gradients still solve but nothing matches.
        let inv = GrayImage::from_fn(96, 96, |x, y| 1.0 - smooth(x as f64, y as f64));
        let next = build_pyramid(&inv, 1);
        let params = LkParams {
            pyramid_levels: 1,
            max_iterations: 1,
            ..LkParams::default()
        };
        let res = lk_track(&prev, &next, Point::new(48.0, 48.0), &params).unwrap();
        assert!(matches!(res.status, TrackStatus::Lost(_)), "{res:?}");
    }
}
