//! Feature lifecycle: acquisition in the central region, frame-to-frame
//! tracking, best-feature selection and wholesale re-acquisition.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{displacement_from_center, CenterConvention, Displacement};
use crate::corners::{detect_corners, CornerError, DetectParams};
use crate::flow::{build_pyramid, lk_track, FlowError, LkParams, LostReason, Pyramid, TrackStatus};
use crate::imaging::{GrayImage, Point, Rect};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("image {width}x{height} is too small")]
    ImageTooSmall { width: usize, height: usize },
    #[error("frame is {actual:?} but the tracker was started on {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid tracker configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corners(#[from] CornerError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// The central half of the frame along each axis.
pub fn center_roi(width: usize, height: usize) -> Result<Rect, TrackerError> {
    if width < 4 || height < 4 {
        return Err(TrackerError::ImageTooSmall { width, height });
    }
    Ok(Rect::new(width / 4, height / 4, width / 2, height / 2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedFeature {
    pub id: u64,
    pub position: Point,
    pub init_response: f64,
    pub age: u32,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub detect: DetectParams,
    pub lk: LkParams,
    /// Re-acquire when fewer features than this survive a frame.
    pub min_alive: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            detect: DetectParams::default(),
            lk: LkParams::default(),
            min_alive: 5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        self.detect.validate()?;
        self.lk.validate()?;
        if self.min_alive < 1 || self.min_alive > self.detect.max_corners {
            return Err(TrackerError::InvalidConfig(format!(
                "min_alive must be in [1, {}], got {}",
                self.detect.max_corners, self.min_alive
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackerEvent {
    FeatureLost { id: u64, reason: LostReason },
    Reacquired { generation: u32 },
    Blind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub features: Vec<TrackedFeature>,
    pub best_id: Option<u64>,
    pub generation: u32,
    pub blind: bool,
    next_id: u64,
    width: usize,
    height: usize,
}

impl TrackerState {
    pub fn alive(&self) -> impl Iterator<Item = &TrackedFeature> {
        self.features.iter().filter(|f| f.alive)
    }

    pub fn alive_count(&self) -> usize {
        self.alive().count()
    }

    pub fn best(&self) -> Option<&TrackedFeature> {
        let id = self.best_id?;
        self.features.iter().find(|f| f.id == id && f.alive)
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Highest acquisition response; ties go to the feature nearer the image
/// center, then to the lower id.
pub fn select_best(features: &[TrackedFeature], width: usize, height: usize) -> Option<u64> {
    let center = CenterConvention::Integer.center(width, height);
    features
        .iter()
        .filter(|f| f.alive)
        .min_by(|a, b| {
            b.init_response
                .total_cmp(&a.init_response)
                .then_with(|| {
                    a.position
                        .distance(center)
                        .total_cmp(&b.position.distance(center))
                })
                .then_with(|| a.id.cmp(&b.id))
        })
        .map(|f| f.id)
}

/// Detects a fresh feature set in the central region of `image`.
pub fn acquire(image: &GrayImage, config: &TrackerConfig) -> Result<TrackerState, TrackerError> {
    config.validate()?;
    let mut state = TrackerState {
        features: Vec::new(),
        best_id: None,
        generation: 0,
        blind: true,
        next_id: 0,
        width: image.width(),
        height: image.height(),
    };
    reacquire(&mut state, image, config)?;
    Ok(state)
}

fn reacquire(
    state: &mut TrackerState,
    image: &GrayImage,
    config: &TrackerConfig,
) -> Result<(), TrackerError> {
    let (w, h) = (image.width(), image.height());
    let roi = center_roi(w, h)?;
    let margin = config.lk.border_margin() as f64;
    let corners = detect_corners(image, roi, &config.detect)?;
    let mut features = Vec::with_capacity(corners.len());
    for c in corners {
        let p = Point::new(c.x as f64, c.y as f64);
        let inside = p.x >= margin
            && p.y >= margin
            && p.x <= (w - 1) as f64 - margin
            && p.y <= (h - 1) as f64 - margin;
        if !inside {
            continue;
        }
        features.push(TrackedFeature {
            id: state.next_id,
            position: p,
            init_response: c.response,
            age: 0,
            alive: true,
        });
        state.next_id += 1;
    }
    state.features = features;
    state.generation += 1;
    state.best_id = select_best(&state.features, w, h);
    state.blind = state.best_id.is_none();
    Ok(())
}

/// Tracks every live feature from `prev` into `next`, re-acquiring on `next`
/// when too few survive.
pub fn advance(
    state: &TrackerState,
    prev: &GrayImage,
    next: &GrayImage,
    config: &TrackerConfig,
) -> Result<(TrackerState, Vec<TrackerEvent>), TrackerError> {
    let prev_pyr = build_pyramid(prev, config.lk.pyramid_levels);
    let next_pyr = build_pyramid(next, config.lk.pyramid_levels);
    advance_pyramids(state, &prev_pyr, &next_pyr, config)
}

/// [`advance`] on prebuilt pyramids, so a frame's pyramid can be reused as the
/// next call's `prev`.
pub fn advance_pyramids(
    state: &TrackerState,
    prev: &Pyramid,
    next: &Pyramid,
    config: &TrackerConfig,
) -> Result<(TrackerState, Vec<TrackerEvent>), TrackerError> {
    config.validate()?;
    let expected = (state.width, state.height);
    for img in [prev.base(), next.base()] {
        let actual = (img.width(), img.height());
        if actual != expected {
            return Err(TrackerError::DimensionMismatch { expected, actual });
        }
    }

    let mut out = state.clone();
    let mut events = Vec::new();
    for f in out.features.iter_mut().filter(|f| f.alive) {
        let status = match lk_track(prev, next, f.position, &config.lk) {
            Ok(res) => {
                if res.status.is_tracked() {
                    f.position = res.point;
                    f.age += 1;
                }
                res.status
            }
            Err(FlowError::PointNearBorder { .. }) => TrackStatus::Lost(LostReason::OutOfBounds),
            Err(e) => return Err(e.into()),
        };
        if let TrackStatus::Lost(reason) = status {
            f.alive = false;
            events.push(TrackerEvent::FeatureLost { id: f.id, reason });
        }
    }

    if out.best().is_none() {
        out.best_id = select_best(&out.features, out.width, out.height);
    }
    out.blind = out.best_id.is_none();

    if out.alive_count() < config.min_alive {
        reacquire(&mut out, next.base(), config)?;
        events.push(TrackerEvent::Reacquired {
            generation: out.generation,
        });
    }
    if out.blind && !state.blind {
        events.push(TrackerEvent::Blind);
    }
    Ok((out, events))
}

/// Displacement of the best feature from the image center, or `None` when blind.
pub fn best_displacement(state: &TrackerState, width: usize, height: usize) -> Option<Displacement> {
    let best = state.best()?;
    displacement_from_center(best.position, width, height).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells(w: usize, h: usize, cell: usize, seed: u64, shift: (f64, f64)) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let fx = x as f64 - shift.0;
            let fy = y as f64 - shift.1;
            // Smooth the cell edges over a pixel so sub-pixel shifts are representable.
            let val = |i: i64, j: i64| {
                let mut z = (i as u64)
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
                    ^ seed;
                z ^= z >> 31;
                z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
                z ^= z >> 29;
                (z >> 11) as f64 / (1u64 << 53) as f64
            };
            let c = cell as f64;
            let (gx, gy) = (fx / c, fy / c);
            let (i, j) = (gx.floor(), gy.floor());
            let tx = ((gx - i) * c - (c - 1.0)).clamp(0.0, 1.0);
            let ty = ((gy - j) * c - (c - 1.0)).clamp(0.0, 1.0);
            let (i, j) = (i as i64, j as i64);
            let top = val(i, j) * (1.0 - tx) + val(i + 1, j) * tx;
            let bot = val(i, j + 1) * (1.0 - tx) + val(i + 1, j + 1) * tx;
            top * (1.0 - ty) + bot * ty
        })
    }

    #[test]
    fn roi_arithmetic() {
        assert_eq!(center_roi(640, 480).unwrap(), Rect::new(160, 120, 320, 240));
        assert_eq!(center_roi(4, 4).unwrap(), Rect::new(1, 1, 2, 2));
        assert_eq!(center_roi(641, 481).unwrap(), Rect::new(160, 120, 320, 240));
        assert!(center_roi(3, 10).is_err());
    }

    #[test]
    fn acquire_on_texture() {
        let img = cells(320, 240, 24, 5, (0.0, 0.0));
        let cfg = TrackerConfig::default();
        let state = acquire(&img, &cfg).unwrap();
        let roi = center_roi(320, 240).unwrap();
        let corners = detect_corners(&img, roi, &cfg.detect).unwrap();
        assert!(!state.blind);
        assert_eq!(state.generation, 1);
        assert_eq!(state.features.len(), corners.len());
        assert!(state.features.iter().all(|f| roi.contains(f.position.x, f.position.y)));
        let best = state.best().unwrap();
        assert_eq!(best.init_response, corners[0].response);
    }

    #[test]
    fn acquire_on_blank_is_blind() {
        let state = acquire(&GrayImage::filled(64, 64, 0.5), &TrackerConfig::default()).unwrap();
        assert!(state.blind);
        assert!(state.features.is_empty());
        assert_eq!(state.best_id, None);
        assert_eq!(best_displacement(&state, 64, 64), None);
    }

    #[test]
    fn only_interior_corner_is_acquired() {
        // One bright block whose top-left corner sits inside the center region;
        // its other corners fall outside it.
        let img = GrayImage::from_fn(120, 120, |x, y| {
            if (50..110).contains(&x) && (50..110).contains(&y) {
                0.9
            } else {
                0.1
            }
        });
        let state = acquire(&img, &TrackerConfig::default()).unwrap();
        assert_eq!(state.alive_count(), 1, "{:?}", state.features);
        let f = &state.features[0];
        assert!((f.position.x - 50.0).abs() <= 1.0 && (f.position.y - 50.0).abs() <= 1.0);
    }

    #[test]
    fn identical_frames_change_nothing() {
        let img = cells(320, 240, 24, 9, (0.0, 0.0));
        let cfg = TrackerConfig::default();
        let state = acquire(&img, &cfg).unwrap();
        let (next, events) = advance(&state, &img, &img, &cfg).unwrap();
        assert!(events.is_empty());
        for (a, b) in state.features.iter().zip(&next.features) {
            assert_eq!(a.position, b.position);
            assert_eq!(b.age, 1);
        }
        assert_eq!(next.best_id, state.best_id);
    }

    #[test]
    fn translation_moves_all_features() {
        let a = cells(320, 240, 24, 3, (0.0, 0.0));
        let b = cells(320, 240, 24, 3, (3.0, 0.0));
        let cfg = TrackerConfig::default();
        let state = acquire(&a, &cfg).unwrap();
        let (next, events) = advance(&state, &a, &b, &cfg).unwrap();
        assert!(events.is_empty(), "{events:?}");
        assert_eq!(next.best_id, state.best_id);
        for (f0, f1) in state.features.iter().zip(&next.features) {
            assert!((f1.position.x - f0.position.x - 3.0).abs() < 0.1);
            assert!((f1.position.y - f0.position.y).abs() < 0.1);
        }
    }

    #[test]
    fn blank_frame_loses_everything_and_goes_blind() {
        let a = cells(320, 240, 24, 3, (0.0, 0.0));
        let blank = GrayImage::filled(320, 240, 0.5);
        let cfg = TrackerConfig::default();
        let state = acquire(&a, &cfg).unwrap();
        let n = state.alive_count();
        let (next, events) = advance(&state, &a, &blank, &cfg).unwrap();
        let lost = events
            .iter()
            .filter(|e| matches!(e, TrackerEvent::FeatureLost { .. }))
            .count();
        assert_eq!(lost, n);
        assert!(events.contains(&TrackerEvent::Reacquired { generation: 2 }));
        assert!(events.contains(&TrackerEvent::Blind));
        assert!(next.blind);
        assert_eq!(next.generation, 2);
    }

    #[test]
    fn best_survives_reordering_and_switches_on_death() {
        let img = cells(320, 240, 24, 11, (0.0, 0.0));
        let cfg = TrackerConfig::default();
        let mut state = acquire(&img, &cfg).unwrap();
        let best = state.best_id;
        state.features.reverse();
        assert_eq!(select_best(&state.features, 320, 240), best);
        for f in state.features.iter_mut() {
            if Some(f.id) == best {
                f.alive = false;
            }
        }
        let second = select_best(&state.features, 320, 240);
        assert!(second.is_some() && second != best);
    }

    #[test]
    fn best_displacement_examples() {
        let mut state = acquire(&GrayImage::filled(640, 480, 0.5), &TrackerConfig::default()).unwrap();
        state.features = vec![TrackedFeature {
            id: 7,
            position: Point::new(480.0, 120.0),
            init_response: 1.0,
            age: 0,
            alive: true,
        }];
        state.best_id = Some(7);
        state.blind = false;
        let d = best_displacement(&state, 640, 480).unwrap();
        assert_eq!((d.x, d.y, d.d), (160.0, -120.0, 200.0));
        state.features[0].position = Point::new(320.0, 240.0);
        assert_eq!(best_displacement(&state, 640, 480).unwrap().d, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = cells(320, 240, 24, 3, (0.0, 0.0));
        let b = cells(300, 240, 24, 3, (0.0, 0.0));
        let cfg = TrackerConfig::default();
        let state = acquire(&a, &cfg).unwrap();
        assert!(matches!(
            advance(&state, &a, &b, &cfg),
            Err(TrackerError::DimensionMismatch { .. })
        ));
    }
}
