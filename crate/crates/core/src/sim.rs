//! Closed-loop test bed: planar quadcopter dynamics with a first-order
//! attitude lag, a nadir pinhole camera over a hashed-cell ground texture,
//! Ornstein-Uhlenbeck wind gusts and a low-light sensor model.
//!
//! World axes are X east, Y "down the image" at zero yaw, so at yaw 0 the
//! camera's +x column direction is world +X and its +y row direction is world
//! +Y. Tilt commands act in the body frame and are rotated into the world by
//! the current yaw, which keeps the camera, controller and airframe in the
//! same frame at every heading.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{AttitudeCommand, AxisGains, CenterConvention, ControlError, PositionHold};
use crate::flow::build_pyramid;
use crate::imaging::{GrayImage, Point, Rect};
use crate::telemetry::{EventFlags, FrameRecord};
use crate::tracker::{
    acquire, advance_pyramids, best_displacement, center_roi, TrackerConfig, TrackerError,
    TrackerEvent, TrackerState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

fn config_err(field: &str, message: impl Into<String>) -> SimError {
    SimError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Per-axis Ornstein-Uhlenbeck gust acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindParams {
    /// Diffusion, m/s^2 per sqrt(s).
    pub sigma: f64,
    /// Mean-reversion rate, 1/s.
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowLight {
    /// Multiplicative sensor gain in (0, 1].
    pub gain: f64,
    /// Additive Gaussian pixel noise standard deviation.
    pub noise: f64,
}

impl Default for LowLight {
    fn default() -> Self {
        Self {
            gain: 1.0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub physics_dt: f64,
    pub camera_rate: f64,
    pub altitude: f64,
    pub focal_px: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub tilt_tau: f64,
    pub drag_coeff: f64,
    pub gravity: f64,
    pub max_tilt: f64,
    pub wind: WindParams,
    pub lowlight: LowLight,
    pub yaw_rate: f64,
    pub texture_seed: u64,
    /// Seed for the disturbance streams (wind, pixel noise).
    pub seed: u64,
    pub cell_size: f64,
    pub blank_ground: bool,
    /// World rectangle `[x0, y0, x1, y1]` rendered as flat gray when
    /// `blank_ground` is set.
    pub blank_rect: [f64; 4],
    pub duration: f64,
    /// Start position relative to the hold point the tracker will lock onto.
    pub initial_offset: [f64; 2],
    pub frame_size_cm: f64,
    pub settle_time: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            physics_dt: 0.005,
            camera_rate: 25.0,
            altitude: 1.0,
            focal_px: 500.0,
            image_width: 640,
            image_height: 480,
            tilt_tau: 0.15,
            drag_coeff: 0.35,
            gravity: 9.81,
            max_tilt: 0.2,
            wind: WindParams::default(),
            lowlight: LowLight::default(),
            yaw_rate: 0.0,
            texture_seed: 1,
            seed: 1,
            cell_size: 0.1,
            blank_ground: false,
            blank_rect: [-1e6, -1e6, 1e6, 1e6],
            duration: 60.0,
            initial_offset: [0.0, 0.0],
            frame_size_cm: 58.0,
            settle_time: 5.0,
        }
    }
}

impl SimConfig {
    /// Ground sample distance, meters per pixel.
    pub fn gsd(&self) -> f64 {
        self.altitude / self.focal_px
    }

    pub fn frame_interval(&self) -> f64 {
        1.0 / self.camera_rate
    }

    /// Physics steps per camera frame.
    pub fn substeps(&self) -> Result<usize, SimError> {
        let ratio = self.frame_interval() / self.physics_dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 {
            return Err(config_err(
                "sim.physics_dt",
                format!(
                    "{} s does not divide the camera frame interval {} s",
                    self.physics_dt,
                    self.frame_interval()
                ),
            ));
        }
        Ok(n as usize)
    }

    /// Number of camera frames an episode records.
    pub fn frame_count(&self) -> usize {
        (self.duration * self.camera_rate + 1e-9).floor() as usize + 1
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("sim.physics_dt", self.physics_dt),
            ("sim.camera_rate", self.camera_rate),
            ("sim.altitude", self.altitude),
            ("sim.focal_px", self.focal_px),
            ("sim.tilt_tau", self.tilt_tau),
            ("sim.gravity", self.gravity),
            ("sim.max_tilt", self.max_tilt),
            ("sim.cell_size", self.cell_size),
            ("sim.duration", self.duration),
            ("sim.frame_size_cm", self.frame_size_cm),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(field, format!("must be a positive number, got {v}")));
            }
        }
        let non_negative = [
            ("sim.drag_coeff", self.drag_coeff),
            ("sim.wind.sigma", self.wind.sigma),
            ("sim.wind.rate", self.wind.rate),
            ("sim.lowlight.noise", self.lowlight.noise),
            ("sim.settle_time", self.settle_time),
        ];
        for (field, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(field, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.lowlight.gain > 0.0 && self.lowlight.gain <= 1.0) {
            return Err(config_err("sim.lowlight.gain", "must be in (0, 1]"));
        }
        if !self.yaw_rate.is_finite() {
            return Err(config_err("sim.yaw_rate", "must be finite"));
        }
        if self.max_tilt >= std::f64::consts::FRAC_PI_2 {
            return Err(config_err("sim.max_tilt", "must be below pi/2"));
        }
        if self.image_width < 32 || self.image_height < 32 {
            return Err(config_err("sim.image_width", "image must be at least 32x32"));
        }
        if self.physics_dt > self.tilt_tau {
            return Err(config_err("sim.physics_dt", "must not exceed sim.tilt_tau"));
        }
        if self.gsd() >= self.cell_size {
            return Err(config_err(
                "sim.cell_size",
                "texture cells must be larger than one pixel footprint",
            ));
        }
        if self.initial_offset.iter().any(|v| !v.is_finite()) {
            return Err(config_err("sim.initial_offset", "must be finite"));
        }
        self.substeps().map(|_| ())
    }

    pub fn texture(&self) -> GroundTexture {
        GroundTexture {
            seed: self.texture_seed,
            cell_size: self.cell_size,
            blank: self.blank_ground.then_some(self.blank_rect),
        }
    }
}

/// Piecewise-constant ground: each `cell_size` square has an intensity drawn
/// from a stateless hash of `(seed, i, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTexture {
    pub seed: u64,
    pub cell_size: f64,
    pub blank: Option<[f64; 4]>,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cell_hash(seed: u64, i: i64, j: i64) -> u64 {
    let h = splitmix(seed ^ 0x6A09_E667_F3BC_C908);
    let h = splitmix(h ^ (i as u64));
    splitmix(h ^ (j as u64).rotate_left(32))
}

impl GroundTexture {
    pub fn cell_value(&self, i: i64, j: i64) -> f64 {
        (cell_hash(self.seed, i, j) >> 11) as f64 / ((1u64 << 53) - 1) as f64
    }

    fn in_blank(&self, x: f64, y: f64) -> bool {
        self.blank
            .is_some_and(|[x0, y0, x1, y1]| x >= x0 && x <= x1 && y >= y0 && y <= y1)
    }

    /// Intensity of the ground point `(x, y)` in meters.
    pub fn texture_at(&self, x: f64, y: f64) -> f64 {
        if self.in_blank(x, y) {
            return 0.5;
        }
        let i = (x / self.cell_size).floor() as i64;
        let j = (y / self.cell_size).floor() as i64;
        self.cell_value(i, j)
    }
}

pub fn texture_at(tex: &GroundTexture, x: f64, y: f64) -> f64 {
    tex.texture_at(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    /// World position, meters.
    pub pos: [f64; 2],
    /// World velocity, m/s.
    pub vel: [f64; 2],
    /// Actual attitude `[roll, pitch]`, radians.
    pub tilt: [f64; 2],
    pub yaw: f64,
    pub t: f64,
}

impl VehicleState {
    pub fn at(pos: [f64; 2]) -> Self {
        Self {
            pos,
            ..Self::default()
        }
    }
}

/// Ground point seen at pixel `p` from `vehicle`.
pub fn pixel_to_world(p: Point, vehicle: &VehicleState, cfg: &SimConfig) -> [f64; 2] {
    let c = CenterConvention::Integer.center(cfg.image_width, cfg.image_height);
    let gsd = cfg.gsd();
    let (bx, by) = ((p.x - c.x) * gsd, (p.y - c.y) * gsd);
    let (s, co) = vehicle.yaw.sin_cos();
    [
        vehicle.pos[0] + co * bx - s * by,
        vehicle.pos[1] + s * bx + co * by,
    ]
}

/// Noise-free nadir view. Each pixel is the area average of the texture over
/// its ground footprint, approximated by a world-aligned square of side one
/// ground sample distance.
pub fn render_clean(tex: &GroundTexture, vehicle: &VehicleState, cfg: &SimConfig) -> GrayImage {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let c = CenterConvention::Integer.center(w, h);
    let gsd = cfg.gsd();
    let half = 0.5 * gsd;
    let cs = tex.cell_size;
    let (sin, cos) = vehicle.yaw.sin_cos();

    // Cache the cell values covering the frame.
    let corners = [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)];
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (u, v) in corners {
        let p = pixel_to_world(Point::new(u - 0.5, v - 0.5), vehicle, cfg);
        xmin = xmin.min(p[0]);
        xmax = xmax.max(p[0]);
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    let i0 = ((xmin - gsd) / cs).floor() as i64 - 1;
    let i1 = ((xmax + gsd) / cs).floor() as i64 + 1;
    let j0 = ((ymin - gsd) / cs).floor() as i64 - 1;
    let j1 = ((ymax + gsd) / cs).floor() as i64 + 1;
    let gw = (i1 - i0 + 1) as usize;
    let gh = (j1 - j0 + 1) as usize;
    let mut grid = Vec::with_capacity(gw * gh);
    for j in j0..=j1 {
        for i in i0..=i1 {
            grid.push(tex.cell_value(i, j));
        }
    }
    let cell = |i: i64, j: i64| grid[(j - j0) as usize * gw + (i - i0) as usize];

    // Coverage of [lo, lo + 2*half] split at the cell boundary it straddles.
    let split = |lo: f64| -> (i64, f64) {
        let a = (lo / cs).floor();
        let boundary = (a + 1.0) * cs;
        let w0 = ((boundary - lo) / (2.0 * half)).min(1.0);
        (a as i64, w0)
    };

    let mut data = Vec::with_capacity(w * h);
    if vehicle.yaw == 0.0 && tex.blank.is_none() {
        // Footprints are separable: one split per column and per row.
        let cols: Vec<(usize, f64)> = (0..w)
            .map(|u| {
                let (ia, wx) = split(vehicle.pos[0] + (u as f64 - c.x) * gsd - half);
                ((ia - i0) as usize, wx)
            })
            .collect();
        for v in 0..h {
            let (ja, wy) = split(vehicle.pos[1] + (v as f64 - c.y) * gsd - half);
            let r0 = &grid[(ja - j0) as usize * gw..];
            let r1 = &r0[gw..];
            for &(i, wx) in &cols {
                let top = wx * r0[i] + (1.0 - wx) * r0[i + 1];
                let bottom = wx * r1[i] + (1.0 - wx) * r1[i + 1];
                data.push((wy * top + (1.0 - wy) * bottom).clamp(0.0, 1.0));
            }
        }
        return GrayImage::from_raw(w, h, data);
    }
    for v in 0..h {
        let by = (v as f64 - c.y) * gsd;
        for u in 0..w {
            let bx = (u as f64 - c.x) * gsd;
            let x = vehicle.pos[0] + cos * bx - sin * by;
            let y = vehicle.pos[1] + sin * bx + cos * by;
            if tex.in_blank(x, y) {
                data.push(0.5);
                continue;
            }
            let (ia, wx) = split(x - half);
            let (ja, wy) = split(y - half);
            let top = wx * cell(ia, ja) + (1.0 - wx) * cell(ia + 1, ja);
            let bottom = wx * cell(ia, ja + 1) + (1.0 - wx) * cell(ia + 1, ja + 1);
            data.push((wy * top + (1.0 - wy) * bottom).clamp(0.0, 1.0));
        }
    }
    GrayImage::from_raw(w, h, data)
}

/// `i' = clamp(gain * i + noise, 0, 1)`; identity when gain is 1 and noise 0.
pub fn apply_lowlight(image: &GrayImage, lowlight: &LowLight, rng: &mut ChaCha8Rng) -> GrayImage {
    if lowlight.gain == 1.0 && lowlight.noise == 0.0 {
        return image.clone();
    }
    let data = image
        .data()
        .iter()
        .map(|&i| {
            let eta = if lowlight.noise > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                lowlight.noise * z
            } else {
                0.0
            };
            (lowlight.gain * i + eta).clamp(0.0, 1.0)
        })
        .collect();
    GrayImage::from_raw(image.width(), image.height(), data)
}

pub fn render_frame(
    tex: &GroundTexture,
    vehicle: &VehicleState,
    cfg: &SimConfig,
    noise_rng: &mut ChaCha8Rng,
) -> GrayImage {
    apply_lowlight(&render_clean(tex, vehicle, cfg), &cfg.lowlight, noise_rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WindState {
    /// World-frame disturbance acceleration, m/s^2.
    pub accel: [f64; 2],
}

pub fn wind_step(w: &WindState, params: &WindParams, dt: f64, rng: &mut ChaCha8Rng) -> WindState {
    let mut accel = w.accel;
    let scale = params.sigma * dt.sqrt();
    for a in accel.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *a += params.rate * (0.0 - *a) * dt + scale * z;
    }
    WindState { accel }
}

/// One semi-implicit Euler step. Altitude is held, so only the horizontal
/// state evolves.
pub fn step_dynamics(
    v: &VehicleState,
    cmd: &AttitudeCommand,
    wind: &WindState,
    cfg: &SimConfig,
    dt: f64,
) -> VehicleState {
    let target = [
        cmd.roll.clamp(-cfg.max_tilt, cfg.max_tilt),
        cmd.pitch.clamp(-cfg.max_tilt, cfg.max_tilt),
    ];
    let k = dt / cfg.tilt_tau;
    let tilt = [
        v.tilt[0] + (target[0] - v.tilt[0]) * k,
        v.tilt[1] + (target[1] - v.tilt[1]) * k,
    ];
    let body = [cfg.gravity * tilt[0].tan(), cfg.gravity * tilt[1].tan()];
    let (s, c) = v.yaw.sin_cos();
    let thrust = [c * body[0] - s * body[1], s * body[0] + c * body[1]];
    let mut vel = v.vel;
    let mut pos = v.pos;
    for a in 0..2 {
        let accel = thrust[a] + wind.accel[a] - cfg.drag_coeff * v.vel[a];
        vel[a] += accel * dt;
        pos[a] += vel[a] * dt;
    }
    VehicleState {
        pos,
        vel,
        tilt,
        yaw: v.yaw + cfg.yaw_rate * dt,
        t: v.t + dt,
    }
}

/// One generator per concern so toggling one disturbance leaves the others'
/// sequences untouched.
pub fn stream(seed: u64, concern: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(concern);
    rng
}

const WIND_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Feature set detected at one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub t: f64,
    pub generation: u32,
    pub roi: Rect,
    pub positions: Vec<Point>,
}

#[derive(Debug, Clone)]
pub struct Telemetry {
    pub records: Vec<FrameRecord>,
    /// Where the vehicle started.
    pub start: [f64; 2],
    /// Ground point under the first best feature; `None` if the first frame was blind.
    pub anchor: Option<[f64; 2]>,
    pub acquisitions: Vec<Acquisition>,
    /// Controller state after the last frame.
    pub controller: PositionHold,
}

/// Picks the start position so the hold point the tracker will choose lies at
/// `-initial_offset` from it. The hold point is the ground under the best
/// feature; starting from the origin, the view is re-centered on successive
/// best features until the best one no longer changes.
pub fn resolve_start(cfg: &SimConfig, tracker_cfg: &TrackerConfig) -> Result<[f64; 2], SimError> {
    let tex = cfg.texture();
    let off = cfg.initial_offset;
    let gsd = cfg.gsd();
    let mut anchor = [0.0, 0.0];
    for _ in 0..32 {
        let start = [anchor[0] + off[0], anchor[1] + off[1]];
        let v = VehicleState::at(start);
        let state = acquire(&render_clean(&tex, &v, cfg), tracker_cfg)?;
        let Some(best) = state.best() else {
            return Ok(start);
        };
        let b = pixel_to_world(best.position, &v, cfg);
        if (b[0] - anchor[0]).hypot(b[1] - anchor[1]) < 1.5 * gsd {
            return Ok(start);
        }
        anchor = b;
    }
    Ok([anchor[0] + off[0], anchor[1] + off[1]])
}

pub fn run_episode(
    cfg: &SimConfig,
    gains: &AxisGains,
    tracker_cfg: &TrackerConfig,
) -> Result<Telemetry, SimError> {
    cfg.validate()?;
    tracker_cfg.validate()?;
    for (name, g) in [("gains.roll", &gains.roll), ("gains.pitch", &gains.pitch)] {
        g.validate().map_err(|m| config_err(name, m))?;
    }
    let substeps = cfg.substeps()?;
    let frames = cfg.frame_count();
    let dt_cam = cfg.frame_interval();
    let (w, h) = (cfg.image_width, cfg.image_height);
    let roi = center_roi(w, h)?;
    let tex = cfg.texture();

    let start = resolve_start(cfg, tracker_cfg)?;
    let mut vehicle = VehicleState::at(start);
    let mut wind = WindState::default();
    let mut wind_rng = stream(cfg.seed, WIND_STREAM);
    let mut noise_rng = stream(cfg.seed, NOISE_STREAM);
    let mut ctrl = PositionHold::new(*gains);

    let mut records = Vec::with_capacity(frames);
    let mut acquisitions = Vec::new();
    let mut anchor = None;
    let mut tracker: Option<(TrackerState, crate::flow::Pyramid)> = None;

    for k in 0..frames {
        let t = k as f64 / cfg.camera_rate;
        vehicle.t = t;
        let image = render_frame(&tex, &vehicle, cfg, &mut noise_rng);
        let pyramid = build_pyramid(&image, tracker_cfg.lk.pyramid_levels);

        let (state, events, prev_best) = match tracker.take() {
            None => {
                let state = acquire(&image, tracker_cfg)?;
                if let Some(best) = state.best() {
                    anchor = Some(pixel_to_world(best.position, &vehicle, cfg));
                }
                acquisitions.push(Acquisition {
                    t,
                    generation: state.generation,
                    roi,
                    positions: state.features.iter().map(|f| f.position).collect(),
                });
                (state, Vec::new(), None)
            }
            Some((prev_state, prev_pyr)) => {
                let (state, events) = advance_pyramids(&prev_state, &prev_pyr, &pyramid, tracker_cfg)?;
                if events.iter().any(|e| matches!(e, TrackerEvent::Reacquired { .. })) {
                    acquisitions.push(Acquisition {
                        t,
                        generation: state.generation,
                        roi,
                        positions: state.features.iter().map(|f| f.position).collect(),
                    });
                }
                (state, events, prev_state.best_id)
            }
        };

        if state.best_id != prev_best {
            ctrl.reset_derivative();
        }
        let disp = best_displacement(&state, w, h);
        let cmd = ctrl.step(disp.as_ref(), dt_cam)?;

        let flags = EventFlags {
            reacquired: events.iter().any(|e| matches!(e, TrackerEvent::Reacquired { .. })),
            feature_lost: events.iter().any(|e| matches!(e, TrackerEvent::FeatureLost { .. })),
            blind: state.blind,
        };
        records.push(FrameRecord {
            t,
            pos_x: vehicle.pos[0],
            pos_y: vehicle.pos[1],
            vel_x: vehicle.vel[0],
            vel_y: vehicle.vel[1],
            disp: disp.map(|d| [d.x, d.y, d.d]),
            cmd_roll: cmd.roll,
            cmd_pitch: cmd.pitch,
            n_alive: state.alive_count() as u32,
            generation: state.generation,
            events: flags,
        });

        if k + 1 < frames {
            for _ in 0..substeps {
                wind = wind_step(&wind, &cfg.wind, cfg.physics_dt, &mut wind_rng);
                vehicle = step_dynamics(&vehicle, &cmd, &wind, cfg, cfg.physics_dt);
            }
        }
        tracker = Some((state, pyramid));
    }

    Ok(Telemetry {
        records,
        start,
        anchor,
        acquisitions,
        controller: ctrl,
    })
}
