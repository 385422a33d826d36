//! Center displacement geometry and the PID position-hold law.
//!
//! Image convention: `x` grows to the right and `y` grows downward, so a
//! feature left of center has negative `x` and one in the upper half has
//! negative `y`. The roll axis regulates `x`, the pitch axis regulates `y`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Point;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("feature ({x}, {y}) outside {width}x{height} image")]
    FeatureOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
}

/// Which pixel is taken as the image center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterConvention {
    /// `(w/2, h/2)`: (320, 240) for a 640x480 frame.
    #[default]
    Integer,
    /// `((w-1)/2, (h-1)/2)`: the exact middle of the pixel grid.
    Geometric,
}

impl CenterConvention {
    pub fn center(&self, width: usize, height: usize) -> Point {
        match self {
            CenterConvention::Integer => Point::new((width / 2) as f64, (height / 2) as f64),
            CenterConvention::Geometric => {
                Point::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
            }
        }
    }
}

/// Signed offset of a tracked feature from the image center, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub x: f64,
    pub y: f64,
    pub d: f64,
}

impl Displacement {
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            d: (x * x + y * y).sqrt(),
        }
    }
}

pub fn displacement_from_center(
    feature: Point,
    width: usize,
    height: usize,
) -> Result<Displacement, ControlError> {
    displacement_with_convention(feature, width, height, CenterConvention::Integer)
}

pub fn displacement_with_convention(
    feature: Point,
    width: usize,
    height: usize,
    convention: CenterConvention,
) -> Result<Displacement, ControlError> {
    let inside = feature.x >= 0.0
        && feature.y >= 0.0
        && feature.x <= (width as f64 - 1.0)
        && feature.y <= (height as f64 - 1.0);
    if !inside {
        return Err(ControlError::FeatureOutOfBounds {
            x: feature.x,
            y: feature.y,
            width,
            height,
        });
    }
    let c = convention.center(width, height);
    Ok(Displacement::new(feature.x - c.x, feature.y - c.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    /// rad per pixel
    pub kp: f64,
    /// rad per pixel-second
    pub ki: f64,
    /// rad per pixel/second
    pub kd: f64,
    /// Clamp on the accumulated error, pixel-seconds.
    pub i_limit: f64,
    /// Clamp on the output, radians.
    pub out_limit: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 8e-4,
            ki: 2e-4,
            kd: 9e-4,
            i_limit: 400.0,
            out_limit: 0.2,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<(), &'static str> {
        let finite = [self.kp, self.ki, self.kd, self.i_limit, self.out_limit]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("gains must be finite");
        }
        if self.kp < 0.0 || self.ki < 0.0 || self.kd < 0.0 || self.i_limit < 0.0 {
            return Err("gains and i_limit must be non-negative");
        }
        if self.out_limit <= 0.0 {
            return Err("out_limit must be positive");
        }
        Ok(())
    }
}

/// Per-axis gains; roll regulates image x, pitch regulates image y.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxisGains {
    pub roll: PidGains,
    pub pitch: PidGains,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub primed: bool,
}

/// One discrete PID update: rectangular integral, backward-difference
/// derivative (zero on the first step after construction or reset).
pub fn pid_step(
    gains: &PidGains,
    state: &PidState,
    error: f64,
    dt: f64,
) -> Result<(f64, PidState), ControlError> {
    if !(dt > 0.0) {
        return Err(ControlError::NonPositiveDt(dt));
    }
    let integral = (state.integral + error * dt).clamp(-gains.i_limit, gains.i_limit);
    let derivative = if state.primed {
        (error - state.prev_error) / dt
    } else {
        0.0
    };
    let raw = gains.kp * error + gains.ki * integral + gains.kd * derivative;
    let output = raw.clamp(-gains.out_limit, gains.out_limit);
    Ok((
        output,
        PidState {
            integral,
            prev_error: error,
            primed: true,
        },
    ))
}

pub fn reset_derivative(state: &PidState) -> PidState {
    PidState {
        primed: false,
        ..*state
    }
}

/// Commanded attitude, radians. Positive roll accelerates toward +x of the
/// camera image, positive pitch toward +y.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttitudeCommand {
    pub pitch: f64,
    pub roll: f64,
}

/// Two-axis position-hold controller.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionHold {
    pub gains: AxisGains,
    pub roll: PidState,
    pub pitch: PidState,
}

impl PositionHold {
    pub fn new(gains: AxisGains) -> Self {
        Self {
            gains,
            roll: PidState::default(),
            pitch: PidState::default(),
        }
    }

    /// `None` means blind: neutral command, PID state untouched.
    pub fn step(
        &mut self,
        displacement: Option<&Displacement>,
        dt: f64,
    ) -> Result<AttitudeCommand, ControlError> {
        if !(dt > 0.0) {
            return Err(ControlError::NonPositiveDt(dt));
        }
        let Some(disp) = displacement else {
            return Ok(AttitudeCommand::default());
        };
        let (roll, roll_state) = pid_step(&self.gains.roll, &self.roll, disp.x, dt)?;
        let (pitch, pitch_state) = pid_step(&self.gains.pitch, &self.pitch, disp.y, dt)?;
        self.roll = roll_state;
        self.pitch = pitch_state;
        Ok(AttitudeCommand { pitch, roll })
    }

    /// Called when the tracked feature changes so the setpoint jump does not
    /// produce a derivative kick.
    pub fn reset_derivative(&mut self) {
        self.roll = reset_derivative(&self.roll);
        self.pitch = reset_derivative(&self.pitch);
    }
}

pub fn position_hold_step(
    ctrl: &mut PositionHold,
    displacement: Option<&Displacement>,
    dt: f64,
) -> Result<AttitudeCommand, ControlError> {
    ctrl.step(displacement, dt)
}
