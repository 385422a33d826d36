//! Vision-based position hold for a quadcopter with a downward camera.
//!
//! The pipeline detects Shi-Tomasi corners in the central part of each frame,
//! tracks them with pyramidal Lucas-Kanade flow, measures how far the best
//! feature sits from the image center and turns that offset into roll and
//! pitch commands with a PID law. [`sim`] closes the loop around a simulated
//! vehicle and rendered ground texture; [`telemetry`] reduces a flight to
//! hover-dispersion statistics.

pub mod config;
pub mod control;
pub mod corners;
pub mod flow;
pub mod imaging;
pub mod sim;
pub mod telemetry;
pub mod tracker;

pub use control::{AttitudeCommand, Displacement, PidGains, PidState, PositionHold};
pub use corners::{detect_corners, response_map, Corner, DetectParams};
pub use flow::{build_pyramid, lk_track, FlowResult, LkParams, Pyramid, TrackStatus};
pub use imaging::{load_pgm, save_pgm, GrayImage, Point, Rect};
pub use tracker::{TrackerConfig, TrackerState};
