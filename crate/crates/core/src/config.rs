//! Run configuration: defaults, named presets, JSON files and dotted
//! `section.field=value` overrides, layered in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::control::AxisGains;
use crate::corners::DetectParams;
use crate::flow::LkParams;
use crate::sim::{run_episode, SimConfig, SimError, Telemetry};
use crate::telemetry::{
    dispersion_stats, parse_csv, write_csv, write_summary_json, ConfigDigest, DispersionReport,
    TelemetryError,
};
use crate::tracker::TrackerConfig;

pub const PRESET_NAMES: [&str; 5] = ["calm", "outdoor", "indoor", "lowlight", "blind"];

pub fn preset_json(name: &str) -> Option<&'static str> {
    Some(match name {
        "calm" => include_str!("../presets/calm.json"),
        "outdoor" => include_str!("../presets/outdoor.json"),
        "indoor" => include_str!("../presets/indoor.json"),
        "lowlight" => include_str!("../presets/lowlight.json"),
        "blind" => include_str!("../presets/blind.json"),
        _ => return None,
    })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {message}")]
    Io { path: String, message: String },
    #[error("{source_name} is not valid JSON: {message}")]
    Json { source_name: String, message: String },
    #[error("unknown preset `{0}` (known: calm, outdoor, indoor, lowlight, blind)")]
    UnknownPreset(String),
    #[error("override `{0}` must look like section.field=value")]
    BadOverride(String),
    #[error("invalid config field `{field}`: {message}")]
    Field { field: String, message: String },
}

impl From<SimError> for ConfigError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config { field, message } => ConfigError::Field { field, message },
            other => ConfigError::Field {
                field: "sim".into(),
                message: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

/// Everything one simulated flight produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub telemetry: Telemetry,
    pub csv: String,
    pub report: DispersionReport,
    pub summary_json: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    /// Re-acquire when fewer features than this survive.
    pub min_alive: usize,
}

impl Default for TrackerSection {
    fn default() -> Self {
        Self {
            min_alive: TrackerConfig::default().min_alive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub sim: SimConfig,
    pub gains: AxisGains,
    pub tracker: TrackerSection,
    pub detect: DetectParams,
    pub lk: LkParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            sim: SimConfig::default(),
            gains: AxisGains::default(),
            tracker: TrackerSection::default(),
            detect: DetectParams::default(),
            lk: LkParams::default(),
        }
    }
}

impl RunConfig {
    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            detect: self.detect,
            lk: self.lk,
            min_alive: self.tracker.min_alive,
        }
    }

    pub fn digest(&self) -> ConfigDigest {
        ConfigDigest {
            preset: self.preset.clone(),
            seed: self.sim.seed,
            texture_seed: self.sim.texture_seed,
        }
    }

    /// Flies one episode. The summary is computed from the CSV as written, so
    /// re-reading `csv` reproduces `summary_json` exactly.
    pub fn run(&self) -> Result<RunArtifacts, RunError> {
        let telemetry = run_episode(&self.sim, &self.gains, &self.tracker_config())?;
        let csv = write_csv(&telemetry.records);
        let records = parse_csv(&csv)?;
        let report = dispersion_stats(&records, self.sim.settle_time, self.sim.frame_size_cm)?;
        let summary_json = write_summary_json(&report, &self.digest());
        Ok(RunArtifacts {
            telemetry,
            csv,
            report,
            summary_json,
        })
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        ConfigLayers::new().preset(name)?.build()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim.validate()?;
        for (field, g) in [("gains.roll", &self.gains.roll), ("gains.pitch", &self.gains.pitch)] {
            g.validate().map_err(|m| field_err(field, m))?;
        }
        self.detect
            .validate()
            .map_err(|e| field_err("detect", e.to_string()))?;
        self.lk.validate().map_err(|e| field_err("lk", e.to_string()))?;
        if self.tracker.min_alive == 0 {
            return Err(field_err("tracker.min_alive", "must be at least 1"));
        }
        if self.tracker.min_alive > self.detect.max_corners {
            return Err(field_err(
                "tracker.min_alive",
                "must not exceed detect.max_corners",
            ));
        }
        Ok(())
    }
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

/// Accumulates configuration layers as JSON before a single typed decode.
#[derive(Debug, Clone, Default)]
pub struct ConfigLayers {
    value: Map<String, Value>,
}

impl ConfigLayers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn preset(mut self, name: &str) -> Result<Self, ConfigError> {
        let text = preset_json(name).ok_or_else(|| ConfigError::UnknownPreset(name.into()))?;
        let layer = parse_object(text, &format!("preset {name}"))?;
        merge(&mut self.value, layer);
        self.value.insert("preset".into(), Value::String(name.into()));
        Ok(self)
    }

    /// Merges a JSON object. A top-level `preset` key selects the base preset,
    /// which is applied underneath the object.
    pub fn json(mut self, text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let layer = parse_object(text, source_name)?;
        if let Some(name) = layer.get("preset") {
            let name = name
                .as_str()
                .ok_or_else(|| field_err("preset", "must be a string"))?;
            if name != "default" {
                self = self.preset(name)?;
            }
        }
        merge(&mut self.value, layer);
        Ok(self)
    }

    pub fn file(self, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.json(&text, &path.display().to_string())
    }

    /// `sim.wind.sigma=0.3`; the value is JSON if it parses, a string otherwise.
    pub fn set(mut self, assignment: &str) -> Result<Self, ConfigError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(assignment.into()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(ConfigError::BadOverride(assignment.into()));
        }
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.into()));
        let mut layer = value;
        for key in keys.iter().rev() {
            let mut obj = Map::new();
            obj.insert((*key).to_string(), layer);
            layer = Value::Object(obj);
        }
        if let Value::Object(obj) = layer {
            merge(&mut self.value, obj);
        }
        Ok(self)
    }

    pub fn build(self) -> Result<RunConfig, ConfigError> {
        let value = Value::Object(self.value);
        let config: RunConfig =
            serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Field {
                field: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }
}

fn parse_object(text: &str, source_name: &str) -> Result<Map<String, Value>, ConfigError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err(ConfigError::Json {
            source_name: source_name.into(),
            message: "top level must be an object".into(),
        }),
        Err(e) => Err(ConfigError::Json {
            source_name: source_name.into(),
            message: e.to_string(),
        }),
    }
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Map<String, Value>, layer: Map<String, Value>) {
    for (key, value) in layer {
        match (base.get_mut(&key), value) {
            (Some(Value::Object(dst)), Value::Object(src)) => merge(dst, src),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let d = RunConfig::default();
        let text = serde_json::to_string(&d).unwrap();
        let back = ConfigLayers::new().json(&text, "x").unwrap().build().unwrap();
        assert_eq!(back, d);
        assert_eq!(ConfigLayers::new().build().unwrap(), d);
    }

    #[test]
    fn every_preset_loads() {
        for name in PRESET_NAMES {
            let c = RunConfig::preset(name).unwrap();
            assert_eq!(c.preset, name);
        }
        assert!(RunConfig::preset("blind").unwrap().sim.blank_ground);
        assert_eq!(RunConfig::preset("lowlight").unwrap().sim.lowlight.gain, 0.25);
        assert_eq!(RunConfig::preset("calm").unwrap().sim.wind.sigma, 0.0);
    }

    #[test]
    fn later_layers_win() {
        let c = ConfigLayers::new()
            .preset("outdoor")
            .unwrap()
            .json(r#"{"sim": {"duration": 12.0}}"#, "file")
            .unwrap()
            .set("sim.duration=3")
            .unwrap()
            .set("gains.roll.kp=0.001")
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(c.sim.duration, 3.0);
        assert_eq!(c.gains.roll.kp, 0.001);
        assert_eq!(c.gains.pitch, AxisGains::default().pitch);
        assert_eq!(c.sim.wind, RunConfig::preset("outdoor").unwrap().sim.wind);
    }

    #[test]
    fn file_preset_key_is_the_base() {
        let c = ConfigLayers::new()
            .json(r#"{"preset": "indoor", "sim": {"seed": 9}}"#, "f")
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(c.preset, "indoor");
        assert_eq!(c.sim.seed, 9);
        assert_eq!(c.sim.wind, RunConfig::preset("indoor").unwrap().sim.wind);
    }

    #[test]
    fn errors_are_field_precise() {
        let err = ConfigLayers::new().set("sim.wind.sigmaa=1").unwrap().build().unwrap_err();
        match err {
            ConfigError::Field { field, .. } => assert_eq!(field, "sim.wind.sigmaa"),
            other => panic!("{other:?}"),
        }
        let err = ConfigLayers::new().set("sim.altitude=\"high\"").unwrap().build().unwrap_err();
        assert!(matches!(err, ConfigError::Field { ref field, .. } if field == "sim.altitude"), "{err:?}");
        let err = ConfigLayers::new().set("sim.camera_rate=-1").unwrap().build().unwrap_err();
        assert!(matches!(err, ConfigError::Field { ref field, .. } if field == "sim.camera_rate"));
        let err = ConfigLayers::new().set("gains.pitch.out_limit=0").unwrap().build().unwrap_err();
        assert!(matches!(err, ConfigError::Field { ref field, .. } if field == "gains.pitch"));
        assert!(matches!(ConfigLayers::new().set("nonsense"), Err(ConfigError::BadOverride(_))));
        assert!(matches!(ConfigLayers::new().preset("stormy"), Err(ConfigError::UnknownPreset(_))));
        assert!(matches!(ConfigLayers::new().json("[1]", "f"), Err(ConfigError::Json { .. })));
        let missing = ConfigLayers::new().file(Path::new("/nonexistent/run.json")).unwrap_err();
        assert!(missing.to_string().contains("/nonexistent/run.json"));
    }
}
