//! Per-frame flight records, hover-dispersion statistics and their CSV/JSON
//! encodings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CSV_HEADER: &str =
    "t,pos_x,pos_y,vel_x,vel_y,disp_x,disp_y,disp_d,cmd_roll,cmd_pitch,n_alive,generation,events";
pub const CSV_FIELDS: usize = 13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("need at least {needed} records at t >= {settle_time} s, found {found}")]
    InsufficientRecords {
        needed: usize,
        found: usize,
        settle_time: f64,
    },
    #[error("row {row}: expected {CSV_FIELDS} fields, found {found}")]
    FieldCount { row: usize, found: usize },
    #[error("row {row}, column `{column}`: {message}")]
    Field {
        row: usize,
        column: &'static str,
        message: String,
    },
    #[error("row 1: header does not match the telemetry schema")]
    Header,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventFlags {
    pub reacquired: bool,
    pub feature_lost: bool,
    pub blind: bool,
}

impl EventFlags {
    fn names(&self) -> impl Iterator<Item = &'static str> {
        [
            (self.reacquired, "reacquired"),
            (self.feature_lost, "feature_lost"),
            (self.blind, "blind"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: f64,
    pub pos_x: f64,
    pub pos_y: f64,
    pub vel_x: f64,
    pub vel_y: f64,
    /// `[x, y, d]` in pixels; `None` while blind.
    pub disp: Option<[f64; 3]>,
    pub cmd_roll: f64,
    pub cmd_pitch: f64,
    pub n_alive: u32,
    pub generation: u32,
    pub events: EventFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    /// `2 * sqrt(std_x^2 + std_y^2)`, centimeters.
    pub two_sigma_radial: f64,
    /// Largest distance from the mean position, centimeters.
    pub max_excursion: f64,
    /// Airframe size plus twice the radial 2-sigma, centimeters.
    pub hold_diameter: f64,
    pub settle_time_used: f64,
    pub blind_fraction: f64,
    pub samples: usize,
}

pub fn hold_diameter(two_sigma_radial_cm: f64, frame_size_cm: f64) -> f64 {
    frame_size_cm + 2.0 * two_sigma_radial_cm
}

/// Population statistics over the records at or after `settle_time`.
pub fn dispersion_stats(
    records: &[FrameRecord],
    settle_time: f64,
    frame_size_cm: f64,
) -> Result<DispersionReport, TelemetryError> {
    let post: Vec<&FrameRecord> = records.iter().filter(|r| r.t >= settle_time).collect();
    if post.len() < 2 {
        return Err(TelemetryError::InsufficientRecords {
            needed: 2,
            found: post.len(),
            settle_time,
        });
    }
    let n = post.len() as f64;
    // Offsets from the first sample keep the mean exact for constant input.
    let (x0, y0) = (post[0].pos_x, post[0].pos_y);
    let mean_x = x0 + post.iter().map(|r| r.pos_x - x0).sum::<f64>() / n;
    let mean_y = y0 + post.iter().map(|r| r.pos_y - y0).sum::<f64>() / n;
    let var_x = post.iter().map(|r| (r.pos_x - mean_x).powi(2)).sum::<f64>() / n;
    let var_y = post.iter().map(|r| (r.pos_y - mean_y).powi(2)).sum::<f64>() / n;
    let max_excursion = post
        .iter()
        .map(|r| (r.pos_x - mean_x).hypot(r.pos_y - mean_y))
        .fold(0.0, f64::max);
    let two_sigma_radial = 2.0 * (var_x + var_y).sqrt() * 100.0;
    let blind = post.iter().filter(|r| r.events.blind).count() as f64;
    Ok(DispersionReport {
        mean_x,
        mean_y,
        std_x: var_x.sqrt(),
        std_y: var_y.sqrt(),
        two_sigma_radial,
        max_excursion: max_excursion * 100.0,
        hold_diameter: hold_diameter(two_sigma_radial, frame_size_cm),
        settle_time_used: settle_time,
        blind_fraction: blind / n,
        samples: post.len(),
    })
}

/// `%.9g`: nine significant digits, trailing zeros dropped, exponent form
/// outside `1e-5 <= |v| < 1e9`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, v);
        trim_fraction(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_fraction(mantissa))
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_csv(records: &[FrameRecord]) -> String {
    let mut out = String::with_capacity(CSV_HEADER.len() + 1 + records.len() * 120);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let mut cells: Vec<String> = [r.t, r.pos_x, r.pos_y, r.vel_x, r.vel_y]
            .iter()
            .map(|&v| format_sig9(v))
            .collect();
        match r.disp {
            Some(d) => cells.extend(d.iter().map(|&v| format_sig9(v))),
            None => cells.extend(std::iter::repeat_n(String::new(), 3)),
        }
        cells.push(format_sig9(r.cmd_roll));
        cells.push(format_sig9(r.cmd_pitch));
        cells.push(r.n_alive.to_string());
        cells.push(r.generation.to_string());
        cells.push(r.events.names().collect::<Vec<_>>().join(";"));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

const COLUMNS: [&str; CSV_FIELDS] = [
    "t", "pos_x", "pos_y", "vel_x", "vel_y", "disp_x", "disp_y", "disp_d", "cmd_roll", "cmd_pitch",
    "n_alive", "generation", "events",
];

/// Parses `write_csv` output. Rows are numbered from 1 at the header.
pub fn parse_csv(text: &str) -> Result<Vec<FrameRecord>, TelemetryError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == CSV_HEADER => {}
        _ => return Err(TelemetryError::Header),
    }
    let mut records = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = k + 2;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != CSV_FIELDS {
            return Err(TelemetryError::FieldCount {
                row,
                found: cells.len(),
            });
        }
        let float = |i: usize| -> Result<f64, TelemetryError> {
            cells[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| TelemetryError::Field {
                    row,
                    column: COLUMNS[i],
                    message: format!("`{}` is not a finite number", cells[i]),
                })
        };
        let count = |i: usize| -> Result<u32, TelemetryError> {
            cells[i].parse::<u32>().map_err(|_| TelemetryError::Field {
                row,
                column: COLUMNS[i],
                message: format!("`{}` is not a non-negative integer", cells[i]),
            })
        };
        let disp = match (cells[5].is_empty(), cells[6].is_empty(), cells[7].is_empty()) {
            (true, true, true) => None,
            (false, false, false) => Some([float(5)?, float(6)?, float(7)?]),
            _ => {
                return Err(TelemetryError::Field {
                    row,
                    column: "disp_d",
                    message: "displacement cells must be all present or all empty".into(),
                })
            }
        };
        let mut events = EventFlags::default();
        if !cells[12].is_empty() {
            for name in cells[12].split(';') {
                match name {
                    "reacquired" => events.reacquired = true,
                    "feature_lost" => events.feature_lost = true,
                    "blind" => events.blind = true,
                    other => {
                        return Err(TelemetryError::Field {
                            row,
                            column: "events",
                            message: format!("unknown event `{other}`"),
                        })
                    }
                }
            }
        }
        let record = FrameRecord {
            t: float(0)?,
            pos_x: float(1)?,
            pos_y: float(2)?,
            vel_x: float(3)?,
            vel_y: float(4)?,
            disp,
            cmd_roll: float(8)?,
            cmd_pitch: float(9)?,
            n_alive: count(10)?,
            generation: count(11)?,
            events,
        };
        if let Some(prev) = records.last() {
            let prev: &FrameRecord = prev;
            if record.t <= prev.t {
                return Err(TelemetryError::Field {
                    row,
                    column: "t",
                    message: "time must be strictly increasing".into(),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Identifies the run a summary belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigDigest {
    pub preset: String,
    pub seed: u64,
    pub texture_seed: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    preset: &'a str,
    seed: u64,
    texture_seed: u64,
    #[serde(flatten)]
    report: &'a DispersionReport,
}

pub fn write_summary_json(report: &DispersionReport, digest: &ConfigDigest) -> String {
    let summary = Summary {
        preset: &digest.preset,
        seed: digest.seed,
        texture_seed: digest.texture_seed,
        report,
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    s
}

/// One-line human summary.
pub fn summary_line(report: &DispersionReport) -> String {
    format!(
        "2sigma {:.2} cm, max excursion {:.2} cm, hold diameter {:.2} cm, blind {:.1}% ({} samples after {} s)",
        report.two_sigma_radial,
        report.max_excursion,
        report.hold_diameter,
        report.blind_fraction * 100.0,
        report.samples,
        report.settle_time_used
    )
}
