use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn flowhold(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowhold"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn write_pgm(path: &Path, w: usize, h: usize, f: impl Fn(usize, usize) -> u8) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.push(f(x, y));
        }
    }
    std::fs::write(path, bytes).unwrap();
}

/// Smooth blob texture shifted right by `dx` pixels.
fn blobs(x: usize, y: usize, dx: f64) -> u8 {
    let (u, v) = (x as f64 - dx, y as f64);
    let s = (u / 7.0).sin() * (v / 9.0).cos() + 0.5 * ((u + v) / 11.0).sin();
    (127.5 + 80.0 * s).round() as u8
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_report_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let run = flowhold(&["simulate", "--preset", "calm", "--duration", "6", "--out", path_str(&out)]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stdout(&run).starts_with("2sigma "));

    let csv = std::fs::read_to_string(out.join("telemetry.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + (6 * 25 + 1));

    let csv_path = out.join("telemetry.csv");
    let report = flowhold(&["report", path_str(&csv_path), "--preset", "calm"]);
    assert!(report.status.success(), "{}", stderr(&report));
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert_eq!(stdout(&report), summary);
}

#[test]
fn simulate_sweep_writes_one_directory_per_seed() {
    let dir = TempDir::new().unwrap();
    let out = dir.path();
    let run = flowhold(&[
        "simulate", "--preset", "calm", "--duration", "1", "--set", "sim.settle_time=0",
        "--seed", "7", "--sweep", "2", "--threads", "2", "--out", path_str(out),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    for seed in [7, 8] {
        assert!(out.join(format!("seed-{seed}")).join("summary.json").is_file());
    }
}

#[test]
fn missing_config_names_the_path() {
    let out = flowhold(&["simulate", "--config", "/nonexistent/flight.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/flight.json"));
}

#[test]
fn bad_field_is_a_usage_error_naming_the_field() {
    let out = flowhold(&["simulate", "--set", "sim.physics_dt=-1", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sim.physics_dt"), "{}", stderr(&out));
}

#[test]
fn corners_on_constant_image_prints_nothing() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("flat.pgm");
    write_pgm(&img, 32, 32, |_, _| 90);
    let out = flowhold(&["corners", path_str(&img)]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "");
}

#[test]
fn corners_find_the_square() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("square.pgm");
    // Square spanning columns and rows 10..=29 of a 64x64 frame.
    write_pgm(&img, 64, 64, |x, y| if (10..30).contains(&x) && (10..30).contains(&y) { 255 } else { 0 });
    let out = flowhold(&["corners", path_str(&img), "--max", "4", "--min-distance", "5"]);
    assert!(out.status.success());
    let mut found: Vec<(i64, i64)> = stdout(&out)
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    found.sort();
    assert_eq!(found.len(), 4);
    for ((x, y), (ex, ey)) in found.iter().zip([(10, 10), (10, 29), (29, 10), (29, 29)]) {
        assert!((x - ex).abs() <= 1 && (y - ey).abs() <= 1, "{found:?}");
    }
}

#[test]
fn corners_outside_center_vanish_with_center_roi() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("edge.pgm");
    write_pgm(&img, 64, 64, |x, y| if x < 8 && y < 8 { 255 } else { 0 });
    let full = flowhold(&["corners", path_str(&img)]);
    assert!(!stdout(&full).is_empty());
    let center = flowhold(&["corners", path_str(&img), "--roi", "center"]);
    assert!(center.status.success());
    assert_eq!(stdout(&center), "");
}

#[test]
fn corners_annotate_writes_pgm() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("square.pgm");
    let marked = dir.path().join("marked.pgm");
    write_pgm(&img, 40, 40, |x, y| if (10..30).contains(&x) && (10..30).contains(&y) { 128 } else { 0 });
    let out = flowhold(&["corners", path_str(&img), "--annotate", path_str(&marked)]);
    assert!(out.status.success());
    let bytes = std::fs::read(&marked).unwrap();
    assert!(bytes.starts_with(b"P5"));
    assert!(bytes.contains(&255));
}

#[test]
fn corners_rejects_malformed_pgm() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("bad.pgm");
    std::fs::write(&img, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
    let out = flowhold(&["corners", path_str(&img)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flow_on_identical_images_is_still() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("a.pgm");
    write_pgm(&img, 200, 200, |x, y| blobs(x, y, 0.0));
    let out = flowhold(&["flow", path_str(&img), path_str(&img), "--point", "100,100"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "100 100 -> 100 100 Tracked 0\n");
}

#[test]
fn flow_recovers_three_pixel_shift() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    write_pgm(&a, 400, 400, |x, y| blobs(x, y, 0.0));
    write_pgm(&b, 400, 400, |x, y| blobs(x, y, 3.0));
    let out = flowhold(&["flow", path_str(&a), path_str(&b), "--auto"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut tracked = 0;
    for line in stdout(&out).lines() {
        let f: Vec<&str> = line.split(' ').collect();
        if f[5] != "Tracked" {
            continue;
        }
        let n = |i: usize| f[i].parse::<f64>().unwrap();
        assert!((n(3) - n(0) - 3.0).abs() < 0.25 && (n(4) - n(1)).abs() < 0.25, "{line}");
        tracked += 1;
    }
    assert!(tracked >= 10, "{}", stdout(&out));
}

#[test]
fn flow_in_flat_region_is_ill_conditioned() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("flat.pgm");
    write_pgm(&img, 100, 100, |_, _| 60);
    let out = flowhold(&["flow", path_str(&img), path_str(&img), "--point", "50,50"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains(" IllConditioned "), "{}", stdout(&out));
}

#[test]
fn flow_size_mismatch_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    write_pgm(&a, 64, 64, |_, _| 0);
    write_pgm(&b, 64, 48, |_, _| 0);
    let out = flowhold(&["flow", path_str(&a), path_str(&b), "--point", "30,30"]);
    assert_eq!(out.status.code(), Some(2));
}

const HEADER: &str =
    "t,pos_x,pos_y,vel_x,vel_y,disp_x,disp_y,disp_d,cmd_roll,cmd_pitch,n_alive,generation,events";

#[test]
fn report_matches_hand_arithmetic() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("hand.csv");
    let body = [
        "0,0,0,0,0,0,0,0,0,0,5,1,reacquired",
        "1,0.02,0,0,0,,,,0,0,0,2,blind",
        "2,0.04,0,0,0,1,0,1,0,0,5,2,",
    ];
    std::fs::write(&csv, format!("{HEADER}\n{}\n", body.join("\n"))).unwrap();
    let out = flowhold(&["report", path_str(&csv), "--settle", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let num = |k: &str| v[k].as_f64().unwrap();
    // x = 0, 0.02, 0.04: mean 0.02, population variance 8e-4 / 3.
    let std_x = (8e-4f64 / 3.0).sqrt();
    assert!((num("mean_x") - 0.02).abs() < 1e-12);
    assert!((num("std_x") - std_x).abs() < 1e-12);
    assert_eq!(num("std_y"), 0.0);
    assert!((num("two_sigma_radial") - 200.0 * std_x).abs() < 1e-9);
    assert!((num("max_excursion") - 2.0).abs() < 1e-9);
    assert!((num("hold_diameter") - (58.0 + 400.0 * std_x)).abs() < 1e-9);
    assert!((num("blind_fraction") - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(v["samples"].as_u64(), Some(3));
}

#[test]
fn report_names_short_row() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("short.csv");
    let rows = ["0,0,0,0,0,0,0,0,0,0,5,1,", "0.04,0,0,0,0,0,0,0,0,0,5,1"];
    std::fs::write(&csv, format!("{HEADER}\n{}\n", rows.join("\n"))).unwrap();
    let out = flowhold(&["report", path_str(&csv), "--settle", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("row 3"), "{}", stderr(&out));
}

#[test]
fn help_lists_defaults() {
    let out = flowhold(&["flow", "--help"]);
    let text = stdout(&out);
    for flag in ["--window-radius", "--levels", "--max-iterations", "--epsilon", "--min-eigen", "--residual-cap"] {
        assert!(text.contains(flag), "{flag} missing");
    }
    assert!(text.contains("[default: 10]"));
    assert!(text.contains("[default: 0.0001]"));

    let out = flowhold(&["corners", "--help"]);
    let text = stdout(&out);
    assert!(text.contains("--quality") && text.contains("[default: 0.05]"), "{text}");

    let out = flowhold(&["simulate", "--help"]);
    let text = stdout(&out);
    assert!(text.contains("[default: out]") && text.contains("[default: 4]"));
}
