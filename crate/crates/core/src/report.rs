//! Report emission: text table, JSON and a static Dice/IoU trend plot.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::selftrain::IterationMetrics;

pub const PLOT_WIDTH: u32 = 480;
pub const PLOT_HEIGHT: u32 = 320;
const MARGIN: u32 = 40;
const TICK_LEN: u32 = 6;
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const DICE_COLOR: Rgb<u8> = Rgb([200, 30, 30]);
const IOU_COLOR: Rgb<u8> = Rgb([30, 60, 200]);

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub text: PathBuf,
    pub json: PathBuf,
    pub trends_json: PathBuf,
    pub trends_csv: PathBuf,
    pub plot: PathBuf,
}

/// Fixed column order: phase, Dice, IoU, n_selected.
pub fn trend_table(trends: &[IterationMetrics]) -> String {
    let mut out = format!("{:<12} {:>8} {:>8} {:>10}\n", "phase", "Dice", "IoU", "n_selected");
    for row in trends {
        let _ = writeln!(
            out,
            "{:<12} {:>8.2} {:>8.2} {:>10}",
            row.phase, row.mean_dice, row.mean_iou, row.n_selected
        );
    }
    out
}

pub fn trends_csv(trends: &[IterationMetrics]) -> String {
    let mut out = String::from("phase,mean_dice,mean_iou,n_selected\n");
    for row in trends {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{}",
            row.phase, row.mean_dice, row.mean_iou, row.n_selected
        );
    }
    out
}

pub fn report_text(report: &EvalReport, trends: &[IterationMetrics]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run {}  config {}", report.run_id, report.config_hash);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<28} {:>6} {:>8} {:>8}", "split", "n", "Dice %", "IoU %");
    for (name, s) in &report.splits {
        let _ = writeln!(
            out,
            "{:<28} {:>6} {:>8.2} {:>8.2}",
            name, s.count, s.mean_dice_pct, s.mean_iou_pct
        );
    }
    if !trends.is_empty() {
        let _ = writeln!(out);
        out.push_str(&trend_table(trends));
    }
    out
}

/// X pixel positions of the phase ticks.
pub fn tick_positions(count: usize) -> Vec<u32> {
    let span = PLOT_WIDTH - 2 * MARGIN;
    match count {
        0 => Vec::new(),
        1 => vec![MARGIN + span / 2],
        n => (0..n)
            .map(|i| MARGIN + (i as u32 * span) / (n as u32 - 1))
            .collect(),
    }
}

fn y_for(value: f64) -> u32 {
    let span = (PLOT_HEIGHT - 2 * MARGIN) as f64;
    let v = value.clamp(0.0, 100.0) / 100.0;
    PLOT_HEIGHT - MARGIN - (v * span).round() as u32
}

fn line(img: &mut RgbImage, (x0, y0): (u32, u32), (x1, y1): (u32, u32), color: Rgb<u8>) {
    let steps = x0.abs_diff(x1).max(y0.abs_diff(y1)).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 as f64 + (x1 as f64 - x0 as f64) * t).round() as u32;
        let y = (y0 as f64 + (y1 as f64 - y0 as f64) * t).round() as u32;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            if x + dx < img.width() && y + dy < img.height() {
                img.put_pixel(x + dx, y + dy, color);
            }
        }
    }
}

/// Dice (red) and IoU (blue) against phase, y axis 0–100 with ticks every 20.
pub fn render_trend_plot(trends: &[IterationMetrics]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_WIDTH, PLOT_HEIGHT, Rgb([255, 255, 255]));
    let bottom = PLOT_HEIGHT - MARGIN;
    line(&mut img, (MARGIN, MARGIN), (MARGIN, bottom), AXIS);
    line(&mut img, (MARGIN, bottom), (PLOT_WIDTH - MARGIN, bottom), AXIS);
    for v in (0..=100).step_by(20) {
        let y = y_for(v as f64);
        for x in MARGIN - TICK_LEN..MARGIN {
            img.put_pixel(x, y, AXIS);
        }
    }
    let xs = tick_positions(trends.len());
    for &x in &xs {
        for y in bottom + 2..bottom + 2 + TICK_LEN {
            img.put_pixel(x, y, AXIS);
        }
    }
    for (series, color) in [
        (trends.iter().map(|r| r.mean_dice).collect::<Vec<_>>(), DICE_COLOR),
        (trends.iter().map(|r| r.mean_iou).collect::<Vec<_>>(), IOU_COLOR),
    ] {
        let pts: Vec<(u32, u32)> = xs.iter().zip(&series).map(|(&x, &v)| (x, y_for(v))).collect();
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &pts {
            for dx in 0..5u32 {
                for dy in 0..5u32 {
                    let (px, py) = ((x + dx).saturating_sub(2), (y + dy).saturating_sub(2));
                    img.put_pixel(px.min(PLOT_WIDTH - 1), py.min(PLOT_HEIGHT - 1), color);
                }
            }
        }
    }
    img
}

/// Counts the phase tick marks drawn below the x axis of a trend plot.
pub fn count_x_ticks(img: &RgbImage) -> usize {
    let y = PLOT_HEIGHT - MARGIN + 2 + TICK_LEN / 2;
    let mut count = 0;
    let mut inside = false;
    for x in 0..img.width() {
        let dark = *img.get_pixel(x, y) == AXIS;
        if dark && !inside {
            count += 1;
        }
        inside = dark;
    }
    count
}

pub fn emit_report(report: &EvalReport, trends: &[IterationMetrics], out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        text: out_dir.join("report.txt"),
        json: out_dir.join("report.json"),
        trends_json: out_dir.join("trends.json"),
        trends_csv: out_dir.join("trends.csv"),
        plot: out_dir.join("trends.png"),
    };
    let write = |path: &Path, text: String| std::fs::write(path, text).map_err(|e| Error::io(path, e));
    write(&files.text, report_text(report, trends))?;
    write(&files.json, serde_json::to_string_pretty(report)? + "\n")?;
    write(&files.trends_json, serde_json::to_string_pretty(trends)? + "\n")?;
    write(&files.trends_csv, trends_csv(trends))?;
    render_trend_plot(trends)
        .save(&files.plot)
        .map_err(|source| Error::Image {
            path: files.plot.clone(),
            source,
        })?;
    Ok(files)
}
