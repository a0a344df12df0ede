//! Plot and artifact emission for finished runs: loss curve, accuracy vs
//! images-per-class, distilled image grid, and the audit histogram.
//!
//! Charts are written as self-contained SVG so runs stay dependency-light
//! and diffs stay reviewable; the image grid is an 8-bit PNG.

use std::path::{Path, PathBuf};

use crate::distill::{DistilledDataset, LogRow};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::eval::{export_images, AuditReport, EvalReport, AUDIT_HISTOGRAM_BINS};

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn chart_header(title: &str) -> String {
    format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" "#,
            r#"viewBox="0 0 {w} {h}" font-family="monospace" font-size="12">"#,
            r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##,
            r#"<text x="{tx}" y="20" text-anchor="middle" font-size="14">{title}</text>"#
        ),
        w = CHART_W,
        h = CHART_H,
        tx = CHART_W / 2.0,
        title = title,
    )
}

fn axes_with_ticks(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> String {
    let mut s = String::new();
    let (x0, y0) = (MARGIN, CHART_H - MARGIN);
    let (x1, y1) = (CHART_W - MARGIN / 2.0, MARGIN / 2.0);
    s.push_str(&format!(
        r##"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#000"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000"/>"##
    ));
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x_min + f * (x_max - x_min);
        let yv = y_min + f * (y_max - y_min);
        let px = x0 + f * (x1 - x0);
        let py = y0 - f * (y0 - y1);
        s.push_str(&format!(
            r##"<line x1="{px}" y1="{y0}" x2="{px}" y2="{t}" stroke="#000"/><text x="{px}" y="{ty}" text-anchor="middle">{lx}</text>"##,
            t = y0 + 4.0,
            ty = y0 + 18.0,
            lx = fmt_tick(xv),
        ));
        s.push_str(&format!(
            r##"<line x1="{t}" y1="{py}" x2="{x0}" y2="{py}" stroke="#000"/><text x="{tx}" y="{tyy}" text-anchor="end">{ly}</text>"##,
            t = x0 - 4.0,
            tx = x0 - 8.0,
            tyy = py + 4.0,
            ly = fmt_tick(yv),
        ));
    }
    s
}

fn to_px(v: f64, lo: f64, hi: f64, p0: f64, p1: f64) -> f64 {
    if hi > lo {
        p0 + (v - lo) / (hi - lo) * (p1 - p0)
    } else {
        (p0 + p1) / 2.0
    }
}

/// Polyline chart over `(x, y)` points; an empty series still renders valid
/// axes.
pub fn line_chart_svg(title: &str, points: &[(f64, f64)]) -> String {
    let mut svg = chart_header(title);
    if points.is_empty() {
        svg.push_str(&axes_with_ticks(0.0, 1.0, 0.0, 1.0));
        svg.push_str("</svg>");
        return svg;
    }
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_min = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (y_min, y_max) = if y_min == y_max {
        (y_min - 0.5, y_max + 0.5)
    } else {
        (y_min, y_max)
    };
    let (x_min, x_max) = if x_min == x_max {
        (x_min - 0.5, x_max + 0.5)
    } else {
        (x_min, x_max)
    };
    svg.push_str(&axes_with_ticks(x_min, x_max, y_min, y_max));
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| {
            format!(
                "{:.2},{:.2}",
                to_px(x, x_min, x_max, MARGIN, CHART_W - MARGIN / 2.0),
                to_px(y, y_min, y_max, CHART_H - MARGIN, MARGIN / 2.0),
            )
        })
        .collect();
    svg.push_str(&format!(
        r##"<polyline points="{}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>"##,
        coords.join(" ")
    ));
    svg.push_str("</svg>");
    svg
}

/// Bar chart over equal-width bins spanning `[0, 1]`.
pub fn histogram_svg(title: &str, counts: &[usize]) -> String {
    let mut svg = chart_header(title);
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    svg.push_str(&axes_with_ticks(0.0, 1.0, 0.0, max));
    let (x0, y0) = (MARGIN, CHART_H - MARGIN);
    let x1 = CHART_W - MARGIN / 2.0;
    let bw = (x1 - x0) / counts.len().max(1) as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = (c as f64 / max) * (y0 - MARGIN / 2.0);
        svg.push_str(&format!(
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#b2561f"/>"##,
            x0 + i as f64 * bw,
            y0 - h,
            bw.max(1.0) - 0.5,
            h,
        ));
    }
    svg.push_str("</svg>");
    svg
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {path:?}"), e))
}

/// Accuracy-vs-IPC table with one row per evaluated setting.
pub fn accuracy_csv(evals: &[(usize, EvalReport)]) -> String {
    let mut out = String::from("ipc,mean_accuracy,std_accuracy,seeds,failed_seeds\n");
    for (ipc, report) in evals {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            ipc,
            report.mean,
            report.std,
            report.per_seed.len(),
            report.failed_seeds
        ));
    }
    out
}

/// De-normalized distilled images tiled class-per-row, one column per IPC.
pub fn grid_png<F: Elem>(dc: &DistilledDataset<F>, path: &Path) -> Result<()> {
    let images = export_images(dc)?;
    let s = images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let rows = dc.class_count();
    let cols = dc.ipc;
    let to_byte = |v: F| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    let at = |img: usize, ch: usize, y: usize, x: usize| {
        images.data()[((img * c + ch) * h + y) * w + x]
    };
    if c == 1 {
        let mut out = image::GrayImage::new((cols * w) as u32, (rows * h) as u32);
        for (img, &label) in dc.labels.iter().enumerate() {
            let col = img % cols.max(1);
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel(
                        (col * w + x) as u32,
                        (label * h + y) as u32,
                        image::Luma([to_byte(at(img, 0, y, x))]),
                    );
                }
            }
        }
        out.save(path)
            .map_err(|e| Error::config(format!("writing {path:?}: {e}")))
    } else {
        let mut out = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
        for (img, &label) in dc.labels.iter().enumerate() {
            let col = img % cols.max(1);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        to_byte(at(img, 0, y, x)),
                        to_byte(at(img, 1.min(c - 1), y, x)),
                        to_byte(at(img, 2.min(c - 1), y, x)),
                    ]);
                    out.put_pixel((col * w + x) as u32, (label * h + y) as u32, px);
                }
            }
        }
        out.save(path)
            .map_err(|e| Error::config(format!("writing {path:?}: {e}")))
    }
}

/// Writes every available artifact into `out_dir`, returning written paths.
pub fn emit_plots<F: Elem>(
    out_dir: &Path,
    loss_log: &[LogRow],
    evals: &[(usize, EvalReport)],
    audit: Option<&AuditReport>,
    distilled: Option<&DistilledDataset<F>>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {out_dir:?}"), e))?;
    let mut written = Vec::new();

    let points: Vec<(f64, f64)> = loss_log
        .iter()
        .map(|r| (r.step as f64, r.loss))
        .collect();
    let path = out_dir.join("loss_curve.svg");
    write_text(&path, &line_chart_svg("matching loss per outer step", &points))?;
    written.push(path);

    if !evals.is_empty() {
        let path = out_dir.join("accuracy_vs_ipc.csv");
        write_text(&path, &accuracy_csv(evals))?;
        written.push(path);
        let pts: Vec<(f64, f64)> = evals
            .iter()
            .map(|(ipc, r)| (*ipc as f64, r.mean))
            .collect();
        let path = out_dir.join("accuracy_vs_ipc.svg");
        write_text(&path, &line_chart_svg("mean test accuracy vs images per class", &pts))?;
        written.push(path);
    }

    if let Some(report) = audit {
        let mut counts = report.histogram.clone();
        counts.resize(AUDIT_HISTOGRAM_BINS, 0);
        let path = out_dir.join("audit_hist.svg");
        write_text(
            &path,
            &histogram_svg("nearest-neighbor distance to training set", &counts),
        )?;
        written.push(path);
    }

    if let Some(dc) = distilled {
        let path = out_dir.join("distilled_grid.png");
        grid_png(dc, &path)?;
        written.push(path);
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussians;
    use crate::distill::{init_distilled, InitMode};
    use crate::eval::SeedResult;

    fn sample_eval(mean: f64) -> EvalReport {
        EvalReport {
            dataset_kind: "distilled".into(),
            per_seed: vec![SeedResult {
                seed: 0,
                accuracy: Some(mean),
                failed: false,
            }],
            mean,
            std: 0.0,
            epochs: 10,
            config_hash: "h".into(),
            failed_seeds: 0,
        }
    }

    #[test]
    fn empty_loss_log_still_renders_valid_axes() {
        let svg = line_chart_svg("loss", &[]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>"));
        assert!(svg.contains("<line"));
    }

    #[test]
    fn grid_png_has_class_rows_and_ipc_columns() {
        let ds = synth_gaussians::<f32>(4, 4, (1, 8, 8), 0.4, 2).unwrap();
        let dc = init_distilled(&ds, 2, InitMode::Noise, 1, "h", None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        grid_png(&dc, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 2 * 8);
        assert_eq!(img.height(), 4 * 8);
    }

    #[test]
    fn accuracy_csv_row_per_setting() {
        let evals = vec![(1usize, sample_eval(0.6)), (5, sample_eval(0.8))];
        let csv = accuracy_csv(&evals);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,0.6"));
        assert!(csv.lines().nth(2).unwrap().starts_with("5,0.8"));
    }

    #[test]
    fn emit_writes_all_artifacts() {
        let ds = synth_gaussians::<f32>(2, 3, (1, 4, 4), 0.4, 3).unwrap();
        let dc = init_distilled(&ds, 1, InitMode::Noise, 1, "h", None).unwrap();
        let audit = crate::eval::audit(&dc, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![LogRow {
            step: 0,
            loss: 1.0,
            alpha: 0.01,
            eval_acc: None,
        }];
        let evals = vec![(1usize, sample_eval(0.7))];
        let written =
            emit_plots(dir.path(), &rows, &evals, Some(&audit), Some(&dc)).unwrap();
        assert_eq!(written.len(), 5);
        for p in written {
            assert!(p.exists(), "{p:?} missing");
        }
    }
}
