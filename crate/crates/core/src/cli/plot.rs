//! Plot data: a CSV of raw values and a static SVG rendering per kind.
//!
//! Every CSV number is copied from an input file, except the radar axes,
//! which are normalized as `knn_acc`, `auroc`, `1 - fpr95` and
//! `1 / (1 + gram_score)` with the score taken from the first head's
//! small-side Gram.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{small_side, DensityEntry, EvalReport, HISTORY_FILE};
use super::CliError;
use crate::distill::TrainHistory;
use crate::heads::HeadParams;
use crate::metrics::gram_density_data;
use crate::synthdata::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    GramDensity,
    Radar,
    LossCurves,
}

impl PlotKind {
    pub fn file_stem(&self) -> &'static str {
        match self {
            PlotKind::GramDensity => "gram_density",
            PlotKind::Radar => "radar",
            PlotKind::LossCurves => "loss_curves",
        }
    }
}

/// CSV text and SVG text of one plot.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    pub csv: String,
    pub svg: String,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::runtime(format!("reading {}", path.display()), e))
}

pub fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::runtime(format!("parsing report {}", path.display()), e))
}

fn is_report(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// Label for a file: the report's variant, or the enclosing directory name.
fn series_name(path: &Path) -> String {
    path.parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0}" height="{H:.0}" viewBox="0 0 {W:.0} {H:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    s
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - 170.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            W - 155.0,
            y,
            escape(n)
        );
    }
}

/// Axis frame with tick labels at both ends of each range.
fn axes(s: &mut String, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (MARGIN, W - 190.0, H - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{x0:.1} {y1:.1} L{x0:.1} {y0:.1} L{x1:.1} {y0:.1}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, y0 + 16.0, x.0);
    let _ = writeln!(s, r#"<text x="{x1:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, y0 + 16.0, x.1);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y0, y.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y1 + 4.0, y.1);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 14.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn to_px(v: f64, range: (f64, f64), lo: f64, hi: f64) -> f64 {
    let span = range.1 - range.0;
    if span <= 0.0 {
        (lo + hi) / 2.0
    } else {
        lo + (v - range.0) / span * (hi - lo)
    }
}

fn polyline(s: &mut String, pts: &[(f64, f64)], color: &str, dash: bool) {
    if pts.is_empty() {
        return;
    }
    let mut d = String::new();
    for (i, (x, y)) in pts.iter().enumerate() {
        let _ = write!(d, "{}{x:.2} {y:.2} ", if i == 0 { "M" } else { "L" });
    }
    let dash = if dash { r#" stroke-dasharray="5 3""# } else { "" };
    let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, d.trim_end());
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// Gaussian kernel density with Silverman's bandwidth (floored at 1e-3).
fn kde(values: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let bw = (1.06 * sd * n.powf(-0.2)).max(1e-3);
    let norm = 1.0 / (n * bw * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|g| values.iter().map(|v| (-0.5 * ((g - v) / bw).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

fn density_entries(path: &Path) -> Result<(String, Vec<DensityEntry>), CliError> {
    if path.extension().is_some_and(|e| e == "ckpt") {
        let ck = Checkpoint::read(path).map_err(|e| CliError::runtime(format!("reading {}", path.display()), e))?;
        let head = HeadParams::from_checkpoint(&ck).map_err(|e| CliError::runtime(format!("loading head {}", path.display()), e))?;
        let (r, c) = (head.weight.shape()[0], head.weight.shape()[1]);
        let d = gram_density_data(&head.weight, small_side(r, c)).map_err(|e| CliError::runtime("Gram density", e))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok((
            series_name(path),
            vec![DensityEntry {
                head: name,
                side: d.side,
                diagonal: d.diagonal,
                off_diagonal: d.off_diagonal,
            }],
        ));
    }
    let r = read_report(path)?;
    Ok((r.variant, r.gram_density))
}

/// Diagonal and off-diagonal entries of the scaled Gram of each head. Accepts
/// reports and head checkpoints (`.ckpt`).
pub fn gram_density(paths: &[PathBuf]) -> Result<PlotData, CliError> {
    let mut csv = String::from("series,head,side,part,value\n");
    let mut curves: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for p in paths {
        let (series, entries) = density_entries(p)?;
        for e in entries {
            let side = serde_json::to_value(e.side).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            for (part, vals) in [("diagonal", &e.diagonal), ("off_diagonal", &e.off_diagonal)] {
                for v in vals.iter() {
                    let _ = writeln!(csv, "{},{},{side},{part},{v}", csv_field(&series), csv_field(&e.head));
                }
            }
            curves.push((format!("{series}/{}", e.head), e.diagonal, e.off_diagonal));
        }
    }
    let xr = extent(curves.iter().flat_map(|(_, d, o)| d.iter().chain(o.iter()).copied()));
    let xr = (xr.0.min(0.0) - 0.1, xr.1.max(1.0) + 0.1);
    let grid: Vec<f64> = (0..=200).map(|i| xr.0 + (xr.1 - xr.0) * i as f64 / 200.0).collect();
    let dens: Vec<(Vec<f64>, Vec<f64>)> = curves
        .iter()
        .map(|(_, d, o)| {
            let f = |v: &Vec<f64>| if v.is_empty() { vec![0.0; grid.len()] } else { kde(v, &grid) };
            (f(d), f(o))
        })
        .collect();
    let ymax = dens.iter().flat_map(|(a, b)| a.iter().chain(b)).fold(0.0f64, |m, v| m.max(*v)).max(1e-12);
    let mut svg = svg_open("Scaled Gram entries (solid: diagonal, dashed: off-diagonal)");
    axes(&mut svg, xr, (0.0, ymax), "entry value", "density");
    for (i, (d, o)) in dens.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (ys, dash) in [(d, false), (o, true)] {
            let pts: Vec<(f64, f64)> = grid
                .iter()
                .zip(ys)
                .map(|(x, y)| (to_px(*x, xr, MARGIN, W - 190.0), to_px(*y, (0.0, ymax), H - MARGIN, MARGIN)))
                .collect();
            polyline(&mut svg, &pts, color, dash);
        }
    }
    legend(&mut svg, &curves.iter().map(|c| c.0.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    Ok(PlotData { csv, svg })
}

pub const RADAR_AXES: [&str; 4] = ["knn_acc", "auroc", "one_minus_fpr95", "inv_gram"];

/// Radar axis values of a report, each in `[0, 1]` for valid reports.
pub fn radar_axes(r: &EvalReport) -> Result<[f64; 4], CliError> {
    let score = r
        .primary_gram_score()
        .ok_or_else(|| CliError::Runtime(format!("report for {} has no orthogonality entries", r.variant)))?;
    Ok([r.knn.accuracy, r.ood.auroc, 1.0 - r.ood.fpr95, 1.0 / (1.0 + score)])
}

pub fn radar(paths: &[PathBuf]) -> Result<PlotData, CliError> {
    let mut csv = format!("series,{}\n", RADAR_AXES.join(","));
    let mut polys = Vec::new();
    for p in paths {
        let r = read_report(p)?;
        let a = radar_axes(&r)?;
        let _ = writeln!(csv, "{},{},{},{},{}", csv_field(&r.variant), a[0], a[1], a[2], a[3]);
        polys.push((r.variant, a));
    }
    let (cx, cy, rad) = ((W - 190.0 + MARGIN) / 2.0, H / 2.0 + 10.0, 150.0);
    let angle = |k: usize| -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::FRAC_PI_2;
    let mut svg = svg_open("Radar comparison");
    for ring in [0.25, 0.5, 0.75, 1.0] {
        let pts: Vec<String> = (0..4)
            .map(|k| format!("{:.2},{:.2}", cx + rad * ring * angle(k).cos(), cy + rad * ring * angle(k).sin()))
            .collect();
        let _ = writeln!(svg, r##"<polygon points="{}" fill="none" stroke="#cccccc"/>"##, pts.join(" "));
    }
    for (k, name) in RADAR_AXES.iter().enumerate() {
        let (ex, ey) = (cx + rad * angle(k).cos(), cy + rad * angle(k).sin());
        let _ = writeln!(svg, r##"<line x1="{cx:.2}" y1="{cy:.2}" x2="{ex:.2}" y2="{ey:.2}" stroke="#999999"/>"##);
        let (lx, ly) = (cx + (rad + 18.0) * angle(k).cos(), cy + (rad + 18.0) * angle(k).sin() + 4.0);
        let _ = writeln!(svg, r#"<text x="{lx:.2}" y="{ly:.2}" text-anchor="middle">{name}</text>"#);
    }
    for (i, (_, a)) in polys.iter().enumerate() {
        let pts: Vec<String> = a
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let v = v.clamp(0.0, 1.0);
                format!("{:.2},{:.2}", cx + rad * v * angle(k).cos(), cy + rad * v * angle(k).sin())
            })
            .collect();
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{c}" fill-opacity="0.15" stroke="{c}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }
    legend(&mut svg, &polys.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    Ok(PlotData { csv, svg })
}

fn history_for(path: &Path) -> Result<(String, TrainHistory), CliError> {
    let (name, hist_path) = if is_report(path) {
        let r = read_report(path)?;
        let file = if r.history.is_empty() { HISTORY_FILE.to_string() } else { r.history };
        (r.variant, path.parent().unwrap_or(Path::new("")).join(file))
    } else {
        (series_name(path), path.to_path_buf())
    };
    let h = TrainHistory::from_jsonl(&read_text(&hist_path)?)
        .map_err(|e| CliError::runtime(format!("parsing history {}", hist_path.display()), e))?;
    Ok((name, h))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-epoch loss components. Accepts history files or reports (whose
/// history sits next to them).
pub fn loss_curves(paths: &[PathBuf]) -> Result<PlotData, CliError> {
    let mut csv = String::from("series,epoch,total,dim_red,student,feature_l2,class_l2\n");
    let mut series = Vec::new();
    for p in paths {
        let (name, h) = history_for(p)?;
        for r in &h.records {
            let l = &r.losses;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                csv_field(&name),
                r.epoch,
                l.total,
                opt(l.dim_red),
                opt(l.student),
                opt(l.feature_l2),
                opt(l.class_l2)
            );
        }
        let pts: Vec<(f64, f64)> = h.records.iter().map(|r| (r.epoch as f64, r.losses.total)).collect();
        series.push((name, pts));
    }
    let xr = extent(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let yr = extent(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let mut svg = svg_open("Training loss");
    axes(&mut svg, xr, yr, "epoch", "total loss");
    for (i, (_, pts)) in series.iter().enumerate() {
        let px: Vec<(f64, f64)> = pts
            .iter()
            .map(|(x, y)| (to_px(*x, xr, MARGIN, W - 190.0), to_px(*y, yr, H - MARGIN, MARGIN)))
            .collect();
        polyline(&mut svg, &px, PALETTE[i % PALETTE.len()], false);
    }
    legend(&mut svg, &series.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    Ok(PlotData { csv, svg })
}

pub fn emit_plot_data(kind: PlotKind, paths: &[PathBuf]) -> Result<PlotData, CliError> {
    if paths.is_empty() {
        return Err(CliError::Runtime("no input files given".into()));
    }
    match kind {
        PlotKind::GramDensity => gram_density(paths),
        PlotKind::Radar => radar(paths),
        PlotKind::LossCurves => loss_curves(paths),
    }
}

/// Writes `<kind>.csv` and `<kind>.svg` into `out_dir`.
pub fn write_plot(kind: PlotKind, paths: &[PathBuf], out_dir: &Path) -> Result<[PathBuf; 2], CliError> {
    let data = emit_plot_data(kind, paths)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::runtime(format!("creating {}", out_dir.display()), e))?;
    let csv = out_dir.join(format!("{}.csv", kind.file_stem()));
    let svg = out_dir.join(format!("{}.svg", kind.file_stem()));
    fs::write(&csv, data.csv).map_err(|e| CliError::runtime(format!("writing {}", csv.display()), e))?;
    fs::write(&svg, data.svg).map_err(|e| CliError::runtime(format!("writing {}", svg.display()), e))?;
    Ok([csv, svg])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_integrates_to_about_one() {
        let grid: Vec<f64> = (0..=2000).map(|i| -5.0 + i as f64 * 0.005).collect();
        let d = kde(&[0.0, 0.5, 1.0], &grid);
        let area: f64 = d.iter().sum::<f64>() * 0.005;
        assert!((area - 1.0).abs() < 1e-3, "{area}");
    }

    #[test]
    fn csv_fields_are_quoted_when_needed() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
