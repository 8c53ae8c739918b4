//! Plot-ready series emission: one data file per curve plus a self-contained
//! SVG chart per figure kind. No external plotting runtime.
//!
//! Undefined cells (flagged in the metric table) become gaps — empty value
//! fields in the series files and broken polylines in the SVG — never zeros.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analysis::MetricRow;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("empty metric table")]
    Empty,
    #[error("incomplete metric table, missing cells: {}", missing.join("; "))]
    Incomplete { missing: Vec<String> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Which reported quantity to plot against detector distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    /// Penetration fraction: detected weight that reached the target depth
    /// per launched photon. One curve per (wavelength, depth); log y.
    Fig2,
    /// Detection sensitivity: percentage of a detector's signal that reached
    /// the target depth. One curve per (wavelength, depth); linear y.
    Fig3,
    /// Minimum input power for the configured output floor. Depth
    /// independent: one curve per wavelength; log y.
    Fig4,
}

impl FigureKind {
    pub fn name(&self) -> &'static str {
        match self {
            FigureKind::Fig2 => "fig2",
            FigureKind::Fig3 => "fig3",
            FigureKind::Fig4 => "fig4",
        }
    }

    fn log_y(&self) -> bool {
        !matches!(self, FigureKind::Fig3)
    }

    fn y_label(&self) -> &'static str {
        match self {
            FigureKind::Fig2 => "penetration fraction (per launched photon)",
            FigureKind::Fig3 => "detection sensitivity (%)",
            FigureKind::Fig4 => "minimum input power (W)",
        }
    }

    fn title(&self) -> &'static str {
        match self {
            FigureKind::Fig2 => "Detected photons reaching target depth, per launched photon",
            FigureKind::Fig3 => "Share of detected signal that reached target depth",
            FigureKind::Fig4 => "Minimum input power for the sensible-output floor",
        }
    }

    /// (value, standard error) of one row under this figure kind; None is a
    /// gap. Fig4 propagates the ratio error through the reciprocal.
    fn extract(&self, row: &MetricRow) -> (Option<f64>, f64) {
        match self {
            FigureKind::Fig2 => (Some(row.penetration_fraction), row.pf_se),
            FigureKind::Fig3 => (row.sensitivity_pct, row.sens_se.unwrap_or(0.0)),
            FigureKind::Fig4 => {
                let se = row.min_input_power_w.map_or(0.0, |p| {
                    if row.transmission_ratio > 0.0 {
                        p * row.ratio_se / row.transmission_ratio
                    } else {
                        0.0
                    }
                });
                (row.min_input_power_w, se)
            }
        }
    }
}

struct SeriesPoint {
    x: f64,
    value: Option<f64>,
    se: f64,
}

struct Series {
    /// Index into the sorted wavelength list (sets the color).
    wavelength_idx: usize,
    /// Index into the sorted depth list (sets the shade); 0 for fig4.
    depth_idx: usize,
    label: String,
    file_stem: String,
    points: Vec<SeriesPoint>,
}

fn sorted_distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| a == b);
    v
}

/// Write the series files and the chart for one figure kind; returns every
/// path written. The metric table must cover its full grid.
pub fn emit_plot_data(
    rows: &[MetricRow],
    kind: FigureKind,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PlotError> {
    if rows.is_empty() {
        return Err(PlotError::Empty);
    }
    let wavelengths = sorted_distinct(rows.iter().map(|r| r.wavelength_nm));
    let depths = sorted_distinct(rows.iter().map(|r| r.sal_depth_mm));
    let detectors = sorted_distinct(rows.iter().map(|r| r.detector_mm));

    let find = |w: f64, d: f64, x: f64| {
        rows.iter()
            .find(|r| r.wavelength_nm == w && r.sal_depth_mm == d && r.detector_mm == x)
    };
    let mut missing = Vec::new();
    for &w in &wavelengths {
        for &d in &depths {
            for &x in &detectors {
                if find(w, d, x).is_none() {
                    missing.push(format!("{w} nm, sal {d} mm, detector {x} mm"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(PlotError::Incomplete { missing });
    }

    let mut series = Vec::new();
    match kind {
        FigureKind::Fig2 | FigureKind::Fig3 => {
            for (wi, &w) in wavelengths.iter().enumerate() {
                for (di, &d) in depths.iter().enumerate() {
                    let points = detectors
                        .iter()
                        .map(|&x| {
                            let (value, se) = kind.extract(find(w, d, x).expect("checked"));
                            SeriesPoint { x, value, se }
                        })
                        .collect();
                    series.push(Series {
                        wavelength_idx: wi,
                        depth_idx: di,
                        label: format!("{w} nm, {d} mm"),
                        file_stem: format!("{}_w{}_d{}", kind.name(), w, d),
                        points,
                    });
                }
            }
        }
        FigureKind::Fig4 => {
            // depth independent; take each wavelength's first-depth rows
            let d0 = depths[0];
            for (wi, &w) in wavelengths.iter().enumerate() {
                let points = detectors
                    .iter()
                    .map(|&x| {
                        let (value, se) = kind.extract(find(w, d0, x).expect("checked"));
                        SeriesPoint { x, value, se }
                    })
                    .collect();
                series.push(Series {
                    wavelength_idx: wi,
                    depth_idx: 0,
                    label: format!("{w} nm"),
                    file_stem: format!("{}_w{}", kind.name(), w),
                    points,
                });
            }
        }
    }

    fs::create_dir_all(out_dir).map_err(|source| PlotError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for s in &series {
        let mut text = format!(
            "# kind={} series={} schema_version=1\ndetector_mm,value,se\n",
            kind.name(),
            s.label
        );
        for p in &s.points {
            match p.value {
                Some(v) => {
                    let _ = writeln!(text, "{},{},{}", p.x, v, p.se);
                }
                None => {
                    let _ = writeln!(text, "{},,", p.x);
                }
            }
        }
        let path = out_dir.join(format!("{}.csv", s.file_stem));
        fs::write(&path, text).map_err(|source| PlotError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }

    let svg = render_svg(kind, &series, &wavelengths, depths.len(), &detectors);
    let path = out_dir.join(format!("{}.svg", kind.name()));
    fs::write(&path, svg).map_err(|source| PlotError::Io {
        path: path.clone(),
        source,
    })?;
    written.push(path);
    Ok(written)
}

const PALETTE: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
];

const WIDTH: f64 = 880.0;
const HEIGHT: f64 = 540.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 56.0;

struct Axis {
    min: f64,
    max: f64,
    log: bool,
}

impl Axis {
    fn scale(&self, v: f64, lo_px: f64, hi_px: f64) -> f64 {
        let t = if self.log {
            (v.log10() - self.min) / (self.max - self.min)
        } else {
            (v - self.min) / (self.max - self.min)
        };
        lo_px + t * (hi_px - lo_px)
    }
}

fn render_svg(
    kind: FigureKind,
    series: &[Series],
    wavelengths: &[f64],
    n_depths: usize,
    detectors: &[f64],
) -> String {
    let plot_l = MARGIN_L;
    let plot_r = WIDTH - MARGIN_R;
    let plot_t = MARGIN_T;
    let plot_b = HEIGHT - MARGIN_B;

    let x_axis = Axis {
        min: detectors[0],
        max: detectors[detectors.len() - 1].max(detectors[0] + 1.0),
        log: false,
    };
    let defined: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter_map(|p| p.value)
        .filter(|&v| !kind.log_y() || v > 0.0)
        .collect();
    let y_axis = if kind.log_y() {
        let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if defined.is_empty() {
            (1e-9, 1.0)
        } else {
            (lo, hi)
        };
        Axis {
            min: lo.log10().floor(),
            max: hi.log10().ceil().max(lo.log10().floor() + 1.0),
            log: true,
        }
    } else {
        let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Axis {
            min: 0.0,
            max: if defined.is_empty() { 100.0 } else { hi.max(100.0) },
            log: false,
        }
    };
    let sx = |v: f64| x_axis.scale(v, plot_l, plot_r);
    let sy = |v: f64| y_axis.scale(v, plot_b, plot_t);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        (plot_l + plot_r) / 2.0,
        kind.title()
    );

    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{plot_l:.1}\" y1=\"{plot_b:.1}\" x2=\"{plot_r:.1}\" y2=\"{plot_b:.1}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{plot_l:.1}\" y1=\"{plot_t:.1}\" x2=\"{plot_l:.1}\" y2=\"{plot_b:.1}\" stroke=\"black\"/>"
    );

    // x ticks on the detector grid (thinned when dense)
    let stride = detectors.len().div_ceil(16).max(1);
    for (i, &x) in detectors.iter().enumerate() {
        if i % stride != 0 && i + 1 != detectors.len() {
            continue;
        }
        let px = sx(x);
        let _ = writeln!(
            svg,
            "<line x1=\"{px:.1}\" y1=\"{plot_b:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
            plot_b + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{px:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{x}</text>",
            plot_b + 18.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">source-detector distance (mm)</text>",
        (plot_l + plot_r) / 2.0,
        HEIGHT - 14.0
    );

    // y ticks: decades for log axes, six even steps otherwise
    if y_axis.log {
        let mut exp = y_axis.min as i64;
        while exp as f64 <= y_axis.max {
            let py = sy(10f64.powi(exp as i32));
            let _ = writeln!(
                svg,
                "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{plot_l:.1}\" y2=\"{py:.1}\" stroke=\"black\"/>",
                plot_l - 5.0
            );
            let _ = writeln!(
                svg,
                "<line x1=\"{plot_l:.1}\" y1=\"{py:.1}\" x2=\"{plot_r:.1}\" y2=\"{py:.1}\" stroke=\"#dddddd\" stroke-width=\"0.6\"/>"
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">1e{exp}</text>",
                plot_l - 8.0,
                py + 4.0
            );
            exp += 1;
        }
    } else {
        for i in 0..=5 {
            let v = y_axis.min + (y_axis.max - y_axis.min) * i as f64 / 5.0;
            let py = sy(v);
            let _ = writeln!(
                svg,
                "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{plot_l:.1}\" y2=\"{py:.1}\" stroke=\"black\"/>",
                plot_l - 5.0
            );
            let _ = writeln!(
                svg,
                "<line x1=\"{plot_l:.1}\" y1=\"{py:.1}\" x2=\"{plot_r:.1}\" y2=\"{py:.1}\" stroke=\"#dddddd\" stroke-width=\"0.6\"/>"
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.0}</text>",
                plot_l - 8.0,
                py + 4.0
            );
        }
    }
    let _ = writeln!(
        svg,
        "<text x=\"20\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.1})\">{}</text>",
        (plot_t + plot_b) / 2.0,
        (plot_t + plot_b) / 2.0,
        kind.y_label()
    );

    // series: color by wavelength, shade by depth, gaps break the polyline
    for s in series {
        let color = PALETTE[s.wavelength_idx % PALETTE.len()];
        let opacity = if n_depths > 1 {
            1.0 - 0.6 * s.depth_idx as f64 / (n_depths - 1).max(1) as f64
        } else {
            1.0
        };
        let usable = |p: &SeriesPoint| {
            p.value
                .filter(|&v| !kind.log_y() || v > 0.0)
                .map(|v| (sx(p.x), sy(v)))
        };
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for p in &s.points {
            match usable(p) {
                Some(pt) => segments.last_mut().expect("nonempty").push(pt),
                None => {
                    if !segments.last().expect("nonempty").is_empty() {
                        segments.push(Vec::new());
                    }
                }
            }
        }
        for segment in segments.iter().filter(|seg| !seg.is_empty()) {
            if segment.len() == 1 {
                let (px, py) = segment[0];
                let _ = writeln!(
                    svg,
                    "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"2\" fill=\"{color}\" fill-opacity=\"{opacity:.2}\"/>"
                );
                continue;
            }
            let d: Vec<String> = segment
                .iter()
                .map(|(px, py)| format!("{px:.1},{py:.1}"))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-opacity=\"{opacity:.2}\" stroke-width=\"1.3\"/>",
                d.join(" ")
            );
        }
        // error bars
        for p in &s.points {
            let Some(v) = p.value.filter(|&v| !kind.log_y() || v > 0.0) else {
                continue;
            };
            if p.se <= 0.0 {
                continue;
            }
            let px = sx(p.x);
            let hi = v + p.se;
            let lo = if kind.log_y() {
                (v - p.se).max(10f64.powf(y_axis.min))
            } else {
                (v - p.se).max(y_axis.min)
            };
            let _ = writeln!(
                svg,
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-opacity=\"{opacity:.2}\" stroke-width=\"0.8\"/>",
                sy(lo),
                sy(hi)
            );
        }
    }

    // legend: one entry per wavelength
    for (wi, &w) in wavelengths.iter().enumerate() {
        let color = PALETTE[wi % PALETTE.len()];
        let y = plot_t + 16.0 * wi as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            plot_r + 12.0,
            plot_r + 34.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{w} nm</text>",
            plot_r + 40.0,
            y + 4.0
        );
    }
    if series.iter().any(|s| s.depth_idx > 0) {
        let y = plot_t + 16.0 * wavelengths.len() as f64 + 10.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#555555\">fading shade = deeper plane</text>",
            plot_r + 12.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(w: f64, d: f64, x: f64, pf: f64, sens: Option<f64>, power: Option<f64>) -> MetricRow {
        MetricRow {
            wavelength_nm: w,
            sal_depth_mm: d,
            detector_mm: x,
            transmission_ratio: 1e-4,
            ratio_se: 1e-6,
            penetration_fraction: pf,
            pf_se: pf * 0.1,
            sensitivity_pct: sens,
            sens_se: sens.map(|_| 0.5),
            min_input_power_w: power,
            flags: vec![],
        }
    }

    fn small_table() -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for &w in &[650.0, 700.0] {
            for &d in &[10.0, 15.0] {
                for &x in &[10.0, 15.0, 20.0] {
                    rows.push(row(w, d, x, 1e-5, Some(40.0), Some(1e-5)));
                }
            }
        }
        rows
    }

    #[test]
    fn emits_one_series_per_wavelength_depth_pair() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_plot_data(&small_table(), FigureKind::Fig2, dir.path()).unwrap();
        // 4 series + 1 svg
        assert_eq!(written.len(), 5);
        assert!(dir.path().join("fig2_w650_d10.csv").exists());
        assert!(dir.path().join("fig2.svg").exists());
        let svg = std::fs::read_to_string(dir.path().join("fig2.svg")).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("650 nm"));
    }

    #[test]
    fn fig4_emits_one_series_per_wavelength() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_plot_data(&small_table(), FigureKind::Fig4, dir.path()).unwrap();
        assert_eq!(written.len(), 3); // 2 series + svg
        assert!(dir.path().join("fig4_w700.csv").exists());
    }

    #[test]
    fn gaps_are_blank_not_zero() {
        let mut rows = small_table();
        rows[0].sensitivity_pct = None;
        rows[0].sens_se = None;
        let dir = tempfile::tempdir().unwrap();
        emit_plot_data(&rows, FigureKind::Fig3, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("fig3_w650_d10.csv")).unwrap();
        let gap_line = text.lines().nth(2).unwrap(); // header comment, header, first row
        assert_eq!(gap_line, "10,,");
    }

    #[test]
    fn incomplete_table_lists_missing_cells() {
        let mut rows = small_table();
        rows.pop();
        let dir = tempfile::tempdir().unwrap();
        match emit_plot_data(&rows, FigureKind::Fig2, dir.path()) {
            Err(PlotError::Incomplete { missing }) => {
                assert_eq!(missing.len(), 1);
                assert!(missing[0].contains("700"), "{missing:?}");
            }
            other => panic!("expected incomplete error, got {other:?}"),
        }
    }
}
