//! Tallies in, reported quantities out: photon energy, power-transmission
//! ratio, penetration fraction, detection sensitivity, and minimum input
//! power, assembled into a metric table over the sweep grid.
//!
//! Unit policy: powers in watts, energies in joules, lengths in mm,
//! wavelengths in nm; conversions happen here and nowhere else.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tally::TallySet;

/// Planck constant, exact SI definition (J s).
pub const PLANCK_CONSTANT: f64 = 6.62607015e-34;
/// Speed of light, exact SI definition (m/s).
pub const SPEED_OF_LIGHT: f64 = 2.99792458e8;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("wavelength must be positive, got {0} nm")]
    NonPositiveWavelength(f64),
    #[error("minimum sensible output power must be positive, got {0} W")]
    NonPositivePower(f64),
    #[error("not reachable: detector receives nothing at any input power (ratio = 0)")]
    NotReachable,
    #[error("sensitivity undefined: baseline recorded no detections at detector {detector}")]
    UndefinedSensitivity { detector: usize },
    #[error("mismatched provenance: {0}")]
    Provenance(String),
    #[error("incomplete grid, missing cells: {}", missing.join("; "))]
    IncompleteGrid { missing: Vec<String> },
    #[error("unsupported metrics schema_version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed metrics record: {0}")]
    Malformed(String),
}

/// Energy of N photons at one wavelength: N h c / lambda.
pub fn photon_energy(n_photons: u64, wavelength_nm: f64) -> Result<f64, AnalysisError> {
    if !(wavelength_nm > 0.0) {
        return Err(AnalysisError::NonPositiveWavelength(wavelength_nm));
    }
    let wavelength_m = wavelength_nm * 1e-9;
    Ok(n_photons as f64 * PLANCK_CONSTANT * SPEED_OF_LIGHT / wavelength_m)
}

/// Detected-to-launched weight ratio. Source and detected photons share the
/// wavelength, so the per-photon energies cancel and the power transmission
/// ratio reduces to this count ratio.
pub fn transmission_ratio(tally: &TallySet, detector: usize) -> f64 {
    assert!(
        tally.launched_weight > 0.0,
        "transmission ratio needs a nonzero launch weight"
    );
    tally.detected[detector].weight_sum / tally.launched_weight
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenetrationEstimate {
    pub fraction: f64,
    /// Monte Carlo noise drove the raw difference negative and it was
    /// clamped to zero (common-random-numbers pairing suppresses this).
    pub clamped: bool,
}

fn check_paired(baseline: &TallySet, with_sal: &TallySet) -> Result<(), AnalysisError> {
    if baseline.detected.len() != with_sal.detected.len() {
        return Err(AnalysisError::Provenance(format!(
            "detector grids differ ({} vs {})",
            baseline.detected.len(),
            with_sal.detected.len()
        )));
    }
    if baseline.launched_photons != with_sal.launched_photons {
        return Err(AnalysisError::Provenance(format!(
            "photon budgets differ ({} vs {})",
            baseline.launched_photons, with_sal.launched_photons
        )));
    }
    Ok(())
}

/// Difference-method estimate of the detected weight that reached the
/// absorber depth, per launched weight: (baseline - with_sal) / launched.
pub fn penetration_fraction(
    baseline: &TallySet,
    with_sal: &TallySet,
    detector: usize,
) -> Result<PenetrationEstimate, AnalysisError> {
    check_paired(baseline, with_sal)?;
    let diff =
        baseline.detected[detector].weight_sum - with_sal.detected[detector].weight_sum;
    Ok(PenetrationEstimate {
        fraction: diff.max(0.0) / baseline.launched_weight,
        clamped: diff < 0.0,
    })
}

/// Share of a detector's signal attributable to photons that reached the
/// absorber depth: 100 (baseline - with_sal) / baseline.
pub fn sensitivity_percent(
    baseline: &TallySet,
    with_sal: &TallySet,
    detector: usize,
) -> Result<f64, AnalysisError> {
    check_paired(baseline, with_sal)?;
    let base = baseline.detected[detector].weight_sum;
    if base <= 0.0 {
        return Err(AnalysisError::UndefinedSensitivity { detector });
    }
    let diff = (base - with_sal.detected[detector].weight_sum).max(0.0);
    Ok(100.0 * diff / base)
}

/// Input power needed for the detector to see `min_sensible_output` watts.
pub fn min_input_power(ratio: f64, min_sensible_output: f64) -> Result<f64, AnalysisError> {
    if !(min_sensible_output > 0.0) {
        return Err(AnalysisError::NonPositivePower(min_sensible_output));
    }
    if ratio <= 0.0 {
        return Err(AnalysisError::NotReachable);
    }
    Ok(min_sensible_output / ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Paired baseline / absorber runs per depth.
    Difference,
    /// One tagging run per wavelength; depths come from threshold bins.
    Tag,
}

impl std::fmt::Display for SweepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepMode::Difference => "difference",
            SweepMode::Tag => "tag",
        })
    }
}

/// One cell of the metric table (a point of the wavelength x depth x
/// detector grid). Undefined values stay `None` and are flagged, never
/// silently zeroed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub wavelength_nm: f64,
    pub sal_depth_mm: f64,
    pub detector_mm: f64,
    pub transmission_ratio: f64,
    pub ratio_se: f64,
    pub penetration_fraction: f64,
    pub pf_se: f64,
    pub sensitivity_pct: Option<f64>,
    pub sens_se: Option<f64>,
    pub min_input_power_w: Option<f64>,
    pub flags: Vec<String>,
}

/// The complete set of run tallies a sweep produced, keyed by cell.
#[derive(Debug, Clone)]
pub struct RunSet {
    pub mode: SweepMode,
    pub wavelengths_nm: Vec<f64>,
    pub sal_depths_mm: Vec<f64>,
    pub detector_distances_mm: Vec<f64>,
    /// Annulus detectors were used; propagated into row flags.
    pub annulus: bool,
    tallies: BTreeMap<(u64, Option<u64>), TallySet>,
}

impl RunSet {
    pub fn new(
        mode: SweepMode,
        wavelengths_nm: Vec<f64>,
        sal_depths_mm: Vec<f64>,
        detector_distances_mm: Vec<f64>,
        annulus: bool,
    ) -> Self {
        Self {
            mode,
            wavelengths_nm,
            sal_depths_mm,
            detector_distances_mm,
            annulus,
            tallies: BTreeMap::new(),
        }
    }

    fn key(wavelength_nm: f64, sal_depth_mm: Option<f64>) -> (u64, Option<u64>) {
        (wavelength_nm.to_bits(), sal_depth_mm.map(f64::to_bits))
    }

    /// Register one run's tally; `sal_depth_mm = None` is the baseline (or
    /// the single tag run of a wavelength).
    pub fn insert(&mut self, wavelength_nm: f64, sal_depth_mm: Option<f64>, tally: TallySet) {
        self.tallies
            .insert(Self::key(wavelength_nm, sal_depth_mm), tally);
    }

    pub fn get(&self, wavelength_nm: f64, sal_depth_mm: Option<f64>) -> Option<&TallySet> {
        self.tallies.get(&Self::key(wavelength_nm, sal_depth_mm))
    }
}

/// Assemble one row per (wavelength, depth, detector) cell. Every cell must
/// be backed by a run; otherwise the missing cells are reported as an error.
pub fn build_metric_table(
    run_set: &RunSet,
    min_sensible_output: f64,
) -> Result<Vec<MetricRow>, AnalysisError> {
    if !(min_sensible_output > 0.0) {
        return Err(AnalysisError::NonPositivePower(min_sensible_output));
    }
    let mut missing = Vec::new();
    for &w in &run_set.wavelengths_nm {
        if run_set.get(w, None).is_none() {
            missing.push(match run_set.mode {
                SweepMode::Difference => format!("{w} nm baseline"),
                SweepMode::Tag => format!("{w} nm tag run"),
            });
        }
        match run_set.mode {
            SweepMode::Difference => {
                for &d in &run_set.sal_depths_mm {
                    if run_set.get(w, Some(d)).is_none() {
                        missing.push(format!("{w} nm, sal {d} mm"));
                    }
                }
            }
            SweepMode::Tag => {
                if let Some(tally) = run_set.get(w, None) {
                    for &d in &run_set.sal_depths_mm {
                        if !tally.depth_grid.iter().any(|&g| g == d) {
                            missing.push(format!("{w} nm, depth bin {d} mm"));
                        }
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(AnalysisError::IncompleteGrid { missing });
    }

    let mut rows =
        Vec::with_capacity(run_set.wavelengths_nm.len() * run_set.sal_depths_mm.len());
    for &w in &run_set.wavelengths_nm {
        let base = run_set.get(w, None).expect("completeness checked");
        for &d in &run_set.sal_depths_mm {
            for (i, &distance) in run_set.detector_distances_mm.iter().enumerate() {
                let row = match run_set.mode {
                    SweepMode::Difference => {
                        let with_sal = run_set.get(w, Some(d)).expect("completeness checked");
                        cell_from_difference(base, with_sal, i, min_sensible_output)?
                    }
                    SweepMode::Tag => {
                        let k = base
                            .depth_grid
                            .iter()
                            .position(|&g| g == d)
                            .expect("completeness checked");
                        cell_from_tag(base, i, k, min_sensible_output)
                    }
                };
                rows.push(MetricRow {
                    wavelength_nm: w,
                    sal_depth_mm: d,
                    detector_mm: distance,
                    flags: if run_set.annulus {
                        let mut f = row.flags;
                        f.push("annulus".into());
                        f
                    } else {
                        row.flags
                    },
                    ..row
                });
            }
        }
    }
    Ok(rows)
}

struct CellMetrics {
    transmission_ratio: f64,
    ratio_se: f64,
    penetration_fraction: f64,
    pf_se: f64,
    sensitivity_pct: Option<f64>,
    sens_se: Option<f64>,
    min_input_power_w: Option<f64>,
    flags: Vec<String>,
}

impl CellMetrics {
    fn into_row(self) -> MetricRow {
        MetricRow {
            wavelength_nm: 0.0,
            sal_depth_mm: 0.0,
            detector_mm: 0.0,
            transmission_ratio: self.transmission_ratio,
            ratio_se: self.ratio_se,
            penetration_fraction: self.penetration_fraction,
            pf_se: self.pf_se,
            sensitivity_pct: self.sensitivity_pct,
            sens_se: self.sens_se,
            min_input_power_w: self.min_input_power_w,
            flags: self.flags,
        }
    }
}

/// First-order error propagation for the ratio 100 a/b, ignoring the
/// (positive) covariance, which makes the bound conservative.
fn ratio_percent_se(a: f64, se_a: f64, b: f64, se_b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    100.0 * (a / b) * ((se_a / a).powi(2) + (se_b / b).powi(2)).sqrt()
}

fn finish_cell(
    ratio: f64,
    ratio_se: f64,
    pf: f64,
    pf_se: f64,
    sensitivity: Option<f64>,
    sens_se: Option<f64>,
    min_sensible_output: f64,
    mut flags: Vec<String>,
) -> CellMetrics {
    let min_input_power_w = match min_input_power(ratio, min_sensible_output) {
        Ok(p) => Some(p),
        Err(_) => {
            flags.push("not_reachable".into());
            None
        }
    };
    if sensitivity.is_none() {
        flags.push("undefined_sensitivity".into());
    }
    CellMetrics {
        transmission_ratio: ratio,
        ratio_se,
        penetration_fraction: pf,
        pf_se,
        sensitivity_pct: sensitivity,
        sens_se,
        min_input_power_w,
        flags,
    }
}

fn cell_from_difference(
    baseline: &TallySet,
    with_sal: &TallySet,
    detector: usize,
    min_sensible_output: f64,
) -> Result<MetricRow, AnalysisError> {
    let ratio = transmission_ratio(baseline, detector);
    let ratio_se = baseline.standard_error(detector);
    let estimate = penetration_fraction(baseline, with_sal, detector)?;
    let pf_se = (baseline.standard_error(detector).powi(2)
        + with_sal.standard_error(detector).powi(2))
    .sqrt();
    let mut flags = Vec::new();
    if estimate.clamped {
        flags.push("clamped_negative".into());
    }
    let (sens, sens_se) = match sensitivity_percent(baseline, with_sal, detector) {
        Ok(s) => (
            Some(s),
            Some(ratio_percent_se(
                estimate.fraction,
                pf_se,
                ratio,
                ratio_se,
            )),
        ),
        Err(AnalysisError::UndefinedSensitivity { .. }) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(finish_cell(
        ratio,
        ratio_se,
        estimate.fraction,
        pf_se,
        sens,
        sens_se,
        min_sensible_output,
        flags,
    )
    .into_row())
}

fn cell_from_tag(
    tally: &TallySet,
    detector: usize,
    depth_index: usize,
    min_sensible_output: f64,
) -> MetricRow {
    let ratio = transmission_ratio(tally, detector);
    let ratio_se = tally.standard_error(detector);
    let reached = tally.detected_by_depth[detector][depth_index].weight_sum;
    let pf = reached / tally.launched_weight;
    let pf_se = tally.depth_standard_error(detector, depth_index);
    let detected = tally.detected[detector].weight_sum;
    let (sens, sens_se) = if detected > 0.0 {
        (
            Some(100.0 * reached / detected),
            Some(ratio_percent_se(pf, pf_se, ratio, ratio_se)),
        )
    } else {
        (None, None)
    };
    finish_cell(
        ratio,
        ratio_se,
        pf,
        pf_se,
        sens,
        sens_se,
        min_sensible_output,
        Vec::new(),
    )
    .into_row()
}

pub const METRIC_CSV_HEADER: &str = "wavelength_nm,sal_depth_mm,detector_mm,transmission_ratio,\
ratio_se,penetration_fraction,pf_se,sensitivity_pct,sens_se,min_input_power_w,flags";

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metric_table_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRIC_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.wavelength_nm,
            r.sal_depth_mm,
            r.detector_mm,
            r.transmission_ratio,
            r.ratio_se,
            r.penetration_fraction,
            r.pf_se,
            csv_opt(r.sensitivity_pct),
            csv_opt(r.sens_se),
            csv_opt(r.min_input_power_w),
            r.flags.join(";")
        );
    }
    out
}

pub fn metric_table_from_csv(text: &str) -> Result<Vec<MetricRow>, AnalysisError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| AnalysisError::Malformed("empty metrics file".into()))?;
    if header.trim() != METRIC_CSV_HEADER {
        return Err(AnalysisError::Malformed(
            "unrecognized metrics CSV header".into(),
        ));
    }
    let req = |field: &str, n: usize| -> Result<f64, AnalysisError> {
        field.parse().map_err(|_| {
            AnalysisError::Malformed(format!("line {n}: bad number '{field}'"))
        })
    };
    let opt = |field: &str, n: usize| -> Result<Option<f64>, AnalysisError> {
        if field.is_empty() {
            Ok(None)
        } else {
            req(field, n).map(Some)
        }
    };
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let n = idx + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(AnalysisError::Malformed(format!(
                "line {n}: expected 11 fields, got {}",
                f.len()
            )));
        }
        rows.push(MetricRow {
            wavelength_nm: req(f[0], n)?,
            sal_depth_mm: req(f[1], n)?,
            detector_mm: req(f[2], n)?,
            transmission_ratio: req(f[3], n)?,
            ratio_se: req(f[4], n)?,
            penetration_fraction: req(f[5], n)?,
            pf_se: req(f[6], n)?,
            sensitivity_pct: opt(f[7], n)?,
            sens_se: opt(f[8], n)?,
            min_input_power_w: opt(f[9], n)?,
            flags: if f[10].is_empty() {
                Vec::new()
            } else {
                f[10].split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(rows)
}

/// Versioned JSON carrier for a metric table (shares the schema discipline
/// of tally records).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub schema_version: u32,
    pub mode: SweepMode,
    pub min_sensible_output_w: f64,
    pub rows: Vec<MetricRow>,
}

impl MetricsDocument {
    pub fn new(mode: SweepMode, min_sensible_output_w: f64, rows: Vec<MetricRow>) -> Self {
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            mode,
            min_sensible_output_w,
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, AnalysisError> {
        #[derive(Deserialize)]
        struct VersionProbe {
            schema_version: u32,
        }
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| AnalysisError::Malformed(e.to_string()))?;
        if probe.schema_version != METRICS_SCHEMA_VERSION {
            return Err(AnalysisError::SchemaVersion {
                found: probe.schema_version,
                expected: METRICS_SCHEMA_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| AnalysisError::Malformed(e.to_string()))
    }
}
