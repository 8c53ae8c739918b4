//! Design-space-exploration orchestrator: expands wavelength x depth grids
//! into run descriptors, schedules them with deterministic per-cell seeding,
//! persists tallies plus an append-only manifest, and reloads completed
//! sweeps for analysis.
//!
//! Seeding discipline: `run_seed = mix_seed(base_seed, [wavelength bits,
//! depth tag])` (see [`run_seed_for`]), so a cell's seed depends only on its
//! own coordinates — extending a grid never perturbs existing results. With
//! common-random-numbers pairing the depth tag is omitted, which makes a
//! wavelength's baseline and absorber runs share photon histories until the
//! plane interferes; the difference estimator then carries near-zero noise.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{RunSet, SweepMode};
use crate::medium::{DetectorGeometry, SalMode, SceneConfig, SceneError, SuperAbsorbentLayer};
use crate::rng::{mix_seed, BATCH_SIZE};
use crate::tally::{TallyError, TallySet};
use crate::transport::{run_simulation, RunError, RunMode, RunSpec, TraceParams};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SWEEP_HEADER_FILE: &str = "sweep.json";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("grid parse error at line {line}: {message}")]
    GridParse { line: usize, message: String },
    #[error("invalid grid: {0}")]
    GridInvalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Tally(#[from] TallyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("resume mismatch: {0}")]
    ResumeMismatch(String),
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SweepError {
    move |source| SweepError::Io {
        path: path.into(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Baseline and absorber runs of a wavelength share photon seeds.
    CommonRandomNumbers,
    Independent,
}

/// The sweep grid. Defaults mirror the standard study: 7 wavelengths over
/// 650-950 nm, absorber depths 10-40 mm every 5 mm, and a desk-scale photon
/// budget (errors scale as 1/sqrt(N); larger budgets are a flag away).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub wavelengths_nm: Vec<f64>,
    pub sal_depths_mm: Vec<f64>,
    pub photons_per_run: u64,
    pub mode: SweepMode,
    pub seed: u64,
    pub pairing: Pairing,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            wavelengths_nm: (0..7).map(|i| 650.0 + 50.0 * i as f64).collect(),
            sal_depths_mm: (0..7).map(|i| 10.0 + 5.0 * i as f64).collect(),
            photons_per_run: 1_000_000,
            mode: SweepMode::Tag,
            seed: 0,
            pairing: Pairing::CommonRandomNumbers,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.wavelengths_nm.is_empty() {
            return Err(SweepError::GridInvalid("empty wavelength list".into()));
        }
        if self.sal_depths_mm.is_empty() {
            return Err(SweepError::GridInvalid("empty sal depth list".into()));
        }
        if self.wavelengths_nm.iter().any(|&w| !(w > 0.0)) {
            return Err(SweepError::GridInvalid(
                "wavelengths must be positive".into(),
            ));
        }
        if self.sal_depths_mm.iter().any(|&d| !(d > 0.0)) {
            return Err(SweepError::GridInvalid("sal depths must be positive".into()));
        }
        for pair in self.sal_depths_mm.windows(2) {
            if pair[1] <= pair[0] {
                return Err(SweepError::GridInvalid(
                    "sal depths must be strictly increasing".into(),
                ));
            }
        }
        if self.photons_per_run == 0 {
            return Err(SweepError::GridInvalid("photons_per_run is zero".into()));
        }
        Ok(())
    }
}

/// Parse a `[grid]` config file. Same line syntax as scene configs.
pub fn parse_grid(source: &str) -> Result<SweepGrid, SweepError> {
    let err = |line: usize, message: String| SweepError::GridParse { line, message };
    let mut grid = SweepGrid::default();
    let mut in_section = false;
    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "[grid]" {
            in_section = true;
            continue;
        }
        if line.starts_with('[') {
            return Err(err(line_no, format!("unknown section '{line}'")));
        }
        if !in_section {
            return Err(err(line_no, "fields must follow a [grid] header".into()));
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        let list = |v: &str| -> Result<Vec<f64>, SweepError> {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| err(line_no, format!("field '{key}': bad number '{s}'")))
                })
                .collect()
        };
        let range = |v: &str| -> Result<Vec<f64>, SweepError> {
            let vals = list(v)?;
            if vals.len() != 3 || vals[2] <= 0.0 || vals[1] < vals[0] {
                return Err(err(
                    line_no,
                    format!("field '{key}': expected 'start, stop, step'"),
                ));
            }
            let n = ((vals[1] - vals[0]) / vals[2] + 0.5).floor() as usize + 1;
            Ok((0..n).map(|i| vals[0] + vals[2] * i as f64).collect())
        };
        match key {
            "wavelengths_nm" => grid.wavelengths_nm = list(value)?,
            "wavelength_range" => grid.wavelengths_nm = range(value)?,
            "sal_depths_mm" => grid.sal_depths_mm = list(value)?,
            "sal_depth_range" => grid.sal_depths_mm = range(value)?,
            "photons" => {
                grid.photons_per_run = value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v >= 1.0 && v.fract() == 0.0)
                    .map(|v| v as u64)
                    .ok_or_else(|| {
                        err(line_no, format!("field 'photons': bad count '{value}'"))
                    })?;
            }
            "seed" => {
                grid.seed = value
                    .parse()
                    .map_err(|_| err(line_no, format!("field 'seed': bad integer '{value}'")))?;
            }
            "mode" => {
                grid.mode = match value {
                    "tag" => SweepMode::Tag,
                    "difference" => SweepMode::Difference,
                    _ => {
                        return Err(err(
                            line_no,
                            format!("field 'mode': expected 'tag' or 'difference', got '{value}'"),
                        ))
                    }
                };
            }
            "pairing" => {
                grid.pairing = match value {
                    "common" | "common_random_numbers" => Pairing::CommonRandomNumbers,
                    "independent" => Pairing::Independent,
                    _ => {
                        return Err(err(
                            line_no,
                            format!(
                                "field 'pairing': expected 'common' or 'independent', got '{value}'"
                            ),
                        ))
                    }
                };
            }
            _ => return Err(err(line_no, format!("unknown [grid] field '{key}'"))),
        }
    }
    grid.validate()?;
    Ok(grid)
}

/// Marker mixed in for baseline cells under independent pairing.
const BASELINE_TAG: u64 = u64::MAX;

/// Cell seed derivation. Under common-random-numbers pairing the absorber
/// depth is left out, so every run of a wavelength replays the same photons.
pub fn run_seed_for(base: u64, wavelength_nm: f64, sal_depth_mm: Option<f64>, pairing: Pairing) -> u64 {
    match pairing {
        Pairing::CommonRandomNumbers => mix_seed(base, &[wavelength_nm.to_bits()]),
        Pairing::Independent => mix_seed(
            base,
            &[
                wavelength_nm.to_bits(),
                sal_depth_mm.map_or(BASELINE_TAG, f64::to_bits),
            ],
        ),
    }
}

/// One schedulable run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDescriptor {
    pub wavelength_nm: f64,
    /// None for a baseline or tag run.
    pub sal_depth_mm: Option<f64>,
    pub mode: RunMode,
    pub photons: u64,
    pub run_seed: u64,
}

impl RunDescriptor {
    pub fn label(&self) -> String {
        match self.sal_depth_mm {
            Some(d) => format!("{} nm, sal {} mm", self.wavelength_nm, d),
            None => format!("{} nm, baseline", self.wavelength_nm),
        }
    }

    fn mode_name(&self) -> &'static str {
        match &self.mode {
            RunMode::Sal => "sal",
            RunMode::Tag { depth_grid } if depth_grid.is_empty() => "baseline",
            RunMode::Tag { .. } => "tag",
        }
    }
}

/// Expand a grid into run descriptors: difference mode yields a baseline
/// plus one absorber run per depth for every wavelength; tag mode yields a
/// single binning run per wavelength.
pub fn expand_grid(grid: &SweepGrid) -> Result<Vec<RunDescriptor>, SweepError> {
    grid.validate()?;
    let mut runs = Vec::new();
    for &w in &grid.wavelengths_nm {
        match grid.mode {
            SweepMode::Difference => {
                runs.push(RunDescriptor {
                    wavelength_nm: w,
                    sal_depth_mm: None,
                    mode: RunMode::Tag { depth_grid: vec![] },
                    photons: grid.photons_per_run,
                    run_seed: run_seed_for(grid.seed, w, None, grid.pairing),
                });
                for &d in &grid.sal_depths_mm {
                    runs.push(RunDescriptor {
                        wavelength_nm: w,
                        sal_depth_mm: Some(d),
                        mode: RunMode::Sal,
                        photons: grid.photons_per_run,
                        run_seed: run_seed_for(grid.seed, w, Some(d), grid.pairing),
                    });
                }
            }
            SweepMode::Tag => {
                runs.push(RunDescriptor {
                    wavelength_nm: w,
                    sal_depth_mm: None,
                    mode: RunMode::Tag {
                        depth_grid: grid.sal_depths_mm.clone(),
                    },
                    photons: grid.photons_per_run,
                    run_seed: run_seed_for(grid.seed, w, None, grid.pairing),
                });
            }
        }
    }
    Ok(runs)
}

/// Scene specialization for one cell: absorber runs get the plane moved to
/// the cell depth (keeping a finite mode if the scene configured one);
/// baseline and tag runs drop the plane.
pub fn scene_for_cell(scene: &SceneConfig, descriptor: &RunDescriptor) -> SceneConfig {
    let mut cell_scene = scene.clone();
    cell_scene.sal = descriptor.sal_depth_mm.map(|depth_mm| SuperAbsorbentLayer {
        depth_mm,
        mode: scene.sal.map_or(SalMode::Perfect, |s| s.mode),
    });
    cell_scene
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub schema_version: u32,
    pub wavelength_nm: f64,
    pub sal_depth_mm: Option<f64>,
    pub mode: String,
    pub seed: u64,
    pub photons: u64,
    /// RNG stream range [lo, hi) consumed by the run's batches.
    pub stream_lo: u64,
    pub stream_hi: u64,
    pub tally_file: String,
    pub wall_ms: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Grid, scene, and detector metadata persisted next to the manifest so
/// re-analysis never needs the original inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepHeader {
    pub schema_version: u32,
    pub grid: SweepGrid,
    pub scene_text: String,
    pub detector_distances_mm: Vec<f64>,
    pub annulus: bool,
}

pub fn tally_filename(descriptor: &RunDescriptor) -> String {
    let cell = match descriptor.sal_depth_mm {
        Some(d) => format!("d{d}"),
        None => "baseline".to_string(),
    };
    format!(
        "tally_w{}_{}_s{:016x}.json",
        descriptor.wavelength_nm, cell, descriptor.run_seed
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepOutcome {
    pub completed: usize,
    pub skipped: usize,
    pub failed: Vec<String>,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SweepError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| SweepError::Malformed {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", idx + 1),
            })?;
        if entry.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(SweepError::Malformed {
                path: path.to_path_buf(),
                message: format!(
                    "line {}: unsupported schema_version {}",
                    idx + 1,
                    entry.schema_version
                ),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

fn append_manifest(path: &Path, entry: &ManifestEntry) -> Result<(), SweepError> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut line = serde_json::to_string(entry).expect("manifest entry serializes");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(io_err(path))
}

fn cell_key(wavelength_nm: f64, sal_depth_mm: Option<f64>) -> (u64, Option<u64>) {
    (wavelength_nm.to_bits(), sal_depth_mm.map(f64::to_bits))
}

/// Execute every cell of the grid against the scene. Runs execute in a
/// stable order; photon batches inside a run parallelize over `workers`
/// threads, and outputs are bit-identical for any worker count. Per-run
/// failures are recorded in the manifest and reported in the outcome; the
/// sweep keeps going.
pub fn run_sweep(
    scene: &SceneConfig,
    grid: &SweepGrid,
    workers: usize,
    out_dir: &Path,
    resume: bool,
    params: TraceParams,
) -> Result<SweepOutcome, SweepError> {
    let descriptors = expand_grid(grid)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let header = SweepHeader {
        schema_version: MANIFEST_SCHEMA_VERSION,
        grid: grid.clone(),
        scene_text: scene.serialize(),
        detector_distances_mm: scene.detectors.distances_mm.clone(),
        annulus: scene.detectors.geometry == DetectorGeometry::Annulus,
    };
    let header_path = out_dir.join(SWEEP_HEADER_FILE);
    let manifest_path = out_dir.join(MANIFEST_FILE);

    let mut done: BTreeSet<(u64, Option<u64>)> = BTreeSet::new();
    if resume && header_path.exists() {
        let text = fs::read_to_string(&header_path).map_err(io_err(&header_path))?;
        let existing: SweepHeader =
            serde_json::from_str(&text).map_err(|e| SweepError::Malformed {
                path: header_path.clone(),
                message: e.to_string(),
            })?;
        if existing.grid != header.grid || existing.scene_text != header.scene_text {
            return Err(SweepError::ResumeMismatch(
                "existing sweep used a different grid or scene".into(),
            ));
        }
        for entry in read_manifest(&manifest_path)? {
            if entry.status == "ok" && out_dir.join(&entry.tally_file).exists() {
                done.insert(cell_key(entry.wavelength_nm, entry.sal_depth_mm));
            }
        }
    } else {
        let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
        text.push('\n');
        fs::write(&header_path, text).map_err(io_err(&header_path))?;
        if manifest_path.exists() {
            fs::remove_file(&manifest_path).map_err(io_err(&manifest_path))?;
        }
    }

    let mut outcome = SweepOutcome {
        completed: 0,
        skipped: 0,
        failed: Vec::new(),
    };

    for descriptor in &descriptors {
        if done.contains(&cell_key(descriptor.wavelength_nm, descriptor.sal_depth_mm)) {
            outcome.skipped += 1;
            continue;
        }
        let cell_scene = scene_for_cell(scene, descriptor);
        let spec = RunSpec {
            wavelength: crate::medium::Wavelength::new(descriptor.wavelength_nm)?,
            mode: descriptor.mode.clone(),
            photons: descriptor.photons,
            seed: descriptor.run_seed,
            workers,
            params,
        };
        let tally_file = tally_filename(descriptor);
        let started = Instant::now();
        let result: Result<(), String> = run_simulation(&cell_scene, &spec)
            .map_err(|e| e.to_string())
            .and_then(|tally| {
                fs::write(out_dir.join(&tally_file), tally.to_json()).map_err(|e| e.to_string())
            });
        let wall_ms = started.elapsed().as_millis() as u64;
        let n_batches = descriptor.photons.div_ceil(BATCH_SIZE);
        let mut entry = ManifestEntry {
            schema_version: MANIFEST_SCHEMA_VERSION,
            wavelength_nm: descriptor.wavelength_nm,
            sal_depth_mm: descriptor.sal_depth_mm,
            mode: descriptor.mode_name().to_string(),
            seed: descriptor.run_seed,
            photons: descriptor.photons,
            stream_lo: 0,
            stream_hi: n_batches,
            tally_file,
            wall_ms,
            status: "ok".into(),
            error: None,
        };
        match result {
            Ok(()) => outcome.completed += 1,
            Err(e) => {
                entry.status = "failed".into();
                entry.error = Some(e.clone());
                outcome.failed.push(format!("{}: {e}", descriptor.label()));
            }
        }
        append_manifest(&manifest_path, &entry)?;
    }
    Ok(outcome)
}

/// Reload a completed sweep directory into a [`RunSet`] for analysis.
pub fn load_run_set(runs_dir: &Path) -> Result<(RunSet, SweepHeader), SweepError> {
    let header_path = runs_dir.join(SWEEP_HEADER_FILE);
    let text = fs::read_to_string(&header_path).map_err(io_err(&header_path))?;
    let header: SweepHeader = serde_json::from_str(&text).map_err(|e| SweepError::Malformed {
        path: header_path.clone(),
        message: e.to_string(),
    })?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(SweepError::Malformed {
            path: header_path,
            message: format!("unsupported schema_version {}", header.schema_version),
        });
    }

    let mut run_set = RunSet::new(
        header.grid.mode,
        header.grid.wavelengths_nm.clone(),
        header.grid.sal_depths_mm.clone(),
        header.detector_distances_mm.clone(),
        header.annulus,
    );
    for entry in read_manifest(&runs_dir.join(MANIFEST_FILE))? {
        if entry.status != "ok" {
            continue;
        }
        let path = runs_dir.join(&entry.tally_file);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let tally = TallySet::from_json(&text)?;
        run_set.insert(entry.wavelength_nm, entry.sal_depth_mm, tally);
    }
    Ok((run_set, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_mirrors_study_defaults() {
        let grid = SweepGrid::default();
        assert_eq!(grid.wavelengths_nm.len(), 7);
        assert_eq!(grid.wavelengths_nm[0], 650.0);
        assert_eq!(grid.wavelengths_nm[6], 950.0);
        assert_eq!(grid.sal_depths_mm.len(), 7);
        assert_eq!(grid.sal_depths_mm[0], 10.0);
        assert_eq!(grid.sal_depths_mm[6], 40.0);
        assert_eq!(grid.photons_per_run, 1_000_000);
        assert_eq!(grid.mode, SweepMode::Tag);
    }

    #[test]
    fn expansion_counts() {
        let mut grid = SweepGrid::default();
        grid.mode = SweepMode::Difference;
        // 7 wavelengths x (7 depths + baseline)
        assert_eq!(expand_grid(&grid).unwrap().len(), 56);
        grid.mode = SweepMode::Tag;
        assert_eq!(expand_grid(&grid).unwrap().len(), 7);

        let small = SweepGrid {
            wavelengths_nm: vec![850.0],
            sal_depths_mm: vec![10.0],
            mode: SweepMode::Difference,
            ..SweepGrid::default()
        };
        assert_eq!(expand_grid(&small).unwrap().len(), 2);
    }

    #[test]
    fn empty_grid_errors_before_execution() {
        let grid = SweepGrid {
            wavelengths_nm: vec![],
            ..SweepGrid::default()
        };
        assert!(matches!(expand_grid(&grid), Err(SweepError::GridInvalid(_))));
        let grid = SweepGrid {
            sal_depths_mm: vec![],
            ..SweepGrid::default()
        };
        assert!(expand_grid(&grid).is_err());
    }

    #[test]
    fn crn_pairing_shares_seeds_within_wavelength() {
        let base = 42;
        let s0 = run_seed_for(base, 650.0, None, Pairing::CommonRandomNumbers);
        let s1 = run_seed_for(base, 650.0, Some(10.0), Pairing::CommonRandomNumbers);
        let s2 = run_seed_for(base, 650.0, Some(40.0), Pairing::CommonRandomNumbers);
        assert_eq!(s0, s1);
        assert_eq!(s0, s2);
        assert_ne!(s0, run_seed_for(base, 700.0, None, Pairing::CommonRandomNumbers));

        let i0 = run_seed_for(base, 650.0, None, Pairing::Independent);
        let i1 = run_seed_for(base, 650.0, Some(10.0), Pairing::Independent);
        assert_ne!(i0, i1);
    }

    #[test]
    fn grid_file_round_trip() {
        let text = "
[grid]
wavelengths_nm = 650, 750
sal_depth_range = 5, 15, 5
photons = 5000
mode = difference
pairing = independent
seed = 99
";
        let grid = parse_grid(text).unwrap();
        assert_eq!(grid.wavelengths_nm, vec![650.0, 750.0]);
        assert_eq!(grid.sal_depths_mm, vec![5.0, 10.0, 15.0]);
        assert_eq!(grid.photons_per_run, 5000);
        assert_eq!(grid.mode, SweepMode::Difference);
        assert_eq!(grid.pairing, Pairing::Independent);
        assert_eq!(grid.seed, 99);
    }

    #[test]
    fn grid_parse_errors_carry_lines() {
        assert!(matches!(
            parse_grid("[grid]\nphotons = lots\n"),
            Err(SweepError::GridParse { line: 2, .. })
        ));
        assert!(matches!(
            parse_grid("[grid]\nmystery = 1\n"),
            Err(SweepError::GridParse { line: 2, .. })
        ));
    }

    #[test]
    fn descriptor_filenames_are_cell_addressed() {
        let grid = SweepGrid {
            mode: SweepMode::Difference,
            ..SweepGrid::default()
        };
        let runs = expand_grid(&grid).unwrap();
        let names: BTreeSet<String> = runs.iter().map(tally_filename).collect();
        assert_eq!(names.len(), runs.len(), "filenames must be unique per cell");
        assert!(names.iter().any(|n| n.contains("baseline")));
        assert!(names.iter().any(|n| n.contains("d40")));
    }
}
