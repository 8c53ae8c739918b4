//! Accumulation of detected weights, depth-threshold bins, and the global
//! energy ledger, with enough second moments for standard errors.
//!
//! Tallies are single-writer; cross-worker aggregation goes through
//! [`TallySet::merge_from`] in a fixed reduction order so results never
//! depend on scheduling. Snapshots serialize to a versioned JSON record so
//! analysis can run as a separate process.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::medium::DetectorSpec;
use crate::transport::{Status, TraceOutcome};

pub const TALLY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TallyError {
    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),
    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed tally record: {0}")]
    Malformed(String),
}

/// Per-detector sums. `weight_sq_sum` carries the second moment for error
/// bars; figures without uncertainty are not verifiable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorTally {
    pub weight_sum: f64,
    pub weight_sq_sum: f64,
    pub photon_count: u64,
}

/// Depth-thresholded detected weight (tag mode): photons whose max depth
/// reached at least the threshold, per the closed `max_depth >= d` rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthTally {
    pub weight_sum: f64,
    pub weight_sq_sum: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub absorbed: f64,
    pub sal_absorbed: f64,
    pub escaped_undetected: f64,
    pub transmitted_bottom: f64,
    pub roulette_residual: f64,
}

impl Buckets {
    pub fn total(&self) -> f64 {
        self.absorbed
            + self.sal_absorbed
            + self.escaped_undetected
            + self.transmitted_bottom
            + self.roulette_residual
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Histories terminated by the event cap.
    pub step_overflow_count: u64,
    /// Weight created by roulette survival boosts; balances the residual
    /// bucket in expectation and closes the ledger exactly.
    pub roulette_boost_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TallySet {
    pub schema_version: u32,
    pub launched_photons: u64,
    /// Total post-specular launch weight.
    pub launched_weight: f64,
    pub detected: Vec<DetectorTally>,
    pub depth_grid: Vec<f64>,
    /// Indexed `[detector][depth threshold]`; empty per detector when the
    /// depth grid is empty (difference-method runs).
    pub detected_by_depth: Vec<Vec<DepthTally>>,
    pub buckets: Buckets,
    pub seed: u64,
    pub scene_hash: u64,
    pub diagnostics: Diagnostics,
}

impl TallySet {
    pub fn new(detectors: usize, depth_grid: Vec<f64>, seed: u64, scene_hash: u64) -> Self {
        let detected_by_depth = vec![vec![DepthTally::default(); depth_grid.len()]; detectors];
        Self {
            schema_version: TALLY_SCHEMA_VERSION,
            launched_photons: 0,
            launched_weight: 0.0,
            detected: vec![DetectorTally::default(); detectors],
            depth_grid,
            detected_by_depth,
            buckets: Buckets::default(),
            seed,
            scene_hash,
            diagnostics: Diagnostics::default(),
        }
    }

    fn add_detected(&mut self, detector: usize, weight: f64, max_depth: f64) {
        let d = &mut self.detected[detector];
        d.weight_sum += weight;
        d.weight_sq_sum += weight * weight;
        d.photon_count += 1;
        for (k, &threshold) in self.depth_grid.iter().enumerate() {
            if max_depth >= threshold {
                let bin = &mut self.detected_by_depth[detector][k];
                bin.weight_sum += weight;
                bin.weight_sq_sum += weight * weight;
            }
        }
    }

    /// Score a photon that exited the top surface. Disc hits credit the full
    /// weight; annulus hits credit the area-normalized share and send the
    /// remainder to `escaped_undetected`, which keeps the ledger exact while
    /// matching disc-mode expectations.
    pub fn record_exit(
        &mut self,
        exit_x: f64,
        exit_y: f64,
        weight: f64,
        max_depth: f64,
        detectors: &DetectorSpec,
    ) {
        match detectors.classify(exit_x, exit_y) {
            Some((detector, scale)) => {
                let credited = weight * scale;
                self.add_detected(detector, credited, max_depth);
                self.buckets.escaped_undetected += weight - credited;
            }
            None => self.buckets.escaped_undetected += weight,
        }
    }

    /// Fold one finished photon history into the tally.
    pub fn record_outcome(&mut self, outcome: &TraceOutcome) {
        self.launched_photons += 1;
        self.launched_weight += outcome.launch_weight;
        self.buckets.absorbed += outcome.absorbed_weight;
        self.buckets.sal_absorbed += outcome.sal_film_absorbed;
        self.buckets.roulette_residual += outcome.roulette_residual;
        self.diagnostics.roulette_boost_weight += outcome.roulette_boost;
        if outcome.overflowed {
            self.diagnostics.step_overflow_count += 1;
        }
        let photon = &outcome.photon;
        match photon.status {
            Status::Detected { detector, weight } => {
                self.add_detected(detector, weight, photon.max_depth);
                self.buckets.escaped_undetected += photon.weight - weight;
            }
            Status::SalAbsorbed => self.buckets.sal_absorbed += photon.weight,
            Status::EscapedUndetected => self.buckets.escaped_undetected += photon.weight,
            Status::TransmittedBottom => self.buckets.transmitted_bottom += photon.weight,
            Status::Absorbed => {} // interior absorption already accumulated
            Status::Alive => unreachable!("trace returns terminal states"),
        }
    }

    fn check_compatible(&self, other: &Self) -> Result<(), TallyError> {
        if self.scene_hash != other.scene_hash {
            return Err(TallyError::ProvenanceMismatch(format!(
                "scene fingerprints differ ({:#x} vs {:#x})",
                self.scene_hash, other.scene_hash
            )));
        }
        if self.detected.len() != other.detected.len() {
            return Err(TallyError::ProvenanceMismatch(format!(
                "detector grids differ ({} vs {} detectors)",
                self.detected.len(),
                other.detected.len()
            )));
        }
        if self.depth_grid != other.depth_grid {
            return Err(TallyError::ProvenanceMismatch(
                "depth grids differ".into(),
            ));
        }
        Ok(())
    }

    /// Field-wise sum of two tallies over the same provenance.
    pub fn merge_from(&mut self, other: &Self) -> Result<(), TallyError> {
        self.check_compatible(other)?;
        self.launched_photons += other.launched_photons;
        self.launched_weight += other.launched_weight;
        for (a, b) in self.detected.iter_mut().zip(&other.detected) {
            a.weight_sum += b.weight_sum;
            a.weight_sq_sum += b.weight_sq_sum;
            a.photon_count += b.photon_count;
        }
        for (row_a, row_b) in self.detected_by_depth.iter_mut().zip(&other.detected_by_depth) {
            for (a, b) in row_a.iter_mut().zip(row_b) {
                a.weight_sum += b.weight_sum;
                a.weight_sq_sum += b.weight_sq_sum;
            }
        }
        self.buckets.absorbed += other.buckets.absorbed;
        self.buckets.sal_absorbed += other.buckets.sal_absorbed;
        self.buckets.escaped_undetected += other.buckets.escaped_undetected;
        self.buckets.transmitted_bottom += other.buckets.transmitted_bottom;
        self.buckets.roulette_residual += other.buckets.roulette_residual;
        self.diagnostics.step_overflow_count += other.diagnostics.step_overflow_count;
        self.diagnostics.roulette_boost_weight += other.diagnostics.roulette_boost_weight;
        Ok(())
    }

    pub fn merge(mut a: Self, b: &Self) -> Result<Self, TallyError> {
        a.merge_from(b)?;
        Ok(a)
    }

    /// Standard error of the per-launched-photon mean detected weight:
    /// sqrt((E[w^2] - E[w]^2) / N) over all launched photons.
    pub fn standard_error(&self, detector: usize) -> f64 {
        per_launch_standard_error(
            self.detected[detector].weight_sum,
            self.detected[detector].weight_sq_sum,
            self.launched_photons,
        )
    }

    /// Standard error of the depth-binned mean (tag mode).
    pub fn depth_standard_error(&self, detector: usize, depth_index: usize) -> f64 {
        let bin = &self.detected_by_depth[detector][depth_index];
        per_launch_standard_error(bin.weight_sum, bin.weight_sq_sum, self.launched_photons)
    }

    /// Signed ledger imbalance: launched minus everything scored, with the
    /// roulette boost credited against the residual bucket. Zero up to fp
    /// rounding whether or not roulette ran.
    pub fn ledger_imbalance(&self) -> f64 {
        let detected: f64 = self.detected.iter().map(|d| d.weight_sum).sum();
        self.launched_weight + self.diagnostics.roulette_boost_weight
            - detected
            - self.buckets.total()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("tally serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TallyError> {
        #[derive(Deserialize)]
        struct VersionProbe {
            schema_version: u32,
        }
        let probe: VersionProbe = serde_json::from_str(text)
            .map_err(|e| TallyError::Malformed(e.to_string()))?;
        if probe.schema_version != TALLY_SCHEMA_VERSION {
            return Err(TallyError::SchemaVersion {
                found: probe.schema_version,
                expected: TALLY_SCHEMA_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| TallyError::Malformed(e.to_string()))
    }
}

fn per_launch_standard_error(weight_sum: f64, weight_sq_sum: f64, launched: u64) -> f64 {
    if launched < 2 {
        return 0.0;
    }
    let n = launched as f64;
    let mean = weight_sum / n;
    let variance = (weight_sq_sum / n - mean * mean).max(0.0);
    (variance / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::{DetectorGeometry, DetectorSpec};

    fn empty(detectors: usize, depths: Vec<f64>) -> TallySet {
        TallySet::new(detectors, depths, 7, 0xfeed)
    }

    fn launch_n(tally: &mut TallySet, n: u64) {
        tally.launched_photons += n;
        tally.launched_weight += n as f64;
    }

    #[test]
    fn record_exit_center_hit_and_near_miss() {
        let det = DetectorSpec::default();
        let mut tally = empty(16, vec![]);
        launch_n(&mut tally, 2);
        tally.record_exit(10.0, 0.0, 0.5, 3.0, &det);
        assert_eq!(tally.detected[0].weight_sum, 0.5);
        assert_eq!(tally.detected[0].photon_count, 1);
        // 1.42 mm off-axis misses the 1.41 mm radius
        tally.record_exit(10.0, 1.42, 0.5, 3.0, &det);
        assert_eq!(tally.detected[0].photon_count, 1);
        assert_eq!(tally.buckets.escaped_undetected, 0.5);
    }

    #[test]
    fn depth_bins_are_monotone_by_construction() {
        let det = DetectorSpec::default();
        let mut tally = empty(16, vec![1.0, 2.0, 3.0]);
        launch_n(&mut tally, 3);
        tally.record_exit(10.0, 0.0, 1.0, 2.5, &det);
        tally.record_exit(10.0, 0.0, 1.0, 1.5, &det);
        tally.record_exit(10.0, 0.0, 1.0, 0.5, &det);
        let bins: Vec<f64> = tally.detected_by_depth[0]
            .iter()
            .map(|b| b.weight_sum)
            .collect();
        assert_eq!(bins, vec![2.0, 1.0, 0.0]);
        for pair in bins.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn annulus_credit_keeps_ledger_exact() {
        let det = DetectorSpec {
            geometry: DetectorGeometry::Annulus,
            ..DetectorSpec::default()
        };
        let mut tally = empty(16, vec![]);
        launch_n(&mut tally, 1);
        tally.record_exit(0.0, 10.0, 1.0, 2.0, &det);
        let scale = 1.41 / 40.0;
        assert!((tally.detected[0].weight_sum - scale).abs() < 1e-15);
        assert!((tally.buckets.escaped_undetected - (1.0 - scale)).abs() < 1e-15);
        assert!(tally.ledger_imbalance().abs() < 1e-12);
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let det = DetectorSpec::default();
        let mut a = empty(16, vec![1.0]);
        launch_n(&mut a, 2);
        a.record_exit(10.0, 0.0, 0.25, 2.0, &det);
        a.record_exit(45.0, 0.5, 0.125, 0.5, &det);
        let mut b = empty(16, vec![1.0]);
        launch_n(&mut b, 1);
        b.record_exit(25.0, 0.0, 0.5, 1.0, &det);

        let id = TallySet::merge(a.clone(), &empty(16, vec![1.0])).unwrap();
        assert_eq!(id, a);
        let ab = TallySet::merge(a.clone(), &b).unwrap();
        let ba = TallySet::merge(b, &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn merge_rejects_provenance_mismatch() {
        let a = empty(16, vec![]);
        let mut b = empty(16, vec![]);
        b.scene_hash = 1;
        assert!(matches!(
            TallySet::merge(a.clone(), &b),
            Err(TallyError::ProvenanceMismatch(_))
        ));
        let c = empty(8, vec![]);
        assert!(TallySet::merge(a.clone(), &c).is_err());
        let d = empty(16, vec![5.0]);
        assert!(TallySet::merge(a, &d).is_err());
    }

    #[test]
    fn standard_error_zero_detections() {
        let mut tally = empty(16, vec![]);
        launch_n(&mut tally, 100);
        assert_eq!(tally.standard_error(3), 0.0);
    }

    #[test]
    fn standard_error_bernoulli_closed_form() {
        // k of N photons detected at fixed weight w: se = sqrt(w^2 p(1-p)/N)
        let det = DetectorSpec::default();
        let mut tally = empty(16, vec![]);
        let (n, k, w) = (1000u64, 137u64, 0.8);
        launch_n(&mut tally, n);
        for _ in 0..k {
            tally.record_exit(10.0, 0.0, w, 1.0, &det);
        }
        let p = k as f64 / n as f64;
        let expected = (w * w * p * (1.0 - p) / n as f64).sqrt();
        assert!((tally.standard_error(0) - expected).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_and_version_gate() {
        let det = DetectorSpec::default();
        let mut tally = empty(16, vec![1.0, 2.0]);
        launch_n(&mut tally, 5);
        tally.record_exit(10.0, 0.0, 0.5, 1.5, &det);
        let json = tally.to_json();
        let back = TallySet::from_json(&json).unwrap();
        assert_eq!(tally, back);

        let bumped = json.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(matches!(
            TallySet::from_json(&bumped),
            Err(TallyError::SchemaVersion { found: 99, .. })
        ));
    }
}
