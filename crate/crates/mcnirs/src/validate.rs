//! Built-in physics checks: analytic oracles and self-consistency tests the
//! transport kernel must pass before any sweep output is trusted. The
//! `validate` CLI subcommand runs these and reports one machine-readable
//! line per check; the acceptance test suite pins them at full scale.

use crate::analysis::penetration_fraction;
use crate::medium::{load_scene, SceneConfig, Wavelength};
use crate::rng::{PhotonRng, RngStream, BATCH_SIZE};
use crate::tally::TallySet;
use crate::transport::{
    run_simulation, scatter_hg, trace, RunMode, RunSpec, TraceMode, TraceParams,
};

/// Relative tolerance for the exact weight ledger (fp accumulation over a
/// million histories stays orders of magnitude below this).
pub const LEDGER_REL_TOL: f64 = 1e-9;

/// Statistical bands are 3 standard errors throughout.
pub const SIGMA_BAND: f64 = 3.0;

/// Absolute floor added to statistical bands so exactly-matched estimators
/// (common random numbers) tolerate fp rounding of large sums.
pub const BAND_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Measured deviation in the check's own units (often a z-score).
    pub measured: f64,
    pub limit: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn from_band(name: &str, deviation: f64, limit: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: deviation.abs() <= limit,
            measured: deviation,
            limit,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} measured={:.6e} limit={:.6e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.limit,
            self.detail
        )
    }
}

/// Synthetic media used by the checks and the acceptance suite. All values
/// are arbitrary but fixed; nothing here encodes real tissue.
pub mod scenes {
    use super::*;

    /// Pure absorber: every history is one exponential step deep.
    pub const BEER_LAMBERT: &str = "
[layer]
name = absorber
thickness_mm = semi_infinite
props_850 = 1.0, 0.0, 0.0, 1.0
";

    /// Three dissimilar finite layers over a semi-infinite base; index
    /// mismatches at every interface.
    pub const THREE_LAYER: &str = "
[scene]
ambient_n = 1.0

[layer]
name = top
thickness_mm = 2
props_850 = 0.5, 1.0, 0.5, 1.4

[layer]
name = mid
thickness_mm = 4
props_850 = 0.3, 1.5, 0.7, 1.33

[layer]
name = base
thickness_mm = semi_infinite
props_850 = 0.6, 0.8, 0.2, 1.5
";

    /// Scattering half-space for absorber-plane cross-checks; shallow planes
    /// keep the difference signal well populated.
    pub const EQUIVALENCE: &str = "
[scene]
ambient_n = 1.0

[layer]
name = medium
thickness_mm = semi_infinite
props_850 = 0.1, 2.0, 0.8, 1.4
";

    /// Depth thresholds used with [`EQUIVALENCE`].
    pub fn equivalence_depths() -> Vec<f64> {
        (1..=7).map(f64::from).collect()
    }

    /// Full-grid synthetic stack: three layers with rows at all seven
    /// standard wavelengths and mild spectral slopes.
    pub const FULL_GRID: &str = "
[scene]
ambient_n = 1.0

[layer]
name = upper
thickness_mm = 3
props_650 = 0.1, 1.8, 0.85, 1.4
props_700 = 0.095, 1.75, 0.85, 1.4
props_750 = 0.09, 1.7, 0.85, 1.4
props_800 = 0.085, 1.65, 0.85, 1.4
props_850 = 0.08, 1.6, 0.85, 1.4
props_900 = 0.085, 1.55, 0.85, 1.4
props_950 = 0.09, 1.5, 0.85, 1.4

[layer]
name = middle
thickness_mm = 9
props_650 = 0.07, 1.4, 0.9, 1.37
props_700 = 0.065, 1.35, 0.9, 1.37
props_750 = 0.06, 1.3, 0.9, 1.37
props_800 = 0.055, 1.25, 0.9, 1.37
props_850 = 0.05, 1.2, 0.9, 1.37
props_900 = 0.055, 1.15, 0.9, 1.37
props_950 = 0.06, 1.1, 0.9, 1.37

[layer]
name = lower
thickness_mm = semi_infinite
props_650 = 0.09, 1.2, 0.88, 1.39
props_700 = 0.085, 1.15, 0.88, 1.39
props_750 = 0.08, 1.1, 0.88, 1.39
props_800 = 0.075, 1.05, 0.88, 1.39
props_850 = 0.07, 1.0, 0.88, 1.39
props_900 = 0.075, 0.95, 0.88, 1.39
props_950 = 0.08, 0.9, 0.88, 1.39
";

    pub fn beer_lambert() -> SceneConfig {
        load_scene(BEER_LAMBERT).expect("fixture scene is valid")
    }

    pub fn three_layer() -> SceneConfig {
        load_scene(THREE_LAYER).expect("fixture scene is valid")
    }

    pub fn equivalence() -> SceneConfig {
        load_scene(EQUIVALENCE).expect("fixture scene is valid")
    }

    pub fn full_grid() -> SceneConfig {
        load_scene(FULL_GRID).expect("fixture scene is valid")
    }
}

fn wavelength_850() -> Wavelength {
    Wavelength::new(850.0).expect("positive")
}

/// Run `photons` histories sequentially with the standard batch layout and
/// fold each terminal state into `visit`.
fn for_each_history(
    scene: &SceneConfig,
    photons: u64,
    seed: u64,
    mode: TraceMode,
    params: &TraceParams,
    mut visit: impl FnMut(&crate::transport::TraceOutcome),
) {
    let resolved = scene.resolve(wavelength_850()).expect("fixture resolves");
    let n_batches = photons.div_ceil(BATCH_SIZE);
    for batch in 0..n_batches {
        let stream = RngStream::new(seed, batch);
        let count = BATCH_SIZE.min(photons - batch * BATCH_SIZE);
        for slot in 0..count {
            let mut rng = stream.photon_rng(slot);
            let outcome = trace(&mut rng, &resolved, mode, params);
            visit(&outcome);
        }
    }
}

/// Pure-absorber depth oracle: with mu_s = 0 the launched-weight fraction
/// whose max depth reaches d is exp(-mu_a d). Checked at mu_a = 1/mm,
/// d = 1 mm against a 3-sigma binomial band.
pub fn beer_lambert_check(photons: u64, seed: u64) -> CheckOutcome {
    let scene = scenes::beer_lambert();
    let depth = 1.0;
    let expected = (-1.0_f64 * depth).exp();
    let mut reached = 0.0;
    let mut launched = 0.0;
    for_each_history(
        &scene,
        photons,
        seed,
        TraceMode::Tag,
        &TraceParams::default(),
        |outcome| {
            launched += outcome.launch_weight;
            if outcome.photon.max_depth >= depth {
                reached += outcome.launch_weight;
            }
        },
    );
    let fraction = reached / launched;
    let sigma = (expected * (1.0 - expected) / photons as f64).sqrt();
    CheckOutcome::from_band(
        "beer_lambert",
        fraction - expected,
        SIGMA_BAND * sigma,
        format!("fraction={fraction:.6} expected={expected:.6} photons={photons}"),
    )
}

/// Sample-mean oracle for the scattering cosine, with an injectable sampler
/// so a deliberately broken phase function is caught (mutation canary).
pub fn hg_moment_check_with(
    name: &str,
    g: f64,
    draws: u64,
    seed: u64,
    mut cos_sample: impl FnMut(&mut PhotonRng) -> f64,
) -> CheckOutcome {
    let mut rng = RngStream::new(seed, 0).photon_rng(0);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let c = cos_sample(&mut rng);
        sum += c;
        sum_sq += c * c;
    }
    let n = draws as f64;
    let mean = sum / n;
    let variance = (sum_sq / n - mean * mean).max(0.0);
    let sigma = (variance / n).sqrt();
    CheckOutcome::from_band(
        name,
        mean - g,
        SIGMA_BAND * sigma,
        format!("mean={mean:.6} g={g} draws={draws}"),
    )
}

/// First-moment check of the sampled phase function (through the full
/// direction rotation) for g in {0, 0.5, 0.9}.
pub fn hg_moment_checks(draws: u64, seed: u64) -> Vec<CheckOutcome> {
    // off-axis start direction so the local-frame rotation is exercised
    let start = {
        let n = (14.0_f64).sqrt();
        [1.0 / n, 2.0 / n, 3.0 / n]
    };
    [0.0, 0.5, 0.9]
        .iter()
        .map(|&g| {
            hg_moment_check_with(
                &format!("hg_moment_g{g}"),
                g,
                draws,
                seed,
                move |rng| {
                    let xi1 = rng.uniform();
                    let xi2 = rng.uniform();
                    let out = scatter_hg(start, g, xi1, xi2);
                    start[0] * out[0] + start[1] * out[1] + start[2] * out[2]
                },
            )
        })
        .collect()
}

/// Weight-ledger checks on the three-layer scene. The exact ledger (with
/// the roulette boost credited against the residual bucket) must close to
/// fp precision whether or not roulette runs; with roulette on, the
/// boost-minus-residual fluctuation must sit inside its own 3-sigma band,
/// which is the unbiasedness statement.
pub fn conservation_checks(photons: u64, seed: u64, roulette: bool) -> Vec<CheckOutcome> {
    let scene = scenes::three_layer();
    let params = if roulette {
        TraceParams::default()
    } else {
        TraceParams::without_roulette()
    };
    let mode_name = if roulette { "roulette" } else { "no_roulette" };

    let mut tally = TallySet::new(16, vec![], seed, 0);
    let mut delta_sum = 0.0; // per-photon boost - residual
    let mut delta_sq = 0.0;
    for_each_history(&scene, photons, seed, TraceMode::Tag, &params, |outcome| {
        tally.record_outcome(outcome);
        let delta = outcome.roulette_boost - outcome.roulette_residual;
        delta_sum += delta;
        delta_sq += delta * delta;
    });

    let mut checks = vec![CheckOutcome::from_band(
        &format!("conservation_exact_{mode_name}"),
        tally.ledger_imbalance() / tally.launched_weight,
        LEDGER_REL_TOL,
        format!(
            "imbalance={:.3e} launched={:.6e} photons={photons}",
            tally.ledger_imbalance(),
            tally.launched_weight
        ),
    )];
    if roulette {
        let sigma = delta_sq.sqrt(); // se of the sum, mean ~ 0
        checks.push(CheckOutcome::from_band(
            "conservation_roulette_unbiased",
            delta_sum,
            SIGMA_BAND * sigma + BAND_FLOOR,
            format!(
                "boost-residual={delta_sum:.6e} residual={:.6e}",
                tally.buckets.roulette_residual
            ),
        ));
    }
    checks
}

/// The core method cross-check: per-detector penetration fractions from
/// paired baseline/absorber runs must match tag-mode threshold binning at
/// every depth. With common random numbers the two estimators agree almost
/// exactly; the band is 3 combined standard errors plus an fp floor.
/// Returns the worst cell as a single outcome.
pub fn sal_tag_equivalence_check(photons: u64, seed: u64, workers: usize) -> CheckOutcome {
    let scene = scenes::equivalence();
    let depths = scenes::equivalence_depths();
    let params = TraceParams::default();

    let run = |mode: RunMode, cell_scene: &SceneConfig| {
        run_simulation(
            cell_scene,
            &RunSpec {
                wavelength: wavelength_850(),
                mode,
                photons,
                seed,
                workers,
                params,
            },
        )
        .expect("fixture scene runs")
    };

    let tag = run(
        RunMode::Tag {
            depth_grid: depths.clone(),
        },
        &scene,
    );
    let baseline = run(RunMode::Tag { depth_grid: vec![] }, &scene);

    let mut worst_z = 0.0_f64;
    let mut worst_detail = String::from("no detections anywhere");
    for (k, &depth) in depths.iter().enumerate() {
        let mut sal_scene = scene.clone();
        sal_scene.sal = Some(crate::medium::SuperAbsorbentLayer {
            depth_mm: depth,
            mode: crate::medium::SalMode::Perfect,
        });
        let with_sal = run(RunMode::Sal, &sal_scene);
        for detector in 0..baseline.detected.len() {
            let diff = penetration_fraction(&baseline, &with_sal, detector)
                .expect("paired runs")
                .fraction;
            let tag_pf = tag.detected_by_depth[detector][k].weight_sum / tag.launched_weight;
            let sigma = (baseline.standard_error(detector).powi(2)
                + with_sal.standard_error(detector).powi(2)
                + tag.depth_standard_error(detector, k).powi(2))
            .sqrt();
            let band = SIGMA_BAND * sigma + BAND_FLOOR;
            let z = (diff - tag_pf).abs() / band;
            if z > worst_z {
                worst_z = z;
                worst_detail = format!(
                    "worst cell depth={depth}mm detector={detector} diff={diff:.3e} tag={tag_pf:.3e} band={band:.3e}"
                );
            }
        }
    }
    CheckOutcome {
        name: "sal_tag_equivalence".into(),
        passed: worst_z <= 1.0,
        measured: worst_z,
        limit: 1.0,
        detail: format!("{worst_detail} photons={photons} (measured is deviation/band)"),
    }
}

/// Bit-identical tallies for different worker counts on the same seed.
pub fn determinism_check(photons: u64, seed: u64) -> CheckOutcome {
    let scene = scenes::three_layer();
    let spec = |workers: usize| RunSpec {
        wavelength: wavelength_850(),
        mode: RunMode::Tag {
            depth_grid: vec![1.0, 3.0],
        },
        photons,
        seed,
        workers,
        params: TraceParams::default(),
    };
    let one = run_simulation(&scene, &spec(1)).expect("fixture runs").to_json();
    let four = run_simulation(&scene, &spec(4)).expect("fixture runs").to_json();
    let equal = one == four;
    CheckOutcome {
        name: "determinism_workers".into(),
        passed: equal,
        measured: if equal { 0.0 } else { 1.0 },
        limit: 0.0,
        detail: format!("workers 1 vs 4, photons={photons}, byte_equal={equal}"),
    }
}

/// The user-facing validation battery. Quick mode shrinks every budget to a
/// smoke-test scale.
pub fn run_all(quick: bool, workers: usize, seed: u64) -> Vec<CheckOutcome> {
    let (beer, hg, conserve, equiv, determinism) = if quick {
        (10_000, 10_000, 10_000, 10_000, 10_000)
    } else {
        (1_000_000, 1_000_000, 200_000, 200_000, 50_000)
    };
    let mut checks = vec![beer_lambert_check(beer, seed)];
    checks.extend(hg_moment_checks(hg, seed));
    checks.extend(conservation_checks(conserve, seed, false));
    checks.extend(conservation_checks(conserve, seed, true));
    checks.push(sal_tag_equivalence_check(equiv, seed, workers));
    checks.push(determinism_check(determinism, seed));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEED: u64 = 0xC0FFEE;

    #[test]
    fn beer_lambert_small_scale() {
        let outcome = beer_lambert_check(50_000, SEED);
        assert!(outcome.passed, "{}", outcome.line());
    }

    #[test]
    fn hg_moments_small_scale() {
        for outcome in hg_moment_checks(100_000, SEED) {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }

    #[test]
    fn conservation_small_scale() {
        for outcome in conservation_checks(20_000, SEED, false) {
            assert!(outcome.passed, "{}", outcome.line());
        }
        for outcome in conservation_checks(20_000, SEED, true) {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }

    #[test]
    fn equivalence_small_scale() {
        let outcome = sal_tag_equivalence_check(20_000, SEED, 1);
        assert!(outcome.passed, "{}", outcome.line());
    }

    #[test]
    fn flipped_anisotropy_canary_fails_the_moment_check() {
        // deliberately wrong sign on g must trip the first-moment oracle
        let outcome = hg_moment_check_with("hg_canary", 0.9, 50_000, SEED, |rng| {
            let xi1 = rng.uniform();
            let xi2 = rng.uniform();
            let out = scatter_hg([0.0, 0.0, 1.0], -0.9, xi1, xi2);
            out[2]
        });
        assert!(!outcome.passed, "canary must fail: {}", outcome.line());
    }

    #[test]
    fn quick_battery_passes() {
        for outcome in run_all(true, 1, SEED) {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }
}
