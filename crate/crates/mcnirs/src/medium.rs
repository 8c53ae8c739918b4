//! Scene description: layered slab geometry, wavelength-indexed optical
//! properties, the absorbing probe plane, and detector placement.
//!
//! Coordinates: z increases downward into the tissue, the source sits at the
//! origin on the surface, detectors lie along +x. Layers are infinite planar
//! slabs stacked top to bottom; the bottom layer may be semi-infinite.

mod format;

pub use format::parse_scene;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("layer '{layer}' has no optical properties for {wavelength_nm} nm")]
    MissingWavelength { layer: String, wavelength_nm: f64 },
}

/// Vacuum wavelength in nanometres.
///
/// Lookups are exact-match; there is no spectral interpolation between grid
/// points. Ordering and hashing go through the IEEE bit pattern so the type
/// can key property tables.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Wavelength(f64);

impl Wavelength {
    pub fn new(nm: f64) -> Result<Self, SceneError> {
        if !nm.is_finite() || nm <= 0.0 {
            return Err(SceneError::Invalid(format!(
                "wavelength must be positive, got {nm} nm"
            )));
        }
        Ok(Self(nm))
    }

    pub fn nm(&self) -> f64 {
        self.0
    }
}

impl PartialEq for Wavelength {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == std::cmp::Ordering::Equal
    }
}
impl Eq for Wavelength {}
impl PartialOrd for Wavelength {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Wavelength {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
impl std::hash::Hash for Wavelength {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}
impl fmt::Display for Wavelength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-layer, per-wavelength optical properties. Units: mu_a and mu_s in
/// mm^-1; g and n dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalProperties {
    pub mu_a: f64,
    pub mu_s: f64,
    pub g: f64,
    pub n: f64,
}

impl OpticalProperties {
    pub fn mu_t(&self) -> f64 {
        self.mu_a + self.mu_s
    }

    fn validate(&self, layer: &str) -> Result<(), SceneError> {
        let ctx = |msg: String| SceneError::Invalid(format!("layer '{layer}': {msg}"));
        if !self.mu_a.is_finite() || self.mu_a < 0.0 {
            return Err(ctx(format!("negative absorption mu_a = {}", self.mu_a)));
        }
        if !self.mu_s.is_finite() || self.mu_s < 0.0 {
            return Err(ctx(format!("negative scattering mu_s = {}", self.mu_s)));
        }
        if self.mu_t() <= 0.0 {
            return Err(ctx("mu_a + mu_s must be positive".into()));
        }
        if !self.g.is_finite() || !(-1.0..=1.0).contains(&self.g) {
            return Err(ctx(format!("anisotropy g = {} outside [-1, 1]", self.g)));
        }
        if !self.n.is_finite() || self.n < 1.0 {
            return Err(ctx(format!("refractive index n = {} below 1", self.n)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Thickness {
    /// Slab thickness in mm.
    Finite(f64),
    /// Bottom layer only: extends to z = +inf.
    SemiInfinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub thickness: Thickness,
    pub properties: BTreeMap<Wavelength, OpticalProperties>,
}

/// The absorbing probe plane at a fixed depth. Perfect mode terminates any
/// photon reaching the plane; finite mode attenuates crossings through a
/// thin zero-scattering film (see `transport::SAL_FILM_THICKNESS_MM`) and
/// exists for the perfect-limit equivalence check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperAbsorbentLayer {
    pub depth_mm: f64,
    pub mode: SalMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SalMode {
    Perfect,
    /// mu_a in mm^-1; mu_s is zero by construction.
    Finite { mu_a: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorGeometry {
    Disc,
    Annulus,
}

/// Surface detectors at fixed center offsets from the source along +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub distances_mm: Vec<f64>,
    pub radius_mm: f64,
    pub geometry: DetectorGeometry,
}

impl Default for DetectorSpec {
    /// 16 detectors every 5 mm over 10-85 mm, radius 1.41 mm, discs.
    fn default() -> Self {
        Self {
            distances_mm: (0..16).map(|i| 10.0 + 5.0 * i as f64).collect(),
            radius_mm: 1.41,
            geometry: DetectorGeometry::Disc,
        }
    }
}

impl DetectorSpec {
    /// Classify a top-surface exit point. Returns the detector index and the
    /// statistical weight scale (1 for discs; the disc-to-annulus area ratio
    /// for annuli so expectations match disc mode).
    pub fn classify(&self, x: f64, y: f64) -> Option<(usize, f64)> {
        match self.geometry {
            DetectorGeometry::Disc => self
                .distances_mm
                .iter()
                .position(|&r| ((x - r).powi(2) + y * y).sqrt() <= self.radius_mm)
                .map(|i| (i, 1.0)),
            DetectorGeometry::Annulus => {
                let rho = (x * x + y * y).sqrt();
                self.distances_mm
                    .iter()
                    .position(|&r| (rho - r).abs() <= self.radius_mm)
                    .map(|i| (i, self.radius_mm / (4.0 * self.distances_mm[i])))
            }
        }
    }

    fn validate(&self) -> Result<(), SceneError> {
        if self.distances_mm.is_empty() {
            return Err(SceneError::Invalid("detector list is empty".into()));
        }
        if !self.radius_mm.is_finite() || self.radius_mm <= 0.0 {
            return Err(SceneError::Invalid(format!(
                "detector radius must be positive, got {}",
                self.radius_mm
            )));
        }
        for pair in self.distances_mm.windows(2) {
            if pair[1] <= pair[0] {
                return Err(SceneError::Invalid(format!(
                    "detector distances not strictly increasing: {} then {}",
                    pair[0], pair[1]
                )));
            }
            if pair[1] - pair[0] <= 2.0 * self.radius_mm {
                return Err(SceneError::Invalid(format!(
                    "overlapping detectors: centers {} and {} mm are closer than 2 x radius {}",
                    pair[0], pair[1], self.radius_mm
                )));
            }
        }
        if self.distances_mm[0] <= 0.0 {
            return Err(SceneError::Invalid(
                "detector distances must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Immutable, validated scene. Construction goes through [`load_scene`] or
/// [`SceneConfig::validated`]; after that the value is safe to share across
/// worker threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub ambient_n: f64,
    pub layers: Vec<Layer>,
    pub sal: Option<SuperAbsorbentLayer>,
    pub detectors: DetectorSpec,
}

/// Parse and validate structured scene config text.
pub fn load_scene(source: &str) -> Result<SceneConfig, SceneError> {
    let scene = parse_scene(source)?;
    scene.validate()?;
    Ok(scene)
}

impl SceneConfig {
    pub fn validated(self) -> Result<Self, SceneError> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !self.ambient_n.is_finite() || self.ambient_n < 1.0 {
            return Err(SceneError::Invalid(format!(
                "ambient refractive index {} below 1",
                self.ambient_n
            )));
        }
        if self.layers.is_empty() {
            return Err(SceneError::Invalid("scene has no layers".into()));
        }
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.thickness {
                Thickness::Finite(t) if !t.is_finite() || t <= 0.0 => {
                    return Err(SceneError::Invalid(format!(
                        "layer '{}': thickness must be positive, got {t}",
                        layer.name
                    )));
                }
                Thickness::SemiInfinite if i != last => {
                    return Err(SceneError::Invalid(format!(
                        "layer '{}': only the bottom layer may be semi-infinite",
                        layer.name
                    )));
                }
                _ => {}
            }
            if layer.properties.is_empty() {
                return Err(SceneError::Invalid(format!(
                    "layer '{}' has no wavelength rows",
                    layer.name
                )));
            }
            for props in layer.properties.values() {
                props.validate(&layer.name)?;
            }
        }
        self.detectors.validate()?;
        if let Some(sal) = &self.sal {
            if !sal.depth_mm.is_finite() || sal.depth_mm <= 0.0 {
                return Err(SceneError::Invalid(format!(
                    "sal depth must be positive, got {}",
                    sal.depth_mm
                )));
            }
            if let Some(total) = self.total_finite_depth() {
                if sal.depth_mm >= total {
                    return Err(SceneError::Invalid(format!(
                        "sal depth {} mm not strictly inside the {total} mm layer stack",
                        sal.depth_mm
                    )));
                }
            }
            if let SalMode::Finite { mu_a } = sal.mode {
                let max_mu_a = self
                    .layers
                    .iter()
                    .flat_map(|l| l.properties.values())
                    .map(|p| p.mu_a)
                    .fold(0.0_f64, f64::max);
                if mu_a <= 1e3 * max_mu_a {
                    return Err(SceneError::Invalid(format!(
                        "finite sal mu_a = {mu_a} must exceed 1000 x the maximum tissue mu_a ({max_mu_a})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total stack depth, or None when the bottom layer is semi-infinite.
    pub fn total_finite_depth(&self) -> Option<f64> {
        let mut total = 0.0;
        for layer in &self.layers {
            match layer.thickness {
                Thickness::Finite(t) => total += t,
                Thickness::SemiInfinite => return None,
            }
        }
        Some(total)
    }

    /// Index of the layer whose half-open interval [top, bottom) contains z.
    /// A semi-infinite bottom layer catches all remaining depth, and any
    /// z at or beyond the bottom of a finite stack maps to the last layer.
    pub fn layer_at_depth(&self, z: f64) -> usize {
        debug_assert!(z >= 0.0);
        let mut top = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.thickness {
                Thickness::Finite(t) => {
                    if z < top + t {
                        return i;
                    }
                    top += t;
                }
                Thickness::SemiInfinite => return i,
            }
        }
        self.layers.len() - 1
    }

    /// Stored properties for one layer at one wavelength; exact-match lookup.
    pub fn properties_for(
        &self,
        layer_index: usize,
        wavelength: Wavelength,
    ) -> Result<&OpticalProperties, SceneError> {
        let layer = &self.layers[layer_index];
        layer
            .properties
            .get(&wavelength)
            .ok_or(SceneError::MissingWavelength {
                layer: layer.name.clone(),
                wavelength_nm: wavelength.nm(),
            })
    }

    /// Canonical config-text serialization; `load_scene(scene.serialize())`
    /// reproduces the scene field-exactly (floats print shortest round-trip).
    pub fn serialize(&self) -> String {
        format::serialize_scene(self)
    }

    /// FNV-1a fingerprint of the canonical serialization; stable across
    /// processes and platforms, used for tally provenance.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.serialize().as_bytes())
    }

    /// Resolve the scene for a single run wavelength: layer bounds plus the
    /// property tuple of every layer, checked up front so the transport hot
    /// loop never does fallible lookups.
    pub fn resolve(&self, wavelength: Wavelength) -> Result<ResolvedScene, SceneError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut top = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            let props = *self.properties_for(i, wavelength)?;
            let z_top = top;
            let z_bottom = match layer.thickness {
                Thickness::Finite(t) => {
                    top += t;
                    Some(top)
                }
                Thickness::SemiInfinite => None,
            };
            layers.push(ResolvedLayer {
                z_top,
                z_bottom,
                mu_a: props.mu_a,
                mu_s: props.mu_s,
                mu_t: props.mu_t(),
                g: props.g,
                n: props.n,
            });
        }
        Ok(ResolvedScene {
            wavelength,
            ambient_n: self.ambient_n,
            layers,
            sal: self.sal,
            detectors: self.detectors.clone(),
            scene_fingerprint: self.fingerprint(),
        })
    }
}

/// One layer with its bounds and the property tuple for the run wavelength.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedLayer {
    pub z_top: f64,
    /// None for the semi-infinite bottom layer.
    pub z_bottom: Option<f64>,
    pub mu_a: f64,
    pub mu_s: f64,
    pub mu_t: f64,
    pub g: f64,
    pub n: f64,
}

/// Scene specialized to one wavelength; everything `transport::trace` needs.
#[derive(Debug, Clone)]
pub struct ResolvedScene {
    pub wavelength: Wavelength,
    pub ambient_n: f64,
    pub layers: Vec<ResolvedLayer>,
    pub sal: Option<SuperAbsorbentLayer>,
    pub detectors: DetectorSpec,
    pub scene_fingerprint: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
