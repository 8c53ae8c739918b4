//! Scene config text format.
//!
//! Line-oriented sections; `#` starts a comment. See docs/scene_format.md
//! for the grammar and configs/example.scene for the canonical fixture.
//!
//! ```text
//! [scene]
//! ambient_n = 1.0
//!
//! [layer]                      # repeated, top to bottom
//! name = dermis
//! thickness_mm = 2.0           # or: thickness_mm = semi_infinite (bottom only)
//! props_650 = 0.03, 2.0, 0.9, 1.4   # mu_a, mu_s, g, n at 650 nm
//!
//! [sal]                        # optional
//! depth_mm = 25.0
//! mode = perfect               # or: mode = finite 1e6
//!
//! [detectors]                  # optional; defaults to the standard grid
//! range = 10, 85, 5            # or: distances_mm = 10, 15, ...
//! radius_mm = 1.41
//! geometry = disc              # or annulus
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{
    DetectorGeometry, DetectorSpec, Layer, OpticalProperties, SalMode, SceneConfig, SceneError,
    SuperAbsorbentLayer, Thickness, Wavelength,
};

fn parse_err(line: usize, message: impl Into<String>) -> SceneError {
    SceneError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(line: usize, field: &str, raw: &str) -> Result<f64, SceneError> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(line, format!("field '{field}': expected a number, got '{raw}'")))
}

fn parse_f64_list(line: usize, field: &str, raw: &str) -> Result<Vec<f64>, SceneError> {
    raw.split(',')
        .map(|item| parse_f64(line, field, item))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    None,
    Scene,
    Layer,
    Sal,
    Detectors,
}

#[derive(Default)]
struct LayerDraft {
    name: Option<String>,
    thickness: Option<Thickness>,
    properties: BTreeMap<Wavelength, OpticalProperties>,
    start_line: usize,
}

impl LayerDraft {
    fn finish(self) -> Result<Layer, SceneError> {
        let name = self
            .name
            .ok_or_else(|| parse_err(self.start_line, "[layer] section missing 'name'"))?;
        let thickness = self.thickness.ok_or_else(|| {
            parse_err(
                self.start_line,
                format!("[layer] '{name}' missing 'thickness_mm'"),
            )
        })?;
        Ok(Layer {
            name,
            thickness,
            properties: self.properties,
        })
    }
}

/// Parse scene config text. Syntax only; invariants are checked by
/// [`SceneConfig::validate`] (which [`super::load_scene`] calls).
pub fn parse_scene(source: &str) -> Result<SceneConfig, SceneError> {
    let mut section = Section::None;
    let mut ambient_n = 1.0;
    let mut layers: Vec<Layer> = Vec::new();
    let mut current_layer: Option<LayerDraft> = None;
    let mut sal_depth: Option<f64> = None;
    let mut sal_mode: Option<SalMode> = None;
    let mut sal_line = 0;
    let mut saw_sal = false;
    let mut distances: Option<Vec<f64>> = None;
    let mut radius = 1.41;
    let mut geometry = DetectorGeometry::Disc;
    let mut saw_detectors = false;

    for (idx, raw_line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }

        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line_no, "unterminated section header"))?
                .trim();
            if let Some(draft) = current_layer.take() {
                layers.push(draft.finish()?);
            }
            section = match name {
                "scene" => Section::Scene,
                "layer" => {
                    current_layer = Some(LayerDraft {
                        start_line: line_no,
                        ..LayerDraft::default()
                    });
                    Section::Layer
                }
                "sal" => {
                    if saw_sal {
                        return Err(parse_err(line_no, "duplicate [sal] section"));
                    }
                    saw_sal = true;
                    sal_line = line_no;
                    Section::Sal
                }
                "detectors" => {
                    saw_detectors = true;
                    Section::Detectors
                }
                other => return Err(parse_err(line_no, format!("unknown section [{other}]"))),
            };
            continue;
        }

        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(parse_err(line_no, format!("field '{key}' has no value")));
        }

        match section {
            Section::None => {
                return Err(parse_err(
                    line_no,
                    format!("field '{key}' appears before any section header"),
                ))
            }
            Section::Scene => match key {
                "ambient_n" => ambient_n = parse_f64(line_no, key, value)?,
                _ => return Err(parse_err(line_no, format!("unknown [scene] field '{key}'"))),
            },
            Section::Layer => {
                let draft = current_layer.as_mut().expect("layer section open");
                match key {
                    "name" => draft.name = Some(value.to_string()),
                    "thickness_mm" => {
                        draft.thickness = Some(if value == "semi_infinite" {
                            Thickness::SemiInfinite
                        } else {
                            Thickness::Finite(parse_f64(line_no, key, value)?)
                        });
                    }
                    _ if key.starts_with("props_") => {
                        let nm = key["props_".len()..].parse::<f64>().map_err(|_| {
                            parse_err(line_no, format!("bad wavelength suffix in '{key}'"))
                        })?;
                        let wavelength = Wavelength::new(nm).map_err(|e| {
                            parse_err(line_no, format!("field '{key}': {e}"))
                        })?;
                        let vals = parse_f64_list(line_no, key, value)?;
                        if vals.len() != 4 {
                            return Err(parse_err(
                                line_no,
                                format!("field '{key}': expected 'mu_a, mu_s, g, n' (4 values)"),
                            ));
                        }
                        let props = OpticalProperties {
                            mu_a: vals[0],
                            mu_s: vals[1],
                            g: vals[2],
                            n: vals[3],
                        };
                        if draft.properties.insert(wavelength, props).is_some() {
                            return Err(parse_err(line_no, format!("duplicate '{key}' row")));
                        }
                    }
                    _ => return Err(parse_err(line_no, format!("unknown [layer] field '{key}'"))),
                }
            }
            Section::Sal => match key {
                "depth_mm" => sal_depth = Some(parse_f64(line_no, key, value)?),
                "mode" => {
                    sal_mode = Some(match value.split_whitespace().collect::<Vec<_>>()[..] {
                        ["perfect"] => SalMode::Perfect,
                        ["finite", mu_a] => SalMode::Finite {
                            mu_a: parse_f64(line_no, key, mu_a)?,
                        },
                        _ => {
                            return Err(parse_err(
                                line_no,
                                format!("field 'mode': expected 'perfect' or 'finite <mu_a>', got '{value}'"),
                            ))
                        }
                    });
                }
                _ => return Err(parse_err(line_no, format!("unknown [sal] field '{key}'"))),
            },
            Section::Detectors => match key {
                "distances_mm" => distances = Some(parse_f64_list(line_no, key, value)?),
                "range" => {
                    let vals = parse_f64_list(line_no, key, value)?;
                    if vals.len() != 3 {
                        return Err(parse_err(
                            line_no,
                            "field 'range': expected 'start, stop, step'",
                        ));
                    }
                    let (start, stop, step) = (vals[0], vals[1], vals[2]);
                    if step <= 0.0 || stop < start {
                        return Err(parse_err(
                            line_no,
                            format!("field 'range': bad bounds {start}, {stop}, {step}"),
                        ));
                    }
                    let n = ((stop - start) / step + 0.5).floor() as usize + 1;
                    distances = Some((0..n).map(|i| start + step * i as f64).collect());
                }
                "radius_mm" => radius = parse_f64(line_no, key, value)?,
                "geometry" => {
                    geometry = match value {
                        "disc" => DetectorGeometry::Disc,
                        "annulus" => DetectorGeometry::Annulus,
                        _ => {
                            return Err(parse_err(
                                line_no,
                                format!("field 'geometry': expected 'disc' or 'annulus', got '{value}'"),
                            ))
                        }
                    };
                }
                _ => {
                    return Err(parse_err(
                        line_no,
                        format!("unknown [detectors] field '{key}'"),
                    ))
                }
            },
        }
    }

    if let Some(draft) = current_layer.take() {
        layers.push(draft.finish()?);
    }

    let sal = if saw_sal {
        Some(SuperAbsorbentLayer {
            depth_mm: sal_depth
                .ok_or_else(|| parse_err(sal_line, "[sal] section missing 'depth_mm'"))?,
            mode: sal_mode.unwrap_or(SalMode::Perfect),
        })
    } else {
        None
    };

    let detectors = if saw_detectors {
        DetectorSpec {
            distances_mm: distances.unwrap_or_else(|| DetectorSpec::default().distances_mm),
            radius_mm: radius,
            geometry,
        }
    } else {
        DetectorSpec::default()
    };

    Ok(SceneConfig {
        ambient_n,
        layers,
        sal,
        detectors,
    })
}

/// Canonical serialization. Floats use shortest round-trip formatting, so
/// parsing the output reproduces every field bit-exactly.
pub fn serialize_scene(scene: &SceneConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[scene]");
    let _ = writeln!(out, "ambient_n = {}", scene.ambient_n);

    for layer in &scene.layers {
        let _ = writeln!(out);
        let _ = writeln!(out, "[layer]");
        let _ = writeln!(out, "name = {}", layer.name);
        match layer.thickness {
            Thickness::Finite(t) => {
                let _ = writeln!(out, "thickness_mm = {t}");
            }
            Thickness::SemiInfinite => {
                let _ = writeln!(out, "thickness_mm = semi_infinite");
            }
        }
        for (w, p) in &layer.properties {
            let _ = writeln!(
                out,
                "props_{} = {}, {}, {}, {}",
                w.nm(),
                p.mu_a,
                p.mu_s,
                p.g,
                p.n
            );
        }
    }

    if let Some(sal) = &scene.sal {
        let _ = writeln!(out);
        let _ = writeln!(out, "[sal]");
        let _ = writeln!(out, "depth_mm = {}", sal.depth_mm);
        match sal.mode {
            SalMode::Perfect => {
                let _ = writeln!(out, "mode = perfect");
            }
            SalMode::Finite { mu_a } => {
                let _ = writeln!(out, "mode = finite {mu_a}");
            }
        }
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "[detectors]");
    let _ = writeln!(
        out,
        "distances_mm = {}",
        scene
            .detectors
            .distances_mm
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(out, "radius_mm = {}", scene.detectors.radius_mm);
    let _ = writeln!(
        out,
        "geometry = {}",
        match scene.detectors.geometry {
            DetectorGeometry::Disc => "disc",
            DetectorGeometry::Annulus => "annulus",
        }
    );
    out
}

#[cfg(test)]
mod tests {
    use super::super::load_scene;
    use super::*;

    const MINIMAL: &str = "
[layer]
name = medium
thickness_mm = semi_infinite
props_850 = 0.01, 1.0, 0.9, 1.4
";

    #[test]
    fn minimal_scene_parses_with_defaults() {
        let scene = load_scene(MINIMAL).unwrap();
        assert_eq!(scene.ambient_n, 1.0);
        assert_eq!(scene.layers.len(), 1);
        assert_eq!(scene.layers[0].thickness, Thickness::SemiInfinite);
        assert_eq!(scene.detectors, DetectorSpec::default());
        assert!(scene.sal.is_none());
        let p = scene
            .properties_for(0, Wavelength::new(850.0).unwrap())
            .unwrap();
        assert_eq!((p.mu_a, p.mu_s, p.g, p.n), (0.01, 1.0, 0.9, 1.4));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let bad = "[layer]\nname = x\nthickness_mm = fat\n";
        match load_scene(bad).unwrap_err() {
            SceneError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("thickness_mm"), "{message}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_field_is_an_error() {
        let bad = "[scene]\nbogus = 1\n";
        assert!(matches!(
            load_scene(bad),
            Err(SceneError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn overlapping_detector_fixture_rejected() {
        let bad = format!("{MINIMAL}\n[detectors]\ndistances_mm = 10, 12\nradius_mm = 1.41\n");
        let err = load_scene(&bad).unwrap_err();
        assert!(err.to_string().contains("overlapping detectors"));
    }

    #[test]
    fn detector_range_expands_inclusive() {
        let text = format!("{MINIMAL}\n[detectors]\nrange = 10, 85, 5\n");
        let scene = load_scene(&text).unwrap();
        assert_eq!(scene.detectors.distances_mm, DetectorSpec::default().distances_mm);
    }

    #[test]
    fn three_layer_sal_round_trip() {
        let text = "
[scene]
ambient_n = 1.0

[layer]
name = top
thickness_mm = 2.5
props_650 = 0.03, 1.5, 0.9, 1.4
props_850 = 0.01, 1.2, 0.9, 1.4

[layer]
name = mid
thickness_mm = 12.5
props_650 = 0.005, 1.1, 0.85, 1.44
props_850 = 0.007, 0.9, 0.85, 1.44

[layer]
name = bottom
thickness_mm = semi_infinite
props_650 = 0.02, 0.8, 0.92, 1.38
props_850 = 0.025, 0.7, 0.92, 1.38

[sal]
depth_mm = 25
mode = perfect
";
        let scene = load_scene(text).unwrap();
        assert_eq!(scene.layers.len(), 3);
        assert_eq!(scene.sal.unwrap().depth_mm, 25.0);
        let round = load_scene(&scene.serialize()).unwrap();
        assert_eq!(scene, round);
    }

    #[test]
    fn finite_sal_mode_round_trip() {
        let text = format!("{MINIMAL}\n[sal]\ndepth_mm = 7.25\nmode = finite 1e6\n");
        let scene = load_scene(&text).unwrap();
        assert_eq!(
            scene.sal.unwrap().mode,
            SalMode::Finite { mu_a: 1e6 }
        );
        let round = load_scene(&scene.serialize()).unwrap();
        assert_eq!(scene, round);
    }

    #[test]
    fn awkward_floats_round_trip_exactly() {
        let mut scene = load_scene(MINIMAL).unwrap();
        scene.ambient_n = 1.0 + 1e-13;
        scene.layers[0].properties.insert(
            Wavelength::new(650.123456789).unwrap(),
            OpticalProperties {
                mu_a: 0.1 / 3.0,
                mu_s: std::f64::consts::PI,
                g: 0.899999999999999,
                n: 1.4000000000001,
            },
        );
        let round = load_scene(&scene.serialize()).unwrap();
        assert_eq!(scene, round);
    }
}
