//! Ingestion of captured datasets laid out as
//! `class_name/sample_NN/theta_{±DD}_{base|delta}_{illum}.{png|raw}`.
//!
//! Base/delta partners pair by (theta, illumination); views missing their
//! differential partner are flagged and excluded from paired iteration.
//! Unparseable file names are reported per file and ingestion continues.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::manifest::{Manifest, ManifestRecord, Split};
use super::DataError;

#[derive(Clone, Debug)]
pub struct IngestLayout {
    /// Differential offset implied by the capture rig; the layout does not
    /// encode it per file.
    pub delta_deg: f64,
    pub extensions: Vec<String>,
}

impl Default for IngestLayout {
    fn default() -> Self {
        IngestLayout {
            delta_deg: 5.0,
            extensions: vec!["png".into(), "raw".into()],
        }
    }
}

#[derive(Clone, Debug)]
pub struct IngestWarning {
    pub path: String,
    pub message: String,
}

struct ParsedName {
    theta_deg: f64,
    is_delta: bool,
    illumination: String,
}

fn parse_file_name(stem: &str) -> Result<ParsedName, String> {
    // theta_{±DD}_{base|delta}_{illum}
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 4 || parts[0] != "theta" {
        return Err("expected theta_{±DD}_{base|delta}_{illum}".into());
    }
    let theta_deg: f64 = parts[1]
        .parse()
        .map_err(|_| format!("bad angle '{}'", parts[1]))?;
    let is_delta = match parts[2] {
        "base" => false,
        "delta" => true,
        other => return Err(format!("bad kind '{other}' (base|delta)")),
    };
    Ok(ParsedName {
        theta_deg,
        is_delta,
        illumination: parts[3].to_string(),
    })
}

fn sorted_dirs(root: &Path) -> Result<Vec<(String, std::path::PathBuf)>, DataError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Walks `root` and builds a manifest of paired view observations. Returns
/// the manifest plus per-file warnings. An empty directory yields an empty
/// manifest and no warnings.
pub fn ingest_gtos(
    root: &Path,
    layout: &IngestLayout,
) -> Result<(Manifest, Vec<IngestWarning>), DataError> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();

    for (class_id, (class_name, class_path)) in sorted_dirs(root)?.iter().enumerate() {
        for (sample_dir, sample_path) in sorted_dirs(class_path)? {
            let sample_id = format!("{class_name}/{sample_dir}");
            // (theta (bits for exact grouping), illum) -> (has base, has delta, base rel path)
            let mut pairs: BTreeMap<(u64, String), (bool, bool, Option<String>)> = BTreeMap::new();

            let mut names: Vec<String> = Vec::new();
            for entry in fs::read_dir(&sample_path)? {
                let entry = entry?;
                if entry.file_type()?.is_file() {
                    names.push(entry.file_name().to_string_lossy().into_owned());
                }
            }
            names.sort();

            for name in names {
                let Some((stem, ext)) = name.rsplit_once('.') else {
                    continue;
                };
                if ext == "shape" {
                    continue; // raw sidecars
                }
                if !layout.extensions.iter().any(|e| e == ext) {
                    continue;
                }
                let rel = format!("{class_name}/{sample_dir}/{name}");
                match parse_file_name(stem) {
                    Ok(parsed) => {
                        let key = (parsed.theta_deg.to_bits(), parsed.illumination.clone());
                        let slot = pairs.entry(key).or_insert((false, false, None));
                        if parsed.is_delta {
                            slot.1 = true;
                        } else {
                            slot.0 = true;
                            slot.2 = Some(rel);
                        }
                    }
                    Err(message) => warnings.push(IngestWarning { path: rel, message }),
                }
            }

            // view indices follow ascending theta within the sample
            let mut thetas: Vec<f64> = pairs.keys().map(|(bits, _)| f64::from_bits(*bits)).collect();
            thetas.sort_by(f64::total_cmp);
            thetas.dedup();
            let view_index = |theta: f64| thetas.iter().position(|&t| t == theta).unwrap();

            for ((theta_bits, illum), (has_base, has_delta, base_path)) in pairs {
                let theta = f64::from_bits(theta_bits);
                match (has_base, has_delta, base_path) {
                    (true, true, Some(path)) => records.push(ManifestRecord {
                        path,
                        class_id,
                        sample_id: sample_id.clone(),
                        view_index: view_index(theta),
                        theta_deg: theta,
                        delta_deg: layout.delta_deg,
                        illumination: illum,
                        split: Split::Unassigned,
                    }),
                    (true, false, Some(path)) => warnings.push(IngestWarning {
                        path,
                        message: format!("missing differential partner for theta {theta} ({illum})"),
                    }),
                    (false, true, _) => warnings.push(IngestWarning {
                        path: format!("{sample_id} theta {theta} ({illum})"),
                        message: "differential image without a base view".into(),
                    }),
                    _ => {}
                }
            }
        }
    }

    let manifest = Manifest::new(records);
    manifest.validate()?;
    Ok((manifest, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image_io::write_png_gray;
    use crate::tensor::Tensor;

    fn touch_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        let img = Tensor::from_vec(vec![1, 4, 4], vec![0.5; 16]).unwrap();
        write_png_gray(path, &img).unwrap();
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, warnings) = ingest_gtos(dir.path(), &IngestLayout::default()).unwrap();
        assert!(manifest.is_empty());
        assert!(warnings.is_empty());
    }

    #[test]
    fn paired_fixture_yields_all_records() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["asphalt", "grass"] {
            for sample in ["sample_00", "sample_01"] {
                for theta in ["+00", "+10"] {
                    for kind in ["base", "delta"] {
                        touch_png(&dir.path().join(format!(
                            "{class}/{sample}/theta_{theta}_{kind}_illum0.png"
                        )));
                    }
                }
            }
        }
        let (manifest, warnings) = ingest_gtos(dir.path(), &IngestLayout::default()).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        assert_eq!(manifest.len(), 2 * 2 * 2);
        assert_eq!(manifest.n_classes(), 2);
        // view indices follow ascending theta
        for r in &manifest.records {
            let expect = if r.theta_deg == 0.0 { 0 } else { 1 };
            assert_eq!(r.view_index, expect);
        }
    }

    #[test]
    fn missing_partner_is_flagged_and_excluded() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("moss/sample_00/theta_+00_base_illum0.png"));
        touch_png(&dir.path().join("moss/sample_00/theta_+00_delta_illum0.png"));
        touch_png(&dir.path().join("moss/sample_00/theta_+10_base_illum0.png")); // unpaired
        let (manifest, warnings) = ingest_gtos(dir.path(), &IngestLayout::default()).unwrap();
        assert_eq!(manifest.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].message.contains("missing differential partner"));
    }

    #[test]
    fn unparseable_names_warn_but_do_not_abort() {
        let dir = tempfile::tempdir().unwrap();
        touch_png(&dir.path().join("moss/sample_00/theta_+00_base_illum0.png"));
        touch_png(&dir.path().join("moss/sample_00/theta_+00_delta_illum0.png"));
        touch_png(&dir.path().join("moss/sample_00/notes.png"));
        let (manifest, warnings) = ingest_gtos(dir.path(), &IngestLayout::default()).unwrap();
        assert_eq!(manifest.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].path.contains("notes.png"));
    }
}
