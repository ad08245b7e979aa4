//! In-memory dataset loading: each manifest record becomes an
//! (I_v, I_delta) pair, loaded once and shared by training and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::angular::differential_image;
use crate::tensor::{Element, Tensor};

use super::image_io::{delta_path, load_image};
use super::manifest::{Manifest, ManifestRecord, Split};
use super::DataError;

pub struct LoadedItem<T: Element> {
    pub record: ManifestRecord,
    /// Base image `[C, H, W]`.
    pub rgb: Tensor<T>,
    /// Differential image I_v - I_{v+delta}, same shape.
    pub diff: Tensor<T>,
}

pub struct LoadedSplit<T: Element> {
    pub items: Vec<LoadedItem<T>>,
    pub n_classes: usize,
}

fn convert<T: Element>(img: Tensor<f32>) -> Tensor<T> {
    Tensor::from_vec(
        img.shape().to_vec(),
        img.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
    .unwrap()
}

/// Loads every record of `split` from `root`, in manifest order.
pub fn load_split<T: Element>(
    manifest: &Manifest,
    root: &Path,
    split: Split,
) -> Result<LoadedSplit<T>, DataError> {
    manifest.validate()?;
    let records: Vec<&ManifestRecord> = manifest.records_in(split).collect();
    let items: Vec<Result<LoadedItem<T>, DataError>> = records
        .par_iter()
        .map(|record| {
            let base = load_image(&root.join(&record.path))?;
            let partner = load_image(&root.join(delta_path(&record.path)?))?;
            let diff = differential_image(&base, &partner)?;
            Ok(LoadedItem {
                record: (*record).clone(),
                rgb: convert(base),
                diff: convert(diff),
            })
        })
        .collect();
    let items: Vec<LoadedItem<T>> = items.into_iter().collect::<Result<_, _>>()?;
    Ok(LoadedSplit {
        items,
        n_classes: manifest.n_classes(),
    })
}

/// A sample's views under one illumination, sorted by base angle.
pub struct ViewSet<'a, T: Element> {
    pub sample_id: String,
    pub illumination: String,
    pub class_id: usize,
    pub views: Vec<&'a LoadedItem<T>>,
}

/// Groups loaded items into view sets keyed by (sample, illumination).
pub fn group_view_sets<T: Element>(split: &LoadedSplit<T>) -> Vec<ViewSet<'_, T>> {
    let mut map: BTreeMap<(String, String), Vec<&LoadedItem<T>>> = BTreeMap::new();
    for item in &split.items {
        map.entry((item.record.sample_id.clone(), item.record.illumination.clone()))
            .or_default()
            .push(item);
    }
    map.into_iter()
        .map(|((sample_id, illumination), mut views)| {
            views.sort_by(|a, b| a.record.theta_deg.total_cmp(&b.record.theta_deg));
            let class_id = views[0].record.class_id;
            ViewSet {
                sample_id,
                illumination,
                class_id,
                views,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{GenerateConfig, generate_synthetic};

    #[test]
    fn loads_pairs_and_groups_views() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GenerateConfig::angular_default(11);
        cfg.n_samples_per_class = 2;
        cfg.image_size = 16;
        cfg.views_deg = vec![-10.0, 0.0, 10.0];
        let generated = generate_synthetic(&cfg, dir.path()).unwrap();

        let split = load_split::<f32>(&generated.manifest, dir.path(), Split::Unassigned).unwrap();
        assert_eq!(split.items.len(), 4 * 2 * 3);
        assert_eq!(split.n_classes, 4);

        let sets = group_view_sets(&split);
        assert_eq!(sets.len(), 4 * 2);
        for set in &sets {
            assert_eq!(set.views.len(), 3);
            let thetas: Vec<f64> = set.views.iter().map(|v| v.record.theta_deg).collect();
            assert_eq!(thetas, vec![-10.0, 0.0, 10.0]);
        }
    }
}
