//! From stored volumes to network inputs and back to native-size masks.
//!
//! Volumetric models see the whole volume, normalized and resampled to the
//! configured input extents; their probability map is resampled back to the
//! native extents before thresholding. The slice-stack model keeps the native
//! slice count: each volume is resampled in-plane only, every slice is
//! segmented from the nine slices around it, and the per-slice maps are
//! stacked back into a volume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{
    extract_slice_stack, fuse_vote, normalize, resample_trilinear, AnnotationSet, BinaryMask, Volume,
    SLICE_HALF_WINDOW,
};
use crate::error::{Error, Result};
use crate::metrics::{pairwise_agreement, MetricsReport};
use crate::model::{Model, ModelConfig, Variant};
use crate::phantom::{mask_file, volume_file, Manifest, Split};
use crate::tensor::{no_grad, Tensor};

/// Extents `[X, Y, Z]` of the grid a volume is resampled to before it
/// reaches the network.
pub fn network_grid(config: &ModelConfig, native: [usize; 3]) -> [usize; 3] {
    let [x, y, z] = config.input_extents;
    match config.variant {
        Variant::M3 => [x, y, native[2]],
        _ => [x, y, z],
    }
}

/// Normalized intensities on the network grid.
pub fn network_input(config: &ModelConfig, volume: &Volume) -> Result<Volume> {
    resample_trilinear(&normalize(volume), network_grid(config, volume.extents()))
}

/// Ground truth on the network grid. Interpolated values between 0 and 1
/// are kept as soft targets.
pub fn network_target(config: &ModelConfig, mask: &BinaryMask) -> Result<Volume> {
    resample_trilinear(&mask.to_volume(), network_grid(config, mask.extents()))
}

/// Input tensor for one training or inference pass: the whole grid for
/// volumetric models, the stack around slice `z` for the slice model.
pub fn input_tensor(config: &ModelConfig, grid: &Volume, z: usize) -> Result<Tensor<f32>> {
    let shape = config.input_shape();
    let data = match config.variant {
        Variant::M3 => extract_slice_stack(grid, z, SLICE_HALF_WINDOW)?.into_data(),
        _ => grid.data().to_vec(),
    };
    Tensor::new(&shape, data)
}

/// Target values matching [`input_tensor`].
pub fn target_values(config: &ModelConfig, target: &Volume, z: usize) -> Vec<f32> {
    match config.variant {
        Variant::M3 => {
            let [x, y, _] = target.extents();
            target.data()[z * x * y..(z + 1) * x * y].to_vec()
        }
        _ => target.data().to_vec(),
    }
}

/// Probabilities on the network grid.
pub fn grid_probabilities(model: &Model<f32>, grid: &Volume) -> Result<Volume> {
    let config = model.config();
    let expect = network_grid(config, grid.extents());
    if grid.extents() != expect {
        return Err(Error::shape(
            "grid_probabilities",
            format!("network grid is {expect:?}, got {:?}", grid.extents()),
        ));
    }
    let _guard = no_grad();
    let passes = match config.variant {
        Variant::M3 => grid.extents()[2],
        _ => 1,
    };
    let mut data = Vec::with_capacity(grid.data().len());
    for z in 0..passes {
        let logits = model.forward(&input_tensor(config, grid, z)?)?;
        data.extend(logits.sigmoid().data().iter());
    }
    Volume::new(grid.extents(), grid.spacing(), data)
}

/// Foreground probability at native extents.
pub fn predict(model: &Model<f32>, volume: &Volume) -> Result<Volume> {
    let grid = network_input(model.config(), volume)?;
    let prob = grid_probabilities(model, &grid)?;
    let prob = resample_trilinear(&prob, volume.extents())?;
    prob.with_spacing(volume.spacing())
}

/// Probability map and thresholded mask at native extents.
pub fn infer(model: &Model<f32>, volume: &Volume, threshold: f32) -> Result<(Volume, BinaryMask)> {
    let prob = predict(model, volume)?;
    let mask = prob.threshold(threshold);
    Ok((prob, mask))
}

/// A volume with its ground truth.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub id: String,
    pub volume: Volume,
    pub mask: BinaryMask,
}

/// Loads every phantom of `split` listed in the dataset manifest.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<Labeled>> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    manifest
        .split(split)
        .into_iter()
        .map(|e| load_labeled(dir, &e.id))
        .collect()
}

pub fn load_labeled(dir: &Path, id: &str) -> Result<Labeled> {
    let volume = Volume::load(dir.join(volume_file(id)))?;
    let mask_path = dir.join(mask_file(id));
    if !mask_path.exists() {
        return Err(Error::Data(format!("no ground truth for `{id}` at {}", mask_path.display())));
    }
    let mask = BinaryMask::load(mask_path)?;
    if mask.extents() != volume.extents() {
        return Err(Error::Data(format!(
            "`{id}`: mask extents {:?} differ from volume extents {:?}",
            mask.extents(),
            volume.extents()
        )));
    }
    Ok(Labeled { id: id.to_string(), volume, mask })
}

/// Scores the model's thresholded prediction on every item.
pub fn evaluate(model: &Model<f32>, items: &[Labeled], threshold: f32) -> Result<Vec<(String, MetricsReport)>> {
    items
        .iter()
        .map(|item| {
            let (prob, pred) = infer(model, &item.volume, threshold)?;
            Ok((item.id.clone(), MetricsReport::compute(&pred, &prob, &item.mask)?))
        })
        .collect()
}

/// Mean Jaccard over `reports`.
pub fn mean_jaccard(reports: &[(String, MetricsReport)]) -> f64 {
    reports.iter().map(|r| r.1.jaccard).sum::<f64>() / reports.len().max(1) as f64
}

/// Annotation files `<id>_ann<k>.rvol` found in `dir`, grouped by id and
/// ordered by annotator number.
pub fn find_annotations(dir: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let dir = dir.as_ref();
    let mut found: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".rvol") else {
            continue;
        };
        let Some((id, k)) = stem.rsplit_once("_ann") else {
            continue;
        };
        if let Ok(k) = k.parse::<usize>() {
            found.entry(id.to_string()).or_default().push((k, path));
        }
    }
    Ok(found
        .into_iter()
        .map(|(id, mut v)| {
            v.sort();
            (id, v.into_iter().map(|p| p.1).collect())
        })
        .collect())
}

/// Fused mask and agreement matrix for one volume.
#[derive(Clone, Debug)]
pub struct Combined {
    pub id: String,
    pub mask: BinaryMask,
    pub agreement: Vec<Vec<f64>>,
}

/// Majority-votes every annotated volume in `dir`. Volumes with fewer than
/// two annotations are an error rather than being passed through.
pub fn combine_annotations(dir: impl AsRef<Path>) -> Result<Vec<Combined>> {
    let groups = find_annotations(&dir)?;
    if groups.is_empty() {
        return Err(Error::Data(format!(
            "no `<id>_ann<k>.rvol` files in {}",
            dir.as_ref().display()
        )));
    }
    groups
        .into_iter()
        .map(|(id, paths)| {
            let masks = paths.iter().map(BinaryMask::load).collect::<Result<Vec<_>>>()?;
            let set = AnnotationSet { id: id.clone(), masks };
            let mask = fuse_vote(&set)?;
            let agreement = pairwise_agreement(&set)?;
            Ok(Combined { id, mask, agreement })
        })
        .collect()
}

/// Writes fused masks as `<id>_mask.rvol` and an `agreement.csv` with one
/// row per annotator pair (diagonal included).
pub fn write_combined(out: impl AsRef<Path>, combined: &[Combined]) -> Result<()> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for c in combined {
        c.mask.save(out.join(mask_file(&c.id)))?;
    }
    let path = out.join("agreement.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("agreement.csv: {e}"));
    w.write_record(["id", "annotator_a", "annotator_b", "jaccard"]).map_err(csv_err)?;
    for c in combined {
        for (i, row) in c.agreement.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.write_record([c.id.clone(), (i + 1).to_string(), (j + 1).to_string(), v.to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
