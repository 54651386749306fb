//! Volumes, masks and the preprocessing applied before a volume reaches a
//! network.
//!
//! All grids are stored x-fastest with extents `[X, Y, Z]`, which is the
//! same memory order as a `[1, 1, Z, Y, X]` tensor.

mod rvol;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use rvol::{read_rvol, write_rvol, Rvol, RVOL_MAGIC, RVOL_VERSION};

/// Voxels in a grid with the given extents.
pub fn voxel_count(extents: [usize; 3]) -> usize {
    extents.iter().product()
}

fn check_extents(op: &'static str, extents: [usize; 3], len: usize) -> Result<()> {
    if extents.contains(&0) {
        return Err(Error::shape(op, format!("extents must be positive, got {extents:?}")));
    }
    if voxel_count(extents) != len {
        return Err(Error::shape(
            op,
            format!("extents {extents:?} hold {} voxels but buffer has {len}", voxel_count(extents)),
        ));
    }
    Ok(())
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Data(format!("voxel spacing must be positive and finite, got {spacing:?}")))
    }
}

/// A scalar intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    /// Voxel size per axis in microns; carried as metadata only.
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_extents("volume", extents, data.len())?;
        check_spacing(spacing)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite intensity {} at voxel {i}", data[i])));
        }
        Ok(Self { extents, spacing, data })
    }

    pub fn filled(extents: [usize; 3], value: f32) -> Result<Self> {
        Self::new(extents, [1.0; 3], vec![value; voxel_count(extents)])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.extents;
        x + nx * (y + ny * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Foreground where the value exceeds `threshold`.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            extents: self.extents,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| u8::from(v > threshold)).collect(),
        }
    }

    /// The grid as a `[1, 1, Z, Y, X]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [x, y, z] = self.extents;
        Tensor::new(&[1, 1, z, y, x], self.data.clone()).expect("extents match the buffer")
    }
}

/// A binary voxel mask (stored as 0/1 bytes).
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    extents: [usize; 3],
    spacing: [f32; 3],
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        check_extents("mask", extents, data.len())?;
        check_spacing(spacing)?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Data(format!("mask value {} at voxel {i} is not 0 or 1", data[i])));
        }
        Ok(Self { extents, spacing, data })
    }

    pub fn from_bools(extents: [usize; 3], bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        Self::new(extents, [1.0; 3], bits.into_iter().map(u8::from).collect())
    }

    pub fn empty(extents: [usize; 3]) -> Self {
        Self {
            extents,
            spacing: [1.0; 3],
            data: vec![0; voxel_count(extents)],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let [nx, ny, _] = self.extents;
        self.data[x + nx * (y + ny * z)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// The mask as a 0/1 intensity grid.
    pub fn to_volume(&self) -> Volume {
        Volume {
            extents: self.extents,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Masks from several annotators for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub id: String,
    pub masks: Vec<BinaryMask>,
}

impl AnnotationSet {
    fn check(&self, op: &'static str, min: usize) -> Result<[usize; 3]> {
        if self.masks.len() < min {
            return Err(Error::Data(format!(
                "{op} needs at least {min} annotations for `{}`, found {}",
                self.id,
                self.masks.len()
            )));
        }
        let extents = self.masks[0].extents;
        if let Some(m) = self.masks.iter().find(|m| m.extents != extents) {
            return Err(Error::shape(
                op,
                format!("annotations of `{}` disagree in extents: {extents:?} vs {:?}", self.id, m.extents),
            ));
        }
        Ok(extents)
    }
}

/// Rescales intensities to `[0, 1]`; a constant volume maps to zeros.
pub fn normalize(volume: &Volume) -> Volume {
    let (lo, hi) = volume
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 {
        volume.data.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; volume.data.len()]
    };
    Volume { data, ..volume.clone() }
}

/// Source coordinate of target sample `i` under the align-corners mapping:
/// the first and last samples of both grids coincide, and a single target
/// sample sits at the centre of the source.
pub fn align_corners_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src - 1) as f64 / 2.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Interpolation taps `(i0, i1, t)` for every target sample along one axis.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            let pos = align_corners_coord(i, src, dst);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// One axis of separable linear resampling on an x-fastest grid.
fn resample_axis(data: &[f32], extents: [usize; 3], axis: usize, target: usize) -> (Vec<f32>, [usize; 3]) {
    let taps = linear_taps(extents[axis], target);
    let mut out_ext = extents;
    out_ext[axis] = target;
    let [ox, oy, oz] = out_ext;
    let [nx, ny, _] = extents;
    let mut out = Vec::with_capacity(ox * oy * oz);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let at = |c: [usize; 3]| data[c[0] + nx * (c[1] + ny * c[2])];
                let mut c = [x, y, z];
                let (i0, i1, t) = taps[c[axis]];
                c[axis] = i0;
                let a = at(c);
                c[axis] = i1;
                let b = at(c);
                out.push(a + (b - a) * t);
            }
        }
    }
    (out, out_ext)
}

/// Trilinear resampling to `target` extents (align-corners mapping).
///
/// Computed separably, one axis at a time, which is algebraically the same
/// as weighting the eight surrounding voxels.
pub fn resample_trilinear(volume: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::shape("resample_trilinear", format!("target extents must be positive, got {target:?}")));
    }
    if target == volume.extents {
        return Ok(volume.clone());
    }
    let mut data = volume.data.clone();
    let mut ext = volume.extents;
    for axis in 0..3 {
        if ext[axis] != target[axis] {
            (data, ext) = resample_axis(&data, ext, axis, target[axis]);
        }
    }
    let spacing = std::array::from_fn(|a| {
        volume.spacing[a] * volume.extents[a].max(2).saturating_sub(1) as f32 / target[a].max(2).saturating_sub(1) as f32
    });
    Volume::new(target, spacing, data)
}

/// Majority vote: a voxel is set when at least `ceil(2m / 3)` of the `m`
/// annotators set it.
pub fn fuse_vote(set: &AnnotationSet) -> Result<BinaryMask> {
    let extents = set.check("fuse_vote", 2)?;
    let m = set.masks.len();
    let need = (2 * m).div_ceil(3);
    let data = (0..voxel_count(extents))
        .map(|i| {
            let votes: usize = set.masks.iter().map(|mask| mask.data[i] as usize).sum();
            u8::from(votes >= need)
        })
        .collect();
    Ok(BinaryMask {
        extents,
        spacing: set.masks[0].spacing,
        data,
    })
}

/// Per-voxel mean of the annotators' masks, a soft target in `[0, 1]`.
pub fn fuse_average(set: &AnnotationSet) -> Result<Volume> {
    let extents = set.check("fuse_average", 1)?;
    let m = set.masks.len() as f32;
    let data = (0..voxel_count(extents))
        .map(|i| set.masks.iter().map(|mask| mask.data[i] as u32).sum::<u32>() as f32 / m)
        .collect();
    Ok(Volume {
        extents,
        spacing: set.masks[0].spacing,
        data,
    })
}

/// Half-width of the slice window fed to the slice-stack model.
pub const SLICE_HALF_WINDOW: usize = 4;

/// Reflects an out-of-range slice index back into `0..len` without
/// repeating the edge slice: `-1 -> 1`, `len -> len - 2`.
pub fn mirror_index(i: isize, len: usize) -> usize {
    debug_assert!(len >= 2);
    let period = 2 * (len as isize - 1);
    let r = i.rem_euclid(period);
    if r < len as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Slice indices of the window centred on `z`.
pub fn slice_window(z: usize, depth: usize, half: usize) -> Result<Vec<usize>> {
    if depth < 2 {
        return Err(Error::Data(format!("slice stacks need at least 2 slices, volume has {depth}")));
    }
    if z >= depth {
        return Err(Error::Data(format!("slice {z} out of range for depth {depth}")));
    }
    Ok((-(half as isize)..=half as isize)
        .map(|o| mirror_index(z as isize + o, depth))
        .collect())
}

/// The `2 * half + 1` slices around `z` as a volume of that depth, with
/// out-of-range slices mirrored.
pub fn extract_slice_stack(volume: &Volume, z: usize, half: usize) -> Result<Volume> {
    let [x, y, depth] = volume.extents;
    let plane = x * y;
    let mut data = Vec::with_capacity(plane * (2 * half + 1));
    for s in slice_window(z, depth, half)? {
        data.extend_from_slice(&volume.data[s * plane..(s + 1) * plane]);
    }
    Volume::new([x, y, 2 * half + 1], volume.spacing, data)
}

/// Number of volumes drawn per epoch.
pub const EPOCH_SIZE: usize = 10;

/// Dataset indices visited in one epoch: `count` distinct items when the
/// dataset is large enough, otherwise `count` draws with replacement. The
/// sequence depends only on `(seed, epoch)`.
pub fn epoch_sampler(len: usize, count: usize, seed: u64, epoch: u64) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Data("cannot sample an epoch from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    Ok(if len >= count {
        index::sample(&mut rng, len, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..len)).collect()
    })
}

#[cfg(test)]
mod tests;
