//! Synthetic retina-like volumes with a known hole-shaped cavity.
//!
//! A phantom is a stack of horizontal bands (constant along X and Z, varying
//! along the depth axis Y) with an hourglass cavity cut through them. The
//! cavity is two elliptic frusta sharing a waist: the upper one runs from the
//! inner opening down to the waist, the lower one from the waist to the base.
//! Every cross-section is an axis-aligned ellipse centred on the same
//! vertical axis, and its semi-axes vary linearly with depth inside each
//! frustum.
//!
//! A voxel belongs to the cavity when its centre lies inside the solid. The
//! mask is therefore exact for the geometry in the spec, and always a single
//! 6-connected component as long as every semi-axis is at least one voxel.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{voxel_count, BinaryMask, Volume};
use crate::error::{Error, Result};

/// Intensity of cavity voxels before noise.
pub const CAVITY_INTENSITY: f32 = 0.0;
/// Largest accepted noise amplitude (half-width of the uniform noise).
pub const MAX_NOISE: f32 = 0.15;
/// Clearance between the cavity and the volume border, in voxels.
pub const MARGIN: f64 = 2.0;
/// Smallest extents [`PhantomSpec::random`] can place a hole in.
pub const MIN_EXTENTS: [usize; 3] = [16, 16, 12];

/// Hourglass cavity geometry in voxel coordinates.
///
/// Radii are `[x, z]` semi-axes; depths are positions along Y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoleProfile {
    /// Axis position `[x, z]`.
    pub center: [f64; 2],
    /// Depth of the inner opening.
    pub top: f64,
    /// Depth of the narrowest cross-section.
    pub waist: f64,
    /// Depth of the base.
    pub bottom: f64,
    pub opening_radii: [f64; 2],
    pub waist_radii: [f64; 2],
    pub base_radii: [f64; 2],
}

impl HoleProfile {
    /// Semi-axes of the cross-section at depth `y`, or `None` outside the
    /// hole's depth range.
    pub fn radii_at(&self, y: f64) -> Option<[f64; 2]> {
        if y < self.top || y > self.bottom {
            return None;
        }
        let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
        Some(if y <= self.waist {
            lerp(self.opening_radii, self.waist_radii, (y - self.top) / (self.waist - self.top))
        } else {
            lerp(self.waist_radii, self.base_radii, (y - self.waist) / (self.bottom - self.waist))
        })
    }

    /// Whether the point `(x, y, z)` lies inside the solid.
    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        self.radii_at(y).is_some_and(|[a, c]| {
            let u = (x - self.center[0]) / a;
            let v = (z - self.center[1]) / c;
            u * u + v * v <= 1.0
        })
    }

    /// Exact volume of the two frusta in cubic voxels.
    pub fn volume(&self) -> f64 {
        frustum_volume(self.opening_radii, self.waist_radii, self.waist - self.top)
            + frustum_volume(self.waist_radii, self.base_radii, self.bottom - self.waist)
    }

    fn max_radii(&self) -> [f64; 2] {
        let r = [self.opening_radii, self.waist_radii, self.base_radii];
        [0, 1].map(|a| r.iter().map(|v| v[a]).fold(0.0, f64::max))
    }
}

/// Volume of a frustum whose elliptic cross-section goes linearly from
/// semi-axes `r0` to `r1` over height `h`: `pi * h * integral of a(t) c(t)`.
pub fn frustum_volume(r0: [f64; 2], r1: [f64; 2], h: f64) -> f64 {
    let [a0, c0] = r0;
    let (da, dc) = (r1[0] - a0, r1[1] - c0);
    PI * h * (a0 * c0 + (a0 * dc + c0 * da) / 2.0 + da * dc / 3.0)
}

/// Everything needed to render one phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `[X, Y, Z]`.
    pub extents: [usize; 3],
    /// Seeds the noise.
    pub seed: u64,
    pub hole: HoleProfile,
    /// Depths `[top, bottom]` of the banded tissue.
    pub retina: [f64; 2],
    /// Band intensities from top to bottom; the band count is the length.
    pub layers: Vec<f32>,
    /// Intensity above the tissue.
    pub vitreous: f32,
    /// Intensity below the tissue.
    pub choroid: f32,
    /// Half-width of the additive uniform noise.
    pub noise: f32,
}

impl PhantomSpec {
    /// Draws a spec from the default parameter ranges, all expressed as
    /// fractions of the extents so that the phantom scales with the grid:
    ///
    /// | parameter | range |
    /// |---|---|
    /// | tissue top | 0.25 to 0.35 of Y |
    /// | tissue thickness | 0.35 to 0.45 of Y |
    /// | waist depth | 0.3 to 0.5 of the thickness, below the top |
    /// | axis | 0.4 to 0.6 of X, 0.45 to 0.55 of Z |
    /// | opening semi-axes | 0.08 to 0.12 of X, 0.10 to 0.16 of Z |
    /// | waist semi-axes | 0.35 to 0.6 of the opening |
    /// | base semi-axes | 0.12 to 0.18 of X, 0.14 to 0.22 of Z |
    /// | bands | 4 to 7, intensities 0.35 to 1.0, alternating bright and dim |
    /// | noise | 0.05 to 0.12 |
    ///
    /// Semi-axes are floored at one voxel. The hole spans the full tissue
    /// thickness.
    pub fn random(extents: [usize; 3], seed: u64) -> Result<Self> {
        if (0..3).any(|a| extents[a] < MIN_EXTENTS[a]) {
            return Err(Error::Config(format!(
                "phantom extents {extents:?} are below the minimum {MIN_EXTENTS:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [nx, ny, nz] = extents.map(|e| e as f64);
        // positions scale with the last index, sizes with the extent
        let [lx, ly, lz] = extents.map(|e| (e - 1) as f64);
        let mut frac = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let top = frac(0.25, 0.35) * ly;
        let bottom = top + frac(0.35, 0.45) * ny;
        let waist = top + frac(0.3, 0.5) * (bottom - top);
        let center = [frac(0.4, 0.6) * lx, frac(0.45, 0.55) * lz];
        let opening = [frac(0.08, 0.12) * nx, frac(0.10, 0.16) * nz];
        let pinch = frac(0.35, 0.6);
        let base = [frac(0.12, 0.18) * nx, frac(0.14, 0.22) * nz];
        let floor = |r: [f64; 2]| r.map(|v| v.max(1.0));
        let hole = HoleProfile {
            center,
            top,
            waist,
            bottom,
            opening_radii: floor(opening),
            waist_radii: floor(opening.map(|v| v * pinch)),
            base_radii: floor(base),
        };
        let bands = rng.random_range(4..=7);
        let layers = (0..bands)
            .map(|i| {
                let (lo, hi) = if i % 2 == 0 { (0.7, 1.0) } else { (0.35, 0.6) };
                rng.random_range(lo..hi)
            })
            .collect();
        let spec = Self {
            extents,
            seed: rng.next_u64(),
            hole,
            retina: [top, bottom],
            layers,
            vitreous: 0.1,
            choroid: 0.3,
            noise: rng.random_range(0.05..0.12),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("phantom: {msg}")));
        let h = &self.hole;
        let all_finite = [h.top, h.waist, h.bottom, h.center[0], h.center[1]]
            .into_iter()
            .chain(h.opening_radii)
            .chain(h.waist_radii)
            .chain(h.base_radii)
            .chain(self.retina)
            .all(f64::is_finite);
        if !all_finite {
            return bad("non-finite geometry".into());
        }
        if self.extents.contains(&0) {
            return bad(format!("extents must be positive, got {:?}", self.extents));
        }
        let radii = [h.opening_radii, h.waist_radii, h.base_radii];
        if radii.iter().flatten().any(|&r| r <= 0.0) {
            return bad("hole radii must be positive".into());
        }
        if !(h.top < h.waist && h.waist < h.bottom) {
            return bad(format!("need top < waist < bottom, got {} {} {}", h.top, h.waist, h.bottom));
        }
        let [nx, ny, nz] = self.extents.map(|e| e as f64 - 1.0);
        let [rx, rz] = h.max_radii();
        let fits = h.top >= MARGIN
            && h.bottom <= ny - MARGIN
            && h.center[0] - rx >= MARGIN
            && h.center[0] + rx <= nx - MARGIN
            && h.center[1] - rz >= MARGIN
            && h.center[1] + rz <= nz - MARGIN;
        if !fits {
            return bad(format!(
                "hole does not fit inside {:?} with a {MARGIN}-voxel margin",
                self.extents
            ));
        }
        if self.retina[0] >= self.retina[1] {
            return bad("tissue top must lie above its bottom".into());
        }
        if self.layers.is_empty() {
            return bad("at least one band is required".into());
        }
        let tissue = self.layers.iter().chain([&self.vitreous, &self.choroid]);
        if tissue.clone().any(|&v| !(v.is_finite() && v > CAVITY_INTENSITY)) {
            return bad(format!("band intensities must be finite and above {CAVITY_INTENSITY}"));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise) {
            return bad(format!("noise amplitude {} outside [0, {MAX_NOISE}]", self.noise));
        }
        Ok(())
    }

    /// Noise-free intensity of the tissue at depth `y`.
    fn band(&self, y: f64) -> f32 {
        let [top, bottom] = self.retina;
        if y < top {
            self.vitreous
        } else if y >= bottom {
            self.choroid
        } else {
            let n = self.layers.len();
            let i = (((y - top) / (bottom - top)) * n as f64) as usize;
            self.layers[i.min(n - 1)]
        }
    }
}

/// Renders the volume and its exact cavity mask.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, BinaryMask)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.extents;
    let mut inside = Vec::with_capacity(voxel_count(spec.extents));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                inside.push(spec.hole.contains(x as f64, y as f64, z as f64));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amp = f64::from(spec.noise);
    let mut data = Vec::with_capacity(inside.len());
    for (i, &cavity) in inside.iter().enumerate() {
        let y = (i / nx) % ny;
        let clean = if cavity { CAVITY_INTENSITY } else { spec.band(y as f64) };
        let noise = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
        data.push(clean + noise as f32);
    }
    let volume = Volume::new(spec.extents, [1.0; 3], data)?;
    let mask = BinaryMask::from_bools(spec.extents, inside)?;
    Ok((volume, mask))
}

/// Which part of a dataset a phantom belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

/// Default split weights: 56 training, 22 validation and 9 test volumes out
/// of every 87.
pub const SPLIT_WEIGHTS: [usize; 3] = [56, 22, 9];

/// Split sizes for `n` items proportional to `weights`, rounded by largest
/// remainder (ties go to the earlier split).
pub fn split_counts(n: usize, weights: [usize; 3]) -> Result<[usize; 3]> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(Error::Config("split weights must not all be zero".into()));
    }
    let mut counts = weights.map(|w| n * w / total);
    let mut order = [0, 1, 2];
    order.sort_by_key(|&i| std::cmp::Reverse(n * weights[i] % total));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// One member of a generated dataset.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub id: String,
    pub split: Split,
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub mask: BinaryMask,
}

/// Phantom identifiers are zero-padded indices.
pub fn phantom_id(i: usize) -> String {
    format!("ph{i:04}")
}

/// Draws `n` phantom specs from `base_seed` and assigns splits in index
/// order with the given counts.
pub fn dataset_specs(n: usize, base_seed: u64, extents: [usize; 3], counts: [usize; 3]) -> Result<Vec<(String, Split, PhantomSpec)>> {
    if n == 0 {
        return Err(Error::Config("a dataset needs at least one phantom".into()));
    }
    if counts.iter().sum::<usize>() != n {
        return Err(Error::Config(format!("split counts {counts:?} do not add up to {n}")));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(base_seed);
    let splits = Split::ALL.iter().zip(counts).flat_map(|(&s, c)| std::iter::repeat_n(s, c));
    splits
        .enumerate()
        .map(|(i, split)| Ok((phantom_id(i), split, PhantomSpec::random(extents, seeds.next_u64())?)))
        .collect()
}

/// Generates `n` phantoms split by [`SPLIT_WEIGHTS`].
pub fn generate_dataset(n: usize, base_seed: u64, extents: [usize; 3]) -> Result<Vec<Phantom>> {
    let counts = split_counts(n, SPLIT_WEIGHTS)?;
    generate_specs(dataset_specs(n, base_seed, extents, counts)?)
}

/// Renders a list of specs.
pub fn generate_specs(specs: Vec<(String, Split, PhantomSpec)>) -> Result<Vec<Phantom>> {
    specs
        .into_iter()
        .map(|(id, split, spec)| {
            let (volume, mask) = generate(&spec)?;
            Ok(Phantom { id, split, spec, volume, mask })
        })
        .collect()
}

/// Noisy copies of a mask imitating independent annotators: each boundary
/// voxel (one whose 6-neighbourhood straddles the mask edge) is flipped with
/// probability `flip`.
pub fn annotator_masks(mask: &BinaryMask, count: usize, flip: f64, seed: u64) -> Result<Vec<BinaryMask>> {
    if !(0.0..=1.0).contains(&flip) {
        return Err(Error::Config(format!("flip probability {flip} outside [0, 1]")));
    }
    let [nx, ny, nz] = mask.extents();
    let mut boundary = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = mask.get(x, y, z);
                let c = [x, y, z];
                let differs = (0..3).any(|a| {
                    let mut lo = c;
                    let mut hi = c;
                    let lo_ok = c[a] > 0 && {
                        lo[a] -= 1;
                        mask.get(lo[0], lo[1], lo[2]) != v
                    };
                    let hi_ok = c[a] + 1 < mask.extents()[a] && {
                        hi[a] += 1;
                        mask.get(hi[0], hi[1], hi[2]) != v
                    };
                    lo_ok || hi_ok
                });
                if differs {
                    boundary.push(x + nx * (y + ny * z));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut data = mask.data().to_vec();
            for &i in &boundary {
                if rng.random_bool(flip) {
                    data[i] ^= 1;
                }
            }
            BinaryMask::new(mask.extents(), mask.spacing(), data)
        })
        .collect()
}

/// Dataset description written next to the phantom files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base_seed: u64,
    pub extents: [usize; 3],
    pub phantoms: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Cavity voxels in the exact mask.
    pub mask_voxels: usize,
    pub spec: PhantomSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// File name of a phantom's intensity volume.
pub fn volume_file(id: &str) -> String {
    format!("{id}.rvol")
}

/// File name of a phantom's ground-truth mask.
pub fn mask_file(id: &str) -> String {
    format!("{id}_mask.rvol")
}

/// File name of annotator `k`'s mask (numbered from 1).
pub fn annotation_file(id: &str, k: usize) -> String {
    format!("{id}_ann{k}.rvol")
}

impl Manifest {
    pub fn new(base_seed: u64, extents: [usize; 3], phantoms: &[Phantom]) -> Self {
        let phantoms = phantoms
            .iter()
            .map(|p| ManifestEntry {
                id: p.id.clone(),
                split: p.split,
                mask_voxels: p.mask.count(),
                spec: p.spec.clone(),
            })
            .collect();
        Self { base_seed, extents, phantoms }
    }

    /// Ids per split, in manifest order.
    pub fn ids(&self) -> BTreeMap<Split, Vec<String>> {
        let mut out: BTreeMap<Split, Vec<String>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
        for e in &self.phantoms {
            out.entry(e.split).or_default().push(e.id.clone());
        }
        out
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.phantoms.iter().filter(|e| e.split == split).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Writes every phantom's volume and mask plus the manifest into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, base_seed: u64, extents: [usize; 3], phantoms: &[Phantom]) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in phantoms {
        p.volume.save(dir.join(volume_file(&p.id)))?;
        p.mask.save(dir.join(mask_file(&p.id)))?;
    }
    let manifest = Manifest::new(base_seed, extents, phantoms);
    manifest.save(dir)?;
    Ok(manifest)
}
