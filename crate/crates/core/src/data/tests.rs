use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_volume(rng: &mut impl Rng, extents: [usize; 3]) -> Volume {
    let data = (0..voxel_count(extents)).map(|_| rng.random_range(-3.0..3.0)).collect();
    Volume::new(extents, [5.47, 3.87, 1.5], data).unwrap()
}

fn random_mask(rng: &mut impl Rng, extents: [usize; 3], p: f64) -> BinaryMask {
    BinaryMask::from_bools(extents, (0..voxel_count(extents)).map(|_| rng.random_bool(p))).unwrap()
}

/// Trilinear interpolation written directly from the eight-neighbour
/// weights.
fn trilinear_oracle(v: &Volume, target: [usize; 3]) -> Vec<f64> {
    let src = v.extents();
    let mut out = Vec::new();
    for z in 0..target[2] {
        for y in 0..target[1] {
            for x in 0..target[0] {
                let pos = [x, y, z].map(|_| 0.0);
                let mut p = pos;
                for (a, &i) in [x, y, z].iter().enumerate() {
                    p[a] = if target[a] == 1 {
                        (src[a] - 1) as f64 / 2.0
                    } else {
                        i as f64 * (src[a] - 1) as f64 / (target[a] - 1) as f64
                    };
                }
                let mut acc = 0.0;
                for corner in 0..8 {
                    let mut w = 1.0;
                    let mut c = [0usize; 3];
                    for a in 0..3 {
                        let lo = p[a].floor();
                        let t = p[a] - lo;
                        let hi_side = corner >> a & 1 == 1;
                        c[a] = ((lo as usize) + hi_side as usize).min(src[a] - 1);
                        w *= if hi_side { t } else { 1.0 - t };
                    }
                    acc += w * v.get(c[0], c[1], c[2]) as f64;
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn normalize_divides_by_range() {
    let data: Vec<f32> = (0..=255).map(|v| v as f32).collect();
    let v = Volume::new([256, 1, 1], [1.0; 3], data).unwrap();
    let n = normalize(&v);
    for (i, &x) in n.data().iter().enumerate() {
        assert_eq!(x, i as f32 / 255.0);
    }
    let c = normalize(&Volume::filled([3, 2, 2], 7.5).unwrap());
    assert!(c.data().iter().all(|&v| v == 0.0));
}

#[test]
fn normalize_spans_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = normalize(&random_volume(&mut rng, [5, 4, 3]));
        let lo = n.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = n.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }
}

#[test]
fn resample_identity_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = random_volume(&mut rng, [6, 5, 4]);
    assert_eq!(resample_trilinear(&v, [6, 5, 4]).unwrap(), v);
}

#[test]
fn resample_constant_stays_constant() {
    let v = Volume::filled([7, 3, 5], 0.25).unwrap();
    let r = resample_trilinear(&v, [2, 9, 1]).unwrap();
    assert!(r.data().iter().all(|&x| x == 0.25));
}

#[test]
fn resample_ramp_by_hand() {
    let v = Volume::new([4, 1, 1], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let r = resample_trilinear(&v, [7, 1, 1]).unwrap();
    assert_eq!(r.data(), &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    // the same ramp along Z
    let v = Volume::new([1, 1, 4], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let r = resample_trilinear(&v, [1, 1, 7]).unwrap();
    assert_eq!(r.data(), &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
}

#[test]
fn resample_matches_eight_neighbour_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..120 {
        let src = [0; 3].map(|_| rng.random_range(1..7));
        let dst = [0; 3].map(|_| rng.random_range(1..9));
        let v = random_volume(&mut rng, src);
        let r = resample_trilinear(&v, dst).unwrap();
        let want = trilinear_oracle(&v, dst);
        for (&a, &b) in r.data().iter().zip(&want) {
            assert!((a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0), "{src:?}->{dst:?}: {a} vs {b}");
        }
    }
}

#[test]
fn resample_down_up_recovers_smooth_field() {
    let ext = [64, 48, 20];
    let data = (0..voxel_count(ext))
        .map(|i| {
            let (x, y, z) = (i % 64, i / 64 % 48, i / (64 * 48));
            let f = (x as f32 / 63.0 * 3.0).sin() * (y as f32 / 47.0 * 2.0).cos() + z as f32 / 19.0;
            f * 0.5
        })
        .collect();
    let v = normalize(&Volume::new(ext, [1.0; 3], data).unwrap());
    let down = resample_trilinear(&v, [32, 24, 10]).unwrap();
    let up = resample_trilinear(&down, ext).unwrap();
    let mae: f32 = v.data().iter().zip(up.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / v.data().len() as f32;
    assert!(mae < 0.02, "mae {mae}");
}

#[test]
fn resample_rejects_zero_target() {
    let v = Volume::filled([2, 2, 2], 1.0).unwrap();
    assert!(resample_trilinear(&v, [0, 2, 2]).is_err());
}

fn set_of(masks: Vec<BinaryMask>) -> AnnotationSet {
    AnnotationSet { id: "v".into(), masks }
}

fn voxel(bits: &[u8]) -> AnnotationSet {
    set_of(bits.iter().map(|&b| BinaryMask::new([1, 1, 1], [1.0; 3], vec![b]).unwrap()).collect())
}

#[test]
fn vote_examples() {
    assert_eq!(fuse_vote(&voxel(&[1, 1, 0])).unwrap().data(), &[1]);
    assert_eq!(fuse_vote(&voxel(&[1, 0, 0])).unwrap().data(), &[0]);
    assert_eq!(fuse_vote(&voxel(&[0, 1, 1])).unwrap().data(), &[1]);
    // two annotators must agree
    assert_eq!(fuse_vote(&voxel(&[1, 0])).unwrap().data(), &[0]);
    assert_eq!(fuse_vote(&voxel(&[1, 1])).unwrap().data(), &[1]);
    assert!(matches!(fuse_vote(&voxel(&[1])), Err(Error::Data(_))));
}

#[test]
fn vote_of_identical_masks_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_mask(&mut rng, [4, 4, 4], 0.3);
    assert_eq!(fuse_vote(&set_of(vec![m.clone(), m.clone(), m.clone()])).unwrap(), m);
}

#[test]
fn vote_matches_brute_force_majority() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let ext = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4)];
        let masks: Vec<_> = (0..3).map(|_| random_mask(&mut rng, ext, 0.5)).collect();
        let fused = fuse_vote(&set_of(masks.clone())).unwrap();
        for z in 0..ext[2] {
            for y in 0..ext[1] {
                for x in 0..ext[0] {
                    let votes = masks.iter().filter(|m| m.get(x, y, z)).count();
                    assert_eq!(fused.get(x, y, z), votes >= 2);
                }
            }
        }
    }
}

#[test]
fn vote_rejects_mismatched_extents() {
    let set = set_of(vec![BinaryMask::empty([2, 2, 2]), BinaryMask::empty([2, 2, 3])]);
    assert!(matches!(fuse_vote(&set), Err(Error::Shape { .. })));
    assert!(matches!(fuse_average(&set), Err(Error::Shape { .. })));
}

#[test]
fn average_examples() {
    assert_eq!(fuse_average(&voxel(&[1, 0])).unwrap().data(), &[0.5]);
    assert_eq!(fuse_average(&voxel(&[1, 1, 1])).unwrap().data(), &[1.0]);
    assert_eq!(fuse_average(&voxel(&[0])).unwrap().data(), &[0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = random_mask(&mut rng, [3, 3, 3], 0.5);
    assert_eq!(fuse_average(&set_of(vec![m.clone()])).unwrap(), m.to_volume());
}

proptest! {
    #[test]
    fn vote_lies_between_intersection_and_union(seed in any::<u64>(), m in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<_> = (0..m).map(|_| random_mask(&mut rng, [4, 3, 2], 0.5)).collect();
        let fused = fuse_vote(&set_of(masks.clone())).unwrap();
        for i in 0..fused.data().len() {
            let all = masks.iter().all(|k| k.data()[i] == 1);
            let any = masks.iter().any(|k| k.data()[i] == 1);
            prop_assert!(!all || fused.data()[i] == 1);
            prop_assert!(any || fused.data()[i] == 0);
        }
    }

    #[test]
    fn average_takes_values_k_over_m(seed in any::<u64>(), m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<_> = (0..m).map(|_| random_mask(&mut rng, [3, 3, 2], 0.5)).collect();
        let avg = fuse_average(&set_of(masks)).unwrap();
        for &v in avg.data() {
            let k = (v * m as f32).round();
            prop_assert_eq!(v, k / m as f32);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn mirrored_index_stays_in_range(i in -200isize..200, len in 2usize..60) {
        let r = mirror_index(i, len);
        prop_assert!(r < len);
        if (0..len as isize).contains(&i) {
            prop_assert_eq!(r, i as usize);
        }
    }
}

#[test]
fn slice_window_examples() {
    assert_eq!(slice_window(0, 49, 4).unwrap(), vec![4, 3, 2, 1, 0, 1, 2, 3, 4]);
    assert_eq!(slice_window(24, 49, 4).unwrap(), (20..=28).collect::<Vec<_>>());
    assert_eq!(slice_window(48, 49, 4).unwrap(), vec![44, 45, 46, 47, 48, 47, 46, 45, 44]);
    assert!(slice_window(0, 1, 4).is_err());
    assert!(slice_window(49, 49, 4).is_err());
}

#[test]
fn every_slice_of_a_49_deep_volume_gets_a_9_stack() {
    let v = Volume::new([2, 1, 49], [1.0; 3], (0..98).map(|i| (i / 2) as f32).collect()).unwrap();
    let stacks: Vec<_> = (0..49).map(|z| extract_slice_stack(&v, z, SLICE_HALF_WINDOW).unwrap()).collect();
    assert_eq!(stacks.len(), 49);
    for (z, s) in stacks.iter().enumerate() {
        assert_eq!(s.extents(), [2, 1, 9]);
        // the centre slice is slice z itself
        assert_eq!(s.get(0, 0, 4), z as f32);
    }
    assert_eq!(stacks[0].get(1, 0, 0), 4.0);
}

#[test]
fn sampler_permutes_exactly_ten() {
    let mut s = epoch_sampler(10, EPOCH_SIZE, 7, 0).unwrap();
    s.sort_unstable();
    assert_eq!(s, (0..10).collect::<Vec<_>>());
}

#[test]
fn sampler_is_deterministic_per_epoch() {
    assert_eq!(epoch_sampler(56, 10, 9, 3).unwrap(), epoch_sampler(56, 10, 9, 3).unwrap());
    assert_ne!(epoch_sampler(56, 10, 9, 3).unwrap(), epoch_sampler(56, 10, 9, 4).unwrap());
    assert_ne!(epoch_sampler(56, 10, 9, 3).unwrap(), epoch_sampler(56, 10, 10, 3).unwrap());
}

#[test]
fn sampler_never_repeats_within_an_epoch() {
    for epoch in 0..100 {
        let mut s = epoch_sampler(56, 10, 11, epoch).unwrap();
        assert!(s.iter().all(|&i| i < 56));
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 10, "epoch {epoch}");
    }
}

#[test]
fn sampler_small_dataset_draws_with_replacement() {
    let s = epoch_sampler(3, 10, 1, 0).unwrap();
    assert_eq!(s.len(), 10);
    assert!(s.iter().all(|&i| i < 3));
    assert!(matches!(epoch_sampler(0, 10, 1, 0), Err(Error::Data(_))));
}

#[test]
fn rvol_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = random_volume(&mut rng, [5, 7, 3]).with_spacing([5.47, 3.87, 0.1]).unwrap();
    let m = random_mask(&mut rng, [5, 7, 3], 0.2);
    v.save(dir.path().join("v.rvol")).unwrap();
    m.save(dir.path().join("m.rvol")).unwrap();
    let v2 = Volume::load(dir.path().join("v.rvol")).unwrap();
    let m2 = BinaryMask::load(dir.path().join("m.rvol")).unwrap();
    assert_eq!(v2, v);
    assert_eq!(m2, m);
    let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&v2), bits(&v));
    let b1 = std::fs::read(dir.path().join("v.rvol")).unwrap();
    v2.save(dir.path().join("v2.rvol")).unwrap();
    assert_eq!(b1, std::fs::read(dir.path().join("v2.rvol")).unwrap());
}

#[test]
fn rvol_header_layout() {
    let v = Volume::new([2, 1, 1], [1.0, 2.0, 3.0], vec![1.5, -2.0]).unwrap();
    let b = Rvol::Intensity(v).to_bytes().unwrap();
    assert_eq!(&b[..4], b"RVOL");
    assert_eq!(&b[4..8], &1u32.to_le_bytes());
    assert_eq!(&b[8..12], &2u32.to_le_bytes());
    assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
    assert_eq!(b[32], 0);
    assert_eq!(&b[33..37], &1.5f32.to_le_bytes());
    assert_eq!(b.len(), 33 + 8);
}

#[test]
fn rvol_rejects_malformed_input() {
    let m = BinaryMask::new([2, 2, 1], [1.0; 3], vec![0, 1, 1, 0]).unwrap();
    let good = Rvol::Mask(m).to_bytes().unwrap();
    assert!(Rvol::from_bytes(&good).is_ok());
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(Rvol::from_bytes(&bad), Err(Error::Data(_))));
    let mut bad = good.clone();
    bad[4] = 2;
    assert!(Rvol::from_bytes(&bad).is_err());
    assert!(Rvol::from_bytes(&good[..good.len() - 1]).is_err());
    let mut bad = good.clone();
    bad.push(0);
    assert!(Rvol::from_bytes(&bad).is_err());
    let mut bad = good.clone();
    bad[32] = 7;
    assert!(Rvol::from_bytes(&bad).is_err());
    let mut bad = good.clone();
    *bad.last_mut().unwrap() = 2;
    assert!(Rvol::from_bytes(&bad).is_err());
    assert!(Rvol::from_bytes(&good).unwrap().into_volume().is_err());
}

#[test]
fn missing_file_reports_path() {
    let err = Volume::load("/nonexistent/x.rvol").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/x.rvol"));
}
