use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn mask(ext: [usize; 3], bits: &[u8]) -> BinaryMask {
    BinaryMask::new(ext, [1.0; 3], bits.to_vec()).unwrap()
}

fn random_mask(rng: &mut impl Rng, ext: [usize; 3], p: f64) -> BinaryMask {
    BinaryMask::from_bools(ext, (0..ext.iter().product()).map(|_| rng.random_bool(p))).unwrap()
}

fn loop_counts(pred: &BinaryMask, gt: &BinaryMask) -> [usize; 4] {
    let [nx, ny, nz] = pred.extents();
    let mut c = [0; 4];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = match (pred.get(x, y, z), gt.get(x, y, z)) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                c[i] += 1;
            }
        }
    }
    c
}

/// For each distinct threshold, recount precision and recall from scratch.
fn sweep_oracle(prob: &[f32], gt: &[u8]) -> f64 {
    let mut ts: Vec<f32> = prob.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let pos = gt.iter().filter(|&&g| g == 1).count() as f64;
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in ts {
        let pred: Vec<bool> = prob.iter().map(|&p| p >= t).collect();
        let tp = pred.iter().zip(gt).filter(|(&p, &g)| p && g == 1).count() as f64;
        let np = pred.iter().filter(|&&p| p).count() as f64;
        let r = tp / pos;
        ap += (r - prev) * (tp / np);
        prev = r;
    }
    ap
}

#[test]
fn identical_masks() {
    let m = mask([2, 2, 1], &[1, 0, 1, 1]);
    let c = confusion_counts(&m, &m).unwrap();
    assert_eq!(c, Confusion { tp: 3, fp: 0, fn_: 0, tn: 1 });
    assert_eq!((c.jaccard(), c.dsc(), c.avd()), (1.0, 1.0, 0));
}

#[test]
fn empty_prediction() {
    let gt = mask([3, 1, 1], &[1, 1, 0]);
    let c = confusion_counts(&BinaryMask::empty([3, 1, 1]), &gt).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 2));
    assert_eq!((c.jaccard(), c.precision(), c.recall()), (0.0, 0.0, 0.0));
}

#[test]
fn both_empty_convention() {
    let e = BinaryMask::empty([2, 2, 2]);
    let c = confusion_counts(&e, &e).unwrap();
    assert_eq!([c.jaccard(), c.dsc(), c.precision(), c.recall()], [1.0; 4]);
    let prob = Volume::filled([2, 2, 2], 0.0).unwrap();
    let r = MetricsReport::compute(&e, &prob, &e).unwrap();
    assert!(r.both_empty);
}

#[test]
fn jaccard_one_third() {
    let a = mask([3, 1, 1], &[1, 1, 0]);
    let b = mask([3, 1, 1], &[0, 1, 1]);
    assert_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0);
    assert_eq!(dsc(&a, &b).unwrap(), 0.5);
    assert_eq!(avd(&a, &b).unwrap(), 0);
}

#[test]
fn dice_from_published_jaccard() {
    assert!((dsc_from_jaccard(0.907) - 0.951).abs() < 1e-3);
    assert!((dsc_from_jaccard(0.907) - 0.9512).abs() < 1e-4);
}

#[test]
fn extent_mismatch_is_an_error() {
    let a = BinaryMask::empty([2, 2, 2]);
    let b = BinaryMask::empty([2, 2, 3]);
    assert!(matches!(confusion_counts(&a, &b), Err(Error::Shape { .. })));
    assert!(average_precision(&Volume::filled([2, 2, 2], 0.5).unwrap(), &b).is_err());
}

#[test]
fn counts_and_scores_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..150 {
        let ext = [8, 8, 8];
        let p = rng.random_range(0.0..1.0);
        let pred = random_mask(&mut rng, ext, p);
        let q = rng.random_range(0.0..1.0);
        let gt = random_mask(&mut rng, ext, q);
        let [tp, fp, fn_, tn] = loop_counts(&pred, &gt);
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(c, Confusion { tp, fp, fn_, tn });
        assert_eq!(c.total(), 512);
        if tp + fp == 0 || tp + fn_ == 0 {
            continue;
        }
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        assert!((c.jaccard() - tp / (tp + fp + fn_)).abs() < 1e-12);
        assert!((c.dsc() - 2.0 * tp / (2.0 * tp + fp + fn_)).abs() < 1e-12);
        assert!((c.precision() - tp / (tp + fp)).abs() < 1e-12);
        assert!((c.recall() - tp / (tp + fn_)).abs() < 1e-12);
        assert_eq!(c.avd(), (pred.count() as i64 - gt.count() as i64).unsigned_abs() as usize);
    }
}

#[test]
fn ap_perfect_map() {
    let gt = mask([4, 1, 1], &[0, 1, 1, 0]);
    let prob = Volume::new([4, 1, 1], [1.0; 3], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(average_precision(&prob, &gt).unwrap(), 1.0);
}

#[test]
fn ap_constant_map_is_prevalence() {
    let gt = mask([5, 1, 1], &[1, 0, 0, 1, 0]);
    let prob = Volume::filled([5, 1, 1], 0.5).unwrap();
    assert!((average_precision(&prob, &gt).unwrap() - 0.4).abs() < 1e-15);
}

#[test]
fn ap_by_hand() {
    // ranking: 0.9 (pos), 0.8 (neg), 0.7 (pos), 0.1 (neg)
    let gt = mask([4, 1, 1], &[1, 0, 1, 0]);
    let prob = Volume::new([4, 1, 1], [1.0; 3], vec![0.9, 0.8, 0.7, 0.1]).unwrap();
    let want = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
    assert!((average_precision(&prob, &gt).unwrap() - want).abs() < 1e-15);
}

#[test]
fn ap_matches_exhaustive_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..150 {
        let ext = [rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..4)];
        let n = ext.iter().product::<usize>();
        let gt = random_mask(&mut rng, ext, 0.4);
        if gt.count() == 0 {
            continue;
        }
        // coarse levels so ties occur
        let prob: Vec<f32> = (0..n).map(|_| rng.random_range(0..8) as f32 / 7.0).collect();
        let vol = Volume::new(ext, [1.0; 3], prob.clone()).unwrap();
        let got = average_precision(&vol, &gt).unwrap();
        assert!((got - sweep_oracle(&prob, gt.data())).abs() < 1e-9);
    }
}

#[test]
fn agreement_matrix() {
    let a = mask([4, 4, 1], &[1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    let b = mask([4, 4, 1], &[0, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    let set = AnnotationSet { id: "x".into(), masks: vec![a.clone(), b] };
    assert_eq!(pairwise_agreement(&set).unwrap(), vec![vec![1.0, 0.5], vec![0.5, 1.0]]);
    let same = AnnotationSet { id: "y".into(), masks: vec![a.clone(), a.clone(), a.clone()] };
    assert!(pairwise_agreement(&same).unwrap().iter().flatten().all(|&v| v == 1.0));
    let single = AnnotationSet { id: "z".into(), masks: vec![a] };
    assert!(pairwise_agreement(&single).is_err());
}

#[test]
fn report_csv_layout() {
    let r = MetricsReport { jaccard: 0.5, dsc: 2.0 / 3.0, precision: 0.5, recall: 1.0, avd: 2.0, ap: 0.75, both_empty: false };
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &[("a".into(), r), ("b".into(), r)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "id,jaccard,dsc,precision,recall,avd,ap,both_empty");
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("mean,0.5,"));
    assert!(lines[4].starts_with("std,0.0,"));
}

#[test]
fn identical_runs_have_zero_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let run: Vec<_> = (0..3)
        .map(|i| {
            let pred = random_mask(&mut rng, [4, 4, 4], 0.3);
            let gt = random_mask(&mut rng, [4, 4, 4], 0.3);
            (format!("v{i}"), MetricsReport::compute(&pred, &pred.to_volume(), &gt).unwrap())
        })
        .collect();
    let mut buf = Vec::new();
    write_runs_csv(&mut buf, &[run.clone(), run.clone(), run]).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let headers = rdr.headers().unwrap().clone();
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[3][0], "all");
    for row in &rows {
        for (h, v) in headers.iter().zip(row.iter()) {
            if h.ends_with("_std") {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{h}");
            }
        }
    }
}

#[test]
fn population_std() {
    let mk = |j| MetricsReport { jaccard: j, dsc: 0.0, precision: 0.0, recall: 0.0, avd: 0.0, ap: 0.0, both_empty: false };
    let (m, s) = mean_std(&[mk(0.2), mk(0.4), mk(0.6)]).unwrap();
    assert!((m.jaccard - 0.4).abs() < 1e-15);
    assert!((s.jaccard - (0.08f64 / 3.0).sqrt()).abs() < 1e-15);
}

proptest! {
    #[test]
    fn jaccard_never_exceeds_dice(seed in any::<u64>(), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut rng, [5, 4, 3], p);
        let b = random_mask(&mut rng, [5, 4, 3], q);
        let j = jaccard(&a, &b).unwrap();
        let d = dsc(&a, &b).unwrap();
        prop_assert!(j <= d + 1e-15);
        prop_assert_eq!(j == d, j == 0.0 || j == 1.0);
        prop_assert!((d - dsc_from_jaccard(j)).abs() < 1e-12);
        prop_assert_eq!(j, jaccard(&b, &a).unwrap());
        prop_assert_eq!(precision(&a, &b).unwrap(), recall(&b, &a).unwrap());
    }

    #[test]
    fn ap_is_invariant_under_monotone_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_mask(&mut rng, [4, 4, 2], 0.4);
        let raw: Vec<f32> = (0..32).map(|_| rng.random_range(0..10) as f32 / 9.0).collect();
        let squashed: Vec<f32> = raw.iter().map(|&p| (p * p * 0.5 + 0.1).sqrt()).collect();
        let a = average_precision(&Volume::new([4, 4, 2], [1.0; 3], raw).unwrap(), &gt).unwrap();
        let b = average_precision(&Volume::new([4, 4, 2], [1.0; 3], squashed).unwrap(), &gt).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
