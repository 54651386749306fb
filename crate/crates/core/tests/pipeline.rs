use voxseg::data::BinaryMask;
use voxseg::metrics::jaccard;
use voxseg::model::{Model, ModelConfig, Variant};
use voxseg::phantom::{self, annotation_file, Manifest, Split};
use voxseg::pipeline::{combine_annotations, evaluate, infer, load_split, write_combined};
use voxseg::Error;

#[test]
fn dataset_on_disk_round_trips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let phantoms = phantom::generate_dataset(10, 4, [20, 18, 12]).unwrap();
    let manifest = phantom::write_dataset(dir.path(), 4, [20, 18, 12], &phantoms).unwrap();
    assert_eq!(Manifest::load(dir.path()).unwrap(), manifest);
    let test = load_split(dir.path(), Split::Test).unwrap();
    let want: Vec<_> = phantoms.iter().filter(|p| p.split == Split::Test).collect();
    assert_eq!(test.len(), want.len());
    for (got, want) in test.iter().zip(want) {
        assert_eq!(got.id, want.id);
        assert_eq!(got.volume, want.volume);
        assert_eq!(got.mask, want.mask);
    }

    let model = Model::<f32>::build(&ModelConfig::new(Variant::M3, 2, [8, 8, 9]).with_levels(2), 0).unwrap();
    let reports = evaluate(&model, &test, 0.5).unwrap();
    assert_eq!(reports.len(), test.len());
    let (prob, mask) = infer(&model, &test[0].volume, 0.5).unwrap();
    assert_eq!((prob.extents(), mask.extents()), ([20, 18, 12], [20, 18, 12]));
    assert!(prob.data().iter().all(|p| (0.0..=1.0).contains(p)));

    std::fs::remove_file(dir.path().join(phantom::mask_file(&test[0].id))).unwrap();
    assert!(matches!(load_split(dir.path(), Split::Test), Err(Error::Data(_))));
}

#[test]
fn annotations_are_fused_by_majority() {
    let dir = tempfile::tempdir().unwrap();
    let phantoms = phantom::generate_dataset(3, 8, [24, 24, 12]).unwrap();
    let mut single = Vec::new();
    for p in &phantoms {
        let masks = phantom::annotator_masks(&p.mask, 3, 0.3, 1).unwrap();
        single.push(masks.iter().map(|m| jaccard(m, &p.mask).unwrap()).sum::<f64>() / 3.0);
        for (k, m) in masks.iter().enumerate() {
            m.save(dir.path().join(annotation_file(&p.id, k + 1))).unwrap();
        }
    }
    let combined = combine_annotations(dir.path()).unwrap();
    assert_eq!(combined.len(), 3);
    for ((c, p), single) in combined.iter().zip(&phantoms).zip(single) {
        assert_eq!(c.id, p.id);
        // a voxel survives the vote wrongly only if two annotators flip it
        let fused = jaccard(&c.mask, &p.mask).unwrap();
        assert!(fused > single, "{fused} vs {single}");
        for i in 0..3 {
            assert_eq!(c.agreement[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(c.agreement[i][j], c.agreement[j][i]);
            }
        }
    }
    let out = dir.path().join("fused");
    write_combined(&out, &combined).unwrap();
    let back = BinaryMask::load(out.join(phantom::mask_file(&combined[1].id))).unwrap();
    assert_eq!(back, combined[1].mask);
}
