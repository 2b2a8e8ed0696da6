use uap_core::dataset::{ingest, DatasetManifest, SplitOptions, SyntheticSpec};
use uap_core::Dataset64;

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        per_class: 9,
        size: 16,
        ..SyntheticSpec::new(21)
    }
}

#[test]
fn folder_route_matches_in_memory_generation() {
    let dir = tempfile::tempdir().unwrap();
    spec().write_folder(dir.path()).unwrap();
    let opts = SplitOptions {
        validation_cap: Some(12),
        validation_seed: 8,
        ..SplitOptions::new(3, 5)
    };
    let manifest = ingest(dir.path(), &opts).unwrap();
    assert_eq!(manifest.train_len(), 20);
    assert_eq!(manifest.validation_len(), 12);
    let from_disk: Dataset64 = manifest.load_dataset().unwrap();
    let in_memory: Dataset64 = spec().dataset(&opts).unwrap();
    assert_eq!(from_disk.train.labels, in_memory.train.labels);
    assert_eq!(from_disk.train.images.as_slice(), in_memory.train.images.as_slice());
    assert_eq!(from_disk.validation.images.as_slice(), in_memory.validation.images.as_slice());
    assert_eq!(from_disk.class_names, in_memory.class_names);
}

#[test]
fn manifest_round_trip_and_resplit_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    spec().write_folder(dir.path()).unwrap();
    let manifest = ingest(dir.path(), &SplitOptions::new(3, 5)).unwrap();
    let path = dir.path().join("manifest.json");
    manifest.save(&path).unwrap();
    let back = DatasetManifest::load(&path).unwrap();
    assert_eq!(back, manifest);

    let a = manifest.resplit(&SplitOptions::new(9, 2)).unwrap();
    let b = back.resplit(&SplitOptions::new(9, 2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train_len(), 8);
    assert_ne!(a.classes, manifest.classes);
}

#[test]
fn mixed_image_sizes_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    spec().write_folder(dir.path()).unwrap();
    let odd = dir.path().join("class_01").join("9999.png");
    image::RgbImage::new(8, 8).save(&odd).unwrap();
    let err = ingest(dir.path(), &SplitOptions::new(0, 2)).unwrap_err().to_string();
    assert!(err.contains("9999.png"), "{err}");
}
