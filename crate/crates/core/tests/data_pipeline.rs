use std::collections::BTreeSet;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ugda_seg::data::{
    discover_dataset, example_rng, preprocess, scan_dataset, split_dataset, stack_batch, LoadedSample, PrepMode,
    SplitRatios, IMAGENET_MEAN, IMAGENET_STD,
};
use ugda_seg::synthetic::write_synthetic_dataset;
use ugda_seg::SegError;

fn write_pair(root: &Path, id: &str, ext: &str, side: u32) {
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    RgbImage::from_pixel(side, side, Rgb([10, 200, 30])).save(root.join("images").join(format!("{id}.{ext}"))).unwrap();
    let mask = GrayImage::from_fn(side, side, |x, _| Luma([if x < side / 2 { 255 } else { 0 }]));
    mask.save(root.join("masks").join(format!("{id}.png"))).unwrap();
}

#[test]
fn discovers_mixed_extensions_and_skips_orphans() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "b", "jpg", 16);
    write_pair(dir.path(), "a", "png", 16);
    RgbImage::new(4, 4).save(dir.path().join("images/lonely.png")).unwrap();
    GrayImage::new(4, 4).save(dir.path().join("masks/ghost.png")).unwrap();
    std::fs::write(dir.path().join("images/notes.txt"), "ignored").unwrap();

    let scan = scan_dataset(dir.path()).unwrap();
    let ids: Vec<&str> = scan.pairs.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["a", "b"]);
    let orphans: BTreeSet<String> =
        scan.unmatched.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(orphans, BTreeSet::from(["lonely.png".to_string(), "ghost.png".to_string()]));
    assert_eq!(discover_dataset(dir.path()).unwrap(), scan.pairs);
}

#[test]
fn missing_masks_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    assert!(matches!(scan_dataset(dir.path()), Err(SegError::Dataset(_))));
}

#[test]
fn split_of_a_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_synthetic_dataset(dir.path(), 20, 32, 9).unwrap();
    let pairs = discover_dataset(dir.path()).unwrap();
    assert_eq!(pairs, written);

    let a = split_dataset(&pairs, SplitRatios::default(), 42).unwrap();
    let b = split_dataset(&pairs.iter().rev().cloned().collect::<Vec<_>>(), SplitRatios::default(), 42).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (14, 3, 3));
    let c = split_dataset(&pairs, SplitRatios::default(), 43).unwrap();
    assert_ne!(a.membership_hash(), c.membership_hash());

    let mut all: Vec<_> = a.train.iter().chain(&a.val).chain(&a.test).map(|p| p.id.clone()).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 20);
}

#[test]
fn corrupt_image_reports_its_path() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "x", "png", 8);
    std::fs::write(dir.path().join("images/x.png"), b"\x89PNG broken").unwrap();
    let pairs = discover_dataset(dir.path()).unwrap();
    match LoadedSample::load(&pairs[0]) {
        Err(SegError::Decode { path, .. }) => assert!(path.ends_with("images/x.png")),
        other => panic!("expected a decode error, got {other:?}"),
    }
}

#[test]
fn size_mismatch_between_image_and_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "x", "png", 8);
    GrayImage::new(9, 8).save(dir.path().join("masks/x.png")).unwrap();
    let pairs = discover_dataset(dir.path()).unwrap();
    assert!(matches!(LoadedSample::load(&pairs[0]), Err(SegError::Dataset(_))));
}

#[test]
fn eval_preprocessing_normalizes_and_resizes() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "x", "png", 20);
    let pair = &discover_dataset(dir.path()).unwrap()[0];
    let ex = preprocess(pair, PrepMode::Eval, &mut example_rng(0, 0, "x"), 32).unwrap();
    assert_eq!(ex.image.dim(), (3, 32, 32));
    assert_eq!(ex.mask.dim(), (1, 32, 32));
    assert!(ex.mask.iter().all(|&v| v <= 1));
    let fg: usize = ex.mask.iter().map(|&v| usize::from(v)).sum();
    assert_eq!(fg, 32 * 16);
    for (c, v) in [10.0f32, 200.0, 30.0].iter().enumerate() {
        let want = (v / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        assert!((ex.image[[c, 7, 7]] - want).abs() < 1e-5);
    }
}

#[test]
fn augmentation_is_reproducible_per_epoch_and_id() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 1, 32, 4).unwrap();
    let pair = &discover_dataset(dir.path()).unwrap()[0];
    let run = |epoch| preprocess(pair, PrepMode::Train, &mut example_rng(42, epoch, &pair.id), 32).unwrap();
    assert_eq!(run(3), run(3));
    let distinct = (0..12).map(run).filter(|e| *e != run(0)).count();
    assert!(distinct > 0, "augmentation never changed the sample");
}

#[test]
fn stacking_requires_equal_sides() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 2, 32, 4).unwrap();
    let pairs = discover_dataset(dir.path()).unwrap();
    let a = preprocess(&pairs[0], PrepMode::Eval, &mut example_rng(0, 0, "a"), 32).unwrap();
    let b = preprocess(&pairs[1], PrepMode::Eval, &mut example_rng(0, 0, "b"), 64).unwrap();
    let (images, masks) = stack_batch(&[&a, &a]).unwrap();
    assert_eq!(images.dim(), (2, 3, 32, 32));
    assert_eq!(masks.dim(), (2, 1, 32, 32));
    assert!(stack_batch(&[&a, &b]).is_err());
}
