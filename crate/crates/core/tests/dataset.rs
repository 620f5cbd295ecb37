//! Writing, ingesting and reloading a dataset tree.

use std::fs;

use refdiff_core::datagen::{ingest_dataset, load_dataset, read_manifest, synthetic_dataset, write_dataset, SyntheticConfig};
use refdiff_core::Error;

fn config() -> SyntheticConfig {
    SyntheticConfig {
        count: 5,
        size: 32,
        num_classes: 4,
        ..SyntheticConfig::default()
    }
}

#[test]
fn roundtrip_preserves_pairs_and_manifest() {
    let pairs = synthetic_dataset(&config(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = write_dataset(dir.path(), &pairs, 4).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), written);
    let ingested = ingest_dataset(dir.path(), 8, 4).unwrap();
    assert_eq!(ingested, written);
    let loaded = load_dataset(dir.path(), &written).unwrap();
    for (a, b) in pairs.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.hr, b.hr);
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn rewriting_is_byte_identical() {
    let pairs = synthetic_dataset(&config(), 12).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(d1.path(), &pairs, 4).unwrap();
    write_dataset(d2.path(), &pairs, 4).unwrap();
    for sub in ["hr/00003.png", "ref/00003.png", "mask/00003.png", "manifest.json"] {
        assert_eq!(fs::read(d1.path().join(sub)).unwrap(), fs::read(d2.path().join(sub)).unwrap(), "{sub}");
    }
}

#[test]
fn ingest_reports_every_problem() {
    let pairs = synthetic_dataset(&config(), 13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &pairs, 4).unwrap();
    fs::remove_file(dir.path().join("ref/00001.png")).unwrap();
    fs::remove_file(dir.path().join("mask/00002.png")).unwrap();
    match ingest_dataset(dir.path(), 8, 4) {
        Err(Error::ValidationBatch(errs)) => {
            assert_eq!(errs.len(), 2, "{errs:?}");
            assert!(errs.iter().any(|e| e.contains("00001")));
            assert!(errs.iter().any(|e| e.contains("00002")));
        }
        other => panic!("expected batch validation error, got {other:?}"),
    }
    assert!(matches!(ingest_dataset(dir.path(), 64, 4), Err(Error::ValidationBatch(_))));
}
