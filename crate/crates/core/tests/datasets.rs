mod common;

use std::fs;

use common::{write_fairface_dir, write_utkface_dir, FAKE_JPEG};
use demoscope::datasets::{
    index_cacd, index_fairface, index_utkface, label_histograms, select_eval_set, DatasetError, DatasetIndex,
};
use demoscope::taxonomy::{AgeLabel, AttributeKind, DatasetId, GenderLabel};

#[test]
fn utkface_names_decode() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("45_1_3_20170109150557335.jpg.chip.jpg"), FAKE_JPEG).unwrap();
    let (index, skipped) = index_utkface(dir.path()).unwrap();
    assert!(skipped.is_empty());
    let s = &index.samples[0];
    assert_eq!(s.truth_age, Some(AgeLabel::Years(45)));
    assert_eq!(s.truth_gender, Some(GenderLabel::Female));
    assert_eq!(s.truth_race, Some(3));
}

#[test]
fn utkface_malformed_names_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write_utkface_dir(dir.path(), 3);
    for bad in ["61_3_0_2017.jpg", "abc.jpg", "30_0_7_2017.jpg", "200_0_0_2017.jpg", "notes.txt"] {
        fs::write(dir.path().join(bad), FAKE_JPEG).unwrap();
    }
    let (index, skipped) = index_utkface(dir.path()).unwrap();
    assert_eq!(index.len(), 3);
    assert_eq!(skipped.len(), 5);
    let text = skipped.to_text();
    assert!(text.contains("notes.txt") && text.contains("abc.jpg"));
}

#[test]
fn empty_directory_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let err = index_utkface(dir.path()).unwrap_err();
    assert!(matches!(err, DatasetError::EmptyDataset(DatasetId::Utkface)));
}

#[test]
fn fairface_release_labels_map_to_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write_fairface_dir(dir.path(), 9);
    let (index, skipped) = index_fairface(&labels, dir.path()).unwrap();
    assert!(skipped.is_empty());
    assert_eq!(index.len(), 9);
    let oldest = index.samples.iter().find(|s| s.id == "val/9.jpg").unwrap();
    assert_eq!(oldest.truth_age, Some(AgeLabel::Bin(8)));
    let latino = index.samples.iter().find(|s| s.id == "val/7.jpg").unwrap();
    assert_eq!(latino.truth_race, Some(6));
}

#[test]
fn fairface_unknown_category_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write_fairface_dir(dir.path(), 2);
    let mut text = fs::read_to_string(&labels).unwrap();
    text.push_str("val/1.jpg,20-29,Male,Martian,True\n");
    fs::write(&labels, text).unwrap();
    let err = index_fairface(&labels, dir.path()).unwrap_err();
    assert!(matches!(err, DatasetError::UnknownCategory { ref value, .. } if value == "Martian"), "{err}");
}

#[test]
fn fairface_missing_image_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write_fairface_dir(dir.path(), 2);
    fs::remove_file(dir.path().join("val/2.jpg")).unwrap();
    let err = index_fairface(&labels, dir.path()).unwrap_err();
    assert!(matches!(err, DatasetError::MissingImage { .. }), "{err}");
}

#[test]
fn cacd_ages_and_range() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["a.jpg", "b.jpg", "c.jpg", "d.jpg"] {
        fs::write(dir.path().join(f), FAKE_JPEG).unwrap();
    }
    let meta = dir.path().join("cacd.csv");
    fs::write(&meta, "file,age\na.jpg,14\nb.jpg,54\nc.jpg,60\nd.jpg,forty\n").unwrap();
    let (index, skipped) = index_cacd(&meta, dir.path()).unwrap();
    assert_eq!(index.len(), 2);
    assert_eq!(skipped.len(), 2);
    assert!(index.samples.iter().all(|s| s.truth_gender.is_none() && s.truth_race.is_none()));
}

#[test]
fn index_round_trips_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    write_utkface_dir(dir.path(), 4);
    let (index, _) = index_utkface(dir.path()).unwrap();
    let path = dir.path().join("index.json");
    index.save(&path).unwrap();
    assert_eq!(DatasetIndex::load(&path).unwrap(), index);

    let tampered = fs::read_to_string(&path).unwrap().replacen("\"Male\"", "\"Female\"", 1);
    fs::write(&path, tampered).unwrap();
    assert!(matches!(DatasetIndex::load(&path), Err(DatasetError::DigestMismatch { .. })));
}

#[test]
fn eval_set_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    write_utkface_dir(dir.path(), 10);
    let (index, _) = index_utkface(dir.path()).unwrap();
    let a = select_eval_set(&index, 5, 7).unwrap();
    let b = select_eval_set(&index, 5, 7).unwrap();
    let c = select_eval_set(&index, 5, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(matches!(select_eval_set(&index, 11, 7), Err(DatasetError::TooLarge { .. })));
}

#[test]
fn histograms_cover_all_races() {
    let dir = tempfile::tempdir().unwrap();
    write_utkface_dir(dir.path(), 10);
    let (index, _) = index_utkface(dir.path()).unwrap();
    let h = label_histograms(&index);
    assert_eq!(h[&AttributeKind::Race].len(), 5);
    assert_eq!(h[&AttributeKind::Gender].values().sum::<usize>(), 10);
}
