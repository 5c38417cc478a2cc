use std::collections::BTreeMap;
use std::path::Path;

use vsemb::datamodel::{generate_synthetic, load_dataset, save_dataset, InputKind, SynthConfig};
use vsemb::Error;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(key, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dataset_directories_round_trip_byte_for_byte() {
    for emit in [InputKind::FeatureMap, InputKind::PartSet] {
        let s = generate_synthetic(&SynthConfig {
            emit,
            per_class: 5,
            ..Default::default()
        })
        .unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(&s.dataset, a.path()).unwrap();
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded, s.dataset);
        save_dataset(&loaded, b.path()).unwrap();
        assert_eq!(snapshot(a.path()), snapshot(b.path()));
    }
}

#[test]
fn visual_codebook_datasets_load() {
    let s = generate_synthetic(&SynthConfig {
        per_class: 5,
        ..Default::default()
    })
    .unwrap();
    let ds = s
        .dataset
        .with_codebook(s.planted.visual_codebook().unwrap())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert!(dir.path().join("codebook_visual.vsef").exists());
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn damaged_feature_files_are_reported() {
    let s = generate_synthetic(&SynthConfig {
        per_class: 5,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&s.dataset, dir.path()).unwrap();
    let id = &s.dataset.instances()[0].id;
    let f = dir.path().join("features").join(format!("{id}.vsef"));
    let bytes = std::fs::read(&f).unwrap();

    std::fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Length(_))));

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    std::fs::write(&f, &bad).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));

    std::fs::remove_file(&f).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Load(_))));
}
