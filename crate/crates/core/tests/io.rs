use std::fs;
use std::sync::Arc;

use cellbal::{
    gen_gaussian_mixture, lloyd, load_bvecs, load_fvecs, load_vectors, save_fvecs, Codebook,
    InvertedFile, KMeansConfig,
};

#[test]
fn bvecs_widen_to_floats() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.bvecs");
    let mut bytes = Vec::new();
    for row in [[0u8, 7, 255], [1, 2, 3]] {
        bytes.extend_from_slice(&3i32.to_le_bytes());
        bytes.extend_from_slice(&row);
    }
    fs::write(&path, bytes).unwrap();
    let set = load_bvecs(&path).unwrap();
    assert_eq!(set.as_slice(), &[0.0, 7.0, 255.0, 1.0, 2.0, 3.0]);
    assert_eq!(load_vectors(&path).unwrap(), set);
}

#[test]
fn kmeans_output_reloads_as_codebook() {
    let dir = tempfile::tempdir().unwrap();
    let data = Arc::new(gen_gaussian_mixture(4, 2000, 6, 3, &[0.5, 0.3, 0.2], 0.5).unwrap());
    let out = lloyd(&data, &KMeansConfig::new(12, 4)).unwrap();
    out.save(dir.path()).unwrap();
    let codebook = Codebook::load(dir.path(), 0).unwrap();
    assert_eq!(codebook.centroids(), &out.centroids);
    assert!(codebook.penalties().iter().all(|&b| b == 1.0));

    let index = InvertedFile::build(data.clone(), codebook).unwrap();
    let index_dir = dir.path().join("index");
    index.save(&index_dir).unwrap();
    assert_eq!(
        InvertedFile::load(&index_dir, data).unwrap().lists(),
        index.lists()
    );
}

#[test]
fn index_load_rejects_a_different_database() {
    let dir = tempfile::tempdir().unwrap();
    let data = Arc::new(gen_gaussian_mixture(4, 500, 4, 2, &[0.5, 0.5], 0.5).unwrap());
    let out = lloyd(&data, &KMeansConfig::new(4, 4)).unwrap();
    let index = InvertedFile::build(data, Codebook::new(out.centroids)).unwrap();
    index.save(dir.path()).unwrap();
    let other = Arc::new(gen_gaussian_mixture(5, 500, 4, 2, &[0.5, 0.5], 0.5).unwrap());
    assert!(InvertedFile::load(dir.path(), other).is_err());
}

#[test]
fn fvecs_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fvecs");
    let set = gen_gaussian_mixture(1, 100, 5, 1, &[1.0], 1.0).unwrap();
    save_fvecs(&set, &path).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 100 * (4 + 5 * 4));
    assert_eq!(load_fvecs(&path).unwrap(), set);
}
