use std::fs;
use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use robustcaps::data::{
    load_cifar_binary, load_idx, load_splits, stream_rng, DatasetName, TransformSpec,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};

fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn idx_fixture_round_trips_from_raw_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let images = idx(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0, 255, 128, 64]);
    let labels = idx(IDX_LABELS_MAGIC, &[1], &[7]);
    for (img_name, lab_name, compress) in [("i", "l", false), ("i.gz", "l.gz", true)] {
        let pack = |b: &[u8]| if compress { gzip(b) } else { b.to_vec() };
        let ip = write(dir.path(), img_name, &pack(&images));
        let lp = write(dir.path(), lab_name, &pack(&labels));
        let samples = load_idx(&ip, &lp).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label, 7);
        // displayed top-down: [[0, 1], [128/255, 64/255]]
        let img = &samples[0].image;
        assert_eq!(img.at(&[0, 1, 0]), 0.0);
        assert_eq!(img.at(&[0, 1, 1]), 1.0);
        assert_eq!(img.at(&[0, 0, 0]), 128.0 / 255.0);
        assert_eq!(img.at(&[0, 0, 1]), 64.0 / 255.0);
    }
}

#[test]
fn idx_count_mismatch_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let ip = write(dir.path(), "i", &idx(IDX_IMAGES_MAGIC, &[2, 1, 1], &[1, 2]));
    let lp = write(dir.path(), "l", &idx(IDX_LABELS_MAGIC, &[1], &[0]));
    assert!(load_idx(&ip, &lp).is_err());
    assert!(load_idx(&dir.path().join("absent"), &lp).is_err());
}

#[test]
fn cifar_files_concatenate() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![0u8; 3073];
    rec[0] = 3;
    rec[1] = 255;
    let a = write(dir.path(), "a.bin", &rec);
    let b = write(dir.path(), "b.bin", &[rec.clone(), rec].concat());
    let samples = load_cifar_binary(&[a, b], 10).unwrap();
    assert_eq!(samples.len(), 3);
    assert!(samples.iter().all(|s| s.label == 3 && s.image.at(&[0, 31, 0]) == 1.0));
}

#[test]
fn fashion_mnist_directory_layout_loads() {
    let dir = tempfile::tempdir().unwrap();
    let body: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 256) as u8).collect();
    write(dir.path(), "train-images-idx3-ubyte.gz", &gzip(&idx(IDX_IMAGES_MAGIC, &[2, 28, 28], &body)));
    write(dir.path(), "train-labels-idx1-ubyte", &idx(IDX_LABELS_MAGIC, &[2], &[1, 9]));
    write(dir.path(), "t10k-images-idx3-ubyte", &idx(IDX_IMAGES_MAGIC, &[1, 28, 28], &body[..784]));
    write(dir.path(), "t10k-labels-idx1-ubyte.gz", &gzip(&idx(IDX_LABELS_MAGIC, &[1], &[4])));
    let splits = load_splits(DatasetName::FashionMnist, dir.path()).unwrap();
    assert_eq!(splits.train.len(), 2);
    assert_eq!(splits.test[0].label, 4);
    assert_eq!(splits.train[1].image.shape(), &[1, 28, 28]);
    assert!(load_splits(DatasetName::Cifar10, dir.path()).is_err());
}

#[test]
fn translation_offsets_are_uniform() {
    let spec = TransformSpec { tr: 2, rot: 180.0 };
    let draws = 10_000;
    let mut counts = [[0usize; 5]; 2];
    for n in 0..draws {
        let t = spec.sample(&mut stream_rng(12, 0, n));
        counts[0][(t.dx + 2) as usize] += 1;
        counts[1][(t.dy + 2) as usize] += 1;
    }
    for axis in counts {
        for c in axis {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() <= 0.02, "offset frequency {freq}");
        }
    }
}

#[test]
fn rotation_angles_pass_kolmogorov_smirnov() {
    let spec = TransformSpec { tr: 2, rot: 180.0 };
    let draws = 10_000;
    let mut angles: Vec<f64> = (0..draws)
        .map(|n| spec.sample(&mut stream_rng(5, 0, n)).angle)
        .collect();
    angles.sort_by(f64::total_cmp);
    let n = draws as f64;
    let d = angles
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let cdf = (a + 180.0) / 360.0;
            (cdf - i as f64 / n).abs().max((i as f64 + 1.0) / n - cdf)
        })
        .fold(0.0, f64::max);
    // asymptotic 1% critical value
    let critical = 1.628 / n.sqrt();
    assert!(d < critical, "KS statistic {d} over {critical}");
}
