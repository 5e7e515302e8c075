//! Checks against the canonical dataset files. They run only when
//! `PBITT_DATA_ROOT` points at a directory holding `cifar-10-batches-bin/`
//! and/or MNIST's `train-images-idx3-ubyte` + `train-labels-idx1-ubyte`;
//! otherwise they print why they were skipped and pass.

use std::path::PathBuf;

use pbitt::config::data_root_from_env;
use pbitt::data::{load_cifar10_binary, load_idx, CIFAR_RECORD_LEN};

fn find(rel: &str) -> Option<PathBuf> {
    let root = data_root_from_env()?;
    let p = root.join(rel);
    p.exists().then_some(p)
}

fn fnv(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[test]
fn cifar_first_image_matches_raw_bytes() {
    let Some(path) = find("cifar-10-batches-bin/data_batch_1.bin") else {
        eprintln!("skipped: set PBITT_DATA_ROOT to a directory containing cifar-10-batches-bin/");
        return;
    };
    let raw = std::fs::read(&path).unwrap();
    assert_eq!(raw.len() % CIFAR_RECORD_LEN, 0);
    let want_label = raw[0] as usize;
    let want = fnv(raw[1..CIFAR_RECORD_LEN].iter().copied());

    let ds = load_cifar10_binary(&path).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.image_shape(), [3, 32, 32]);
    assert_eq!(ds.labels[0], want_label);
    let got = fnv(ds.images.data()[..3072].iter().map(|&v| (v * 255.0).round() as u8));
    assert_eq!(got, want);
}

#[test]
fn mnist_train_set_shape() {
    let (Some(images), Some(labels)) = (find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte")) else {
        eprintln!("skipped: set PBITT_DATA_ROOT to a directory containing the MNIST training IDX files");
        return;
    };
    let ds = load_idx(images, labels, None).unwrap();
    assert_eq!(ds.len(), 60_000);
    assert_eq!(ds.image_shape(), [1, 28, 28]);
    assert_eq!(ds.classes, 10);
}
