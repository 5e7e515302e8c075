//! The synthetic passive set must come from a visibly different
//! distribution than the active set: a logistic-regression probe trained on
//! one sample tells them apart on a fresh sample.

use pbitt::autodiff::Graph;
use pbitt::data::{synth_pair, SynthSpec};
use pbitt::Tensor;

/// Per-image pixel variance and mean squared horizontal/vertical neighbour
/// differences.
fn features(images: &Tensor<f32>) -> Vec<Vec<f64>> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    images
        .data()
        .chunks_exact(per)
        .take(n)
        .map(|img| {
            let px = |ch: usize, y: usize, x: usize| img[(ch * h + y) * w + x] as f64;
            let mut f: Vec<f64> = Vec::new();
            let m = img.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
            f.push(img.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / per as f64);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if x + 1 < w {
                            gx += (px(ch, y, x + 1) - px(ch, y, x)).powi(2);
                        }
                        if y + 1 < h {
                            gy += (px(ch, y + 1, x) - px(ch, y, x)).powi(2);
                        }
                    }
                }
            }
            f.push(gx / per as f64);
            f.push(gy / per as f64);
            f
        })
        .collect()
}

fn design(seed: u64, per_set: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let spec = SynthSpec {
        active_train: per_set,
        passive_count: per_set,
        ..SynthSpec::default()
    };
    let (active, passive) = synth_pair(&spec, seed).unwrap();
    let mut x = features(&active.images);
    x.extend(features(&passive.images));
    let y = (0..2 * per_set).map(|i| usize::from(i >= per_set)).collect();
    (x, y)
}

fn standardize(train: &mut [Vec<f64>], test: &mut [Vec<f64>]) {
    let d = train[0].len();
    for j in 0..d {
        let n = train.len() as f64;
        let mean = train.iter().map(|r| r[j]).sum::<f64>() / n;
        let sd = (train.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
        for r in train.iter_mut().chain(test.iter_mut()) {
            r[j] = (r[j] - mean) / sd;
        }
    }
}

#[test]
fn linear_probe_separates_active_from_passive() {
    let (mut xtr, ytr) = design(1, 600);
    let (mut xte, yte) = design(2, 400);
    standardize(&mut xtr, &mut xte);
    let d = xtr[0].len();
    let flat = |rows: &[Vec<f64>]| -> Tensor<f64> {
        Tensor::new(&[rows.len(), d], rows.iter().flatten().copied().collect()).unwrap()
    };
    let (xt, xe) = (flat(&xtr), flat(&xte));

    let mut w = Tensor::<f64>::zeros(&[d, 2]).with_requires_grad(true);
    let mut b = Tensor::<f64>::zeros(&[2]).with_requires_grad(true);
    let lr = 0.5;
    for _ in 0..300 {
        let mut g = Graph::new();
        let x = g.leaf(&xt);
        let wv = g.leaf(&w);
        let bv = g.leaf(&b);
        let z = g.linear(x, wv, bv).unwrap();
        let loss = g.softmax_cross_entropy(z, &ytr).unwrap();
        let grads = g.backward(loss).unwrap();
        for (t, v) in [(&mut w, wv), (&mut b, bv)] {
            let gr = grads.wrt(v).unwrap().to_vec();
            for (p, gi) in t.data_mut().iter_mut().zip(gr) {
                *p -= lr * gi;
            }
        }
    }
    let mut g = Graph::new();
    let x = g.leaf(&xe);
    let wv = g.leaf(&w);
    let bv = g.leaf(&b);
    let z = g.linear(x, wv, bv).unwrap();
    let correct = g
        .value(z)
        .chunks_exact(2)
        .zip(&yte)
        .filter(|(r, &y)| usize::from(r[1] > r[0]) == y)
        .count();
    let acc = correct as f64 / yte.len() as f64;
    println!("probe accuracy {acc}");
    assert!(acc >= 0.95, "probe accuracy {acc}");
}
