//! Reference implementations written independently of the library kernels.
//! Shared by this crate's integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcenet_core::autograd::Graph;
use vcenet_core::ccm::Ccm;
use vcenet_core::nn::Conv2d;
use vcenet_core::params::{ParamId, ParamStore};
use vcenet_core::sam::Sam;
use vcenet_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Start row of band `i` when `n` rows are split into `parts` bands:
/// `floor(i·n / parts)`. Band sizes then differ by at most one.
fn boundary(i: usize, n: usize, parts: usize) -> usize {
    i * n / parts
}

/// Adaptive average pooling by brute force: for every output cell, enumerate
/// every input pixel and average the ones that fall inside the cell's bands.
pub fn region_mean_pool(x: &Tensor<f64>, ratio: usize) -> Vec<f64> {
    let (c, h, w) = x.dims3().unwrap();
    let mut out = Vec::with_capacity(c * ratio * ratio);
    for ch in 0..c {
        for i in 0..ratio {
            for j in 0..ratio {
                let (mut sum, mut count) = (0.0, 0usize);
                for y in 0..h {
                    for xx in 0..w {
                        let in_row = boundary(i, h, ratio) <= y && y < boundary(i + 1, h, ratio);
                        let in_col = boundary(j, w, ratio) <= xx && xx < boundary(j + 1, w, ratio);
                        if in_row && in_col {
                            sum += x.at3(ch, y, xx);
                            count += 1;
                        }
                    }
                }
                out.push(sum / count as f64);
            }
        }
    }
    out
}

/// `W·x + b` of a 1×1 convolution at one position.
fn pointwise(store: &ParamStore<f64>, conv: &Conv2d, x: &[f64]) -> Vec<f64> {
    let w = store.value(conv.weight).data();
    let b = conv.bias.map(|id| store.value(id).data().to_vec());
    (0..conv.out_channels)
        .map(|o| {
            let dot: f64 = (0..conv.in_channels).map(|i| w[o * conv.in_channels + i] * x[i]).sum();
            dot + b.as_ref().map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Non-local block one position at a time: query, key and value vectors, a
/// softmax over all positions of the query-key products, and the weighted sum
/// of values. Returns (output `C×N` row-major, attention `N×N`).
pub fn non_local_loop(sam: &Sam, store: &ParamStore<f64>, x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.dims3().unwrap();
    let n = h * w;
    let column = |p: usize| (0..c).map(|ch| x.data()[ch * n + p]).collect::<Vec<_>>();
    let q: Vec<Vec<f64>> = (0..n).map(|p| pointwise(store, &sam.query, &column(p))).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|p| pointwise(store, &sam.key, &column(p))).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|p| pointwise(store, &sam.value, &column(p))).collect();
    let mut attention = vec![0.0; n * n];
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum()).collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..n {
            attention[i * n + j] = exps[j] / z;
            for ch in 0..c {
                out[ch * n + i] += attention[i * n + j] * v[j][ch];
            }
        }
    }
    (out, attention)
}

/// One sampled coordinate of a gradient check.
#[derive(Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error with a floor on the denominator, so coordinates whose true
/// gradient is zero compare absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares analytic and central-difference gradients of
/// `Σ w ⊙ CCM(f_query, SAM(o_m))` on a 2-channel 3×3 instance in f64, at
/// `samples` coordinates drawn over every SAM and CCM parameter.
pub fn gradient_check(seed: u64, samples: usize) -> Vec<GradSample> {
    let c = 2;
    let (h, w) = (3, 3);
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let sam = Sam::new(&mut store, &mut r, "sam", c).unwrap();
    let ccm = Ccm::new(&mut store, &mut r, "ccm", c);
    // wake up the small-gain layers so every path carries a visible gradient
    for id in [sam.recover.weight, ccm.head.weight] {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= 20.0);
    }
    let o_m = random_tensor(&mut r, &[5 * c, h, w]);
    let f_query = random_tensor(&mut r, &[256, h, w]);
    let proj: Vec<f64> = (0..2 * h * w).map(|_| r.random_range(-1.0..1.0)).collect();

    let objective = |store: &ParamStore<f64>, record: bool| {
        let mut g = if record { Graph::new() } else { Graph::inference() };
        let x = g.input(o_m.clone(), false);
        let q = g.input(f_query.clone(), false);
        let e = sam.forward(&mut g, store, x).unwrap();
        let logits = ccm.forward(&mut g, store, q, e).unwrap();
        let s = g.dot(logits, proj.clone()).unwrap();
        let value = g.value(s).data()[0];
        let grads = record.then(|| {
            let gr = g.backward(s).unwrap();
            store.iter().filter_map(|(id, _)| gr.param(id).map(|t| (id, t.clone()))).collect::<Vec<_>>()
        });
        (value, grads)
    };
    let analytic = objective(&store, true).1.unwrap();
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let step = 1e-5;
    (0..samples)
        .map(|_| {
            let id = ids[r.random_range(0..ids.len())];
            let len = store.value(id).len();
            let index = r.random_range(0..len);
            let original = store.value(id).data()[index];
            store.value_mut(id).data_mut()[index] = original + step;
            let up = objective(&store, false).0;
            store.value_mut(id).data_mut()[index] = original - step;
            let down = objective(&store, false).0;
            store.value_mut(id).data_mut()[index] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.iter().find(|(i, _)| *i == id).map_or(0.0, |(_, t)| t.data()[index]);
            GradSample { name: store.get(id).name.clone(), index, analytic: a, numeric, rel_error: rel_error(a, numeric) }
        })
        .collect()
}

/// Binary mask from a predicate over `(x, y)`.
pub fn mask(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> vcenet_core::image::Mask {
    let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| u8::from(f(x, y))).collect();
    vcenet_core::image::Mask { width: w, height: h, data }
}

/// Synthetic dataset held in memory.
pub fn synthetic(n_images: usize, image_size: usize, seed: u64) -> vcenet_core::episode::InMemoryDataset {
    use vcenet_core::synth::{generate, SynthSpec, SynthStyle};
    let spec = SynthSpec { n_images, image_size, n_classes: 4, seed, style: SynthStyle::Smooth };
    let mut ds = vcenet_core::episode::InMemoryDataset::new(4);
    for (id, img, lab) in generate(&spec).unwrap() {
        ds.push(id, img, lab).unwrap();
    }
    ds
}

/// Outcome of a short training run against the frozen-backbone contract.
#[derive(Debug)]
pub struct FrozenReport {
    pub backbone_tensors: usize,
    pub backbone_moved: Vec<String>,
    pub trainable_tensors: usize,
    pub trainable_unchanged: Vec<String>,
}

/// Trains the tiny model for `steps` iterations on synthetic episodes and
/// compares every parameter with its initial value.
pub fn frozen_contract(steps: u64) -> FrozenReport {
    use vcenet_core::backbone::BACKBONE_PREFIX;
    use vcenet_core::episode::build_fold_spec;
    use vcenet_core::model::{ModelConfig, VceNet};
    use vcenet_core::train::{TrainConfig, Trainer};

    let data = synthetic(16, 48, 1);
    let (net, store) = VceNet::new::<f32>(&ModelConfig::tiny(8)).unwrap();
    let initial = store.clone();
    let mut config = TrainConfig::new(build_fold_spec(0, 4, 2).unwrap());
    config.n_iterations = steps;
    config.batch_size = 1;
    let mut trainer = Trainer::new(&net, &data, store, config).unwrap();
    trainer.run(|_| Ok(())).unwrap();
    let mut report = FrozenReport {
        backbone_tensors: 0,
        backbone_moved: Vec::new(),
        trainable_tensors: 0,
        trainable_unchanged: Vec::new(),
    };
    for ((_, before), (_, after)) in initial.iter().zip(trainer.store.iter()) {
        let same = before.value.bit_identical(&after.value);
        if before.name.starts_with(BACKBONE_PREFIX) {
            report.backbone_tensors += 1;
            if !same {
                report.backbone_moved.push(before.name.clone());
            }
        } else if before.trainable {
            report.trainable_tensors += 1;
            if same {
                report.trainable_unchanged.push(before.name.clone());
            }
        }
    }
    report
}

/// Parameter names that hold normalization state (batch, group, layer or
/// instance norm statistics and affine terms).
pub fn normalization_params<'a>(names: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    const MARKERS: [&str; 8] =
        ["running_mean", "running_var", "num_batches_tracked", "bn", "norm", ".gn", ".ln", "downsample.1"];
    names.into_iter().filter(|n| MARKERS.iter().any(|m| n.contains(m))).collect()
}
