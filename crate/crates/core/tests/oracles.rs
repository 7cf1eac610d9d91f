mod common;

use rand::Rng;

use common::{gradient_check, non_local_loop, random_tensor, region_mean_pool, rng};
use vcenet_core::ccm::{predict_mask, MaskLogits};
use vcenet_core::mam::{expand_and_concat, pyramid_pool, POOL_RATIOS};
use vcenet_core::ops::Upsample;
use vcenet_core::params::ParamStore;
use vcenet_core::sam::Sam;
use vcenet_core::Tensor;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn pyramid_pool_matches_region_means() {
    let mut r = rng(11);
    for _ in 0..50 {
        let c = [1, 2, 8][r.random_range(0..3)];
        let (h, w) = (r.random_range(6..=24), r.random_range(6..=24));
        let x = random_tensor(&mut r, &[c, h, w]);
        let pooled = pyramid_pool(&x).unwrap();
        for (map, &ratio) in pooled.maps.iter().zip(&POOL_RATIOS) {
            assert!(max_diff(map.data(), &region_mean_pool(&x, ratio)) <= 1e-6, "{c}×{h}×{w} ratio {ratio}");
        }
    }
}

#[test]
fn twelve_by_eighteen_all_ratios() {
    let x = random_tensor(&mut rng(5), &[2, 12, 18]);
    let pooled = pyramid_pool(&x).unwrap();
    assert_eq!(pooled.cells_per_channel(), 50);
    for (map, &ratio) in pooled.maps.iter().zip(&POOL_RATIOS) {
        assert!(max_diff(map.data(), &region_mean_pool(&x, ratio)) <= 1e-6);
    }
}

#[test]
fn ratio_one_group_is_the_broadcast_global_mean() {
    let x = random_tensor(&mut rng(8), &[3, 7, 9]);
    let o_m = expand_and_concat(&pyramid_pool(&x).unwrap(), &x, Upsample::Bilinear).unwrap().o_m;
    for c in 0..3 {
        let mean = x.data()[c * 63..(c + 1) * 63].iter().sum::<f64>() / 63.0;
        assert!(o_m.data()[c * 63..(c + 1) * 63].iter().all(|v| (v - mean).abs() < 1e-12));
    }
    // identity group is the input itself
    assert_eq!(&o_m.data()[12 * 63..], x.data());
}

#[test]
fn non_local_matches_position_loop() {
    let mut r = rng(23);
    for _ in 0..20 {
        let half = [1, 2, 4][r.random_range(0..3)];
        let h = r.random_range(1..=8);
        let w = r.random_range(1..=64 / h);
        let mut store = ParamStore::<f64>::new();
        let sam = Sam::new(&mut store, &mut r, "sam", 2 * half).unwrap();
        for id in [sam.query.bias, sam.key.bias, sam.value.bias].into_iter().flatten() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
        let x = random_tensor(&mut r, &[half, h, w]);
        let trace = sam.non_local_tensor(&store, &x).unwrap();
        let (out, att) = non_local_loop(&sam, &store, &x);
        assert!(max_diff(trace.output.data(), &out) <= 1e-5);
        assert!(max_diff(trace.attention.data(), &att) <= 1e-5);
        let n = h * w;
        for row in trace.attention.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
        }
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let samples = gradient_check(3, 64);
    let worst = samples.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    assert!(worst.rel_error <= 1e-3, "{worst:?}");
    let names: std::collections::BTreeSet<_> = samples.iter().map(|s| s.name.split('.').next().unwrap()).collect();
    assert!(names.contains("sam") && names.contains("ccm"));
}

#[test]
fn two_by_two_logits_upsample_to_hand_table() {
    // foreground probabilities 0.1 0.3 / 0.5 0.9 expressed as logits
    let p = [0.1f64, 0.3, 0.5, 0.9];
    let mut data = vec![0.0; 8];
    for (i, &q) in p.iter().enumerate() {
        data[4 + i] = (q / (1.0 - q)).ln();
    }
    let logits = MaskLogits { logits: Tensor::from_vec(&[2, 2, 2], data).unwrap() };
    let pred = predict_mask(&logits, 4, 4).unwrap();
    // half-pixel centers: output i samples input (i + 0.5)/2 - 0.5, clamped at 0,
    // giving the axis weights (1,0) (0.75,0.25) (0.25,0.75) (0,1)
    let axis = [(1.0, 0.0), (0.75, 0.25), (0.25, 0.75), (0.0, 1.0)];
    for (y, &(wy0, wy1)) in axis.iter().enumerate() {
        for (x, &(wx0, wx1)) in axis.iter().enumerate() {
            let hand = wy0 * (wx0 * p[0] + wx1 * p[1]) + wy1 * (wx0 * p[2] + wx1 * p[3]);
            assert!((pred.probs[y * 4 + x] - hand).abs() < 1e-12, "({y},{x})");
            assert_eq!(pred.mask[y * 4 + x], u8::from(hand >= 0.5));
        }
    }
}
