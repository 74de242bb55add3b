//! Kernel outputs against brute-force oracles, plus property tests of the
//! core invariants.

use profashion_core::layers::{
    attention_forward, create_attention, prototype_spatial_attention, semantic_cross_attention,
    spatial_self_attention,
};
use profashion_core::params::ParamStore;
use profashion_core::rng::Rng;
use profashion_core::tensor::{
    bilinear_sample, concat0, conv2d, matmul, multi_head_attention, softmax, to_tokens, Tensor,
};
use profashion_testkit::{
    naive_attention_layer, naive_conv2d, naive_matmul, naive_multi_head_attention, softmax_row_alt,
};
use proptest::prelude::*;

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(100);
    let a = rand_tensor(&[5, 4], &mut rng);
    let b = rand_tensor(&[4, 6], &mut rng);
    let fast = matmul(&a, &b).unwrap();
    let slow = naive_matmul(&a, &b);
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

#[test]
fn conv2d_matches_six_loop() {
    let mut rng = Rng::new(101);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        let x = rand_tensor(&[3, 7, 8], &mut rng);
        let k = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let fast = conv2d(&x, &k, stride, padding).unwrap();
        let slow = naive_conv2d(&x, &k, stride, padding);
        assert!(
            fast.max_abs_diff(&slow) < 1e-12,
            "stride {stride} padding {padding}"
        );
    }
}

#[test]
fn softmax_matches_per_element_route_on_extremes() {
    let rows = vec![
        vec![0.0, 1.0e4, 2.0e4],
        vec![-1.0e4, 0.0, 1.0e4],
        vec![3.0, 3.0, 3.0],
    ];
    for row in rows {
        let t = Tensor::new(vec![row.len()], row.clone()).unwrap();
        let got = softmax(&t, 0).unwrap();
        let alt = softmax_row_alt(&row);
        for (g, a) in got.data().iter().zip(alt.iter()) {
            assert!((g - a).abs() < 1e-12);
        }
        got.check_finite().unwrap();
    }
}

#[test]
fn attention_single_head_equals_matmul_softmax_composition() {
    let mut rng = Rng::new(102);
    let q = rand_tensor(&[5, 6], &mut rng);
    let k = rand_tensor(&[7, 6], &mut rng);
    let v = rand_tensor(&[7, 6], &mut rng);
    let fast = multi_head_attention(&q, &k, &v, 1).unwrap();
    // Explicit composition: softmax(q kT / sqrt(d)) v.
    let mut kt = Tensor::zeros(&[6, 7]);
    for i in 0..7 {
        for j in 0..6 {
            *kt.at_mut(&[j, i]) = k.at(&[i, j]);
        }
    }
    let logits = matmul(&q, &kt).unwrap().scale(1.0 / 6f64.sqrt());
    let weights = softmax(&logits, 1).unwrap();
    let slow = matmul(&weights, &v).unwrap();
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

#[test]
fn attention_multi_head_matches_naive() {
    let mut rng = Rng::new(103);
    let q = rand_tensor(&[4, 8], &mut rng);
    let k = rand_tensor(&[6, 8], &mut rng);
    let v = rand_tensor(&[6, 8], &mut rng);
    for heads in [1, 2, 4] {
        let fast = multi_head_attention(&q, &k, &v, heads).unwrap();
        let slow = naive_multi_head_attention(&q, &k, &v, heads);
        assert!(fast.max_abs_diff(&slow) < 1e-12, "heads {heads}");
    }
}

fn attn_store(d: usize, d_kv: usize, seed: u64) -> ParamStore {
    let rng = Rng::new(seed);
    let mut s = ParamStore::new();
    create_attention(&mut s, "layer", d, d_kv, &rng).unwrap();
    s
}

#[test]
fn spatial_attention_matches_naive_layer() {
    let store = attn_store(8, 8, 104);
    let mut rng = Rng::new(105);
    let x = rand_tensor(&[8, 3, 3], &mut rng);
    let fast = spatial_self_attention(&store, "layer", &x, 2).unwrap();
    let tokens = to_tokens(&x).unwrap();
    let slow = naive_attention_layer(&store, "layer", &tokens, &tokens, 2).unwrap();
    let slow = profashion_core::tensor::from_tokens(&slow, 3, 3).unwrap();
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

#[test]
fn cross_attention_matches_naive_layer() {
    let store = attn_store(8, 5, 106);
    let mut rng = Rng::new(107);
    let x = rand_tensor(&[8, 3, 3], &mut rng);
    let g = rand_tensor(&[5], &mut rng);
    let fast = semantic_cross_attention(&store, "layer", &x, &g, 2).unwrap();
    let tokens = to_tokens(&x).unwrap();
    let g_row = Tensor::new(vec![1, 5], g.data().to_vec()).unwrap();
    let slow = naive_attention_layer(&store, "layer", &tokens, &g_row, 2).unwrap();
    let slow = profashion_core::tensor::from_tokens(&slow, 3, 3).unwrap();
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

#[test]
fn prototype_attention_matches_naive_layer() {
    let store = attn_store(8, 8, 108);
    let mut rng = Rng::new(109);
    let x = rand_tensor(&[8, 3, 3], &mut rng);
    let p = rand_tensor(&[8, 3, 3], &mut rng);
    let fast = prototype_spatial_attention(&store, "layer", &x, &p, 2).unwrap();
    let xt = to_tokens(&x).unwrap();
    let pt = to_tokens(&p).unwrap();
    let kv = concat0(&[&xt, &pt]).unwrap();
    let slow = naive_attention_layer(&store, "layer", &xt, &kv, 2).unwrap();
    let slow = profashion_core::tensor::from_tokens(&slow, 3, 3).unwrap();
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

#[test]
fn generic_attention_layer_matches_naive() {
    let store = attn_store(8, 8, 110);
    let mut rng = Rng::new(111);
    let x = rand_tensor(&[5, 8], &mut rng);
    let kv = rand_tensor(&[7, 8], &mut rng);
    let fast = attention_forward(&store, "layer", &x, &kv, 4).unwrap();
    let slow = naive_attention_layer(&store, "layer", &x, &kv, 4).unwrap();
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_simplex_property(values in prop::collection::vec(-50.0f64..50.0, 2..24)) {
        let n = values.len();
        let t = Tensor::new(vec![n], values).unwrap();
        let s = softmax(&t, 0).unwrap();
        let mut sum = 0.0;
        for v in s.data() {
            prop_assert!(*v >= 0.0);
            sum += v;
        }
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_oracle_property(seed in 0u64..500, m in 1usize..8, k in 1usize..8, n in 1usize..8) {
        let mut rng = Rng::new(seed);
        let a = Tensor::from_fn(&[m, k], |_| rng.normal());
        let b = Tensor::from_fn(&[k, n], |_| rng.normal());
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn bilinear_zero_offset_identity(seed in 0u64..500, h in 2usize..7, w in 2usize..7) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[2, h, w], |_| rng.normal());
        let off = Tensor::zeros(&[2, h, w]);
        let out = bilinear_sample(&x, &off).unwrap();
        prop_assert!(out.max_abs_diff(&x) == 0.0);
    }

    #[test]
    fn attention_permutation_equivariant(seed in 0u64..500) {
        // Permuting key/value pairs together leaves the output unchanged.
        let mut rng = Rng::new(seed);
        let q = Tensor::from_fn(&[3, 4], |_| rng.normal());
        let k = Tensor::from_fn(&[5, 4], |_| rng.normal());
        let v = Tensor::from_fn(&[5, 4], |_| rng.normal());
        let base = multi_head_attention(&q, &k, &v, 2).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let kp = Tensor::from_fn(&[5, 4], |i| k.at(&[perm[i[0]], i[1]]));
        let vp = Tensor::from_fn(&[5, 4], |i| v.at(&[perm[i[0]], i[1]]));
        let permuted = multi_head_attention(&q, &kp, &vp, 2).unwrap();
        prop_assert!(base.max_abs_diff(&permuted) < 1e-12);
    }
}
