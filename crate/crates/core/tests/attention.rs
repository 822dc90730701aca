mod common;

use common::{attention_oracle, gradcheck, mha_oracle, permute_rows, probe_loss};
use mivpg::attention::{
    multi_head_attention, multi_head_attention_eval, query_residual_cross_attention,
    scaled_dot_attention, AttentionParams,
};
use mivpg::nn::Linear;
use mivpg::{Eval, Rng, Tape, Tensor};

fn random_params(dim: usize, heads: usize, rng: &mut Rng) -> AttentionParams<Tensor> {
    let mut p = AttentionParams::new(dim, heads, rng).unwrap();
    // Non-zero biases so they participate in every check.
    for lin in [&mut p.query, &mut p.key, &mut p.value, &mut p.output] {
        lin.bias = Tensor::randn(&[1, dim], 0.3, rng);
    }
    p
}

#[test]
fn scaled_dot_matches_loop_oracle() {
    let q = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
    let kv = Tensor::identity(2);
    let (out, w) = scaled_dot_attention(&mut Eval, &q, &kv, &kv).unwrap();
    let (expected, expected_w) = attention_oracle(&q, &kv, &kv);
    assert!(out.max_abs_diff(&expected) < 1e-15);
    assert!(w.max_abs_diff(&expected_w) < 1e-15);
    assert!((out.get(0, 0) - 0.6698).abs() < 1e-4 && (out.get(0, 1) - 0.3302).abs() < 1e-4);

    let mut rng = Rng::new(4);
    for _ in 0..10 {
        let q = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let k = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let v = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let (out, w) = scaled_dot_attention(&mut Eval, &q, &k, &v).unwrap();
        let (eo, ew) = attention_oracle(&q, &k, &v);
        assert!(out.max_abs_diff(&eo) < 1e-12);
        assert!(w.max_abs_diff(&ew) < 1e-12);
    }
}

#[test]
fn single_head_is_projected_scaled_dot() {
    let mut rng = Rng::new(9);
    let p = random_params(6, 1, &mut rng);
    let q_in = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let kv_in = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let (out, _) = multi_head_attention_eval(&p, &q_in, &kv_in, &kv_in).unwrap();

    let proj = |l: &Linear<Tensor>, x: &Tensor| l.apply(&mut Eval, x).unwrap();
    let (core, _) = scaled_dot_attention(
        &mut Eval,
        &proj(&p.query, &q_in),
        &proj(&p.key, &kv_in),
        &proj(&p.value, &kv_in),
    )
    .unwrap();
    let expected = proj(&p.output, &core);
    assert!(out.max_abs_diff(&expected) < 1e-14);
}

#[test]
fn two_heads_match_per_head_oracle() {
    let mut rng = Rng::new(21);
    let p = random_params(4, 2, &mut rng);
    let q_in = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let kv_in = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let (out, map) = multi_head_attention_eval(&p, &q_in, &kv_in, &kv_in).unwrap();
    assert!(out.max_abs_diff(&mha_oracle(&p, &q_in, &kv_in, &kv_in)) < 1e-12);
    assert_eq!(map.num_heads(), 2);
    assert!(map.max_row_sum_error() < 1e-9);
}

#[test]
fn key_order_invariance_and_query_equivariance() {
    let mut rng = Rng::new(33);
    for trial in 0..50 {
        let heads = [1, 2, 4][trial % 3];
        let p = random_params(8, heads, &mut rng);
        let q_in = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let kv_in = Tensor::randn(&[7, 8], 1.0, &mut rng);
        let (out, _) = multi_head_attention_eval(&p, &q_in, &kv_in, &kv_in).unwrap();

        let perm = rng.permutation(7);
        let kv_perm = permute_rows(&kv_in, &perm);
        let (out_k, _) = multi_head_attention_eval(&p, &q_in, &kv_perm, &kv_perm).unwrap();
        assert!(out.max_abs_diff(&out_k) < 1e-9, "trial {trial}");

        let qperm = rng.permutation(4);
        let (out_q, _) =
            multi_head_attention_eval(&p, &permute_rows(&q_in, &qperm), &kv_in, &kv_in).unwrap();
        assert!(out_q.max_abs_diff(&permute_rows(&out, &qperm)) < 1e-9, "trial {trial}");
    }
}

#[test]
fn query_residual_properties() {
    let mut rng = Rng::new(5);
    let p = random_params(2, 1, &mut rng);
    let q = Tensor::randn(&[2, 2], 1.0, &mut rng);
    let bag = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let out = query_residual_cross_attention(&mut Eval, &q, &bag, &p).unwrap();
    let expected = q.add(&mha_oracle(&p, &q, &bag, &bag)).unwrap();
    assert!(out.max_abs_diff(&expected) < 1e-12);

    for perm in common::all_permutations(3) {
        let shuffled = permute_rows(&bag, &perm);
        let o = query_residual_cross_attention(&mut Eval, &q, &shuffled, &p).unwrap();
        assert!(o.max_abs_diff(&out) < 1e-9);
    }

    let empty = Tensor::zeros(&[0, 2]);
    assert!(query_residual_cross_attention(&mut Eval, &q, &empty, &p).is_err());
}

#[test]
fn attention_parameter_gradients() {
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let p = random_params(4, 2, &mut rng);
        let q_in = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let kv_in = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut inputs = vec![q_in, kv_in];
        p.visit("", &mut |_, t| inputs.push(t.clone()));

        let check = gradcheck(&inputs, |tape: &mut Tape, v| {
            let mut it = v[2..].iter();
            let pv = p.map(&mut |_| *it.next().unwrap());
            let (out, _) = multi_head_attention(tape, &pv, &v[0], &v[1], &v[1])?;
            probe_loss(tape, &out, seed)
        });
        for i in 0..inputs.len() {
            assert!(check.rel_err(i) < 1e-6, "seed {seed} input {i}: {:.3e}", check.rel_err(i));
        }
    }
}
