mod common;

use common::{
    all_permutations, gradcheck, layer_norm_oracle, linear_oracle, mha_oracle, permute_rows,
    probe_loss,
};
use mivpg::attention::AttentionParams;
use mivpg::mil::pool_bag;
use mivpg::mivpg::{
    csa_update, flatten_baseline_forward, full_self_attention, init_queries,
    low_rank_self_attention, mivpg_block, mivpg_forward, Bag, BlockParams, BlockState, CsaSource,
    LowRankParams, MivpgConfig, MivpgParams, PpegParams, Scenario,
};
use mivpg::nn::Linear;
use mivpg::{Eval, Rng, Tensor};

fn tiny(use_csa: bool, use_ppeg: bool) -> MivpgConfig {
    MivpgConfig {
        num_blocks: 2,
        num_queries: 3,
        model_dim: 4,
        heads: 2,
        cross_attn_every: 1,
        use_csa,
        use_ppeg,
        ffn_hidden: Some(6),
        ppeg_kernels: vec![3],
        instance_dim: Some(5),
        abmil_hidden: 4,
        ..MivpgConfig::desk()
    }
}

fn queries_of(bag: &Bag, cfg: &MivpgConfig, params: &MivpgParams<Tensor>) -> Tensor {
    mivpg_forward(&mut Eval, bag, cfg, params).unwrap().queries
}

fn gelu_rows(x: &Tensor) -> Tensor {
    x.map(mivpg::tensor::gelu)
}

/// One block written out with loop oracles.
fn block_oracle(
    q: &Tensor,
    bag: &Tensor,
    cfg: &MivpgConfig,
    l: usize,
    p: &BlockParams<Tensor>,
) -> (Tensor, Tensor) {
    let q1 = layer_norm_oracle(&q.add(&mha_oracle(&p.self_attn, q, q, q)).unwrap());
    let bag = match &p.csa {
        Some(csa) if cfg.use_csa => {
            layer_norm_oracle(&bag.add(&mha_oracle(csa, bag, q, q)).unwrap())
        }
        _ => bag.clone(),
    };
    let q2 = match &p.cross_attn {
        Some(c) if cfg.has_cross_attention(l) => {
            layer_norm_oracle(&q1.add(&mha_oracle(c, &q1, &bag, &bag)).unwrap())
        }
        _ => q1,
    };
    let h = gelu_rows(&linear_oracle(&q2, &p.ffn_in.weight, &p.ffn_in.bias));
    let ff = linear_oracle(&h, &p.ffn_out.weight, &p.ffn_out.bias);
    (layer_norm_oracle(&q2.add(&ff).unwrap()), bag)
}

#[test]
fn query_init_shape_determinism_and_scale() {
    let cfg = MivpgConfig::desk();
    let a = init_queries(&cfg, &mut Rng::new(7));
    let b = init_queries(&cfg, &mut Rng::new(7));
    assert_eq!(a.shape(), &[8, 64]);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let big = MivpgConfig {
        num_queries: 100,
        model_dim: 100,
        heads: 1,
        ..MivpgConfig::desk()
    };
    let q = init_queries(&big, &mut Rng::new(11));
    let n = q.numel() as f64;
    let mean = q.data().iter().sum::<f64>() / n;
    let std = (q.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((0.018..=0.022).contains(&std), "std {std}");
}

#[test]
fn csa_equivariance_zero_update_and_rank_one() {
    let mut rng = Rng::new(3);
    for _ in 0..100 {
        let m = rng.range_inclusive(1, 9);
        let p = AttentionParams::new(8, 2, &mut rng).unwrap();
        let bag = Tensor::randn(&[m, 8], 1.0, &mut rng);
        let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let perm = rng.permutation(m);
        let out = csa_update(&mut Eval, &bag, &q, &p).unwrap();
        let out_p = csa_update(&mut Eval, &permute_rows(&bag, &perm), &q, &p).unwrap();
        assert!(out_p.max_abs_diff(&permute_rows(&out, &perm)) < 1e-9);
    }

    let mut p = AttentionParams::new(6, 3, &mut rng).unwrap();
    p.value.weight = Tensor::zeros(&[6, 6]);
    p.value.bias = Tensor::zeros(&[1, 6]);
    let bag = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let q = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let out = csa_update(&mut Eval, &bag, &q, &p).unwrap();
    assert!(out.max_abs_diff(&layer_norm_oracle(&bag)) < 1e-12);

    // A single key: every row reads the same projected value.
    let p = AttentionParams::new(6, 2, &mut rng).unwrap();
    let q = Tensor::randn(&[1, 6], 1.0, &mut rng);
    let v = linear_oracle(&q, &p.value.weight, &p.value.bias);
    let update = linear_oracle(&v, &p.output.weight, &p.output.bias);
    let expected: Vec<Vec<f64>> = (0..5)
        .map(|i| bag.row(i).iter().zip(update.row(0)).map(|(a, b)| a + b).collect())
        .collect();
    let expected = layer_norm_oracle(&Tensor::from_rows(&expected).unwrap());
    let out = csa_update(&mut Eval, &bag, &q, &p).unwrap();
    assert!(out.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn low_rank_attention_oracles() {
    // Orthogonal, widely separated rows and a probe equal to the bag: the
    // first stage is one-hot, so the two stages reduce to full attention.
    let bag = Tensor::identity(3).scale(10.0);
    let params = LowRankParams {
        compress: AttentionParams::identity(3, 1).unwrap(),
        expand: AttentionParams::identity(3, 1).unwrap(),
    };
    let lr = low_rank_self_attention(&mut Eval, &bag, &bag, &params).unwrap();
    let full = full_self_attention(&mut Eval, &bag, &params.expand).unwrap();
    assert!(lr.max_abs_diff(&full) < 1e-9);

    let mut rng = Rng::new(8);
    let params = LowRankParams::new(4, 2, &mut rng).unwrap();
    let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
    let probe = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let out = low_rank_self_attention(&mut Eval, &x, &probe, &params).unwrap();
    let lin = |l: &Linear<Tensor>, t: &Tensor| linear_oracle(t, &l.weight, &l.bias);
    let summary = lin(&params.compress.output, &lin(&params.compress.value, &x));
    let expected = lin(&params.expand.output, &lin(&params.expand.value, &summary));
    assert!(out.max_abs_diff(&expected) < 1e-12);

    let bag = Tensor::randn(&[7, 4], 1.0, &mut rng);
    let base = low_rank_self_attention(&mut Eval, &bag, &probe, &params).unwrap();
    for _ in 0..20 {
        let perm = rng.permutation(7);
        let o = low_rank_self_attention(&mut Eval, &permute_rows(&bag, &perm), &probe, &params)
            .unwrap();
        assert!(o.max_abs_diff(&permute_rows(&base, &perm)) < 1e-9);
    }
}

#[test]
fn block_passes_bag_through_without_csa() {
    let cfg = MivpgConfig {
        cross_attn_every: 2,
        ..tiny(false, false)
    };
    let mut rng = Rng::new(1);
    let params = BlockParams::new(&cfg, 1, &mut rng).unwrap();
    assert!(params.cross_attn.is_none());
    let state = BlockState {
        queries: Tensor::randn(&[3, 4], 1.0, &mut rng),
        bag: Tensor::randn(&[5, 4], 1.0, &mut rng),
    };
    let out = mivpg_block(&mut Eval, &state, 1, &cfg, &params).unwrap();
    assert_eq!(out.state.bag, state.bag);
    assert!(out.cross_attention.is_none());
}

#[test]
fn block_matches_unrolled_oracle_and_ignores_bag_order() {
    let mut rng = Rng::new(2);
    for (use_csa, source) in [
        (false, CsaSource::Previous),
        (true, CsaSource::Previous),
        (true, CsaSource::Current),
    ] {
        let cfg = MivpgConfig {
            csa_source: source,
            ..tiny(use_csa, false)
        };
        let params = BlockParams::new(&cfg, 0, &mut rng).unwrap();
        let state = BlockState {
            queries: Tensor::randn(&[3, 4], 1.0, &mut rng),
            bag: Tensor::randn(&[4, 4], 1.0, &mut rng),
        };
        let out = mivpg_block(&mut Eval, &state, 0, &cfg, &params).unwrap();
        if source == CsaSource::Previous {
            let (q, bag) = block_oracle(&state.queries, &state.bag, &cfg, 0, &params);
            assert!(out.state.queries.max_abs_diff(&q) < 1e-12);
            assert!(out.state.bag.max_abs_diff(&bag) < 1e-12);
        }
        for perm in all_permutations(4) {
            let shuffled = BlockState {
                queries: state.queries.clone(),
                bag: permute_rows(&state.bag, &perm),
            };
            let o = mivpg_block(&mut Eval, &shuffled, 0, &cfg, &params).unwrap();
            assert!(o.state.queries.max_abs_diff(&out.state.queries) < 1e-9);
            assert!(o.state.bag.max_abs_diff(&permute_rows(&out.state.bag, &perm)) < 1e-9);
        }
    }
}

#[test]
fn singleton_bag_has_all_ones_maps() {
    let cfg = tiny(true, true);
    let params = MivpgParams::new(&cfg, &mut Rng::new(4)).unwrap();
    let x = Tensor::randn(&[1, 5], 1.0, &mut Rng::new(5));
    for bag in [Bag::flat(x.clone()).unwrap(), Bag::hierarchical(vec![x]).unwrap()] {
        let fwd = mivpg_forward(&mut Eval, &bag, &cfg, &params).unwrap();
        assert!(fwd.queries.all_finite());
        assert_eq!(fwd.diagnostics.cross_attention.len(), 2);
        for block in &fwd.diagnostics.cross_attention {
            for head in &block.heads {
                assert_eq!(head.shape(), &[3, 1]);
                assert!(head.data().iter().all(|&w| w == 1.0));
            }
        }
    }
}

#[test]
fn identical_patches_get_uniform_weights() {
    let cfg = tiny(false, false);
    let params = MivpgParams::new(&cfg, &mut Rng::new(6)).unwrap();
    let mut rng = Rng::new(7);
    let images: Vec<Tensor> = [3, 5, 2]
        .iter()
        .map(|&p| {
            let row = Tensor::randn(&[1, 5], 1.0, &mut rng);
            Tensor::concat_rows(&vec![&row; p]).unwrap()
        })
        .collect();
    let bag = Bag::hierarchical(images).unwrap();
    assert_eq!(bag.scenario(), Scenario::ImagesWithPatches);
    let fwd = mivpg_forward(&mut Eval, &bag, &cfg, &params).unwrap();
    for (alpha, p) in fwd.diagnostics.patch_weights.iter().zip([3, 5, 2]) {
        assert_eq!(alpha.numel(), p);
        assert!(alpha.data().iter().all(|&a| (a - 1.0 / p as f64).abs() < 1e-15));
    }
}

#[test]
fn hierarchical_forward_is_pool_project_then_blocks() {
    let cfg = tiny(true, false);
    let params = MivpgParams::new(&cfg, &mut Rng::new(8)).unwrap();
    let mut rng = Rng::new(9);
    let images = vec![
        Tensor::randn(&[3, 5], 1.0, &mut rng),
        Tensor::randn(&[3, 5], 1.0, &mut rng),
    ];
    let fwd = mivpg_forward(&mut Eval, &Bag::hierarchical(images.clone()).unwrap(), &cfg, &params)
        .unwrap();

    let pooled: Vec<Tensor> = images
        .iter()
        .map(|img| pool_bag(&params.image_pool, img).unwrap().vector)
        .collect();
    let rows: Vec<Vec<f64>> = pooled.iter().map(|v| v.data().to_vec()).collect();
    let stacked = Tensor::from_rows(&rows).unwrap();
    let mut state = BlockState {
        queries: params.queries.clone(),
        bag: linear_oracle(&stacked, &params.input_proj.weight, &params.input_proj.bias),
    };
    for (l, block) in params.blocks.iter().enumerate() {
        state = mivpg_block(&mut Eval, &state, l, &cfg, block).unwrap().state;
    }
    assert!(fwd.queries.max_abs_diff(&state.queries) < 1e-12);
    for (alpha, img) in fwd.diagnostics.patch_weights.iter().zip(&images) {
        let expected = pool_bag(&params.image_pool, img).unwrap().weights.unwrap();
        assert!(alpha.data().iter().zip(expected.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}

#[test]
fn forward_is_invariant_to_instance_image_and_patch_order() {
    let mut rng = Rng::new(10);
    for use_csa in [false, true] {
        let cfg = tiny(use_csa, false);
        let params = MivpgParams::new(&cfg, &mut rng).unwrap();

        let flat = Bag::flat(Tensor::randn(&[5, 5], 1.0, &mut rng)).unwrap();
        let base = queries_of(&flat, &cfg, &params);
        for perm in all_permutations(5) {
            let q = queries_of(&flat.permute_instances(&perm).unwrap(), &cfg, &params);
            assert!(q.max_abs_diff(&base) < 1e-9);
        }

        let images: Vec<Tensor> = (0..4)
            .map(|i| Tensor::randn(&[2 + i, 5], 1.0, &mut rng))
            .collect();
        let bag = Bag::hierarchical(images).unwrap();
        let base = queries_of(&bag, &cfg, &params);
        for perm in all_permutations(4) {
            let q = queries_of(&bag.permute_instances(&perm).unwrap(), &cfg, &params);
            assert!(q.max_abs_diff(&base) < 1e-9);
        }
        for perm in all_permutations(5) {
            let q = queries_of(&bag.permute_patches(3, &perm).unwrap(), &cfg, &params);
            assert!(q.max_abs_diff(&base) < 1e-9);
        }
    }
}

#[test]
fn ppeg_breaks_order_and_zero_kernels_change_nothing() {
    let mut rng = Rng::new(12);
    let cfg = tiny(true, true);
    let params = MivpgParams::new(&cfg, &mut rng).unwrap();
    let bag = Bag::flat(Tensor::randn(&[9, 5], 1.0, &mut rng)).unwrap();
    let base = queries_of(&bag, &cfg, &params);
    let perm = rng.nontrivial_permutation(9);
    let shuffled = queries_of(&bag.permute_instances(&perm).unwrap(), &cfg, &params);
    assert!(shuffled.max_abs_diff(&base) > 1e-6);

    let mut zeroed = params.clone();
    zeroed.ppeg = Some(PpegParams::zeros(4, &cfg.ppeg_kernels));
    let off = MivpgConfig {
        use_ppeg: false,
        ..cfg.clone()
    };
    let mut plain = params.clone();
    plain.ppeg = None;
    assert_eq!(queries_of(&bag, &cfg, &zeroed), queries_of(&bag, &off, &plain));
}

#[test]
fn flattening_one_image_matches_the_flat_pipeline() {
    let cfg = tiny(true, false);
    let params = MivpgParams::new(&cfg, &mut Rng::new(13)).unwrap();
    let patches = Tensor::randn(&[4, 5], 1.0, &mut Rng::new(14));
    let hier = Bag::hierarchical(vec![patches.clone()]).unwrap();
    let a = flatten_baseline_forward(&mut Eval, &hier, &cfg, &params).unwrap();
    let b = mivpg_forward(&mut Eval, &Bag::flat(patches).unwrap(), &cfg, &params).unwrap();
    assert_eq!(a.queries, b.queries);

    let mut rng = Rng::new(15);
    let two = Bag::hierarchical(vec![
        Tensor::randn(&[2, 5], 1.0, &mut rng),
        Tensor::randn(&[3, 5], 1.0, &mut rng),
    ])
    .unwrap();
    let base = flatten_baseline_forward(&mut Eval, &two, &cfg, &params).unwrap().queries;
    let flat = Bag::flat(two.flattened().unwrap()).unwrap();
    for _ in 0..20 {
        let perm = rng.permutation(5);
        let shuffled = Bag::hierarchical(vec![flat.permute_instances(&perm).unwrap().flattened().unwrap()])
            .unwrap();
        let q = flatten_baseline_forward(&mut Eval, &shuffled, &cfg, &params).unwrap().queries;
        assert!(q.max_abs_diff(&base) < 1e-9);
    }
}

#[test]
fn two_block_model_gradients_on_a_flat_bag() {
    let cfg = MivpgConfig {
        csa_source: CsaSource::Current,
        ..tiny(true, true)
    };
    let params = MivpgParams::new(&cfg, &mut Rng::new(16)).unwrap();
    let bag = Bag::flat(Tensor::randn(&[5, 5], 1.0, &mut Rng::new(17))).unwrap();
    let named = params.named_tensors();
    let inputs: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
    let check = gradcheck(&inputs, |tape, vars| {
        let mut it = vars.iter();
        let p = params.map(&mut |_| *it.next().unwrap());
        let fwd = mivpg_forward(tape, &bag, &cfg, &p)?;
        probe_loss(tape, &fwd.queries, 3)
    });
    for (i, (name, _)) in named.iter().enumerate() {
        assert!(check.rel_err(i) < 1e-5, "{name}: {:.3e}", check.rel_err(i));
    }
}

#[test]
fn parameter_names_are_unique_and_assign_round_trips() {
    let cfg = tiny(true, true);
    let params = MivpgParams::new(&cfg, &mut Rng::new(18)).unwrap();
    let named = params.named_tensors();
    let mut names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(named.iter().map(|(_, t)| t.numel()).sum::<usize>(), params.num_parameters());
    assert!(names.contains(&"blocks.1.csa.value.bias"));
    names.sort();
    names.dedup();
    assert_eq!(names.len(), named.len());

    let mut other = MivpgParams::new(&cfg, &mut Rng::new(19)).unwrap();
    assert_ne!(other, params);
    let values: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    other.assign(&values).unwrap();
    assert_eq!(other, params);
    assert!(other.assign(&values[1..]).is_err());
}

#[test]
fn bag_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(20);
    let bag = Bag::hierarchical(vec![
        Tensor::randn(&[2, 3], 1.0, &mut rng),
        Tensor::randn(&[4, 3], 1e-7, &mut rng),
    ])
    .unwrap();
    let path = dir.path().join("bag.txt");
    bag.write(&path).unwrap();
    let back = Bag::read(&path).unwrap();
    assert_eq!(back, bag);
    assert_eq!(back.to_text(), std::fs::read_to_string(&path).unwrap());
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("MIVPG-BAG v1\nN 2\nP 2 D 3\n"));
}
