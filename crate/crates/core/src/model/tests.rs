use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{
    classifier_b, classifier_w, layer, layer_base, POSITION_EMBED, REGION_B, REGION_W, SEGMENT_EMBED, TOKEN_EMBED,
};
use super::*;
use crate::diffcore::{grad_check, Graph, Tensor, Var};
use crate::testutil::{random_input, randomize};

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn full_width_regions_project_from_2054_values() {
    let cfg = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        heads: 2,
        ..ModelConfig::tiny()
    }
    .with_full_visual_dims();
    assert_eq!(cfg.region_input_dims(), 2054);
    let params = ModelParams::<f32>::init(cfg, 0).unwrap();
    assert_eq!(params.tensor(REGION_W).shape(), &[2054, 8]);
    let r = RegionFeature {
        stats: vec![0.5; 2048],
        bbox: [0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
    };
    assert_eq!(r.concatenated().len(), 2054);
    assert_eq!(project_region(&r, &params).unwrap().len(), 8);
}

#[test]
fn zero_region_projects_to_zero() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    randomize(&mut params, &mut rng, 1.0);
    params.tensor_mut(REGION_B).data_mut().fill(0.0);
    let r = RegionFeature {
        stats: vec![0.0; cfg.visual_dims],
        bbox: [0.0; 6],
    };
    assert!(project_region(&r, &params).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn project_region_matches_naive_matvec() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    randomize(&mut params, &mut rng, 1.0);
    let x = random_input(&cfg, &mut rng, 1, 0, 1);
    let r = &x.regions[0];
    let got = project_region(r, &params).unwrap();
    let w = params.tensor(REGION_W);
    let b = params.tensor(REGION_B);
    let input = r.concatenated();
    for j in 0..cfg.embed_dim {
        let mut acc = b.data()[j];
        for (i, &xi) in input.iter().enumerate() {
            acc += w.data()[i * cfg.embed_dim + j] * xi;
        }
        assert!((got.data()[j] - acc).abs() < 1e-10);
    }
}

#[test]
fn project_region_rejects_wrong_width() {
    let params = ModelParams::<f64>::init(ModelConfig::tiny(), 0).unwrap();
    let r = RegionFeature {
        stats: vec![0.0; 3],
        bbox: [0.0; 6],
    };
    assert!(project_region(&r, &params).is_err());
}

#[test]
fn assembled_layout_and_column_contents() {
    let cfg = ModelConfig {
        max_question: 4,
        max_tags: 2,
        max_regions: 3,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ModelParams::<f64>::init(cfg, 9).unwrap();
    let x = random_input(&cfg, &mut rng, 4, 2, 3);
    let (seq, span) = assemble_sequence(&x, &params).unwrap();
    assert_eq!(seq.shape(), &[12, cfg.embed_dim]);
    assert_eq!(span.text_len, 3 + 4 + 2);
    assert_eq!(span.image_len, 3);

    let ids = [
        CLS_ID,
        x.question_tokens[0],
        x.question_tokens[1],
        x.question_tokens[2],
        x.question_tokens[3],
        SEP_ID,
        x.object_tags[0],
        x.object_tags[1],
        SEP_ID,
    ];
    let tok = params.tensor(TOKEN_EMBED);
    let seg = params.tensor(SEGMENT_EMBED);
    let pos = params.tensor(POSITION_EMBED);
    for (col, &id) in ids.iter().enumerate() {
        for j in 0..cfg.embed_dim {
            let want = tok.row(id)[j] + seg.row(TEXT_SEGMENT)[j] + pos.row(col)[j];
            assert_eq!(seq.row(col)[j], want, "text column {col}");
        }
    }
    for (k, r) in x.regions.iter().enumerate() {
        let col = 9 + k;
        let proj = project_region(r, &params).unwrap();
        for j in 0..cfg.embed_dim {
            let want = proj.data()[j] + seg.row(IMAGE_SEGMENT)[j] + pos.row(col)[j];
            assert!((seq.row(col)[j] - want).abs() < 1e-15, "image column {col}");
        }
    }
}

#[test]
fn empty_tags_give_adjacent_separators() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ModelParams::<f64>::init(cfg, 0).unwrap();
    let x = random_input(&cfg, &mut rng, 2, 0, 2);
    assert_eq!(
        x.text_ids(),
        vec![CLS_ID, x.question_tokens[0], x.question_tokens[1], SEP_ID, SEP_ID]
    );
    let (seq, span) = assemble_sequence(&x, &params).unwrap();
    assert_eq!(seq.rows(), 3 + 2 + 2);
    assert_eq!(span.text_len, 5);
}

#[test]
fn sequence_length_identity_over_random_lengths() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::<f32>::init(cfg, 0).unwrap();
    for _ in 0..50 {
        let q = rng.random_range(1..=cfg.max_question);
        let o = rng.random_range(0..=cfg.max_tags);
        let i = rng.random_range(1..=cfg.max_regions);
        let x = random_input(&cfg, &mut rng, q, o, i);
        let (seq, span) = assemble_sequence(&x, &params).unwrap();
        assert_eq!(seq.rows(), 3 + q + o + i);
        assert_eq!(span.text_len, 3 + q + o);
    }
}

#[test]
fn out_of_vocabulary_token_rejected() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut x = random_input(&cfg, &mut rng, 2, 1, 1);
    x.object_tags[0] = cfg.vocab_size;
    assert!(assemble_sequence(&x, &params).is_err());
    x.object_tags.clear();
    x.question_tokens.clear();
    assert!(assemble_sequence(&x, &params).is_err());
}

#[test]
fn empty_stack_is_identity() {
    let cfg = ModelConfig {
        layers: 0,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ModelParams::<f64>::init(cfg, 0).unwrap();
    let x = random_input(&cfg, &mut rng, 3, 2, 2);
    let (seq, _) = assemble_sequence(&x, &params).unwrap();
    let out = encode(&seq, &params).unwrap();
    assert_eq!(out.hidden, seq);
    assert_eq!(out.h_cls.data(), seq.row(0));
}

#[test]
fn region_permutation_with_tied_positions_keeps_h_cls() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    randomize(&mut params, &mut rng, 0.5);
    let x = random_input(&cfg, &mut rng, 2, 1, 3);
    let text = x.text_len();
    let perm = [2usize, 0, 1];

    let mut permuted_x = x.clone();
    permuted_x.regions = perm.iter().map(|&p| x.regions[p].clone()).collect();
    let mut permuted_params = params.clone();
    let pos = params.tensor(POSITION_EMBED).clone();
    let width = cfg.embed_dim;
    for (new, &old) in perm.iter().enumerate() {
        let dst =
            &mut permuted_params.tensor_mut(POSITION_EMBED).data_mut()[(text + new) * width..(text + new + 1) * width];
        dst.copy_from_slice(pos.row(text + old));
    }

    let (s1, _) = assemble_sequence(&x, &params).unwrap();
    let (s2, _) = assemble_sequence(&permuted_x, &permuted_params).unwrap();
    let h1 = encode(&s1, &params).unwrap().h_cls;
    let h2 = encode(&s2, &permuted_params).unwrap().h_cls;
    for (a, b) in h1.data().iter().zip(h2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Hand-rolled single-layer, single-head encoder forward on two rows.
fn manual_layer(x: &[[f64; 4]; 2], p: &ModelParams<f64>) -> [[f64; 4]; 2] {
    let base = layer_base(0);
    let w = |off: usize| p.tensor(base + off).data().to_vec();
    let lin = |v: &[f64], wm: &[f64], b: &[f64], out_dim: usize| -> Vec<f64> {
        (0..out_dim)
            .map(|j| {
                b[j] + v
                    .iter()
                    .enumerate()
                    .map(|(i, &vi)| vi * wm[i * out_dim + j])
                    .sum::<f64>()
            })
            .collect()
    };
    let ln = |v: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        v.iter()
            .enumerate()
            .map(|(i, x)| (x - mean) * rstd * g[i] + b[i])
            .collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let q: Vec<Vec<f64>> = x.iter().map(|r| lin(r, &w(layer::WQ), &w(layer::BQ), 4)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| lin(r, &w(layer::WK), &w(layer::BK), 4)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| lin(r, &w(layer::WV), &w(layer::BV), 4)).collect();
    let mut out = [[0.0; 4]; 2];
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0)
            .collect();
        let m = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z = e[0] + e[1];
        let a: Vec<f64> = (0..4).map(|c| (e[0] * v[0][c] + e[1] * v[1][c]) / z).collect();
        let o = lin(&a, &w(layer::WO), &w(layer::BO), 4);
        let r1: Vec<f64> = (0..4).map(|c| x[i][c] + o[c]).collect();
        let h1 = ln(&r1, &w(layer::LN1_G), &w(layer::LN1_B));
        let f: Vec<f64> = lin(&h1, &w(layer::W1), &w(layer::B1), p.config().ff_dim)
            .into_iter()
            .map(gelu)
            .collect();
        let f2 = lin(&f, &w(layer::W2), &w(layer::B2), 4);
        let r2: Vec<f64> = (0..4).map(|c| h1[c] + f2[c]).collect();
        let h2 = ln(&r2, &w(layer::LN2_G), &w(layer::LN2_B));
        out[i].copy_from_slice(&h2);
    }
    out
}

#[test]
fn one_layer_one_head_matches_manual_forward() {
    let cfg = ModelConfig {
        embed_dim: 4,
        hidden_dim: 4,
        layers: 1,
        heads: 1,
        ff_dim: 6,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    randomize(&mut params, &mut rng, 0.8);
    let x = [[0.3, -0.2, 0.9, 0.1], [-0.5, 0.4, 0.0, 0.7]];
    let seq = Tensor::matrix(2, 4, x.iter().flatten().copied().collect()).unwrap();
    let out = encode(&seq, &params).unwrap();
    let want = manual_layer(&x, &params);
    for i in 0..2 {
        for c in 0..4 {
            assert!((out.hidden.row(i)[c] - want[i][c]).abs() < 1e-8, "row {i} col {c}");
        }
    }
}

#[test]
fn classify_cases() {
    let cfg = ModelConfig {
        answer_count: 8,
        ..ModelConfig::tiny()
    };
    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    let wi = classifier_w(&cfg);
    let bi = classifier_b(&cfg);
    params.tensor_mut(wi).data_mut().fill(0.0);
    let zero = classify(&Tensor::vector(vec![0.0; 8]), &params).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let p = crate::diffcore::softmax(&zero).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));

    // identity weights (D == answer_count)
    for i in 0..8 {
        params.tensor_mut(wi).data_mut()[i * 8 + i] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bias: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    params.tensor_mut(bi).data_mut().copy_from_slice(&bias);
    let h: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let logits = classify(&Tensor::vector(h.clone()), &params).unwrap();
    for j in 0..8 {
        assert_eq!(logits.data()[j], h[j] + bias[j]);
    }

    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    randomize(&mut params, &mut rng, 1.0);
    let logits = classify(&Tensor::vector(h.clone()), &params).unwrap();
    let w = params.tensor(wi);
    let b = params.tensor(bi);
    for j in 0..8 {
        let mut acc = b.data()[j];
        for i in 0..8 {
            acc += h[i] * w.data()[i * 8 + j];
        }
        assert!((logits.data()[j] - acc).abs() < 1e-10);
    }
    assert!(classify(&Tensor::vector(vec![0.0; 3]), &params).is_err());
}

#[test]
fn zero_delta_is_bit_identical() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = ModelParams::<f64>::init(cfg, 4).unwrap();
    for _ in 0..10 {
        let x = random_input(&cfg, &mut rng, 4, 3, 4);
        let plain = forward(&x, &params, None).unwrap();
        let zero = Tensor::zeros(&[x.text_len(), cfg.hidden_dim]);
        let with = forward(&x, &params, Some(&zero)).unwrap();
        assert_eq!(bits(&plain), bits(&with));
    }
}

#[test]
fn delta_leaves_image_rows_untouched() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = ModelParams::<f64>::init(cfg, 0).unwrap();
    let a = random_input(&cfg, &mut rng, 3, 2, 3);
    let b = random_input(&cfg, &mut rng, 1, 0, 2);
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, &params, false);
    let deltas: Vec<Var> = [&a, &b]
        .iter()
        .map(|x| {
            let n = x.text_len() * cfg.hidden_dim;
            g.constant(
                Tensor::new(
                    vec![x.text_len(), cfg.hidden_dim],
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            )
        })
        .collect();
    let out = forward_batch(&mut g, &pv, &cfg, &[&a, &b], Some(&deltas)).unwrap();
    let clean = g.value(out.embedded);
    let pert = g.value(out.input);
    for s in &out.spans {
        for r in s.image_rows() {
            assert_eq!(clean.row(r), pert.row(r));
        }
        for r in s.text_rows() {
            assert_ne!(clean.row(r), pert.row(r));
        }
    }
}

#[test]
fn delta_shape_mismatch_rejected() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = ModelParams::<f64>::init(cfg, 0).unwrap();
    let x = random_input(&cfg, &mut rng, 2, 1, 1);
    let bad = Tensor::zeros(&[x.text_len() - 1, cfg.hidden_dim]);
    assert!(forward(&x, &params, Some(&bad)).is_err());
}

#[test]
fn batched_forward_matches_single_example_forward() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    randomize(&mut params, &mut rng, 0.3);
    let xs: Vec<FusionInput> = (0..4)
        .map(|k| random_input(&cfg, &mut rng, 1 + k % 3, k % 2, 1 + k % 3))
        .collect();
    let refs: Vec<&FusionInput> = xs.iter().collect();
    let batched = logits_many(&params, &refs, 3, 1).unwrap();
    for (x, row) in xs.iter().zip(&batched) {
        let single = forward(x, &params, None).unwrap();
        for (a, b) in single.data().iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let threaded = logits_many(&params, &refs, 3, 3).unwrap();
    assert_eq!(batched, threaded);
}

#[test]
fn delta_gradient_matches_finite_differences() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    randomize(&mut params, &mut rng, 0.4);
    let x = random_input(&cfg, &mut rng, 3, 2, 2);
    let n = x.text_len() * cfg.hidden_dim;
    let delta = Tensor::new(
        vec![x.text_len(), cfg.hidden_dim],
        (0..n).map(|_| rng.random_range(-0.3..0.3)).collect(),
    )
    .unwrap();
    let report = grad_check(&[delta], 1e-5, |g, v| {
        let pv = ParamVars::new(g, &params, false);
        let out = forward_batch(g, &pv, &cfg, &[&x], Some(v))?;
        g.cross_entropy(out.logits, vec![2])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_parameter_gets_a_correct_gradient() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut params = ModelParams::<f64>::init(cfg, 0).unwrap();
    randomize(&mut params, &mut rng, 0.4);
    let xs = [
        random_input(&cfg, &mut rng, 3, 2, 2),
        random_input(&cfg, &mut rng, 2, 0, 3),
    ];
    let report = grad_check(params.tensors(), 1e-5, |g, vars| {
        let pv = ParamVars::from_vars(vars.to_vec());
        let out = forward_batch(g, &pv, &cfg, &[&xs[0], &xs[1]], None)?;
        g.cross_entropy(out.logits, vec![1, 4])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    // Completeness: every tensor was covered and received a non-trivial gradient.
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, &params, true);
    let out = forward_batch(&mut g, &pv, &cfg, &[&xs[0], &xs[1]], None).unwrap();
    let loss = g.cross_entropy(out.logits, vec![1, 4]).unwrap();
    let grads = g.backward(loss).unwrap();
    for (spec, v) in param_specs(&cfg).iter().zip(pv.vars()) {
        let grad = grads.get(*v).unwrap_or_else(|| panic!("no gradient for {}", spec.name));
        assert_eq!(grad.shape(), spec.shape.as_slice());
    }
}
