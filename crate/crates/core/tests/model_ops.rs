use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlm_core::model::*;
use xlm_core::tensor::{layer_norm_pf, ExtractMethod, Matrix, LN_EPS};
use xlm_core::Error;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0) * scale)
}

fn randomize(w: &mut CoreWeights, rng: &mut ChaCha8Rng, scale: f64) {
    for m in w.matrices_mut() {
        for v in m.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0) * scale;
        }
    }
    w.clear_pad_row();
}

fn small_config(sublayer1: Sublayer1) -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        context_len: 8,
        dim: 4,
        ffn_hidden: 6,
        layers: 2,
        sublayer1,
        pad_token: None,
    }
}

const KINDS: [Sublayer1; 3] = [
    Sublayer1::Attention { heads: 2 },
    Sublayer1::She,
    Sublayer1::Ishe,
];

/// Brute-force `s_i * sum_{j<=i} x_j W_{i-j+1}`.
fn extraction_oracle(x: &Matrix, w: &[Matrix], scaled: bool) -> Matrix {
    let (t, d) = x.shape();
    let mut out = Matrix::zeros(t, d);
    for i in 0..t {
        for j in 0..=i {
            let tap = &w[i - j];
            for c in 0..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += x.get(j, r) * tap.get(r, c);
                }
                out.set(i, c, out.get(i, c) + acc);
            }
        }
        if scaled {
            let s = 1.0 / ((i + 1) as f64).sqrt();
            for c in 0..d {
                out.set(i, c, out.get(i, c) * s);
            }
        }
    }
    out
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// embed

#[test]
fn embed_pad_row_is_zero_for_extractor() {
    let mut cfg = small_config(Sublayer1::She);
    cfg.pad_token = Some(0);
    let mut w = CoreWeights::zeros(&cfg).unwrap();
    randomize(&mut w, &mut ChaCha8Rng::seed_from_u64(1), 1.0);
    // a stale nonzero pad row must still embed to zero
    w.embedding.row_mut(0).fill(3.0);
    let x = embed(&[2, 0, 1], &w).unwrap();
    assert_eq!(x.row(1), &[0.0; 4]);
    assert_eq!(x.row(0), w.embedding.row(2));
    assert_eq!(x.row(2), w.embedding.row(1));
}

#[test]
fn embed_single_token_she_is_embedding_row() {
    let cfg = small_config(Sublayer1::She);
    let mut w = CoreWeights::zeros(&cfg).unwrap();
    randomize(&mut w, &mut ChaCha8Rng::seed_from_u64(2), 1.0);
    let x = embed(&[3], &w).unwrap();
    assert_eq!(x.row(0), w.embedding.row(3));
}

#[test]
fn embed_attention_adds_positions() {
    let cfg = small_config(Sublayer1::Attention { heads: 2 });
    let mut w = CoreWeights::zeros(&cfg).unwrap();
    randomize(&mut w, &mut ChaCha8Rng::seed_from_u64(3), 1.0);
    let tokens = [4, 0, 4, 2];
    let x = embed(&tokens, &w).unwrap();
    let pos = w.pos_embedding.as_ref().unwrap();
    for (i, &tok) in tokens.iter().enumerate() {
        for c in 0..cfg.dim {
            assert_eq!(x.get(i, c), w.embedding.get(tok, c) + pos.get(i, c));
        }
    }
}

#[test]
fn embed_rejects_bad_input() {
    let cfg = small_config(Sublayer1::She);
    let w = CoreWeights::zeros(&cfg).unwrap();
    assert!(matches!(
        embed(&[0; 9], &w),
        Err(Error::SequenceTooLong { len: 9, context_len: 8 })
    ));
    assert!(matches!(
        embed(&[1, 5], &w),
        Err(Error::TokenOutOfRange { id: 5, offset: 1, vocab_size: 5 })
    ));
    assert!(matches!(embed(&[], &w), Err(Error::EmptySequence)));
}

// ---------------------------------------------------------------------------
// attention

fn attention_weights(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionWeights {
    AttentionWeights {
        wq: random(rng, d, d, 1.0),
        wk: random(rng, d, d, 1.0),
        wv: random(rng, d, d, 1.0),
        wo: random(rng, d, d, 1.0),
        heads,
    }
}

#[test]
fn attention_single_position_is_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = attention_weights(&mut rng, 4, 2);
    let x = random(&mut rng, 1, 4, 1.0);
    let out = mhsa_forward(&x, &w).unwrap();
    let expect = x.matmul(&w.wv).unwrap().matmul(&w.wo).unwrap();
    assert!(out.max_abs_diff(&expect) < 1e-14);
}

#[test]
fn attention_zero_queries_average_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut w = attention_weights(&mut rng, 4, 2);
    w.wq.fill(0.0);
    let x = random(&mut rng, 5, 4, 1.0);
    let out = mhsa_forward(&x, &w).unwrap();
    let v = x.matmul(&w.wv).unwrap();
    for i in 0..5 {
        let mean: Vec<f64> = (0..4)
            .map(|c| (0..=i).map(|j| v.get(j, c)).sum::<f64>() / (i + 1) as f64)
            .collect();
        let expect = Matrix::from_rows(&[mean]).unwrap().matmul(&w.wo).unwrap();
        for c in 0..4 {
            assert!((out.get(i, c) - expect.get(0, c)).abs() < 1e-13);
        }
    }
}

#[test]
fn attention_matches_per_head_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, d, heads) = (7, 6, 3);
    let w = attention_weights(&mut rng, d, heads);
    let x = random(&mut rng, t, d, 1.0);
    let q = x.matmul(&w.wq).unwrap();
    let k = x.matmul(&w.wk).unwrap();
    let v = x.matmul(&w.wv).unwrap();
    let dh = d / heads;
    let mut concat = Matrix::zeros(t, d);
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..dh).map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c)).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..dh {
                let val: f64 = (0..=i).map(|j| scores[j].exp() / z * v.get(j, h * dh + c)).sum();
                concat.set(i, h * dh + c, val);
            }
        }
    }
    let expect = concat.matmul(&w.wo).unwrap();
    let out = mhsa_forward(&x, &w).unwrap();
    assert!(out.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn attention_rejects_indivisible_heads() {
    assert!(matches!(AttentionWeights::zeros(4, 3), Err(Error::Config(_))));
    let mut w = AttentionWeights::zeros(4, 2).unwrap();
    w.heads = 3;
    assert!(mhsa_forward(&Matrix::zeros(2, 4), &w).is_err());
}

// ---------------------------------------------------------------------------
// extraction

fn scalar_taps(values: &[f64]) -> ExtractorWeights {
    ExtractorWeights {
        ext: values.iter().map(|&v| Matrix::filled(1, 1, v)).collect(),
        adj: Matrix::zeros(1, 1),
    }
}

#[test]
fn extraction_scalar_example() {
    let w = scalar_taps(&[2.0, 3.0, 5.0]);
    let x = Matrix::filled(3, 1, 1.0);
    let she = extractor_extraction(&x, &w, false).unwrap();
    assert_eq!(she.as_slice(), &[2.0, 5.0, 10.0]);
    let ishe = extractor_extraction(&x, &w, true).unwrap();
    let expect = [2.0, 5.0 / 2f64.sqrt(), 10.0 / 3f64.sqrt()];
    for (a, b) in ishe.as_slice().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((ishe.get(1, 0) - 3.5355).abs() < 1e-4);
    assert!((ishe.get(2, 0) - 5.7735).abs() < 1e-4);
}

#[test]
fn extraction_first_row_ignores_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = ExtractorWeights {
        ext: (0..6).map(|_| random(&mut rng, 3, 3, 1.0)).collect(),
        adj: Matrix::zeros(3, 3),
    };
    let x = random(&mut rng, 6, 3, 1.0);
    let a = extractor_extraction(&x, &w, false).unwrap();
    let b = extractor_extraction(&x, &w, true).unwrap();
    assert_eq!(a.row(0), b.row(0));
}

#[test]
fn extraction_rejects_sequence_longer_than_taps() {
    let w = scalar_taps(&[1.0, 1.0]);
    assert!(matches!(
        extractor_extraction(&Matrix::zeros(3, 1), &w, false),
        Err(Error::SequenceTooLong { len: 3, context_len: 2 })
    ));
}

fn padding_shift_case(seed: u64, p: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d) = (6, 3);
    let l = t + p;
    let w = ExtractorWeights {
        ext: (0..l).map(|_| random(&mut rng, d, d, 1.0)).collect(),
        adj: Matrix::zeros(d, d),
    };
    let x = random(&mut rng, t, d, 1.0);
    let padded = Matrix::from_fn(t + p, d, |i, c| if i < p { 0.0 } else { x.get(i - p, c) });
    let she = extractor_extraction(&x, &w, false).unwrap();
    let she_p = extractor_extraction(&padded, &w, false).unwrap();
    let ishe = extractor_extraction(&x, &w, true).unwrap();
    let ishe_p = extractor_extraction(&padded, &w, true).unwrap();
    for i in 0..t {
        let factor = ((i + 1) as f64 / (i + 1 + p) as f64).sqrt();
        for c in 0..d {
            assert!((she_p.get(i + p, c) - she.get(i, c)).abs() < 1e-12);
            assert!((ishe_p.get(i + p, c) - factor * ishe.get(i, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn extraction_padding_shift_law() {
    for (seed, p) in [(8, 1), (9, 7), (10, 3)] {
        padding_shift_case(seed, p);
    }
}

#[test]
fn spectral_and_direct_match_oracle_on_long_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (t, d) in [(40, 5), (33, 16), (64, 9)] {
        let w = ExtractorWeights {
            ext: (0..t).map(|_| random(&mut rng, d, d, 0.5)).collect(),
            adj: Matrix::zeros(d, d),
        };
        let x = random(&mut rng, t, d, 1.0);
        for scaled in [false, true] {
            let oracle = extraction_oracle(&x, &w.ext, scaled);
            for method in [ExtractMethod::Direct, ExtractMethod::Spectral, ExtractMethod::Auto] {
                let got = extraction_with(&x, &w, scaled, method).unwrap();
                let err = got.max_abs_diff(&oracle);
                assert!(err < 1e-10, "t={t} d={d} {method:?}: {err}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extraction_matches_triple_loop(
        seed in any::<u64>(),
        d in 1usize..=8,
        l in 1usize..=16,
        t_frac in 0.0f64..1.0,
        scaled in any::<bool>(),
    ) {
        let t = 1 + ((l - 1) as f64 * t_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = ExtractorWeights {
            ext: (0..l).map(|_| random(&mut rng, d, d, 1.0)).collect(),
            adj: Matrix::zeros(d, d),
        };
        let x = random(&mut rng, t, d, 1.0);
        let oracle = extraction_oracle(&x, &w.ext, scaled);
        for method in [ExtractMethod::Direct, ExtractMethod::Spectral] {
            let got = extraction_with(&x, &w, scaled, method).unwrap();
            prop_assert!(got.max_abs_diff(&oracle) < 1e-10);
        }
    }

    #[test]
    fn ffn_is_position_wise(seed in any::<u64>(), t in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, t, 3, 1.0);
        let w1 = random(&mut rng, 3, 5, 1.0);
        let w2 = random(&mut rng, 5, 3, 1.0);
        let base = ffn_forward(&x, &w1, &w2).unwrap();
        let j = rng.random_range(0..t);
        let mut y = x.clone();
        y.set(j, 0, y.get(j, 0) + 0.7);
        let out = ffn_forward(&y, &w1, &w2).unwrap();
        for i in 0..t {
            if i != j {
                prop_assert_eq!(out.row(i), base.row(i));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// adjustment

#[test]
fn adjustment_zero_weights_halve() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x_in = random(&mut rng, 4, 3, 1.0);
    let x_ext = random(&mut rng, 4, 3, 1.0);
    let out = extractor_adjustment(&x_in, &x_ext, &Matrix::zeros(3, 3)).unwrap();
    assert_eq!(out, x_ext.scale(0.5));
}

#[test]
fn adjustment_of_zero_extraction_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x_in = random(&mut rng, 4, 3, 1.0);
    let w = random(&mut rng, 3, 3, 1.0);
    let out = extractor_adjustment(&x_in, &Matrix::zeros(4, 3), &w).unwrap();
    assert_eq!(out, Matrix::zeros(4, 3));
}

#[test]
fn adjustment_matches_entrywise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x_in = random(&mut rng, 5, 4, 2.0);
    let x_ext = random(&mut rng, 5, 4, 2.0);
    let w = random(&mut rng, 4, 4, 2.0);
    let out = extractor_adjustment(&x_in, &x_ext, &w).unwrap();
    for i in 0..5 {
        for c in 0..4 {
            let z: f64 = (0..4).map(|r| x_in.get(i, r) * w.get(r, c)).sum();
            assert!((out.get(i, c) - x_ext.get(i, c) * sigmoid(z)).abs() < 1e-12);
        }
    }
}

#[test]
fn adjustment_rejects_shape_mismatch() {
    let r = extractor_adjustment(&Matrix::zeros(3, 2), &Matrix::zeros(2, 2), &Matrix::zeros(2, 2));
    assert!(matches!(r, Err(Error::Shape(_))));
}

// ---------------------------------------------------------------------------
// ffn and sublayers

#[test]
fn ffn_examples() {
    let one = |v: f64| Matrix::filled(1, 1, v);
    assert_eq!(ffn_forward(&one(2.0), &one(3.0), &one(4.0)).unwrap().get(0, 0), 24.0);
    assert_eq!(ffn_forward(&one(-2.0), &one(3.0), &one(4.0)).unwrap().get(0, 0), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, 3, 2, 1.0);
    let w2 = random(&mut rng, 4, 2, 1.0);
    assert_eq!(ffn_forward(&x, &Matrix::zeros(2, 4), &w2).unwrap(), Matrix::zeros(3, 2));
}

#[test]
fn ffn_permutes_with_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, 4, 3, 1.0);
    let w1 = random(&mut rng, 3, 5, 1.0);
    let w2 = random(&mut rng, 5, 3, 1.0);
    let perm = [2, 0, 3, 1];
    let px = Matrix::from_fn(4, 3, |i, c| x.get(perm[i], c));
    let base = ffn_forward(&x, &w1, &w2).unwrap();
    let out = ffn_forward(&px, &w1, &w2).unwrap();
    for i in 0..4 {
        assert_eq!(out.row(i), base.row(perm[i]));
    }
}

#[test]
fn sublayer_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&mut rng, 4, 3, 1.0);
    let id = sublayer_apply(&x, |n| Ok(Matrix::zeros(n.rows(), n.cols()))).unwrap();
    assert_eq!(id, x);

    let c = Matrix::filled(2, 3, 1.5);
    let out = sublayer_apply(&c, |n| {
        assert_eq!(n, &Matrix::zeros(2, 3));
        Ok(n.map(|v| v + 0.25))
    })
    .unwrap();
    assert_eq!(out, Matrix::filled(2, 3, 1.75));

    let w = random(&mut rng, 3, 3, 1.0);
    let out = sublayer_apply(&x, |n| n.matmul(&w)).unwrap();
    let branch = layer_norm_pf(&x, LN_EPS).matmul(&w).unwrap();
    assert_eq!(out, x.add(&branch).unwrap());

    let bad = sublayer_apply(&x, |n| Ok(Matrix::zeros(n.rows(), 2)));
    assert!(matches!(bad, Err(Error::Shape(_))));
}

// ---------------------------------------------------------------------------
// core

#[test]
fn core_single_layer_is_manual_composition() {
    for kind in KINDS {
        let mut cfg = small_config(kind);
        cfg.layers = 1;
        let mut w = CoreWeights::zeros(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        randomize(&mut w, &mut rng, 0.5);
        let x = random(&mut rng, 6, 4, 1.0);
        let layer = &w.layers[0];
        let mid = sublayer_apply(&x, |n| match &layer.mixer {
            MixerWeights::Attention(a) => mhsa_forward(n, a),
            MixerWeights::Extractor(e) => {
                let ext = extractor_extraction(n, e, kind == Sublayer1::Ishe)?;
                extractor_adjustment(n, &ext, &e.adj)
            }
        })
        .unwrap();
        let expect = sublayer_apply(&mid, |n| ffn_forward(n, &layer.w1, &layer.w2)).unwrap();
        let out = transformer_core_forward(&x, &w).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-13, "{kind}");
    }
}

#[test]
fn core_with_zero_weights_is_identity() {
    for kind in KINDS {
        let w = CoreWeights::zeros(&small_config(kind)).unwrap();
        let x = random(&mut ChaCha8Rng::seed_from_u64(19), 5, 4, 1.0);
        assert_eq!(transformer_core_forward(&x, &w).unwrap(), x);
    }
}

#[test]
fn core_is_composition_of_layers() {
    for kind in KINDS {
        let mut cfg = small_config(kind);
        cfg.layers = 3;
        let mut w = CoreWeights::zeros(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        randomize(&mut w, &mut rng, 0.5);
        let x = random(&mut rng, 8, 4, 1.0);
        let mut y = x.clone();
        for k in 0..3 {
            y = layer_forward(&y, &w, k).unwrap();
        }
        assert_eq!(transformer_core_forward(&x, &w).unwrap(), y);
    }
}

#[test]
fn core_residuals_telescope() {
    for kind in KINDS {
        let mut w = CoreWeights::zeros(&small_config(kind)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        randomize(&mut w, &mut rng, 0.8);
        let x = random(&mut rng, 7, 4, 1.0);
        let trace = core_trace(&x, &w).unwrap();
        assert_eq!(trace.stages.len(), 2 * 2 + 1);
        assert_eq!(trace.branches.len(), 2 * 2);
        let mut acc = x.clone();
        for (k, b) in trace.branches.iter().enumerate() {
            acc = acc.add(b).unwrap();
            // each stage is literally the previous stage plus its branch
            assert_eq!(acc, trace.stages[k + 1]);
        }
        assert_eq!(acc, trace.output);
    }
}

#[test]
fn core_is_causal() {
    for kind in KINDS {
        let mut w = CoreWeights::zeros(&small_config(kind)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        randomize(&mut w, &mut rng, 0.8);
        let x = random(&mut rng, 8, 4, 1.0);
        let base = transformer_core_forward(&x, &w).unwrap();
        for j in 0..8 {
            let mut y = x.clone();
            for c in 0..4 {
                y.set(j, c, y.get(j, c) + 1.0 + c as f64);
            }
            let out = transformer_core_forward(&y, &w).unwrap();
            for i in 0..j {
                for c in 0..4 {
                    assert!((out.get(i, c) - base.get(i, c)).abs() < 1e-12);
                }
            }
            assert!(out.row(j) != base.row(j), "{kind}: row {j} did not react");
        }
    }
}

#[test]
fn ishe_equals_she_on_one_token() {
    let mut w = CoreWeights::zeros(&small_config(Sublayer1::She)).unwrap();
    randomize(&mut w, &mut ChaCha8Rng::seed_from_u64(23), 0.8);
    let a = predict_probs(&[3], &w).unwrap();
    w.config.sublayer1 = Sublayer1::Ishe;
    let b = predict_probs(&[3], &w).unwrap();
    assert_eq!(a, b);
}

#[test]
fn core_rejects_long_input() {
    let w = CoreWeights::zeros(&small_config(Sublayer1::She)).unwrap();
    assert!(matches!(
        transformer_core_forward(&Matrix::zeros(9, 4), &w),
        Err(Error::SequenceTooLong { .. })
    ));
}

// ---------------------------------------------------------------------------
// head

#[test]
fn head_zero_is_uniform() {
    let x = random(&mut ChaCha8Rng::seed_from_u64(24), 3, 4, 1.0);
    let p = lm_head(&x, &Matrix::zeros(4, 5)).unwrap();
    for v in p.as_slice() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn head_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let p = lm_head(&random(&mut rng, 6, 4, 3.0), &random(&mut rng, 4, 7, 3.0)).unwrap();
    for r in 0..6 {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
}

// ---------------------------------------------------------------------------
// parameter accounting

#[test]
fn parameter_counts_table1() {
    let attn = count_params(&ModelConfig::table1(Sublayer1::Attention { heads: 1 })).unwrap();
    assert_eq!(attn.total, 6 + 128 + 4 * (16 + 32) + 6);
    assert_eq!(attn.total, 332);
    let she = count_params(&ModelConfig::table1(Sublayer1::She)).unwrap();
    assert_eq!(she.total, 6 + 4 * (64 * 4 + 4 + 32) + 6);
    assert_eq!(she.total, 1180);
}

#[test]
fn parameter_parity_and_positional_saving() {
    for ctor in [ModelConfig::table1, ModelConfig::table2] {
        let she = count_params(&ctor(Sublayer1::She)).unwrap();
        let ishe = count_params(&ctor(Sublayer1::Ishe)).unwrap();
        assert_eq!(she, ishe);
        let cfg = ctor(Sublayer1::Attention { heads: 1 });
        let attn = count_params(&cfg).unwrap();
        assert_eq!(attn.pos_embedding, cfg.context_len * cfg.dim);
        assert_eq!(she.pos_embedding, 0);
        // with the mixers set aside, attention carries exactly l*d more
        let m = cfg.layers;
        assert_eq!(
            (attn.total - m * attn.mixer) - (she.total - m * she.mixer),
            cfg.context_len * cfg.dim
        );
    }
    let t2 = count_params(&ModelConfig::table2(Sublayer1::Attention { heads: 8 })).unwrap();
    assert_eq!(t2.pos_embedding, 16_384);
}

#[test]
fn counts_agree_with_allocated_weights() {
    for kind in KINDS {
        let cfg = small_config(kind);
        let w = CoreWeights::zeros(&cfg).unwrap();
        assert_eq!(w.param_count(), count_params(&cfg).unwrap().total);
    }
}

// ---------------------------------------------------------------------------
// gradients and checkpoints

#[test]
fn full_model_gradients_match_finite_differences() {
    use xlm_core::tensor::{finite_diff_check, SeqLayout};
    for kind in KINDS {
        let mut w = CoreWeights::zeros(&small_config(kind)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        randomize(&mut w, &mut rng, 0.5);
        let params: Vec<Matrix> = w.matrices().into_iter().cloned().collect();
        let layout = SeqLayout::new(6, 2);
        let inputs: Vec<usize> = (0..layout.rows()).map(|_| rng.random_range(0..5)).collect();
        let targets: Vec<usize> = (0..layout.rows()).map(|_| rng.random_range(0..5)).collect();
        let cfg = w.config.clone();
        let err = finite_diff_check(
            |g, ids| {
                let model = BoundModel::from_params(&cfg, ids)?;
                model.loss(g, &inputs, &targets, layout)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{kind}: {err}");
    }
}

#[test]
fn bind_and_params_agree_on_order() {
    use xlm_core::tensor::Graph;
    for kind in KINDS {
        let mut w = CoreWeights::zeros(&small_config(kind)).unwrap();
        randomize(&mut w, &mut ChaCha8Rng::seed_from_u64(27), 1.0);
        let mut g = Graph::new();
        let model = BoundModel::bind(&mut g, &w).unwrap();
        let ids = model.params();
        assert_eq!(ids.len(), w.matrices().len());
        for (id, m) in ids.iter().zip(w.matrices()) {
            assert_eq!(g.value(*id), m);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (n, kind) in KINDS.into_iter().enumerate() {
        let mut cfg = small_config(kind);
        cfg.pad_token = Some(2);
        let mut w = CoreWeights::zeros(&cfg).unwrap();
        randomize(&mut w, &mut ChaCha8Rng::seed_from_u64(28), 1.0);
        w.head.set(0, 0, f64::MIN_POSITIVE / 3.0);
        w.head.set(0, 1, -0.0);
        let path = dir.path().join(format!("m{n}.xlm"));
        save_checkpoint(&w, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, w.config);
        for (a, b) in back.matrices().into_iter().zip(w.matrices()) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn checkpoint_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let w = CoreWeights::zeros(&small_config(Sublayer1::She)).unwrap();
    let mut bytes = Vec::new();
    encode_checkpoint(&w, &mut bytes).unwrap();
    let path = dir.path().join("x");

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XLM0");
    assert!(matches!(decode_checkpoint(&path, &bad), Err(Error::BadMagic { .. })));

    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(decode_checkpoint(&path, cut), Err(Error::Truncated { .. })));

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint(&path, &extra), Err(Error::Malformed { .. })));

    // unknown sublayer kind byte follows the five u64 sizes
    let mut kind = bytes.clone();
    kind[4 + 40] = 9;
    assert!(matches!(decode_checkpoint(&path, &kind), Err(Error::Malformed { .. })));

    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io(_))));
}
