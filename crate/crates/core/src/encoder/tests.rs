use proptest::prelude::*;

use super::*;
use crate::corpus::{preprocess_relation_example, AnnotatedPassage, EntityPair, Mention};

fn tiny(d: usize, heads: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        token_vocab_size: 20,
        entity_vocab_size: 5,
        model_dim: d,
        entity_dim: 6,
        relation_dim: 5,
        key_dim: 6,
        layers,
        heads,
        ff_dim: 2 * d,
        max_seq_len: 16,
        max_hops: 2,
        seed: 3,
    }
}

fn randomize(p: &mut ModelParams, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for t in &mut p.tensors {
        *t = Tensor::randn(t.rows(), t.cols(), 0.5, &mut rng);
    }
}

fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum())
        .collect()
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()).max(1e-300))
}

#[test]
fn head_dim_arithmetic() {
    assert_eq!(tiny(8, 2, 1).head_dim(), 4);
    let bad = EncoderConfig {
        heads: 3,
        ..tiny(8, 2, 1)
    };
    assert!(init_params(&bad).is_err());
}

#[test]
fn init_is_deterministic() {
    assert_eq!(init_params(&tiny(8, 2, 2)).unwrap(), init_params(&tiny(8, 2, 2)).unwrap());
}

#[test]
fn init_statistics() {
    let cfg = EncoderConfig {
        token_vocab_size: 400,
        entity_vocab_size: 5,
        ..EncoderConfig::default()
    };
    let p = init_params(&cfg).unwrap();
    let t = p.by_name("token_emb").unwrap();
    let n = t.len() as f64;
    assert!(n >= 1e4);
    let mean = t.sum() / n;
    let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * 0.02 / n.sqrt(), "mean {mean}");
    assert!((std - 0.02).abs() < 3.0 * 0.02 / (2.0 * n).sqrt(), "std {std}");
    assert!(p.by_name("layer0.ln1_g").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(p.by_name("layer1.b2").unwrap().data().iter().all(|&v| v == 0.0));
    let wt = p.by_name("w_t2").unwrap();
    assert!((wt.get(3, 3) - 1.0).abs() < 0.05 && wt.get(3, 4).abs() < 0.05);
    assert_ne!(p.by_name("w_t1"), p.by_name("w_t2"));
}

#[test]
fn output_shape_and_length_limit() {
    let p = init_params(&tiny(8, 2, 2)).unwrap();
    let ctx = encode_tokens(&p, &[5, 6, 7]).unwrap();
    assert_eq!(ctx.0.shape(), (3, 8));
    let long = vec![5; 17];
    assert!(matches!(
        encode_tokens(&p, &long),
        Err(VkbError::SequenceTooLong { len: 17, max: 16 })
    ));
}

#[test]
fn permutation_equivariance_without_positions() {
    let mut p = init_params(&tiny(8, 2, 2)).unwrap();
    randomize(&mut p, 1);
    let pe = p.layout.pos_emb;
    *p.get_mut(pe) = Tensor::zeros(16, 8);
    let a = encode_tokens(&p, &[5, 6, 7, 8]).unwrap();
    let b = encode_tokens(&p, &[5, 8, 7, 6]).unwrap();
    for (i, j) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
        assert!(close(a.0.row(i), b.0.row(j), 1e-12));
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| g[i] * (v - mean) / (var + 1e-6).sqrt() + b[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn single_token_closed_form() {
    let mut p = init_params(&tiny(8, 2, 1)).unwrap();
    randomize(&mut p, 2);
    let by = |n: &str| p.by_name(n).unwrap().clone();
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let x = add(by("token_emb").row(9), by("pos_emb").row(0));
    // Attention over one key has weight 1, so the attended value is V itself.
    let v = add(&matvec(&x, &by("layer0.wv")), by("layer0.bv").row(0));
    let o = add(&matvec(&v, &by("layer0.wo")), by("layer0.bo").row(0));
    let r = layer_norm(&add(&x, &o), by("layer0.ln1_g").row(0), by("layer0.ln1_b").row(0));
    let f: Vec<f64> = add(&matvec(&r, &by("layer0.w1")), by("layer0.b1").row(0))
        .into_iter()
        .map(gelu)
        .collect();
    let f = add(&matvec(&f, &by("layer0.w2")), by("layer0.b2").row(0));
    let out = layer_norm(&add(&r, &f), by("layer0.ln2_g").row(0), by("layer0.ln2_b").row(0));
    let ctx = encode_tokens(&p, &[9]).unwrap();
    assert!(close(ctx.0.row(0), &out, 1e-10));
}

#[test]
fn relation_embedding_heads() {
    let mut p = init_params(&tiny(8, 2, 1)).unwrap();
    randomize(&mut p, 4);
    let ctx = encode_tokens(&p, &[5, 6, 7, 8, 9]).unwrap();
    let mut cat = ctx.0.row(1).to_vec();
    cat.extend_from_slice(ctx.0.row(3));
    let oracle = matvec(&cat, p.get(p.layout.w_r));
    assert!(close(&relation_embedding(&p, &ctx, 1, 3).unwrap(), &oracle, 1e-12));
    let back = relation_embedding(&p, &ctx, 3, 1).unwrap();
    assert!(back.iter().zip(&oracle).any(|(a, b)| (a - b).abs() > 1e-6));
    assert!(matches!(
        relation_embedding(&p, &ctx, 1, 5),
        Err(VkbError::IndexOutOfRange { .. })
    ));

    let wr = p.layout.w_r;
    let mut sel = Tensor::zeros(16, 5);
    for i in 0..5 {
        sel.set(i, i, 1.0);
    }
    *p.get_mut(wr) = sel;
    assert_eq!(relation_embedding(&p, &ctx, 2, 4).unwrap(), ctx.0.row(2)[..5].to_vec());
    *p.get_mut(wr) = Tensor::zeros(16, 5);
    assert!(relation_embedding(&p, &ctx, 2, 4).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn mention_embedding_head() {
    let mut p = init_params(&tiny(8, 2, 1)).unwrap();
    randomize(&mut p, 5);
    let ctx = encode_tokens(&p, &[5, 6, 7]).unwrap();
    let oracle = matvec(ctx.0.row(2), p.get(p.layout.w_e));
    assert!(close(&mention_embedding(&p, &ctx, 2).unwrap(), &oracle, 1e-12));
    assert_eq!(
        mention_embedding(&p, &ctx, 1).unwrap(),
        mention_embedding(&p, &ctx, 1).unwrap()
    );
    let we = p.layout.w_e;
    *p.get_mut(we) = Tensor::zeros(8, 6);
    assert!(mention_embedding(&p, &ctx, 0).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn entity_lookup_rows() {
    let mut p = init_params(&tiny(8, 2, 1)).unwrap();
    let e = p.layout.entity_table;
    p.get_mut(e).row_mut(3).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(entity_lookup(&p, 3).unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(matches!(entity_lookup(&p, 5), Err(VkbError::UnknownEntity(_))));
}

#[test]
fn encoding_ignores_passage_id() {
    let p = init_params(&tiny(8, 2, 1)).unwrap();
    let mk = |id: &str| AnnotatedPassage {
        id: id.into(),
        tokens: vec![5, 6, 7, 8],
        mentions: vec![Mention::new(0, 0, 1), Mention::new(3, 3, 2)],
    };
    let pair = EntityPair::new(1, 2);
    let a = preprocess_relation_example(&mk("a"), pair, true, true).unwrap();
    let b = preprocess_relation_example(&mk("b"), pair, true, true).unwrap();
    assert_eq!(
        example_relation_embedding(&p, &a).unwrap(),
        example_relation_embedding(&p, &b).unwrap()
    );
}

#[test]
fn checkpoint_round_trip() {
    let mut p = init_params(&tiny(8, 2, 2)).unwrap();
    randomize(&mut p, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    save_params(&p, &path).unwrap();
    let q = load_params(&path, Some(&p.config)).unwrap();
    assert_eq!(p, q);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(params_to_bytes(&q).unwrap(), bytes);

    let other = EncoderConfig {
        relation_dim: 7,
        ..p.config.clone()
    };
    assert!(matches!(
        load_params(&path, Some(&other)),
        Err(VkbError::ConfigMismatch(_))
    ));
    assert!(matches!(
        params_from_bytes(&bytes[..bytes.len() - 3], None),
        Err(VkbError::Corrupt(_))
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        params_from_bytes(&bad, None),
        Err(VkbError::VersionMismatch { found: 9, .. })
    ));
}

#[test]
fn frozen_groups_resolve() {
    let p = init_params(&tiny(8, 2, 2)).unwrap();
    let mask = p.trainable_mask(&["encoder".into(), "w_r".into()]).unwrap();
    assert!(!mask[p.layout.token_emb.0]);
    assert!(!mask[p.layout.layers[1].w2.0]);
    assert!(!mask[p.layout.w_r.0]);
    assert!(mask[p.layout.entity_table.0]);
    assert!(p.trainable_mask(&["nope".into()]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn heads_have_documented_shapes(
        heads in 1usize..4,
        per_head in 1usize..4,
        layers in 0usize..3,
        de in 1usize..6,
        dr in 1usize..6,
        dk in 1usize..6,
        len in 1usize..6,
    ) {
        let cfg = EncoderConfig {
            token_vocab_size: 12,
            entity_vocab_size: 4,
            model_dim: heads * per_head,
            entity_dim: de,
            relation_dim: dr,
            key_dim: dk,
            layers,
            heads,
            ff_dim: 3,
            max_seq_len: 8,
            max_hops: 2,
            seed: 0,
        };
        let p = init_params(&cfg).unwrap();
        let tokens: Vec<u32> = (0..len as u32).map(|i| 5 + i).collect();
        let ctx = encode_tokens(&p, &tokens).unwrap();
        prop_assert_eq!(ctx.0.shape(), (len, heads * per_head));
        prop_assert_eq!(relation_embedding(&p, &ctx, 0, len - 1).unwrap().len(), dr);
        prop_assert_eq!(mention_embedding(&p, &ctx, 0).unwrap().len(), de);
        prop_assert_eq!(p.get(p.layout.w_k).shape(), (de + dr, dk));
    }
}
