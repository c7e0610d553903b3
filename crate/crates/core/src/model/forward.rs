use rand::RngCore;

use super::{EncoderKind, ModelParams};
use crate::domain::{ItemId, Token, TokenKind};
use crate::error::{Error, Result};
use crate::numkernel::{dot, dropout_mask, Matrix, NodeId, Tape, LAYER_NORM_EPS};

type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

fn check_items(items: &[ItemId], catalog_size: usize) -> Result<Vec<usize>> {
    if items.is_empty() {
        return Err(Error::Contract("cannot encode an empty item set".into()));
    }
    items
        .iter()
        .map(|i| {
            if i.in_catalog(catalog_size) {
                Ok(i.index())
            } else {
                Err(Error::Contract(format!("item {i} outside catalog of {catalog_size}")))
            }
        })
        .collect()
}

fn sorted_rows(items: &[ItemId], catalog_size: usize) -> Result<Vec<usize>> {
    let mut rows = check_items(items, catalog_size)?;
    rows.sort_unstable();
    rows.dedup();
    Ok(rows)
}

/// Self-attention pooling of an `n x d` set matrix:
/// `w = (m w_q)(m w_k)^T`, `a = softmax(w 1)`, `v = a^T m`.
/// Returns the `n x 1` score node and the `1 x d` pooled node.
fn record_attention_pool(tape: &mut Tape<'_>, m: NodeId, w_q: NodeId, w_k: NodeId) -> Result<(NodeId, NodeId)> {
    let q = tape.matmul(m, w_q)?;
    let k = tape.matmul(m, w_k)?;
    let weights = tape.matmul_transposed(q, k)?;
    let summary = tape.row_sum(weights);
    let scores = tape.softmax(summary)?;
    let scores_t = tape.transpose(scores);
    let pooled = tape.matmul(scores_t, m)?;
    Ok((scores, pooled))
}

fn record_set(tape: &mut Tape<'_>, items: &[ItemId], params: &ModelParams) -> Result<NodeId> {
    let cfg = &params.config;
    let rows = sorted_rows(items, cfg.catalog_size)?;
    let m = tape.gather(params.slots.item_emb, &rows)?;
    match cfg.encoder {
        EncoderKind::AvgPool => tape.mean_rows(m),
        EncoderKind::AttnPool => {
            let w_q = tape.param(params.slots.enc_q)?;
            let w_k = tape.param(params.slots.enc_k)?;
            Ok(record_attention_pool(tape, m, w_q, w_k)?.1)
        }
        EncoderKind::Flatten => Err(Error::Contract(
            "set position reached a model without an encoder; flatten upstream".into(),
        )),
    }
}

/// Attention pooling over the rows of `m_s` exactly as given (no reordering).
/// Returns `(a_s, v_s)`.
pub fn attention_pool(m_s: &Matrix, w_q: &Matrix, w_k: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if m_s.rows() == 0 {
        return Err(Error::Contract("cannot encode an empty item set".into()));
    }
    let params: [Matrix; 0] = [];
    let mut tape = Tape::new(&params);
    let m = tape.constant(m_s.clone());
    let q = tape.constant(w_q.clone());
    let k = tape.constant(w_k.clone());
    let (scores, pooled) = record_attention_pool(&mut tape, m, q, k)?;
    Ok((tape.value(scores).data().to_vec(), tape.value(pooled).data().to_vec()))
}

/// Attention-pooled representation of an item set (rows in ascending id order).
pub fn encode_set_attn(items: &[ItemId], params: &ModelParams) -> Result<Vec<f64>> {
    Ok(set_attention(items, params)?.1)
}

/// The attention score vector `a_s` over the set members, ascending id order.
pub fn set_attention_weights(items: &[ItemId], params: &ModelParams) -> Result<Vec<f64>> {
    Ok(set_attention(items, params)?.0)
}

fn set_attention(items: &[ItemId], params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = sorted_rows(items, params.config.catalog_size)?;
    let mut tape = Tape::new(&params.tensors);
    let m = tape.gather(params.slots.item_emb, &rows)?;
    let w_q = tape.param(params.slots.enc_q)?;
    let w_k = tape.param(params.slots.enc_k)?;
    let (scores, pooled) = record_attention_pool(&mut tape, m, w_q, w_k)?;
    Ok((tape.value(scores).data().to_vec(), tape.value(pooled).data().to_vec()))
}

/// Unweighted mean of the members' embeddings.
pub fn encode_set_avg(items: &[ItemId], params: &ModelParams) -> Result<Vec<f64>> {
    let rows = sorted_rows(items, params.config.catalog_size)?;
    let mut tape = Tape::new(&params.tensors);
    let m = tape.gather(params.slots.item_emb, &rows)?;
    let mean = tape.mean_rows(m)?;
    Ok(tape.value(mean).data().to_vec())
}

fn maybe_dropout(tape: &mut Tape<'_>, x: NodeId, rate: f64, rng: &mut DropoutRng<'_>) -> Result<NodeId> {
    match rng {
        Some(r) if rate > 0.0 => {
            let mask = dropout_mask(&mut **r, tape.value(x).len(), rate);
            tape.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

fn record_embedding(
    tape: &mut Tape<'_>,
    tokens: &[Token],
    params: &ModelParams,
    rng: &mut DropoutRng<'_>,
) -> Result<NodeId> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Contract("cannot embed an empty sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    let item_rows: Vec<ItemId> = tokens
        .iter()
        .filter_map(|t| match t.kind {
            TokenKind::Item(i) => Some(i),
            TokenKind::Set(_) => None,
        })
        .collect();
    let item_rows = if item_rows.is_empty() {
        Vec::new()
    } else {
        check_items(&item_rows, cfg.catalog_size)?
    };
    let item_node = tape.gather(params.slots.item_emb, &item_rows)?;

    let mut sources = Vec::with_capacity(tokens.len());
    let mut next_item = 0;
    for token in tokens {
        match &token.kind {
            TokenKind::Item(_) => {
                sources.push((item_node, next_item));
                next_item += 1;
            }
            TokenKind::Set(items) => sources.push((record_set(tape, items, params)?, 0)),
        }
    }
    let stacked = tape.stack_rows(&sources)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather(params.slots.pos_emb, &positions)?;
    let x = tape.add(stacked, pos)?;
    maybe_dropout(tape, x, cfg.dropout, rng)
}

fn record_backbone(
    tape: &mut Tape<'_>,
    input: NodeId,
    params: &ModelParams,
    rng: &mut DropoutRng<'_>,
) -> Result<NodeId> {
    let cfg = &params.config;
    let len = tape.value(input).rows();
    if len == 0 || len > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "backbone input length {len} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    if tape.value(input).cols() != cfg.d {
        return Err(Error::Dimension(format!(
            "backbone input width {} but d = {}",
            tape.value(input).cols(),
            cfg.d
        )));
    }
    let mut x = input;
    for slots in &params.slots.blocks {
        let g1 = tape.param(slots.ln1_gain)?;
        let b1 = tape.param(slots.ln1_bias)?;
        let h = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let wq = tape.param(slots.attn_q)?;
        let wk = tape.param(slots.attn_k)?;
        let wv = tape.param(slots.attn_v)?;
        let wo = tape.param(slots.attn_out)?;
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let att = tape.causal_attention(q, k, v, cfg.heads)?;
        let att = tape.matmul(att, wo)?;
        let att = maybe_dropout(tape, att, cfg.dropout, rng)?;
        x = tape.add(x, att)?;

        let g2 = tape.param(slots.ln2_gain)?;
        let b2 = tape.param(slots.ln2_bias)?;
        let h = tape.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
        let w1 = tape.param(slots.ff_in)?;
        let c1 = tape.param(slots.ff_in_bias)?;
        let w2 = tape.param(slots.ff_out)?;
        let c2 = tape.param(slots.ff_out_bias)?;
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, c1)?;
        let f = tape.relu(f);
        let f = maybe_dropout(tape, f, cfg.dropout, rng)?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, c2)?;
        let f = maybe_dropout(tape, f, cfg.dropout, rng)?;
        x = tape.add(x, f)?;
    }
    let g = tape.param(params.slots.final_gain)?;
    let b = tape.param(params.slots.final_bias)?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Records embedding and backbone for `tokens` on a tape built over
/// `params.tensors`, returning the `L x d` hidden-state node. Passing an RNG
/// enables dropout (training mode).
pub fn record_forward(
    tape: &mut Tape<'_>,
    tokens: &[Token],
    params: &ModelParams,
    mut rng: DropoutRng<'_>,
) -> Result<NodeId> {
    let x = record_embedding(tape, tokens, params, &mut rng)?;
    record_backbone(tape, x, params, &mut rng)
}

/// Input matrix for a sequence: item embedding (or set encoding) plus the
/// positional embedding of each position.
pub fn embed_sequence(tokens: &[Token], params: &ModelParams, mut rng: DropoutRng<'_>) -> Result<Matrix> {
    let mut tape = Tape::new(&params.tensors);
    let x = record_embedding(&mut tape, tokens, params, &mut rng)?;
    Ok(tape.value(x).clone())
}

pub fn backbone_forward(input: &Matrix, params: &ModelParams, mut rng: DropoutRng<'_>) -> Result<Matrix> {
    let mut tape = Tape::new(&params.tensors);
    let x = tape.constant(input.clone());
    let h = record_backbone(&mut tape, x, params, &mut rng)?;
    Ok(tape.value(h).clone())
}

/// Eval-mode hidden states for a token sequence.
pub fn forward_hidden(tokens: &[Token], params: &ModelParams) -> Result<Matrix> {
    let mut tape = Tape::new(&params.tensors);
    let h = record_forward(&mut tape, tokens, params, None)?;
    let out = tape.value(h).clone();
    if !out.is_finite() {
        return Err(Error::NonFinite("forward pass".into()));
    }
    Ok(out)
}

/// Dot product of the last hidden state with each candidate's input
/// embedding. The special token is never a valid candidate.
pub fn score_candidates(hidden_last: &[f64], candidates: &[ItemId], params: &ModelParams) -> Result<Vec<f64>> {
    let catalog = params.config.catalog_size;
    if hidden_last.len() != params.config.d {
        return Err(Error::Dimension(format!(
            "hidden state of width {} for d = {}",
            hidden_last.len(),
            params.config.d
        )));
    }
    candidates
        .iter()
        .map(|c| {
            if c.in_catalog(catalog) {
                Ok(dot(hidden_last, params.item_embedding(c.index())))
            } else {
                Err(Error::Contract(format!(
                    "candidate {c} is the special token or outside the catalog"
                )))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(encoder: EncoderKind, d: usize, seed: u64) -> ModelParams {
        ModelParams::init(ModelConfig::new(30, encoder).with_dim(d), seed).unwrap()
    }

    #[test]
    fn hand_computed_attention_pool() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w_q = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let w_k = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        // Q = [1, 0]^T, K = [1, 1]^T, w_attn = [[1, 1], [0, 0]], row sums [2, 0]
        let (a, v) = attention_pool(&m, &w_q, &w_k).unwrap();
        let big = 1.0 / (1.0 + (-2.0f64).exp());
        let expected = [big, 1.0 - big];
        for i in 0..2 {
            assert!((a[i] - expected[i]).abs() < 1e-15);
            assert!((v[i] - expected[i]).abs() < 1e-15);
        }
        assert!((expected[0] - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn singleton_set_is_its_embedding() {
        let p = params(EncoderKind::AttnPool, 8, 2);
        let e = p.item_embedding(5).to_vec();
        assert_eq!(encode_set_attn(&[ItemId(5)], &p).unwrap(), e);
        assert_eq!(encode_set_avg(&[ItemId(5)], &p).unwrap(), e);
        assert_eq!(set_attention_weights(&[ItemId(5)], &p).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_query_projection_gives_mean() {
        let mut p = params(EncoderKind::AttnPool, 8, 3);
        p.tensors[p.slots.enc_q].fill(0.0);
        let set = [ItemId(1), ItemId(4), ItemId(9)];
        let attn = encode_set_attn(&set, &p).unwrap();
        let avg = encode_set_avg(&set, &p).unwrap();
        for (a, b) in attn.iter().zip(&avg) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_embeddings_average_to_zero() {
        let mut p = params(EncoderKind::AvgPool, 4, 3);
        let e = p.item_embedding(2).to_vec();
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        p.tensors[p.slots.item_emb].row_mut(3).copy_from_slice(&neg);
        let out = encode_set_avg(&[ItemId(2), ItemId(3)], &p).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn encoder_errors() {
        let p = params(EncoderKind::AttnPool, 4, 1);
        assert!(encode_set_attn(&[], &p).is_err());
        assert!(encode_set_attn(&[ItemId(30)], &p).is_err());
        assert!(encode_set_avg(&[ItemId(31)], &p).is_err());
    }

    #[test]
    fn online_rows_are_item_plus_position() {
        let p = params(EncoderKind::AttnPool, 8, 4);
        let tokens = vec![Token::item(ItemId(3), 0), Token::item(ItemId(7), 1)];
        let x = embed_sequence(&tokens, &p, None).unwrap();
        for (pos, item) in [(0, 3), (1, 7)] {
            let pe = p.tensors[p.slots.pos_emb].row(pos);
            for c in 0..8 {
                assert_eq!(x.get(pos, c), p.item_embedding(item)[c] + pe[c]);
            }
        }
        let single = embed_sequence(&[Token::set(vec![ItemId(6)], 0)], &p, None).unwrap();
        for c in 0..8 {
            assert_eq!(single.get(0, c), p.item_embedding(6)[c] + p.tensors[p.slots.pos_emb].get(0, c));
        }
    }

    #[test]
    fn set_order_does_not_change_embedding() {
        let p = params(EncoderKind::AttnPool, 8, 5);
        let a = embed_sequence(&[Token::set(vec![ItemId(2), ItemId(8), ItemId(5)], 0)], &p, None).unwrap();
        let b = embed_sequence(&[Token::set(vec![ItemId(8), ItemId(5), ItemId(2)], 0)], &p, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn flatten_model_rejects_sets() {
        let p = params(EncoderKind::Flatten, 4, 1);
        let tokens = vec![Token::set(vec![ItemId(1), ItemId(2)], 0)];
        assert!(matches!(embed_sequence(&tokens, &p, None), Err(Error::Contract(_))));
    }

    #[test]
    fn too_long_input_rejected() {
        let mut cfg = ModelConfig::new(10, EncoderKind::AttnPool).with_dim(4);
        cfg.max_seq_len = 2;
        let p = ModelParams::init(cfg, 0).unwrap();
        let tokens: Vec<Token> = (0..3).map(|i| Token::item(ItemId(i), i as i64)).collect();
        assert!(embed_sequence(&tokens, &p, None).is_err());
        assert!(backbone_forward(&Matrix::zeros(3, 4), &p, None).is_err());
    }

    #[test]
    fn backbone_is_causal() {
        let p = params(EncoderKind::AttnPool, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Matrix::from_vec(6, 8, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let base = backbone_forward(&input, &p, None).unwrap();
        for pos in 0..6 {
            let mut changed = input.clone();
            changed.row_mut(pos).iter_mut().for_each(|v| *v += 0.7);
            let out = backbone_forward(&changed, &p, None).unwrap();
            for r in 0..pos {
                assert_eq!(out.row(r), base.row(r), "row {r} moved when {pos} changed");
            }
            assert_ne!(out.row(pos), base.row(pos));
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let p = params(EncoderKind::AttnPool, 8, 7);
        let tokens: Vec<Token> = (0..4).map(|i| Token::item(ItemId(i), i as i64)).collect();
        let eval1 = embed_sequence(&tokens, &p, None).unwrap();
        let eval2 = embed_sequence(&tokens, &p, None).unwrap();
        assert_eq!(eval1, eval2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = embed_sequence(&tokens, &p, Some(&mut rng)).unwrap();
        assert_ne!(train, eval1);
    }

    #[test]
    fn scoring() {
        let p = params(EncoderKind::AttnPool, 4, 8);
        let e = p.item_embedding(3).to_vec();
        let scores = score_candidates(&e, &[ItemId(3)], &p).unwrap();
        assert!((scores[0] - dot(&e, &e)).abs() < 1e-15);

        let other = p.item_embedding(4);
        let mut orth = vec![other[1], -other[0], 0.0, 0.0];
        if orth.iter().all(|v| *v == 0.0) {
            orth[2] = 1.0;
        }
        let mut q = p.clone();
        q.tensors[q.slots.item_emb].row_mut(4).copy_from_slice(&[other[0], other[1], 0.0, 0.0]);
        assert!(score_candidates(&orth, &[ItemId(4)], &q).unwrap()[0].abs() < 1e-15);

        let cands: Vec<ItemId> = (0..30).chain(0..30).take(51).map(ItemId).collect();
        let many = score_candidates(&e, &cands, &p).unwrap();
        assert_eq!(many.len(), 51);
        assert_eq!(many[33], score_candidates(&e, &[ItemId(3)], &p).unwrap()[0]);
        assert!(score_candidates(&e, &[ItemId(30)], &p).is_err());
    }
}
