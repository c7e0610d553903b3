use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Indices of one transformer block's tensors in the parameter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSlots {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub attn_q: usize,
    pub attn_k: usize,
    pub attn_v: usize,
    pub attn_out: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ff_in: usize,
    pub ff_in_bias: usize,
    pub ff_out: usize,
    pub ff_out_bias: usize,
}

const PER_BLOCK: usize = 12;

/// Fixed parameter order: item table, positions, encoder `w_q`, `w_k`, then
/// each block's twelve tensors, then the final layer norm.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlots {
    pub item_emb: usize,
    pub pos_emb: usize,
    pub enc_q: usize,
    pub enc_k: usize,
    pub blocks: Vec<BlockSlots>,
    pub final_gain: usize,
    pub final_bias: usize,
}

impl ParamSlots {
    pub fn new(blocks: usize) -> Self {
        let block = |b: usize| {
            let base = 4 + b * PER_BLOCK;
            BlockSlots {
                ln1_gain: base,
                ln1_bias: base + 1,
                attn_q: base + 2,
                attn_k: base + 3,
                attn_v: base + 4,
                attn_out: base + 5,
                ln2_gain: base + 6,
                ln2_bias: base + 7,
                ff_in: base + 8,
                ff_in_bias: base + 9,
                ff_out: base + 10,
                ff_out_bias: base + 11,
            }
        };
        let tail = 4 + blocks * PER_BLOCK;
        ParamSlots {
            item_emb: 0,
            pos_emb: 1,
            enc_q: 2,
            enc_k: 3,
            blocks: (0..blocks).map(block).collect(),
            final_gain: tail,
            final_bias: tail + 1,
        }
    }

    pub fn count(&self) -> usize {
        self.final_bias + 1
    }
}

/// Name and shape of every tensor, in storage order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d;
    let mut out = vec![
        ("item_embedding".to_string(), cfg.catalog_size + 1, d),
        ("position_embedding".to_string(), cfg.max_seq_len, d),
        ("encoder.w_q".to_string(), d, cfg.d_a),
        ("encoder.w_k".to_string(), d, cfg.d_a),
    ];
    for b in 0..cfg.blocks {
        let p = |n: &str| format!("block{b}.{n}");
        out.extend([
            (p("ln1.gain"), 1, d),
            (p("ln1.bias"), 1, d),
            (p("attn.w_q"), d, d),
            (p("attn.w_k"), d, d),
            (p("attn.w_v"), d, d),
            (p("attn.w_o"), d, d),
            (p("ln2.gain"), 1, d),
            (p("ln2.bias"), 1, d),
            (p("ff.w1"), d, cfg.ff_dim),
            (p("ff.b1"), 1, cfg.ff_dim),
            (p("ff.w2"), cfg.ff_dim, d),
            (p("ff.b2"), 1, d),
        ]);
    }
    out.push(("final_ln.gain".to_string(), 1, d));
    out.push(("final_ln.bias".to_string(), 1, d));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub slots: ParamSlots,
    pub tensors: Vec<Matrix>,
}

impl ModelParams {
    /// Seeded init: weights and embeddings uniform in `±1/sqrt(d)`, biases 0,
    /// layer-norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(&config)
            .into_iter()
            .map(|(name, rows, cols)| {
                let fill = if name.ends_with("gain") {
                    Some(1.0)
                } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                    Some(0.0)
                } else {
                    None
                };
                match fill {
                    Some(v) => Matrix::filled(rows, cols, v),
                    None => {
                        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                        Matrix::from_vec(rows, cols, data).expect("layout shape")
                    }
                }
            })
            .collect();
        Ok(ModelParams {
            slots: ParamSlots::new(config.blocks),
            config,
            tensors,
        })
    }

    /// Rebuilds from tensors, checking them against the layout.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), t) in expected.iter().zip(&tensors) {
            if t.shape() != (*r, *c) {
                return Err(Error::Dimension(format!("{name}: expected {r}x{c}, got {:?}", t.shape())));
            }
        }
        Ok(ModelParams {
            slots: ParamSlots::new(config.blocks),
            config,
            tensors,
        })
    }

    pub fn names(&self) -> Vec<String> {
        layout(&self.config).into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn item_embedding(&self, item: usize) -> &[f64] {
        self.tensors[self.slots.item_emb].row(item)
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}
