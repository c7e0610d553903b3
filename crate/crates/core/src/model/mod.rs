//! Causal transformer recommender with a set encoder for in-store positions.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::domain::{flatten_sequence, online_only, HybridSequence};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use forward::{
    attention_pool, backbone_forward, embed_sequence, encode_set_attn, encode_set_avg, forward_hidden, record_forward,
    score_candidates, set_attention_weights,
};
pub use params::{BlockSlots, ModelParams, ParamSlots};

/// How set positions reach the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// No encoder: sets must be expanded or dropped before the model sees them.
    Flatten,
    AvgPool,
    AttnPool,
}

/// The four model variants compared by the experiment harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    OnlineOnly,
    WStore,
    AvgEnc,
    AttnEnc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::OnlineOnly,
        Variant::WStore,
        Variant::AvgEnc,
        Variant::AttnEnc,
    ];

    pub fn encoder(self) -> EncoderKind {
        match self {
            Variant::OnlineOnly | Variant::WStore => EncoderKind::Flatten,
            Variant::AvgEnc => EncoderKind::AvgPool,
            Variant::AttnEnc => EncoderKind::AttnPool,
        }
    }

    /// Rewrites a hybrid sequence into the form this variant trains on.
    pub fn prepare(self, seq: &HybridSequence) -> HybridSequence {
        match self {
            Variant::OnlineOnly => online_only(seq),
            Variant::WStore => flatten_sequence(seq),
            Variant::AvgEnc | Variant::AttnEnc => seq.clone(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::OnlineOnly => "online-only",
            Variant::WStore => "w-store",
            Variant::AvgEnc => "avg-enc",
            Variant::AttnEnc => "attn-enc",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_a: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub catalog_size: usize,
    pub encoder: EncoderKind,
}

impl ModelConfig {
    /// Desk-scale defaults: d = d_a = 64, two single-head blocks.
    pub fn new(catalog_size: usize, encoder: EncoderKind) -> Self {
        ModelConfig {
            d: 64,
            d_a: 64,
            blocks: 2,
            heads: 1,
            ff_dim: 64,
            max_seq_len: 90,
            dropout: 0.2,
            catalog_size,
            encoder,
        }
    }

    /// Same shape with `d`, `d_a` and the feed-forward width set to `d`.
    pub fn with_dim(mut self, d: usize) -> Self {
        self.d = d;
        self.d_a = d;
        self.ff_dim = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_a", self.d_a),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
            ("catalog_size", self.catalog_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("bert4rec".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig::new(10, EncoderKind::AttnPool);
        ok.validate().unwrap();
        let mut bad = ok.clone();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.dropout = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.d_a = 0;
        assert!(bad.validate().is_err());
    }
}
