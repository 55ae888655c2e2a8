use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-sectional summary used by the set layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryVariant {
    /// No summary: every unit is modelled on its own series.
    None,
    /// Mean-pooled embeddings shared by all units.
    Mean,
    /// Multi-head attention across units, one summary per unit.
    Mha,
    /// Similarity-gated pooling, one summary per unit.
    Gated,
}

impl std::str::FromStr for SummaryVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "mean" => Ok(Self::Mean),
            "mha" => Ok(Self::Mha),
            "gated" => Ok(Self::Gated),
            other => Err(Error::Config(format!(
                "unknown variant `{other}`; expected one of none, mean, mha, gated"
            ))),
        }
    }
}

impl std::fmt::Display for SummaryVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::Mean => "mean",
            Self::Mha => "mha",
            Self::Gated => "gated",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetSeqConfig {
    pub input_dim: usize,
    pub n_setseq_layers: usize,
    pub n_plain_seq_layers: usize,
    pub d_model: usize,
    pub chunk_len: usize,
    pub summary_dim: usize,
    pub phi_out_dim: usize,
    pub kernel_len: usize,
    pub dropout: f64,
    pub variant: SummaryVariant,
    pub mha_heads: usize,
    pub conv_weight_decay: f64,
    pub output_dim: usize,
}

impl Default for SetSeqConfig {
    /// Synthetic-task sizes.
    fn default() -> Self {
        Self {
            input_dim: 4,
            n_setseq_layers: 5,
            n_plain_seq_layers: 1,
            d_model: 800,
            chunk_len: 3,
            summary_dim: 2,
            phi_out_dim: 5,
            kernel_len: 30,
            dropout: 0.0,
            variant: SummaryVariant::Mean,
            mha_heads: 5,
            conv_weight_decay: 0.0,
            output_dim: 3,
        }
    }
}

impl SetSeqConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("chunk_len", self.chunk_len),
            ("summary_dim", self.summary_dim),
            ("phi_out_dim", self.phi_out_dim),
            ("kernel_len", self.kernel_len),
            ("mha_heads", self.mha_heads),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.variant == SummaryVariant::Mha && !self.phi_out_dim.is_multiple_of(self.mha_heads) {
            return Err(Error::Config(format!(
                "phi_out_dim {} is not divisible by mha_heads {}",
                self.phi_out_dim, self.mha_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.conv_weight_decay < 0.0 {
            return Err(Error::Config("conv_weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn uses_summary(&self) -> bool {
        self.variant != SummaryVariant::None
    }
}
