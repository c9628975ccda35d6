use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a triplet or qualifier is folded into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// `W_tri [h; r; t]` and `W_qual [q; v]`.
    Projection,
    /// `h ∘ r ∘ t` and `q ∘ v`.
    Hadamard,
}

/// What sits between the context transformer and the output heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionHead {
    Transformer,
    /// A single projection of `[context; components]` down to `d`.
    Linear,
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Encoding::Projection),
            "hadamard" => Ok(Encoding::Hadamard),
            _ => Err(Error::Config(format!("unknown encoding {s:?} (projection | hadamard)"))),
        }
    }
}

impl std::str::FromStr for PredictionHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(PredictionHead::Transformer),
            "linear" => Ok(PredictionHead::Linear),
            _ => Err(Error::Config(format!("unknown prediction head {s:?} (transformer | linear)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyntConfig {
    pub dim: usize,
    pub context_layers: usize,
    pub context_heads: usize,
    pub context_ffn: usize,
    pub prediction_layers: usize,
    pub prediction_heads: usize,
    pub prediction_ffn: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Weight of the relation loss.
    pub lambda_rel: f64,
    /// Weight of the numeric loss.
    pub lambda_num: f64,
    pub encoding: Encoding,
    pub prediction_head: PredictionHead,
    /// Standard deviation of the normal initializer.
    pub init_std: f64,
}

impl Default for HyntConfig {
    fn default() -> Self {
        Self::with_dim(256)
    }
}

impl HyntConfig {
    /// Defaults with embedding size `dim` and FFN width `2 * dim`.
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            context_layers: 2,
            context_heads: 4,
            context_ffn: 2 * dim,
            prediction_layers: 2,
            prediction_heads: 4,
            prediction_ffn: 2 * dim,
            dropout: 0.1,
            label_smoothing: 0.1,
            lambda_rel: 1.0,
            lambda_num: 1.0,
            encoding: Encoding::Projection,
            prediction_head: PredictionHead::Transformer,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.context_ffn == 0 || self.prediction_ffn == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.context_heads == 0 || self.dim % self.context_heads != 0 {
            return fail(format!("dim {} not divisible by context_heads {}", self.dim, self.context_heads));
        }
        if self.prediction_heads == 0 || self.dim % self.prediction_heads != 0 {
            return fail(format!(
                "dim {} not divisible by prediction_heads {}",
                self.dim, self.prediction_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.lambda_rel >= 0.0 && self.lambda_num >= 0.0) {
            return fail("loss weights must be >= 0".into());
        }
        if !(self.init_std > 0.0) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = HyntConfig::default();
        assert_eq!((c.dim, c.context_ffn, c.context_heads), (256, 512, 4));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_bad_rates() {
        let mut c = HyntConfig::with_dim(10);
        assert!(c.validate().is_err());
        c.context_heads = 2;
        c.prediction_heads = 5;
        c.validate().unwrap();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        c.dropout = 0.0;
        c.label_smoothing = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn modes_parse() {
        assert_eq!("hadamard".parse::<Encoding>().unwrap(), Encoding::Hadamard);
        assert_eq!("linear".parse::<PredictionHead>().unwrap(), PredictionHead::Linear);
        assert!("mlp".parse::<PredictionHead>().is_err());
    }
}
