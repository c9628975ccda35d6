//! The HyNT network.
//!
//! Every fact is encoded as one triplet vector and one vector per
//! qualifier. A context transformer mixes them; a prediction transformer
//! then attends over the context vector of the masked triplet (or
//! qualifier) together with its component embeddings, and the column at
//! the masked position feeds the entity, relation or numeric head.

mod checkpoint;
mod config;
mod forward;
mod mask;

use hynt_kernel::{Array2, ParamId, ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, CONFIG_FILE};
pub use config::{Encoding, HyntConfig, PredictionHead};
pub use forward::{BatchLayout, BatchOutput, HeadOutput, SlotOutput, TargetKind};
pub use mask::{MaskSpec, SlotKind, Target};

/// Parameters of one transformer block.
#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Positional vectors of the prediction transformer.
#[derive(Debug, Clone)]
pub(crate) struct PredictionPositions {
    triplet: ParamId,
    head: ParamId,
    relation: ParamId,
    tail: ParamId,
    qualifier: ParamId,
    qual_relation: ParamId,
    qual_value: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Ids {
    entity: ParamId,
    relation: ParamId,
    num_weight: ParamId,
    num_bias: ParamId,
    mask_num: ParamId,
    w_tri: Option<ParamId>,
    w_qual: Option<ParamId>,
    pos_tri: ParamId,
    pos_qual: ParamId,
    context: Vec<BlockIds>,
    pred_pos: Option<PredictionPositions>,
    prediction: Vec<BlockIds>,
    lin_tri: Option<ParamId>,
    lin_qual: Option<ParamId>,
    ent_head_w: ParamId,
    ent_head_b: ParamId,
    rel_head_w: ParamId,
    rel_head_b: ParamId,
    num_head_w: ParamId,
    num_head_b: ParamId,
}

/// Configuration, vocabulary sizes and parameters of a HyNT model.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: HyntConfig,
    num_entities: usize,
    num_relations: usize,
    pub params: ParamStore<T>,
    ids: Ids,
}

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<T: Real> Init<'_, T> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let v = Array2::from_shape_simple_fn((rows, cols), || T::of(self.normal.sample(&mut self.rng)));
        Ok(self.store.add(name, v)?)
    }

    fn fill(&mut self, name: &str, rows: usize, cols: usize, x: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Array2::from_elem((rows, cols), T::of(x)))?)
    }

    fn block(&mut self, prefix: &str, d: usize, ffn: usize) -> Result<BlockIds> {
        Ok(BlockIds {
            query: self.normal(&format!("{prefix}.query"), d, d)?,
            key: self.normal(&format!("{prefix}.key"), d, d)?,
            value: self.normal(&format!("{prefix}.value"), d, d)?,
            output: self.normal(&format!("{prefix}.output"), d, d)?,
            ln1_gain: self.fill(&format!("{prefix}.ln1.gain"), d, 1, 1.0)?,
            ln1_bias: self.fill(&format!("{prefix}.ln1.bias"), d, 1, 0.0)?,
            ffn_w1: self.normal(&format!("{prefix}.ffn.w1"), ffn, d)?,
            ffn_b1: self.fill(&format!("{prefix}.ffn.b1"), ffn, 1, 0.0)?,
            ffn_w2: self.normal(&format!("{prefix}.ffn.w2"), d, ffn)?,
            ffn_b2: self.fill(&format!("{prefix}.ffn.b2"), d, 1, 0.0)?,
            ln2_gain: self.fill(&format!("{prefix}.ln2.gain"), d, 1, 1.0)?,
            ln2_bias: self.fill(&format!("{prefix}.ln2.bias"), d, 1, 0.0)?,
        })
    }
}

impl<T: Real> Model<T> {
    /// Allocates and initializes every parameter: normal(0, init_std) for
    /// embeddings, positional vectors and weight matrices, zero biases,
    /// unit layer-norm gains and 0.5 for the numeric mask.
    pub fn new(config: HyntConfig, num_entities: usize, num_relations: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_entities == 0 || num_relations == 0 {
            return Err(Error::Data("model needs at least one entity and one relation".into()));
        }
        let d = config.dim;
        let (n, r) = (num_entities, num_relations);
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?,
        };

        // the extra last rows are the entity and relation masks
        let entity = init.normal("entity.embedding", n + 1, d)?;
        let relation = init.normal("relation.embedding", r + 1, d)?;
        let num_weight = init.normal("numeric.weight", r + 1, d)?;
        let num_bias = init.normal("numeric.bias", r + 1, d)?;
        let mask_num = init.fill("numeric.mask", 1, 1, 0.5)?;
        let (w_tri, w_qual) = match config.encoding {
            Encoding::Projection => (
                Some(init.normal("encode.triplet", d, 3 * d)?),
                Some(init.normal("encode.qualifier", d, 2 * d)?),
            ),
            Encoding::Hadamard => (None, None),
        };
        let pos_tri = init.normal("context.pos.triplet", d, 1)?;
        let pos_qual = init.normal("context.pos.qualifier", d, 1)?;
        let context = (0..config.context_layers)
            .map(|l| init.block(&format!("context.{l}"), d, config.context_ffn))
            .collect::<Result<Vec<_>>>()?;

        let (mut pred_pos, mut prediction, mut lin_tri, mut lin_qual) = (None, Vec::new(), None, None);
        match config.prediction_head {
            PredictionHead::Transformer => {
                pred_pos = Some(PredictionPositions {
                    triplet: init.normal("prediction.pos.triplet", d, 1)?,
                    head: init.normal("prediction.pos.head", d, 1)?,
                    relation: init.normal("prediction.pos.relation", d, 1)?,
                    tail: init.normal("prediction.pos.tail", d, 1)?,
                    qualifier: init.normal("prediction.pos.qualifier", d, 1)?,
                    qual_relation: init.normal("prediction.pos.qual_relation", d, 1)?,
                    qual_value: init.normal("prediction.pos.qual_value", d, 1)?,
                });
                prediction = (0..config.prediction_layers)
                    .map(|l| init.block(&format!("prediction.{l}"), d, config.prediction_ffn))
                    .collect::<Result<Vec<_>>>()?;
            }
            PredictionHead::Linear => {
                lin_tri = Some(init.normal("linear.triplet", d, 4 * d)?);
                lin_qual = Some(init.normal("linear.qualifier", d, 3 * d)?);
            }
        }

        let ent_head_w = init.normal("head.entity.weight", n, d)?;
        let ent_head_b = init.fill("head.entity.bias", n, 1, 0.0)?;
        let rel_head_w = init.normal("head.relation.weight", r, d)?;
        let rel_head_b = init.fill("head.relation.bias", r, 1, 0.0)?;
        let num_head_w = init.normal("head.numeric.weight", r, d)?;
        let num_head_b = init.fill("head.numeric.bias", r, 1, 0.0)?;

        let ids = Ids {
            entity,
            relation,
            num_weight,
            num_bias,
            mask_num,
            w_tri,
            w_qual,
            pos_tri,
            pos_qual,
            context,
            pred_pos,
            prediction,
            lin_tri,
            lin_qual,
            ent_head_w,
            ent_head_b,
            rel_head_w,
            rel_head_b,
            num_head_w,
            num_head_b,
        };
        Ok(Self {
            config,
            num_entities,
            num_relations,
            params: store,
            ids,
        })
    }

    pub fn config(&self) -> &HyntConfig {
        &self.config
    }

    /// `|V_D|`, not counting the mask row.
    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// `|R|`, not counting the mask row.
    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Parameter ids of the numeric head, which only numeric slots reach.
    pub fn numeric_head_params(&self) -> [ParamId; 2] {
        [self.ids.num_head_w, self.ids.num_head_b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(m: &Model<f64>) -> Vec<(String, (usize, usize))> {
        m.params.iter().map(|(_, n, a)| (n.to_string(), a.dim())).collect()
    }

    #[test]
    fn parameter_shapes() {
        let m = Model::<f64>::new(HyntConfig::with_dim(8), 5, 3, 0).unwrap();
        let s = shapes(&m);
        let get = |name: &str| s.iter().find(|(n, _)| n == name).unwrap().1;
        assert_eq!(get("entity.embedding"), (6, 8));
        assert_eq!(get("relation.embedding"), (4, 8));
        assert_eq!(get("numeric.weight"), (4, 8));
        assert_eq!(get("numeric.mask"), (1, 1));
        assert_eq!(get("encode.triplet"), (8, 24));
        assert_eq!(get("encode.qualifier"), (8, 16));
        assert_eq!(get("context.1.ffn.w1"), (16, 8));
        assert_eq!(get("head.entity.weight"), (5, 8));
        assert_eq!(get("head.relation.weight"), (3, 8));
        assert_eq!(get("head.numeric.bias"), (3, 1));
        assert!(s.iter().all(|(n, _)| !n.starts_with("linear")));
        assert_eq!(m.params.get(m.ids.mask_num)[[0, 0]], 0.5);
    }

    #[test]
    fn ablations_allocate_only_what_they_use() {
        let mut c = HyntConfig::with_dim(8);
        c.encoding = Encoding::Hadamard;
        c.prediction_head = PredictionHead::Linear;
        let m = Model::<f64>::new(c, 5, 3, 0).unwrap();
        let s = shapes(&m);
        assert!(s.iter().all(|(n, _)| !n.starts_with("encode") && !n.starts_with("prediction")));
        assert!(s.iter().any(|(n, d)| n == "linear.triplet" && *d == (8, 32)));
        assert!(s.iter().any(|(n, d)| n == "linear.qualifier" && *d == (8, 24)));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Model::<f64>::new(HyntConfig::with_dim(8), 5, 3, 9).unwrap();
        let b = Model::<f64>::new(HyntConfig::with_dim(8), 5, 3, 9).unwrap();
        let c = Model::<f64>::new(HyntConfig::with_dim(8), 5, 3, 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }
}
