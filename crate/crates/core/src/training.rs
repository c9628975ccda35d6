//! Masked-instance training.
//!
//! Each training instance is a fact with one slot replaced by a mask. The
//! joint loss is the label-smoothed cross entropy over entity slots plus
//! `λ1` times that over relation slots plus `λ2` times the squared error
//! over numeric slots. Parameters are updated by Adam under a cosine
//! schedule with warm restarts; the model with the best validation score
//! is kept.

use std::path::Path;
use std::str::FromStr;

use hynt_kernel::{Adam, AdamConfig, CosineRestarts, Graph, KernelError, Real, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport, FilterIndex};
use crate::ingest::NormalizationTable;
use crate::kg::{Dataset, HyperFact};
use crate::model::{BatchOutput, HyntConfig, MaskSpec, Model, SlotKind, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every maskable slot of every fact, each epoch.
    Enumerate,
    /// One uniformly chosen slot per fact, redrawn each epoch.
    Sample,
}

/// Slot families that are never masked during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoMask {
    /// Relation slots (triplet and qualifier relations).
    pub relations: bool,
    /// Numeric-entity slots.
    pub numeric: bool,
    /// Every qualifier slot.
    pub qualifiers: bool,
}

impl NoMask {
    pub fn allows(&self, mask: &MaskSpec) -> bool {
        !(self.relations && mask.kind == SlotKind::Relation
            || self.numeric && mask.kind == SlotKind::Numeric
            || self.qualifiers && !mask.in_triplet())
    }

    pub fn is_empty(&self) -> bool {
        !(self.relations || self.numeric || self.qualifiers)
    }
}

impl FromStr for NoMask {
    type Err = Error;

    /// Comma-separated subset of `R`, `V_N`, `E_qual`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = NoMask::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "R" => out.relations = true,
                "V_N" => out.numeric = true,
                "E_qual" => out.qualifiers = true,
                _ => return Err(Error::Config(format!("unknown mask family {part:?} (R | V_N | E_qual)"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainInstance {
    /// Index into the training facts.
    pub fact: usize,
    pub mask: MaskSpec,
    pub target: Target,
}

/// Masked instances of `facts`. `Sample` draws one slot per fact from
/// `rng`; `Enumerate` ignores it.
pub fn make_instances<R: Rng + ?Sized>(
    facts: &[HyperFact],
    strategy: Strategy,
    no_mask: NoMask,
    rng: &mut R,
) -> Vec<TrainInstance> {
    let mut out = Vec::new();
    for (i, f) in facts.iter().enumerate() {
        let masks: Vec<MaskSpec> = MaskSpec::all(f).into_iter().filter(|m| no_mask.allows(m)).collect();
        let chosen: Vec<MaskSpec> = match strategy {
            Strategy::Enumerate => masks,
            Strategy::Sample if masks.is_empty() => Vec::new(),
            Strategy::Sample => vec![masks[rng.random_range(0..masks.len())]],
        };
        for mask in chosen {
            let target = mask.target(f).expect("slot exists");
            out.push(TrainInstance { fact: i, mask, target });
        }
    }
    out
}

/// The weighted loss and the value of each present component.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub entity: Option<f64>,
    pub relation: Option<f64>,
    pub numeric: Option<f64>,
}

/// `L_ent + λ1 L_rel + λ2 L_num` over a batch, each term a mean over its
/// instances. Absent categories and zero-weight terms are left out;
/// `None` when nothing remains.
pub fn joint_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &BatchOutput,
    targets: &[Target],
    config: &HyntConfig,
) -> Result<Option<LossParts>> {
    let mut terms: Vec<Var> = Vec::new();
    let (mut entity, mut relation, mut numeric) = (None, None, None);
    let class = |rows: &[usize]| -> Vec<usize> {
        rows.iter()
            .map(|&i| match targets[i] {
                Target::Entity(e) => e,
                Target::Relation(r) => r,
                Target::Numeric { .. } => unreachable!("numeric target routed to a classifier"),
            })
            .collect()
    };
    if let Some(h) = &out.entity {
        let l = g.cross_entropy_smoothed(h.value, &class(&h.rows), config.label_smoothing)?;
        entity = Some(g.scalar(l).as_f64());
        terms.push(l);
    }
    if let Some(h) = out.relation.as_ref().filter(|_| config.lambda_rel > 0.0) {
        let l = g.cross_entropy_smoothed(h.value, &class(&h.rows), config.label_smoothing)?;
        relation = Some(g.scalar(l).as_f64());
        terms.push(g.scale(l, T::of(config.lambda_rel))?);
    }
    if let Some(h) = out.numeric.as_ref().filter(|_| config.lambda_num > 0.0) {
        let gold: Vec<T> = h
            .rows
            .iter()
            .map(|&i| match targets[i] {
                Target::Numeric { value, .. } => T::of(value),
                _ => unreachable!("discrete target routed to the numeric head"),
            })
            .collect();
        let l = g.mse(h.value, &gold)?;
        numeric = Some(g.scalar(l).as_f64());
        terms.push(g.scale(l, T::of(config.lambda_num))?);
    }
    let Some(&first) = terms.first() else {
        return Ok(None);
    };
    let mut total = first;
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(Some(LossParts {
        total,
        entity,
        relation,
        numeric,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    /// First cycle length of the cosine schedule, in epochs.
    pub restart_epochs: f64,
    pub restart_mult: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one); 0 = only
    /// after the last epoch.
    pub validate_every: usize,
    pub strategy: Strategy,
    pub no_mask: NoMask,
    pub eval_batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            learning_rate: 5e-4,
            min_learning_rate: 0.0,
            restart_epochs: 50.0,
            restart_mult: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            validate_every: 10,
            strategy: Strategy::Enumerate,
            no_mask: NoMask::default(),
            eval_batch_size: 256,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<CosineRestarts> {
        CosineRestarts::new(
            self.learning_rate,
            self.min_learning_rate,
            self.restart_epochs,
            self.restart_mult,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }
}

/// One row of the training log, written at every validation point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_entity: Option<f64>,
    pub loss_relation: Option<f64>,
    pub loss_numeric: Option<f64>,
    pub val_link_mrr: Option<f64>,
    pub val_relation_mrr: Option<f64>,
    pub val_rmse: Option<f64>,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochLoss {
    pub total: f64,
    pub entity: Option<f64>,
    pub relation: Option<f64>,
    pub numeric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub best: Model<T>,
    /// Epoch (1-based) of the best validation score; `None` when there was
    /// no validation data, in which case `best` is the final model.
    pub best_epoch: Option<usize>,
    pub best_report: Option<EvalReport>,
    pub last: Model<T>,
    pub epoch_losses: Vec<EpochLoss>,
    pub log: Vec<LogRow>,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, x: Option<f64>) {
        if let Some(x) = x {
            self.sum += x;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Trains a fresh model on `dataset.train` (numeric values normalized with
/// `table`), validating on `dataset.valid`.
pub fn train<T: Real>(
    dataset: &Dataset,
    table: &NormalizationTable,
    config: &HyntConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    options.validate()?;
    let schedule = options.schedule()?;
    let vocab = &dataset.vocab;
    let mut model = Model::<T>::new(config.clone(), vocab.num_entities(), vocab.num_relations(), options.seed)?;
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            beta1: options.adam_beta1,
            beta2: options.adam_beta2,
            eps: options.adam_eps,
        },
    );
    // separate streams for ordering and dropout
    let mut order_rng = ChaCha8Rng::seed_from_u64(options.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(options.seed);
    dropout_rng.set_stream(2);

    let facts = &dataset.train;
    let filter = FilterIndex::build(dataset.all_facts());
    let eval_options = EvalOptions {
        batch_size: options.eval_batch_size,
        ..Default::default()
    };
    let fixed = match options.strategy {
        Strategy::Enumerate => Some(make_instances(facts, Strategy::Enumerate, options.no_mask, &mut order_rng)),
        Strategy::Sample => None,
    };

    let mut best: Option<(f64, usize, Model<T>, EvalReport)> = None;
    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(options.epochs);
    let mut lr = options.learning_rate;
    for epoch in 0..options.epochs {
        let mut instances = match &fixed {
            Some(v) => v.clone(),
            None => make_instances(facts, Strategy::Sample, options.no_mask, &mut order_rng),
        };
        if instances.is_empty() {
            return Err(Error::Data("no training instances (empty train split or every slot excluded)".into()));
        }
        instances.shuffle(&mut order_rng);
        let num_batches = instances.len().div_ceil(options.batch_size);
        let (mut total, mut ent, mut rel, mut num) = (Mean::default(), Mean::default(), Mean::default(), Mean::default());
        for (b, chunk) in instances.chunks(options.batch_size).enumerate() {
            lr = schedule.lr_at(epoch as f64 + b as f64 / num_batches as f64);
            let batch: Vec<(&HyperFact, MaskSpec)> = chunk.iter().map(|i| (&facts[i.fact], i.mask)).collect();
            let targets: Vec<Target> = chunk.iter().map(|i| i.target).collect();
            let numeric_failure = |detail: String| Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: b,
                instances: chunk.iter().map(|i| i.fact).collect(),
                detail,
            };
            let grads = {
                let mut g = Graph::new(&model.params);
                let step = (|| -> Result<_> {
                    let out = model.forward_batch(&mut g, &batch, true, &mut dropout_rng)?;
                    let Some(parts) = joint_loss(&mut g, &out, &targets, config)? else {
                        return Ok(None);
                    };
                    let value = g.scalar(parts.total).as_f64();
                    if !value.is_finite() {
                        return Err(numeric_failure(format!("loss = {value}")));
                    }
                    Ok(Some((parts, value, g.backward(parts.total)?)))
                })();
                match step {
                    Ok(x) => x,
                    Err(Error::Kernel(KernelError::NonFinite { op })) => {
                        return Err(numeric_failure(format!("non-finite value in {op}")));
                    }
                    Err(e) => return Err(e),
                }
            };
            let Some((parts, value, grads)) = grads else { continue };
            total.push(Some(value));
            ent.push(parts.entity);
            rel.push(parts.relation);
            num.push(parts.numeric);
            adam.step(&mut model.params, &grads, lr)?;
        }
        let losses = EpochLoss {
            total: total.get().unwrap_or(0.0),
            entity: ent.get(),
            relation: rel.get(),
            numeric: num.get(),
        };
        epoch_losses.push(losses);

        let last_epoch = epoch + 1 == options.epochs;
        let due = options.validate_every > 0 && (epoch + 1) % options.validate_every == 0;
        if due || last_epoch {
            let report = if dataset.valid.is_empty() {
                None
            } else {
                Some(evaluate(&model, &dataset.valid, &filter, table, vocab, eval_options)?)
            };
            let all = report.as_ref().map(|r| &r.all);
            log.push(LogRow {
                epoch: epoch + 1,
                lr,
                loss: losses.total,
                loss_entity: losses.entity,
                loss_relation: losses.relation,
                loss_numeric: losses.numeric,
                val_link_mrr: all.and_then(|a| a.link.map(|m| m.mrr)),
                val_relation_mrr: all.and_then(|a| a.relation.map(|m| m.mrr)),
                val_rmse: all.and_then(|a| a.numeric.as_ref().map(|m| m.rmse)),
            });
            match report.as_ref().and_then(EvalReport::selection_score) {
                Some(score) => log::info!("epoch {} loss {:.5} valid score {score:.5}", epoch + 1, losses.total),
                None => log::info!("epoch {} loss {:.5}", epoch + 1, losses.total),
            }
            if let Some(report) = report {
                if let Some(score) = report.selection_score() {
                    // strict improvement, so ties keep the earlier epoch
                    if best.as_ref().is_none_or(|b| score > b.0) {
                        best = Some((score, epoch + 1, model.clone(), report));
                    }
                }
            }
        }
    }
    let (best_model, best_epoch, best_report) = match best {
        Some((_, e, m, r)) => (m, Some(e), Some(r)),
        None => (model.clone(), None, None),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_report,
        last: model,
        epoch_losses,
        log,
    })
}
