//! Batched forward pass.
//!
//! A batch packs one context sequence per instance, `1 + max_k` columns
//! each (triplet first, then qualifiers, then padding), and one prediction
//! sequence per instance, 4 columns when any instance targets a triplet
//! and 3 otherwise. Padding keys are excluded from every attention
//! softmax, and all other operations act column by column, so padding
//! never changes a real column.

use hynt_kernel::{Array2, Graph, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BlockIds, Model, PredictionHead};
use crate::error::{Error, Result};
use crate::kg::{EntityRef, HyperFact, Position, RelationId};
use crate::model::{MaskSpec, SlotKind};

/// Whether a prediction sequence refines a triplet or a qualifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Triplet,
    Qualifier,
}

/// Column structure of a packed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLayout {
    pub qualifier_counts: Vec<usize>,
    pub context_len: usize,
    pub context_valid: Vec<bool>,
    pub prediction_len: usize,
    pub prediction_valid: Vec<bool>,
    /// Column of the masked slot within each prediction sequence.
    pub masked_column: Vec<usize>,
}

impl BatchLayout {
    pub fn new(batch: &[(&HyperFact, MaskSpec)]) -> Self {
        let qualifier_counts: Vec<usize> = batch.iter().map(|(f, _)| f.qualifiers.len()).collect();
        let context_len = 1 + qualifier_counts.iter().copied().max().unwrap_or(0);
        let context_valid = qualifier_counts
            .iter()
            .flat_map(|&k| (0..context_len).map(move |c| c <= k))
            .collect();
        let any_triplet = batch.iter().any(|(_, m)| m.in_triplet());
        let prediction_len = if any_triplet { 4 } else { 3 };
        let prediction_valid = batch
            .iter()
            .flat_map(|(_, m)| {
                let n = if m.in_triplet() { 4 } else { 3 };
                (0..prediction_len).map(move |c| c < n)
            })
            .collect();
        let masked_column = batch
            .iter()
            .map(|(_, m)| match m.slot {
                Position::Head | Position::QualifierRelation(_) => 1,
                Position::Relation | Position::QualifierValue(_) => 2,
                Position::Tail => 3,
            })
            .collect();
        Self {
            qualifier_counts,
            context_len,
            context_valid,
            prediction_len,
            prediction_valid,
            masked_column,
        }
    }
}

/// Output of one head over the instances routed to it.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Logits (`classes x n`) for the entity and relation heads; predicted
    /// values (`1 x n`) for the numeric head.
    pub value: Var,
    /// Batch positions of the instances, in column order.
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Final representation of every masked slot, `d x batch`.
    pub hidden: Var,
    pub entity: Option<HeadOutput>,
    pub relation: Option<HeadOutput>,
    pub numeric: Option<HeadOutput>,
    pub layout: BatchLayout,
}

/// Eval-mode answer for one masked slot.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotOutput {
    /// Probability of every discrete entity.
    Entity(Vec<f64>),
    /// Probability of every relation.
    Relation(Vec<f64>),
    /// Predicted value in normalized space.
    Numeric(f64),
}

#[derive(Debug, Clone, Copy)]
enum EntSlot {
    Discrete(usize),
    Numeric { relation: usize, value: f64, masked: bool },
}

/// Concatenation of column blocks with offsets for gathering.
struct Parts {
    vars: Vec<Var>,
    total: usize,
}

impl Parts {
    fn new() -> Self {
        Self {
            vars: Vec::new(),
            total: 0,
        }
    }

    fn push(&mut self, v: Var, cols: usize) -> usize {
        self.vars.push(v);
        self.total += cols;
        self.total - cols
    }

    fn gather<T: Real>(&self, g: &mut Graph<'_, T>, idx: &[usize]) -> Result<Var> {
        let all = if self.vars.len() == 1 {
            self.vars[0]
        } else {
            g.concat_cols(&self.vars)?
        };
        Ok(g.select_cols(all, idx)?)
    }
}

fn zeros<T: Real>(g: &mut Graph<'_, T>, d: usize) -> Result<Var> {
    Ok(g.constant(Array2::zeros((d, 1)))?)
}

/// `select_cols` that skips the identity gather.
fn take<T: Real>(g: &mut Graph<'_, T>, v: Var, idx: &[usize]) -> Result<Var> {
    let n = g.shape(v).1;
    if idx.len() == n && idx.iter().enumerate().all(|(i, &j)| i == j) {
        return Ok(v);
    }
    Ok(g.select_cols(v, idx)?)
}

/// Columns `rows` of a `rows x d` table as a `d x n` matrix.
fn gather_rows<T: Real>(g: &mut Graph<'_, T>, table: Var, rows: &[usize]) -> Result<Var> {
    let r = g.row_select(table, rows)?;
    Ok(g.transpose(r)?)
}

impl<T: Real> Model<T> {
    fn check_ids(&self, fact: &HyperFact) -> Result<()> {
        let ent_ok = |e: &EntityRef| e.discrete().is_none_or(|id| id < self.num_entities);
        let t = &fact.triplet;
        let ok = !t.head.is_numeric()
            && ent_ok(&t.head)
            && ent_ok(&t.tail)
            && t.relation < self.num_relations
            && fact.qualifiers.iter().all(|q| q.relation < self.num_relations && ent_ok(&q.value));
        if ok {
            Ok(())
        } else {
            Err(Error::Data("fact references ids outside the model's vocabulary".into()))
        }
    }

    /// Embeddings of entity slots as `d x n` columns: table rows for
    /// discrete entities, `v·w_r + b_r` for numeric ones (with the learned
    /// scalar mask in place of `v` when masked).
    fn entity_columns(&self, g: &mut Graph<'_, T>, slots: &[EntSlot]) -> Result<Var> {
        let mut disc = Vec::new();
        let (mut rels, mut vals, mut ind) = (Vec::new(), Vec::new(), Vec::new());
        let mut order = Vec::with_capacity(slots.len());
        for s in slots {
            match *s {
                EntSlot::Discrete(id) => {
                    order.push((false, disc.len()));
                    disc.push(id);
                }
                EntSlot::Numeric { relation, value, masked } => {
                    order.push((true, rels.len()));
                    rels.push(relation);
                    vals.push(if masked { T::zero() } else { T::of(value) });
                    ind.push(if masked { T::one() } else { T::zero() });
                }
            }
        }
        let mut parts = Parts::new();
        let disc_off = if disc.is_empty() {
            0
        } else {
            let table = g.param(self.ids.entity);
            let e = gather_rows(g, table, &disc)?;
            parts.push(e, disc.len())
        };
        let num_off = if rels.is_empty() {
            0
        } else {
            let n = rels.len();
            let wt = g.param(self.ids.num_weight);
            let bt = g.param(self.ids.num_bias);
            let w = gather_rows(g, wt, &rels)?;
            let b = gather_rows(g, bt, &rels)?;
            let mut v = g.constant(Array2::from_shape_vec((1, n), vals).expect("row"))?;
            if ind.iter().any(|&x| x != T::zero()) {
                let m = g.param(self.ids.mask_num);
                let mb = g.broadcast(m, 1, n)?;
                let i = g.constant(Array2::from_shape_vec((1, n), ind).expect("row"))?;
                let masked = g.mul(i, mb)?;
                v = g.add(v, masked)?;
            }
            let wv = g.mul_row(w, v)?;
            let e = g.add(wv, b)?;
            parts.push(e, n)
        };
        let idx: Vec<usize> = order
            .iter()
            .map(|&(num, i)| if num { num_off + i } else { disc_off + i })
            .collect();
        if parts.vars.len() == 1 {
            return take(g, parts.vars[0], &idx);
        }
        parts.gather(g, &idx)
    }

    fn relation_columns(&self, g: &mut Graph<'_, T>, rels: &[usize]) -> Result<Var> {
        let table = g.param(self.ids.relation);
        gather_rows(g, table, rels)
    }

    /// Embedding of an entity; numeric values need their governing relation.
    pub fn embed_entity(&self, entity: EntityRef, governing: Option<RelationId>) -> Result<Vec<T>> {
        let slot = match entity {
            EntityRef::Discrete(id) if id < self.num_entities => EntSlot::Discrete(id),
            EntityRef::Numeric(value) => match governing {
                Some(r) if r < self.num_relations => EntSlot::Numeric {
                    relation: r,
                    value,
                    masked: false,
                },
                Some(r) => return Err(Error::Data(format!("relation {r} out of range"))),
                None => return Err(Error::Data("numeric entity needs a governing relation".into())),
            },
            EntityRef::Discrete(id) => return Err(Error::Data(format!("entity {id} out of range"))),
        };
        let mut g = Graph::new(&self.params);
        let v = self.entity_columns(&mut g, &[slot])?;
        Ok(g.value(v).iter().copied().collect())
    }

    /// `W_tri [h; r; t]`, or `h ∘ r ∘ t` in Hadamard mode, column-wise.
    pub fn encode_triplet(&self, g: &mut Graph<'_, T>, h: Var, r: Var, t: Var) -> Result<Var> {
        match self.ids.w_tri {
            Some(w) => {
                let x = g.concat_rows(&[h, r, t])?;
                let w = g.param(w);
                Ok(g.matmul(w, x)?)
            }
            None => {
                let hr = g.mul(h, r)?;
                Ok(g.mul(hr, t)?)
            }
        }
    }

    /// `W_qual [q; v]`, or `q ∘ v` in Hadamard mode, column-wise.
    pub fn encode_qualifier(&self, g: &mut Graph<'_, T>, q: Var, v: Var) -> Result<Var> {
        match self.ids.w_qual {
            Some(w) => {
                let x = g.concat_rows(&[q, v])?;
                let w = g.param(w);
                Ok(g.matmul(w, x)?)
            }
            None => Ok(g.mul(q, v)?),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        p: &BlockIds,
        heads: usize,
        seq_len: usize,
        valid: &[bool],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let rate = self.config.dropout;
        let (wq, wk, wv, wo) = (g.param(p.query), g.param(p.key), g.param(p.value), g.param(p.output));
        let q = g.matmul(wq, x)?;
        let k = g.matmul(wk, x)?;
        let v = g.matmul(wv, x)?;
        let a = g.attention(q, k, v, heads, seq_len, valid)?;
        let o = g.matmul(wo, a)?;
        let o = g.dropout(o, rate, train, rng)?;
        let x = g.add(x, o)?;
        let (g1, b1) = (g.param(p.ln1_gain), g.param(p.ln1_bias));
        let x = g.layer_norm(x, g1, b1)?;

        let (w1, c1, w2, c2) = (g.param(p.ffn_w1), g.param(p.ffn_b1), g.param(p.ffn_w2), g.param(p.ffn_b2));
        let h = g.matmul(w1, x)?;
        let h = g.add_col(h, c1)?;
        let h = g.relu(h)?;
        let f = g.matmul(w2, h)?;
        let f = g.add_col(f, c2)?;
        let f = g.dropout(f, rate, train, rng)?;
        let x = g.add(x, f)?;
        let (g2, b2) = (g.param(p.ln2_gain), g.param(p.ln2_bias));
        Ok(g.layer_norm(x, g2, b2)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn stack<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        mut x: Var,
        blocks: &[BlockIds],
        heads: usize,
        seq_len: usize,
        valid: &[bool],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        for b in blocks {
            x = self.block(g, x, b, heads, seq_len, valid, train, rng)?;
        }
        Ok(x)
    }

    /// Context transformer over packed sequences. `x_tri` is `d x B`,
    /// `x_qual` holds the qualifiers of all sequences back to back
    /// (`counts[b]` of them for sequence `b`). Returns `d x (B * S)` with
    /// `S = 1 + max(counts)`.
    fn context_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        x_tri: Var,
        x_qual: Option<Var>,
        counts: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<bool>, usize)> {
        let d = self.config.dim;
        let b = counts.len();
        let s = 1 + counts.iter().copied().max().unwrap_or(0);
        let mut parts = Parts::new();
        let pt = g.param(self.ids.pos_tri);
        let tri = g.add_col(x_tri, pt)?;
        let tri_off = parts.push(tri, b);
        let qual_off = match x_qual {
            Some(xq) => {
                let pq = g.param(self.ids.pos_qual);
                let n = g.shape(xq).1;
                let q = g.add_col(xq, pq)?;
                parts.push(q, n)
            }
            None => 0,
        };
        let pad = if counts.iter().any(|&k| k + 1 < s) {
            let z = zeros(g, d)?;
            parts.push(z, 1)
        } else {
            0
        };
        let mut idx = Vec::with_capacity(b * s);
        let mut valid = Vec::with_capacity(b * s);
        let mut q = 0;
        for (i, &k) in counts.iter().enumerate() {
            idx.push(tri_off + i);
            for j in 0..s - 1 {
                idx.push(if j < k { qual_off + q + j } else { pad });
            }
            valid.extend((0..s).map(|c| c <= k));
            q += k;
        }
        let x0 = if s == 1 { take(g, tri, &idx)? } else { parts.gather(g, &idx)? };
        let out = self.stack(
            g,
            x0,
            &self.ids.context,
            self.config.context_heads,
            s,
            &valid,
            train,
            rng,
        )?;
        Ok((out, valid, s))
    }

    /// Context transformer for one fact: `x_tri` is `d x 1`, `x_qual` is
    /// `d x k`. Returns all `1 + k` output columns.
    pub fn context_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        x_tri: Var,
        x_qual: Option<Var>,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let k = x_qual.map_or(0, |v| g.shape(v).1);
        Ok(self.context_batch(g, x_tri, x_qual, &[k], train, rng)?.0)
    }

    /// Prediction transformer for one sequence: the context vector and
    /// `(h, r, t)` for a triplet target or `(q, v)` for a qualifier target,
    /// each `d x 1`. Returns the 4 or 3 output columns; in linear mode,
    /// the single projected column.
    pub fn prediction_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        ctx: Var,
        components: &[Var],
        kind: TargetKind,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let want = match kind {
            TargetKind::Triplet => 3,
            TargetKind::Qualifier => 2,
        };
        if components.len() != want {
            return Err(Error::Data(format!(
                "{kind:?} prediction needs {want} components, got {}",
                components.len()
            )));
        }
        let mut rows = vec![ctx];
        rows.extend_from_slice(components);
        if self.config.prediction_head == PredictionHead::Linear {
            let w = match kind {
                TargetKind::Triplet => self.ids.lin_tri,
                TargetKind::Qualifier => self.ids.lin_qual,
            }
            .expect("linear mode allocates its projections");
            let x = g.concat_rows(&rows)?;
            let w = g.param(w);
            return Ok(g.matmul(w, x)?);
        }
        let pp = self.ids.pred_pos.as_ref().expect("transformer mode allocates positions");
        let pos = match kind {
            TargetKind::Triplet => vec![pp.triplet, pp.head, pp.relation, pp.tail],
            TargetKind::Qualifier => vec![pp.qualifier, pp.qual_relation, pp.qual_value],
        };
        let mut cols = Vec::with_capacity(rows.len());
        for (v, p) in rows.into_iter().zip(pos) {
            let p = g.param(p);
            cols.push(g.add_col(v, p)?);
        }
        let z0 = g.concat_cols(&cols)?;
        let n = cols.len();
        self.stack(
            g,
            z0,
            &self.ids.prediction,
            self.config.prediction_heads,
            n,
            &vec![true; n],
            train,
            rng,
        )
    }

    /// Entity logits `W̄_ent m + b̄_ent` for `d x n` columns.
    pub fn entity_logits(&self, g: &mut Graph<'_, T>, m: Var) -> Result<Var> {
        let (w, b) = (g.param(self.ids.ent_head_w), g.param(self.ids.ent_head_b));
        let l = g.matmul(w, m)?;
        Ok(g.add_col(l, b)?)
    }

    /// Relation logits `W̄_rel m + b̄_rel` for `d x n` columns.
    pub fn relation_logits(&self, g: &mut Graph<'_, T>, m: Var) -> Result<Var> {
        let (w, b) = (g.param(self.ids.rel_head_w), g.param(self.ids.rel_head_b));
        let l = g.matmul(w, m)?;
        Ok(g.add_col(l, b)?)
    }

    /// `w̄_r · m + b̄_r` per column, with column `i` read under `relations[i]`.
    pub fn numeric_value(&self, g: &mut Graph<'_, T>, m: Var, relations: &[RelationId]) -> Result<Var> {
        if let Some(&r) = relations.iter().find(|&&r| r >= self.num_relations) {
            return Err(Error::Data(format!("relation {r} out of range")));
        }
        let (wt, bt) = (g.param(self.ids.num_head_w), g.param(self.ids.num_head_b));
        let w = gather_rows(g, wt, relations)?;
        let wm = g.mul(w, m)?;
        let dot = g.col_sum(wm)?;
        let b = gather_rows(g, bt, relations)?;
        Ok(g.add(dot, b)?)
    }

    /// Full forward pass of a batch of masked instances.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[(&HyperFact, MaskSpec)],
        train: bool,
        rng: &mut R,
    ) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let (ne, nr) = (self.num_entities, self.num_relations);
        let bsz = batch.len();
        let layout = BatchLayout::new(batch);

        let mut heads = Vec::with_capacity(bsz);
        let mut tails = Vec::with_capacity(bsz);
        let mut rels = Vec::with_capacity(bsz);
        let (mut qrels, mut qvals) = (Vec::new(), Vec::new());
        let mut qoff = Vec::with_capacity(bsz);
        let ent = |e: EntityRef, gov: usize, masked: bool| match e {
            EntityRef::Discrete(_) if masked => EntSlot::Discrete(ne),
            EntityRef::Discrete(id) => EntSlot::Discrete(id),
            EntityRef::Numeric(value) => EntSlot::Numeric {
                relation: gov,
                value,
                masked,
            },
        };
        for (fact, mask) in batch {
            self.check_ids(fact)?;
            if MaskSpec::new(fact, mask.slot)?.kind != mask.kind {
                return Err(Error::Data(format!("mask kind {:?} does not match slot {}", mask.kind, mask.slot)));
            }
            let slot = mask.slot;
            let t = &fact.triplet;
            let r = if slot == Position::Relation { nr } else { t.relation };
            heads.push(ent(t.head, r, slot == Position::Head));
            rels.push(r);
            tails.push(ent(t.tail, r, slot == Position::Tail));
            qoff.push(qrels.len());
            for (j, q) in fact.qualifiers.iter().enumerate() {
                let qr = if slot == Position::QualifierRelation(j) { nr } else { q.relation };
                qrels.push(qr);
                qvals.push(ent(q.value, qr, slot == Position::QualifierValue(j)));
            }
        }
        let nq = qrels.len();

        let h = self.entity_columns(g, &heads)?;
        let r = self.relation_columns(g, &rels)?;
        let t = self.entity_columns(g, &tails)?;
        let x_tri = self.encode_triplet(g, h, r, t)?;
        let (q, v, x_qual) = if nq > 0 {
            let q = self.relation_columns(g, &qrels)?;
            let v = self.entity_columns(g, &qvals)?;
            let xq = self.encode_qualifier(g, q, v)?;
            (Some(q), Some(v), Some(xq))
        } else {
            (None, None, None)
        };

        let (xc, _, s) = self.context_batch(g, x_tri, x_qual, &layout.qualifier_counts, train, rng)?;
        // the context column of the masked triplet or qualifier
        let qual_index = |i: usize| match batch[i].1.slot {
            Position::QualifierRelation(j) | Position::QualifierValue(j) => Some(qoff[i] + j),
            _ => None,
        };
        let ctx_cols: Vec<usize> = (0..bsz)
            .map(|i| i * s + qual_index(i).map_or(0, |gq| 1 + gq - qoff[i]))
            .collect();
        let c = take(g, xc, &ctx_cols)?;

        let hidden = match self.config.prediction_head {
            PredictionHead::Transformer => {
                let pp = self.ids.pred_pos.clone().expect("transformer mode allocates positions");
                let p = layout.prediction_len;
                let any_tri = batch.iter().any(|(_, m)| m.in_triplet());
                let any_qual = batch.iter().any(|(_, m)| !m.in_triplet());
                let mut parts = Parts::new();
                let mut add = |g: &mut Graph<'_, T>, v: Var, pos, cols| -> Result<usize> {
                    let pos = g.param(pos);
                    let x = g.add_col(v, pos)?;
                    Ok(parts.push(x, cols))
                };
                let tri_offs = if any_tri {
                    Some([
                        add(g, c, pp.triplet, bsz)?,
                        add(g, h, pp.head, bsz)?,
                        add(g, r, pp.relation, bsz)?,
                        add(g, t, pp.tail, bsz)?,
                    ])
                } else {
                    None
                };
                let qual_offs = if any_qual {
                    Some([
                        add(g, c, pp.qualifier, bsz)?,
                        add(g, q.expect("qualifier target implies qualifiers"), pp.qual_relation, nq)?,
                        add(g, v.expect("qualifier target implies qualifiers"), pp.qual_value, nq)?,
                    ])
                } else {
                    None
                };
                let pad = if any_tri && any_qual {
                    let z = zeros(g, self.config.dim)?;
                    parts.push(z, 1)
                } else {
                    0
                };
                let mut idx = Vec::with_capacity(bsz * p);
                for i in 0..bsz {
                    match qual_index(i) {
                        None => {
                            let o = tri_offs.expect("triplet offsets");
                            idx.extend([o[0] + i, o[1] + i, o[2] + i, o[3] + i]);
                        }
                        Some(gq) => {
                            let o = qual_offs.expect("qualifier offsets");
                            idx.extend([o[0] + i, o[1] + gq, o[2] + gq]);
                            if p == 4 {
                                idx.push(pad);
                            }
                        }
                    }
                }
                let z0 = parts.gather(g, &idx)?;
                let z = self.stack(
                    g,
                    z0,
                    &self.ids.prediction,
                    self.config.prediction_heads,
                    p,
                    &layout.prediction_valid,
                    train,
                    rng,
                )?;
                let out_cols: Vec<usize> = (0..bsz).map(|i| i * p + layout.masked_column[i]).collect();
                g.select_cols(z, &out_cols)?
            }
            PredictionHead::Linear => {
                let tri_rows: Vec<usize> = (0..bsz).filter(|&i| qual_index(i).is_none()).collect();
                let qual_rows: Vec<usize> = (0..bsz).filter(|&i| qual_index(i).is_some()).collect();
                let mut parts = Parts::new();
                let mut pos = vec![0; bsz];
                if !tri_rows.is_empty() {
                    let cols: Vec<Var> = [c, h, r, t]
                        .iter()
                        .map(|&x| take(g, x, &tri_rows))
                        .collect::<Result<_>>()?;
                    let x = g.concat_rows(&cols)?;
                    let w = g.param(self.ids.lin_tri.expect("linear mode allocates projections"));
                    let y = g.matmul(w, x)?;
                    let off = parts.push(y, tri_rows.len());
                    for (k, &i) in tri_rows.iter().enumerate() {
                        pos[i] = off + k;
                    }
                }
                if !qual_rows.is_empty() {
                    let gq: Vec<usize> = qual_rows.iter().map(|&i| qual_index(i).expect("qualifier row")).collect();
                    let cq = take(g, c, &qual_rows)?;
                    let qq = take(g, q.expect("qualifiers"), &gq)?;
                    let vq = take(g, v.expect("qualifiers"), &gq)?;
                    let x = g.concat_rows(&[cq, qq, vq])?;
                    let w = g.param(self.ids.lin_qual.expect("linear mode allocates projections"));
                    let y = g.matmul(w, x)?;
                    let off = parts.push(y, qual_rows.len());
                    for (k, &i) in qual_rows.iter().enumerate() {
                        pos[i] = off + k;
                    }
                }
                if parts.vars.len() == 1 {
                    take(g, parts.vars[0], &pos)?
                } else {
                    parts.gather(g, &pos)?
                }
            }
        };

        let rows_of = |kind: SlotKind| -> Vec<usize> { (0..bsz).filter(|&i| batch[i].1.kind == kind).collect() };
        let entity_rows = rows_of(SlotKind::DiscreteEntity);
        let entity = if entity_rows.is_empty() {
            None
        } else {
            let m = take(g, hidden, &entity_rows)?;
            Some(HeadOutput {
                value: self.entity_logits(g, m)?,
                rows: entity_rows,
            })
        };
        let relation_rows = rows_of(SlotKind::Relation);
        let relation = if relation_rows.is_empty() {
            None
        } else {
            let m = take(g, hidden, &relation_rows)?;
            Some(HeadOutput {
                value: self.relation_logits(g, m)?,
                rows: relation_rows,
            })
        };
        let numeric_rows = rows_of(SlotKind::Numeric);
        let numeric = if numeric_rows.is_empty() {
            None
        } else {
            let governing: Vec<RelationId> = numeric_rows
                .iter()
                .map(|&i| {
                    let (f, m) = batch[i];
                    match m.slot {
                        Position::QualifierValue(j) => f.qualifiers[j].relation,
                        _ => f.triplet.relation,
                    }
                })
                .collect();
            let m = take(g, hidden, &numeric_rows)?;
            Some(HeadOutput {
                value: self.numeric_value(g, m, &governing)?,
                rows: numeric_rows,
            })
        };
        Ok(BatchOutput {
            hidden,
            entity,
            relation,
            numeric,
            layout,
        })
    }

    /// Eval-mode outputs (probabilities or values) in batch order.
    pub fn predict(&self, batch: &[(&HyperFact, MaskSpec)]) -> Result<Vec<SlotOutput>> {
        let mut g = Graph::new(&self.params);
        // eval mode draws no random numbers
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_batch(&mut g, batch, false, &mut rng)?;
        let mut res: Vec<Option<SlotOutput>> = vec![None; batch.len()];
        for (head, wrap) in [
            (&out.entity, SlotOutput::Entity as fn(Vec<f64>) -> SlotOutput),
            (&out.relation, SlotOutput::Relation),
        ] {
            if let Some(h) = head {
                let p = g.softmax_cols(h.value)?;
                let pv = g.value(p);
                for (k, &i) in h.rows.iter().enumerate() {
                    res[i] = Some(wrap(pv.column(k).iter().map(|x| x.as_f64()).collect()));
                }
            }
        }
        if let Some(h) = &out.numeric {
            let v = g.value(h.value);
            for (k, &i) in h.rows.iter().enumerate() {
                res[i] = Some(SlotOutput::Numeric(v[[0, k]].as_f64()));
            }
        }
        Ok(res.into_iter().map(|o| o.expect("every instance reaches a head")).collect())
    }

    /// Eval-mode output for one masked slot of one fact.
    pub fn forward_fact(&self, fact: &HyperFact, slot: Position) -> Result<SlotOutput> {
        let mask = MaskSpec::new(fact, slot)?;
        Ok(self.predict(&[(fact, mask)])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Qualifier;
    use crate::model::{Encoding, HyntConfig};

    fn cfg(d: usize) -> HyntConfig {
        let mut c = HyntConfig::with_dim(d);
        c.context_heads = 2;
        c.prediction_heads = 2;
        c
    }

    fn fact(k: usize) -> HyperFact {
        let quals = (0..k)
            .map(|j| {
                if j % 2 == 0 {
                    Qualifier::new(j % 3, EntityRef::Discrete(j % 4))
                } else {
                    Qualifier::new(3, EntityRef::Numeric(0.1 * j as f64))
                }
            })
            .collect();
        HyperFact::new(EntityRef::Discrete(1), 2, EntityRef::Discrete(3), quals)
    }

    #[test]
    fn zero_numeric_value_embeds_as_bias() {
        let m = Model::<f64>::new(cfg(8), 5, 4, 1).unwrap();
        let e = m.embed_entity(EntityRef::Numeric(0.0), Some(2)).unwrap();
        let b = m.params.get(m.ids.num_bias).row(2).to_vec();
        assert_eq!(e, b);
        let d = m.embed_entity(EntityRef::Discrete(3), None).unwrap();
        assert_eq!(d, m.params.get(m.ids.entity).row(3).to_vec());
        assert!(m.embed_entity(EntityRef::Numeric(1.0), None).is_err());
    }

    #[test]
    fn hadamard_with_unit_tail_is_h_times_r() {
        let mut c = cfg(4);
        c.encoding = Encoding::Hadamard;
        let m = Model::<f64>::new(c, 3, 2, 0).unwrap();
        let mut g = Graph::new(&m.params);
        let h = g.constant(Array2::from_shape_vec((4, 1), vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let r = g.constant(Array2::from_shape_vec((4, 1), vec![0.5, -1., 2., 0.]).unwrap()).unwrap();
        let t = g.constant(Array2::ones((4, 1))).unwrap();
        let x = m.encode_triplet(&mut g, h, r, t).unwrap();
        assert_eq!(g.value(x).column(0).to_vec(), vec![0.5, -2., 6., 0.]);
    }

    #[test]
    fn block_identity_projection_returns_head() {
        let mut m = Model::<f64>::new(cfg(4), 3, 2, 0).unwrap();
        let w = m.ids.w_tri.unwrap();
        let p = m.params.get_mut(w);
        p.fill(0.0);
        for i in 0..4 {
            p[[i, i]] = 1.0;
        }
        let mut g = Graph::new(&m.params);
        let h = g.constant(Array2::from_shape_vec((4, 1), vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let r = g.constant(Array2::from_elem((4, 1), 7.0)).unwrap();
        let t = g.constant(Array2::from_elem((4, 1), -3.0)).unwrap();
        let x = m.encode_triplet(&mut g, h, r, t).unwrap();
        assert_eq!(g.value(x).column(0).to_vec(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn layout_shapes() {
        let f0 = fact(0);
        let f2 = fact(2);
        let b = [
            (&f0, MaskSpec::new(&f0, Position::Head).unwrap()),
            (&f2, MaskSpec::new(&f2, Position::QualifierValue(1)).unwrap()),
        ];
        let l = BatchLayout::new(&b);
        assert_eq!(l.context_len, 3);
        assert_eq!(l.context_valid, [true, false, false, true, true, true]);
        assert_eq!(l.prediction_len, 4);
        assert_eq!(l.prediction_valid, [true, true, true, true, true, true, true, false]);
        assert_eq!(l.masked_column, [1, 2]);
    }

    #[test]
    fn outputs_route_to_heads() {
        let m = Model::<f64>::new(cfg(8), 5, 4, 2).unwrap();
        let f = fact(3);
        let batch: Vec<_> = MaskSpec::all(&f).into_iter().map(|s| (&f, s)).collect();
        let out = m.predict(&batch).unwrap();
        assert!(matches!(out[0], SlotOutput::Entity(ref p) if p.len() == 5));
        assert!(matches!(out[1], SlotOutput::Relation(ref p) if p.len() == 4));
        assert!(matches!(out[6], SlotOutput::Numeric(_)));
        assert!(matches!(out[8], SlotOutput::Entity(_)));
        for o in &out {
            if let SlotOutput::Entity(p) | SlotOutput::Relation(p) = o {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batching_matches_single_instances() {
        for head in [PredictionHead::Transformer, PredictionHead::Linear] {
            let mut c = cfg(8);
            c.prediction_head = head;
            let m = Model::<f64>::new(c, 5, 4, 3).unwrap();
            let facts = [fact(0), fact(1), fact(3)];
            let batch: Vec<_> = facts
                .iter()
                .flat_map(|f| MaskSpec::all(f).into_iter().map(move |s| (f, s)))
                .collect();
            let together = m.predict(&batch).unwrap();
            for (i, inst) in batch.iter().enumerate() {
                let alone = m.predict(std::slice::from_ref(inst)).unwrap().remove(0);
                match (&together[i], &alone) {
                    (SlotOutput::Numeric(a), SlotOutput::Numeric(b)) => assert!((a - b).abs() < 1e-12),
                    (SlotOutput::Entity(a), SlotOutput::Entity(b))
                    | (SlotOutput::Relation(a), SlotOutput::Relation(b)) => {
                        for (x, y) in a.iter().zip(b) {
                            assert!((x - y).abs() < 1e-12);
                        }
                    }
                    other => panic!("{other:?}"),
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_mask_kind_and_unknown_ids() {
        let m = Model::<f64>::new(cfg(8), 5, 4, 2).unwrap();
        let f = fact(0);
        let bad = MaskSpec {
            slot: Position::Tail,
            kind: SlotKind::Numeric,
        };
        assert!(m.predict(&[(&f, bad)]).is_err());
        let g = HyperFact::new(EntityRef::Discrete(9), 0, EntityRef::Discrete(0), vec![]);
        assert!(m.forward_fact(&g, Position::Tail).is_err());
    }
}
