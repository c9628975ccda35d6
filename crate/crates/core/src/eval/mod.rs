//! Link, relation and numeric-value evaluation.
//!
//! Every slot of every evaluated fact becomes one query. Discrete-entity
//! slots are ranked among all entities, relation slots among all
//! relations, and numeric slots are scored by squared error. Results are
//! reported for primary-triplet slots only ("tri") and for all slots
//! ("all").

mod filter;
mod metrics;

use std::fmt::Write as _;

use hynt_kernel::Real;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::NormalizationTable;
use crate::kg::{HyperFact, Vocabulary};
use crate::model::{MaskSpec, Model, SlotOutput, Target};

pub use filter::FilterIndex;
pub use metrics::{
    link_metrics, numeric_metrics, rank, ranking_metrics, relation_metrics, AttributeRmse, NumericMetrics,
    NumericPrediction, RankAccumulator, RankMode, RankingMetrics,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Tri,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tri" => Ok(Scope::Tri),
            "all" => Ok(Scope::All),
            _ => Err(Error::Config(format!("unknown scope {s:?} (tri | all)"))),
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::Tri => "Tri",
            Scope::All => "All",
        })
    }
}

/// Metrics of one scope; `None` where the scope has no such queries.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScopeReport {
    pub link: Option<RankingMetrics>,
    pub relation: Option<RankingMetrics>,
    pub numeric: Option<NumericMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: RankMode,
    pub tri: ScopeReport,
    pub all: ScopeReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub mode: RankMode,
    /// Queries per forward pass.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: RankMode::Filtered,
            batch_size: 256,
        }
    }
}

#[derive(Default)]
struct ScopeAcc {
    link: RankAccumulator,
    relation: RankAccumulator,
    numeric: Vec<NumericPrediction>,
}

impl ScopeAcc {
    fn finish(self, table: &NormalizationTable, vocab: &Vocabulary) -> Result<ScopeReport> {
        Ok(ScopeReport {
            link: self.link.finish(),
            relation: self.relation.finish(),
            numeric: if self.numeric.is_empty() {
                None
            } else {
                Some(numeric_metrics(&self.numeric, table, vocab)?)
            },
        })
    }
}

/// Evaluates every slot of `facts` (numeric values already normalized).
pub fn evaluate<T: Real>(
    model: &Model<T>,
    facts: &[HyperFact],
    filter: &FilterIndex,
    table: &NormalizationTable,
    vocab: &Vocabulary,
    options: EvalOptions,
) -> Result<EvalReport> {
    let queries: Vec<(&HyperFact, MaskSpec)> = facts
        .iter()
        .flat_map(|f| MaskSpec::all(f).into_iter().map(move |m| (f, m)))
        .collect();
    let empty = Default::default();
    let (mut tri, mut all) = (ScopeAcc::default(), ScopeAcc::default());
    for chunk in queries.chunks(options.batch_size.max(1)) {
        let outputs = model.predict(chunk)?;
        for (&(fact, mask), out) in chunk.iter().zip(outputs) {
            let known = filter.known(fact, &mask).unwrap_or(&empty);
            let scopes: &mut [&mut ScopeAcc] = if mask.in_triplet() {
                &mut [&mut tri, &mut all]
            } else {
                &mut [&mut all]
            };
            match (mask.target(fact)?, out) {
                (Target::Entity(gold), SlotOutput::Entity(p)) => {
                    let r = rank(&p, gold, known, options.mode)?;
                    scopes.iter_mut().for_each(|s| s.link.push(r));
                }
                (Target::Relation(gold), SlotOutput::Relation(p)) => {
                    let r = rank(&p, gold, known, options.mode)?;
                    scopes.iter_mut().for_each(|s| s.relation.push(r));
                }
                (Target::Numeric { relation, value }, SlotOutput::Numeric(predicted)) => {
                    let p = NumericPrediction {
                        relation,
                        predicted,
                        gold: value,
                    };
                    scopes.iter_mut().for_each(|s| s.numeric.push(p));
                }
                (t, o) => unreachable!("head routing mismatch: {t:?} vs {o:?}"),
            }
        }
    }
    Ok(EvalReport {
        mode: options.mode,
        tri: tri.finish(table, vocab)?,
        all: all.finish(table, vocab)?,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn scope(&self, scope: Scope) -> &ScopeReport {
        match scope {
            Scope::Tri => &self.tri,
            Scope::All => &self.all,
        }
    }

    /// Model-selection score: link MRR over all slots, falling back to
    /// relation MRR and then to negated RMSE when a task has no queries.
    pub fn selection_score(&self) -> Option<f64> {
        self.all
            .link
            .map(|m| m.mrr)
            .or(self.all.relation.map(|m| m.mrr))
            .or(self.all.numeric.as_ref().map(|m| -m.rmse))
    }

    fn rows(&self, scopes: &[Scope]) -> Vec<[String; 10]> {
        scopes
            .iter()
            .map(|&s| {
                let r = self.scope(s);
                let (l, q) = (r.link, r.relation);
                [
                    s.to_string(),
                    cell(l.map(|m| m.mrr)),
                    cell(l.map(|m| m.hits10)),
                    cell(l.map(|m| m.hits3)),
                    cell(l.map(|m| m.hits1)),
                    cell(q.map(|m| m.mrr)),
                    cell(q.map(|m| m.hits10)),
                    cell(q.map(|m| m.hits3)),
                    cell(q.map(|m| m.hits1)),
                    cell(r.numeric.as_ref().map(|m| m.rmse)),
                ]
            })
            .collect()
    }

    const HEADER: [&'static str; 10] = [
        "scope",
        "link_mrr",
        "link_hits10",
        "link_hits3",
        "link_hits1",
        "rel_mrr",
        "rel_hits10",
        "rel_hits3",
        "rel_hits1",
        "rmse",
    ];

    /// One CSV row per scope; empty cells where a scope has no queries.
    pub fn to_csv(&self, scopes: &[Scope]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADER).expect("in-memory write");
        for row in self.rows(scopes) {
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Per-attribute RMSE in raw units, one CSV row per (scope, relation).
    pub fn attributes_csv(&self, scopes: &[Scope]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "relation", "rmse", "count"]).expect("in-memory write");
        for &s in scopes {
            for a in self.scope(s).numeric.iter().flat_map(|m| &m.per_attribute) {
                w.write_record([s.to_string(), a.relation.clone(), format!("{:.6}", a.rmse), a.count.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Aligned text table, `-` marking tasks without queries.
    pub fn to_table(&self, scopes: &[Scope]) -> String {
        let mut rows = vec![Self::HEADER.map(String::from)];
        rows.extend(self.rows(scopes).into_iter().map(|r| r.map(|c| if c.is_empty() { "-".into() } else { c })));
        let widths: Vec<usize> = (0..10).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        out
    }
}
