use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::NormalizationTable;
use crate::kg::{RelationId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Raw,
    /// Other known answers are removed from the candidates first.
    Filtered,
}

impl std::str::FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(RankMode::Raw),
            "filtered" => Ok(RankMode::Filtered),
            _ => Err(Error::Config(format!("unknown rank mode {s:?} (raw | filtered)"))),
        }
    }
}

/// Rank of `gold` among `scores`: one plus the number of candidates
/// scoring strictly higher plus half the number tied with it. In filtered
/// mode the candidates in `known` (other than `gold`) are skipped.
pub fn rank(scores: &[f64], gold: usize, known: &HashSet<usize>, mode: RankMode) -> Result<f64> {
    let Some(&g) = scores.get(gold) else {
        return Err(Error::Data(format!("gold {gold} outside {} candidates", scores.len())));
    };
    let (mut higher, mut ties) = (0usize, 0usize);
    for (i, &s) in scores.iter().enumerate() {
        if i == gold || (mode == RankMode::Filtered && known.contains(&i)) {
            continue;
        }
        if s > g {
            higher += 1;
        } else if s == g {
            ties += 1;
        }
    }
    Ok(1.0 + higher as f64 + 0.5 * ties as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

/// Streaming MRR / Hits@k.
#[derive(Debug, Clone, Default)]
pub struct RankAccumulator {
    reciprocal: f64,
    hits: [usize; 3],
    count: usize,
}

impl RankAccumulator {
    pub fn push(&mut self, rank: f64) {
        self.reciprocal += 1.0 / rank;
        for (h, k) in self.hits.iter_mut().zip([1.0, 3.0, 10.0]) {
            if rank <= k {
                *h += 1;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Option<RankingMetrics> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(RankingMetrics {
            mrr: self.reciprocal / n,
            hits1: self.hits[0] as f64 / n,
            hits3: self.hits[1] as f64 / n,
            hits10: self.hits[2] as f64 / n,
            count: self.count,
        })
    }
}

/// MRR and Hits@{1,3,10} of a set of ranks.
pub fn ranking_metrics(ranks: &[f64], what: &'static str) -> Result<RankingMetrics> {
    let mut acc = RankAccumulator::default();
    for &r in ranks {
        acc.push(r);
    }
    acc.finish().ok_or(Error::EmptyQueries(what))
}

pub fn link_metrics(ranks: &[f64]) -> Result<RankingMetrics> {
    ranking_metrics(ranks, "link")
}

pub fn relation_metrics(ranks: &[f64]) -> Result<RankingMetrics> {
    ranking_metrics(ranks, "relation")
}

/// One numeric prediction in normalized space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericPrediction {
    pub relation: RelationId,
    pub predicted: f64,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeRmse {
    pub relation: String,
    /// RMSE in the attribute's original units.
    pub rmse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NumericMetrics {
    /// RMSE over all predictions in normalized space.
    pub rmse: f64,
    pub count: usize,
    pub per_attribute: Vec<AttributeRmse>,
}

/// Global RMSE in normalized space; per-attribute RMSE with errors scaled
/// back to raw units by each relation's `max - min`.
pub fn numeric_metrics(
    predictions: &[NumericPrediction],
    table: &NormalizationTable,
    vocab: &Vocabulary,
) -> Result<NumericMetrics> {
    if predictions.is_empty() {
        return Err(Error::EmptyQueries("numeric"));
    }
    let mut total = 0.0;
    let mut groups: BTreeMap<RelationId, (f64, usize)> = BTreeMap::new();
    for p in predictions {
        let span = table
            .get(p.relation)
            .ok_or_else(|| Error::UnknownRelation(vocab.relation_name(p.relation).to_string()))?
            .span();
        let e = p.predicted - p.gold;
        total += e * e;
        let g = groups.entry(p.relation).or_default();
        g.0 += (e * span) * (e * span);
        g.1 += 1;
    }
    Ok(NumericMetrics {
        rmse: (total / predictions.len() as f64).sqrt(),
        count: predictions.len(),
        per_attribute: groups
            .into_iter()
            .map(|(r, (se, n))| AttributeRmse {
                relation: vocab.relation_name(r).to_string(),
                rmse: (se / n as f64).sqrt(),
                count: n,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{compute_normalization, parse_facts, VocabMode};

    fn none() -> HashSet<usize> {
        HashSet::new()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&[0.1, 0.7, 0.2], 1, &none(), RankMode::Filtered).unwrap(), 1.0);
        assert_eq!(rank(&[0.4, 0.4, 0.2], 0, &none(), RankMode::Raw).unwrap(), 1.5);
        assert!(rank(&[0.4], 3, &none(), RankMode::Raw).is_err());
    }

    #[test]
    fn filtering_removes_known_competitors_but_not_gold() {
        let known: HashSet<usize> = [0, 2].into_iter().collect();
        let s = [0.9, 0.1, 0.5, 0.3];
        assert_eq!(rank(&s, 3, &known, RankMode::Raw).unwrap(), 3.0);
        assert_eq!(rank(&s, 3, &known, RankMode::Filtered).unwrap(), 1.0);
        // the gold itself being in the known set changes nothing
        let known: HashSet<usize> = [3].into_iter().collect();
        assert_eq!(rank(&s, 3, &known, RankMode::Filtered).unwrap(), 3.0);
    }

    #[test]
    fn metric_examples() {
        let m = link_metrics(&[1.0, 1.0]).unwrap();
        assert_eq!((m.mrr, m.hits1, m.hits3, m.hits10), (1.0, 1.0, 1.0, 1.0));
        let m = link_metrics(&[1.0, 4.0]).unwrap();
        assert_eq!(m.mrr, 0.625);
        assert_eq!(m.hits3, 0.5);
        assert_eq!(link_metrics(&[11.0]).unwrap().hits10, 0.0);
        assert_eq!(link_metrics(&[10.0]).unwrap().hits10, 1.0);
        assert!(matches!(relation_metrics(&[]), Err(Error::EmptyQueries("relation"))));
    }

    #[test]
    fn rmse_examples() {
        let mut vocab = Vocabulary::new();
        let facts = parse_facts("a ranking #1\nb ranking #246\nc w #0\nd w #1\n", VocabMode::Build(&mut vocab)).unwrap();
        let table = compute_normalization(&facts);
        let p = |relation, predicted, gold| NumericPrediction {
            relation,
            predicted,
            gold,
        };
        let m = numeric_metrics(&[p(1, 0.3, 0.0), p(1, 0.6, 1.0)], &table, &vocab).unwrap();
        assert!((m.rmse - 0.125f64.sqrt()).abs() < 1e-15);
        let m = numeric_metrics(&[p(0, 0.1, 0.1), p(0, 0.2, 0.0)], &table, &vocab).unwrap();
        assert!((m.rmse - 0.02f64.sqrt()).abs() < 1e-15);
        let a = &m.per_attribute[0];
        assert_eq!(a.relation, "ranking");
        assert!((a.rmse - 0.02f64.sqrt() * 245.0).abs() < 1e-12);
        assert!(numeric_metrics(&[p(0, 0.5, 0.5)], &table, &vocab).unwrap().rmse == 0.0);
        assert!(numeric_metrics(&[p(7, 0.5, 0.5)], &table, &vocab).is_err());
    }
}
