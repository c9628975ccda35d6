use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kg::{Dataset, EntityRef, HyperFact, RelationId, RelationStats, Vocabulary};

const HEADER: &str = "hynt-normalization 1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn is_constant(&self) -> bool {
        self.min == self.max
    }

    /// `(v - min) / (max - min)`; a constant relation maps everything to 0.5.
    /// Values outside the training range are not clipped.
    pub fn normalize(&self, v: f64) -> f64 {
        if self.is_constant() {
            0.5
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        if self.is_constant() {
            self.min
        } else {
            self.min + x * (self.max - self.min)
        }
    }

    /// Raw-unit size of one normalized unit.
    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Per-relation min-max ranges from the training split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalizationTable {
    entries: BTreeMap<RelationId, MinMax>,
    applied: bool,
}

/// Min and max of every numeric relation over the given (training) facts,
/// tail and qualifier positions pooled.
pub fn compute_normalization(train: &[HyperFact]) -> NormalizationTable {
    let entries = RelationStats::collect(train)
        .into_iter()
        .map(|(r, s)| (r, MinMax { min: s.min, max: s.max }))
        .collect();
    NormalizationTable {
        entries,
        applied: false,
    }
}

impl NormalizationTable {
    pub fn get(&self, r: RelationId) -> Option<&MinMax> {
        self.entries.get(&r)
    }

    pub fn entries(&self) -> impl Iterator<Item = (RelationId, &MinMax)> {
        self.entries.iter().map(|(&r, m)| (r, m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether a dataset has been normalized with this table.
    pub fn applied(&self) -> bool {
        self.applied
    }

    fn range(&self, r: RelationId, vocab: &Vocabulary) -> Result<&MinMax> {
        self.entries
            .get(&r)
            .ok_or_else(|| Error::UnknownRelation(vocab.relation_name(r).to_string()))
    }

    pub fn normalize(&self, r: RelationId, v: f64, vocab: &Vocabulary) -> Result<f64> {
        Ok(self.range(r, vocab)?.normalize(v))
    }

    pub fn denormalize(&self, r: RelationId, x: f64, vocab: &Vocabulary) -> Result<f64> {
        Ok(self.range(r, vocab)?.denormalize(x))
    }

    /// Text form: a header line, then `relation<TAB>min<TAB>max` per line,
    /// with an `applied=<bool>` line after the header.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = format!("{HEADER}\napplied={}\n", self.applied);
        for (&r, m) in &self.entries {
            out.push_str(&format!("{}\t{:?}\t{:?}\n", vocab.relation_name(r), m.min, m.max));
        }
        out
    }

    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Data(format!("normalization table line {line}: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad(1, "missing header"));
        }
        let applied = match lines.next() {
            Some("applied=true") => true,
            Some("applied=false") => false,
            _ => return Err(bad(2, "expected applied=<bool>")),
        };
        let mut entries = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(i + 3, "expected 3 tab-separated fields"));
            }
            let r = vocab
                .relation_id(fields[0])
                .ok_or_else(|| bad(i + 3, &format!("unknown relation {}", fields[0])))?;
            let min: f64 = fields[1].parse().map_err(|_| bad(i + 3, "bad min"))?;
            let max: f64 = fields[2].parse().map_err(|_| bad(i + 3, "bad max"))?;
            if !(min <= max) {
                return Err(bad(i + 3, "min > max"));
            }
            entries.insert(r, MinMax { min, max });
        }
        Ok(Self { entries, applied })
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        fs::write(path, self.to_text(vocab)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, vocab)
    }
}

fn normalize_facts(facts: &[HyperFact], table: &NormalizationTable, vocab: &Vocabulary) -> Result<Vec<HyperFact>> {
    let map = |r: RelationId, e: EntityRef| -> Result<EntityRef> {
        match e {
            EntityRef::Numeric(v) => Ok(EntityRef::Numeric(table.normalize(r, v, vocab)?)),
            d => Ok(d),
        }
    };
    facts
        .iter()
        .map(|f| {
            let mut out = f.clone();
            out.triplet.tail = map(f.triplet.relation, f.triplet.tail)?;
            for q in &mut out.qualifiers {
                q.value = map(q.relation, q.value)?;
            }
            Ok(out)
        })
        .collect()
}

/// Maps every numeric value of every split into the table's normalized
/// space and marks the table as applied. Relation statistics in the
/// vocabulary stay in raw units.
pub fn normalize_dataset(dataset: &Dataset, table: &mut NormalizationTable) -> Result<Dataset> {
    let vocab = &dataset.vocab;
    let out = Dataset {
        vocab: vocab.clone(),
        train: normalize_facts(&dataset.train, table, vocab)?,
        valid: normalize_facts(&dataset.valid, table, vocab)?,
        test: normalize_facts(&dataset.test, table, vocab)?,
    };
    table.applied = true;
    Ok(out)
}
