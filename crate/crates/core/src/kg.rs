//! In-memory hyper-relational knowledge graphs with numeric literals.
//!
//! A [`HyperFact`] is a primary triplet plus an ordered list of qualifiers.
//! The list order is kept for reproducible batching, but two facts whose
//! qualifier lists are permutations of each other denote the same fact.
//! Duplicate qualifiers are allowed and counted (multiset semantics).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

/// A discrete entity or a unitless numeric literal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntityRef {
    Discrete(EntityId),
    Numeric(f64),
}

impl EntityRef {
    pub fn is_numeric(&self) -> bool {
        matches!(self, EntityRef::Numeric(_))
    }

    pub fn discrete(&self) -> Option<EntityId> {
        match *self {
            EntityRef::Discrete(id) => Some(id),
            EntityRef::Numeric(_) => None,
        }
    }

    pub fn numeric(&self) -> Option<f64> {
        match *self {
            EntityRef::Numeric(v) => Some(v),
            EntityRef::Discrete(_) => None,
        }
    }

    pub(crate) fn key(&self) -> EntityKey {
        match *self {
            EntityRef::Discrete(id) => EntityKey::Discrete(id),
            // -0.0 and 0.0 are the same literal
            EntityRef::Numeric(v) => EntityKey::Numeric(if v == 0.0 { 0 } else { v.to_bits() }),
        }
    }
}

/// Hashable, totally ordered identity of an [`EntityRef`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) enum EntityKey {
    Discrete(EntityId),
    Numeric(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qualifier {
    pub relation: RelationId,
    pub value: EntityRef,
}

impl Qualifier {
    pub fn new(relation: RelationId, value: EntityRef) -> Self {
        Self { relation, value }
    }

    pub(crate) fn key(&self) -> (RelationId, EntityKey) {
        (self.relation, self.value.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimaryTriplet {
    pub head: EntityRef,
    pub relation: RelationId,
    pub tail: EntityRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperFact {
    pub triplet: PrimaryTriplet,
    pub qualifiers: Vec<Qualifier>,
}

impl HyperFact {
    pub fn new(head: EntityRef, relation: RelationId, tail: EntityRef, qualifiers: Vec<Qualifier>) -> Self {
        Self {
            triplet: PrimaryTriplet { head, relation, tail },
            qualifiers,
        }
    }

    /// Identity of the fact up to qualifier order.
    pub(crate) fn canonical_key(&self) -> FactKey {
        let mut quals: Vec<_> = self.qualifiers.iter().map(Qualifier::key).collect();
        quals.sort_unstable();
        FactKey {
            head: self.triplet.head.key(),
            relation: self.triplet.relation,
            tail: self.triplet.tail.key(),
            qualifiers: quals,
        }
    }

    /// Number of maskable slots: head, relation, tail and both halves of
    /// every qualifier.
    pub fn slot_count(&self) -> usize {
        3 + 2 * self.qualifiers.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) struct FactKey {
    head: EntityKey,
    relation: RelationId,
    tail: EntityKey,
    qualifiers: Vec<(RelationId, EntityKey)>,
}

/// True iff the triplets are equal and the qualifier multisets are equal.
pub fn facts_equal_mod_qualifier_order(a: &HyperFact, b: &HyperFact) -> bool {
    a.qualifiers.len() == b.qualifiers.len() && a.canonical_key() == b.canonical_key()
}

/// Drops later duplicates (up to qualifier order); returns the survivors in
/// input order and the number removed.
pub fn dedup_facts(facts: Vec<HyperFact>) -> (Vec<HyperFact>, usize) {
    let mut seen = HashSet::with_capacity(facts.len());
    let before = facts.len();
    let kept: Vec<_> = facts.into_iter().filter(|f| seen.insert(f.canonical_key())).collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Name/id bijection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn get_or_insert(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    /// Only ever relates discrete entities.
    Discrete,
    /// Carries numeric values at a tail or qualifier-value position.
    Numeric,
}

/// Extrema of a numeric relation's training values (tail and qualifier
/// positions pooled).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationStats {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl RelationStats {
    pub fn is_constant(&self) -> bool {
        self.min == self.max
    }

    /// Pools every numeric value of `facts` per governing relation.
    pub fn collect(facts: &[HyperFact]) -> BTreeMap<RelationId, RelationStats> {
        let mut out: BTreeMap<RelationId, RelationStats> = BTreeMap::new();
        let mut push = |r: RelationId, v: f64| {
            out.entry(r)
                .and_modify(|s| {
                    s.min = s.min.min(v);
                    s.max = s.max.max(v);
                    s.count += 1;
                })
                .or_insert(RelationStats {
                    min: v,
                    max: v,
                    count: 1,
                });
        };
        for f in facts {
            if let EntityRef::Numeric(v) = f.triplet.tail {
                push(f.triplet.relation, v);
            }
            for q in &f.qualifiers {
                if let EntityRef::Numeric(v) = q.value {
                    push(q.relation, v);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    entities: Interner,
    relations: Interner,
    kinds: Vec<RelationKind>,
    stats: BTreeMap<RelationId, RelationStats>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name)
    }

    pub fn entity_names(&self) -> &[String] {
        self.entities.names()
    }

    pub fn relation_names(&self) -> &[String] {
        self.relations.names()
    }

    /// Id of `name`, interning it if new.
    pub fn entity(&mut self, name: &str) -> EntityId {
        self.entities.get_or_insert(name)
    }

    /// Id of `name`, interning it (as a discrete relation) if new.
    pub fn relation(&mut self, name: &str) -> RelationId {
        let id = self.relations.get_or_insert(name);
        if id == self.kinds.len() {
            self.kinds.push(RelationKind::Discrete);
        }
        id
    }

    pub fn mark_numeric(&mut self, r: RelationId) {
        self.kinds[r] = RelationKind::Numeric;
    }

    pub fn kind(&self, r: RelationId) -> RelationKind {
        self.kinds[r]
    }

    pub fn numeric_relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.kinds.len()).filter(|&r| self.kinds[r] == RelationKind::Numeric)
    }

    pub fn stats(&self, r: RelationId) -> Option<&RelationStats> {
        self.stats.get(&r)
    }

    pub fn all_stats(&self) -> &BTreeMap<RelationId, RelationStats> {
        &self.stats
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id).unwrap_or("<unknown>")
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id).unwrap_or("<unknown>")
    }

    /// Marks every relation that carries a numeric value in `facts`.
    pub fn classify(&mut self, facts: &[HyperFact]) {
        for f in facts {
            if f.triplet.tail.is_numeric() && f.triplet.relation < self.kinds.len() {
                self.kinds[f.triplet.relation] = RelationKind::Numeric;
            }
            for q in &f.qualifiers {
                if q.value.is_numeric() && q.relation < self.kinds.len() {
                    self.kinds[q.relation] = RelationKind::Numeric;
                }
            }
        }
    }

    pub(crate) fn set_stats(&mut self, stats: BTreeMap<RelationId, RelationStats>) {
        self.stats = stats;
    }
}

/// Where in a fact something sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    Head,
    Relation,
    Tail,
    QualifierRelation(usize),
    QualifierValue(usize),
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Head => f.write_str("head"),
            Position::Relation => f.write_str("relation"),
            Position::Tail => f.write_str("tail"),
            Position::QualifierRelation(j) => write!(f, "qualifier {j} relation"),
            Position::QualifierValue(j) => write!(f, "qualifier {j} value"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NumericHead,
    EntityOutOfRange { position: Position, id: EntityId },
    RelationOutOfRange { position: Position, id: RelationId },
    NonFinite { position: Position, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NumericHead => f.write_str("numeric entity at head position"),
            Violation::EntityOutOfRange { position, id } => {
                write!(f, "entity id out of range at {position}: {id}")
            }
            Violation::RelationOutOfRange { position, id } => {
                write!(f, "relation id out of range at {position}: {id}")
            }
            Violation::NonFinite { position, value } => {
                write!(f, "non-finite numeric value at {position}: {value}")
            }
        }
    }
}

/// Every invariant `fact` violates against `vocab`; empty means valid.
pub fn validate_fact(fact: &HyperFact, vocab: &Vocabulary) -> Vec<Violation> {
    let mut out = Vec::new();
    let entity = |e: &EntityRef, position: Position, out: &mut Vec<Violation>| match *e {
        EntityRef::Discrete(id) if id >= vocab.num_entities() => {
            out.push(Violation::EntityOutOfRange { position, id })
        }
        EntityRef::Numeric(value) if !value.is_finite() => out.push(Violation::NonFinite { position, value }),
        _ => {}
    };
    let relation = |id: RelationId, position: Position, out: &mut Vec<Violation>| {
        if id >= vocab.num_relations() {
            out.push(Violation::RelationOutOfRange { position, id });
        }
    };

    let t = &fact.triplet;
    if t.head.is_numeric() {
        out.push(Violation::NumericHead);
    }
    entity(&t.head, Position::Head, &mut out);
    relation(t.relation, Position::Relation, &mut out);
    entity(&t.tail, Position::Tail, &mut out);
    for (j, q) in fact.qualifiers.iter().enumerate() {
        relation(q.relation, Position::QualifierRelation(j), &mut out);
        entity(&q.value, Position::QualifierValue(j), &mut out);
    }
    out
}

/// A vocabulary with train/valid/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<HyperFact>,
    pub valid: Vec<HyperFact>,
    pub test: Vec<HyperFact>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl Dataset {
    /// Validates every fact, classifies relations over all splits and
    /// computes relation statistics from the train split only.
    pub fn new(mut vocab: Vocabulary, train: Vec<HyperFact>, valid: Vec<HyperFact>, test: Vec<HyperFact>) -> Result<Self> {
        for (name, split) in [("train", &train), ("valid", &valid), ("test", &test)] {
            for (i, f) in split.iter().enumerate() {
                let violations = validate_fact(f, &vocab);
                if let Some(v) = violations.first() {
                    return Err(Error::Data(format!("{name} fact {i}: {v}")));
                }
            }
        }
        vocab.classify(&train);
        vocab.classify(&valid);
        vocab.classify(&test);
        vocab.set_stats(RelationStats::collect(&train));
        Ok(Self {
            vocab,
            train,
            valid,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[HyperFact] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &HyperFact> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Counts in the layout of a dataset-statistics table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub discrete_entities: usize,
    pub numeric_entities: usize,
    pub discrete_relations: usize,
    pub numeric_relations: usize,
    pub facts: usize,
    pub facts_with_qualifiers: usize,
    pub triplets_discrete: usize,
    pub triplets_numeric: usize,
    pub qualifiers_discrete: usize,
    pub qualifiers_numeric: usize,
}

impl DatasetStats {
    /// Numeric entities are counted as distinct (relation, value) pairs.
    pub fn compute(ds: &Dataset) -> Self {
        let mut s = DatasetStats {
            discrete_entities: ds.vocab.num_entities(),
            ..Default::default()
        };
        s.numeric_relations = ds.vocab.numeric_relations().count();
        s.discrete_relations = ds.vocab.num_relations() - s.numeric_relations;
        let mut numeric: HashSet<(RelationId, EntityKey)> = HashSet::new();
        for f in ds.all_facts() {
            s.facts += 1;
            if !f.qualifiers.is_empty() {
                s.facts_with_qualifiers += 1;
            }
            if f.triplet.tail.is_numeric() {
                s.triplets_numeric += 1;
                numeric.insert((f.triplet.relation, f.triplet.tail.key()));
            } else {
                s.triplets_discrete += 1;
            }
            for q in &f.qualifiers {
                if q.value.is_numeric() {
                    s.qualifiers_numeric += 1;
                    numeric.insert(q.key());
                } else {
                    s.qualifiers_discrete += 1;
                }
            }
        }
        s.numeric_entities = numeric.len();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(entities: usize, relations: usize) -> Vocabulary {
        let mut v = Vocabulary::new();
        for i in 0..entities {
            v.entity(&format!("e{i}"));
        }
        for i in 0..relations {
            v.relation(&format!("r{i}"));
        }
        v
    }

    fn d(id: usize) -> EntityRef {
        EntityRef::Discrete(id)
    }

    #[test]
    fn numeric_head_is_a_violation() {
        let f = HyperFact::new(EntityRef::Numeric(1.0), 0, d(1), vec![]);
        let v = validate_fact(&f, &vocab(3, 2));
        assert_eq!(v, vec![Violation::NumericHead]);
        assert_eq!(v[0].to_string(), "numeric entity at head position");
    }

    #[test]
    fn fact_without_qualifiers_is_valid() {
        let f = HyperFact::new(d(0), 1, d(2), vec![]);
        assert!(validate_fact(&f, &vocab(3, 2)).is_empty());
    }

    #[test]
    fn qualifier_relation_at_vocab_size_is_out_of_range() {
        let f = HyperFact::new(d(0), 1, d(2), vec![Qualifier::new(2, d(1))]);
        let v = validate_fact(&f, &vocab(3, 2));
        assert_eq!(
            v,
            vec![Violation::RelationOutOfRange {
                position: Position::QualifierRelation(0),
                id: 2
            }]
        );
        assert!(v[0].to_string().starts_with("relation id out of range"));
    }

    #[test]
    fn all_violations_are_reported() {
        let f = HyperFact::new(
            EntityRef::Numeric(f64::NAN),
            5,
            d(9),
            vec![Qualifier::new(0, EntityRef::Numeric(f64::INFINITY))],
        );
        assert_eq!(validate_fact(&f, &vocab(3, 2)).len(), 5);
    }

    #[test]
    fn qualifier_permutation_is_equal() {
        let q1 = Qualifier::new(0, d(1));
        let q2 = Qualifier::new(1, EntityRef::Numeric(2.5));
        let a = HyperFact::new(d(0), 0, d(2), vec![q1, q2]);
        let b = HyperFact::new(d(0), 0, d(2), vec![q2, q1]);
        assert!(facts_equal_mod_qualifier_order(&a, &b));
        assert!(facts_equal_mod_qualifier_order(&a, &a));
    }

    #[test]
    fn qualifier_multiplicity_matters() {
        let q1 = Qualifier::new(0, d(1));
        let a = HyperFact::new(d(0), 0, d(2), vec![q1]);
        let b = HyperFact::new(d(0), 0, d(2), vec![q1, q1]);
        assert!(!facts_equal_mod_qualifier_order(&a, &b));
    }

    #[test]
    fn signed_zero_is_one_literal() {
        let a = HyperFact::new(d(0), 0, EntityRef::Numeric(0.0), vec![]);
        let b = HyperFact::new(d(0), 0, EntityRef::Numeric(-0.0), vec![]);
        assert!(facts_equal_mod_qualifier_order(&a, &b));
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let q1 = Qualifier::new(0, d(1));
        let q2 = Qualifier::new(1, d(2));
        let facts = vec![
            HyperFact::new(d(0), 0, d(2), vec![q1, q2]),
            HyperFact::new(d(1), 0, d(2), vec![]),
            HyperFact::new(d(0), 0, d(2), vec![q2, q1]),
        ];
        let (kept, removed) = dedup_facts(facts.clone());
        assert_eq!(removed, 1);
        assert_eq!(kept, facts[..2].to_vec());
    }

    #[test]
    fn stats_pool_tail_and_qualifier_values() {
        let mut v = vocab(2, 2);
        let facts = vec![
            HyperFact::new(d(0), 0, EntityRef::Numeric(10.0), vec![]),
            HyperFact::new(d(1), 1, d(0), vec![Qualifier::new(0, EntityRef::Numeric(30.0))]),
            HyperFact::new(d(1), 0, EntityRef::Numeric(20.0), vec![]),
        ];
        let ds = Dataset::new(v.clone(), facts.clone(), vec![], vec![]).unwrap();
        let s = ds.vocab.stats(0).unwrap();
        assert_eq!((s.min, s.max, s.count), (10.0, 30.0, 3));
        assert_eq!(ds.vocab.kind(0), RelationKind::Numeric);
        assert_eq!(ds.vocab.kind(1), RelationKind::Discrete);
        v.classify(&facts);
        assert_eq!(v.numeric_relations().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn dataset_rejects_invalid_facts() {
        let bad = HyperFact::new(d(7), 0, d(0), vec![]);
        assert!(Dataset::new(vocab(2, 1), vec![], vec![], vec![bad]).is_err());
    }
}
