use std::collections::{HashMap, HashSet};

use crate::kg::{EntityRef, FactKey, HyperFact, Position};
use crate::model::{MaskSpec, SlotKind, Target};

const BLANK: usize = usize::MAX;

/// Known answers per query: the identity of a fact with one slot blanked,
/// mapped to every entity or relation that completes it to a known fact.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    answers: HashMap<FactKey, HashSet<usize>>,
}

/// The fact with `slot` replaced by a placeholder, up to qualifier order.
fn blanked(fact: &HyperFact, slot: Position) -> FactKey {
    let mut f = fact.clone();
    match slot {
        Position::Head => f.triplet.head = EntityRef::Discrete(BLANK),
        Position::Relation => f.triplet.relation = BLANK,
        Position::Tail => f.triplet.tail = EntityRef::Discrete(BLANK),
        Position::QualifierRelation(j) => f.qualifiers[j].relation = BLANK,
        Position::QualifierValue(j) => f.qualifiers[j].value = EntityRef::Discrete(BLANK),
    }
    f.canonical_key()
}

impl FilterIndex {
    /// Indexes every discrete slot of `facts`.
    pub fn build<'a>(facts: impl IntoIterator<Item = &'a HyperFact>) -> Self {
        let mut answers: HashMap<FactKey, HashSet<usize>> = HashMap::new();
        for f in facts {
            for mask in MaskSpec::all(f) {
                let id = match mask.target(f).expect("slot exists") {
                    Target::Entity(e) => e,
                    Target::Relation(r) => r,
                    Target::Numeric { .. } => continue,
                };
                answers.entry(blanked(f, mask.slot)).or_default().insert(id);
            }
        }
        Self { answers }
    }

    /// Known answers for masking `mask.slot` of `fact` (includes the gold
    /// when the fact itself was indexed).
    pub fn known(&self, fact: &HyperFact, mask: &MaskSpec) -> Option<&HashSet<usize>> {
        if mask.kind == SlotKind::Numeric {
            return None;
        }
        self.answers.get(&blanked(fact, mask.slot))
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}
