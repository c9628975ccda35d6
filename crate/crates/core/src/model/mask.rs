use crate::error::{Error, Result};
use crate::kg::{EntityId, EntityRef, HyperFact, Position, RelationId};

/// Which head reads out a masked slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    DiscreteEntity,
    Relation,
    Numeric,
}

/// The one slot of a fact replaced by a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskSpec {
    pub slot: Position,
    pub kind: SlotKind,
}

/// What was at the masked slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Entity(EntityId),
    Relation(RelationId),
    /// A value together with the relation that governs it.
    Numeric { relation: RelationId, value: f64 },
}

impl MaskSpec {
    /// Masks `slot` of `fact`; the kind follows from what is stored there.
    pub fn new(fact: &HyperFact, slot: Position) -> Result<Self> {
        let kind = match slot {
            Position::Relation | Position::QualifierRelation(_) => SlotKind::Relation,
            _ => match entity_at(fact, slot)? {
                EntityRef::Discrete(_) => SlotKind::DiscreteEntity,
                EntityRef::Numeric(_) => SlotKind::Numeric,
            },
        };
        if let Position::QualifierRelation(j) = slot {
            if j >= fact.qualifiers.len() {
                return Err(Error::SlotAbsent(slot.to_string()));
            }
        }
        Ok(Self { slot, kind })
    }

    /// Every maskable slot of `fact`: head, relation, tail, then each
    /// qualifier's relation and value.
    pub fn all(fact: &HyperFact) -> Vec<MaskSpec> {
        let mut slots = vec![Position::Head, Position::Relation, Position::Tail];
        for j in 0..fact.qualifiers.len() {
            slots.push(Position::QualifierRelation(j));
            slots.push(Position::QualifierValue(j));
        }
        slots
            .into_iter()
            .map(|s| MaskSpec::new(fact, s).expect("slot exists"))
            .collect()
    }

    pub fn target(&self, fact: &HyperFact) -> Result<Target> {
        Ok(match self.slot {
            Position::Relation => Target::Relation(fact.triplet.relation),
            Position::QualifierRelation(j) => Target::Relation(qualifier(fact, j, self.slot)?.relation),
            slot => match entity_at(fact, slot)? {
                EntityRef::Discrete(e) => Target::Entity(e),
                EntityRef::Numeric(value) => Target::Numeric {
                    relation: governing_relation(fact, slot)?,
                    value,
                },
            },
        })
    }

    /// True when the slot lies in the primary triplet.
    pub fn in_triplet(&self) -> bool {
        matches!(self.slot, Position::Head | Position::Relation | Position::Tail)
    }
}

fn qualifier(fact: &HyperFact, j: usize, slot: Position) -> Result<&crate::kg::Qualifier> {
    fact.qualifiers.get(j).ok_or_else(|| Error::SlotAbsent(slot.to_string()))
}

fn entity_at(fact: &HyperFact, slot: Position) -> Result<EntityRef> {
    match slot {
        Position::Head => Ok(fact.triplet.head),
        Position::Tail => Ok(fact.triplet.tail),
        Position::QualifierValue(j) => Ok(qualifier(fact, j, slot)?.value),
        _ => Err(Error::SlotAbsent(format!("{slot} holds no entity"))),
    }
}

fn governing_relation(fact: &HyperFact, slot: Position) -> Result<RelationId> {
    match slot {
        Position::Tail => Ok(fact.triplet.relation),
        Position::QualifierValue(j) => Ok(qualifier(fact, j, slot)?.relation),
        _ => Err(Error::SlotAbsent(format!("{slot} has no governing relation"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Qualifier;

    fn fact() -> HyperFact {
        HyperFact::new(
            EntityRef::Discrete(0),
            1,
            EntityRef::Numeric(0.25),
            vec![
                Qualifier::new(2, EntityRef::Discrete(3)),
                Qualifier::new(4, EntityRef::Numeric(0.5)),
            ],
        )
    }

    #[test]
    fn kinds_follow_stored_values() {
        let f = fact();
        let kinds: Vec<_> = MaskSpec::all(&f).iter().map(|m| m.kind).collect();
        use SlotKind::*;
        assert_eq!(kinds, [DiscreteEntity, Relation, Numeric, Relation, DiscreteEntity, Relation, Numeric]);
    }

    #[test]
    fn targets_round_trip() {
        let f = fact();
        let t: Vec<_> = MaskSpec::all(&f).iter().map(|m| m.target(&f).unwrap()).collect();
        assert_eq!(t[0], Target::Entity(0));
        assert_eq!(t[1], Target::Relation(1));
        assert_eq!(t[2], Target::Numeric { relation: 1, value: 0.25 });
        assert_eq!(t[5], Target::Relation(4));
        assert_eq!(t[6], Target::Numeric { relation: 4, value: 0.5 });
    }

    #[test]
    fn absent_slot() {
        let f = fact();
        assert!(matches!(MaskSpec::new(&f, Position::QualifierValue(2)), Err(Error::SlotAbsent(_))));
        assert!(matches!(MaskSpec::new(&f, Position::QualifierRelation(2)), Err(Error::SlotAbsent(_))));
    }
}
