use std::collections::HashSet;

use hynt::eval::{rank, RankMode};
use hynt::ingest::{
    compute_normalization, largest_remainder, normalize_dataset, parse_facts, split_dataset, write_facts, MinMax, VocabMode,
};
use hynt::kg::{Dataset, facts_equal_mod_qualifier_order, EntityRef, HyperFact, Position, Qualifier, Vocabulary};
use hynt::model::{HyntConfig, MaskSpec, Model, SlotOutput};
use proptest::prelude::*;

const ENTITIES: usize = 6;
const RELATIONS: usize = 5;
/// Relations at or above this id carry numeric values.
const FIRST_NUMERIC: usize = 3;

fn value(relation: usize) -> BoxedStrategy<EntityRef> {
    if relation >= FIRST_NUMERIC {
        (-5.0f64..5.0).prop_map(EntityRef::Numeric).boxed()
    } else {
        (0..ENTITIES).prop_map(EntityRef::Discrete).boxed()
    }
}

fn qualifier() -> impl Strategy<Value = Qualifier> {
    (0..RELATIONS).prop_flat_map(|r| value(r).prop_map(move |v| Qualifier::new(r, v)))
}

fn fact(max_qualifiers: usize) -> impl Strategy<Value = HyperFact> {
    (0..ENTITIES, 0..RELATIONS)
        .prop_flat_map(move |(h, r)| {
            (
                Just(h),
                Just(r),
                value(r),
                prop::collection::vec(qualifier(), 0..=max_qualifiers),
            )
        })
        .prop_map(|(h, r, t, q)| HyperFact::new(EntityRef::Discrete(h), r, t, q))
}

fn vocab() -> Vocabulary {
    let mut v = Vocabulary::new();
    for i in 0..ENTITIES {
        v.entity(&format!("e{i}"));
    }
    for r in 0..RELATIONS {
        let id = v.relation(&format!("r{r}"));
        if r >= FIRST_NUMERIC {
            v.mark_numeric(id);
        }
    }
    v
}

fn model() -> Model<f64> {
    let mut c = HyntConfig::with_dim(8);
    c.context_heads = 2;
    c.prediction_heads = 2;
    c.context_ffn = 16;
    c.prediction_ffn = 16;
    Model::new(c, ENTITIES, RELATIONS, 3).unwrap()
}

fn max_diff(a: &SlotOutput, b: &SlotOutput) -> f64 {
    match (a, b) {
        (SlotOutput::Entity(x), SlotOutput::Entity(y)) | (SlotOutput::Relation(x), SlotOutput::Relation(y)) => {
            x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        }
        (SlotOutput::Numeric(x), SlotOutput::Numeric(y)) => (x - y).abs(),
        _ => f64::INFINITY,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qualifier_order_equality_is_an_equivalence(
        a in fact(3),
        perm_seed in any::<u64>(),
        other in fact(3),
    ) {
        let mut b = a.clone();
        let n = b.qualifiers.len();
        if n > 1 {
            b.qualifiers.rotate_left((perm_seed as usize) % n);
        }
        let mut c = b.clone();
        c.qualifiers.reverse();
        prop_assert!(facts_equal_mod_qualifier_order(&a, &a));
        prop_assert!(facts_equal_mod_qualifier_order(&a, &b));
        prop_assert!(facts_equal_mod_qualifier_order(&b, &a));
        prop_assert!(facts_equal_mod_qualifier_order(&b, &c));
        prop_assert!(facts_equal_mod_qualifier_order(&a, &c));
        prop_assert_eq!(
            facts_equal_mod_qualifier_order(&a, &other),
            facts_equal_mod_qualifier_order(&other, &a)
        );
        if facts_equal_mod_qualifier_order(&a, &other) {
            prop_assert!(facts_equal_mod_qualifier_order(&c, &other));
        }
    }

    #[test]
    fn written_facts_parse_back_identically(facts in prop::collection::vec(fact(3), 1..20)) {
        let v = vocab();
        let text = write_facts(&facts, &v);
        let back = parse_facts(&text, VocabMode::Frozen(&v)).unwrap();
        prop_assert_eq!(back, facts);
    }

    #[test]
    fn normalization_round_trips(lo in -1e6f64..1e6, width in 1e-3f64..1e6, x in -2.0f64..3.0) {
        let m = MinMax { min: lo, max: lo + width };
        let v = m.denormalize(x);
        prop_assert!((m.denormalize(m.normalize(v)) - v).abs() <= 1e-12 * v.abs().max(1.0) * 1e3);
        prop_assert!((m.normalize(m.denormalize(x)) - x).abs() <= 1e-9);
    }

    #[test]
    fn perturbing_test_values_leaves_train_normalization_alone(
        train in prop::collection::vec(fact(2), 1..15),
        test in prop::collection::vec(fact(2), 1..15),
        shift in -100.0f64..100.0,
    ) {
        let mut perturbed = test.clone();
        for f in &mut perturbed {
            if let EntityRef::Numeric(v) = &mut f.triplet.tail {
                *v += shift;
            }
        }
        let run = |test: Vec<HyperFact>| {
            let ds = Dataset::new(vocab(), train.clone(), vec![], test).unwrap();
            let mut table = compute_normalization(&ds.train);
            let normalized = normalize_dataset(&ds, &mut table);
            (table, normalized.map(|d| d.train))
        };
        let (t1, n1) = run(test);
        let (t2, n2) = run(perturbed);
        prop_assert_eq!(t1.entries().collect::<Vec<_>>(), t2.entries().collect::<Vec<_>>());
        // test relations unseen in train fail either way
        if let (Ok(a), Ok(b)) = (n1, n2) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn splits_partition_and_repeat(n in 3usize..60, seed in any::<u64>(), a in 0.1f64..0.8) {
        let ratios = [a, (1.0 - a) / 2.0, (1.0 - a) / 2.0];
        let sizes = largest_remainder(n, ratios);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (s, r) in sizes.iter().zip(ratios) {
            prop_assert!((*s as f64 - r * n as f64).abs() < 1.0 + 1e-9);
        }
        let facts: Vec<HyperFact> = (0..n)
            .map(|i| HyperFact::new(EntityRef::Discrete(i % ENTITIES), i % 3, EntityRef::Discrete(i), vec![]))
            .collect();
        let first = split_dataset(facts.clone(), ratios, seed).unwrap();
        let second = split_dataset(facts.clone(), ratios, seed).unwrap();
        prop_assert_eq!(&first, &second);
        let mut all: Vec<_> = first.0.iter().chain(&first.1).chain(&first.2).cloned().collect();
        all.sort_by_key(|f| f.triplet.tail.discrete());
        prop_assert_eq!(all, facts);
    }

    #[test]
    fn rank_bounds_and_filtering(
        scores in prop::collection::vec(-3i32..3, 1..30),
        gold_pick in any::<prop::sample::Index>(),
        known in prop::collection::hash_set(0usize..30, 0..10),
        offset in -10.0f64..10.0,
    ) {
        let s: Vec<f64> = scores.iter().map(|&x| x as f64 * 0.5).collect();
        let gold = gold_pick.index(s.len());
        let raw = rank(&s, gold, &known, RankMode::Raw).unwrap();
        let filtered = rank(&s, gold, &known, RankMode::Filtered).unwrap();
        prop_assert!(raw >= 1.0 && raw <= s.len() as f64);
        prop_assert!(filtered >= 1.0 && filtered <= raw);
        // a common shift of all scores changes nothing
        let shifted: Vec<f64> = s.iter().map(|x| x + offset).collect();
        let none = HashSet::new();
        prop_assert_eq!(rank(&shifted, gold, &none, RankMode::Raw).unwrap(), rank(&s, gold, &none, RankMode::Raw).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_does_not_leak_into_shorter_sequences(short in fact(1), long in fact(4)) {
        let m = model();
        let slot_short = MaskSpec::new(&short, Position::Tail).unwrap();
        let slot_long = MaskSpec::new(&long, Position::Head).unwrap();
        let alone = m.predict(&[(&short, slot_short)]).unwrap();
        let batched = m.predict(&[(&short, slot_short), (&long, slot_long)]).unwrap();
        prop_assert!(max_diff(&alone[0], &batched[0]) <= 1e-12);
    }

    #[test]
    fn permuting_qualifiers_permutes_outputs(f in fact(4), rot in 1usize..4) {
        let m = model();
        let k = f.qualifiers.len();
        let mut g = f.clone();
        if k > 1 {
            g.qualifiers.rotate_left(rot % k);
        }
        // qualifier j of f sits at position (j + k - rot % k) % k of g
        let moved = |j: usize| if k > 1 { (j + k - rot % k) % k } else { j };
        for mask in MaskSpec::all(&f) {
            let slot = match mask.slot {
                Position::QualifierRelation(j) => Position::QualifierRelation(moved(j)),
                Position::QualifierValue(j) => Position::QualifierValue(moved(j)),
                s => s,
            };
            let a = m.forward_fact(&f, mask.slot).unwrap();
            let b = m.forward_fact(&g, slot).unwrap();
            prop_assert!(max_diff(&a, &b) <= 1e-9, "{:?}", mask.slot);
        }
    }

    #[test]
    fn numeric_embedding_is_affine(r in FIRST_NUMERIC..RELATIONS, v1 in -10.0f64..10.0, v2 in -10.0f64..10.0, a in 0.0f64..1.0) {
        let m = model();
        let e = |v: f64| m.embed_entity(EntityRef::Numeric(v), Some(r)).unwrap();
        let mixed = e(a * v1 + (1.0 - a) * v2);
        let (e1, e2) = (e(v1), e(v2));
        for i in 0..mixed.len() {
            prop_assert!((mixed[i] - (a * e1[i] + (1.0 - a) * e2[i])).abs() <= 1e-9);
        }
    }
}
