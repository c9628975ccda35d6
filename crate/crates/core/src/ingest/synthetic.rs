//! Deterministic synthetic graphs with learnable structure.
//!
//! Discrete facts follow `tail = (h·m_r + c_r + Σ s_q·v_q) mod |V_D|`, so
//! the tail is a function of head, relation and qualifier values. Numeric
//! facts `(h, n_i, value)` carry a time qualifier and follow a planted law
//! `value = a·latent(h) + b·time + noise·N(0,1)`, where `latent(h) ~ U(0,1)`
//! is shared by every law and `time` counts years since `time_start`.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::split_dataset;
use crate::kg::{Dataset, EntityRef, HyperFact, Qualifier, Vocabulary};

/// Name of the numeric relation used as the time qualifier.
pub const POINT_IN_TIME: &str = "point_in_time";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedLaw {
    pub a: f64,
    pub b: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub discrete_relations: usize,
    /// Includes the time relation, so the number of planted laws is one less.
    pub numeric_relations: usize,
    pub facts: usize,
    pub max_qualifiers: usize,
    /// Probability that a generated fact has a numeric tail.
    pub numeric_fraction: f64,
    pub time_start: i32,
    pub time_span: u32,
    /// One law per non-time numeric relation; empty means defaults.
    pub laws: Vec<PlantedLaw>,
    pub noise_scale: f64,
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            entities: 50,
            discrete_relations: 7,
            numeric_relations: 3,
            facts: 500,
            max_qualifiers: 2,
            numeric_fraction: 0.4,
            time_start: 2000,
            time_span: 20,
            laws: Vec::new(),
            noise_scale: 0.0,
            split: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.entities == 0 || self.discrete_relations == 0 || self.facts == 0 {
            return bad("entity, discrete relation and fact counts must be positive".into());
        }
        if self.numeric_relations == 1 {
            return bad("numeric_relations counts the time relation and must be 0 or at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.numeric_fraction) {
            return bad(format!("numeric_fraction {} outside [0, 1]", self.numeric_fraction));
        }
        if self.numeric_relations == 0 && self.numeric_fraction > 0.0 {
            return bad("numeric_fraction > 0 needs numeric relations".into());
        }
        if self.time_span == 0 {
            return bad("time_span must be positive".into());
        }
        if !(self.noise_scale >= 0.0) || self.laws.iter().any(|l| !(l.noise_scale >= 0.0)) {
            return bad("noise scales must be >= 0".into());
        }
        if !self.laws.is_empty() && self.laws.len() + 1 != self.numeric_relations {
            return bad(format!(
                "{} laws given for {} law relations",
                self.laws.len(),
                self.numeric_relations.saturating_sub(1)
            ));
        }
        Ok(())
    }

    /// The laws in effect: explicit ones, or `a = 1 + i/2`,
    /// `b = ±0.05·(1 + i)` with alternating sign and the spec's noise scale.
    pub fn effective_laws(&self) -> Vec<PlantedLaw> {
        if !self.laws.is_empty() {
            return self.laws.clone();
        }
        (0..self.numeric_relations.saturating_sub(1))
            .map(|i| PlantedLaw {
                a: 1.0 + 0.5 * i as f64,
                b: if i % 2 == 0 { 1.0 } else { -1.0 } * 0.05 * (1 + i) as f64,
                noise_scale: self.noise_scale,
            })
            .collect()
    }

    /// Per-entity latent values, the first draws of the seeded stream.
    pub fn latents(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.entities).map(|_| rng.random::<f64>()).collect()
    }

    /// Noise-free law value for entity latent `latent` at `year`.
    pub fn law_value(&self, law: &PlantedLaw, latent: f64, year: f64) -> f64 {
        law.a * latent + law.b * (year - self.time_start as f64)
    }
}

struct DiscreteRule {
    mult: usize,
    offset: usize,
    qual_mult: usize,
}

/// Generates `spec.facts` distinct facts and splits them by `spec.split`.
///
/// Entities are named `e0..`, discrete relations `r0..`, numeric relations
/// `point_in_time, n1..`; ids follow that order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let latents = spec.latents();
    // continue the stream that produced the latents
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..spec.entities {
        let _: f64 = rng.random();
    }

    let mut vocab = Vocabulary::new();
    for i in 0..spec.entities {
        vocab.entity(&format!("e{i}"));
    }
    for i in 0..spec.discrete_relations {
        vocab.relation(&format!("r{i}"));
    }
    let mut numeric = Vec::new();
    if spec.numeric_relations > 0 {
        let t = vocab.relation(POINT_IN_TIME);
        vocab.mark_numeric(t);
        numeric.push(t);
        for i in 1..spec.numeric_relations {
            let r = vocab.relation(&format!("n{i}"));
            vocab.mark_numeric(r);
            numeric.push(r);
        }
    }

    let n = spec.entities;
    let coprime: Vec<usize> = (1..n.max(2)).filter(|&m| gcd(m, n) == 1).collect();
    let rules: Vec<DiscreteRule> = (0..spec.discrete_relations)
        .map(|_| DiscreteRule {
            mult: coprime[rng.random_range(0..coprime.len())],
            offset: rng.random_range(0..n),
            qual_mult: coprime[rng.random_range(0..coprime.len())],
        })
        .collect();
    let laws = spec.effective_laws();
    let max_q = spec.max_qualifiers.min(spec.discrete_relations);

    let mut seen = HashSet::with_capacity(spec.facts);
    let mut facts = Vec::with_capacity(spec.facts);
    let max_attempts = 1000 * spec.facts;
    let mut attempts = 0;
    while facts.len() < spec.facts {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "synthetic spec admits fewer than {} distinct facts (found {})",
                spec.facts,
                facts.len()
            )));
        }
        let h = rng.random_range(0..n);
        let fact = if !laws.is_empty() && rng.random::<f64>() < spec.numeric_fraction {
            let i = rng.random_range(0..laws.len());
            let year = (spec.time_start + rng.random_range(0..spec.time_span) as i32) as f64;
            let noise: f64 = rng.sample(StandardNormal);
            let value = spec.law_value(&laws[i], latents[h], year) + laws[i].noise_scale * noise;
            HyperFact::new(
                EntityRef::Discrete(h),
                numeric[i + 1],
                EntityRef::Numeric(value),
                vec![Qualifier::new(numeric[0], EntityRef::Numeric(year))],
            )
        } else {
            let r = rng.random_range(0..spec.discrete_relations);
            let k = rng.random_range(0..=max_q);
            let qualifiers: Vec<Qualifier> = sample(&mut rng, spec.discrete_relations, k)
                .into_iter()
                .map(|q| Qualifier::new(q, EntityRef::Discrete(rng.random_range(0..n))))
                .collect();
            let mut t = h * rules[r].mult + rules[r].offset;
            for q in &qualifiers {
                t += rules[q.relation].qual_mult * q.value.discrete().unwrap();
            }
            HyperFact::new(EntityRef::Discrete(h), r, EntityRef::Discrete(t % n), qualifiers)
        };
        if seen.insert(fact.canonical_key()) {
            facts.push(fact);
        }
    }

    let (train, valid, test) = split_dataset(facts, spec.split, spec.seed)?;
    Dataset::new(vocab, train, valid, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::write_facts;
    use crate::kg::validate_fact;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            noise_scale: noise,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_follows_the_laws_exactly() {
        let s = spec(0.0);
        let ds = generate_synthetic(&s).unwrap();
        let latents = s.latents();
        let laws = s.effective_laws();
        let mut checked = 0;
        for f in ds.all_facts() {
            let Some(v) = f.triplet.tail.numeric() else { continue };
            let law = &laws[f.triplet.relation - s.discrete_relations - 1];
            let year = f.qualifiers[0].value.numeric().unwrap();
            let h = f.triplet.head.discrete().unwrap();
            assert_eq!(v, s.law_value(law, latents[h], year));
            checked += 1;
        }
        assert!(checked > 100, "{checked}");
    }

    #[test]
    fn discrete_tails_follow_the_rule() {
        let ds = generate_synthetic(&spec(0.0)).unwrap();
        // the same (h, r, qualifiers) never maps to two tails
        let mut map = std::collections::HashMap::new();
        for f in ds.all_facts().filter(|f| !f.triplet.tail.is_numeric()) {
            let mut q: Vec<_> = f.qualifiers.iter().map(|q| (q.relation, q.value.discrete())).collect();
            q.sort();
            let key = (f.triplet.head.discrete(), f.triplet.relation, q);
            let t = f.triplet.tail.discrete().unwrap();
            assert_eq!(*map.entry(key).or_insert(t), t);
        }
    }

    #[test]
    fn exact_size_valid_and_deterministic() {
        let s = spec(0.01);
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a.train.len() + a.valid.len() + a.test.len(), 500);
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (400, 50, 50));
        assert_eq!(a.vocab.num_entities(), 50);
        assert_eq!(a.vocab.num_relations(), 10);
        assert_eq!(a.vocab.numeric_relations().count(), 3);
        for f in a.all_facts() {
            assert!(validate_fact(f, &a.vocab).is_empty());
        }
        assert_eq!(write_facts(&a.train, &a.vocab), write_facts(&b.train, &b.vocab));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(0.0);
        s.noise_scale = -1.0;
        assert!(generate_synthetic(&s).is_err());
        let s = SyntheticSpec {
            entities: 2,
            discrete_relations: 1,
            max_qualifiers: 0,
            numeric_fraction: 0.0,
            facts: 10,
            ..Default::default()
        };
        // only 2 heads x 1 relation distinct facts exist
        assert!(generate_synthetic(&s).is_err());
    }
}
