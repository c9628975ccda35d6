//! Whitespace-separated fact files.
//!
//! One fact per line: `head relation tail [qual_relation qual_value]...`.
//! Tokens starting with `#` are numeric literals, either a real number
//! (`#80`, `#1988.79`) or a `#YYYY-MM-DD` date converted with
//! [`date_to_real`](super::date_to_real). Blank lines are skipped.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, LineError, Result};
use crate::ingest::dates::parse_date;
use crate::kg::{Dataset, EntityRef, HyperFact, Position, Qualifier, Vocabulary};

pub enum VocabMode<'a> {
    /// Unknown names are added to the vocabulary.
    Build(&'a mut Vocabulary),
    /// Unknown names are errors.
    Frozen(&'a Vocabulary),
}

enum Token<'a> {
    Name(&'a str),
    Number(f64),
}

/// Value of a `#`-prefixed literal (without the sigil).
pub fn parse_numeric(literal: &str) -> std::result::Result<f64, String> {
    if let Some(date) = parse_date(literal) {
        return date.map_err(|e| e.to_string());
    }
    match literal.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("non-finite numeric literal #{literal} ({v})")),
        Err(_) => Err(format!("bad numeric literal #{literal}")),
    }
}

fn token(raw: &str) -> std::result::Result<Token<'_>, String> {
    match raw.strip_prefix('#') {
        Some(lit) => parse_numeric(lit).map(Token::Number),
        None => Ok(Token::Name(raw)),
    }
}

fn check_arity(n: usize) -> std::result::Result<(), String> {
    if n < 3 || (n - 3) % 2 != 0 {
        return Err(format!("expected 3 + 2k tokens, found {n}"));
    }
    Ok(())
}

struct Resolver<'m, 'v> {
    mode: &'m mut VocabMode<'v>,
}

impl Resolver<'_, '_> {
    fn entity(&mut self, t: &Token<'_>) -> std::result::Result<EntityRef, String> {
        match *t {
            Token::Number(v) => Ok(EntityRef::Numeric(v)),
            Token::Name(name) => match self.mode {
                VocabMode::Build(v) => Ok(EntityRef::Discrete(v.entity(name))),
                VocabMode::Frozen(v) => v
                    .entity_id(name)
                    .map(EntityRef::Discrete)
                    .ok_or_else(|| format!("unknown entity {name}")),
            },
        }
    }

    fn relation(&mut self, t: &Token<'_>, numeric_value: bool) -> std::result::Result<usize, String> {
        let name = match *t {
            Token::Name(name) => name,
            Token::Number(v) => return Err(format!("numeric literal {v} in relation position")),
        };
        match self.mode {
            VocabMode::Build(v) => {
                let r = v.relation(name);
                if numeric_value {
                    v.mark_numeric(r);
                }
                Ok(r)
            }
            VocabMode::Frozen(v) => v.relation_id(name).ok_or_else(|| format!("unknown relation {name}")),
        }
    }
}

fn parse_line(line: &str, mode: &mut VocabMode<'_>) -> std::result::Result<HyperFact, String> {
    let raw: Vec<&str> = line.split_whitespace().collect();
    check_arity(raw.len())?;
    let tokens = raw.iter().map(|t| token(t)).collect::<std::result::Result<Vec<_>, _>>()?;
    if matches!(tokens[0], Token::Number(_)) {
        return Err("numeric entity at head position".into());
    }
    // relation slots must be names; checked before anything is interned
    for i in std::iter::once(1).chain((3..tokens.len()).step_by(2)) {
        if let Token::Number(v) = tokens[i] {
            return Err(format!("numeric literal {v} in relation position"));
        }
    }
    let mut r = Resolver { mode };
    let head = r.entity(&tokens[0])?;
    let tail_numeric = matches!(tokens[2], Token::Number(_));
    let relation = r.relation(&tokens[1], tail_numeric)?;
    let tail = r.entity(&tokens[2])?;
    let mut qualifiers = Vec::with_capacity((tokens.len() - 3) / 2);
    for pair in tokens[3..].chunks_exact(2) {
        let numeric = matches!(pair[1], Token::Number(_));
        let q = r.relation(&pair[0], numeric)?;
        let v = r.entity(&pair[1])?;
        qualifiers.push(Qualifier::new(q, v));
    }
    Ok(HyperFact::new(head, relation, tail, qualifiers))
}

/// Parses fact-file text. Every malformed line is reported; lines are
/// numbered from 1.
pub fn parse_facts(text: &str, mut mode: VocabMode<'_>) -> std::result::Result<Vec<HyperFact>, Vec<LineError>> {
    let mut facts = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, &mut mode) {
            Ok(f) => facts.push(f),
            Err(message) => errors.push(LineError { line: i + 1, message }),
        }
    }
    if errors.is_empty() {
        Ok(facts)
    } else {
        Err(errors)
    }
}

pub fn parse_fact_file(path: &Path, mode: VocabMode<'_>) -> Result<Vec<HyperFact>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_facts(&text, mode).map_err(|errors| Error::Parse {
        path: path.to_path_buf(),
        errors,
    })
}

fn format_entity(e: &EntityRef, vocab: &Vocabulary) -> String {
    match *e {
        EntityRef::Discrete(id) => vocab.entity_name(id).to_string(),
        // shortest representation that parses back to the same bits
        EntityRef::Numeric(v) => format!("#{v:?}"),
    }
}

pub fn format_fact(fact: &HyperFact, vocab: &Vocabulary) -> String {
    let t = &fact.triplet;
    let mut out = format!(
        "{} {} {}",
        format_entity(&t.head, vocab),
        vocab.relation_name(t.relation),
        format_entity(&t.tail, vocab)
    );
    for q in &fact.qualifiers {
        out.push(' ');
        out.push_str(vocab.relation_name(q.relation));
        out.push(' ');
        out.push_str(&format_entity(&q.value, vocab));
    }
    out
}

pub fn write_facts(facts: &[HyperFact], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for f in facts {
        out.push_str(&format_fact(f, vocab));
        out.push('\n');
    }
    out
}

pub fn write_fact_file(path: &Path, facts: &[HyperFact], vocab: &Vocabulary) -> Result<()> {
    fs::write(path, write_facts(facts, vocab)).map_err(|e| Error::io(path, e))
}

/// Reads train/valid/test files into one dataset with a shared
/// vocabulary. Duplicate facts within and across splits are dropped
/// (first occurrence wins, train before valid before test).
pub fn load_dataset(train: &Path, valid: Option<&Path>, test: Option<&Path>) -> Result<Dataset> {
    let mut vocab = Vocabulary::new();
    let splits = read_splits([Some(train), valid, test], |p| parse_fact_file(p, VocabMode::Build(&mut vocab)))?;
    assemble(vocab, splits)
}

/// As [`load_dataset`], but every name must already be in `vocab` (e.g.
/// the vocabulary stored with a trained model).
pub fn load_dataset_frozen(
    vocab: &Vocabulary,
    train: &Path,
    valid: Option<&Path>,
    test: Option<&Path>,
) -> Result<Dataset> {
    let splits = read_splits([Some(train), valid, test], |p| parse_fact_file(p, VocabMode::Frozen(vocab)))?;
    assemble(vocab.clone(), splits)
}

fn read_splits(
    paths: [Option<&Path>; 3],
    mut parse: impl FnMut(&Path) -> Result<Vec<HyperFact>>,
) -> Result<Vec<Vec<HyperFact>>> {
    paths
        .into_iter()
        .map(|p| match p {
            Some(p) => parse(p),
            None => Ok(Vec::new()),
        })
        .collect()
}

fn assemble(vocab: Vocabulary, splits: Vec<Vec<HyperFact>>) -> Result<Dataset> {
    let mut seen = HashSet::new();
    let mut removed = 0;
    let mut kept = splits.into_iter().map(|facts| {
        facts
            .into_iter()
            .filter(|f| {
                let fresh = seen.insert(f.canonical_key());
                removed += usize::from(!fresh);
                fresh
            })
            .collect::<Vec<_>>()
    });
    let (train, valid, test) = (kept.next().unwrap(), kept.next().unwrap(), kept.next().unwrap());
    drop(kept);
    if removed > 0 {
        log::warn!("dropped {removed} duplicate fact(s)");
    }
    Dataset::new(vocab, train, valid, test)
}

/// A fact with exactly one `?` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    /// The fact with a placeholder (id 0 or value 0.0) at the masked slot.
    pub fact: HyperFact,
    pub slot: Position,
}

/// Parses a query line such as `? P26 Q2 P580 #1988.79` or `Q1 weight #?`.
/// `?` stands for a discrete entity or a relation, `#?` for a numeric value.
pub fn parse_query(line: &str, vocab: &Vocabulary) -> Result<Query> {
    let raw: Vec<&str> = line.split_whitespace().collect();
    check_arity(raw.len()).map_err(Error::Config)?;
    let holes: Vec<usize> = raw
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == "?" || **t == "#?")
        .map(|(i, _)| i)
        .collect();
    if holes.len() != 1 {
        return Err(Error::Config(format!(
            "query must contain exactly one ? or #?, found {}",
            holes.len()
        )));
    }
    let hole = holes[0];
    let slot = match hole {
        0 => Position::Head,
        1 => Position::Relation,
        2 => Position::Tail,
        i if (i - 3) % 2 == 0 => Position::QualifierRelation((i - 3) / 2),
        i => Position::QualifierValue((i - 3) / 2),
    };
    let is_relation = matches!(slot, Position::Relation | Position::QualifierRelation(_));
    if raw[hole] == "#?" && (is_relation || slot == Position::Head) {
        return Err(Error::Config(format!("#? is not allowed at the {slot} position")));
    }
    let placeholder = if is_relation {
        vocab.relation_name(0).to_string()
    } else if raw[hole] == "#?" {
        "#0".to_string()
    } else {
        vocab
            .entity_names()
            .first()
            .cloned()
            .ok_or_else(|| Error::Data("vocabulary has no entities".into()))?
    };
    let mut tokens: Vec<String> = raw.iter().map(|t| t.to_string()).collect();
    tokens[hole] = placeholder;
    let fact = parse_line(&tokens.join(" "), &mut VocabMode::Frozen(vocab)).map_err(Error::Data)?;
    Ok(Query { fact, slot })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::facts_equal_mod_qualifier_order;

    #[test]
    fn parses_numeric_qualifier() {
        let mut v = Vocabulary::new();
        let facts = parse_facts("Q1 P26 Q2 P580 #1988.79\n", VocabMode::Build(&mut v)).unwrap();
        let f = &facts[0];
        assert_eq!(v.entity_name(f.triplet.head.discrete().unwrap()), "Q1");
        assert_eq!(v.relation_name(f.triplet.relation), "P26");
        assert_eq!(v.entity_name(f.triplet.tail.discrete().unwrap()), "Q2");
        assert_eq!(f.qualifiers.len(), 1);
        assert_eq!(v.relation_name(f.qualifiers[0].relation), "P580");
        assert_eq!(f.qualifiers[0].value, EntityRef::Numeric(1988.79));
        let p580 = v.relation_id("P580").unwrap();
        assert_eq!(v.kind(p580), crate::kg::RelationKind::Numeric);
    }

    #[test]
    fn unit_dropped_weight_is_numeric_tail() {
        let mut v = Vocabulary::new();
        let facts = parse_facts("C weight #80", VocabMode::Build(&mut v)).unwrap();
        assert_eq!(facts[0].triplet.tail, EntityRef::Numeric(80.0));
        assert_eq!(v.relation_name(facts[0].triplet.relation), "weight");
    }

    #[test]
    fn wrong_arity_reports_line_number() {
        let mut v = Vocabulary::new();
        let errs = parse_facts("a r b\n\na r b q\n", VocabMode::Build(&mut v)).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].line, 3);
        assert!(errs[0].message.contains("3 + 2k"));
    }

    #[test]
    fn bad_literal_and_numeric_head() {
        let mut v = Vocabulary::new();
        let errs = parse_facts("a r #abc\n#5 r b\na r #inf\n", VocabMode::Build(&mut v)).unwrap_err();
        assert_eq!(errs.iter().map(|e| e.line).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(errs[1].message.contains("head"));
    }

    #[test]
    fn frozen_mode_rejects_unknown_tokens() {
        let mut v = Vocabulary::new();
        parse_facts("a r b", VocabMode::Build(&mut v)).unwrap();
        let errs = parse_facts("a r c\na s b", VocabMode::Frozen(&v)).unwrap_err();
        assert!(errs[0].message.contains("unknown entity c"));
        assert!(errs[1].message.contains("unknown relation s"));
        assert_eq!(v.num_entities(), 2);
    }

    #[test]
    fn date_literals_are_converted() {
        let mut v = Vocabulary::new();
        let f = parse_facts("a r #1922-01-28", VocabMode::Build(&mut v)).unwrap();
        assert_eq!(f[0].triplet.tail, EntityRef::Numeric(1922.0 + 28.0 / 365.0));
    }

    #[test]
    fn serialize_then_parse_round_trips() {
        let text = "a r b q1 #0.1 q2 c\nc s #-3.25e-7\n";
        let mut v = Vocabulary::new();
        let facts = parse_facts(text, VocabMode::Build(&mut v)).unwrap();
        let written = write_facts(&facts, &v);
        let again = parse_facts(&written, VocabMode::Frozen(&v)).unwrap();
        assert_eq!(facts.len(), again.len());
        for (a, b) in facts.iter().zip(&again) {
            assert!(facts_equal_mod_qualifier_order(a, b));
        }
    }

    #[test]
    fn queries_need_exactly_one_hole() {
        let mut v = Vocabulary::new();
        parse_facts("a r b\nb w #3", VocabMode::Build(&mut v)).unwrap();
        let q = parse_query("? r b", &v).unwrap();
        assert_eq!(q.slot, Position::Head);
        let q = parse_query("b w #?", &v).unwrap();
        assert_eq!(q.slot, Position::Tail);
        assert!(q.fact.triplet.tail.is_numeric());
        let q = parse_query("a ? b", &v).unwrap();
        assert_eq!(q.slot, Position::Relation);
        assert!(matches!(parse_query("? r ?", &v), Err(Error::Config(_))));
        assert!(matches!(parse_query("a r b", &v), Err(Error::Config(_))));
        assert!(matches!(parse_query("? r zzz", &v), Err(Error::Data(_))));
    }
}
