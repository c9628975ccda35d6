//! Self-contained model directories: tensors, configuration, vocabulary
//! and normalization table.

use std::fs;
use std::path::Path;

use hynt_kernel::{DType, Real};
use serde::{Deserialize, Serialize};

use super::{HyntConfig, Model};
use crate::error::{Error, Result};
use crate::ingest::NormalizationTable;
use crate::kg::{RelationKind, Vocabulary};

pub const CONFIG_FILE: &str = "model.toml";
const ENTITIES_FILE: &str = "entities.txt";
const RELATIONS_FILE: &str = "relations.tsv";
const NORMALIZATION_FILE: &str = "normalization.tsv";
const FORMAT: &str = "hynt-model 1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    dtype: String,
    num_entities: usize,
    num_relations: usize,
    model: HyntConfig,
}

/// Everything needed to answer queries.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub vocab: Vocabulary,
    pub normalization: NormalizationTable,
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Real>(
    dir: &Path,
    model: &Model<T>,
    vocab: &Vocabulary,
    normalization: &NormalizationTable,
) -> Result<()> {
    if vocab.num_entities() != model.num_entities() || vocab.num_relations() != model.num_relations() {
        return Err(Error::Data("vocabulary does not match the model's sizes".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.params.save(dir)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: T::DTYPE.to_string(),
        num_entities: model.num_entities(),
        num_relations: model.num_relations(),
        model: model.config().clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write(&dir.join(CONFIG_FILE), text)?;

    let mut ents = String::new();
    for name in vocab.entity_names() {
        ents.push_str(name);
        ents.push('\n');
    }
    write(&dir.join(ENTITIES_FILE), ents)?;
    let mut rels = String::new();
    for (r, name) in vocab.relation_names().iter().enumerate() {
        let kind = match vocab.kind(r) {
            RelationKind::Discrete => "discrete",
            RelationKind::Numeric => "numeric",
        };
        rels.push_str(&format!("{name}\t{kind}\n"));
    }
    write(&dir.join(RELATIONS_FILE), rels)?;
    normalization.save(&dir.join(NORMALIZATION_FILE), vocab)
}

fn manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(CONFIG_FILE);
    let m: Manifest =
        toml::from_str(&read(&path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        return Err(Error::Data(format!("{}: unsupported format {:?}", path.display(), m.format)));
    }
    Ok(m)
}

/// Precision the checkpoint's tensors were stored in.
pub fn checkpoint_dtype(dir: &Path) -> Result<DType> {
    manifest(dir)?
        .dtype
        .parse()
        .map_err(|e: String| Error::Data(e))
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let m = manifest(dir)?;
    let mut vocab = Vocabulary::new();
    for name in read(&dir.join(ENTITIES_FILE))?.lines() {
        vocab.entity(name);
    }
    for (i, line) in read(&dir.join(RELATIONS_FILE))?.lines().enumerate() {
        let (name, kind) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{RELATIONS_FILE} line {}: expected name and kind", i + 1)))?;
        let r = vocab.relation(name);
        match kind {
            "numeric" => vocab.mark_numeric(r),
            "discrete" => {}
            other => return Err(Error::Data(format!("{RELATIONS_FILE} line {}: unknown kind {other}", i + 1))),
        }
    }
    if vocab.num_entities() != m.num_entities || vocab.num_relations() != m.num_relations {
        return Err(Error::Data("vocabulary files do not match the manifest".into()));
    }
    let normalization = NormalizationTable::load(&dir.join(NORMALIZATION_FILE), &vocab)?;
    let mut model = Model::new(m.model, m.num_entities, m.num_relations, 0)?;
    model.params.load_into(dir)?;
    Ok(Checkpoint {
        model,
        vocab,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{compute_normalization, parse_facts, VocabMode};

    #[test]
    fn reload_is_bit_exact() {
        let mut vocab = Vocabulary::new();
        let facts = parse_facts("a r b\nb w #3 t #1990\nc w #5\n", VocabMode::Build(&mut vocab)).unwrap();
        let table = compute_normalization(&facts);
        let mut cfg = HyntConfig::with_dim(8);
        cfg.context_heads = 2;
        let model = Model::<f64>::new(cfg, vocab.num_entities(), vocab.num_relations(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &vocab, &table).unwrap();
        assert_eq!(checkpoint_dtype(dir.path()).unwrap(), DType::F64);
        let back = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(back.model.params, model.params);
        assert_eq!(back.model.config(), model.config());
        assert_eq!(back.vocab.entity_names(), vocab.entity_names());
        assert_eq!(back.vocab.numeric_relations().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(back.normalization, table);
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
