use std::fs;
use std::path::{Path, PathBuf};

use hynt::eval::{evaluate, EvalOptions, FilterIndex, RankMode, Scope};
use hynt::ingest::{
    compute_normalization, generate_synthetic, load_dataset, load_dataset_frozen, normalize_dataset, parse_query,
    write_fact_file, NormalizationTable, SyntheticSpec,
};
use hynt::kernel::{DType, Real};
use hynt::kg::{DatasetStats, EntityRef, HyperFact, Position, Split};
use hynt::model::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, MaskSpec, SlotOutput, Target};
use hynt::training::{train as train_model, write_log};
use hynt::{Error, Result};

use crate::config::{Precision, RunConfig};
use crate::{EvalArgs, GenDataArgs, InspectArgs, PredictArgs, TrainArgs};

/// Name of the frozen configuration inside a run directory.
const FROZEN_CONFIG: &str = "config.toml";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.into(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io(path))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io(p))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($field:ident = $value:expr),*) => {
            $(if let Some(v) = $value { spec.$field = v; })*
        };
    }
    set!(
        seed = a.seed,
        entities = a.entities,
        discrete_relations = a.discrete_relations,
        numeric_relations = a.numeric_relations,
        facts = a.facts,
        max_qualifiers = a.max_qualifiers,
        numeric_fraction = a.numeric_fraction,
        noise_scale = a.noise
    );
    if let Some(s) = &a.split {
        spec.split = [s[0], s[1], s[2]];
    }
    let ds = generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    for (name, facts) in [("train.txt", &ds.train), ("valid.txt", &ds.valid), ("test.txt", &ds.test)] {
        write_fact_file(&a.out.join(name), facts, &ds.vocab)?;
    }
    write(&a.out.join("spec.toml"), &toml::to_string(&spec).expect("spec serializes"))?;
    println!(
        "wrote {} / {} / {} facts to {}",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = RunConfig::load(&a.config)?;
    if let Some(out) = &a.out {
        c.out_dir = std::path::absolute(out).unwrap_or_else(|_| out.clone());
    }
    if let Some(seed) = a.seed {
        c.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        c.train.epochs = epochs;
    }
    if let Some(p) = &a.precision {
        c.precision = p.parse()?;
    }
    if let Some(h) = &a.prediction_head {
        c.model.prediction_head = h.parse()?;
    }
    if let Some(e) = &a.encoding {
        c.model.encoding = e.parse()?;
    }
    if let Some(m) = &a.no_mask {
        c.train.no_mask = m.parse()?;
    }
    c.validate()?;
    Ok(c)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let config = resolve_config(a)?;
    let d = &config.data;
    let raw = load_dataset(&d.train, d.valid(), d.test())?;
    let mut table = compute_normalization(&raw.train);
    let ds = normalize_dataset(&raw, &mut table)?;
    create_dir(&config.out_dir)?;
    write(&config.out_dir.join(FROZEN_CONFIG), &config.to_toml())?;
    match config.precision {
        Precision::F32 => train_with::<f32>(&config, &ds, &table),
        Precision::F64 => train_with::<f64>(&config, &ds, &table),
    }
}

fn train_with<T: Real>(config: &RunConfig, ds: &hynt::kg::Dataset, table: &NormalizationTable) -> Result<()> {
    let out = train_model::<T>(ds, table, &config.model, &config.train)?;
    let dir = &config.out_dir;
    save_checkpoint(&dir.join("best"), &out.best, &ds.vocab, table)?;
    save_checkpoint(&dir.join("last"), &out.last, &ds.vocab, table)?;
    write_log(&dir.join("log.csv"), &out.log)?;
    match (out.best_epoch, &out.best_report) {
        (Some(epoch), Some(report)) => {
            println!("best epoch {epoch} (validation)");
            print!("{}", report.to_table(&[Scope::Tri, Scope::All]));
        }
        _ => println!("no validation split: best = last"),
    }
    println!("checkpoints in {}", dir.display());
    Ok(())
}

/// The run configuration that produced `checkpoint`: its sibling frozen
/// config unless one is given.
fn run_config_for(checkpoint: &Path, explicit: Option<&PathBuf>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => checkpoint
            .parent()
            .map(|p| p.join(FROZEN_CONFIG))
            .ok_or_else(|| Error::Config("cannot locate the run configuration; pass --config".into()))?,
    };
    RunConfig::load(&path)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let mode: RankMode = a.mode.parse()?;
    let mut scopes = a.scope.iter().map(|s| s.parse()).collect::<Result<Vec<Scope>>>()?;
    if scopes.is_empty() {
        scopes = vec![Scope::Tri, Scope::All];
    }
    let config = run_config_for(&a.checkpoint, a.config.as_ref())?;
    let out_dir = match &a.out {
        Some(o) => o.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let job = EvalJob {
        config: &config,
        split,
        mode,
        scopes: &scopes,
        out_dir: &out_dir,
        tag: format!("{}-{}", a.split, a.mode),
    };
    match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => job.run(load_checkpoint::<f32>(&a.checkpoint)?),
        DType::F64 => job.run(load_checkpoint::<f64>(&a.checkpoint)?),
    }
}

struct EvalJob<'a> {
    config: &'a RunConfig,
    split: Split,
    mode: RankMode,
    scopes: &'a [Scope],
    out_dir: &'a Path,
    tag: String,
}

impl EvalJob<'_> {
    fn run<T: Real>(&self, ck: Checkpoint<T>) -> Result<()> {
        let d = &self.config.data;
        let raw = load_dataset_frozen(&ck.vocab, &d.train, d.valid(), d.test())?;
        let mut table = ck.normalization.clone();
        let ds = normalize_dataset(&raw, &mut table)?;
        let facts = ds.split(self.split);
        if facts.is_empty() {
            return Err(Error::Data(format!("split {} is empty", self.tag)));
        }
        let filter = FilterIndex::build(ds.all_facts());
        let options = EvalOptions {
            mode: self.mode,
            batch_size: self.config.train.eval_batch_size,
        };
        let report = evaluate(&ck.model, facts, &filter, &table, &ds.vocab, options)?;
        for &s in self.scopes {
            let r = report.scope(s);
            if r.link.is_none() && r.relation.is_none() && r.numeric.is_none() {
                log::warn!("scope {s} has no queries on this split");
            }
        }
        create_dir(self.out_dir)?;
        let metrics = self.out_dir.join(format!("eval-{}.csv", self.tag));
        write(&metrics, &report.to_csv(self.scopes))?;
        write(
            &self.out_dir.join(format!("eval-{}-attributes.csv", self.tag)),
            &report.attributes_csv(self.scopes),
        )?;
        print!("{}", report.to_table(self.scopes));
        println!("report written to {}", metrics.display());
        Ok(())
    }
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => predict_with(load_checkpoint::<f32>(&a.checkpoint)?, a),
        DType::F64 => predict_with(load_checkpoint::<f64>(&a.checkpoint)?, a),
    }
}

/// Maps the query's known numeric values into the model's normalized space.
fn normalize_query(fact: &HyperFact, hole: Position, ck_table: &NormalizationTable, ck: &hynt::kg::Vocabulary) -> Result<HyperFact> {
    let mut out = fact.clone();
    let mut slots: Vec<(Position, Position, &mut EntityRef, usize)> = vec![(
        Position::Tail,
        Position::Relation,
        &mut out.triplet.tail,
        fact.triplet.relation,
    )];
    for (j, q) in out.qualifiers.iter_mut().enumerate() {
        let r = q.relation;
        slots.push((Position::QualifierValue(j), Position::QualifierRelation(j), &mut q.value, r));
    }
    for (value_pos, relation_pos, value, relation) in slots {
        let EntityRef::Numeric(v) = *value else { continue };
        if value_pos == hole {
            continue;
        }
        if relation_pos == hole {
            return Err(Error::Config(format!(
                "cannot mask the {relation_pos} of a numeric value: the value's scale depends on it"
            )));
        }
        *value = EntityRef::Numeric(ck_table.normalize(relation, v, ck)?);
    }
    Ok(out)
}

fn predict_with<T: Real>(ck: Checkpoint<T>, a: &PredictArgs) -> Result<()> {
    let query = parse_query(&a.query, &ck.vocab)?;
    let fact = normalize_query(&query.fact, query.slot, &ck.normalization, &ck.vocab)?;
    let mask = MaskSpec::new(&fact, query.slot)?;
    let out = ck.model.predict(&[(&fact, mask)])?.remove(0);
    let name = |i: usize| match out {
        SlotOutput::Relation(_) => ck.vocab.relation_name(i).to_string(),
        _ => ck.vocab.entity_name(i).to_string(),
    };
    match &out {
        SlotOutput::Entity(p) | SlotOutput::Relation(p) => {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
            for (rank, &i) in order.iter().take(a.top).enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, name(i), p[i]);
            }
        }
        SlotOutput::Numeric(x) => {
            let Target::Numeric { relation, .. } = mask.target(&fact)? else {
                unreachable!("numeric output for a non-numeric slot")
            };
            println!("{}", ck.normalization.denormalize(relation, *x, &ck.vocab)?);
        }
    }
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let f = &a.files;
    let ds = load_dataset(&f[0], f.get(1).map(PathBuf::as_path), f.get(2).map(PathBuf::as_path))?;
    let s = DatasetStats::compute(&ds);
    let rows = [
        ("|V_D| discrete entities", s.discrete_entities),
        ("|V_N| numeric entities", s.numeric_entities),
        ("|R_D| discrete relations", s.discrete_relations),
        ("|R_N| numeric relations", s.numeric_relations),
        ("facts", s.facts),
        ("facts with qualifiers", s.facts_with_qualifiers),
        ("triplets, discrete tail", s.triplets_discrete),
        ("triplets, numeric tail", s.triplets_numeric),
        ("qualifiers, discrete value", s.qualifiers_discrete),
        ("qualifiers, numeric value", s.qualifiers_numeric),
        ("train", ds.train.len()),
        ("valid", ds.valid.len()),
        ("test", ds.test.len()),
    ];
    for (label, n) in rows {
        println!("{label:<28}{n:>10}");
    }
    Ok(())
}
