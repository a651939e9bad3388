use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use wran::datagen::{gen_corpus, gen_kg, read_dataset, write_dataset, CorpusSpec, DataKind, KgData, KgSpec};
use wran::encoders::{Dataset, EncoderConfig};
use wran::evalkit::{
    f1_micro, mrr_mr_hits, pr_curve, pr_curve_csv, precision_at_k, triple_accuracy, MetricsReport, PredictionSet,
    RankingQuery, RankingSet,
};
use wran::kv::KvMap;
use wran::pipeline::{load_checkpoint, save_checkpoint, Manifest, Predictor, TrainConfig, TrainState, WeightMode};
use wran::presets;
use wran::rng::Rng;
use wran::theory::{
    empirical_check, identity_value, minimax_value, standard_cases, Density1D, EmpiricalConfig, Grid, WeightField,
};

use crate::config::{Mode, RunConfig};

const DATA_INFO: &str = "data.kv";
const TRAIN_CONFIG: &str = "train.kv";
const MANIFEST: &str = "manifest.kv";
pub const METRICS: &str = "metrics.csv";

/// A generated data directory.
struct DataDir {
    path: PathBuf,
    mode: Mode,
    classes: usize,
    corpus: Option<CorpusSpec>,
    kg: Option<KgSpec>,
}

impl DataDir {
    fn open(path: &Path) -> Result<Self> {
        let info_path = path.join(DATA_INFO);
        let text = fs::read_to_string(&info_path)
            .with_context(|| format!("{} is not a data directory (run `gen` first)", path.display()))?;
        let info = KvMap::parse(&text)?;
        let mode = Mode::parse(&info.require::<String>("mode")?)?;
        let (mut corpus, mut kg) = (None, None);
        match mode {
            Mode::Re => {
                let mut s = CorpusSpec::default();
                s.apply_kv(&info.section("corpus"))?;
                corpus = Some(s);
            }
            Mode::Kgc => {
                let mut s = KgSpec::default();
                s.apply_kv(&info.section("kg"))?;
                kg = Some(s);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            mode,
            classes: info.require("classes")?,
            corpus,
            kg,
        })
    }

    fn kind(&self) -> DataKind {
        match self.mode {
            Mode::Re => DataKind::Sentences,
            Mode::Kgc => DataKind::Triples,
        }
    }

    fn read(&self, name: &str) -> Result<Dataset> {
        let p = self.path.join(name);
        let f = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
        read_dataset(BufReader::new(f), self.kind()).with_context(|| format!("reading {}", p.display()))
    }

    fn encoder(&self, cfg: &RunConfig) -> Result<EncoderConfig> {
        let mut enc = match (&self.corpus, &self.kg) {
            (Some(s), _) => presets::sentence_encoder(s),
            (_, Some(s)) => presets::triple_encoder(s),
            _ => unreachable!("data directory without a spec"),
        };
        enc.apply_kv(&cfg.section("encoder"))?;
        Ok(enc)
    }

    fn regenerate_kg(&self) -> Result<KgData> {
        Ok(gen_kg(self.kg.as_ref().context("not a kgc data directory")?)?)
    }
}

fn write_data(dir: &Path, name: &str, data: &Dataset) -> Result<()> {
    let p = dir.join(name);
    let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
    write_dataset(data, BufWriter::new(f))?;
    Ok(())
}

fn check_mode(flag: Option<Mode>, cfg: &RunConfig, data: &DataDir) -> Result<()> {
    for m in [flag, cfg.mode()?].into_iter().flatten() {
        ensure!(
            m == data.mode,
            "mode {} requested but {} holds {} data",
            m.name(),
            data.path.display(),
            data.mode.name()
        );
    }
    Ok(())
}

/// Preset, then the settings stored with the checkpoint, then the config
/// file, then the run seed.
fn train_config(cfg: &RunConfig, mode: Mode, checkpoint: Option<&Path>) -> Result<TrainConfig> {
    let mut tc = match mode {
        Mode::Re => presets::sentence_training(cfg.seed),
        Mode::Kgc => presets::triple_training(cfg.seed),
    };
    if let Some(dir) = checkpoint {
        let p = dir.join(TRAIN_CONFIG);
        if p.exists() {
            tc.apply_kv(&KvMap::parse(&fs::read_to_string(p)?)?)?;
        }
    }
    tc.apply_kv(&cfg.section("train"))?;
    tc.seed = cfg.seed;
    tc.validate()?;
    Ok(tc)
}

fn manifest(command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Manifest {
    let mut m = Manifest::new();
    let mut run = KvMap::new();
    run.set("command", command);
    run.set("seed", cfg.seed);
    for (k, p) in inputs {
        run.set(&format!("input.{k}"), p.display());
    }
    m.set_config("run", &run);
    m.set_config("config", &cfg.entries);
    m
}

fn save(state: &TrainState, tc: &TrainConfig, out: &Path, mut m: Manifest, stage: &str) -> Result<()> {
    save_checkpoint(state, out).with_context(|| format!("writing checkpoint {}", out.display()))?;
    fs::write(out.join(TRAIN_CONFIG), tc.to_kv().to_text())?;
    m.set_config("train", &tc.to_kv());
    m.record_stage(stage);
    m.write(&out.join(MANIFEST))?;
    Ok(())
}

fn load(checkpoint: &Path) -> Result<TrainState> {
    load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))
}

pub fn gen(cfg: &RunConfig, mode: Option<Mode>, out: &Path) -> Result<()> {
    let Some(mode) = mode.or(cfg.mode()?) else {
        bail!("gen needs --mode or mode=... in the config");
    };
    fs::create_dir_all(out)?;
    let mut info = KvMap::new();
    info.set("mode", mode.name());
    let mut m = manifest("gen", cfg, &[]);
    match mode {
        Mode::Re => {
            let mut spec = CorpusSpec::default();
            spec.apply_kv(&cfg.section("corpus"))?;
            spec.seed = cfg.seed;
            let c = gen_corpus(&spec)?;
            write_data(out, "source.tsv", &Dataset::Sentences(c.source))?;
            write_data(out, "target.tsv", &Dataset::Sentences(c.target))?;
            write_data(out, "test.tsv", &Dataset::Sentences(c.test))?;
            info.set("classes", c.classes);
            info.extend_prefixed("corpus", &spec.to_kv());
            m.set_config("corpus", &spec.to_kv());
        }
        Mode::Kgc => {
            let mut spec = KgSpec::default();
            spec.apply_kv(&cfg.section("kg"))?;
            spec.seed = cfg.seed;
            let kg = gen_kg(&spec)?;
            write_data(out, "source.tsv", &Dataset::Triples(kg.source))?;
            write_data(out, "target.tsv", &Dataset::Triples(kg.target))?;
            write_data(out, "test.tsv", &Dataset::Triples(kg.test))?;
            info.set("classes", 2);
            info.extend_prefixed("kg", &spec.to_kv());
            m.set_config("kg", &spec.to_kv());
        }
    }
    fs::write(out.join(DATA_INFO), info.to_text())?;
    m.record_stage("gen");
    m.write(&out.join(MANIFEST))?;
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, mode: Option<Mode>, data: &Path, out: &Path) -> Result<()> {
    let data_dir = DataDir::open(data)?;
    check_mode(mode, cfg, &data_dir)?;
    let tc = train_config(cfg, data_dir.mode, None)?;
    let source = data_dir.read("source.tsv")?;
    let mut state = TrainState::new(data_dir.encoder(cfg)?, data_dir.classes, &tc)?;
    let report = state.stage1_pretrain_source(&source, &tc)?;
    let mut m = manifest("pretrain", cfg, &[("data", data)]);
    if let Some(l) = report.final_loss() {
        m.set_metric("source_loss", l);
    }
    if let Some(a) = state.source_accuracy {
        m.set_metric("source_accuracy", a);
    }
    save(&state, &tc, out, m, "pretrain")
}

pub fn weights(cfg: &RunConfig, mode: Option<Mode>, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let data_dir = DataDir::open(data)?;
    check_mode(mode, cfg, &data_dir)?;
    let tc = train_config(cfg, data_dir.mode, Some(checkpoint))?;
    let mut state = load(checkpoint)?;
    let source = data_dir.read("source.tsv")?;
    let target = data_dir.read("target.tsv")?.unlabeled();
    state.stage2_relation_weights(&target)?;
    state.stage3_instance_weights(&source, &target, &tc)?;
    let mut m = manifest("weights", cfg, &[("checkpoint", checkpoint), ("data", data)]);
    let table = state.table.as_ref().context("stage 3 produced no weight table")?;
    for (r, w) in table.relation_weights()?.iter().enumerate() {
        m.set_metric(&format!("relation_weight.{r}"), *w);
    }
    for (i, a) in table.alpha()?.values().iter().enumerate() {
        m.set_metric(&format!("alpha.{i}"), *a);
    }
    save(&state, &tc, out, m, "weights")
}

/// Stage-4 switches, mirroring the ablations.
#[derive(Clone, Debug, Default)]
pub struct AdaptFlags {
    pub no_relation_weights: bool,
    pub no_instance_weights: bool,
    pub no_gate: bool,
    pub fixed_alpha: Option<f64>,
    pub sm_coeff: Option<f64>,
    pub fine_tune_frac: Option<f64>,
}

impl AdaptFlags {
    pub fn weight_mode(&self) -> Result<Option<WeightMode>> {
        let (r, i) = (self.no_relation_weights, self.no_instance_weights);
        if self.fixed_alpha.is_some() && !self.no_gate {
            bail!("--fixed-alpha only applies with --no-gate");
        }
        if self.no_gate && (r || i) {
            bail!("--no-gate cannot be combined with --no-relation-weights or --no-instance-weights");
        }
        Ok(match (r, i, self.no_gate) {
            (true, true, _) => Some(WeightMode::Uniform),
            (true, false, _) => Some(WeightMode::NoRelation),
            (false, true, _) => Some(WeightMode::NoInstance),
            (false, false, true) => Some(WeightMode::FixedAlpha(self.fixed_alpha.unwrap_or(0.5))),
            (false, false, false) => None,
        })
    }
}

fn fine_tune_subset(labeled: &Dataset, frac: f64, seed: u64) -> Dataset {
    let mut idx: Vec<usize> = (0..labeled.len()).collect();
    Rng::derive(seed, 0xF7).shuffle(&mut idx);
    idx.truncate((frac * labeled.len() as f64).round() as usize);
    idx.sort_unstable();
    labeled.subset(&idx)
}

pub fn adapt(
    cfg: &RunConfig,
    mode: Option<Mode>,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    flags: &AdaptFlags,
) -> Result<()> {
    let data_dir = DataDir::open(data)?;
    check_mode(mode, cfg, &data_dir)?;
    let mut tc = train_config(cfg, data_dir.mode, Some(checkpoint))?;
    if let Some(w) = flags.weight_mode()? {
        tc.weight_mode = w;
    }
    if let Some(c) = flags.sm_coeff {
        tc.sm_coeff = c;
    }
    tc.validate()?;
    let frac = flags.fine_tune_frac.unwrap_or(match data_dir.mode {
        Mode::Re => 0.0,
        Mode::Kgc => 1.0,
    });
    ensure!((0.0..=1.0).contains(&frac), "--fine-tune-frac must be in [0, 1], got {frac}");

    let mut state = load(checkpoint)?;
    let source = data_dir.read("source.tsv")?;
    let labeled = data_dir.read("target.tsv")?;
    let report = state.stage4_adversarial_adapt(&source, &labeled.unlabeled(), &tc)?;
    let mut m = manifest("adapt", cfg, &[("checkpoint", checkpoint), ("data", data)]);
    if let Some(l) = report.final_loss() {
        m.set_metric("adapt_objective", l);
    }
    let tuned = fine_tune_subset(&labeled, frac, tc.seed);
    if !tuned.is_empty() {
        state.fine_tune(&tuned, &tc)?;
    }
    m.set_metric("fine_tune_instances", tuned.len() as f64);
    save(&state, &tc, out, m, "adapt")
}

fn eval_list(cfg: &RunConfig, key: &str, default: &[usize]) -> Result<Vec<usize>> {
    Ok(cfg.section("eval").get_list(key)?.unwrap_or_else(|| default.to_vec()))
}

pub fn eval(
    cfg: &RunConfig,
    mode: Option<Mode>,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    which: Predictor,
) -> Result<()> {
    let data_dir = DataDir::open(data)?;
    check_mode(mode, cfg, &data_dir)?;
    cfg.section("eval").check_known(&["top_k", "hits"])?;
    let state = load(checkpoint)?;
    let test = data_dir.read("test.tsv")?;
    fs::create_dir_all(out)?;
    let mut metrics = MetricsReport::default();
    let probs = state.predict(&test, which)?;
    match data_dir.mode {
        Mode::Re => {
            let preds = PredictionSet::from_probs(&probs, &test.labels()?)?;
            let prf = f1_micro(&preds, true)?;
            metrics.push("precision", "micro", prf.precision);
            metrics.push("recall", "micro", prf.recall);
            metrics.push("f1", "micro", prf.f1);
            for k in eval_list(cfg, "top_k", &[10, 20, 50])? {
                if let Ok(p) = precision_at_k(&preds, k) {
                    metrics.push("p@k", &k.to_string(), p);
                }
            }
            fs::write(out.join("pr_curve.csv"), pr_curve_csv(&pr_curve(&preds)?))?;
        }
        Mode::Kgc => {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            let labels: Vec<bool> = test.labels()?.iter().map(|&y| y == 1).collect();
            metrics.push("triple_accuracy", "test", triple_accuracy(&scores, &labels)?);
            let ns = eval_list(cfg, "hits", &[1, 3, 10])?;
            for (name, filtered) in [("raw", false), ("filtered", true)] {
                let set = tail_rankings(&state, &data_dir, &test, which, filtered)?;
                let r = mrr_mr_hits(&set, &ns)?;
                metrics.push("mrr", name, r.mrr);
                metrics.push("mr", name, r.mr);
                for (n, h) in r.hits {
                    metrics.push(&format!("hits@{n}"), name, h);
                }
            }
        }
    }
    if let Some(t) = state.final_table.as_ref().or(state.table.as_ref()) {
        for (r, w) in t.relation_weights()?.iter().enumerate() {
            metrics.push("relation_weight", &r.to_string(), *w);
        }
    }
    fs::write(out.join(METRICS), metrics.to_string())?;
    let mut m = manifest("eval", cfg, &[("checkpoint", checkpoint), ("data", data)]);
    for (metric, name, v) in &metrics.rows {
        m.set_metric(&format!("{metric}.{name}"), *v);
    }
    m.record_stage("eval");
    m.write(&out.join(MANIFEST))?;
    Ok(())
}

/// Tail prediction for every positive test triple, scoring all entities.
fn tail_rankings(
    state: &TrainState,
    data_dir: &DataDir,
    test: &Dataset,
    which: Predictor,
    filtered: bool,
) -> Result<RankingSet> {
    let kg = data_dir.regenerate_kg()?;
    let Dataset::Triples(triples) = test else {
        bail!("kgc test data must be triples");
    };
    let entities = kg.entity_vectors.len();
    let mut queries = Vec::new();
    for t in triples.iter().filter(|t| t.label.is_some_and(|l| l.class() == 1)) {
        let candidates = Dataset::Triples((0..entities).map(|e| kg.triple(t.head, t.relation, e, None)).collect());
        let probs = state.predict(&candidates, which)?;
        let scored: Vec<(usize, f64)> = probs.iter().enumerate().map(|(e, p)| (e, p[1])).collect();
        let known: BTreeSet<usize> = (0..entities)
            .filter(|&e| e != t.tail && kg.truth.contains(&(t.head, t.relation, e)))
            .collect();
        queries.push(RankingQuery::from_scores(&scored, t.tail, known));
    }
    ensure!(!queries.is_empty(), "no positive test triples to rank");
    Ok(RankingSet { queries, filtered })
}

pub fn theory(cfg: &RunConfig, out: &Path) -> Result<()> {
    let section = cfg.section("theory");
    section.check_known(&["samples", "hidden", "epochs", "batch_size", "learning_rate"])?;
    let mut ec = EmpiricalConfig {
        seed: cfg.seed,
        ..EmpiricalConfig::default()
    };
    section.read_into("samples", &mut ec.samples)?;
    section.read_into("hidden", &mut ec.hidden)?;
    section.read_into("epochs", &mut ec.epochs)?;
    section.read_into("batch_size", &mut ec.batch_size)?;
    section.read_into("learning_rate", &mut ec.learning_rate)?;

    fs::create_dir_all(out)?;
    let grid = Grid::default();
    let mut metrics = MetricsReport::default();
    let mut worst: f64 = 0.0;
    for case in standard_cases() {
        let w = case.weight.normalized(&case.ps, &grid)?;
        let minimax = minimax_value(&w, &case.ps, &case.pt, &grid)?;
        let identity = identity_value(&w, &case.ps, &case.pt, &grid)?;
        metrics.push("minimax", case.name, minimax);
        metrics.push("identity", case.name, identity);
        worst = worst.max((minimax - identity).abs());
    }
    metrics.push("max_identity_gap", "all", worst);
    let report = empirical_check(
        &WeightField::ones(),
        &Density1D::gaussian(0.0, 1.0),
        &Density1D::gaussian(2.0, 1.0),
        &ec,
    )?;
    metrics.push("empirical", "max_abs_error", report.max_abs_error);
    metrics.push("empirical", "trained_value", report.trained_value);
    metrics.push("empirical", "identity_value", report.identity_value);
    fs::write(out.join(METRICS), metrics.to_string())?;
    fs::write(out.join("discriminator.csv"), report.csv())?;
    let mut m = manifest("theory", cfg, &[]);
    for (metric, name, v) in &metrics.rows {
        m.set_metric(&format!("{metric}.{name}"), *v);
    }
    m.record_stage("theory");
    m.write(&out.join(MANIFEST))?;
    ensure!(worst < 1e-6, "minimax value departs from -log 4 + 2 JS by {worst:e}");
    if !report.converged {
        eprintln!("warning: the empirical discriminator did not converge");
    }
    Ok(())
}
