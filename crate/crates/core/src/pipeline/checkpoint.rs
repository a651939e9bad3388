use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use super::train::TrainState;
use super::{PipelineError, Stage, TrainConfig};
use crate::diffcore::ParamStore;
use crate::encoders::EncoderConfig;
use crate::kv::KvMap;
use crate::weighting::WeightTable;

const PARAMS: &str = "params.bin";
const STATE: &str = "state.txt";
const WEIGHTS: &str = "weights.txt";
const FINAL_WEIGHTS: &str = "final_weights.txt";

/// Writes a checkpoint directory: parameters, stage bookkeeping and weight
/// tables.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let f = fs::File::create(dir.join(PARAMS))?;
    state.store.write_to(BufWriter::new(f))?;
    let mut m = KvMap::new();
    m.set("stage", state.stage.index());
    m.set("step", state.step);
    m.set_f64("progress", state.progress);
    m.set("classes", state.classes);
    m.set("fine_tuned", state.fine_tuned);
    m.set("disc_hidden", state.disc.hidden);
    if let Some(a) = state.source_accuracy {
        m.set_f64("source_accuracy", a);
    }
    let lambdas: Vec<String> = state.lambdas.iter().map(|l| format!("{l:?}")).collect();
    m.set_list("lambdas", &lambdas);
    m.extend_prefixed("encoder", &state.source_encoder.cfg.to_kv());
    fs::write(dir.join(STATE), m.to_text())?;
    for (name, table) in [(WEIGHTS, &state.table), (FINAL_WEIGHTS, &state.final_table)] {
        let path = dir.join(name);
        match table {
            Some(t) => fs::write(path, t.to_text())?,
            None if path.exists() => fs::remove_file(path)?,
            None => {}
        }
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState, PipelineError> {
    let missing = |what: &str| PipelineError::Checkpoint(format!("{} has no {what}", dir.display()));
    let state_path = dir.join(STATE);
    if !state_path.exists() {
        return Err(missing(STATE));
    }
    let m = KvMap::parse(&fs::read_to_string(state_path)?)?;
    let mut enc = EncoderConfig::default();
    enc.apply_kv(&m.section("encoder"))?;
    let cfg = TrainConfig {
        dropout: enc.dropout,
        disc_hidden: Some(m.require("disc_hidden")?),
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(enc, m.require("classes")?, &cfg)?;
    let params = dir.join(PARAMS);
    if !params.exists() {
        return Err(missing(PARAMS));
    }
    state.store = ParamStore::read_from(BufReader::new(fs::File::open(params)?))?;
    let stage = Stage::from_index(m.require("stage")?)
        .ok_or_else(|| PipelineError::Checkpoint("unknown stage index".into()))?;
    state.restore_parts(stage, m.require("step")?, m.require("progress")?, m.require("fine_tuned")?);
    state.source_accuracy = m.get("source_accuracy")?;
    state.lambdas = m.get_list("lambdas")?.unwrap_or_default();
    for (name, slot) in [(WEIGHTS, &mut state.table), (FINAL_WEIGHTS, &mut state.final_table)] {
        let path = dir.join(name);
        if path.exists() {
            *slot = Some(WeightTable::from_text(&fs::read_to_string(path)?)?);
        }
    }
    if state.stage >= Stage::RelationWeighted && state.table.is_none() {
        return Err(missing(WEIGHTS));
    }
    Ok(state)
}

/// Run record: configuration echo, stage completion times and final
/// metrics, as sorted `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: KvMap,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_config(&mut self, prefix: &str, config: &KvMap) {
        self.entries.extend_prefixed(prefix, config);
    }

    pub fn record_stage(&mut self, name: &str) {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.entries.set(&format!("stage.{name}.finished_unix"), secs);
    }

    pub fn set_metric(&mut self, name: &str, value: f64) {
        self.entries.set_f64(&format!("metric.{name}"), value);
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.entries.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        Ok(Self {
            entries: KvMap::parse(&fs::read_to_string(path)?)?,
        })
    }
}
