//! Staged training: source pretraining, relation weights, auxiliary
//! adversary with instance weights, weighted adversarial adaptation.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use train::{Predictor, Stage, StageReport, TrainState};

use crate::adversary::AdversaryError;
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::encoders::{EncoderError, NA};
use crate::kv::{KvError, KvMap};
use crate::semantic::SemanticError;
use crate::weighting::WeightError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("stage order violation: {op} needs stage {needed}, state is at stage {current}")]
    StageOrder {
        op: &'static str,
        needed: Stage,
        current: Stage,
    },
    #[error("empty {0} data")]
    EmptyData(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `Phi(p) = 2u / (1 + exp(-a p)) - u`, the gradient-reversal coefficient at
/// training progress `p`.
pub fn schedule_phi(p: f64, u: f64, a: f64) -> f64 {
    2.0 * u / (1.0 + (-a * p).exp()) - u
}

/// Zeroes (value and gradient) the per-instance losses whose label is NA.
pub fn mask_na_loss(tape: &mut Tape, losses: Var, labels: &[usize]) -> Result<Var, DiffError> {
    let n = tape.value(losses).len();
    if labels.len() != n {
        return Err(DiffError::Shape(format!("{} labels for {n} losses", labels.len())));
    }
    let mask: Vec<f64> = labels.iter().map(|&y| if y == NA { 0.0 } else { 1.0 }).collect();
    let m = tape.input(Tensor::new(tape.value(losses).shape().to_vec(), mask)?)?;
    tape.mul(losses, m)
}

/// Which importance weights enter the stage-4 objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightMode {
    /// Instance and relation weights fused by the trained gate.
    Full,
    /// Gate replaced by a fixed `alpha`.
    FixedAlpha(f64),
    /// Instance weights only (`alpha = 1`).
    NoRelation,
    /// Relation weights only (`alpha = 0`).
    NoInstance,
    /// All weights 1: the unweighted adversarial objective.
    Uniform,
}

impl WeightMode {
    pub fn name(&self) -> String {
        match self {
            WeightMode::Full => "full".into(),
            WeightMode::FixedAlpha(a) => format!("fixed:{a:?}"),
            WeightMode::NoRelation => "no_relation".into(),
            WeightMode::NoInstance => "no_instance".into(),
            WeightMode::Uniform => "uniform".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => WeightMode::Full,
            "no_relation" => WeightMode::NoRelation,
            "no_instance" => WeightMode::NoInstance,
            "uniform" => WeightMode::Uniform,
            _ => WeightMode::FixedAlpha(s.strip_prefix("fixed:")?.parse().ok()?),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// One gate value from the mean target feature.
    Scalar,
    /// One gate value per pseudo-labeled target relation.
    PerRelation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Stage-3 learning rate; `None` uses `learning_rate`.
    pub learning_rate_instance: Option<f64>,
    /// Stage-4 learning rate; `None` uses `learning_rate`.
    pub learning_rate_adapt: Option<f64>,
    /// Whether stage 3 also moves the target encoder. When false the
    /// auxiliary discriminator learns against the copied source encoder.
    pub instance_updates_target: bool,
    pub batch_size: usize,
    pub epochs_source: usize,
    /// Epochs of auxiliary-discriminator training (stage 3).
    pub epochs_instance: usize,
    pub epochs_adapt: usize,
    pub epochs_finetune: usize,
    pub u: f64,
    pub schedule_alpha: f64,
    pub seed: u64,
    pub sm_coeff: f64,
    pub zeta: f64,
    pub dropout: f64,
    pub mask_na: bool,
    pub weight_mode: WeightMode,
    pub gate_mode: GateMode,
    /// Discriminator hidden width; `None` uses the feature width.
    pub disc_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            learning_rate_instance: None,
            learning_rate_adapt: None,
            instance_updates_target: false,
            batch_size: 128,
            epochs_source: 30,
            epochs_instance: 10,
            epochs_adapt: 30,
            epochs_finetune: 10,
            u: 0.1,
            schedule_alpha: 1.0,
            seed: 0,
            sm_coeff: 0.0,
            zeta: 0.7,
            dropout: 0.5,
            mask_na: true,
            weight_mode: WeightMode::Full,
            gate_mode: GateMode::Scalar,
            disc_hidden: None,
        }
    }
}

const KEYS: &[&str] = &[
    "learning_rate",
    "learning_rate_instance",
    "learning_rate_adapt",
    "instance_updates_target",
    "batch_size",
    "epochs_source",
    "epochs_instance",
    "epochs_adapt",
    "epochs_finetune",
    "u",
    "schedule_alpha",
    "seed",
    "sm_coeff",
    "zeta",
    "dropout",
    "mask_na",
    "weight_mode",
    "gate_mode",
    "disc_hidden",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        let rates = [Some(self.learning_rate), self.learning_rate_instance, self.learning_rate_adapt];
        if rates.iter().flatten().any(|r| !(*r > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.u > 0.0) || !(self.schedule_alpha > 0.0) {
            return bad("u and schedule_alpha must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return bad("zeta must be in [0, 1]");
        }
        if !(self.sm_coeff >= 0.0) {
            return bad("sm_coeff must be nonnegative");
        }
        if let WeightMode::FixedAlpha(a) = self.weight_mode {
            if !(0.0..=1.0).contains(&a) {
                return bad("fixed alpha must be in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set_f64("learning_rate", self.learning_rate);
        let opt = |r: Option<f64>| r.map_or("auto".to_string(), |r| format!("{r:?}"));
        m.set("learning_rate_instance", opt(self.learning_rate_instance));
        m.set("learning_rate_adapt", opt(self.learning_rate_adapt));
        m.set("instance_updates_target", self.instance_updates_target);
        m.set("batch_size", self.batch_size);
        m.set("epochs_source", self.epochs_source);
        m.set("epochs_instance", self.epochs_instance);
        m.set("epochs_adapt", self.epochs_adapt);
        m.set("epochs_finetune", self.epochs_finetune);
        m.set_f64("u", self.u);
        m.set_f64("schedule_alpha", self.schedule_alpha);
        m.set("seed", self.seed);
        m.set_f64("sm_coeff", self.sm_coeff);
        m.set_f64("zeta", self.zeta);
        m.set_f64("dropout", self.dropout);
        m.set("mask_na", self.mask_na);
        m.set("weight_mode", self.weight_mode.name());
        m.set(
            "gate_mode",
            match self.gate_mode {
                GateMode::Scalar => "scalar",
                GateMode::PerRelation => "per_relation",
            },
        );
        m.set("disc_hidden", self.disc_hidden.map_or("auto".to_string(), |h| h.to_string()));
        m
    }

    /// Overrides the fields present in `m`; unknown keys are errors.
    pub fn apply_kv(&mut self, m: &KvMap) -> Result<(), PipelineError> {
        m.check_known(KEYS)?;
        m.read_into("learning_rate", &mut self.learning_rate)?;
        for (key, slot) in [
            ("learning_rate_instance", &mut self.learning_rate_instance),
            ("learning_rate_adapt", &mut self.learning_rate_adapt),
        ] {
            if let Some(s) = m.get_str(key) {
                *slot = match s {
                    "auto" => None,
                    v => Some(v.parse().map_err(|_| PipelineError::Config(format!("{key} `{v}`")))?),
                };
            }
        }
        m.read_into("instance_updates_target", &mut self.instance_updates_target)?;
        m.read_into("batch_size", &mut self.batch_size)?;
        m.read_into("epochs_source", &mut self.epochs_source)?;
        m.read_into("epochs_instance", &mut self.epochs_instance)?;
        m.read_into("epochs_adapt", &mut self.epochs_adapt)?;
        m.read_into("epochs_finetune", &mut self.epochs_finetune)?;
        m.read_into("u", &mut self.u)?;
        m.read_into("schedule_alpha", &mut self.schedule_alpha)?;
        m.read_into("seed", &mut self.seed)?;
        m.read_into("sm_coeff", &mut self.sm_coeff)?;
        m.read_into("zeta", &mut self.zeta)?;
        m.read_into("dropout", &mut self.dropout)?;
        m.read_into("mask_na", &mut self.mask_na)?;
        if let Some(s) = m.get_str("weight_mode") {
            self.weight_mode =
                WeightMode::parse(s).ok_or_else(|| PipelineError::Config(format!("weight_mode `{s}`")))?;
        }
        if let Some(s) = m.get_str("gate_mode") {
            self.gate_mode = match s {
                "scalar" => GateMode::Scalar,
                "per_relation" => GateMode::PerRelation,
                _ => return Err(PipelineError::Config(format!("gate_mode `{s}`"))),
            };
        }
        if let Some(s) = m.get_str("disc_hidden") {
            self.disc_hidden = match s {
                "auto" => None,
                v => Some(v.parse().map_err(|_| PipelineError::Config(format!("disc_hidden `{v}`")))?),
            };
        }
        self.validate()
    }
}
