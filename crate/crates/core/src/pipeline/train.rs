use std::fmt;

use super::{schedule_phi, GateMode, PipelineError, TrainConfig, WeightMode};
use crate::adversary::{adv_loss, Discriminator, SourceWeights};
use crate::diffcore::{Adam, ParamStore, Tape, Tensor};
use crate::encoders::{cross_entropy, source_loss, Classifier, Dataset, Encoder, EncoderConfig};
use crate::rng::Rng;
use crate::semantic::{batch_centroids, pseudo_label, sm_loss_graph, CentroidBank};
use crate::weighting::{instance_weights, relation_weights, Alpha, Gate, WeightTable};

pub const SOURCE: &str = "fs";
pub const CLASSIFIER: &str = "cls";
pub const TARGET: &str = "ft";
pub const AUX_DISC: &str = "da";
pub const DISC: &str = "dr";
pub const GATE: &str = "gate";
pub const TUNED_HEAD: &str = "tc";

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Initialized,
    SourcePretrained,
    RelationWeighted,
    InstanceWeighted,
    Adapted,
}

impl Stage {
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        [
            Stage::Initialized,
            Stage::SourcePretrained,
            Stage::RelationWeighted,
            Stage::InstanceWeighted,
            Stage::Adapted,
        ]
        .get(i as usize)
        .copied()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Adapted => write!(f, "4 (done)"),
            s => write!(f, "{}", s.index()),
        }
    }
}

/// Per-epoch training losses of one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub epoch_losses: Vec<f64>,
}

impl StageReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// All parameters and artifacts of one staged run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    pub store: ParamStore,
    pub source_encoder: Encoder,
    pub target_encoder: Encoder,
    pub classifier: Classifier,
    pub aux_disc: Discriminator,
    pub disc: Discriminator,
    pub gate: Gate,
    /// Weights fixed at the end of stage 3.
    pub table: Option<WeightTable>,
    /// Weights in effect for stage 4, with the gate re-evaluated after it.
    pub final_table: Option<WeightTable>,
    pub bank: Option<CentroidBank>,
    pub progress: f64,
    pub step: u64,
    pub source_accuracy: Option<f64>,
    /// Gradient-reversal coefficients used by stage-4 steps, in order.
    pub lambdas: Vec<f64>,
    pub fine_tuned: bool,
    pub classes: usize,
    source_features: Option<Vec<Vec<f64>>>,
}

/// Which encoder/head pair makes predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// Frozen source encoder and classifier.
    SourceOnly,
    /// Adapted target encoder with the source classifier, or the tuned head
    /// after fine-tuning.
    Target,
}

/// Source-side weight inputs for one adversarial pass.
enum Weighting {
    None,
    Fixed(Vec<f64>),
    Gated {
        instance: Vec<f64>,
        relation: Vec<f64>,
        sum_instance: f64,
        sum_relation: f64,
    },
}

impl TrainState {
    pub fn new(mut enc_cfg: EncoderConfig, classes: usize, cfg: &TrainConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if classes < 2 {
            return Err(PipelineError::Config("at least two classes are needed".into()));
        }
        enc_cfg.dropout = cfg.dropout;
        let source_encoder = Encoder::new(SOURCE, enc_cfg.clone())?;
        let target_encoder = Encoder::new(TARGET, enc_cfg.clone())?;
        let width = enc_cfg.feature_width();
        let hidden = cfg.disc_hidden.unwrap_or(width);
        let classifier = Classifier::new(CLASSIFIER, width, classes);
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(cfg.seed, 1);
        source_encoder.init(&mut store, &mut rng)?;
        classifier.init(&mut store, &mut rng)?;
        Ok(Self {
            stage: Stage::Initialized,
            store,
            source_encoder,
            target_encoder,
            classifier,
            aux_disc: Discriminator::with_hidden(AUX_DISC, width, hidden),
            disc: Discriminator::with_hidden(DISC, width, hidden),
            gate: Gate::new(GATE, width),
            table: None,
            final_table: None,
            bank: None,
            progress: 0.0,
            step: 0,
            source_accuracy: None,
            lambdas: Vec::new(),
            fine_tuned: false,
            classes,
            source_features: None,
        })
    }

    fn require(&self, op: &'static str, needed: Stage) -> Result<(), PipelineError> {
        if self.stage != needed {
            return Err(PipelineError::StageOrder {
                op,
                needed,
                current: self.stage,
            });
        }
        Ok(())
    }

    /// Stage 1: trains the source encoder and classifier by cross-entropy,
    /// then leaves them fixed for the rest of the run.
    pub fn stage1_pretrain_source(&mut self, source: &Dataset, cfg: &TrainConfig) -> Result<StageReport, PipelineError> {
        self.require("stage1_pretrain_source", Stage::Initialized)?;
        if source.is_empty() {
            return Err(PipelineError::EmptyData("source"));
        }
        source.labels()?;
        let mut opt = Adam::new(cfg.learning_rate, &[SOURCE, CLASSIFIER]);
        let mut order = Rng::derive(cfg.seed, 11);
        let mut drop = Rng::derive(cfg.seed, 12);
        let mut idx: Vec<usize> = (0..source.len()).collect();
        let mut report = StageReport::default();
        for _ in 0..cfg.epochs_source {
            order.shuffle(&mut idx);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in idx.chunks(cfg.batch_size) {
                let mut tape = Tape::with_dropout(Rng::new(drop.next_u64()));
                let loss = source_loss(
                    &mut tape,
                    &self.store,
                    &self.source_encoder,
                    &self.classifier,
                    source,
                    chunk,
                    cfg.mask_na,
                )?;
                total += tape.value(loss).item();
                batches += 1;
                tape.backward_scalar(loss, &mut self.store)?;
                opt.step(&mut self.store);
            }
            report.epoch_losses.push(total / batches as f64);
        }
        let probs = self.predict(source, Predictor::SourceOnly)?;
        let labels = source.labels()?;
        let correct = pseudo_label(&probs).iter().zip(&labels).filter(|(p, y)| p == y).count();
        self.source_accuracy = Some(correct as f64 / labels.len() as f64);
        self.stage = Stage::SourcePretrained;
        Ok(report)
    }

    /// Stage 2: relation weights from the frozen source model's predictions
    /// on the target data.
    pub fn stage2_relation_weights(&mut self, target: &Dataset) -> Result<(), PipelineError> {
        self.require("stage2_relation_weights", Stage::SourcePretrained)?;
        if target.is_empty() {
            return Err(PipelineError::EmptyData("target"));
        }
        let probs = self.predict(target, Predictor::SourceOnly)?;
        let mut table = WeightTable::new();
        table.set_relation_weights(relation_weights(&probs)?)?;
        self.table = Some(table);
        self.stage = Stage::RelationWeighted;
        Ok(())
    }

    /// Stage 3: copies the source encoder into the target encoder, trains
    /// the auxiliary discriminator against it, derives instance weights and
    /// freezes the weight table.
    pub fn stage3_instance_weights(
        &mut self,
        source: &Dataset,
        target: &Dataset,
        cfg: &TrainConfig,
    ) -> Result<StageReport, PipelineError> {
        self.require("stage3_instance_weights", Stage::RelationWeighted)?;
        if source.is_empty() || target.is_empty() {
            return Err(PipelineError::EmptyData(if source.is_empty() { "source" } else { "target" }));
        }
        let labels = source.labels()?;
        self.store.remove_prefix(TARGET);
        self.store.remove_prefix(AUX_DISC);
        self.store.remove_prefix(GATE);
        self.store.copy_prefix(SOURCE, TARGET)?;
        let mut rng = Rng::derive(cfg.seed, 3);
        self.aux_disc.init(&mut self.store, &mut rng)?;
        self.gate.init(&mut self.store)?;

        let disc = self.aux_disc.clone();
        let prefixes: &[&str] = if cfg.instance_updates_target { &[TARGET, AUX_DISC] } else { &[AUX_DISC] };
        let lr = cfg.learning_rate_instance.unwrap_or(cfg.learning_rate);
        let report =
            self.adversarial_loop(source, target, cfg, lr, &disc, prefixes, cfg.epochs_instance, Weighting::None, 31, false)?;

        let feats = self.cached_source_features(source)?.to_vec();
        let inst = instance_weights(&self.store, &self.aux_disc, &feats)?;
        let alpha = self.evaluate_gate(target, cfg.gate_mode)?;
        let table = self.table.as_mut().expect("stage 2 stores the table");
        table.set_instance_weights(inst)?;
        table.set_alpha(alpha)?;
        table.compute_totals(&labels)?;
        table.freeze()?;
        self.stage = Stage::InstanceWeighted;
        Ok(report)
    }

    /// Stage 4: weighted adversarial training of the target encoder against
    /// the main discriminator, with the optional semantic alignment term.
    pub fn stage4_adversarial_adapt(
        &mut self,
        source: &Dataset,
        target: &Dataset,
        cfg: &TrainConfig,
    ) -> Result<StageReport, PipelineError> {
        self.require("stage4_adversarial_adapt", Stage::InstanceWeighted)?;
        if source.is_empty() || target.is_empty() {
            return Err(PipelineError::EmptyData(if source.is_empty() { "source" } else { "target" }));
        }
        let labels = source.labels()?;
        let table = self.table.clone().expect("stage 3 stores the table");
        self.store.remove_prefix(DISC);
        let mut rng = Rng::derive(cfg.seed, 4);
        self.disc.init(&mut self.store, &mut rng)?;

        let inst = table.instance_weights()?.to_vec();
        let rel = table.relation_weights()?.to_vec();
        let fixed = |alpha: f64| -> Result<WeightTable, PipelineError> {
            let mut t = WeightTable::new();
            t.set_relation_weights(rel.clone())?;
            t.set_instance_weights(inst.clone())?;
            t.set_alpha(Alpha::Scalar(alpha))?;
            t.compute_totals(&labels)?;
            Ok(t)
        };
        let (weighting, mut prefixes, pre_table) = match cfg.weight_mode {
            WeightMode::Full => {
                let relation: Vec<f64> = labels.iter().map(|&y| rel[y]).collect();
                let w = Weighting::Gated {
                    sum_instance: inst.iter().sum(),
                    sum_relation: relation.iter().sum(),
                    instance: inst.clone(),
                    relation,
                };
                (w, vec![TARGET, DISC, GATE], None)
            }
            WeightMode::FixedAlpha(a) => {
                let t = fixed(a)?;
                (Weighting::Fixed(t.total_weights()?.to_vec()), vec![TARGET, DISC], Some(t))
            }
            WeightMode::NoRelation => {
                let t = fixed(1.0)?;
                (Weighting::Fixed(t.total_weights()?.to_vec()), vec![TARGET, DISC], Some(t))
            }
            WeightMode::NoInstance => {
                let t = fixed(0.0)?;
                (Weighting::Fixed(t.total_weights()?.to_vec()), vec![TARGET, DISC], Some(t))
            }
            WeightMode::Uniform => {
                let mut t = WeightTable::new();
                t.set_relation_weights(rel.clone())?;
                t.set_instance_weights(inst.clone())?;
                t.set_alpha(Alpha::Scalar(1.0))?;
                t.set_total_weights(vec![1.0; labels.len()])?;
                (Weighting::Fixed(vec![1.0; labels.len()]), vec![TARGET, DISC], Some(t))
            }
        };
        prefixes.dedup();
        if cfg.sm_coeff > 0.0 {
            self.bank = Some(CentroidBank::new(self.classes, self.target_encoder.cfg.feature_width(), cfg.zeta)?);
        }
        let disc = self.disc.clone();
        let lr = cfg.learning_rate_adapt.unwrap_or(cfg.learning_rate);
        let report =
            self.adversarial_loop(source, target, cfg, lr, &disc, &prefixes, cfg.epochs_adapt, weighting, 41, true)?;

        let mut final_table = match pre_table {
            Some(t) => t,
            None => {
                let alpha = self.evaluate_gate(target, cfg.gate_mode)?;
                let mut t = WeightTable::new();
                t.set_relation_weights(rel)?;
                t.set_instance_weights(inst)?;
                t.set_alpha(alpha)?;
                t.compute_totals(&labels)?;
                t
            }
        };
        final_table.freeze()?;
        self.final_table = Some(final_table);
        self.stage = Stage::Adapted;
        Ok(report)
    }

    /// Supervised adaptation: continued training of the target encoder with
    /// a separate head (initialized from the source classifier) on labeled
    /// target instances.
    pub fn fine_tune(&mut self, labeled: &Dataset, cfg: &TrainConfig) -> Result<StageReport, PipelineError> {
        self.require("fine_tune", Stage::Adapted)?;
        if labeled.is_empty() {
            return Err(PipelineError::EmptyData("labeled target"));
        }
        let labels = labeled.labels()?;
        self.store.remove_prefix(TUNED_HEAD);
        self.store.copy_prefix(CLASSIFIER, TUNED_HEAD)?;
        let head = Classifier::new(TUNED_HEAD, self.classifier.input, self.classes);
        let mut opt = Adam::new(cfg.learning_rate, &[TARGET, TUNED_HEAD]);
        let mut order = Rng::derive(cfg.seed, 51);
        let mut drop = Rng::derive(cfg.seed, 52);
        let mut idx: Vec<usize> = (0..labeled.len()).collect();
        let mut report = StageReport::default();
        for _ in 0..cfg.epochs_finetune {
            order.shuffle(&mut idx);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in idx.chunks(cfg.batch_size) {
                let mut tape = Tape::with_dropout(Rng::new(drop.next_u64()));
                let f = self.target_encoder.encode(&mut tape, &self.store, labeled, chunk)?;
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let loss = cross_entropy(&mut tape, &self.store, &head, f, &y, cfg.mask_na)?;
                total += tape.value(loss).item();
                batches += 1;
                tape.backward_scalar(loss, &mut self.store)?;
                opt.step(&mut self.store);
            }
            report.epoch_losses.push(total / batches as f64);
        }
        self.fine_tuned = true;
        Ok(report)
    }

    /// Class probabilities for every instance of `data`, in evaluation mode.
    pub fn predict(&self, data: &Dataset, which: Predictor) -> Result<Vec<Vec<f64>>, PipelineError> {
        if data.is_empty() {
            return Ok(Vec::new());
        }
        let (encoder, head) = match which {
            Predictor::SourceOnly => (&self.source_encoder, self.classifier.clone()),
            Predictor::Target => {
                if self.stage < Stage::InstanceWeighted {
                    return Err(PipelineError::StageOrder {
                        op: "predict with target encoder",
                        needed: Stage::InstanceWeighted,
                        current: self.stage,
                    });
                }
                let head = if self.fine_tuned {
                    Classifier::new(TUNED_HEAD, self.classifier.input, self.classes)
                } else {
                    self.classifier.clone()
                };
                (&self.target_encoder, head)
            }
        };
        let feats = encoder.features(&self.store, data, EVAL_BATCH)?;
        Ok(head.predict(&self.store, &feats)?)
    }

    fn cached_source_features(&mut self, source: &Dataset) -> Result<&[Vec<f64>], PipelineError> {
        let stale = self.source_features.as_ref().is_none_or(|f| f.len() != source.len());
        if stale {
            self.source_features = Some(self.source_encoder.features(&self.store, source, EVAL_BATCH)?);
        }
        Ok(self.source_features.as_deref().unwrap())
    }

    fn evaluate_gate(&self, target: &Dataset, mode: GateMode) -> Result<Alpha, PipelineError> {
        let feats = self.target_encoder.features(&self.store, target, EVAL_BATCH)?;
        Ok(match mode {
            GateMode::Scalar => Alpha::Scalar(self.gate.alpha(&self.store, &feats)?),
            GateMode::PerRelation => {
                let pseudo = pseudo_label(&self.predict(target, Predictor::SourceOnly)?);
                Alpha::PerRelation(self.gate.alpha_per_relation(&self.store, &feats, &pseudo, self.classes)?)
            }
        })
    }

    /// Simultaneous minimax steps: the discriminator ascends the objective,
    /// the target encoder descends it through gradient reversal with
    /// coefficient `Phi(p)`.
    #[allow(clippy::too_many_arguments)]
    fn adversarial_loop(
        &mut self,
        source: &Dataset,
        target: &Dataset,
        cfg: &TrainConfig,
        lr: f64,
        disc: &Discriminator,
        prefixes: &[&str],
        epochs: usize,
        weighting: Weighting,
        salt: u64,
        main: bool,
    ) -> Result<StageReport, PipelineError> {
        let semantic = main && cfg.sm_coeff > 0.0;
        let labels = source.labels()?;
        let feats = self.cached_source_features(source)?.to_vec();
        let ns = source.len();
        let pseudo = if semantic {
            pseudo_label(&self.predict(target, Predictor::SourceOnly)?)
        } else {
            Vec::new()
        };
        let mut opt = Adam::new(lr, prefixes);
        let mut order = Rng::derive(cfg.seed, salt);
        let mut drop = Rng::derive(cfg.seed, salt + 1);
        let mut sidx: Vec<usize> = (0..ns).collect();
        let mut tidx: Vec<usize> = (0..target.len()).collect();
        let mut tpos = tidx.len();
        let steps_per_epoch = ns.div_ceil(cfg.batch_size);
        let total_steps = (epochs * steps_per_epoch).max(1);
        let dropout = self.target_encoder.cfg.dropout;
        let mut report = StageReport::default();
        let mut step = 0usize;
        for _ in 0..epochs {
            order.shuffle(&mut sidx);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in sidx.chunks(cfg.batch_size) {
                let bt = chunk.len().min(tidx.len());
                let mut tb = Vec::with_capacity(bt);
                while tb.len() < bt {
                    if tpos == tidx.len() {
                        order.shuffle(&mut tidx);
                        tpos = 0;
                    }
                    tb.push(tidx[tpos]);
                    tpos += 1;
                }
                let p = step as f64 / total_steps as f64;
                let lambda = schedule_phi(p, cfg.u, cfg.schedule_alpha);
                let mut tape = Tape::with_dropout(Rng::new(drop.next_u64()));
                let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| feats[i].clone()).collect();
                let src = tape.input(Tensor::from_rows(&rows)?)?;
                let src = tape.dropout(src, dropout)?;
                let ft = self.target_encoder.encode(&mut tape, &self.store, target, &tb)?;
                let ft_rev = tape.grl(ft, lambda)?;
                let loss = match &weighting {
                    Weighting::None => adv_loss(&mut tape, &self.store, disc, src, ft_rev, None)?,
                    Weighting::Fixed(w) => {
                        let wb: Vec<f64> = chunk.iter().map(|&i| w[i]).collect();
                        adv_loss(&mut tape, &self.store, disc, src, ft_rev, Some(SourceWeights::Fixed(&wb)))?
                    }
                    Weighting::Gated {
                        instance,
                        relation,
                        sum_instance,
                        sum_relation,
                    } => {
                        let det = tape.detach(ft)?;
                        let mean = tape.mean_rows(det)?;
                        let alpha = self.gate.alpha_var(&mut tape, &self.store, mean)?;
                        // the gate plays on the encoder's side of the minimax
                        let alpha = tape.grl(alpha, 1.0)?;
                        let b = chunk.len();
                        let diff: Vec<f64> = chunk.iter().map(|&i| instance[i] - relation[i]).collect();
                        let base: Vec<f64> = chunk.iter().map(|&i| relation[i]).collect();
                        let diff = tape.input(Tensor::new(vec![b, 1], diff)?)?;
                        let base = tape.input(Tensor::new(vec![b, 1], base)?)?;
                        let mixed = tape.mul(diff, alpha)?;
                        let raw = tape.add(mixed, base)?;
                        let denom = tape.scale(alpha, sum_instance - sum_relation)?;
                        let denom = tape.add_scalar(denom, *sum_relation)?;
                        let w = tape.div(raw, denom)?;
                        let w = tape.scale(w, ns as f64)?;
                        adv_loss(&mut tape, &self.store, disc, src, ft_rev, Some(SourceWeights::Graph(w)))?
                    }
                };
                total += tape.value(loss).item();
                batches += 1;
                let mut objective = tape.scale(loss, -1.0)?;
                let mut new_target = None;
                if semantic {
                    let bank = self.bank.as_mut().expect("bank created with the semantic term");
                    let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    let (bc, present) = batch_centroids(&rows, &ys, bank.classes())?;
                    bank.update_source(&bc, &present)?;
                    let pb: Vec<usize> = tb.iter().map(|&j| pseudo[j]).collect();
                    let (sml, nt) = sm_loss_graph(&mut tape, bank, ft, &pb)?;
                    // same warm-up as the adversarial term, rising from 0 to 1
                    let sml = tape.scale(sml, cfg.sm_coeff * lambda / cfg.u)?;
                    objective = tape.add(objective, sml)?;
                    new_target = Some(nt);
                }
                tape.backward_scalar(objective, &mut self.store)?;
                opt.step(&mut self.store);
                if let (Some(nt), Some(bank)) = (new_target, self.bank.as_mut()) {
                    bank.target = nt;
                }
                if main {
                    self.lambdas.push(lambda);
                    self.step += 1;
                    self.progress = (step + 1) as f64 / total_steps as f64;
                }
                step += 1;
            }
            report.epoch_losses.push(total / batches as f64);
        }
        Ok(report)
    }

    /// Runs stages 1 through 4 in order.
    pub fn run_all(
        enc_cfg: EncoderConfig,
        classes: usize,
        source: &Dataset,
        target: &Dataset,
        cfg: &TrainConfig,
    ) -> Result<Self, PipelineError> {
        let mut state = Self::new(enc_cfg, classes, cfg)?;
        state.stage1_pretrain_source(source, cfg)?;
        state.stage2_relation_weights(target)?;
        state.stage3_instance_weights(source, target, cfg)?;
        state.stage4_adversarial_adapt(source, target, cfg)?;
        Ok(state)
    }

    /// Copy of a state that finished stage 3, ready to run stage 4 again
    /// with another configuration.
    pub fn branch(&self) -> Result<Self, PipelineError> {
        if self.stage != Stage::InstanceWeighted {
            return Err(PipelineError::StageOrder {
                op: "branch",
                needed: Stage::InstanceWeighted,
                current: self.stage,
            });
        }
        Ok(self.clone())
    }

    pub(crate) fn restore_parts(&mut self, stage: Stage, step: u64, progress: f64, fine_tuned: bool) {
        self.stage = stage;
        self.step = step;
        self.progress = progress;
        self.fine_tuned = fine_tuned;
        self.source_features = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_corpus, CorpusSpec};
    use crate::encoders::Arch;

    fn toy(relations: usize, per: usize, seed: u64) -> (Dataset, Dataset, EncoderConfig) {
        let spec = CorpusSpec {
            num_relations: relations,
            outlier_relations: Vec::new(),
            source_per_relation: per,
            target_per_relation: per / 2,
            test_per_relation: 10,
            seed,
            ..CorpusSpec::default()
        };
        let c = gen_corpus(&spec).unwrap();
        let enc = EncoderConfig {
            arch: Arch::Cnn,
            word_dim: 8,
            pos_dim: 2,
            kernel: 3,
            channels: 8,
            max_len: spec.max_len,
            vocab_size: spec.vocab_size,
            embed_init: 0.2,
            ..EncoderConfig::default()
        };
        (Dataset::Sentences(c.source), Dataset::Sentences(c.target).unlabeled(), enc)
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            learning_rate_instance: Some(1e-3),
            learning_rate_adapt: Some(1e-3),
            batch_size: 32,
            epochs_source: 3,
            epochs_instance: 2,
            epochs_adapt: 3,
            epochs_finetune: 1,
            dropout: 0.1,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stages_must_run_in_order() {
        let (src, tgt, enc) = toy(2, 20, 0);
        let cfg = quick(0);
        let mut st = TrainState::new(enc, 3, &cfg).unwrap();
        assert!(matches!(st.stage2_relation_weights(&tgt), Err(PipelineError::StageOrder { .. })));
        assert!(st.stage3_instance_weights(&src, &tgt, &cfg).is_err());
        assert!(st.stage4_adversarial_adapt(&src, &tgt, &cfg).is_err());
        assert!(st.branch().is_err());
        assert!(st.predict(&src, Predictor::Target).is_err());
        st.stage1_pretrain_source(&src, &cfg).unwrap();
        assert!(st.stage1_pretrain_source(&src, &cfg).is_err());
        assert!(st.stage3_instance_weights(&src, &tgt, &cfg).is_err());
        st.stage2_relation_weights(&tgt).unwrap();
        assert!(st.fine_tune(&src, &cfg).is_err());
        st.stage3_instance_weights(&src, &tgt, &cfg).unwrap();
        st.stage4_adversarial_adapt(&src, &tgt, &cfg).unwrap();
        assert_eq!(st.stage, Stage::Adapted);
        assert!(st.stage4_adversarial_adapt(&src, &tgt, &cfg).is_err());
        st.fine_tune(&src, &cfg).unwrap();
    }

    #[test]
    fn empty_data_rejected() {
        let (_, _, enc) = toy(2, 20, 0);
        let mut st = TrainState::new(enc, 3, &quick(0)).unwrap();
        let empty = Dataset::Sentences(Vec::new());
        assert!(matches!(st.stage1_pretrain_source(&empty, &quick(0)), Err(PipelineError::EmptyData(_))));
    }

    #[test]
    fn whole_run_is_deterministic() {
        let (src, tgt, enc) = toy(3, 30, 5);
        let a = TrainState::run_all(enc.clone(), 4, &src, &tgt, &quick(9)).unwrap();
        let b = TrainState::run_all(enc, 4, &src, &tgt, &quick(9)).unwrap();
        assert_eq!(a.predict(&tgt, Predictor::Target).unwrap(), b.predict(&tgt, Predictor::Target).unwrap());
        assert_eq!(a.table.as_ref().unwrap().to_text(), b.table.as_ref().unwrap().to_text());
        assert_eq!(a.lambdas, b.lambdas);
    }

    #[test]
    fn lambdas_rise_from_zero_and_stay_below_u() {
        let (src, tgt, enc) = toy(2, 30, 1);
        let cfg = quick(1);
        let st = TrainState::run_all(enc, 3, &src, &tgt, &cfg).unwrap();
        assert_eq!(st.lambdas[0], 0.0);
        assert_eq!(st.lambdas.len(), cfg.epochs_adapt * src.len().div_ceil(cfg.batch_size));
        assert!(st.lambdas.windows(2).all(|w| w[0] <= w[1]));
        assert!(st.lambdas.iter().all(|&l| l <= cfg.u));
        assert_eq!(st.progress, 1.0);
    }

    #[test]
    fn source_model_untouched_after_stage_one() {
        let (src, tgt, enc) = toy(2, 30, 2);
        let cfg = TrainConfig {
            sm_coeff: 0.1,
            ..quick(2)
        };
        let mut st = TrainState::new(enc, 3, &cfg).unwrap();
        st.stage1_pretrain_source(&src, &cfg).unwrap();
        let probe = st.predict(&tgt, Predictor::SourceOnly).unwrap();
        st.stage2_relation_weights(&tgt).unwrap();
        st.stage3_instance_weights(&src, &tgt, &cfg).unwrap();
        st.stage4_adversarial_adapt(&src, &tgt, &cfg).unwrap();
        st.fine_tune(&src, &cfg).unwrap();
        assert_eq!(st.predict(&tgt, Predictor::SourceOnly).unwrap(), probe);
    }

    #[test]
    fn separable_toy_is_learned_and_untrained_is_near_chance() {
        let (src, _, enc) = toy(2, 100, 3);
        let cfg = TrainConfig {
            epochs_source: 30,
            ..quick(3)
        };
        let mut st = TrainState::new(enc.clone(), 3, &cfg).unwrap();
        st.stage1_pretrain_source(&src, &cfg).unwrap();
        assert!(st.source_accuracy.unwrap() > 0.95);
        let cfg0 = TrainConfig {
            epochs_source: 0,
            ..cfg
        };
        let mut st = TrainState::new(enc, 3, &cfg0).unwrap();
        st.stage1_pretrain_source(&src, &cfg0).unwrap();
        assert!(st.source_accuracy.unwrap() < 0.75);
    }

    #[test]
    fn same_distribution_gives_middling_instance_weights() {
        let (src, _, enc) = toy(2, 60, 4);
        let target = src.unlabeled();
        let cfg = TrainConfig {
            epochs_instance: 5,
            ..quick(4)
        };
        let mut st = TrainState::new(enc, 3, &cfg).unwrap();
        st.stage1_pretrain_source(&src, &cfg).unwrap();
        st.stage2_relation_weights(&target).unwrap();
        st.stage3_instance_weights(&src, &target, &cfg).unwrap();
        let w = st.table.as_ref().unwrap().instance_weights().unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((0.4..=0.6).contains(&mean), "{mean}");
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn weight_modes_set_expected_alpha() {
        let (src, tgt, enc) = toy(2, 20, 6);
        let cfg = quick(6);
        let mut st = TrainState::new(enc, 3, &cfg).unwrap();
        st.stage1_pretrain_source(&src, &cfg).unwrap();
        st.stage2_relation_weights(&tgt).unwrap();
        st.stage3_instance_weights(&src, &tgt, &cfg).unwrap();
        for (mode, alpha) in [
            (WeightMode::NoRelation, 1.0),
            (WeightMode::NoInstance, 0.0),
            (WeightMode::FixedAlpha(0.5), 0.5),
        ] {
            let mut b = st.branch().unwrap();
            b.stage4_adversarial_adapt(&src, &tgt, &TrainConfig { weight_mode: mode, ..cfg.clone() })
                .unwrap();
            assert_eq!(b.final_table.unwrap().alpha().unwrap(), &Alpha::Scalar(alpha));
        }
    }
}
