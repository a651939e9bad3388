//! End-to-end runs on the synthetic tasks, shared by the CLI and the
//! acceptance tests.

use crate::datagen::{gen_corpus, gen_kg, CorpusSpec, KgSpec};
use crate::encoders::Dataset;
use crate::evalkit::{f1_micro, precision_at_k, triple_accuracy, MetricsReport, PredictionSet};
use crate::pipeline::{PipelineError, Predictor, TrainConfig, TrainState, WeightMode};
use crate::presets;

/// One stage-4 configuration run on a shared stage-3 state.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub mode: WeightMode,
    pub sm_coeff: f64,
}

impl Variant {
    pub const fn new(name: &'static str, mode: WeightMode) -> Self {
        Self {
            name,
            mode,
            sm_coeff: 0.0,
        }
    }
}

/// Full method and its four ablations.
pub fn ablations() -> Vec<Variant> {
    vec![
        Variant::new("full", WeightMode::Full),
        Variant::new("no_gate", WeightMode::FixedAlpha(0.5)),
        Variant::new("no_relation", WeightMode::NoRelation),
        Variant::new("no_instance", WeightMode::NoInstance),
        Variant::new("no_weights", WeightMode::Uniform),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationRun {
    pub seed: u64,
    pub source_only_f1: f64,
    pub relation_weights: Vec<f64>,
    /// Mean outlier relation weight over mean shared relation weight.
    pub outlier_ratio: Option<f64>,
    /// `(variant name, target F1)` in the order requested.
    pub f1: Vec<(String, f64)>,
    pub metrics: MetricsReport,
}

impl RelationRun {
    pub fn f1_of(&self, name: &str) -> Option<f64> {
        self.f1.iter().find(|(n, _)| n == name).map(|p| p.1)
    }
}

/// Default corpus: the partial task keeps three source-only relations, the
/// shared task has none.
pub fn relation_spec(seed: u64, partial: bool) -> CorpusSpec {
    CorpusSpec {
        outlier_relations: if partial { vec![6, 7, 8] } else { Vec::new() },
        seed,
        ..CorpusSpec::default()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn target_f1(state: &TrainState, test: &Dataset, which: Predictor) -> Result<(f64, PredictionSet), PipelineError> {
    let probs = state.predict(test, which)?;
    let preds = PredictionSet::from_probs(&probs, &test.labels()?).map_err(|e| PipelineError::Config(e.to_string()))?;
    let f1 = f1_micro(&preds, true).map_err(|e| PipelineError::Config(e.to_string()))?.f1;
    Ok((f1, preds))
}

/// Stages 1 to 3 once, then stage 4 per variant from the same state.
pub fn relation_task(
    spec: &CorpusSpec,
    cfg: &TrainConfig,
    variants: &[Variant],
    top_k: &[usize],
) -> Result<RelationRun, PipelineError> {
    let corpus = gen_corpus(spec).map_err(|e| PipelineError::Config(e.to_string()))?;
    let source = Dataset::Sentences(corpus.source);
    let target = Dataset::Sentences(corpus.target).unlabeled();
    let test = Dataset::Sentences(corpus.test);
    let mut state = TrainState::new(presets::sentence_encoder(spec), corpus.classes, cfg)?;
    state.stage1_pretrain_source(&source, cfg)?;
    state.stage2_relation_weights(&target)?;
    state.stage3_instance_weights(&source, &target, cfg)?;

    let mut metrics = MetricsReport::default();
    let (source_only_f1, _) = target_f1(&state, &test, Predictor::SourceOnly)?;
    metrics.push("f1", "source_only", source_only_f1);
    let rel = state.table.as_ref().expect("stage 3 done").relation_weights()?.to_vec();
    for (r, w) in rel.iter().enumerate() {
        metrics.push("relation_weight", &r.to_string(), *w);
    }
    let outlier_ratio = (!spec.outlier_relations.is_empty()).then(|| {
        let shared = spec.shared_relations();
        mean(spec.outlier_relations.iter().map(|&r| rel[r])) / mean(shared.iter().map(|&r| rel[r]))
    });
    if let Some(r) = outlier_ratio {
        metrics.push("outlier_ratio", "relation_weight", r);
    }

    let mut f1 = Vec::with_capacity(variants.len());
    for v in variants {
        let mut branch = state.branch()?;
        let vcfg = TrainConfig {
            weight_mode: v.mode,
            sm_coeff: v.sm_coeff,
            ..cfg.clone()
        };
        branch.stage4_adversarial_adapt(&source, &target, &vcfg)?;
        let (score, preds) = target_f1(&branch, &test, Predictor::Target)?;
        metrics.push("f1", v.name, score);
        for &k in top_k {
            if let Ok(p) = precision_at_k(&preds, k) {
                metrics.push(&format!("p@{k}"), v.name, p);
            }
        }
        f1.push((v.name.to_string(), score));
    }
    Ok(RelationRun {
        seed: spec.seed,
        source_only_f1,
        relation_weights: rel,
        outlier_ratio,
        f1,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgRun {
    pub seed: u64,
    pub source_only: f64,
    /// Full method after stage 4, before fine-tuning.
    pub adapted: f64,
    /// Full method after fine-tuning on the labeled low-resource triples.
    pub wran: f64,
    /// Fine-tuning the copied source encoder without adaptation.
    pub fine_tune_only: f64,
    pub metrics: MetricsReport,
}

fn kg_accuracy(state: &TrainState, test: &Dataset, which: Predictor) -> Result<f64, PipelineError> {
    let probs = state.predict(test, which)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let labels: Vec<bool> = test.labels()?.iter().map(|&y| y == 1).collect();
    triple_accuracy(&scores, &labels).map_err(|e| PipelineError::Config(e.to_string()))
}

/// Triple classification on the low-resource relations of a planted graph.
pub fn kgc_task(spec: &KgSpec, cfg: &TrainConfig) -> Result<KgRun, PipelineError> {
    let kg = gen_kg(spec).map_err(|e| PipelineError::Config(e.to_string()))?;
    let source = Dataset::Triples(kg.source);
    let labeled = Dataset::Triples(kg.target);
    let target = labeled.unlabeled();
    let test = Dataset::Triples(kg.test);
    let mut state = TrainState::new(presets::triple_encoder(spec), 2, cfg)?;
    state.stage1_pretrain_source(&source, cfg)?;
    state.stage2_relation_weights(&target)?;
    state.stage3_instance_weights(&source, &target, cfg)?;
    let source_only = kg_accuracy(&state, &test, Predictor::SourceOnly)?;

    let mut plain = state.branch()?;
    plain.stage4_adversarial_adapt(
        &source,
        &target,
        &TrainConfig {
            epochs_adapt: 0,
            ..cfg.clone()
        },
    )?;
    plain.fine_tune(&labeled, cfg)?;
    let fine_tune_only = kg_accuracy(&plain, &test, Predictor::Target)?;

    state.stage4_adversarial_adapt(&source, &target, cfg)?;
    let adapted = kg_accuracy(&state, &test, Predictor::Target)?;
    state.fine_tune(&labeled, cfg)?;
    let wran = kg_accuracy(&state, &test, Predictor::Target)?;

    let mut metrics = MetricsReport::default();
    metrics.push("triple_accuracy", "source_only", source_only);
    metrics.push("triple_accuracy", "fine_tune_only", fine_tune_only);
    metrics.push("triple_accuracy", "adapted", adapted);
    metrics.push("triple_accuracy", "wran", wran);
    Ok(KgRun {
        seed: spec.seed,
        source_only,
        adapted,
        wran,
        fine_tune_only,
        metrics,
    })
}
