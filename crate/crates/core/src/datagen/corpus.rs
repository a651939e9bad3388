use std::collections::BTreeSet;

use super::DataError;
use crate::encoders::{SentenceInstance, Span, NA};
use crate::kv::KvMap;
use crate::rng::Rng;

/// Longest sentence the templates can produce.
pub const TEMPLATE_MAX_LEN: usize = 10;

/// Synthetic relation-extraction corpus with a source and a target domain.
///
/// Relation `r` (1-based) is realized by trigger token `a_r` in the source
/// and by its synonym `b_r` in the target (with probability
/// `synonym_swap`). Context cue tokens of `r` appear in both domains, so
/// the synonym can be related back to the source trigger. Filler tokens
/// come from a shared pool mixed with a domain-only pool.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_relations: usize,
    /// Relations sampled for the target domain; empty means every
    /// non-outlier relation.
    pub target_relations: Vec<usize>,
    pub outlier_relations: Vec<usize>,
    pub num_entities: usize,
    pub source_per_relation: usize,
    pub target_per_relation: usize,
    pub test_per_relation: usize,
    /// Probability that a filler token comes from the domain-only pool.
    pub filler_divergence: f64,
    /// Probability that a target sentence uses the synonym trigger.
    pub synonym_swap: f64,
    /// Probability that a source sentence carries its trigger; sentences
    /// without one always carry a cue.
    pub trigger_rate: f64,
    pub cue_rate: f64,
    pub cues_per_relation: usize,
    pub na_fraction: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            num_relations: 8,
            target_relations: Vec::new(),
            outlier_relations: vec![6, 7, 8],
            num_entities: 40,
            source_per_relation: 250,
            target_per_relation: 250,
            test_per_relation: 100,
            filler_divergence: 0.3,
            synonym_swap: 0.5,
            trigger_rate: 0.7,
            cue_rate: 0.5,
            cues_per_relation: 2,
            na_fraction: 0.0,
            max_len: 12,
            seed: 0,
        }
    }
}

/// Vocabulary id ranges.
#[derive(Clone, Debug)]
struct Layout {
    triggers: usize,
    synonyms: usize,
    cues: usize,
    shared: Vec<usize>,
    source_only: Vec<usize>,
    target_only: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub source: Vec<SentenceInstance>,
    /// Target-domain training pool; labels are kept for evaluation and
    /// fine-tuning and must be stripped before adaptation.
    pub target: Vec<SentenceInstance>,
    pub test: Vec<SentenceInstance>,
    pub classes: usize,
    pub vocab_size: usize,
}

impl CorpusSpec {
    pub fn required_vocab(&self) -> usize {
        self.num_entities + self.num_relations * (2 + self.cues_per_relation) + 8
    }

    pub fn shared_relations(&self) -> Vec<usize> {
        if !self.target_relations.is_empty() {
            return self.target_relations.clone();
        }
        (1..=self.num_relations)
            .filter(|r| !self.outlier_relations.contains(r))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.num_relations == 0 {
            return bad("num_relations must be positive".into());
        }
        let valid: BTreeSet<usize> = (1..=self.num_relations).collect();
        for r in self.target_relations.iter().chain(&self.outlier_relations) {
            if !valid.contains(r) {
                return bad(format!("relation {r} outside 1..={}", self.num_relations));
            }
        }
        if self.target_relations.iter().any(|r| self.outlier_relations.contains(r)) {
            return bad("outlier relations cannot appear in the target".into());
        }
        if self.shared_relations().is_empty() {
            return bad("no relation left for the target".into());
        }
        for (name, p) in [
            ("filler_divergence", self.filler_divergence),
            ("synonym_swap", self.synonym_swap),
            ("trigger_rate", self.trigger_rate),
            ("cue_rate", self.cue_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.na_fraction) {
            return bad(format!("na_fraction = {} outside [0, 1)", self.na_fraction));
        }
        if self.cues_per_relation == 0 {
            return bad("cues_per_relation must be positive".into());
        }
        if self.num_entities < 2 {
            return bad("at least two entities are needed".into());
        }
        if self.max_len < TEMPLATE_MAX_LEN {
            return bad(format!("max_len must be at least {TEMPLATE_MAX_LEN}"));
        }
        let needed = self.required_vocab();
        if self.vocab_size < needed {
            return Err(DataError::VocabTooSmall {
                needed,
                got: self.vocab_size,
            });
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let r = self.num_relations;
        let triggers = self.num_entities;
        let synonyms = triggers + r;
        let cues = synonyms + r;
        let filler_start = cues + r * self.cues_per_relation;
        let m = self.vocab_size - filler_start;
        let n_shared = m / 2;
        let n_src = (m - n_shared) / 2;
        Layout {
            triggers,
            synonyms,
            cues,
            shared: (filler_start..filler_start + n_shared).collect(),
            source_only: (filler_start + n_shared..filler_start + n_shared + n_src).collect(),
            target_only: (filler_start + n_shared + n_src..self.vocab_size).collect(),
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("vocab_size", self.vocab_size);
        m.set("num_relations", self.num_relations);
        m.set_list("target_relations", &self.target_relations);
        m.set_list("outlier_relations", &self.outlier_relations);
        m.set("num_entities", self.num_entities);
        m.set("source_per_relation", self.source_per_relation);
        m.set("target_per_relation", self.target_per_relation);
        m.set("test_per_relation", self.test_per_relation);
        m.set_f64("filler_divergence", self.filler_divergence);
        m.set_f64("synonym_swap", self.synonym_swap);
        m.set_f64("trigger_rate", self.trigger_rate);
        m.set_f64("cue_rate", self.cue_rate);
        m.set("cues_per_relation", self.cues_per_relation);
        m.set_f64("na_fraction", self.na_fraction);
        m.set("max_len", self.max_len);
        m.set("seed", self.seed);
        m
    }

    pub fn apply_kv(&mut self, m: &KvMap) -> Result<(), DataError> {
        m.check_known(&[
            "vocab_size",
            "num_relations",
            "target_relations",
            "outlier_relations",
            "num_entities",
            "source_per_relation",
            "target_per_relation",
            "test_per_relation",
            "filler_divergence",
            "synonym_swap",
            "trigger_rate",
            "cue_rate",
            "cues_per_relation",
            "na_fraction",
            "max_len",
            "seed",
        ])?;
        m.read_into("vocab_size", &mut self.vocab_size)?;
        m.read_into("num_relations", &mut self.num_relations)?;
        if let Some(v) = m.get_list("target_relations")? {
            self.target_relations = v;
        }
        if let Some(v) = m.get_list("outlier_relations")? {
            self.outlier_relations = v;
        }
        m.read_into("num_entities", &mut self.num_entities)?;
        m.read_into("source_per_relation", &mut self.source_per_relation)?;
        m.read_into("target_per_relation", &mut self.target_per_relation)?;
        m.read_into("test_per_relation", &mut self.test_per_relation)?;
        m.read_into("filler_divergence", &mut self.filler_divergence)?;
        m.read_into("synonym_swap", &mut self.synonym_swap)?;
        m.read_into("trigger_rate", &mut self.trigger_rate)?;
        m.read_into("cue_rate", &mut self.cue_rate)?;
        m.read_into("cues_per_relation", &mut self.cues_per_relation)?;
        m.read_into("na_fraction", &mut self.na_fraction)?;
        m.read_into("max_len", &mut self.max_len)?;
        m.read_into("seed", &mut self.seed)?;
        Ok(())
    }
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let layout = spec.layout();
    let all: Vec<usize> = (1..=spec.num_relations).collect();
    let shared = spec.shared_relations();
    let mut g = Generator {
        spec,
        layout: &layout,
        rng: Rng::derive(spec.seed, 0xC0),
    };
    let source = g.domain(&all, spec.source_per_relation, Domain::Source);
    let target = g.domain(&shared, spec.target_per_relation, Domain::Target);
    let test = g.domain(&shared, spec.test_per_relation, Domain::Target);
    Ok(Corpus {
        source,
        target,
        test,
        classes: spec.num_relations + 1,
        vocab_size: spec.vocab_size,
    })
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    layout: &'a Layout,
    rng: Rng,
}

impl Generator<'_> {
    fn domain(&mut self, relations: &[usize], per_relation: usize, domain: Domain) -> Vec<SentenceInstance> {
        let mut out = Vec::new();
        for &r in relations {
            for _ in 0..per_relation {
                out.push(self.sentence(r, domain));
            }
        }
        let f = self.spec.na_fraction;
        let n_na = (out.len() as f64 * f / (1.0 - f)).round() as usize;
        for _ in 0..n_na {
            out.push(self.sentence(NA, domain));
        }
        self.rng.shuffle(&mut out);
        out
    }

    fn filler(&mut self, domain: Domain) -> usize {
        let own = match domain {
            Domain::Source => &self.layout.source_only,
            Domain::Target => &self.layout.target_only,
        };
        if !own.is_empty() && self.rng.bernoulli(self.spec.filler_divergence) {
            *self.rng.choose(own)
        } else {
            *self.rng.choose(&self.layout.shared)
        }
    }

    fn fillers(&mut self, lo: usize, hi: usize, domain: Domain) -> Vec<usize> {
        let n = lo + self.rng.below(hi - lo + 1);
        (0..n).map(|_| self.filler(domain)).collect()
    }

    fn sentence(&mut self, r: usize, domain: Domain) -> SentenceInstance {
        let s = self.spec;
        let head = self.rng.below(s.num_entities);
        let mut tail = self.rng.below(s.num_entities - 1);
        if tail >= head {
            tail += 1;
        }
        let (trigger, cue) = if r == NA {
            (None, None)
        } else {
            match domain {
                Domain::Source => {
                    let has = self.rng.bernoulli(s.trigger_rate);
                    let cue = !has || self.rng.bernoulli(s.cue_rate);
                    (has.then_some(self.layout.triggers + r - 1), cue.then_some(r))
                }
                Domain::Target => {
                    let t = if self.rng.bernoulli(s.synonym_swap) {
                        self.layout.synonyms + r - 1
                    } else {
                        self.layout.triggers + r - 1
                    };
                    let cue = self.rng.bernoulli(s.cue_rate);
                    (Some(t), cue.then_some(r))
                }
            }
        };
        let prefix = self.fillers(0, 1, domain);
        let mid1 = self.fillers(1, 2, domain);
        let mid2 = self.fillers(1, 2, domain);
        let suffix = self.fillers(0, 1, domain);
        let mut tokens = prefix;
        let head_pos = tokens.len();
        tokens.push(head);
        tokens.extend(mid1);
        tokens.extend(trigger);
        tokens.extend(mid2);
        let tail_pos = tokens.len();
        tokens.push(tail);
        tokens.extend(suffix);
        if let Some(cr) = cue {
            let c = self.layout.cues + (cr - 1) * s.cues_per_relation + self.rng.below(s.cues_per_relation);
            let at = self.rng.below(tokens.len() + 1);
            tokens.insert(at, c);
            let shift = |p: usize| if at <= p { p + 1 } else { p };
            return SentenceInstance {
                tokens,
                head: Span::new(shift(head_pos), shift(head_pos) + 1),
                tail: Span::new(shift(tail_pos), shift(tail_pos) + 1),
                relation: Some(r),
            };
        }
        SentenceInstance {
            tokens,
            head: Span::new(head_pos, head_pos + 1),
            tail: Span::new(tail_pos, tail_pos + 1),
            relation: Some(r),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            source_per_relation: 20,
            target_per_relation: 10,
            test_per_relation: 5,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_follow_the_spec() {
        let c = gen_corpus(&CorpusSpec::default()).unwrap();
        assert_eq!(c.source.len(), 2000);
        assert_eq!(c.target.len(), 5 * 250);
        assert_eq!(c.classes, 9);
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(gen_corpus(&small()).unwrap(), gen_corpus(&small()).unwrap());
        let other = CorpusSpec { seed: 1, ..small() };
        assert_ne!(gen_corpus(&small()).unwrap(), gen_corpus(&other).unwrap());
    }

    #[test]
    fn outliers_are_source_only() {
        let c = gen_corpus(&small()).unwrap();
        let src: BTreeSet<_> = c.source.iter().map(|s| s.relation.unwrap()).collect();
        let tgt: BTreeSet<_> = c.target.iter().chain(&c.test).map(|s| s.relation.unwrap()).collect();
        for o in [6, 7, 8] {
            assert!(src.contains(&o));
            assert!(!tgt.contains(&o));
        }
        assert_eq!(tgt, (1..=5).collect());
    }

    #[test]
    fn instances_are_well_formed() {
        let spec = CorpusSpec {
            na_fraction: 0.2,
            ..small()
        };
        let c = gen_corpus(&spec).unwrap();
        for s in c.source.iter().chain(&c.target) {
            s.validate(spec.vocab_size, spec.max_len).unwrap();
            assert!(s.tokens[s.head.start] < spec.num_entities);
            assert!(s.tokens[s.tail.start] < spec.num_entities);
        }
        let na = c.source.iter().filter(|s| s.relation == Some(NA)).count();
        assert_eq!(na, 40);
    }

    #[test]
    fn na_sentences_have_no_trigger() {
        let spec = CorpusSpec {
            na_fraction: 0.3,
            ..small()
        };
        let layout = spec.layout();
        let c = gen_corpus(&spec).unwrap();
        for s in c.source.iter().chain(&c.target).filter(|s| s.relation == Some(NA)) {
            assert!(s.tokens.iter().all(|&t| t < spec.num_entities || t >= layout.cues + 8 * 2));
        }
    }

    #[test]
    fn target_uses_synonyms_and_its_own_fillers() {
        let spec = CorpusSpec {
            synonym_swap: 1.0,
            filler_divergence: 1.0,
            ..small()
        };
        let l = spec.layout();
        let c = gen_corpus(&spec).unwrap();
        for s in &c.target {
            let r = s.relation.unwrap();
            assert!(s.tokens.contains(&(l.synonyms + r - 1)));
            assert!(!s.tokens.iter().any(|t| (l.triggers..l.synonyms).contains(t)));
            assert!(!s.tokens.iter().any(|t| l.source_only.contains(t) || l.shared.contains(t)));
        }
    }

    #[test]
    fn small_vocab_is_rejected() {
        let spec = CorpusSpec {
            vocab_size: 50,
            ..small()
        };
        assert!(matches!(gen_corpus(&spec), Err(DataError::VocabTooSmall { .. })));
    }

    #[test]
    fn overlapping_outliers_rejected() {
        let spec = CorpusSpec {
            target_relations: vec![1, 6],
            ..small()
        };
        assert!(gen_corpus(&spec).is_err());
    }

    #[test]
    fn spec_round_trips_through_kv() {
        let spec = CorpusSpec {
            synonym_swap: 0.1 + 0.2,
            target_relations: vec![1, 3],
            ..small()
        };
        let mut back = CorpusSpec::default();
        back.apply_kv(&KvMap::parse(&spec.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
