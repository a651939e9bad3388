//! Instance encoders (CNN, PCNN, triple MLP) and the source relation classifier.

use crate::diffcore::{DiffError, ParamStore, Tape, Tensor, Var};
use crate::kv::KvMap;
use crate::pipeline::mask_na_loss;
use crate::rng::Rng;

/// Relation id reserved for "no relation".
pub const NA: usize = 0;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("instance {0} in a supervised batch has no label")]
    Unlabeled(usize),
    #[error("feature width {got} does not match expected {expected}")]
    Width { got: usize, expected: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Half-open token range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Index of the last token.
    pub fn last(&self) -> usize {
        self.end - 1
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceInstance {
    pub tokens: Vec<usize>,
    pub head: Span,
    pub tail: Span,
    pub relation: Option<usize>,
}

impl SentenceInstance {
    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<(), EncoderError> {
        let n = self.tokens.len();
        if n == 0 || n > max_len {
            return Err(EncoderError::Instance(format!("length {n} not in 1..={max_len}")));
        }
        for s in [&self.head, &self.tail] {
            if s.start >= s.end || s.end > n {
                return Err(EncoderError::Instance(format!(
                    "span [{}, {}) outside {n} tokens",
                    s.start, s.end
                )));
            }
        }
        if self.head.overlaps(&self.tail) {
            return Err(EncoderError::Instance("head and tail spans overlap".into()));
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(EncoderError::OutOfVocabulary { id, vocab });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripleLabel {
    Negative,
    Positive,
}

impl TripleLabel {
    pub fn class(self) -> usize {
        match self {
            TripleLabel::Negative => 0,
            TripleLabel::Positive => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripleInstance {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
    /// TransE-style input, typically `[head_vec, relation_vec, tail_vec]`.
    pub structural: Option<Vec<f64>>,
    pub label: Option<TripleLabel>,
}

/// A homogeneous list of instances.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Sentences(Vec<SentenceInstance>),
    Triples(Vec<TripleInstance>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Sentences(v) => v.len(),
            Dataset::Triples(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class label of instance `i`: the relation id for sentences,
    /// negative/positive (0/1) for triples.
    pub fn label(&self, i: usize) -> Option<usize> {
        match self {
            Dataset::Sentences(v) => v[i].relation,
            Dataset::Triples(v) => v[i].label.map(TripleLabel::class),
        }
    }

    pub fn labels(&self) -> Result<Vec<usize>, EncoderError> {
        (0..self.len())
            .map(|i| self.label(i).ok_or(EncoderError::Unlabeled(i)))
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        match self {
            Dataset::Sentences(v) => Dataset::Sentences(idx.iter().map(|&i| v[i].clone()).collect()),
            Dataset::Triples(v) => Dataset::Triples(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    /// Same instances with labels removed.
    pub fn unlabeled(&self) -> Dataset {
        match self {
            Dataset::Sentences(v) => Dataset::Sentences(
                v.iter()
                    .map(|s| SentenceInstance {
                        relation: None,
                        ..s.clone()
                    })
                    .collect(),
            ),
            Dataset::Triples(v) => Dataset::Triples(
                v.iter()
                    .map(|t| TripleInstance {
                        label: None,
                        ..t.clone()
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Cnn,
    Pcnn,
    Triple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub arch: Arch,
    /// Word width for sentences; entity/relation embedding width for triples.
    pub word_dim: usize,
    pub pos_dim: usize,
    pub kernel: usize,
    /// Filter count for CNN/PCNN; hidden width for the triple encoder.
    pub channels: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub vocab_size: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub structural_dim: usize,
    /// Half-width of the uniform initialization of embedding tables.
    pub embed_init: f64,
}

impl Default for EncoderConfig {
    /// Table settings of the original large-corpus setup (PCNN, 230 channels).
    fn default() -> Self {
        Self {
            arch: Arch::Pcnn,
            word_dim: 300,
            pos_dim: 5,
            kernel: 3,
            channels: 230,
            max_len: 120,
            dropout: 0.5,
            activation: Activation::Tanh,
            vocab_size: 1000,
            num_entities: 0,
            num_relations: 0,
            structural_dim: 0,
            embed_init: 0.05,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.channels == 0 {
            return bad("channels must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.word_dim == 0 {
            return bad("word_dim must be positive");
        }
        if !(self.embed_init >= 0.0 && self.embed_init.is_finite()) {
            return bad("embed_init must be a finite nonnegative real");
        }
        match self.arch {
            Arch::Cnn | Arch::Pcnn => {
                if self.vocab_size == 0 || self.max_len == 0 {
                    return bad("vocab_size and max_len must be positive");
                }
            }
            Arch::Triple => {
                if self.num_entities == 0 || self.num_relations == 0 {
                    return bad("triple encoder needs entity and relation counts");
                }
            }
        }
        Ok(())
    }

    /// Width of one embedded token row (sentences) or the concatenated
    /// triple input.
    pub fn input_width(&self) -> usize {
        match self.arch {
            Arch::Cnn | Arch::Pcnn => self.word_dim + 2 * self.pos_dim,
            Arch::Triple => 3 * self.word_dim + self.structural_dim,
        }
    }

    pub fn feature_width(&self) -> usize {
        match self.arch {
            Arch::Cnn | Arch::Triple => self.channels,
            Arch::Pcnn => 3 * self.channels,
        }
    }

    /// Position bucket of a relative offset, clipped to `±max_len`.
    pub fn position_bucket(&self, offset: isize) -> usize {
        let m = self.max_len as isize;
        (offset.clamp(-m, m) + m) as usize
    }

    fn position_rows(&self) -> usize {
        2 * self.max_len + 1
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set(
            "arch",
            match self.arch {
                Arch::Cnn => "cnn",
                Arch::Pcnn => "pcnn",
                Arch::Triple => "triple",
            },
        );
        m.set("word_dim", self.word_dim);
        m.set("pos_dim", self.pos_dim);
        m.set("kernel", self.kernel);
        m.set("channels", self.channels);
        m.set("max_len", self.max_len);
        m.set_f64("dropout", self.dropout);
        m.set(
            "activation",
            match self.activation {
                Activation::Tanh => "tanh",
                Activation::Relu => "relu",
            },
        );
        m.set("vocab_size", self.vocab_size);
        m.set("num_entities", self.num_entities);
        m.set("num_relations", self.num_relations);
        m.set("structural_dim", self.structural_dim);
        m.set_f64("embed_init", self.embed_init);
        m
    }

    /// Overrides the fields present in `m`.
    pub fn apply_kv(&mut self, m: &KvMap) -> Result<(), EncoderError> {
        let kv = |e: crate::kv::KvError| EncoderError::Config(e.to_string());
        m.check_known(&[
            "arch",
            "word_dim",
            "pos_dim",
            "kernel",
            "channels",
            "max_len",
            "dropout",
            "activation",
            "vocab_size",
            "num_entities",
            "num_relations",
            "structural_dim",
            "embed_init",
        ])
        .map_err(kv)?;
        if let Some(a) = m.get_str("arch") {
            self.arch = match a {
                "cnn" => Arch::Cnn,
                "pcnn" => Arch::Pcnn,
                "triple" => Arch::Triple,
                _ => return Err(EncoderError::Config(format!("unknown arch `{a}`"))),
            };
        }
        if let Some(a) = m.get_str("activation") {
            self.activation = match a {
                "tanh" => Activation::Tanh,
                "relu" => Activation::Relu,
                _ => return Err(EncoderError::Config(format!("unknown activation `{a}`"))),
            };
        }
        m.read_into("word_dim", &mut self.word_dim).map_err(kv)?;
        m.read_into("pos_dim", &mut self.pos_dim).map_err(kv)?;
        m.read_into("kernel", &mut self.kernel).map_err(kv)?;
        m.read_into("channels", &mut self.channels).map_err(kv)?;
        m.read_into("max_len", &mut self.max_len).map_err(kv)?;
        m.read_into("dropout", &mut self.dropout).map_err(kv)?;
        m.read_into("vocab_size", &mut self.vocab_size).map_err(kv)?;
        m.read_into("num_entities", &mut self.num_entities).map_err(kv)?;
        m.read_into("num_relations", &mut self.num_relations).map_err(kv)?;
        m.read_into("structural_dim", &mut self.structural_dim).map_err(kv)?;
        m.read_into("embed_init", &mut self.embed_init).map_err(kv)?;
        self.validate()
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var, DiffError> {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
    }
}

/// One feature extractor `F(x; θ)` whose parameters live under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub prefix: String,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: EncoderConfig) -> Result<Self, EncoderError> {
        cfg.validate()?;
        Ok(Self {
            prefix: prefix.to_string(),
            cfg,
        })
    }

    fn p(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<(), EncoderError> {
        let c = &self.cfg;
        match c.arch {
            Arch::Cnn | Arch::Pcnn => {
                store.insert_uniform(&self.p("word_emb"), &[c.vocab_size, c.word_dim], c.embed_init, rng)?;
                if c.pos_dim > 0 {
                    for name in ["pos_head", "pos_tail"] {
                        store.insert_uniform(&self.p(name), &[c.position_rows(), c.pos_dim], c.embed_init, rng)?;
                    }
                }
                let fan_in = c.kernel * c.input_width();
                store.insert_uniform(
                    &self.p("conv_w"),
                    &[c.channels, fan_in],
                    glorot(fan_in, c.channels),
                    rng,
                )?;
                store.insert(&self.p("conv_b"), Tensor::zeros(&[c.channels]))?;
            }
            Arch::Triple => {
                store.insert_uniform(&self.p("ent_emb"), &[c.num_entities, c.word_dim], c.embed_init, rng)?;
                store.insert_uniform(&self.p("rel_emb"), &[c.num_relations, c.word_dim], c.embed_init, rng)?;
                let fan_in = c.input_width();
                store.insert_uniform(
                    &self.p("hidden_w"),
                    &[fan_in, c.channels],
                    glorot(fan_in, c.channels),
                    rng,
                )?;
                store.insert(&self.p("hidden_b"), Tensor::zeros(&[c.channels]))?;
            }
        }
        Ok(())
    }

    /// Embeds one sentence: row `i` is the word vector of token `i` followed
    /// by the head- and tail-relative position vectors.
    pub fn embed_sentence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inst: &SentenceInstance,
    ) -> Result<Var, EncoderError> {
        let (x, _) = self.embed_batch(tape, store, &[inst])?;
        Ok(x)
    }

    fn embed_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&SentenceInstance],
    ) -> Result<(Var, Vec<(usize, usize)>), EncoderError> {
        let c = &self.cfg;
        let mut words = Vec::new();
        let mut heads = Vec::new();
        let mut tails = Vec::new();
        let mut bounds = Vec::with_capacity(batch.len());
        for inst in batch {
            if let Some(&id) = inst.tokens.iter().find(|&&t| t >= c.vocab_size) {
                return Err(EncoderError::OutOfVocabulary { id, vocab: c.vocab_size });
            }
            if inst.tokens.is_empty() {
                return Err(EncoderError::Instance("empty sentence".into()));
            }
            let start = words.len();
            for (i, &tok) in inst.tokens.iter().enumerate() {
                words.push(tok);
                heads.push(c.position_bucket(i as isize - inst.head.start as isize));
                tails.push(c.position_bucket(i as isize - inst.tail.start as isize));
            }
            bounds.push((start, words.len()));
        }
        let table = tape.param(store, &self.p("word_emb"))?;
        let w = tape.embedding(table, &words)?;
        if c.pos_dim == 0 {
            return Ok((w, bounds));
        }
        let ph = tape.param(store, &self.p("pos_head"))?;
        let pt = tape.param(store, &self.p("pos_tail"))?;
        let h = tape.embedding(ph, &heads)?;
        let t = tape.embedding(pt, &tails)?;
        Ok((tape.hconcat(&[w, h, t])?, bounds))
    }

    fn convolve(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        bounds: &[(usize, usize)],
    ) -> Result<Var, EncoderError> {
        let width = tape.value(x).cols();
        if width != self.cfg.input_width() {
            return Err(EncoderError::Width {
                got: width,
                expected: self.cfg.input_width(),
            });
        }
        let w = tape.param(store, &self.p("conv_w"))?;
        let b = tape.param(store, &self.p("conv_b"))?;
        Ok(tape.conv1d(x, w, b, self.cfg.kernel, bounds)?)
    }

    /// Convolution, global max-pool, activation, dropout.
    pub fn cnn_encode(&self, tape: &mut Tape, store: &ParamStore, matrix: Var) -> Result<Var, EncoderError> {
        let n = tape.value(matrix).rows();
        let conv = self.convolve(tape, store, matrix, &[(0, n)])?;
        let pooled = tape.segment_max_pool(conv, &[vec![(0, n)]])?;
        self.finish(tape, pooled)
    }

    /// Convolution, max-pool over the three entity-delimited segments,
    /// activation, dropout. `head_pos`/`tail_pos` are the entities' last
    /// token indices, in either order.
    pub fn pcnn_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        matrix: Var,
        head_pos: usize,
        tail_pos: usize,
    ) -> Result<Var, EncoderError> {
        let n = tape.value(matrix).rows();
        let segs = piecewise_segments(head_pos, tail_pos, n)?;
        let conv = self.convolve(tape, store, matrix, &[(0, n)])?;
        let pooled = tape.segment_max_pool(conv, &[segs])?;
        self.finish(tape, pooled)
    }

    fn finish(&self, tape: &mut Tape, pooled: Var) -> Result<Var, EncoderError> {
        let a = activate(tape, pooled, self.cfg.activation)?;
        Ok(tape.dropout(a, self.cfg.dropout)?)
    }

    /// Hidden affine + activation over the concatenated entity, relation and
    /// structural inputs of each triple.
    pub fn encode_triples(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&TripleInstance],
    ) -> Result<Var, EncoderError> {
        let c = &self.cfg;
        if batch.is_empty() {
            return Err(EncoderError::Instance("empty triple batch".into()));
        }
        for t in batch {
            if t.head >= c.num_entities || t.tail >= c.num_entities || t.relation >= c.num_relations {
                return Err(EncoderError::Instance(format!(
                    "triple ({}, {}, {}) outside catalog of {} entities / {} relations",
                    t.head, t.relation, t.tail, c.num_entities, c.num_relations
                )));
            }
        }
        let ent = tape.param(store, &self.p("ent_emb"))?;
        let rel = tape.param(store, &self.p("rel_emb"))?;
        let heads: Vec<usize> = batch.iter().map(|t| t.head).collect();
        let rels: Vec<usize> = batch.iter().map(|t| t.relation).collect();
        let tails: Vec<usize> = batch.iter().map(|t| t.tail).collect();
        let h = tape.embedding(ent, &heads)?;
        let r = tape.embedding(rel, &rels)?;
        let t = tape.embedding(ent, &tails)?;
        let mut parts = vec![h, r, t];
        if c.structural_dim > 0 {
            let mut rows = Vec::with_capacity(batch.len());
            for tr in batch {
                match &tr.structural {
                    Some(v) if v.len() == c.structural_dim => rows.push(v.clone()),
                    Some(v) => {
                        return Err(EncoderError::Width {
                            got: v.len(),
                            expected: c.structural_dim,
                        })
                    }
                    None => rows.push(vec![0.0; c.structural_dim]),
                }
            }
            parts.push(tape.input(Tensor::from_rows(&rows)?)?);
        }
        let x = tape.hconcat(&parts)?;
        let w = tape.param(store, &self.p("hidden_w"))?;
        let b = tape.param(store, &self.p("hidden_b"))?;
        let hdn = tape.affine(x, w, Some(b))?;
        self.finish(tape, hdn)
    }

    /// Features `[batch, feature_width]` for the instances `idx` of `data`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        data: &Dataset,
        idx: &[usize],
    ) -> Result<Var, EncoderError> {
        match data {
            Dataset::Sentences(v) => {
                let batch: Vec<&SentenceInstance> = idx.iter().map(|&i| &v[i]).collect();
                self.encode_sentences(tape, store, &batch)
            }
            Dataset::Triples(v) => {
                let batch: Vec<&TripleInstance> = idx.iter().map(|&i| &v[i]).collect();
                self.encode_triples(tape, store, &batch)
            }
        }
    }

    pub fn encode_sentences(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&SentenceInstance],
    ) -> Result<Var, EncoderError> {
        if batch.is_empty() {
            return Err(EncoderError::Instance("empty sentence batch".into()));
        }
        let (x, bounds) = self.embed_batch(tape, store, batch)?;
        let conv = self.convolve(tape, store, x, &bounds)?;
        let groups = match self.cfg.arch {
            Arch::Cnn => bounds.iter().map(|&b| vec![b]).collect::<Vec<_>>(),
            Arch::Pcnn => batch
                .iter()
                .zip(&bounds)
                .map(|(inst, &(s, e))| {
                    piecewise_segments(inst.head.last(), inst.tail.last(), e - s)
                        .map(|segs| segs.into_iter().map(|(a, b)| (a + s, b + s)).collect())
                })
                .collect::<Result<Vec<_>, _>>()?,
            Arch::Triple => {
                return Err(EncoderError::Config("triple encoder cannot read sentences".into()))
            }
        };
        let pooled = tape.segment_max_pool(conv, &groups)?;
        self.finish(tape, pooled)
    }

    /// Evaluation-mode features as plain rows (no dropout, no gradient).
    pub fn features(&self, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>, EncoderError> {
        let mut out = Vec::with_capacity(data.len());
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let f = self.encode(&mut tape, store, data, chunk)?;
            let t = tape.value(f);
            for r in 0..t.rows() {
                out.push(t.row(r).to_vec());
            }
        }
        Ok(out)
    }
}

/// Row ranges `[0, p1]`, `(p1, p2]`, `(p2, n)` for ordered entity end
/// positions `p1 < p2`; a range may be empty.
pub fn piecewise_segments(a: usize, b: usize, n: usize) -> Result<Vec<(usize, usize)>, EncoderError> {
    let (p1, p2) = if a <= b { (a, b) } else { (b, a) };
    if p1 == p2 || p2 >= n {
        return Err(EncoderError::Instance(format!(
            "entity positions {a}, {b} invalid for length {n}"
        )));
    }
    Ok(vec![(0, p1 + 1), (p1 + 1, p2 + 1), (p2 + 1, n)])
}

/// Softmax relation classifier `C` over `classes` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub prefix: String,
    pub input: usize,
    pub classes: usize,
}

impl Classifier {
    pub fn new(prefix: &str, input: usize, classes: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            input,
            classes,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<(), EncoderError> {
        store.insert_uniform(
            &format!("{}.w", self.prefix),
            &[self.input, self.classes],
            glorot(self.input, self.classes),
            rng,
        )?;
        store.insert(&format!("{}.b", self.prefix), Tensor::zeros(&[self.classes]))?;
        Ok(())
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var, EncoderError> {
        let width = tape.value(f).cols();
        if width != self.input {
            return Err(EncoderError::Width {
                got: width,
                expected: self.input,
            });
        }
        let w = tape.param(store, &format!("{}.w", self.prefix))?;
        let b = tape.param(store, &format!("{}.b", self.prefix))?;
        Ok(tape.affine(f, w, Some(b))?)
    }

    /// Class probabilities, one row per feature row.
    pub fn classify(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var, EncoderError> {
        let z = self.logits(tape, store, f)?;
        Ok(tape.softmax(z)?)
    }

    /// Evaluation-mode probabilities for precomputed feature rows.
    pub fn predict(&self, store: &ParamStore, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EncoderError> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let f = tape.input(Tensor::from_rows(features)?)?;
        let p = self.classify(&mut tape, store, f)?;
        let t = tape.value(p);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }
}

/// Mean cross-entropy `-log p(y|x)` over a labeled batch.
///
/// With `mask_na`, NA-labeled instances contribute exactly zero loss and no
/// gradient, and the mean runs over the remaining instances; a batch of only
/// NA instances has loss 0.
pub fn source_loss(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &Encoder,
    classifier: &Classifier,
    data: &Dataset,
    idx: &[usize],
    mask_na: bool,
) -> Result<Var, EncoderError> {
    let labels: Vec<usize> = idx
        .iter()
        .map(|&i| data.label(i).ok_or(EncoderError::Unlabeled(i)))
        .collect::<Result<_, _>>()?;
    let f = encoder.encode(tape, store, data, idx)?;
    cross_entropy(tape, store, classifier, f, &labels, mask_na)
}

/// Cross-entropy of `classifier` on features `f` against `labels`.
pub fn cross_entropy(
    tape: &mut Tape,
    store: &ParamStore,
    classifier: &Classifier,
    f: Var,
    labels: &[usize],
    mask_na: bool,
) -> Result<Var, EncoderError> {
    let z = classifier.logits(tape, store, f)?;
    let ls = tape.log_softmax(z)?;
    let picked = tape.pick(ls, labels)?;
    let per = tape.scale(picked, -1.0)?;
    if !mask_na {
        return Ok(tape.mean(per)?);
    }
    let kept = labels.iter().filter(|&&y| y != NA).count();
    if kept == 0 {
        return Ok(tape.input(Tensor::scalar(0.0))?);
    }
    let masked = mask_na_loss(tape, per, labels)?;
    let total = tape.sum(masked)?;
    Ok(tape.scale(total, 1.0 / kept as f64)?)
}
