use std::collections::BTreeSet;

use super::DataError;
use crate::encoders::{TripleInstance, TripleLabel};
use crate::kv::KvMap;
use crate::rng::Rng;

/// Synthetic knowledge graph with planted translation geometry.
///
/// Entities sit on a `groups x slots` lattice: entity `g * slots + s` has
/// structural vector `g * u + s * v (+ noise)`. Relation `r` moves an
/// entity by a fixed lattice step `(dg_r, ds_r)`, so its offset is
/// `dg_r * u + ds_r * v` and every positive satisfies
/// `tail = head + offset` up to the noise.
///
/// The structural vectors of the low-resource relations carry a common
/// drift of norm `low_resource_drift` in a random direction, standing in
/// for relation embeddings estimated from very few triples.
#[derive(Clone, Debug, PartialEq)]
pub struct KgSpec {
    pub num_entities: usize,
    pub groups: usize,
    pub num_relations: usize,
    pub low_resource_relations: Vec<usize>,
    /// Positives kept per high-resource relation (fewer if the pattern has
    /// fewer).
    pub triples_per_relation: usize,
    /// Labeled positives per low-resource relation.
    pub low_resource_triples: usize,
    /// Held-out positives per low-resource relation.
    pub test_triples: usize,
    pub negative_ratio: usize,
    pub dim: usize,
    pub noise: f64,
    pub low_resource_drift: f64,
    pub seed: u64,
}

impl Default for KgSpec {
    fn default() -> Self {
        Self {
            num_entities: 50,
            groups: 5,
            num_relations: 10,
            low_resource_relations: vec![7, 8, 9],
            triples_per_relation: 30,
            low_resource_triples: 10,
            test_triples: 20,
            negative_ratio: 1,
            dim: 4,
            noise: 0.0,
            low_resource_drift: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgData {
    /// High-resource relations, positives and negatives.
    pub source: Vec<TripleInstance>,
    /// Labeled low-resource triples.
    pub target: Vec<TripleInstance>,
    /// Held-out low-resource triples.
    pub test: Vec<TripleInstance>,
    pub entity_vectors: Vec<Vec<f64>>,
    pub relation_vectors: Vec<Vec<f64>>,
    /// Every positive implied by the planted patterns.
    pub truth: BTreeSet<(usize, usize, usize)>,
    /// Lattice step `(dg, ds)` of each relation.
    pub patterns: Vec<(isize, isize)>,
    /// Vector added to the structural offset of every low-resource relation.
    pub drift: Vec<f64>,
}

impl KgData {
    /// `[h, r, t, h + r - t]` over the structural vectors.
    pub fn structural(&self, h: usize, r: usize, t: usize) -> Vec<f64> {
        let (eh, or, et) = (&self.entity_vectors[h], &self.relation_vectors[r], &self.entity_vectors[t]);
        let mut v = eh.clone();
        v.extend_from_slice(or);
        v.extend_from_slice(et);
        v.extend(eh.iter().zip(or).zip(et).map(|((a, b), c)| a + b - c));
        v
    }

    pub fn triple(&self, h: usize, r: usize, t: usize, label: Option<TripleLabel>) -> TripleInstance {
        TripleInstance {
            head: h,
            relation: r,
            tail: t,
            structural: Some(self.structural(h, r, t)),
            label,
        }
    }
}

impl KgSpec {
    pub fn slots(&self) -> usize {
        self.num_entities / self.groups.max(1)
    }

    pub fn structural_dim(&self) -> usize {
        4 * self.dim
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.groups < 2 || self.num_entities % self.groups != 0 || self.slots() < 4 {
            return Err(DataError::EntityPool(format!(
                "{} entities cannot form {} groups of at least 4",
                self.num_entities, self.groups
            )));
        }
        if self.num_relations == 0 || self.dim < 2 {
            return bad("num_relations and dim must be positive (dim >= 2)".into());
        }
        if self.low_resource_relations.iter().any(|&r| r >= self.num_relations) {
            return bad("low-resource relation id out of range".into());
        }
        if self.low_resource_relations.is_empty() || self.low_resource_relations.len() == self.num_relations {
            return bad("both high- and low-resource relations are needed".into());
        }
        if self.triples_per_relation == 0 || self.low_resource_triples == 0 || self.test_triples == 0 {
            return bad("triple counts must be positive".into());
        }
        if self.negative_ratio == 0 {
            return bad("negative_ratio must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite nonnegative real".into());
        }
        if !(self.low_resource_drift >= 0.0 && self.low_resource_drift.is_finite()) {
            return bad("low_resource_drift must be a finite nonnegative real".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("num_entities", self.num_entities);
        m.set("groups", self.groups);
        m.set("num_relations", self.num_relations);
        m.set_list("low_resource_relations", &self.low_resource_relations);
        m.set("triples_per_relation", self.triples_per_relation);
        m.set("low_resource_triples", self.low_resource_triples);
        m.set("test_triples", self.test_triples);
        m.set("negative_ratio", self.negative_ratio);
        m.set("dim", self.dim);
        m.set_f64("noise", self.noise);
        m.set_f64("low_resource_drift", self.low_resource_drift);
        m.set("seed", self.seed);
        m
    }

    pub fn apply_kv(&mut self, m: &KvMap) -> Result<(), DataError> {
        m.check_known(&[
            "num_entities",
            "groups",
            "num_relations",
            "low_resource_relations",
            "triples_per_relation",
            "low_resource_triples",
            "test_triples",
            "negative_ratio",
            "dim",
            "noise",
            "low_resource_drift",
            "seed",
        ])?;
        m.read_into("num_entities", &mut self.num_entities)?;
        m.read_into("groups", &mut self.groups)?;
        m.read_into("num_relations", &mut self.num_relations)?;
        if let Some(v) = m.get_list("low_resource_relations")? {
            self.low_resource_relations = v;
        }
        m.read_into("triples_per_relation", &mut self.triples_per_relation)?;
        m.read_into("low_resource_triples", &mut self.low_resource_triples)?;
        m.read_into("test_triples", &mut self.test_triples)?;
        m.read_into("negative_ratio", &mut self.negative_ratio)?;
        m.read_into("dim", &mut self.dim)?;
        m.read_into("noise", &mut self.noise)?;
        m.read_into("low_resource_drift", &mut self.low_resource_drift)?;
        m.read_into("seed", &mut self.seed)?;
        Ok(())
    }
}

fn positives(groups: usize, slots: usize, (dg, ds): (isize, isize)) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for g in 0..groups as isize {
        for s in 0..slots as isize {
            let (g2, s2) = (g + dg, s + ds);
            if (0..groups as isize).contains(&g2) && (0..slots as isize).contains(&s2) {
                out.push(((g * slots as isize + s) as usize, (g2 * slots as isize + s2) as usize));
            }
        }
    }
    out
}

pub fn gen_kg(spec: &KgSpec) -> Result<KgData, DataError> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, 0x4B);
    let (groups, slots) = (spec.groups, spec.slots());
    let low: BTreeSet<usize> = spec.low_resource_relations.iter().copied().collect();

    let mut u: Vec<f64> = (0..spec.dim).map(|_| rng.normal(0.0, 1.0)).collect();
    let mut v: Vec<f64> = (0..spec.dim).map(|_| rng.normal(0.0, 1.0)).collect();
    // Gram-Schmidt so the two lattice directions are orthonormal
    normalize(&mut u);
    let d = dot(&u, &v);
    v.iter_mut().zip(&u).for_each(|(x, y)| *x -= d * y);
    normalize(&mut v);

    let entity_vectors: Vec<Vec<f64>> = (0..spec.num_entities)
        .map(|e| {
            let (g, s) = ((e / slots) as f64, (e % slots) as f64);
            (0..spec.dim)
                .map(|k| g * u[k] + 0.5 * s * v[k] + if spec.noise > 0.0 { rng.normal(0.0, spec.noise) } else { 0.0 })
                .collect()
        })
        .collect();

    let need_low = spec.low_resource_triples + spec.test_triples;
    let mut steps: Vec<(isize, isize)> = Vec::new();
    let max_ds = (slots / 2) as isize;
    for dg in -1..=1isize {
        for ds in -max_ds..=max_ds {
            if (dg, ds) != (0, 0) {
                steps.push((dg, ds));
            }
        }
    }
    rng.shuffle(&mut steps);
    let mut patterns = Vec::with_capacity(spec.num_relations);
    let mut spare = steps.into_iter();
    for r in 0..spec.num_relations {
        let need = if low.contains(&r) { need_low } else { 1 };
        let step = spare
            .by_ref()
            .find(|&st| positives(groups, slots, st).len() >= need)
            .ok_or_else(|| DataError::EntityPool(format!("not enough distinct lattice patterns for relation {r}")))?;
        patterns.push(step);
    }
    let mut drift: Vec<f64> = (0..spec.dim).map(|_| rng.normal(0.0, 1.0)).collect();
    normalize(&mut drift);
    drift.iter_mut().for_each(|x| *x *= spec.low_resource_drift);
    let relation_vectors: Vec<Vec<f64>> = patterns
        .iter()
        .enumerate()
        .map(|(r, &(dg, ds))| {
            (0..spec.dim)
                .map(|k| {
                    let shift = if low.contains(&r) { drift[k] } else { 0.0 };
                    let eps = if spec.noise > 0.0 { rng.normal(0.0, spec.noise) } else { 0.0 };
                    dg as f64 * u[k] + 0.5 * ds as f64 * v[k] + shift + eps
                })
                .collect()
        })
        .collect();

    let mut truth = BTreeSet::new();
    let mut per_relation = Vec::with_capacity(spec.num_relations);
    for (r, &st) in patterns.iter().enumerate() {
        let pos = positives(groups, slots, st);
        truth.extend(pos.iter().map(|&(h, t)| (h, r, t)));
        per_relation.push(pos);
    }

    let mut data = KgData {
        source: Vec::new(),
        target: Vec::new(),
        test: Vec::new(),
        entity_vectors,
        relation_vectors,
        truth,
        patterns,
        drift,
    };
    for (r, mut pos) in per_relation.into_iter().enumerate() {
        rng.shuffle(&mut pos);
        if low.contains(&r) {
            let (train, rest) = pos.split_at(spec.low_resource_triples);
            let test = &rest[..spec.test_triples];
            let t = with_negatives(&data, &mut rng, r, train, spec);
            data.target.extend(t);
            let t = with_negatives(&data, &mut rng, r, test, spec);
            data.test.extend(t);
        } else {
            let keep = &pos[..spec.triples_per_relation.min(pos.len())];
            let t = with_negatives(&data, &mut rng, r, keep, spec);
            data.source.extend(t);
        }
    }
    rng.shuffle(&mut data.source);
    rng.shuffle(&mut data.target);
    rng.shuffle(&mut data.test);
    Ok(data)
}

/// Positives of relation `r` followed by `negative_ratio` corruptions of
/// each, replacing head or tail by an entity that makes a false triple.
fn with_negatives(data: &KgData, rng: &mut Rng, r: usize, pos: &[(usize, usize)], spec: &KgSpec) -> Vec<TripleInstance> {
    let mut out = Vec::with_capacity(pos.len() * (1 + spec.negative_ratio));
    for &(h, t) in pos {
        out.push(data.triple(h, r, t, Some(TripleLabel::Positive)));
        for _ in 0..spec.negative_ratio {
            loop {
                let e = rng.below(spec.num_entities);
                let (h2, t2) = if rng.bernoulli(0.5) { (e, t) } else { (h, e) };
                if !data.truth.contains(&(h2, r, t2)) {
                    out.push(data.triple(h2, r, t2, Some(TripleLabel::Negative)));
                    break;
                }
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(a: &mut [f64]) {
    let n = dot(a, a).sqrt();
    a.iter_mut().for_each(|x| *x /= n);
}
