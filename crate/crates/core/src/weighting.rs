//! Relation weights, instance weights, the relation gate and their fusion.

use std::fmt::Write as _;

use crate::adversary::{AdversaryError, Discriminator};
use crate::diffcore::{DiffError, ParamStore, Tape, Tensor, Var};
#[cfg(test)]
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum WeightError {
    #[error("no target instances to average over")]
    EmptyTarget,
    #[error("prediction rows have inconsistent widths")]
    Ragged,
    #[error("label {label} outside {classes} relation weights")]
    Label { label: usize, classes: usize },
    #[error("{labels} labels for {weights} instance weights")]
    Count { labels: usize, weights: usize },
    #[error("all raw importance weights are zero")]
    Degenerate,
    #[error("weight table is frozen")]
    Frozen,
    #[error("weight table is missing {0}")]
    Incomplete(&'static str),
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("weight file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Mean of the class-probability rows: the expected share of each source
/// relation in the target data.
pub fn relation_weights(predictions: &[Vec<f64>]) -> Result<Vec<f64>, WeightError> {
    let Some(first) = predictions.first() else {
        return Err(WeightError::EmptyTarget);
    };
    let k = first.len();
    let mut w = vec![0.0; k];
    for p in predictions {
        if p.len() != k {
            return Err(WeightError::Ragged);
        }
        for (a, b) in w.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = predictions.len() as f64;
    w.iter_mut().for_each(|v| *v /= n);
    Ok(w)
}

/// `1 - D_a(f)` for each source score `D_a(f)`.
pub fn instance_weights_from_scores(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|d| 1.0 - d).collect()
}

pub fn instance_weights(
    store: &ParamStore,
    aux: &Discriminator,
    source_features: &[Vec<f64>],
) -> Result<Vec<f64>, WeightError> {
    Ok(instance_weights_from_scores(&aux.scores(store, source_features)?))
}

/// Relation gate `alpha = sigmoid(W_r . mean(F_t(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub prefix: String,
    pub width: usize,
}

impl Gate {
    pub fn new(prefix: &str, width: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            width,
        }
    }

    fn name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    /// `W_r` starts at zero, i.e. `alpha = 0.5`.
    pub fn init(&self, store: &mut ParamStore) -> Result<(), DiffError> {
        store.insert(&self.name(), Tensor::zeros(&[self.width, 1]))
    }

    /// In-graph gate value from a `[width]` mean feature.
    pub fn alpha_var(&self, tape: &mut Tape, store: &ParamStore, mean_feature: Var) -> Result<Var, DiffError> {
        let w = tape.param(store, &self.name())?;
        let z = tape.affine(mean_feature, w, None)?;
        let a = tape.sigmoid(z)?;
        tape.reshape(a, &[1])
    }

    pub fn alpha(&self, store: &ParamStore, target_features: &[Vec<f64>]) -> Result<f64, WeightError> {
        let mean = mean_row(target_features)?;
        let mut tape = Tape::new();
        let m = tape.input(Tensor::vector(mean))?;
        let a = self.alpha_var(&mut tape, store, m)?;
        Ok(tape.value(a).item())
    }

    /// One gate value per class, each from the mean feature of the target
    /// instances pseudo-labeled with that class; classes without any such
    /// instance get the pooled value.
    pub fn alpha_per_relation(
        &self,
        store: &ParamStore,
        target_features: &[Vec<f64>],
        pseudo_labels: &[usize],
        classes: usize,
    ) -> Result<Vec<f64>, WeightError> {
        if pseudo_labels.len() != target_features.len() {
            return Err(WeightError::Count {
                labels: pseudo_labels.len(),
                weights: target_features.len(),
            });
        }
        let pooled = self.alpha(store, target_features)?;
        (0..classes)
            .map(|k| {
                let rows: Vec<Vec<f64>> = target_features
                    .iter()
                    .zip(pseudo_labels)
                    .filter(|(_, &y)| y == k)
                    .map(|(f, _)| f.clone())
                    .collect();
                if rows.is_empty() {
                    Ok(pooled)
                } else {
                    self.alpha(store, &rows)
                }
            })
            .collect()
    }
}

fn mean_row(rows: &[Vec<f64>]) -> Result<Vec<f64>, WeightError> {
    relation_weights(rows)
}

/// `raw_i = alpha . w_i^instance + (1 - alpha) . w_{y_i}^relation`, rescaled
/// so the weights average to exactly 1.
pub fn total_weights(
    alpha: f64,
    instance: &[f64],
    relation: &[f64],
    labels: &[usize],
) -> Result<Vec<f64>, WeightError> {
    total_weights_gated(&Alpha::Scalar(alpha), instance, relation, labels)
}

/// As [`total_weights`] with either one gate value or one per class.
pub fn total_weights_gated(
    alpha: &Alpha,
    instance: &[f64],
    relation: &[f64],
    labels: &[usize],
) -> Result<Vec<f64>, WeightError> {
    if labels.len() != instance.len() {
        return Err(WeightError::Count {
            labels: labels.len(),
            weights: instance.len(),
        });
    }
    let mut raw = Vec::with_capacity(labels.len());
    for (&y, &wi) in labels.iter().zip(instance) {
        let wr = *relation.get(y).ok_or(WeightError::Label {
            label: y,
            classes: relation.len(),
        })?;
        let a = alpha.for_label(y)?;
        raw.push(a * wi + (1.0 - a) * wr);
    }
    normalize(raw)
}

fn normalize(raw: Vec<f64>) -> Result<Vec<f64>, WeightError> {
    let s: f64 = raw.iter().sum();
    if !(s > 0.0) {
        return Err(WeightError::Degenerate);
    }
    let n = raw.len() as f64;
    Ok(raw.into_iter().map(|r| n * r / s).collect())
}

/// Gate value(s) applied when fusing weights.
#[derive(Clone, Debug, PartialEq)]
pub enum Alpha {
    Scalar(f64),
    PerRelation(Vec<f64>),
}

impl Alpha {
    pub fn for_label(&self, y: usize) -> Result<f64, WeightError> {
        let a = match self {
            Alpha::Scalar(a) => *a,
            Alpha::PerRelation(v) => *v.get(y).ok_or(WeightError::Label {
                label: y,
                classes: v.len(),
            })?,
        };
        if !(0.0..=1.0).contains(&a) {
            return Err(WeightError::Alpha(a));
        }
        Ok(a)
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Alpha::Scalar(a) => vec![*a],
            Alpha::PerRelation(v) => v.clone(),
        }
    }
}

/// Write-once store of the importance weights used by the weighted
/// adversarial objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightTable {
    relation_weights: Option<Vec<f64>>,
    instance_weights: Option<Vec<f64>>,
    alpha: Option<Alpha>,
    total_weights: Option<Vec<f64>>,
    frozen: bool,
}

impl WeightTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn writable(&self) -> Result<(), WeightError> {
        if self.frozen {
            Err(WeightError::Frozen)
        } else {
            Ok(())
        }
    }

    pub fn set_relation_weights(&mut self, w: Vec<f64>) -> Result<(), WeightError> {
        self.writable()?;
        self.relation_weights = Some(w);
        Ok(())
    }

    pub fn set_instance_weights(&mut self, w: Vec<f64>) -> Result<(), WeightError> {
        self.writable()?;
        self.instance_weights = Some(w);
        Ok(())
    }

    pub fn set_alpha(&mut self, a: Alpha) -> Result<(), WeightError> {
        self.writable()?;
        self.alpha = Some(a);
        Ok(())
    }

    /// Fuses the stored weights for the given source labels.
    pub fn compute_totals(&mut self, labels: &[usize]) -> Result<(), WeightError> {
        self.writable()?;
        let t = total_weights_gated(
            self.alpha()?,
            self.instance_weights()?,
            self.relation_weights()?,
            labels,
        )?;
        self.total_weights = Some(t);
        Ok(())
    }

    /// Overrides the fused weights (e.g. all ones for the unweighted
    /// baseline).
    pub fn set_total_weights(&mut self, w: Vec<f64>) -> Result<(), WeightError> {
        self.writable()?;
        self.total_weights = Some(w);
        Ok(())
    }

    pub fn freeze(&mut self) -> Result<(), WeightError> {
        self.relation_weights()?;
        self.instance_weights()?;
        self.alpha()?;
        self.total_weights()?;
        self.frozen = true;
        Ok(())
    }

    pub fn relation_weights(&self) -> Result<&[f64], WeightError> {
        self.relation_weights
            .as_deref()
            .ok_or(WeightError::Incomplete("relation weights"))
    }

    pub fn instance_weights(&self) -> Result<&[f64], WeightError> {
        self.instance_weights
            .as_deref()
            .ok_or(WeightError::Incomplete("instance weights"))
    }

    pub fn alpha(&self) -> Result<&Alpha, WeightError> {
        self.alpha.as_ref().ok_or(WeightError::Incomplete("alpha"))
    }

    pub fn total_weights(&self) -> Result<&[f64], WeightError> {
        self.total_weights
            .as_deref()
            .ok_or(WeightError::Incomplete("total weights"))
    }

    /// Line-oriented text: a `[section]` header followed by one
    /// `index value` pair per line, for each populated field, then the
    /// frozen flag.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let alpha = self.alpha.as_ref().map(Alpha::values);
        let alpha_section = match self.alpha {
            Some(Alpha::PerRelation(_)) => "alpha_per_relation",
            _ => "alpha",
        };
        for (name, values) in [
            ("relation_weights", self.relation_weights.as_ref()),
            ("instance_weights", self.instance_weights.as_ref()),
            (alpha_section, alpha.as_ref()),
            ("total_weights", self.total_weights.as_ref()),
        ] {
            if let Some(v) = values {
                let _ = writeln!(out, "[{name}]");
                for (i, x) in v.iter().enumerate() {
                    let _ = writeln!(out, "{i} {x:?}");
                }
            }
        }
        let _ = writeln!(out, "[frozen]\n{}", self.frozen);
        out
    }

    pub fn from_text(text: &str) -> Result<Self, WeightError> {
        let mut table = WeightTable::new();
        let mut section = String::new();
        let mut values: Vec<f64> = Vec::new();
        let mut frozen = false;
        let flush = |table: &mut WeightTable, section: &str, values: &mut Vec<f64>| {
            let v = std::mem::take(values);
            match section {
                "relation_weights" => table.relation_weights = Some(v),
                "instance_weights" => table.instance_weights = Some(v),
                "alpha" => table.alpha = v.first().map(|&a| Alpha::Scalar(a)),
                "alpha_per_relation" => table.alpha = Some(Alpha::PerRelation(v)),
                "total_weights" => table.total_weights = Some(v),
                _ => {}
            }
        };
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: &str| WeightError::Parse {
                line: no + 1,
                msg: msg.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                flush(&mut table, &section, &mut values);
                match name {
                    "relation_weights" | "instance_weights" | "alpha" | "alpha_per_relation"
                    | "total_weights" | "frozen" => section = name.to_string(),
                    _ => return Err(err(&format!("unknown section {name}"))),
                }
                continue;
            }
            if section == "frozen" {
                frozen = line.parse().map_err(|_| err("frozen flag must be true or false"))?;
                continue;
            }
            if section.is_empty() {
                return Err(err("value before any section"));
            }
            let mut parts = line.split_whitespace();
            let idx: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("expected an index"))?;
            let val: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("expected a value"))?;
            if parts.next().is_some() || idx != values.len() || !val.is_finite() {
                return Err(err("expected consecutive `index value` pairs"));
            }
            values.push(val);
        }
        flush(&mut table, &section, &mut values);
        if frozen {
            table.freeze()?;
        }
        Ok(table)
    }

    /// Random fully populated table.
    #[cfg(test)]
    fn populated(rng: &mut Rng, n: usize, k: usize) -> Self {
        let mut t = WeightTable::new();
        let rel: Vec<f64> = (0..k).map(|_| rng.next_f64()).collect();
        let s: f64 = rel.iter().sum();
        t.set_relation_weights(rel.iter().map(|v| v / s).collect()).unwrap();
        t.set_instance_weights((0..n).map(|_| rng.next_f64()).collect()).unwrap();
        t.set_alpha(Alpha::Scalar(rng.next_f64())).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        t.compute_totals(&labels).unwrap();
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn relation_weight_examples() {
        let uniform = vec![vec![0.25; 4]; 7];
        assert_eq!(relation_weights(&uniform).unwrap(), vec![0.25; 4]);
        let onehot = vec![vec![0.0, 0.0, 1.0]; 5];
        assert_eq!(relation_weights(&onehot).unwrap(), vec![0.0, 0.0, 1.0]);
        let w = relation_weights(&[vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        assert!((w[0] - 0.7).abs() < 1e-15 && (w[1] - 0.3).abs() < 1e-15);
        assert!(matches!(relation_weights(&[]), Err(WeightError::EmptyTarget)));
    }

    #[test]
    fn instance_weight_examples() {
        let w = instance_weights_from_scores(&[1.0 - 1e-7, 0.5, 0.2]);
        assert!((w[0] - 1e-7).abs() < 1e-16);
        assert_eq!(w[1], 0.5);
        assert!((w[2] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn gate_examples() {
        let g = Gate::new("gate", 2);
        let mut store = ParamStore::new();
        g.init(&mut store).unwrap();
        assert_eq!(g.alpha(&store, &[vec![3.0, -1.0], vec![0.5, 9.0]]).unwrap(), 0.5);
        store.set("gate.w", Tensor::matrix(2, 1, vec![20.0, 0.0]).unwrap()).unwrap();
        assert!(g.alpha(&store, &[vec![1.0, 5.0]]).unwrap() > 1.0 - 1e-8);
        store.set("gate.w", Tensor::matrix(2, 1, vec![-20.0, 0.0]).unwrap()).unwrap();
        assert!(g.alpha(&store, &[vec![1.0, 5.0]]).unwrap() < 1e-8);
        assert!(matches!(g.alpha(&store, &[]), Err(WeightError::EmptyTarget)));
    }

    #[test]
    fn per_relation_gate_uses_pseudo_label_groups() {
        let g = Gate::new("gate", 1);
        let mut store = ParamStore::new();
        g.init(&mut store).unwrap();
        store.set("gate.w", Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let f = vec![vec![2.0], vec![-2.0], vec![4.0]];
        let a = g.alpha_per_relation(&store, &f, &[1, 2, 1], 4).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((a[1] - sig(3.0)).abs() < 1e-15);
        assert!((a[2] - sig(-2.0)).abs() < 1e-15);
        assert!((a[0] - sig(4.0 / 3.0)).abs() < 1e-15);
        assert_eq!(a[0], a[3]);
    }

    #[test]
    fn total_weight_examples() {
        let t = total_weights(0.5, &[0.8, 0.2], &[0.6, 0.4], &[0, 1]).unwrap();
        assert!((t[0] - 1.4).abs() < 1e-12 && (t[1] - 0.6).abs() < 1e-12);
        let inst = [0.3, 0.1, 0.5];
        let t = total_weights(1.0, &inst, &[0.2, 0.8], &[0, 1, 1]).unwrap();
        let s: f64 = inst.iter().sum();
        for (a, b) in t.iter().zip(inst) {
            assert!((a - 3.0 * b / s).abs() < 1e-12);
        }
        let t = total_weights(0.0, &inst, &[0.2, 0.8], &[0, 1, 1]).unwrap();
        for (a, b) in t.iter().zip([0.2, 0.8, 0.8]) {
            assert!((a - 3.0 * b / 1.8).abs() < 1e-12);
        }
        assert!(matches!(
            total_weights(0.5, &[0.0, 0.0], &[0.0, 1.0], &[0, 0]),
            Err(WeightError::Degenerate)
        ));
        assert!(matches!(
            total_weights(0.5, &[0.1], &[1.0], &[3]),
            Err(WeightError::Label { .. })
        ));
    }

    #[test]
    fn freeze_contract() {
        let mut t = WeightTable::populated(&mut Rng::new(3), 6, 3);
        let before = t.clone();
        t.freeze().unwrap();
        assert!(matches!(t.set_relation_weights(vec![1.0]), Err(WeightError::Frozen)));
        assert!(matches!(t.compute_totals(&[0; 6]), Err(WeightError::Frozen)));
        t.freeze().unwrap();
        assert_eq!(t.relation_weights().unwrap(), before.relation_weights().unwrap());
        assert_eq!(t.total_weights().unwrap(), before.total_weights().unwrap());
        assert!(matches!(WeightTable::new().freeze(), Err(WeightError::Incomplete(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut t = WeightTable::populated(&mut Rng::new(4), 9, 4);
        t.freeze().unwrap();
        assert_eq!(WeightTable::from_text(&t.to_text()).unwrap(), t);
        let mut p = WeightTable::populated(&mut Rng::new(5), 3, 2);
        p.alpha = Some(Alpha::PerRelation(vec![0.25, 0.75]));
        assert_eq!(WeightTable::from_text(&p.to_text()).unwrap(), p);
        let err = WeightTable::from_text("[alpha]\n0 0.5\n2 0.1\n").unwrap_err();
        assert!(matches!(err, WeightError::Parse { line: 3, .. }));
    }

    proptest! {
        #[test]
        fn relation_weights_sum_to_one(seed in any::<u64>(), n in 1usize..40, k in 2usize..9) {
            let mut rng = Rng::new(seed);
            let preds: Vec<Vec<f64>> = (0..n).map(|_| {
                let z: Vec<f64> = (0..k).map(|_| rng.uniform(-30.0, 30.0)).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }).collect();
            let w = relation_weights(&preds).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn totals_average_to_one(seed in any::<u64>(), n in 1usize..60, k in 2usize..6) {
            let t = WeightTable::populated(&mut Rng::new(seed), n, k);
            let tw = t.total_weights().unwrap();
            let mean = tw.iter().sum::<f64>() / n as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
            prop_assert!(tw.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn instance_weights_inside_unit_interval(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let d = Discriminator::with_hidden("da", 3, 3);
            let mut store = ParamStore::new();
            d.init(&mut store, &mut rng).unwrap();
            store.set("da.b2", Tensor::scalar(rng.uniform(-60.0, 60.0))).unwrap();
            let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.uniform(-50.0, 50.0)).collect()).collect();
            let w = instance_weights(&store, &d, &rows).unwrap();
            prop_assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn instance_weight_decreases_with_score(a in 1e-7f64..0.999, b in 1e-7f64..0.999) {
            prop_assume!(a < b);
            let w = instance_weights_from_scores(&[a, b]);
            prop_assert!(w[1] < w[0]);
        }
    }
}
