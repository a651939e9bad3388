//! Relation discriminators and the (weighted) adversarial objective.
//!
//! The objective is
//! `mean_i w_i log D(f_i^s) + mean_j log(1 - D(f_j^t))`, maximized by the
//! discriminator and minimized by the target encoder through a gradient
//! reversal node.

use crate::diffcore::{DiffError, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Discriminator outputs are clamped to `[EPS, 1 - EPS]`.
pub const EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum AdversaryError {
    #[error("feature width {got} does not match discriminator input {expected}")]
    Width { got: usize, expected: usize },
    #[error("adversarial batch has an empty {0} side")]
    EmptySide(&'static str),
    #[error("{weights} source weights for {features} source features")]
    WeightCount { weights: usize, features: usize },
    #[error("source weight {0} is negative or non-finite")]
    BadWeight(f64),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Binary domain classifier `D(f) = p(source | f)`: affine, tanh, affine,
/// sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl Discriminator {
    /// Hidden width equal to the input width.
    pub fn new(prefix: &str, input: usize) -> Self {
        Self::with_hidden(prefix, input, input)
    }

    pub fn with_hidden(prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    fn p(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<(), DiffError> {
        let s1 = (6.0 / (self.input + self.hidden) as f64).sqrt();
        let s2 = (6.0 / (self.hidden + 1) as f64).sqrt();
        store.insert_uniform(&self.p("w1"), &[self.input, self.hidden], s1, rng)?;
        store.insert(&self.p("b1"), Tensor::zeros(&[self.hidden]))?;
        store.insert_uniform(&self.p("w2"), &[self.hidden, 1], s2, rng)?;
        store.insert(&self.p("b2"), Tensor::zeros(&[1]))?;
        Ok(())
    }

    /// Pre-sigmoid logits, shape `[batch, 1]`.
    pub fn logit(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var, AdversaryError> {
        let width = tape.value(f).cols();
        if width != self.input {
            return Err(AdversaryError::Width {
                got: width,
                expected: self.input,
            });
        }
        let w1 = tape.param(store, &self.p("w1"))?;
        let b1 = tape.param(store, &self.p("b1"))?;
        let w2 = tape.param(store, &self.p("w2"))?;
        let b2 = tape.param(store, &self.p("b2"))?;
        let h = tape.affine(f, w1, Some(b1))?;
        let h = tape.tanh(h)?;
        Ok(tape.affine(h, w2, Some(b2))?)
    }

    /// Clamped source probabilities, shape `[batch, 1]`.
    pub fn discriminate(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var, AdversaryError> {
        let z = self.logit(tape, store, f)?;
        let s = tape.sigmoid(z)?;
        Ok(tape.clamp(s, EPS, 1.0 - EPS)?)
    }

    /// Evaluation-mode scores for plain feature rows.
    pub fn scores(&self, store: &ParamStore, features: &[Vec<f64>]) -> Result<Vec<f64>, AdversaryError> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let f = tape.input(Tensor::from_rows(features)?)?;
        let d = self.discriminate(&mut tape, store, f)?;
        Ok(tape.value(d).data().to_vec())
    }
}

/// Identity forward, `-lambda * g` backward.
pub fn grl_wrap(tape: &mut Tape, x: Var, lambda: f64) -> Result<Var, DiffError> {
    tape.grl(x, lambda)
}

/// Adversarial objective on graph features `source` and `target`
/// (`[n, width]` each). `weights`, when given, scale the source terms.
pub fn adv_loss(
    tape: &mut Tape,
    store: &ParamStore,
    d: &Discriminator,
    source: Var,
    target: Var,
    weights: Option<SourceWeights>,
) -> Result<Var, AdversaryError> {
    let ns = tape.value(source).rows();
    let ds = d.discriminate(tape, store, source)?;
    let dt = d.discriminate(tape, store, target)?;
    let log_ds = tape.log(ds)?;
    let src = match weights {
        None => tape.mean(log_ds)?,
        Some(SourceWeights::Fixed(w)) => {
            if w.len() != ns {
                return Err(AdversaryError::WeightCount {
                    weights: w.len(),
                    features: ns,
                });
            }
            if let Some(&bad) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(AdversaryError::BadWeight(bad));
            }
            let wv = tape.input(Tensor::new(vec![ns, 1], w.to_vec())?)?;
            let weighted = tape.mul(wv, log_ds)?;
            tape.mean(weighted)?
        }
        Some(SourceWeights::Graph(wv)) => {
            let n = tape.value(wv).len();
            if n != ns {
                return Err(AdversaryError::WeightCount { weights: n, features: ns });
            }
            let wv = tape.reshape(wv, &[ns, 1])?;
            let weighted = tape.mul(wv, log_ds)?;
            tape.mean(weighted)?
        }
    };
    let one_minus = tape.one_minus(dt)?;
    let log_dt = tape.log(one_minus)?;
    let tgt = tape.mean(log_dt)?;
    Ok(tape.add(src, tgt)?)
}

/// Per-instance source weights for [`adv_loss`].
#[derive(Clone, Copy, Debug)]
pub enum SourceWeights<'a> {
    Fixed(&'a [f64]),
    /// Weights computed on the tape (e.g. through a trainable gate).
    Graph(Var),
}

/// The objective evaluated from discriminator outputs directly.
pub fn adv_value(d_source: &[f64], d_target: &[f64], weights: Option<&[f64]>) -> Result<f64, AdversaryError> {
    if d_source.is_empty() {
        return Err(AdversaryError::EmptySide("source"));
    }
    if d_target.is_empty() {
        return Err(AdversaryError::EmptySide("target"));
    }
    let src: f64 = match weights {
        Some(w) if w.len() != d_source.len() => {
            return Err(AdversaryError::WeightCount {
                weights: w.len(),
                features: d_source.len(),
            })
        }
        Some(w) => d_source.iter().zip(w).map(|(d, w)| w * d.ln()).sum(),
        None => d_source.iter().map(|d| d.ln()).sum(),
    };
    let tgt: f64 = d_target.iter().map(|d| (1.0 - d).ln()).sum();
    Ok(src / d_source.len() as f64 + tgt / d_target.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Adam};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn zero_disc(width: usize) -> (Discriminator, ParamStore) {
        let d = Discriminator::new("d", width);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut Rng::new(1)).unwrap();
        store.set("d.w2", Tensor::zeros(&[width, 1])).unwrap();
        (d, store)
    }

    #[test]
    fn zero_head_outputs_half() {
        let (d, store) = zero_disc(3);
        assert_eq!(d.scores(&store, &[vec![1.0, -2.0, 0.5]]).unwrap(), vec![0.5]);
    }

    #[test]
    fn saturated_logits_are_clamped() {
        let (d, mut store) = zero_disc(2);
        store.set("d.b2", Tensor::scalar(20.0)).unwrap();
        assert_eq!(d.scores(&store, &[vec![0.0, 0.0]]).unwrap(), vec![1.0 - 1e-7]);
        store.set("d.b2", Tensor::scalar(-20.0)).unwrap();
        assert_eq!(d.scores(&store, &[vec![0.0, 0.0]]).unwrap(), vec![1e-7]);
    }

    #[test]
    fn width_mismatch() {
        let (d, store) = zero_disc(2);
        assert!(matches!(d.scores(&store, &[vec![0.0; 3]]), Err(AdversaryError::Width { .. })));
    }

    #[test]
    fn loss_at_half_is_minus_log4() {
        let (d, store) = zero_disc(2);
        let mut tape = Tape::new();
        let s = tape.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let t = tape.input(Tensor::from_rows(&[vec![3.0, 2.0]]).unwrap()).unwrap();
        let l = adv_loss(&mut tape, &store, &d, s, t, None).unwrap();
        assert!((tape.value(l).item() + 4f64.ln()).abs() < 1e-15);
        assert!((tape.value(l).item() + 1.386294).abs() < 1e-6);
    }

    #[test]
    fn zero_weights_leave_target_term() {
        let (d, mut store) = zero_disc(1);
        store.set("d.b2", Tensor::scalar(0.3)).unwrap();
        let mut tape = Tape::new();
        let s = tape.input(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap()).unwrap();
        let t = tape.input(Tensor::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        let l = adv_loss(&mut tape, &store, &d, s, t, Some(SourceWeights::Fixed(&[0.0, 0.0]))).unwrap();
        let dt = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((tape.value(l).item() - (1.0 - dt).ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_weighted_value() {
        let v = adv_value(&[0.8], &[0.8], Some(&[2.0])).unwrap();
        assert!((v - (2.0 * 0.8f64.ln() + 0.2f64.ln())).abs() < 1e-15);
        // same number through the graph, with the logit set to produce 0.8
        let (d, mut store) = zero_disc(1);
        store.set("d.b2", Tensor::scalar(4f64.ln())).unwrap();
        let mut tape = Tape::new();
        let s = tape.input(Tensor::scalar(0.0).reshaped(vec![1, 1]).unwrap()).unwrap();
        let l = adv_loss(&mut tape, &store, &d, s, s, Some(SourceWeights::Fixed(&[2.0]))).unwrap();
        assert!((tape.value(l).item() - v).abs() < 1e-12);
    }

    #[test]
    fn empty_sides_and_bad_weights() {
        assert!(matches!(adv_value(&[], &[0.5], None), Err(AdversaryError::EmptySide("source"))));
        assert!(matches!(adv_value(&[0.5], &[], None), Err(AdversaryError::EmptySide("target"))));
        let (d, store) = zero_disc(1);
        let mut tape = Tape::new();
        let s = tape.input(Tensor::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        assert!(adv_loss(&mut tape, &store, &d, s, s, Some(SourceWeights::Fixed(&[-1.0]))).is_err());
        assert!(adv_loss(&mut tape, &store, &d, s, s, Some(SourceWeights::Fixed(&[1.0, 1.0]))).is_err());
    }

    #[test]
    fn grl_examples() {
        let mut store = ParamStore::new();
        for (lambda, expect) in [(0.1, -0.1), (0.0, 0.0)] {
            let mut tape = Tape::new();
            let x = tape.variable(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
            let y = grl_wrap(&mut tape, x, lambda).unwrap();
            assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
            let g = tape.backward(y, &Tensor::vector(vec![1.0; 3]), &mut store).unwrap();
            assert!(g.get(x).unwrap().data().iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn mirrored_batches() {
        // equal features on both sides: the two terms are log D and log(1-D)
        // of the same D, so swapping the sides leaves the value unchanged
        let d = Discriminator::new("d", 2);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut Rng::new(9)).unwrap();
        let rows = vec![vec![0.3, -1.0], vec![2.0, 0.5]];
        let scores = d.scores(&store, &rows).unwrap();
        let a = adv_value(&scores, &scores, None).unwrap();
        let expect: f64 = scores.iter().map(|p| p.ln() + (1.0 - p).ln()).sum::<f64>() / 2.0;
        assert!((a - expect).abs() < 1e-14);
        let mut tape = Tape::new();
        let f = tape.input(Tensor::from_rows(&rows).unwrap()).unwrap();
        let l = adv_loss(&mut tape, &store, &d, f, f, None).unwrap();
        assert!((tape.value(l).item() - a).abs() < 1e-14);
    }

    fn adversarial_fixture(seed: u64) -> (Discriminator, ParamStore, Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let d = Discriminator::with_hidden("d", 3, 4);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut rng).unwrap();
        store.insert_uniform("enc.w", &[3, 3], 0.8, &mut rng).unwrap();
        let mk = |rng: &mut Rng, n: usize| {
            Tensor::new(vec![n, 3], (0..3 * n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
        };
        let s = mk(&mut rng, 5);
        let t = mk(&mut rng, 4);
        (d, store, s, t)
    }

    #[test]
    fn plain_and_weighted_loss_grad_check() {
        for seed in 0..3 {
            let (d, store, s, t) = adversarial_fixture(seed);
            let w = [0.2, 1.5, 0.0, 2.0, 1.3];
            for weights in [None, Some(&w[..])] {
                let r = grad_check(&store, 1e-5, &[], |tape, st| {
                    let sx = tape.input(s.clone())?;
                    let tx = tape.input(t.clone())?;
                    let ew = tape.param(st, "enc.w")?;
                    let fs = tape.affine(sx, ew, None)?;
                    let fs = tape.tanh(fs)?;
                    let ft = tape.affine(tx, ew, None)?;
                    let ft = tape.tanh(ft)?;
                    adv_loss(tape, st, &d, fs, ft, weights.map(SourceWeights::Fixed)).map_err(|e| match e {
                        AdversaryError::Diff(d) => d,
                        other => panic!("{other}"),
                    })
                })
                .unwrap();
                assert!(r.max_rel_error < 1e-4, "{r:?}");
            }
        }
    }

    #[test]
    fn grl_step_signs() {
        // one combined step: the discriminator raises the objective, the
        // encoder behind the reversal lowers it
        let (d, mut store, s, t) = adversarial_fixture(7);
        let eval = |st: &ParamStore| {
            let mut tape = Tape::new();
            let sx = tape.input(s.clone()).unwrap();
            let tx = tape.input(t.clone()).unwrap();
            let ew = tape.param(st, "enc.w").unwrap();
            let ft = tape.affine(tx, ew, None).unwrap();
            let l = adv_loss(&mut tape, st, &d, sx, ft, None).unwrap();
            tape.value(l).item()
        };
        let before = eval(&store);
        let mut tape = Tape::new();
        let sx = tape.input(s.clone()).unwrap();
        let tx = tape.input(t.clone()).unwrap();
        let ew = tape.param(&store, "enc.w").unwrap();
        let ft = tape.affine(tx, ew, None).unwrap();
        let ft = grl_wrap(&mut tape, ft, 1.0).unwrap();
        let l = adv_loss(&mut tape, &store, &d, sx, ft, None).unwrap();
        let neg = tape.scale(l, -1.0).unwrap();
        tape.backward_scalar(neg, &mut store).unwrap();
        let g_enc = store.grad("enc.w").unwrap().clone();
        let g_d: Vec<Tensor> = ["d.w1", "d.b1", "d.w2", "d.b2"]
            .iter()
            .map(|n| store.grad(n).unwrap().clone())
            .collect();
        let lr = 1e-4;
        let mut only_d = store.clone();
        for (n, g) in ["d.w1", "d.b1", "d.w2", "d.b2"].iter().zip(&g_d) {
            let v = only_d.get(n).unwrap();
            let nv = Tensor::new(v.shape().to_vec(), v.data().iter().zip(g.data()).map(|(a, b)| a - lr * b).collect()).unwrap();
            only_d.set(n, nv).unwrap();
        }
        assert!(eval(&only_d) > before);
        let mut only_enc = store.clone();
        let v = only_enc.get("enc.w").unwrap();
        let nv = Tensor::new(v.shape().to_vec(), v.data().iter().zip(g_enc.data()).map(|(a, b)| a - lr * b).collect()).unwrap();
        only_enc.set("enc.w", nv).unwrap();
        assert!(eval(&only_enc) < before);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn ascent_on_separable_batch_is_monotone(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let d = Discriminator::with_hidden("d", 2, 3);
            let mut store = ParamStore::new();
            d.init(&mut store, &mut rng).unwrap();
            let s: Vec<Vec<f64>> = (0..6).map(|_| vec![1.0 + rng.uniform(0.0, 0.5), rng.uniform(-0.5, 0.5)]).collect();
            let t: Vec<Vec<f64>> = (0..6).map(|_| vec![-1.0 - rng.uniform(0.0, 0.5), rng.uniform(-0.5, 0.5)]).collect();
            let mut last = f64::NEG_INFINITY;
            for _ in 0..50 {
                let mut tape = Tape::new();
                let sx = tape.input(Tensor::from_rows(&s).unwrap()).unwrap();
                let tx = tape.input(Tensor::from_rows(&t).unwrap()).unwrap();
                let l = adv_loss(&mut tape, &store, &d, sx, tx, None).unwrap();
                let v = tape.value(l).item();
                prop_assert!(v >= last - 1e-12);
                last = v;
                let neg = tape.scale(l, -1.0).unwrap();
                tape.backward_scalar(neg, &mut store).unwrap();
                for n in ["d.w1", "d.b1", "d.w2", "d.b2"] {
                    let g = store.grad(n).unwrap().clone();
                    let v = store.get(n).unwrap();
                    let nv = Tensor::new(v.shape().to_vec(), v.data().iter().zip(g.data()).map(|(a, b)| a - 0.01 * b).collect()).unwrap();
                    store.set(n, nv).unwrap();
                }
                store.zero_grad();
            }
        }
    }

    #[test]
    fn adam_trained_discriminator_separates() {
        let d = Discriminator::with_hidden("d", 1, 8);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut Rng::new(3)).unwrap();
        let s = Tensor::new(vec![4, 1], vec![1.0, 1.2, 1.4, 0.9]).unwrap();
        let t = Tensor::new(vec![4, 1], vec![-1.0, -1.1, -0.8, -1.3]).unwrap();
        let mut opt = Adam::new(0.01, &["d"]);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let sx = tape.input(s.clone()).unwrap();
            let tx = tape.input(t.clone()).unwrap();
            let l = adv_loss(&mut tape, &store, &d, sx, tx, None).unwrap();
            let neg = tape.scale(l, -1.0).unwrap();
            tape.backward_scalar(neg, &mut store).unwrap();
            opt.step(&mut store);
        }
        let sc = d.scores(&store, &[vec![1.0], vec![-1.0]]).unwrap();
        assert!(sc[0] > 0.9 && sc[1] < 0.1, "{sc:?}");
    }
}
