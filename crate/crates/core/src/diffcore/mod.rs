//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The op set is deliberately closed: embedding lookup, same-padded 1-D
//! convolution, global/piecewise max-pool, tanh/ReLU/sigmoid, affine maps,
//! softmax, log, elementwise arithmetic, reductions and gradient reversal.
//! [`grad_check`] verifies any graph built from them against central
//! differences.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::Adam;
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward called before the output node was recorded")]
    BackwardBeforeForward,
    #[error("gradient check needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("index {index} out of range for {op} (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("parameter {0} holds non-finite values")]
    NonFiniteParam(String),
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::tape::softmax_in_place;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn square_value_and_gradient() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let g = tape.backward_scalar(y, &mut store).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.0; 3])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_of_ones_sums_windows() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(5, 1, vec![1.0; 5]).unwrap()).unwrap();
        let w = tape.input(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap()).unwrap();
        let b = tape.input(Tensor::vector(vec![0.0])).unwrap();
        let y = tape.conv1d(x, w, b, 3, &[(0, 5)]).unwrap();
        // same padding; the valid part is the interior
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);
        assert_eq!(&tape.value(y).data()[1..4], &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn conv_windows_do_not_cross_sequences() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(4, 1, vec![1.0; 4]).unwrap()).unwrap();
        let w = tape.input(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap()).unwrap();
        let b = tape.input(Tensor::vector(vec![0.0])).unwrap();
        let y = tape.conv1d(x, w, b, 3, &[(0, 2), (2, 4)]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let logits = vec![0.3, -1.2, 2.0, 0.1];
        let z = tape.variable(Tensor::matrix(1, 4, logits.clone()).unwrap()).unwrap();
        let ls = tape.log_softmax(z).unwrap();
        let picked = tape.pick(ls, &[2]).unwrap();
        let loss = tape.scale(picked, -1.0).unwrap();
        let g = tape.backward_scalar(loss, &mut store).unwrap();
        let mut p = logits;
        softmax_in_place(&mut p);
        p[2] -= 1.0;
        for (a, b) in g.get(z).unwrap().data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn grl_reverses_and_scales() {
        let mut store = ParamStore::new();
        for &lambda in &[0.0, 0.046212, 0.1, 1.0] {
            let mut tape = Tape::new();
            let x = tape.variable(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
            let y = tape.grl(x, lambda).unwrap();
            assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
            let seed = Tensor::vector(vec![1.0, -2.5, 0.75]);
            let g = tape.backward(y, &seed, &mut store).unwrap();
            let expect: Vec<f64> = seed.data().iter().map(|v| -lambda * v).collect();
            assert_eq!(g.get(x).unwrap().data(), expect.as_slice());
        }
    }

    #[test]
    fn non_finite_reports_node() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 0.0])).unwrap();
        match tape.log(x) {
            Err(DiffError::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let mut other = Tape::new();
        let v = other.input(Tensor::scalar(1.0)).unwrap();
        let tape = Tape::new();
        let mut store = ParamStore::new();
        assert!(matches!(
            tape.backward_scalar(v, &mut store),
            Err(DiffError::BackwardBeforeForward)
        ));
    }

    #[test]
    fn seed_shape_must_match() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut store = ParamStore::new();
        assert!(tape.backward(x, &Tensor::scalar(1.0), &mut store).is_err());
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let mut store = ParamStore::new();
        store.insert("q.x", Tensor::vector(vec![0.7, -1.3, 2.2])).unwrap();
        let report = grad_check(&store, 1e-5, &[], |t, s| {
            let x = t.param(s, "q.x")?;
            let sq = t.mul(x, x)?;
            let l = t.sum(sq)?;
            t.scale(l, 0.5)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn grad_check_rejects_vector_output() {
        let mut store = ParamStore::new();
        store.insert("q.x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let r = grad_check(&store, 1e-5, &[], |t, s| t.param(s, "q.x"));
        assert!(matches!(r, Err(DiffError::NonScalar(_))));
    }

    #[test]
    fn frozen_prefix_gets_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("fs.w", Tensor::scalar(2.0)).unwrap();
        store.insert("ft.w", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        tape.freeze_prefix("fs");
        let a = tape.param(&store, "fs.w").unwrap();
        let b = tape.param(&store, "ft.w").unwrap();
        let y = tape.mul(a, b).unwrap();
        tape.backward_scalar(y, &mut store).unwrap();
        assert_eq!(store.grad("fs.w").unwrap().item(), 0.0);
        assert_eq!(store.grad("ft.w").unwrap().item(), 2.0);
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let run = |seed| {
            let mut tape = Tape::with_dropout(Rng::new(seed));
            let x = tape.input(Tensor::vector(vec![1.0; 1000])).unwrap();
            let y = tape.dropout(x, 0.5).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - 1.0).abs() < 0.15);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0; 4])).unwrap();
        assert_eq!(tape.dropout(x, 0.5).unwrap(), x);
    }

    #[test]
    fn segment_pool_empty_segment_is_zero() {
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::matrix(3, 2, vec![1.0, -4.0, 5.0, -2.0, 3.0, -1.0]).unwrap())
            .unwrap();
        let y = tape.segment_max_pool(x, &[vec![(0, 2), (2, 2), (2, 3)]]).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -2.0, 0.0, 0.0, 3.0, -1.0]);
    }

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        s.insert_uniform("g.emb", &[6, 3], 0.8, &mut rng).unwrap();
        s.insert_uniform("g.conv_w", &[4, 9], 0.6, &mut rng).unwrap();
        s.insert_uniform("g.conv_b", &[4], 0.2, &mut rng).unwrap();
        s.insert_uniform("g.w", &[8, 3], 0.7, &mut rng).unwrap();
        s.insert_uniform("g.b", &[3], 0.3, &mut rng).unwrap();
        s.insert_uniform("g.v", &[3, 1], 0.9, &mut rng).unwrap();
        s
    }

    // Touches every differentiable op except gradient reversal, which finite
    // differences cannot see.
    fn everything_graph(t: &mut Tape, s: &ParamStore) -> Result<Var, DiffError> {
        let emb = t.param(s, "g.emb")?;
        let x = t.embedding(emb, &[0, 3, 2, 5, 1, 4, 2])?;
        let w = t.param(s, "g.conv_w")?;
        let b = t.param(s, "g.conv_b")?;
        let c = t.conv1d(x, w, b, 3, &[(0, 4), (4, 7)])?;
        let pooled = t.segment_max_pool(c, &[vec![(0, 2), (2, 4)], vec![(4, 5), (5, 7)]])?;
        let h = t.tanh(pooled)?;
        let w2 = t.param(s, "g.w")?;
        let b2 = t.param(s, "g.b")?;
        let logits = t.affine(h, w2, Some(b2))?;
        let ls = t.log_softmax(logits)?;
        let picked = t.pick(ls, &[2, 0])?;
        let ce = t.mean(picked)?;
        let sm = t.softmax(logits)?;
        let v = t.param(s, "g.v")?;
        let z = t.affine(sm, v, None)?;
        let d = t.sigmoid(z)?;
        let d = t.clamp(d, 1e-7, 1.0 - 1e-7)?;
        let om = t.one_minus(d)?;
        let lg = t.log(om)?;
        let rows = t.gather_rows(h, &[1, 0, 1])?;
        let mr = t.mean_rows(rows)?;
        let sq = t.mul(mr, mr)?;
        let e = t.exp(sq)?;
        let r = t.relu(mr)?;
        let stacked = t.vstack(&[e, r])?;
        let cat = t.hconcat(&[stacked, stacked])?;
        let flat = t.reshape(cat, &[32])?;
        let tot = t.sum(flat)?;
        let tot2 = t.sum(lg)?;
        let ratio = t.div(tot2, tot)?;
        let acc = t.add(ce, ratio)?;
        let acc = t.sub(acc, tot2)?;
        t.add_scalar(acc, 0.5)
    }

    #[test]
    fn every_op_passes_grad_check() {
        for seed in 0..5 {
            let store = random_store(seed);
            let report = grad_check(&store, 1e-5, &[], everything_graph).unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let store = random_store(seed);
            let mut a = Tape::new();
            let mut b = Tape::new();
            let va = everything_graph(&mut a, &store).unwrap();
            let vb = everything_graph(&mut b, &store).unwrap();
            prop_assert_eq!(a.value(va).item().to_bits(), b.value(vb).item().to_bits());
        }

        #[test]
        fn affine_tanh_grad_check(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let mut s = ParamStore::new();
            s.insert_uniform("a.w", &[4, 3], 1.0, &mut rng).unwrap();
            s.insert_uniform("a.b", &[3], 1.0, &mut rng).unwrap();
            let x: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let r = grad_check(&s, 1e-5, &[], |t, s| {
                let xi = t.input(Tensor::matrix(2, 4, x.clone())?)?;
                let w = t.param(s, "a.w")?;
                let b = t.param(s, "a.b")?;
                let y = t.affine(xi, w, Some(b))?;
                let y = t.tanh(y)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }).unwrap();
            prop_assert!(r.max_rel_error < 1e-4);
        }
    }
}
