//! Numerical checks of the weighted minimax identity on 1-D densities.
//!
//! For a source density `p_s`, a weight field `w` with `∫ w p_s = 1` and a
//! target density `p_t`, the weighted objective at the optimal discriminator
//! `D* = w p_s / (w p_s + p_t)` equals `-ln 4 + 2 JS(w p_s || p_t)`. The left
//! side is computed by composite Simpson on a fixed grid and the right side
//! by adaptive Simpson, so the two routes share no quadrature nodes.

use std::f64::consts::{LN_2, PI};
use std::fmt::Write as _;

use crate::adversary::{adv_loss, AdversaryError, Discriminator, SourceWeights};
use crate::diffcore::{Adam, DiffError, ParamStore, Tape, Tensor};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("invalid density: {0}")]
    Density(String),
    #[error("invalid weight field: {0}")]
    Weight(String),
    #[error("grid must have an odd node count >= 3 and lo < hi")]
    Grid,
    #[error("both densities vanish at x = {0}")]
    ZeroDensity(f64),
    #[error("grid holds only {mass} of a density's mass")]
    Coverage { mass: f64 },
    #[error("weighted source mass is {0}, expected 1")]
    Normalization(f64),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Density1D {
    Gaussian { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    /// `(weight, component)` pairs; weights are normalized on use.
    Mixture(Vec<(f64, Density1D)>),
}

impl Density1D {
    pub fn gaussian(mean: f64, sd: f64) -> Self {
        Density1D::Gaussian { mean, sd }
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        match self {
            Density1D::Gaussian { mean, sd } => {
                if !(mean.is_finite() && *sd > 0.0 && sd.is_finite()) {
                    return Err(TheoryError::Density(format!("gaussian({mean}, {sd})")));
                }
            }
            Density1D::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(TheoryError::Density(format!("uniform({lo}, {hi})")));
                }
            }
            Density1D::Mixture(parts) => {
                if parts.is_empty() || parts.iter().any(|(w, _)| !(*w > 0.0 && w.is_finite())) {
                    return Err(TheoryError::Density("mixture weights must be positive".into()));
                }
                for (_, d) in parts {
                    d.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Density1D::Gaussian { mean, sd } => {
                let z = (x - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
            }
            Density1D::Uniform { lo, hi } => {
                if (*lo..=*hi).contains(&x) {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            Density1D::Mixture(parts) => {
                let total: f64 = parts.iter().map(|p| p.0).sum();
                parts.iter().map(|(w, d)| w * d.pdf(x)).sum::<f64>() / total
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Density1D::Gaussian { mean, sd } => rng.normal(*mean, *sd),
            Density1D::Uniform { lo, hi } => rng.uniform(*lo, *hi),
            Density1D::Mixture(parts) => {
                let total: f64 = parts.iter().map(|p| p.0).sum();
                let mut u = rng.next_f64() * total;
                for (w, d) in parts {
                    if u < *w {
                        return d.sample(rng);
                    }
                    u -= w;
                }
                parts.last().expect("validated nonempty").1.sample(rng)
            }
        }
    }
}

/// Unnormalized weight shapes; [`WeightField::scale`] carries the constant
/// that makes `w p_s` a density.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightShape {
    Constant,
    /// `sigmoid(slope * (x - center))`
    Logistic { center: f64, slope: f64 },
    /// `exp(rate * x)`
    Exponential { rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightField {
    pub shape: WeightShape,
    pub scale: f64,
}

impl WeightField {
    pub fn ones() -> Self {
        Self {
            shape: WeightShape::Constant,
            scale: 1.0,
        }
    }

    pub fn new(shape: WeightShape) -> Self {
        Self { shape, scale: 1.0 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let s = match self.shape {
            WeightShape::Constant => 1.0,
            WeightShape::Logistic { center, slope } => 1.0 / (1.0 + (-slope * (x - center)).exp()),
            WeightShape::Exponential { rate } => (rate * x).exp(),
        };
        self.scale * s
    }

    /// `∫ w p_s` over the grid's interval, by adaptive quadrature.
    pub fn mass(&self, ps: &Density1D, grid: &Grid) -> f64 {
        adaptive_simpson(&|x| self.eval(x) * ps.pdf(x), grid.lo, grid.hi, ADAPTIVE_EPS, ADAPTIVE_PANELS)
    }

    pub fn normalized(&self, ps: &Density1D, grid: &Grid) -> Result<Self, TheoryError> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(TheoryError::Weight(format!("scale {}", self.scale)));
        }
        let m = self.mass(ps, grid);
        if !(m > 0.0 && m.is_finite()) {
            return Err(TheoryError::Weight(format!("source mass {m}")));
        }
        Ok(Self {
            shape: self.shape.clone(),
            scale: self.scale / m,
        })
    }
}

/// Uniform quadrature nodes on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
            nodes: 4001,
        }
    }
}

impl Grid {
    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.nodes < 3 || self.nodes % 2 == 0 || !(self.lo < self.hi) {
            return Err(TheoryError::Grid);
        }
        Ok(())
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let h = (self.hi - self.lo) / (self.nodes - 1) as f64;
        (0..self.nodes).map(move |i| self.lo + i as f64 * h)
    }

    /// Composite Simpson rule over the nodes.
    pub fn simpson(&self, f: impl Fn(f64) -> f64) -> f64 {
        let h = (self.hi - self.lo) / (self.nodes - 1) as f64;
        let last = self.nodes - 1;
        let s: f64 = self
            .points()
            .enumerate()
            .map(|(i, x)| {
                let c = if i == 0 || i == last {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * f(x)
            })
            .sum();
        s * h / 3.0
    }
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

/// Adaptive Simpson over `[lo, hi]`, started on `panels` equal pieces so
/// narrow features are not skipped by the first coarse estimate.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, eps: f64, panels: usize) -> f64 {
    let h = (hi - lo) / panels as f64;
    (0..panels)
        .map(|i| {
            let (a, b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
            let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            adaptive(f, a, b, fa, fm, fb, whole, eps / panels as f64, 40)
        })
        .sum()
}

const ADAPTIVE_EPS: f64 = 1e-13;
const ADAPTIVE_PANELS: usize = 64;

fn xlogy_ratio(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        a * (a / b).ln()
    } else {
        0.0
    }
}

/// `D*(x) = w p_s / (w p_s + p_t)`.
pub fn optimal_discriminator(w: &WeightField, ps: &Density1D, pt: &Density1D, x: f64) -> Result<f64, TheoryError> {
    let a = w.eval(x) * ps.pdf(x);
    let b = pt.pdf(x);
    if a + b <= 0.0 {
        return Err(TheoryError::ZeroDensity(x));
    }
    Ok(a / (a + b))
}

/// Jensen-Shannon divergence of two densities given as functions, by
/// adaptive quadrature over the grid's interval.
pub fn js_divergence(p: &dyn Fn(f64) -> f64, q: &dyn Fn(f64) -> f64, grid: &Grid) -> Result<f64, TheoryError> {
    grid.validate()?;
    for d in [p, q] {
        let mass = adaptive_simpson(d, grid.lo, grid.hi, ADAPTIVE_EPS, ADAPTIVE_PANELS);
        if mass < 1.0 - 1e-6 {
            return Err(TheoryError::Coverage { mass });
        }
    }
    let f = |x: f64| {
        let (a, b) = (p(x), q(x));
        let m = 0.5 * (a + b);
        0.5 * (xlogy_ratio(a, m) + xlogy_ratio(b, m))
    };
    let js = adaptive_simpson(&f, grid.lo, grid.hi, ADAPTIVE_EPS, ADAPTIVE_PANELS);
    Ok(js.clamp(0.0, LN_2))
}

/// `-ln 4 + 2 JS(w p_s || p_t)`.
pub fn identity_value(w: &WeightField, ps: &Density1D, pt: &Density1D, grid: &Grid) -> Result<f64, TheoryError> {
    let js = js_divergence(&|x| w.eval(x) * ps.pdf(x), &|x| pt.pdf(x), grid)?;
    Ok(-(4.0f64.ln()) + 2.0 * js)
}

fn check_normalized(w: &WeightField, ps: &Density1D, grid: &Grid) -> Result<(), TheoryError> {
    let m = w.mass(ps, grid);
    if (m - 1.0).abs() > 1e-6 {
        return Err(TheoryError::Normalization(m));
    }
    Ok(())
}

/// `∫ w p_s ln D + p_t ln(1 - D)` for a discriminator given as a function.
pub fn objective_value(
    w: &WeightField,
    ps: &Density1D,
    pt: &Density1D,
    grid: &Grid,
    d: impl Fn(f64) -> f64,
) -> Result<f64, TheoryError> {
    grid.validate()?;
    Ok(grid.simpson(|x| {
        let (a, b) = (w.eval(x) * ps.pdf(x), pt.pdf(x));
        let dx = d(x);
        let s = if a > 0.0 { a * dx.ln() } else { 0.0 };
        let t = if b > 0.0 { b * (1.0 - dx).ln() } else { 0.0 };
        s + t
    }))
}

/// The weighted objective at `D*`, by composite Simpson on the grid.
pub fn minimax_value(w: &WeightField, ps: &Density1D, pt: &Density1D, grid: &Grid) -> Result<f64, TheoryError> {
    grid.validate()?;
    check_normalized(w, ps, grid)?;
    Ok(grid.simpson(|x| {
        let (a, b) = (w.eval(x) * ps.pdf(x), pt.pdf(x));
        xlogy_ratio(a, a + b) + xlogy_ratio(b, a + b)
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalConfig {
    pub samples: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Interval on which the trained discriminator is compared with `D*`.
    pub central: (f64, f64),
    pub central_points: usize,
    pub grid: Grid,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            hidden: 16,
            epochs: 60,
            batch_size: 500,
            learning_rate: 0.01,
            seed: 0,
            central: (-1.0, 3.0),
            central_points: 41,
            grid: Grid::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalReport {
    pub max_abs_error: f64,
    /// Objective of the trained discriminator, by quadrature.
    pub trained_value: f64,
    pub identity_value: f64,
    /// `identity_value - trained_value`, nonnegative up to quadrature error.
    pub value_gap: f64,
    pub converged: bool,
    /// `(x, D_trained(x), D*(x))` on the central grid.
    pub rows: Vec<(f64, f64, f64)>,
}

impl EmpiricalReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("x,d_trained,d_star\n");
        for (x, d, o) in &self.rows {
            let _ = writeln!(s, "{x:?},{d:?},{o:?}");
        }
        s
    }
}

/// Trains a small discriminator on samples from `p_s` (weighted by `w`)
/// and `p_t` and compares it with `D*`. Poor convergence is reported in
/// the `converged` flag rather than as an error.
pub fn empirical_check(
    w: &WeightField,
    ps: &Density1D,
    pt: &Density1D,
    cfg: &EmpiricalConfig,
) -> Result<EmpiricalReport, TheoryError> {
    ps.validate()?;
    pt.validate()?;
    cfg.grid.validate()?;
    check_normalized(w, ps, &cfg.grid)?;
    if cfg.samples == 0 || cfg.batch_size == 0 || cfg.hidden == 0 || cfg.central_points < 2 {
        return Err(TheoryError::Weight("empirical config needs positive sizes".into()));
    }
    let mut rng = Rng::derive(cfg.seed, 0x7E);
    let xs: Vec<f64> = (0..cfg.samples).map(|_| ps.sample(&mut rng)).collect();
    let ws: Vec<f64> = xs.iter().map(|&x| w.eval(x)).collect();
    let xt: Vec<f64> = (0..cfg.samples).map(|_| pt.sample(&mut rng)).collect();

    let disc = Discriminator::with_hidden("theory", 1, cfg.hidden);
    let mut store = ParamStore::new();
    disc.init(&mut store, &mut rng)?;
    let mut opt = Adam::new(cfg.learning_rate, &["theory"]);
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let s = tape.input(Tensor::new(vec![chunk.len(), 1], chunk.iter().map(|&i| xs[i]).collect())?)?;
            let t = tape.input(Tensor::new(vec![chunk.len(), 1], chunk.iter().map(|&i| xt[i]).collect())?)?;
            let wb: Vec<f64> = chunk.iter().map(|&i| ws[i]).collect();
            let v = adv_loss(&mut tape, &store, &disc, s, t, Some(SourceWeights::Fixed(&wb)))?;
            let loss = tape.scale(v, -1.0)?;
            tape.backward_scalar(loss, &mut store)?;
            opt.step(&mut store);
        }
    }

    let score = |xs: &[f64]| -> Result<Vec<f64>, TheoryError> {
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        Ok(disc.scores(&store, &rows)?)
    };
    let (lo, hi) = cfg.central;
    let step = (hi - lo) / (cfg.central_points - 1) as f64;
    let central: Vec<f64> = (0..cfg.central_points).map(|i| lo + i as f64 * step).collect();
    let trained = score(&central)?;
    let mut rows = Vec::with_capacity(central.len());
    let mut max_abs_error = 0.0f64;
    for (&x, &d) in central.iter().zip(&trained) {
        let o = optimal_discriminator(w, ps, pt, x)?;
        max_abs_error = max_abs_error.max((d - o).abs());
        rows.push((x, d, o));
    }
    let nodes: Vec<f64> = cfg.grid.points().collect();
    let on_grid = score(&nodes)?;
    let lookup = |x: f64| {
        let h = (cfg.grid.hi - cfg.grid.lo) / (cfg.grid.nodes - 1) as f64;
        on_grid[(((x - cfg.grid.lo) / h).round() as usize).min(on_grid.len() - 1)]
    };
    let trained_value = objective_value(w, ps, pt, &cfg.grid, lookup)?;
    let identity_value = identity_value(w, ps, pt, &cfg.grid)?;
    let value_gap = identity_value - trained_value;
    Ok(EmpiricalReport {
        max_abs_error,
        trained_value,
        identity_value,
        value_gap,
        converged: max_abs_error < 0.05 && value_gap < 1e-2,
        rows,
    })
}

/// A named density/weight configuration for the identity checks.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCase {
    pub name: &'static str,
    pub weight: WeightField,
    pub ps: Density1D,
    pub pt: Density1D,
}

/// Smooth configurations covering equal, shifted, scaled, multimodal and
/// reweighted pairs.
pub fn standard_cases() -> Vec<IdentityCase> {
    let g = Density1D::gaussian;
    vec![
        IdentityCase {
            name: "equal",
            weight: WeightField::ones(),
            ps: g(0.0, 1.0),
            pt: g(0.0, 1.0),
        },
        IdentityCase {
            name: "shifted",
            weight: WeightField::ones(),
            ps: g(0.0, 1.0),
            pt: g(2.0, 1.0),
        },
        IdentityCase {
            name: "scaled",
            weight: WeightField::ones(),
            ps: g(-1.0, 0.7),
            pt: g(1.0, 1.6),
        },
        IdentityCase {
            name: "mixture",
            weight: WeightField::new(WeightShape::Logistic { center: 0.5, slope: 2.0 }),
            ps: Density1D::Mixture(vec![(0.4, g(-2.0, 0.8)), (0.6, g(1.5, 1.0))]),
            pt: g(1.0, 1.2),
        },
        IdentityCase {
            name: "tilted",
            weight: WeightField::new(WeightShape::Exponential { rate: 0.8 }),
            ps: g(0.0, 1.0),
            pt: g(0.8, 1.0),
        },
        IdentityCase {
            name: "gated",
            weight: WeightField::new(WeightShape::Logistic { center: -1.0, slope: -3.0 }),
            ps: g(0.0, 2.0),
            pt: Density1D::Mixture(vec![(0.5, g(-3.0, 0.5)), (0.5, g(3.0, 0.5))]),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const JS_UNIT_GAUSSIANS_2: f64 = 0.336_830_820_346_831_6;

    #[test]
    fn densities_integrate_to_one() {
        let grid = Grid::default();
        for c in standard_cases() {
            for d in [&c.ps, &c.pt] {
                assert!((grid.simpson(|x| d.pdf(x)) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn discriminator_examples() {
        let g = Density1D::gaussian(0.0, 1.0);
        assert_eq!(optimal_discriminator(&WeightField::ones(), &g, &g, 0.3).unwrap(), 0.5);
        let three = WeightField {
            shape: WeightShape::Constant,
            scale: 3.0,
        };
        assert_eq!(optimal_discriminator(&three, &g, &g, 0.3).unwrap(), 0.75);
        let far = Density1D::Uniform { lo: 5.0, hi: 6.0 };
        assert_eq!(optimal_discriminator(&WeightField::ones(), &g, &far, 0.0).unwrap(), 1.0);
        let u = Density1D::Uniform { lo: 0.0, hi: 1.0 };
        assert!(matches!(
            optimal_discriminator(&WeightField::ones(), &u, &far, 3.0),
            Err(TheoryError::ZeroDensity(_))
        ));
    }

    #[test]
    fn js_examples() {
        let grid = Grid::default();
        let g0 = Density1D::gaussian(0.0, 1.0);
        let g2 = Density1D::gaussian(2.0, 1.0);
        let p = |x| g0.pdf(x);
        assert!(js_divergence(&p, &p, &grid).unwrap().abs() < 1e-12);
        let q = |x| g2.pdf(x);
        assert!((js_divergence(&p, &q, &grid).unwrap() - JS_UNIT_GAUSSIANS_2).abs() < 1e-9);
        let a = Density1D::Uniform { lo: -3.0, hi: -1.0 };
        let b = Density1D::Uniform { lo: 1.0, hi: 4.0 };
        let js = js_divergence(&|x| a.pdf(x), &|x| b.pdf(x), &grid).unwrap();
        assert!((js - LN_2).abs() < 1e-6);
        let off = Density1D::gaussian(9.5, 1.0);
        assert!(matches!(
            js_divergence(&p, &|x| off.pdf(x), &grid),
            Err(TheoryError::Coverage { .. })
        ));
    }

    #[test]
    fn identity_holds_on_standard_cases() {
        let grid = Grid::default();
        for c in standard_cases() {
            let w = c.weight.normalized(&c.ps, &grid).unwrap();
            let lhs = minimax_value(&w, &c.ps, &c.pt, &grid).unwrap();
            let rhs = identity_value(&w, &c.ps, &c.pt, &grid).unwrap();
            assert!((lhs - rhs).abs() < 1e-6, "{}: {lhs} vs {rhs}", c.name);
        }
    }

    #[test]
    fn equal_and_disjoint_values() {
        let grid = Grid::default();
        let g = Density1D::gaussian(0.5, 1.3);
        let v = minimax_value(&WeightField::ones(), &g, &g, &grid).unwrap();
        assert!((v + 1.386_294).abs() < 1e-6);
        let a = Density1D::Uniform { lo: -3.0, hi: -1.0 };
        let b = Density1D::Uniform { lo: 1.0, hi: 4.0 };
        let v = minimax_value(&WeightField::ones(), &a, &b, &grid).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let g = Density1D::gaussian(0.0, 1.0);
        let w = WeightField {
            shape: WeightShape::Constant,
            scale: 2.0,
        };
        assert!(matches!(
            minimax_value(&w, &g, &g, &Grid::default()),
            Err(TheoryError::Normalization(_))
        ));
    }

    #[test]
    fn empirical_identical_distributions_give_half() {
        let g = Density1D::gaussian(0.0, 1.0);
        let cfg = EmpiricalConfig {
            samples: 4000,
            epochs: 20,
            central: (-1.5, 1.5),
            ..EmpiricalConfig::default()
        };
        let r = empirical_check(&WeightField::ones(), &g, &g, &cfg).unwrap();
        assert!(r.max_abs_error < 0.05, "{}", r.max_abs_error);
        assert!(r.rows.iter().all(|row| row.2 == 0.5));
        assert!(r.csv().starts_with("x,d_trained,d_star\n-1.5,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn identity_for_random_gaussian_pairs(
            m1 in -2.0f64..2.0, s1 in 0.5f64..1.5,
            m2 in -2.0f64..2.0, s2 in 0.5f64..1.5,
            c in -1.0f64..1.0, k in -2.0f64..2.0,
        ) {
            let grid = Grid::default();
            let ps = Density1D::gaussian(m1, s1);
            let pt = Density1D::gaussian(m2, s2);
            let w = WeightField::new(WeightShape::Logistic { center: c, slope: k }).normalized(&ps, &grid).unwrap();
            let lhs = minimax_value(&w, &ps, &pt, &grid).unwrap();
            let rhs = identity_value(&w, &ps, &pt, &grid).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-6);
            for x in [-1.0, 0.0, 1.0] {
                let d = optimal_discriminator(&w, &ps, &pt, x).unwrap();
                prop_assert!(d > 0.0 && d < 1.0);
            }
        }

        #[test]
        fn renormalizing_keeps_discriminator_order(scale in 0.1f64..10.0, x in -3.0f64..3.0, y in -3.0f64..3.0) {
            let grid = Grid::default();
            let ps = Density1D::gaussian(0.0, 1.0);
            let pt = Density1D::gaussian(1.0, 1.0);
            let raw = WeightField { shape: WeightShape::Logistic { center: 0.0, slope: 1.0 }, scale };
            let w = raw.normalized(&ps, &grid).unwrap();
            prop_assert!((w.mass(&ps, &grid) - 1.0).abs() < 1e-9);
            let before = optimal_discriminator(&raw, &ps, &pt, x).unwrap() <= optimal_discriminator(&raw, &ps, &pt, y).unwrap();
            let after = optimal_discriminator(&w, &ps, &pt, x).unwrap() <= optimal_discriminator(&w, &ps, &pt, y).unwrap();
            prop_assert_eq!(before, after);
        }
    }
}
