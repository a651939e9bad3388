//! Moving semantic transfer: per-class moving-average centroids for the two
//! domains and the squared-distance alignment loss between them.

use crate::diffcore::{DiffError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum SemanticError {
    #[error("zeta {0} outside [0, 1]")]
    Zeta(f64),
    #[error("label {label} outside {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("centroid shapes differ: {0}")]
    Shape(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Source and target centroids, `classes x width` each, starting at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    zeta: f64,
}

impl CentroidBank {
    pub fn new(classes: usize, width: usize, zeta: f64) -> Result<Self, SemanticError> {
        if !(0.0..=1.0).contains(&zeta) {
            return Err(SemanticError::Zeta(zeta));
        }
        Ok(Self {
            source: vec![vec![0.0; width]; classes],
            target: vec![vec![0.0; width]; classes],
            zeta,
        })
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn classes(&self) -> usize {
        self.source.len()
    }

    pub fn update_source(&mut self, batch: &[Vec<f64>], present: &[bool]) -> Result<(), SemanticError> {
        ema_update(&mut self.source, batch, present, self.zeta)
    }

    pub fn update_target(&mut self, batch: &[Vec<f64>], present: &[bool]) -> Result<(), SemanticError> {
        ema_update(&mut self.target, batch, present, self.zeta)
    }

    /// `sum_k |C_s^k - C_t^k|^2`.
    pub fn sm_loss(&self) -> f64 {
        self.source
            .iter()
            .zip(&self.target)
            .map(|(s, t)| s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum()
    }
}

/// Per-class means of `features` with a presence mask; absent classes get a
/// zero row.
pub fn batch_centroids(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> Result<(Vec<Vec<f64>>, Vec<bool>), SemanticError> {
    let width = features.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; width]; classes];
    let mut counts = vec![0usize; classes];
    for (f, &y) in features.iter().zip(labels) {
        if y >= classes {
            return Err(SemanticError::Label { label: y, classes });
        }
        if f.len() != width {
            return Err(SemanticError::Shape("ragged feature rows".into()));
        }
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(f) {
            *s += v;
        }
    }
    for (row, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok((sums, counts.iter().map(|&c| c > 0).collect()))
}

/// `C <- zeta C + (1 - zeta) B` on the rows marked present.
pub fn ema_update(
    centroids: &mut [Vec<f64>],
    batch: &[Vec<f64>],
    present: &[bool],
    zeta: f64,
) -> Result<(), SemanticError> {
    if centroids.len() != batch.len() || present.len() != batch.len() {
        return Err(SemanticError::Shape(format!(
            "{} centroids, {} batch rows, {} mask entries",
            centroids.len(),
            batch.len(),
            present.len()
        )));
    }
    for ((c, b), &p) in centroids.iter_mut().zip(batch).zip(present) {
        if !p {
            continue;
        }
        if c.len() != b.len() {
            return Err(SemanticError::Shape("centroid width".into()));
        }
        for (cv, bv) in c.iter_mut().zip(b) {
            *cv = zeta * *cv + (1.0 - zeta) * bv;
        }
    }
    Ok(())
}

/// Arg-max per probability row, ties to the lowest class index.
pub fn pseudo_label(probabilities: &[Vec<f64>]) -> Vec<usize> {
    probabilities
        .iter()
        .map(|p| {
            let mut best = 0;
            for (k, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Alignment loss with the target centroids updated in-graph from the
/// target features `f` (`[batch, width]`) and their pseudo-labels; the
/// source centroids and previous target centroids are constants.
///
/// Returns the loss and the updated target centroids.
pub fn sm_loss_graph(
    tape: &mut Tape,
    bank: &CentroidBank,
    f: Var,
    pseudo: &[usize],
) -> Result<(Var, Vec<Vec<f64>>), SemanticError> {
    let k = bank.classes();
    let width = bank.source.first().map_or(0, Vec::len);
    let (n, w) = (tape.value(f).rows(), tape.value(f).cols());
    if w != width || pseudo.len() != n {
        return Err(SemanticError::Shape(format!(
            "features [{n}, {w}] with {} labels for width {width}",
            pseudo.len()
        )));
    }
    let mut counts = vec![0usize; k];
    for &y in pseudo {
        if y >= k {
            return Err(SemanticError::Label { label: y, classes: k });
        }
        counts[y] += 1;
    }
    let z = bank.zeta;
    // averaging matrix scaled by (1 - zeta), and the constant carried part
    let mut avg = vec![0.0; k * n];
    for (i, &y) in pseudo.iter().enumerate() {
        avg[y * n + i] = (1.0 - z) / counts[y] as f64;
    }
    let mut carry = Vec::with_capacity(k * width);
    for (c, row) in counts.iter().zip(&bank.target) {
        let s = if *c > 0 { z } else { 1.0 };
        carry.extend(row.iter().map(|v| s * v));
    }
    let a = tape.input(Tensor::new(vec![k, n], avg)?)?;
    let moved = tape.affine(a, f, None)?;
    let carry = tape.input(Tensor::new(vec![k, width], carry)?)?;
    let updated = tape.add(moved, carry)?;
    let src: Vec<f64> = bank.source.iter().flatten().copied().collect();
    let src = tape.input(Tensor::new(vec![k, width], src)?)?;
    let diff = tape.sub(updated, src)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.sum(sq)?;
    let vals = tape.value(updated);
    let new_target = (0..k).map(|r| vals.row(r).to_vec()).collect();
    Ok((loss, new_target))
}
