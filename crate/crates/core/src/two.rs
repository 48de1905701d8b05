//! Temporally weighted output decoding.
//!
//! The readout current of each timestep is weighted by an importance factor `f_t`.
//! Factors start uniform and are low-pass filtered towards the normalized per-timestep
//! accuracy of each training batch. They never receive gradients and are frozen for
//! inference.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFactors {
    f: Vec<f64>,
    beta: f64,
    frozen: bool,
}

impl TemporalFactors {
    /// Uniform factors `1/T`.
    pub fn uniform(timesteps: usize, beta: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Domain("timesteps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Domain(format!("beta {beta} outside [0, 1]")));
        }
        Ok(TemporalFactors {
            f: vec![1.0 / timesteps as f64; timesteps],
            beta,
            frozen: false,
        })
    }

    /// Restores factors from storage; `f` must lie on the probability simplex.
    pub fn from_parts(f: Vec<f64>, beta: f64, frozen: bool) -> Result<Self> {
        if f.is_empty() || f.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("factors {f:?} are not non-negative")));
        }
        let total: f64 = f.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("factors sum to {total}, expected 1")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Domain(format!("beta {beta} outside [0, 1]")));
        }
        Ok(TemporalFactors { f, beta, frozen })
    }

    pub fn factors(&self) -> &[f64] {
        &self.f
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn timesteps(&self) -> usize {
        self.f.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `f ← β·f + (1−β)·Δ` with `Δ` the per-timestep accuracy normalized to sum 1
    /// (uniform when every timestep scored zero).
    pub fn update(&mut self, acc: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::State("temporal factors are frozen".into()));
        }
        if acc.len() != self.f.len() {
            return dim_err(format!(
                "{} accuracies for {} timesteps",
                acc.len(),
                self.f.len()
            ));
        }
        if acc.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Domain(format!("accuracies {acc:?} outside [0, 1]")));
        }
        let total: f64 = acc.iter().sum();
        let t = self.f.len() as f64;
        for (f, &a) in self.f.iter_mut().zip(acc) {
            let delta = if total > 0.0 { a / total } else { 1.0 / t };
            *f = self.beta * *f + (1.0 - self.beta) * delta;
        }
        Ok(())
    }

    /// Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }
}

/// `y = Σ_t f_t · I[t]` over readout currents `[T × batch × classes]`.
pub fn decode<S: Scalar>(
    factors: &TemporalFactors,
    output_currents: &Tensor<S>,
) -> Result<Tensor<S>> {
    let shape = output_currents.shape();
    if shape.len() != 3 || shape[0] != factors.timesteps() {
        return dim_err(format!(
            "readout currents {shape:?} do not match {} timesteps",
            factors.timesteps()
        ));
    }
    let f = factors.factors();
    if f.iter().all(|&v| v == f[0]) {
        return mean_decode(output_currents);
    }
    let frame = shape[1] * shape[2];
    let mut y = vec![S::zero(); frame];
    for (chunk, &f) in output_currents.data().chunks_exact(frame).zip(f) {
        let f = S::lit(f);
        for (acc, &i) in y.iter_mut().zip(chunk) {
            *acc += f * i;
        }
    }
    Tensor::new(vec![shape[1], shape[2]], y)
}

/// Plain mean of the readout currents over time, `(Σ_t I[t]) / T`.
pub fn mean_decode<S: Scalar>(output_currents: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = output_currents.shape();
    if shape.len() != 3 {
        return dim_err(format!(
            "readout currents {shape:?} are not [T × batch × classes]"
        ));
    }
    let frame = shape[1] * shape[2];
    let mut y = vec![S::zero(); frame];
    for chunk in output_currents.data().chunks_exact(frame) {
        for (acc, &i) in y.iter_mut().zip(chunk) {
            *acc += i;
        }
    }
    let t = S::from_usize(shape[0]).expect("timesteps fit in scalar");
    for v in &mut y {
        *v /= t;
    }
    Tensor::new(vec![shape[1], shape[2]], y)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of a `[batch × classes]` matrix whose argmax equals the label.
pub fn accuracy<S: Scalar>(scores: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    Ok(correct_count(scores, labels)? as f64 / labels.len() as f64)
}

pub(crate) fn correct_count<S: Scalar>(scores: &Tensor<S>, labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if scores.shape().len() != 2 || scores.shape()[0] != labels.len() {
        return dim_err(format!(
            "scores {:?} for {} labels",
            scores.shape(),
            labels.len()
        ));
    }
    let classes = scores.shape()[1];
    check_labels(labels, classes)?;
    Ok(scores
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(l) => Err(Error::Domain(format!("label {l} outside [0, {classes})"))),
        None => Ok(()),
    }
}

/// Top-1 accuracy of each timestep's readout current on its own.
pub fn per_timestep_accuracy<S: Scalar>(
    output_currents: &Tensor<S>,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let shape = output_currents.shape();
    if labels.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if shape.len() != 3 || shape[1] != labels.len() {
        return dim_err(format!(
            "readout currents {shape:?} for {} labels",
            labels.len()
        ));
    }
    let frame = shape[1] * shape[2];
    output_currents
        .data()
        .chunks_exact(frame)
        .map(|chunk| {
            let t = Tensor::new(vec![shape[1], shape[2]], chunk.to_vec())?;
            accuracy(&t, labels)
        })
        .collect()
}
