//! Masked surrogate gradients.
//!
//! Every weight matrix gets a fresh binary mask of its own shape per minibatch, with
//! entries kept with probability `1 − p`. The surrogate gradient is multiplied by the
//! mask before the optimizer sees it, so `p = 0` is plain surrogate-gradient training.

use rand::distr::{Bernoulli, Distribution};
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};
use crate::network::{Gradients, NetworkParams};
use crate::rng::{bernoulli_draws, sample_bernoulli, Purpose, RngStream, StreamKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPlan {
    /// Probability that a gradient entry is zeroed.
    pub p: f64,
    /// Divide surviving entries by `1 − p`.
    pub inverted_scaling: bool,
}

impl Default for MaskPlan {
    fn default() -> Self {
        MaskPlan {
            p: 0.0,
            inverted_scaling: false,
        }
    }
}

impl MaskPlan {
    pub fn new(p: f64, inverted_scaling: bool) -> Result<Self> {
        let plan = MaskPlan {
            p,
            inverted_scaling,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability(self.p)?;
        if self.inverted_scaling && self.p >= 1.0 {
            return Err(Error::Domain(
                "inverted scaling is undefined for mask probability 1".into(),
            ));
        }
        Ok(())
    }

    pub fn keep_prob(&self) -> f64 {
        1.0 - self.p
    }

    pub fn is_identity(&self) -> bool {
        self.p == 0.0
    }
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "mask probability {p} outside [0, 1]"
        )))
    }
}

/// Stream key of the mask for `layer` in minibatch `batch` of `epoch`.
pub fn mask_key(epoch: u64, batch: u64, layer: u64) -> StreamKey {
    StreamKey::new(Purpose::Mask, epoch, batch, layer)
}

/// One mask per weight matrix, regenerated from `(epoch, batch, layer)`.
pub fn generate_masks<S: Scalar>(
    master_seed: u64,
    params: &NetworkParams<S>,
    p: f64,
    epoch: u64,
    batch: u64,
) -> Result<Vec<Tensor<S>>> {
    check_probability(p)?;
    params
        .weights
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let stream = RngStream::new(master_seed, mask_key(epoch, batch, l as u64));
            sample_bernoulli(&stream, w.shape(), 1.0 - p)
        })
        .collect()
}

/// `G = G_SG ⊙ M`, optionally rescaled by `1/(1 − p)`.
pub fn apply_mask<S: Scalar>(
    grads: &Gradients<S>,
    masks: &[Tensor<S>],
    plan: &MaskPlan,
) -> Result<Gradients<S>> {
    plan.validate()?;
    if grads.grads.len() != masks.len() {
        return dim_err(format!(
            "{} gradients but {} masks",
            grads.grads.len(),
            masks.len()
        ));
    }
    let scale = if plan.inverted_scaling {
        S::lit(1.0 / (1.0 - plan.p))
    } else {
        S::one()
    };
    let grads = grads
        .grads
        .iter()
        .zip(masks)
        .map(|(g, m)| {
            if g.shape() != m.shape() {
                return dim_err(format!("gradient {:?} vs mask {:?}", g.shape(), m.shape()));
            }
            let data = g
                .data()
                .iter()
                .zip(m.data())
                .map(|(&g, &m)| g * (m * scale))
                .collect();
            Tensor::new(g.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients { grads })
}

/// Masks `grads` in place with the same masks [`generate_masks`] would produce for
/// `(epoch, batch)`, without materializing them.
pub fn mask_in_place<S: Scalar>(
    master_seed: u64,
    grads: &mut Gradients<S>,
    plan: &MaskPlan,
    epoch: u64,
    batch: u64,
) -> Result<()> {
    plan.validate()?;
    if plan.is_identity() {
        return Ok(());
    }
    let scale = if plan.inverted_scaling {
        S::lit(1.0 / (1.0 - plan.p))
    } else {
        S::one()
    };
    for (l, g) in grads.grads.iter_mut().enumerate() {
        let stream = RngStream::new(master_seed, mask_key(epoch, batch, l as u64));
        let data = g.data_mut();
        let n = data.len();
        let factor = [S::zero(), scale];
        bernoulli_draws(&stream, n, plan.keep_prob(), |i, keep| {
            data[i] *= factor[keep as usize];
        });
    }
    Ok(())
}

/// Variance of `Ḡ·m/(1−p)` for `Ḡ ~ N(μ, σ²)`, `m ~ Bernoulli(1−p)`.
pub fn predicted_variance(mu: f64, sigma: f64, p: f64) -> f64 {
    sigma * sigma + p / (1.0 - p) * (mu * mu + sigma * sigma)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceReport {
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub predicted_mean: f64,
    pub predicted_var: f64,
    pub n_samples: usize,
}

impl VarianceReport {
    /// `|mean − μ|` in units of the predicted standard error.
    pub fn mean_z(&self) -> f64 {
        (self.empirical_mean - self.predicted_mean).abs()
            / (self.predicted_var / self.n_samples as f64).sqrt()
    }

    pub fn var_ratio(&self) -> f64 {
        self.empirical_var / self.predicted_var
    }
}

/// Monte-Carlo check of the masked-gradient mean and variance.
pub fn variance_oracle(
    mu: f64,
    sigma: f64,
    p: f64,
    n_samples: usize,
    stream: &RngStream,
) -> Result<VarianceReport> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Domain(format!(
            "negative standard deviation {sigma}"
        )));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "mask probability {p} must lie in [0, 1)"
        )));
    }
    if n_samples < 10_000 {
        return Err(Error::Domain(format!(
            "variance oracle needs at least 10^4 samples, got {n_samples}"
        )));
    }
    let keep = Bernoulli::new(1.0 - p).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = stream.rng();
    let scale = 1.0 / (1.0 - p);
    // Welford accumulation
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for i in 0..n_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let g = if keep.sample(&mut rng) {
            (mu + sigma * z) * scale
        } else {
            0.0
        };
        let delta = g - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (g - mean);
    }
    Ok(VarianceReport {
        empirical_mean: mean,
        empirical_var: m2 / (n_samples - 1) as f64,
        predicted_mean: mu,
        predicted_var: predicted_variance(mu, sigma, p),
        n_samples,
    })
}
