//! Finite-difference verification of the backward pass.
//!
//! The scalar checked is `cross_entropy(decode(forward_relaxed(W, x)))` at 64-bit precision.

use crate::error::{Error, Result};
use crate::lif::LifParams;
use crate::network::{backward, forward, Gradients, Input, Mode, NetworkParams, NetworkSpec};
use crate::optim::softmax_cross_entropy;
use crate::rng::{sample_gaussian, Purpose, RngStream, StreamKey};
use crate::surrogate::{SurrogateFamily, SurrogateSpec};
use crate::tensor::Tensor;
use crate::two::{decode, TemporalFactors};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub layer_sizes: Vec<usize>,
    pub timesteps: usize,
    pub batch: usize,
    pub family: SurrogateFamily,
    pub alpha: f64,
    pub lif: LifParams<f64>,
    pub step: f64,
    pub tolerance: f64,
    pub init_gain: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            layer_sizes: vec![16, 8, 4],
            timesteps: 4,
            batch: 6,
            family: SurrogateFamily::Arctan,
            alpha: 2.0,
            lif: LifParams::default(),
            step: 1e-4,
            tolerance: 1e-5,
            init_gain: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerError {
    pub layer: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub family: SurrogateFamily,
    pub alpha: f64,
    pub layers: Vec<LayerError>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub parameters: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// The checked problem: network, weights, input, labels and decoding factors.
#[derive(Clone, Debug)]
pub struct Problem {
    pub spec: NetworkSpec<f64>,
    pub params: NetworkParams<f64>,
    pub input: Input<f64>,
    pub labels: Vec<usize>,
    pub factors: TemporalFactors,
}

impl Problem {
    pub fn build(cfg: &GradcheckConfig) -> Result<Self> {
        if !(cfg.step > 0.0) {
            return Err(Error::Domain(format!(
                "finite-difference step {} must be positive",
                cfg.step
            )));
        }
        if cfg.batch == 0 {
            return Err(Error::Domain("gradcheck batch must be at least 1".into()));
        }
        let spec = NetworkSpec::new(
            cfg.layer_sizes.clone(),
            cfg.timesteps,
            cfg.lif,
            SurrogateSpec::new(cfg.family, cfg.alpha)?,
            // Finite differences see the reset path, so it must be differentiated too.
            false,
        )?;
        let params = NetworkParams::init(&spec, cfg.seed, cfg.init_gain)?;
        let probe = |layer| RngStream::new(cfg.seed, StreamKey::new(Purpose::Probe, 0, 0, layer));
        let x = sample_gaussian(&probe(0), &[cfg.batch, spec.input_dim()], 0.0, 1.0)?;
        let classes = spec.output_dim();
        let labels = (0..cfg.batch)
            .map(|i| (i * 7 + cfg.seed as usize) % classes)
            .collect();
        // Non-uniform factors so the per-timestep readout scaling is exercised.
        let raw: Vec<f64> = (1..=cfg.timesteps).map(|t| t as f64).collect();
        let total: f64 = raw.iter().sum();
        let factors =
            TemporalFactors::from_parts(raw.iter().map(|r| r / total).collect(), 0.9, true)?;
        Ok(Problem {
            spec,
            params,
            input: Input::Static(x),
            labels,
            factors,
        })
    }

    pub fn loss(&self, params: &NetworkParams<f64>) -> Result<f64> {
        let trace = forward(params, &self.spec, &self.input, Mode::Relaxed)?;
        let y = decode(&self.factors, &trace.output_currents)?;
        Ok(softmax_cross_entropy(&y, &self.labels)?.0)
    }

    pub fn analytic(&self) -> Result<Gradients<f64>> {
        let trace = forward(&self.params, &self.spec, &self.input, Mode::Relaxed)?;
        let y = decode(&self.factors, &trace.output_currents)?;
        let (_, gy) = softmax_cross_entropy(&y, &self.labels)?;
        let mut g = Vec::with_capacity(trace.output_currents.len());
        for &f in self.factors.factors() {
            g.extend(gy.data().iter().map(|&v| f * v));
        }
        let g = Tensor::new(trace.output_currents.shape().to_vec(), g)?;
        backward(&trace, &self.params, &self.spec, &g)
    }

    /// Central differences `(L(w+h) − L(w−h)) / 2h`, one weight at a time.
    pub fn numeric(&self, h: f64) -> Result<Gradients<f64>> {
        let mut probe = self.params.clone();
        let mut grads = Vec::with_capacity(probe.weights.len());
        for l in 0..probe.weights.len() {
            let mut g = Vec::with_capacity(probe.weights[l].len());
            for i in 0..probe.weights[l].len() {
                let w0 = probe.weights[l].data()[i];
                probe.weights[l].data_mut()[i] = w0 + h;
                let up = self.loss(&probe)?;
                probe.weights[l].data_mut()[i] = w0 - h;
                let down = self.loss(&probe)?;
                probe.weights[l].data_mut()[i] = w0;
                g.push((up - down) / (2.0 * h));
            }
            grads.push(Tensor::new(probe.weights[l].shape().to_vec(), g)?);
        }
        Ok(Gradients { grads })
    }
}

/// Compares analytic and numeric gradients. `sabotage` flips the analytic sign, a negative
/// control that must fail.
pub fn gradcheck(cfg: &GradcheckConfig, sabotage: bool) -> Result<GradcheckReport> {
    let problem = Problem::build(cfg)?;
    let mut analytic = problem.analytic()?;
    if sabotage {
        for g in &mut analytic.grads {
            for v in g.data_mut() {
                *v = -*v;
            }
        }
    }
    let numeric = problem.numeric(cfg.step)?;
    let layers: Vec<LayerError> = analytic
        .grads
        .iter()
        .zip(&numeric.grads)
        .enumerate()
        .map(|(layer, (a, n))| {
            let mut worst = 0;
            let mut max_rel = 0.0f64;
            let mut max_abs = 0.0f64;
            for (i, (&a, &n)) in a.data().iter().zip(n.data()).enumerate() {
                let r = relative_error(a, n);
                if r > max_rel {
                    max_rel = r;
                    worst = i;
                }
                max_abs = max_abs.max((a - n).abs());
            }
            LayerError {
                layer,
                max_rel_err: max_rel,
                max_abs_err: max_abs,
                worst,
            }
        })
        .collect();
    let max_rel_err = layers.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        family: cfg.family,
        alpha: cfg.alpha,
        layers,
        max_rel_err,
        tolerance: cfg.tolerance,
        parameters: problem.params.num_parameters(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, -1.0), 2.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn arctan_passes() {
        let r = gradcheck(&GradcheckConfig::default(), false).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.parameters, 16 * 8 + 8 * 4);
    }

    #[test]
    fn piecewise_linear_passes() {
        let cfg = GradcheckConfig {
            family: SurrogateFamily::PiecewiseLinear,
            alpha: 1.0,
            ..GradcheckConfig::default()
        };
        let r = gradcheck(&cfg, false).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn sabotage_fails() {
        let r = gradcheck(&GradcheckConfig::default(), true).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_err > 1.0);
    }

    #[test]
    fn deeper_net_passes() {
        let cfg = GradcheckConfig {
            layer_sizes: vec![6, 5, 4, 3],
            timesteps: 5,
            ..GradcheckConfig::default()
        };
        let r = gradcheck(&cfg, false).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
