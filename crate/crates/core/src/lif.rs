//! Leaky integrate-and-fire dynamics in discrete time.
//!
//! One step with unit time increment:
//!
//! ```text
//! v_pre  = v + (I - (v - v_reset)) / tau
//! s      = 1 if v_pre >= v_th else 0
//! v_next = v_pre * (1 - s) + v_reset * s
//! ```

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams<S> {
    pub tau: S,
    pub v_th: S,
    pub v_reset: S,
}

impl<S: Scalar> Default for LifParams<S> {
    fn default() -> Self {
        LifParams {
            tau: S::lit(2.0),
            v_th: S::lit(0.5),
            v_reset: S::zero(),
        }
    }
}

impl<S: Scalar> LifParams<S> {
    pub fn new(tau: S, v_th: S, v_reset: S) -> Result<Self> {
        let p = LifParams { tau, v_th, v_reset };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > S::one()) {
            return Err(Error::Domain(format!(
                "tau must exceed 1, got {}",
                self.tau
            )));
        }
        if !(self.v_th > S::zero()) {
            return Err(Error::Domain(format!(
                "v_th must be positive, got {}",
                self.v_th
            )));
        }
        if !(self.v_th > self.v_reset) {
            return Err(Error::Domain(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        Ok(())
    }

    /// Factor by which a post-reset potential carries into the next pre-spike potential.
    #[inline]
    pub fn decay(&self) -> S {
        S::one() - self.tau.recip()
    }

    #[inline]
    pub fn charge(&self, v: S, current: S) -> S {
        v + (current - (v - self.v_reset)) / self.tau
    }

    /// Heaviside with `Θ(0) = 1`.
    #[inline]
    pub fn fires(&self, v_pre: S) -> bool {
        v_pre >= self.v_th
    }

    #[inline]
    pub fn reset(&self, v_pre: S, spike: S) -> S {
        v_pre * (S::one() - spike) + self.v_reset * spike
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifState<S> {
    /// Membrane potential after the most recent reset.
    pub v: Tensor<S>,
    /// Spikes emitted by the most recent step.
    pub s: Tensor<S>,
}

impl<S: Scalar> LifState<S> {
    /// Neurons resting at `v_reset` with no spike history.
    pub fn resting(shape: &[usize], params: &LifParams<S>) -> Self {
        LifState {
            v: Tensor::full(shape, params.v_reset),
            s: Tensor::zeros(shape),
        }
    }
}

/// Advances a population by one timestep, returning the new state and the emitted spikes.
pub fn lif_step<S: Scalar>(
    state: &LifState<S>,
    input_current: &Tensor<S>,
    params: &LifParams<S>,
) -> Result<(LifState<S>, Tensor<S>)> {
    if state.v.shape() != input_current.shape() {
        return dim_err(format!(
            "membrane {:?} vs input current {:?}",
            state.v.shape(),
            input_current.shape()
        ));
    }
    input_current.ensure_finite("LIF input current")?;
    let n = input_current.len();
    let mut v_next = Vec::with_capacity(n);
    let mut spikes = Vec::with_capacity(n);
    for (&v, &i) in state.v.data().iter().zip(input_current.data()) {
        let v_pre = params.charge(v, i);
        let s = if params.fires(v_pre) {
            S::one()
        } else {
            S::zero()
        };
        v_next.push(params.reset(v_pre, s));
        spikes.push(s);
    }
    let shape = input_current.shape().to_vec();
    let spikes = Tensor::new(shape.clone(), spikes)?;
    let v = Tensor::new(shape, v_next)?;
    v.ensure_finite("membrane potential")?;
    Ok((
        LifState {
            v,
            s: spikes.clone(),
        },
        spikes,
    ))
}

/// Non-leaky, non-spiking accumulation used by the readout layer.
pub fn integrator_step<S: Scalar>(
    accumulator: &Tensor<S>,
    input_current: &Tensor<S>,
) -> Result<Tensor<S>> {
    accumulator.elementwise(crate::tensor::ElemOp::Add, input_current)
}
