//! Fully connected spiking network unrolled over `T` timesteps.
//!
//! Layer `l` computes `I[t] = S_prev[t] · Wᵀ`. Hidden layers are LIF populations; the
//! readout layer only integrates its current and never spikes or leaks. Per-layer
//! quantities are stored time-major as `[T × batch × width]` so a whole layer's
//! weight gradient is a single matrix product over the stacked `T·batch` rows.

use crate::error::{dim_err, Error, Result};
use crate::lif::LifParams;
use crate::rng::{sample_uniform, Purpose, RngStream, StreamKey};
use crate::scalar::Scalar;
use crate::surrogate::SurrogateSpec;
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec<S> {
    /// `[d_in, d_1, …, d_L]`; the last entry is the readout width.
    pub layer_sizes: Vec<usize>,
    pub timesteps: usize,
    pub lif: LifParams<S>,
    pub surrogate: SurrogateSpec<S>,
    /// Treat the spike factor of the reset `V·(1−S)` as a constant in backward.
    pub reset_detach: bool,
}

impl<S: Scalar> NetworkSpec<S> {
    pub fn new(
        layer_sizes: Vec<usize>,
        timesteps: usize,
        lif: LifParams<S>,
        surrogate: SurrogateSpec<S>,
        reset_detach: bool,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            layer_sizes,
            timesteps,
            lif,
            surrogate,
            reset_detach,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::Domain(format!(
                "need an input, at least one hidden layer and a readout, got sizes {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Domain(format!(
                "zero layer size in {:?}",
                self.layer_sizes
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::Domain("timesteps must be at least 1".into()));
        }
        self.lif.validate()
    }

    /// Number of weight matrices (hidden layers + readout).
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated sizes")
    }

    /// `[d_l, d_{l-1}]` for weight matrix `l` (0-based).
    pub fn weight_shape(&self, l: usize) -> [usize; 2] {
        [self.layer_sizes[l + 1], self.layer_sizes[l]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<S> {
    pub weights: Vec<Tensor<S>>,
}

impl<S: Scalar> NetworkParams<S> {
    /// Uniform `±gain/√fan_in` initialization, one keyed stream per layer.
    pub fn init(spec: &NetworkSpec<S>, master_seed: u64, gain: f64) -> Result<Self> {
        let weights = (0..spec.num_layers())
            .map(|l| {
                let shape = spec.weight_shape(l);
                let bound = gain / (shape[1] as f64).sqrt();
                let stream = RngStream::new(
                    master_seed,
                    StreamKey::new(Purpose::WeightInit, 0, 0, l as u64),
                );
                sample_uniform(&stream, &shape, -bound, bound)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkParams { weights })
    }

    pub fn zeros(spec: &NetworkSpec<S>) -> Self {
        NetworkParams {
            weights: (0..spec.num_layers())
                .map(|l| Tensor::zeros(&spec.weight_shape(l)))
                .collect(),
        }
    }

    pub fn validate(&self, spec: &NetworkSpec<S>) -> Result<()> {
        if self.weights.len() != spec.num_layers() {
            return dim_err(format!(
                "{} weight matrices for {} layers",
                self.weights.len(),
                spec.num_layers()
            ));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.shape() != spec.weight_shape(l) {
                return dim_err(format!(
                    "weight {l} has shape {:?}, expected {:?}",
                    w.shape(),
                    spec.weight_shape(l)
                ));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }
}

/// Network input for one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub enum Input<S> {
    /// `[batch × d_in]`, presented unchanged at every timestep.
    Static(Tensor<S>),
    /// `[T × batch × d_in]`, one frame per timestep.
    Temporal(Tensor<S>),
}

impl<S: Scalar> Input<S> {
    pub fn batch(&self) -> usize {
        match self {
            Input::Static(x) => x.shape()[0],
            Input::Temporal(x) => x.shape()[1],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Input::Static(x) => x.cols(),
            Input::Temporal(x) => x.cols(),
        }
    }

    fn check(&self, spec: &NetworkSpec<S>) -> Result<()> {
        match self {
            Input::Static(x) if x.shape().len() == 2 && x.shape()[1] == spec.input_dim() => Ok(()),
            Input::Temporal(x)
                if x.shape().len() == 3
                    && x.shape()[0] == spec.timesteps
                    && x.shape()[2] == spec.input_dim() =>
            {
                Ok(())
            }
            Input::Static(x) => dim_err(format!(
                "static input {:?} does not match d_in = {}",
                x.shape(),
                spec.input_dim()
            )),
            Input::Temporal(x) => dim_err(format!(
                "temporal input {:?} does not match [T={}, batch, d_in={}]",
                x.shape(),
                spec.timesteps,
                spec.input_dim()
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Heaviside spikes; backward substitutes the surrogate.
    Spiking,
    /// Spikes replaced by the smooth relaxed activation (verification only).
    Relaxed,
}

/// Intermediates of one hidden layer, each `[T × batch × width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace<S> {
    pub currents: Tensor<S>,
    pub v_pre: Tensor<S>,
    pub spikes: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<S> {
    pub mode: Mode,
    pub timesteps: usize,
    pub batch: usize,
    pub input: Input<S>,
    pub hidden: Vec<HiddenTrace<S>>,
    /// Readout currents `[T × batch × classes]`.
    pub output_currents: Tensor<S>,
    /// Integrated readout after the last timestep, `[batch × classes]`.
    pub output_total: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub grads: Vec<Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(params: &NetworkParams<S>) -> Self {
        Gradients {
            grads: params
                .weights
                .iter()
                .map(|w| Tensor::zeros(w.shape()))
                .collect(),
        }
    }
}

/// `[rows × k] · Wᵀ` for `W: [n × k]`.
fn project<S: Scalar>(x: &[S], rows: usize, w: &Tensor<S>) -> Vec<S> {
    let (n, k) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![S::zero(); rows * n];
    gemm(
        MatRef::new(x, rows, k, false),
        MatRef::new(w.data(), n, k, true),
        &mut out,
        false,
    );
    out
}

fn run_hidden_layer<S: Scalar>(
    currents: Vec<S>,
    spec: &NetworkSpec<S>,
    batch: usize,
    width: usize,
    mode: Mode,
) -> Result<HiddenTrace<S>> {
    let lif = &spec.lif;
    let frame = batch * width;
    let mut v = vec![lif.v_reset; frame];
    let mut v_pre = Vec::with_capacity(currents.len());
    let mut spikes = Vec::with_capacity(currents.len());
    for cur in currents.chunks_exact(frame) {
        for (v, &i) in v.iter_mut().zip(cur) {
            let vp = lif.charge(*v, i);
            let s = match mode {
                Mode::Spiking => {
                    if lif.fires(vp) {
                        S::one()
                    } else {
                        S::zero()
                    }
                }
                Mode::Relaxed => spec.surrogate.relaxed(vp - lif.v_th),
            };
            *v = lif.reset(vp, s);
            v_pre.push(vp);
            spikes.push(s);
        }
    }
    let shape = vec![spec.timesteps, batch, width];
    let trace = HiddenTrace {
        currents: Tensor::new(shape.clone(), currents)?,
        v_pre: Tensor::new(shape.clone(), v_pre)?,
        spikes: Tensor::new(shape, spikes)?,
    };
    trace.v_pre.ensure_finite("membrane potential")?;
    Ok(trace)
}

/// Runs the network over all timesteps and records every intermediate.
pub fn forward<S: Scalar>(
    params: &NetworkParams<S>,
    spec: &NetworkSpec<S>,
    input: &Input<S>,
    mode: Mode,
) -> Result<ForwardTrace<S>> {
    spec.validate()?;
    params.validate(spec)?;
    input.check(spec)?;
    let t_steps = spec.timesteps;
    let batch = input.batch();
    let n_hidden = spec.num_layers() - 1;

    let mut hidden: Vec<HiddenTrace<S>> = Vec::with_capacity(n_hidden);
    for l in 0..n_hidden {
        let width = spec.layer_sizes[l + 1];
        let currents = match (l, input) {
            (0, Input::Static(x)) => {
                x.ensure_finite("network input")?;
                let once = project(x.data(), batch, &params.weights[0]);
                let mut all = Vec::with_capacity(once.len() * t_steps);
                for _ in 0..t_steps {
                    all.extend_from_slice(&once);
                }
                all
            }
            (0, Input::Temporal(x)) => {
                x.ensure_finite("network input")?;
                project(x.data(), t_steps * batch, &params.weights[0])
            }
            _ => project(
                hidden[l - 1].spikes.data(),
                t_steps * batch,
                &params.weights[l],
            ),
        };
        hidden.push(run_hidden_layer(currents, spec, batch, width, mode)?);
    }

    let classes = spec.output_dim();
    let last = hidden.last().expect("at least one hidden layer");
    let out = project(
        last.spikes.data(),
        t_steps * batch,
        &params.weights[n_hidden],
    );
    let mut total = vec![S::zero(); batch * classes];
    for frame in out.chunks_exact(batch * classes) {
        for (acc, &i) in total.iter_mut().zip(frame) {
            *acc += i;
        }
    }
    let output_currents = Tensor::new(vec![t_steps, batch, classes], out)?;
    output_currents.ensure_finite("readout current")?;
    Ok(ForwardTrace {
        mode,
        timesteps: t_steps,
        batch,
        input: input.clone(),
        hidden,
        output_currents,
        output_total: Tensor::new(vec![batch, classes], total)?,
    })
}

/// Reverse-mode differentiation of the unrolled network.
///
/// `grad_output` is `∂L/∂I_out[t]` stacked as `[T × batch × classes]`. In both modes the
/// spike derivative is the surrogate evaluated at the pre-spike potential; in relaxed
/// mode that is the exact derivative of the forward nonlinearity.
pub fn backward<S: Scalar>(
    trace: &ForwardTrace<S>,
    params: &NetworkParams<S>,
    spec: &NetworkSpec<S>,
    grad_output: &Tensor<S>,
) -> Result<Gradients<S>> {
    params.validate(spec)?;
    let t_steps = spec.timesteps;
    let batch = trace.batch;
    let n_hidden = spec.num_layers() - 1;
    if trace.timesteps != t_steps || trace.hidden.len() != n_hidden {
        return dim_err("trace was produced by a different network spec");
    }
    if grad_output.shape() != trace.output_currents.shape() {
        return dim_err(format!(
            "readout gradient {:?} vs readout currents {:?}",
            grad_output.shape(),
            trace.output_currents.shape()
        ));
    }
    grad_output.ensure_finite("readout gradient")?;

    let rows = t_steps * batch;
    let mut grads: Vec<Option<Tensor<S>>> = vec![None; spec.num_layers()];

    // Readout: gW = Σ_t δI[t]ᵀ S[t];  δS[t] = δI[t] · W
    let w_out = &params.weights[n_hidden];
    let [classes, width] = spec.weight_shape(n_hidden);
    let mut g = vec![S::zero(); classes * width];
    gemm(
        MatRef::new(grad_output.data(), rows, classes, true),
        MatRef::new(trace.hidden[n_hidden - 1].spikes.data(), rows, width, false),
        &mut g,
        false,
    );
    grads[n_hidden] = Some(Tensor::new(vec![classes, width], g)?);
    let mut grad_spikes = vec![S::zero(); rows * width];
    gemm(
        MatRef::new(grad_output.data(), rows, classes, false),
        MatRef::new(w_out.data(), classes, width, false),
        &mut grad_spikes,
        false,
    );

    let lif = &spec.lif;
    let inv_tau = spec.lif.tau.recip();
    let decay = lif.decay();
    for l in (0..n_hidden).rev() {
        let layer = &trace.hidden[l];
        let width = spec.layer_sizes[l + 1];
        let frame = batch * width;
        let v_pre = layer.v_pre.data();
        let spikes = layer.spikes.data();

        let mut grad_current = vec![S::zero(); rows * width];
        // ∂L/∂V_post[t], already multiplied through the next step's leak.
        let mut carry = vec![S::zero(); frame];
        for t in (0..t_steps).rev() {
            let range = t * frame..(t + 1) * frame;
            for (e, idx) in range.enumerate() {
                let vp = v_pre[idx];
                let s = spikes[idx];
                let dv_post = carry[e];
                let mut ds = grad_spikes[idx];
                if !spec.reset_detach {
                    ds += dv_post * (lif.v_reset - vp);
                }
                let sg = spec.surrogate.derivative(vp - lif.v_th);
                let dv_pre = dv_post * (S::one() - s) + ds * sg;
                grad_current[idx] = dv_pre * inv_tau;
                carry[e] = dv_pre * decay;
            }
        }

        let fan_in = spec.layer_sizes[l];
        let mut g = vec![S::zero(); width * fan_in];
        match (l, &trace.input) {
            (0, Input::Static(x)) => {
                let mut summed = vec![S::zero(); frame];
                for chunk in grad_current.chunks_exact(frame) {
                    for (acc, &v) in summed.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                gemm(
                    MatRef::new(&summed, batch, width, true),
                    MatRef::new(x.data(), batch, fan_in, false),
                    &mut g,
                    false,
                );
            }
            (0, Input::Temporal(x)) => gemm(
                MatRef::new(&grad_current, rows, width, true),
                MatRef::new(x.data(), rows, fan_in, false),
                &mut g,
                false,
            ),
            _ => gemm(
                MatRef::new(&grad_current, rows, width, true),
                MatRef::new(trace.hidden[l - 1].spikes.data(), rows, fan_in, false),
                &mut g,
                false,
            ),
        }
        grads[l] = Some(Tensor::new(vec![width, fan_in], g)?);

        if l > 0 {
            let mut below = vec![S::zero(); rows * fan_in];
            gemm(
                MatRef::new(&grad_current, rows, width, false),
                MatRef::new(params.weights[l].data(), width, fan_in, false),
                &mut below,
                false,
            );
            grad_spikes = below;
        }
    }

    let grads: Vec<Tensor<S>> = grads
        .into_iter()
        .map(|g| g.expect("every layer visited"))
        .collect();
    for g in &grads {
        g.ensure_finite("weight gradient")?;
    }
    Ok(Gradients { grads })
}

/// Mean spike value per hidden layer over batch, neurons and timesteps.
pub fn firing_rates<S: Scalar>(trace: &ForwardTrace<S>) -> Result<Vec<f64>> {
    if trace.mode != Mode::Spiking {
        return Err(Error::Mode("firing rates need a spiking-mode trace".into()));
    }
    Ok(trace
        .hidden
        .iter()
        .map(|h| h.spikes.mean().as_f64())
        .collect())
}
