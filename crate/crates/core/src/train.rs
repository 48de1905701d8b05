//! Minibatch training loop with gradient masks and temporal decoding factors, and evaluation.

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::msg::{mask_in_place, MaskPlan};
use crate::network::{backward, firing_rates, forward, Mode, NetworkParams, NetworkSpec};
use crate::optim::{softmax_cross_entropy, OptimizerState, Schedule};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::two::{correct_count, decode, mean_decode, per_timestep_accuracy, TemporalFactors};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochConfig {
    pub epoch: u64,
    pub master_seed: u64,
    pub batch_size: usize,
    pub mask: MaskPlan,
    /// When false the factors stay at their current (uniform) value.
    pub two_enabled: bool,
    pub shuffle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Learning rate of the first and last step of the epoch.
    pub lr_first: f64,
    pub lr_last: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub per_timestep_train_acc: Vec<f64>,
    pub factors: Vec<f64>,
    pub batches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    /// With the given factors.
    pub accuracy: f64,
    /// With plain mean decoding over time, on the same forward passes.
    pub mean_decode_accuracy: f64,
    pub per_timestep_acc: Vec<f64>,
    pub firing_rates: Vec<f64>,
}

/// Shuffle stream of one epoch.
pub fn shuffle_stream(master_seed: u64, epoch: u64) -> RngStream {
    RngStream::new(master_seed, StreamKey::new(Purpose::Shuffle, epoch, 0, 0))
}

fn check_data<S: Scalar>(spec: &NetworkSpec<S>, data: &Dataset<S>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("dataset is empty".into()));
    }
    if data.num_classes() > spec.output_dim() {
        return Err(Error::Dimension(format!(
            "{} classes but only {} readout neurons",
            data.num_classes(),
            spec.output_dim()
        )));
    }
    if let Some(t) = data.timesteps() {
        if t != spec.timesteps {
            return Err(Error::Dimension(format!(
                "temporal dataset has {t} frames, network unrolls {} steps",
                spec.timesteps
            )));
        }
    }
    Ok(())
}

/// One pass over `data`. Per minibatch: spiking forward, decode with the current factors,
/// per-timestep accuracy, factor update, loss on the decoded output, surrogate backward
/// with the readout gradient scaled by `f_t`, masking, then one optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<S: Scalar>(
    spec: &NetworkSpec<S>,
    params: &mut NetworkParams<S>,
    factors: &mut TemporalFactors,
    optimizer: &mut OptimizerState<S>,
    schedule: &Schedule,
    data: &Dataset<S>,
    cfg: &EpochConfig,
) -> Result<EpochMetrics> {
    check_data(spec, data)?;
    cfg.mask.validate()?;
    if factors.timesteps() != spec.timesteps {
        return Err(Error::Dimension(format!(
            "{} temporal factors for {} timesteps",
            factors.timesteps(),
            spec.timesteps
        )));
    }
    let t_steps = spec.timesteps;
    let shuffle = cfg
        .shuffle
        .then(|| shuffle_stream(cfg.master_seed, cfg.epoch));
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut step_correct = vec![0.0; t_steps];
    let mut lr_first = None;
    let mut lr_last = 0.0;
    let mut n_batches = 0;

    for (b, batch) in batches(data, cfg.batch_size, shuffle.as_ref())?.enumerate() {
        let batch = batch?;
        let n = batch.labels.len();
        let trace = forward(params, spec, &batch.input, Mode::Spiking)?;
        let y = decode(factors, &trace.output_currents)?;
        correct += correct_count(&y, &batch.labels)?;
        let acc = per_timestep_accuracy(&trace.output_currents, &batch.labels)?;
        for (s, a) in step_correct.iter_mut().zip(&acc) {
            *s += a * n as f64;
        }
        // Factors used for this batch's loss are the ones it was decoded with.
        let used: Vec<f64> = factors.factors().to_vec();
        if cfg.two_enabled {
            factors.update(&acc)?;
        }

        let (loss, grad_y) = softmax_cross_entropy(&y, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at epoch {} batch {b}",
                cfg.epoch
            )));
        }
        loss_sum += loss.as_f64() * n as f64;
        seen += n;

        let frame = grad_y.len();
        let mut grad_out = Vec::with_capacity(t_steps * frame);
        for &f in &used {
            let f = S::lit(f);
            grad_out.extend(grad_y.data().iter().map(|&g| f * g));
        }
        let grad_out = Tensor::new(trace.output_currents.shape().to_vec(), grad_out)?;
        let mut grads = backward(&trace, params, spec, &grad_out)?;
        mask_in_place(cfg.master_seed, &mut grads, &cfg.mask, cfg.epoch, b as u64)?;

        let lr = schedule.lr(optimizer.step)?;
        lr_first.get_or_insert(lr);
        lr_last = lr;
        optimizer.apply(params, &grads, lr)?;
        n_batches += 1;
    }

    Ok(EpochMetrics {
        epoch: cfg.epoch,
        lr_first: lr_first.unwrap_or(0.0),
        lr_last,
        train_loss: loss_sum / seen as f64,
        train_acc: correct as f64 / seen as f64,
        per_timestep_train_acc: step_correct.iter().map(|c| c / seen as f64).collect(),
        factors: factors.factors().to_vec(),
        batches: n_batches,
    })
}

/// Accuracy, per-timestep accuracy and firing rates with frozen factors. Nothing is mutated.
pub fn evaluate<S: Scalar>(
    spec: &NetworkSpec<S>,
    params: &NetworkParams<S>,
    factors: &TemporalFactors,
    data: &Dataset<S>,
    batch_size: usize,
) -> Result<EvalMetrics> {
    if !factors.is_frozen() {
        return Err(Error::State(
            "evaluation needs frozen temporal factors".into(),
        ));
    }
    check_data(spec, data)?;
    let mut correct = 0usize;
    let mut mean_correct = 0usize;
    let mut step_correct = vec![0.0; spec.timesteps];
    let mut rate_sum = vec![0.0; spec.num_layers() - 1];
    for batch in batches(data, batch_size, None)? {
        let batch = batch?;
        let n = batch.labels.len() as f64;
        let trace = forward(params, spec, &batch.input, Mode::Spiking)?;
        let y = decode(factors, &trace.output_currents)?;
        correct += correct_count(&y, &batch.labels)?;
        mean_correct += correct_count(&mean_decode(&trace.output_currents)?, &batch.labels)?;
        for (s, a) in step_correct.iter_mut().zip(per_timestep_accuracy(
            &trace.output_currents,
            &batch.labels,
        )?) {
            *s += a * n;
        }
        for (r, f) in rate_sum.iter_mut().zip(firing_rates(&trace)?) {
            *r += f * n;
        }
    }
    let total = data.len() as f64;
    Ok(EvalMetrics {
        accuracy: correct as f64 / total,
        mean_decode_accuracy: mean_correct as f64 / total,
        per_timestep_acc: step_correct.iter().map(|c| c / total).collect(),
        firing_rates: rate_sum.iter().map(|r| r / total).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SynthSpec};
    use crate::lif::LifParams;
    use crate::optim::OptimizerKind;
    use crate::surrogate::SurrogateSpec;

    fn setup(
        p: f64,
    ) -> (
        NetworkSpec<f64>,
        NetworkParams<f64>,
        Dataset<f64>,
        EpochConfig,
    ) {
        let synth = SynthSpec {
            train_per_class: 20,
            test_per_class: 10,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&synth, Split::Train).unwrap();
        let spec = NetworkSpec::new(
            vec![32, 16, 4],
            8,
            LifParams::default(),
            SurrogateSpec::arctan(2.0).unwrap(),
            true,
        )
        .unwrap();
        let params = NetworkParams::init(&spec, 11, 1.0).unwrap();
        let cfg = EpochConfig {
            epoch: 0,
            master_seed: 11,
            batch_size: 16,
            mask: MaskPlan::new(p, false).unwrap(),
            two_enabled: true,
            shuffle: true,
        };
        (spec, params, data, cfg)
    }

    fn sgd(params: &NetworkParams<f64>) -> OptimizerState<f64> {
        OptimizerState::new(OptimizerKind::SgdMomentum { momentum: 0.0 }, 0.0, params).unwrap()
    }

    #[test]
    fn full_mask_freezes_parameters() {
        let (spec, mut params, data, cfg) = setup(1.0);
        let before = params.clone();
        let mut f = TemporalFactors::uniform(8, 0.9).unwrap();
        let mut opt = sgd(&params);
        let sched = Schedule::cosine(0.5, 0.0, 10).unwrap();
        train_epoch(&spec, &mut params, &mut f, &mut opt, &sched, &data, &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn zero_lr_still_updates_factors() {
        let (spec, mut params, data, cfg) = setup(0.0);
        let before = params.clone();
        let mut f = TemporalFactors::uniform(8, 0.9).unwrap();
        let mut opt = sgd(&params);
        let sched = Schedule::cosine(0.0, 0.0, 10).unwrap();
        let m = train_epoch(&spec, &mut params, &mut f, &mut opt, &sched, &data, &cfg).unwrap();
        assert_eq!(params, before);
        assert_ne!(
            f.factors(),
            TemporalFactors::uniform(8, 0.9).unwrap().factors()
        );
        assert_eq!(m.batches, 5);
        assert!((f.factors().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let (spec, mut params, data, cfg) = setup(0.5);
            let mut f = TemporalFactors::uniform(8, 0.9).unwrap();
            let mut opt = OptimizerState::new(
                OptimizerKind::AdamW {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                1e-4,
                &params,
            )
            .unwrap();
            let sched = Schedule::cosine(1e-2, 0.0, 10).unwrap();
            let m = train_epoch(&spec, &mut params, &mut f, &mut opt, &sched, &data, &cfg).unwrap();
            (m, params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.train_loss.is_finite());
    }

    #[test]
    fn disabled_two_keeps_uniform_factors() {
        let (spec, mut params, data, mut cfg) = setup(0.0);
        cfg.two_enabled = false;
        let mut f = TemporalFactors::uniform(8, 0.9).unwrap();
        let mut opt = sgd(&params);
        let sched = Schedule::cosine(0.1, 0.0, 10).unwrap();
        train_epoch(&spec, &mut params, &mut f, &mut opt, &sched, &data, &cfg).unwrap();
        assert_eq!(f, TemporalFactors::uniform(8, 0.9).unwrap());
    }

    #[test]
    fn evaluate_requires_frozen_and_is_pure() {
        let (spec, params, data, _) = setup(0.0);
        let f = TemporalFactors::uniform(8, 0.9).unwrap();
        assert!(matches!(
            evaluate(&spec, &params, &f, &data, 32),
            Err(Error::State(_))
        ));
        let f = f.frozen();
        let a = evaluate(&spec, &params, &f, &data, 32).unwrap();
        let b = evaluate(&spec, &params, &f, &data, 7).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        // uniform factors give the plain-mean decoding accuracy
        let batch = data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap();
        let trace = forward(&params, &spec, &batch.input, Mode::Spiking).unwrap();
        let y = mean_decode(&trace.output_currents).unwrap();
        let expected = correct_count(&y, &batch.labels).unwrap() as f64 / data.len() as f64;
        assert_eq!(a.accuracy, expected);
        assert_eq!(a.mean_decode_accuracy, expected);
        assert!(a.firing_rates.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn untrained_net_is_near_chance() {
        // Inputs carry no label information, so any fixed net scores about 1/K.
        let n = 1000;
        let stream = RngStream::new(5, StreamKey::of(Purpose::Probe));
        let x = crate::rng::sample_gaussian(&stream, &[n, 32], 0.0, 1.0).unwrap();
        let data = Dataset::new(
            crate::data::Samples::Static(x),
            (0..n).map(|i| i % 4).collect(),
            4,
        )
        .unwrap();
        let (spec, _, _, _) = setup(0.0);
        for seed in 0..5 {
            let params = NetworkParams::init(&spec, 100 + seed, 1.0).unwrap();
            let f = TemporalFactors::uniform(8, 0.9).unwrap().frozen();
            let acc = evaluate(&spec, &params, &f, &data, 128).unwrap().accuracy;
            assert!((acc - 0.25).abs() <= 0.05, "seed {seed}: accuracy {acc}");
        }
    }

    #[test]
    fn mismatched_timesteps_rejected() {
        let (spec, mut params, data, cfg) = setup(0.0);
        let mut f = TemporalFactors::uniform(4, 0.9).unwrap();
        let mut opt = sgd(&params);
        let sched = Schedule::cosine(0.1, 0.0, 10).unwrap();
        assert!(train_epoch(&spec, &mut params, &mut f, &mut opt, &sched, &data, &cfg).is_err());
    }
}
