//! Experiment drivers behind the subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use spikegrad::data::{generate_synthetic, load_idx, num_batches};
use spikegrad::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use spikegrad::network::{backward, forward};
use spikegrad::optim::softmax_cross_entropy;
use spikegrad::two::decode;
use spikegrad::{
    evaluate, train_epoch, Dataset, EpochConfig, EvalMetrics, LifParams, MaskPlan, Mode,
    NetworkParams, NetworkSpec, OptimizerKind, OptimizerState, OptimizerTag, Scalar, Schedule,
    Split, SurrogateFamily, SurrogateSpec, SynthSpec, TemporalFactors, Tensor,
};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::error::CliError;

/// One line of `metrics.jsonl`. Wall-clock time lives in `timing.jsonl` so that metrics
/// files of identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_acc_mean_decode: f64,
    pub per_timestep_train_acc: Vec<f64>,
    pub per_timestep_test_acc: Vec<f64>,
    pub factors: Vec<f64>,
    pub firing_rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRecord {
    pub epoch: u64,
    pub epoch_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<TimingRecord>,
    pub factors: Vec<f64>,
    pub final_eval: Option<EvalMetrics>,
    pub out: PathBuf,
}

impl TrainSummary {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|e| e.accuracy)
    }

    pub fn mean_epoch_seconds(&self) -> Option<f64> {
        (!self.timings.is_empty()).then(|| {
            self.timings.iter().map(|t| t.epoch_seconds).sum::<f64>() / self.timings.len() as f64
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn json_line<T: Serialize>(w: &mut impl Write, value: &T) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(|e| CliError::Config(e.to_string()))?;
    writeln!(w, "{line}")?;
    w.flush()?;
    Ok(())
}

pub fn synth_spec(cfg: &RunConfig) -> SynthSpec {
    SynthSpec {
        classes: cfg.synth_classes,
        dim: cfg.synth_dim,
        timesteps: cfg.timesteps,
        window_start: cfg.synth_window_start,
        noise_sigma: cfg.synth_noise_sigma,
        pattern_scale: cfg.synth_pattern_scale,
        train_per_class: cfg.synth_train_per_class,
        test_per_class: cfg.synth_test_per_class,
        seed: cfg.synth_seed,
    }
}

/// [`synth_spec`] checked up front so errors point at config keys.
pub fn checked_synth_spec(cfg: &RunConfig) -> Result<SynthSpec, CliError> {
    let spec = synth_spec(cfg);
    spec.validate()
        .map_err(|e| CliError::Config(format!("keys `synth.*` / `network.timesteps`: {e}")))?;
    Ok(spec)
}

fn limit<S: Scalar>(data: Dataset<S>, n: usize) -> Result<Dataset<S>, CliError> {
    if n == 0 || n >= data.len() {
        return Ok(data);
    }
    Ok(data.subset(&(0..n).collect::<Vec<_>>())?)
}

/// Train and test splits as the config describes them.
pub fn load_data<S: Scalar>(cfg: &RunConfig) -> Result<(Dataset<S>, Dataset<S>), CliError> {
    let (train, test) = match cfg.data_source {
        DataSource::Idx => {
            let read = |img: &Path, lab: &Path| {
                load_idx::<S>(&cfg.resolve(img), &cfg.resolve(lab), cfg.normalize)
                    .map_err(|e| CliError::Config(format!("data: {e}")))
            };
            (
                read(&cfg.train_images, &cfg.train_labels)?,
                read(&cfg.test_images, &cfg.test_labels)?,
            )
        }
        DataSource::Synthetic => {
            let spec = checked_synth_spec(cfg)?;
            (
                generate_synthetic(&spec, Split::Train)?,
                generate_synthetic(&spec, Split::Test)?,
            )
        }
    };
    let mut train = limit(train, cfg.train_limit)?;
    let mut test = limit(test, cfg.test_limit)?;
    if cfg.standardize {
        let (mean, std) = train.value_stats();
        train.standardize(mean, std)?;
        test.standardize(mean, std)?;
    }
    Ok((train, test))
}

pub fn network_spec<S: Scalar>(
    cfg: &RunConfig,
    input_dim: usize,
    classes: usize,
    family: SurrogateFamily,
    alpha: f64,
) -> Result<NetworkSpec<S>, CliError> {
    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.hidden.0);
    sizes.push(classes);
    let lif = LifParams::new(S::lit(cfg.tau), S::lit(cfg.v_th), S::lit(cfg.v_reset))?;
    Ok(NetworkSpec::new(
        sizes,
        cfg.timesteps,
        lif,
        SurrogateSpec::new(family, S::lit(alpha))?,
        cfg.reset_detach,
    )?)
}

pub fn optimizer_kind(cfg: &RunConfig) -> OptimizerKind {
    match cfg.optim_kind {
        OptimizerTag::SgdMomentum => OptimizerKind::SgdMomentum {
            momentum: cfg.momentum,
        },
        OptimizerTag::AdamW => OptimizerKind::AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
    }
}

/// Full training run; writes `config.resolved`, `metrics.jsonl`, `timing.jsonl`,
/// `factors.json` and `checkpoint.bin` under `cfg.out`.
pub fn run_train<S: Scalar>(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let (train, test) = load_data::<S>(cfg)?;
    let spec = network_spec::<S>(
        cfg,
        train.dim(),
        train.num_classes(),
        cfg.surrogate_family,
        cfg.surrogate_alpha,
    )?;
    let mut params = NetworkParams::init(&spec, cfg.seed, cfg.init_gain)?;
    let mut factors = TemporalFactors::uniform(cfg.timesteps, cfg.two_beta)?;
    let mut optimizer = OptimizerState::new(optimizer_kind(cfg), cfg.weight_decay, &params)?;
    let per_epoch = num_batches(train.len(), cfg.batch_size) as u64;
    let schedule = Schedule::cosine(cfg.lr, cfg.lr_min, (cfg.epochs * per_epoch).max(1))?;
    let mask = MaskPlan::new(cfg.msg_p, cfg.msg_inverted_scaling)?;

    ensure_dir(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved"), cfg.to_text()).map_err(|e| io_err(&cfg.out, e))?;
    let mut metrics = create(&cfg.out.join("metrics.jsonl"))?;
    let mut timing = create(&cfg.out.join("timing.jsonl"))?;
    metrics.flush()?;
    timing.flush()?;

    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut final_eval = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let m = train_epoch(
            &spec,
            &mut params,
            &mut factors,
            &mut optimizer,
            &schedule,
            &train,
            &EpochConfig {
                epoch,
                master_seed: cfg.seed,
                batch_size: cfg.batch_size,
                mask,
                two_enabled: cfg.two_enabled,
                shuffle: cfg.shuffle,
            },
        )?;
        let epoch_seconds = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let ev = evaluate(
            &spec,
            &params,
            &factors.clone().frozen(),
            &test,
            cfg.eval_batch_size,
        )?;
        let eval_seconds = started.elapsed().as_secs_f64();
        let record = MetricsRecord {
            epoch,
            lr: m.lr_first,
            train_loss: m.train_loss,
            train_acc: m.train_acc,
            test_acc: ev.accuracy,
            test_acc_mean_decode: ev.mean_decode_accuracy,
            per_timestep_train_acc: m.per_timestep_train_acc,
            per_timestep_test_acc: ev.per_timestep_acc.clone(),
            factors: m.factors,
            firing_rates: ev.firing_rates.clone(),
        };
        let t = TimingRecord {
            epoch,
            epoch_seconds,
            eval_seconds,
        };
        json_line(&mut metrics, &record)?;
        json_line(&mut timing, &t)?;
        records.push(record);
        timings.push(t);
        final_eval = Some(ev);
    }

    factors.freeze();
    fs::write(
        cfg.out.join("factors.json"),
        serde_json::to_string(factors.factors()).map_err(|e| CliError::Config(e.to_string()))?
            + "\n",
    )
    .map_err(|e| io_err(&cfg.out, e))?;
    Checkpoint {
        digest: cfg.digest(),
        layer_sizes: spec.layer_sizes.clone(),
        params,
        factors: factors.clone(),
        optimizer: Some(optimizer),
    }
    .save(&cfg.out.join("checkpoint.bin"))?;

    Ok(TrainSummary {
        records,
        timings,
        factors: factors.factors().to_vec(),
        final_eval,
        out: cfg.out.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub test_acc: f64,
    pub test_acc_mean_decode: f64,
    pub per_timestep_test_acc: Vec<f64>,
    pub firing_rates: Vec<f64>,
    pub factors: Vec<f64>,
}

/// Evaluates a checkpoint on the configured test split; writes `eval.json`.
pub fn run_eval<S: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let (ckpt, warning) = Checkpoint::<S>::load(checkpoint, Some(&cfg.digest()))?;
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    let (_, test) = load_data::<S>(cfg)?;
    let spec = network_spec::<S>(
        cfg,
        test.dim(),
        test.num_classes(),
        cfg.surrogate_family,
        cfg.surrogate_alpha,
    )?;
    if ckpt.layer_sizes != spec.layer_sizes {
        return Err(CliError::Config(format!(
            "checkpoint layers {:?} do not match configured network {:?}",
            ckpt.layer_sizes, spec.layer_sizes
        )));
    }
    let factors = ckpt.factors.frozen();
    let ev = evaluate(&spec, &ckpt.params, &factors, &test, cfg.eval_batch_size)?;
    let report = EvalReport {
        test_acc: ev.accuracy,
        test_acc_mean_decode: ev.mean_decode_accuracy,
        per_timestep_test_acc: ev.per_timestep_acc,
        firing_rates: ev.firing_rates,
        factors: factors.factors().to_vec(),
    };
    ensure_dir(&cfg.out)?;
    let mut w = create(&cfg.out.join("eval.json"))?;
    json_line(&mut w, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub p: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub mean_epoch_seconds: f64,
}

/// One training run per mask probability, sharing the seed; writes `sweep.tsv`.
pub fn run_mask_sweep<S: Scalar>(
    cfg: &RunConfig,
    p_list: &[f64],
) -> Result<Vec<SweepRow>, CliError> {
    if p_list.is_empty() {
        return Err(CliError::Config("key `sweep.p_list`: empty".into()));
    }
    if let Some(p) = p_list.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CliError::Config(format!(
            "key `sweep.p_list`: {p} outside [0, 1]"
        )));
    }
    ensure_dir(&cfg.out)?;
    let mut rows = Vec::new();
    for &p in p_list {
        let mut run = cfg.clone();
        run.msg_p = p;
        run.out = cfg.out.join(format!("p_{p}"));
        let s = run_train::<S>(&run)?;
        rows.push(SweepRow {
            p,
            test_acc: s.final_test_acc().unwrap_or(f64::NAN),
            train_loss: s.records.last().map_or(f64::NAN, |r| r.train_loss),
            mean_epoch_seconds: s.mean_epoch_seconds().unwrap_or(f64::NAN),
        });
    }
    let mut w = create(&cfg.out.join("sweep.tsv"))?;
    writeln!(w, "p\ttest_acc\ttrain_loss\tmean_epoch_seconds")?;
    for r in &rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.p, r.test_acc, r.train_loss, r.mean_epoch_seconds
        )?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradStats {
    pub family: String,
    pub alpha: f64,
    pub parameters: usize,
    pub zero_gradients: usize,
    pub zero_fraction: f64,
    /// Zero fraction over the weight matrices below the readout, the only ones whose
    /// gradient passes through a surrogate derivative. Readout gradients are `Σ δ·sᵀ` and
    /// vanish for hidden units that stay silent on the batch, whatever the surrogate.
    pub surrogate_path_zero_fraction: f64,
    /// Fraction of hidden pre-spike potentials whose surrogate derivative is exactly 0.
    pub surrogate_zero_fraction: f64,
    /// `(lower edge, upper edge, count)` per bin.
    pub histogram: Vec<(f64, f64, usize)>,
}

/// Equal-width histogram over `[min, max]`; every value lands in exactly one bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// Weight-gradient statistics on one fixed batch with fixed weights, per surrogate
/// family and width. Writes one histogram file per setting plus `summary.tsv` under
/// `<out>/gradstats`.
pub fn run_gradstats<S: Scalar>(
    cfg: &RunConfig,
    families: &[SurrogateFamily],
    alphas: &[f64],
) -> Result<Vec<GradStats>, CliError> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(CliError::Config(
            "key `gradstats.alphas`: need at least one positive alpha".into(),
        ));
    }
    let (train, _) = load_data::<S>(cfg)?;
    let n = cfg.gradstats_batch.min(train.len());
    let batch = train.batch(&(0..n).collect::<Vec<_>>())?;
    let dir = cfg.out.join("gradstats");
    ensure_dir(&dir)?;
    let mut all = Vec::new();
    for &family in families {
        for &alpha in alphas {
            let spec = network_spec::<S>(cfg, train.dim(), train.num_classes(), family, alpha)?;
            let params = NetworkParams::init(&spec, cfg.seed, cfg.init_gain)?;
            let trace = forward(&params, &spec, &batch.input, Mode::Spiking)?;
            let factors = TemporalFactors::uniform(cfg.timesteps, cfg.two_beta)?;
            let y = decode(&factors, &trace.output_currents)?;
            let (_, gy) = softmax_cross_entropy(&y, &batch.labels)?;
            let mut g = Vec::with_capacity(trace.output_currents.len());
            for &f in factors.factors() {
                g.extend(gy.data().iter().map(|&v| S::lit(f) * v));
            }
            let g = Tensor::new(trace.output_currents.shape().to_vec(), g)?;
            let grads = backward(&trace, &params, &spec, &g)?;
            let values: Vec<f64> = grads
                .grads
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.as_f64()))
                .collect();
            let zeros = values.iter().filter(|&&v| v == 0.0).count();
            let below_readout = &grads.grads[..grads.grads.len() - 1];
            let path_total: usize = below_readout.iter().map(|t| t.len()).sum();
            let path_zeros: usize = below_readout
                .iter()
                .map(|t| t.data().iter().filter(|&&v| v == S::zero()).count())
                .sum();
            let (mut sg_zero, mut sg_total) = (0usize, 0usize);
            for h in &trace.hidden {
                for &v in h.v_pre.data() {
                    sg_total += 1;
                    if spec.surrogate.derivative(v - spec.lif.v_th) == S::zero() {
                        sg_zero += 1;
                    }
                }
            }
            let stats = GradStats {
                family: family.to_string(),
                alpha,
                parameters: values.len(),
                zero_gradients: zeros,
                zero_fraction: zeros as f64 / values.len() as f64,
                surrogate_path_zero_fraction: path_zeros as f64 / path_total as f64,
                surrogate_zero_fraction: sg_zero as f64 / sg_total as f64,
                histogram: histogram(&values, cfg.gradstats_bins),
            };
            let mut w = create(&dir.join(format!("{family}_alpha{alpha}.tsv")))?;
            writeln!(w, "lower\tupper\tcount")?;
            for (lo, hi, c) in &stats.histogram {
                writeln!(w, "{lo}\t{hi}\t{c}")?;
            }
            w.flush()?;
            all.push(stats);
        }
    }
    let mut w = create(&dir.join("summary.tsv"))?;
    writeln!(w, "family\talpha\tparameters\tzero_gradients\tzero_fraction\tsurrogate_path_zero_fraction\tsurrogate_zero_fraction")?;
    for s in &all {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.family,
            s.alpha,
            s.parameters,
            s.zero_gradients,
            s.zero_fraction,
            s.surrogate_path_zero_fraction,
            s.surrogate_zero_fraction
        )?;
    }
    w.flush()?;
    Ok(all)
}

pub fn gradcheck_config(
    cfg: &RunConfig,
    family: SurrogateFamily,
) -> Result<GradcheckConfig, CliError> {
    Ok(GradcheckConfig {
        layer_sizes: cfg.gradcheck_layers.0.clone(),
        timesteps: cfg.timesteps,
        batch: cfg.gradcheck_batch,
        family,
        alpha: cfg.surrogate_alpha,
        lif: LifParams::new(cfg.tau, cfg.v_th, cfg.v_reset)?,
        step: cfg.gradcheck_step,
        tolerance: cfg.gradcheck_tolerance,
        init_gain: cfg.gradcheck_init_gain,
        seed: cfg.seed,
    })
}

/// Finite-difference check for every configured family, always at 64-bit. Writes
/// `gradcheck.tsv`; fails with [`CliError::Check`] when any family exceeds tolerance.
pub fn run_gradcheck(cfg: &RunConfig, sabotage: bool) -> Result<Vec<GradcheckReport>, CliError> {
    cfg.validate()?;
    let mut reports = Vec::new();
    for &family in &cfg.gradcheck_families.0 {
        reports.push(gradcheck(&gradcheck_config(cfg, family)?, sabotage)?);
    }
    ensure_dir(&cfg.out)?;
    let mut w = create(&cfg.out.join("gradcheck.tsv"))?;
    writeln!(w, "family\talpha\tlayer\tmax_rel_err\tmax_abs_err")?;
    for r in &reports {
        for l in &r.layers {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                r.family, r.alpha, l.layer, l.max_rel_err, l.max_abs_err
            )?;
        }
    }
    w.flush()?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            format!(
                "{} max relative error {:.3e} > {:.0e}",
                r.family, r.max_rel_err, r.tolerance
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Check(failed.join("; ")))
    }
}

const IDX_F64: u8 = 0x0E;
const IDX_U8: u8 = 0x08;

fn idx_header(out: &mut Vec<u8>, type_code: u8, dims: &[usize]) {
    out.extend_from_slice(&[0, 0, type_code, dims.len() as u8]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
}

/// Writes the synthetic splits as IDX files (`f64` rank-3 `[T × n × d]` inputs, `u8`
/// labels) plus the generating spec.
pub fn run_synth_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = checked_synth_spec(cfg)?;
    if spec.classes > 256 {
        return Err(CliError::Config(
            "key `synth.classes`: IDX labels hold at most 256 classes".into(),
        ));
    }
    ensure_dir(&cfg.out)?;
    let mut written = Vec::new();
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let data: Dataset<f64> = generate_synthetic(&spec, split)?;
        let spikegrad::Samples::Temporal(x) = data.samples() else {
            unreachable!("synthetic data is temporal")
        };
        let mut bytes = Vec::with_capacity(16 + x.len() * 8);
        idx_header(&mut bytes, IDX_F64, x.shape());
        for v in x.data() {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let path = cfg.out.join(format!("synth-{name}-inputs-idx3-f64"));
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        written.push(path);
        let mut bytes = Vec::with_capacity(8 + data.len());
        idx_header(&mut bytes, IDX_U8, &[data.len()]);
        bytes.extend(data.labels().iter().map(|&l| l as u8));
        let path = cfg.out.join(format!("synth-{name}-labels-idx1-ubyte"));
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    let path = cfg.out.join("config.resolved");
    fs::write(&path, cfg.to_text()).map_err(|e| io_err(&path, e))?;
    written.push(path);
    Ok(written)
}
