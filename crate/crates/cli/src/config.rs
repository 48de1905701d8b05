//! Run configuration: line-oriented `key = value` text with `#` comments.
//!
//! Every key has a default; unknown keys are rejected. [`RunConfig::to_text`] writes the
//! fully resolved configuration in a form [`RunConfig::parse`] reads back unchanged.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use spikegrad::{OptimizerTag, SurrogateFamily};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("expected f32 or f64, got `{other}`")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Idx,
    Synthetic,
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "idx" => Ok(DataSource::Idx),
            "synthetic" => Ok(DataSource::Synthetic),
            other => Err(format!("expected idx or synthetic, got `{other}`")),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Idx => "idx",
            DataSource::Synthetic => "synthetic",
        })
    }
}

/// Comma-separated list, echoed without spaces.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|v| {
                v.trim()
                    .parse::<T>()
                    .map_err(|e| format!("`{}`: {e}", v.trim()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,

    pub hidden: List<usize>,
    pub timesteps: usize,
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub reset_detach: bool,
    pub init_gain: f64,

    pub surrogate_family: SurrogateFamily,
    pub surrogate_alpha: f64,

    pub msg_p: f64,
    pub msg_inverted_scaling: bool,

    pub two_enabled: bool,
    pub two_beta: f64,

    pub optim_kind: OptimizerTag,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_min: f64,

    pub epochs: u64,
    pub batch_size: usize,
    pub shuffle: bool,
    pub eval_batch_size: usize,

    pub data_source: DataSource,
    pub data_dir: PathBuf,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub normalize: bool,
    pub standardize: bool,
    /// Keep only the first `n` samples (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,

    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_window_start: usize,
    pub synth_noise_sigma: f64,
    pub synth_pattern_scale: f64,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_seed: u64,

    pub gradcheck_layers: List<usize>,
    pub gradcheck_batch: usize,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
    pub gradcheck_init_gain: f64,
    pub gradcheck_families: List<SurrogateFamily>,

    pub sweep_p_list: List<f64>,

    pub gradstats_alphas: List<f64>,
    pub gradstats_families: List<SurrogateFamily>,
    pub gradstats_batch: usize,
    pub gradstats_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            precision: Precision::F32,
            hidden: List(vec![300]),
            timesteps: 4,
            tau: 2.0,
            v_th: 0.5,
            v_reset: 0.0,
            reset_detach: true,
            init_gain: 1.0,
            surrogate_family: SurrogateFamily::Arctan,
            surrogate_alpha: 2.0,
            msg_p: 0.0,
            msg_inverted_scaling: false,
            two_enabled: true,
            two_beta: 0.9,
            optim_kind: OptimizerTag::AdamW,
            lr: 0.05,
            weight_decay: 1e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_min: 0.0,
            epochs: 5,
            batch_size: 128,
            shuffle: true,
            eval_batch_size: 1000,
            data_source: DataSource::Idx,
            data_dir: PathBuf::from("data/mnist"),
            train_images: PathBuf::from("train-images-idx3-ubyte"),
            train_labels: PathBuf::from("train-labels-idx1-ubyte"),
            test_images: PathBuf::from("t10k-images-idx3-ubyte"),
            test_labels: PathBuf::from("t10k-labels-idx1-ubyte"),
            normalize: true,
            standardize: false,
            train_limit: 0,
            test_limit: 0,
            synth_classes: 4,
            synth_dim: 32,
            synth_window_start: 4,
            synth_noise_sigma: 0.2,
            synth_pattern_scale: 1.0,
            synth_train_per_class: 250,
            synth_test_per_class: 100,
            synth_seed: 7,
            gradcheck_layers: List(vec![16, 8, 4]),
            gradcheck_batch: 6,
            gradcheck_step: 1e-4,
            gradcheck_tolerance: 1e-5,
            gradcheck_init_gain: 2.0,
            gradcheck_families: List(vec![
                SurrogateFamily::Arctan,
                SurrogateFamily::PiecewiseLinear,
            ]),
            sweep_p_list: List(vec![0.0, 0.5, 0.9]),
            gradstats_alphas: List(vec![1.0, 2.0, 5.0, 10.0]),
            gradstats_families: List(vec![
                SurrogateFamily::PiecewiseLinear,
                SurrogateFamily::Arctan,
            ]),
            gradstats_batch: 16,
            gradstats_bins: 64,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    raw.parse::<T>()
        .map_err(|e| CliError::Config(format!("key `{key}`: cannot parse `{raw}`: {e}")))
}

fn path_text(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Declares every key once: parsing, echo order and defaults all come from this table.
macro_rules! config_keys {
    ($($key:literal => $field:ident,)*) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
                match key {
                    $($key => self.$field = parse_value($key, raw)?,)*
                    other => return Err(CliError::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in canonical order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$field.to_text())),*]
            }
        }
    };
}

trait ToText {
    fn to_text(&self) -> String;
}

macro_rules! display_text {
    ($($t:ty),*) => {$(
        impl ToText for $t {
            fn to_text(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_text!(
    u64,
    usize,
    f64,
    bool,
    Precision,
    DataSource,
    SurrogateFamily,
    OptimizerTag,
    List<usize>,
    List<f64>,
    List<SurrogateFamily>
);

impl ToText for PathBuf {
    fn to_text(&self) -> String {
        path_text(self)
    }
}

config_keys! {
    "seed" => seed,
    "out" => out,
    "precision" => precision,
    "network.hidden" => hidden,
    "network.timesteps" => timesteps,
    "network.tau" => tau,
    "network.v_th" => v_th,
    "network.v_reset" => v_reset,
    "network.reset_detach" => reset_detach,
    "network.init_gain" => init_gain,
    "surrogate.family" => surrogate_family,
    "surrogate.alpha" => surrogate_alpha,
    "msg.p" => msg_p,
    "msg.inverted_scaling" => msg_inverted_scaling,
    "two.enabled" => two_enabled,
    "two.beta" => two_beta,
    "optim.kind" => optim_kind,
    "optim.lr" => lr,
    "optim.weight_decay" => weight_decay,
    "optim.momentum" => momentum,
    "optim.beta1" => beta1,
    "optim.beta2" => beta2,
    "optim.eps" => eps,
    "schedule.lr_min" => lr_min,
    "train.epochs" => epochs,
    "train.batch_size" => batch_size,
    "train.shuffle" => shuffle,
    "eval.batch_size" => eval_batch_size,
    "data.source" => data_source,
    "data.dir" => data_dir,
    "data.train_images" => train_images,
    "data.train_labels" => train_labels,
    "data.test_images" => test_images,
    "data.test_labels" => test_labels,
    "data.normalize" => normalize,
    "data.standardize" => standardize,
    "data.train_limit" => train_limit,
    "data.test_limit" => test_limit,
    "synth.classes" => synth_classes,
    "synth.dim" => synth_dim,
    "synth.window_start" => synth_window_start,
    "synth.noise_sigma" => synth_noise_sigma,
    "synth.pattern_scale" => synth_pattern_scale,
    "synth.train_per_class" => synth_train_per_class,
    "synth.test_per_class" => synth_test_per_class,
    "synth.seed" => synth_seed,
    "gradcheck.layers" => gradcheck_layers,
    "gradcheck.batch" => gradcheck_batch,
    "gradcheck.step" => gradcheck_step,
    "gradcheck.tolerance" => gradcheck_tolerance,
    "gradcheck.init_gain" => gradcheck_init_gain,
    "gradcheck.families" => gradcheck_families,
    "sweep.p_list" => sweep_p_list,
    "gradstats.alphas" => gradstats_alphas,
    "gradstats.families" => gradstats_families,
    "gradstats.batch" => gradstats_batch,
    "gradstats.bins" => gradstats_bins,
}

impl RunConfig {
    /// Defaults overridden by `text`. Errors name the line and key.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    no + 1
                )));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!(
                    "line {}: key `{key}` given twice",
                    no + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {}", no + 1, e.message())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        if cfg.data_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.data_dir = std::path::absolute(base.join(&cfg.data_dir))
                .map_err(|e| CliError::Config(format!("key `data.dir`: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the resolved text, ignoring keys that do not affect the model.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k == "out"
                || k.starts_with("gradcheck.")
                || k.starts_with("gradstats.")
                || k.starts_with("sweep.")
            {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn resolve(&self, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.data_dir.join(file)
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: String| Err(CliError::Config(format!("key `{key}`: {why}")));
        if self.hidden.0.is_empty() || self.hidden.0.contains(&0) {
            return bad(
                "network.hidden",
                "need at least one hidden layer, all widths ≥ 1".into(),
            );
        }
        if self.timesteps == 0 {
            return bad("network.timesteps", "must be at least 1".into());
        }
        if !(self.tau > 1.0) {
            return bad("network.tau", format!("{} must exceed 1", self.tau));
        }
        if !(self.v_th > self.v_reset) {
            return bad(
                "network.v_th",
                "threshold must exceed the reset potential".into(),
            );
        }
        if !(self.surrogate_alpha > 0.0) {
            return bad("surrogate.alpha", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.msg_p) {
            return bad("msg.p", format!("{} outside [0, 1]", self.msg_p));
        }
        if self.msg_inverted_scaling && self.msg_p >= 1.0 {
            return bad("msg.inverted_scaling", "undefined for msg.p = 1".into());
        }
        if !(0.0..=1.0).contains(&self.two_beta) {
            return bad("two.beta", format!("{} outside [0, 1]", self.two_beta));
        }
        if !(self.lr >= 0.0) {
            return bad("optim.lr", "must be non-negative".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("schedule.lr_min", "must lie in [0, optim.lr]".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("optim.weight_decay", "must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("optim.momentum", "must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("optim.beta1", "must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("optim.beta2", "must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("optim.eps", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be at least 1".into());
        }
        if self.eval_batch_size == 0 {
            return bad("eval.batch_size", "must be at least 1".into());
        }
        if self.data_source == DataSource::Synthetic {
            if self.synth_classes < 2 {
                return bad("synth.classes", "need at least 2".into());
            }
            if self.synth_dim == 0 {
                return bad("synth.dim", "must be at least 1".into());
            }
            if self.synth_window_start >= self.timesteps {
                return bad(
                    "synth.window_start",
                    "must be below network.timesteps".into(),
                );
            }
            if !(self.synth_noise_sigma >= 0.0) {
                return bad("synth.noise_sigma", "must be non-negative".into());
            }
            if self.synth_train_per_class == 0 || self.synth_test_per_class == 0 {
                return bad(
                    "synth.train_per_class",
                    "splits need at least one sample per class".into(),
                );
            }
        }
        if self.gradcheck_layers.0.len() < 3 || self.gradcheck_layers.0.contains(&0) {
            return bad(
                "gradcheck.layers",
                "need input, ≥1 hidden and output widths, all ≥ 1".into(),
            );
        }
        if !(self.gradcheck_step > 0.0) {
            return bad("gradcheck.step", "must be positive".into());
        }
        if self.gradcheck_families.0.is_empty() {
            return bad("gradcheck.families", "need at least one family".into());
        }
        if let Some(p) = self
            .sweep_p_list
            .0
            .iter()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return bad("sweep.p_list", format!("{p} outside [0, 1]"));
        }
        if self.gradstats_alphas.0.is_empty() || self.gradstats_alphas.0.iter().any(|a| !(*a > 0.0))
        {
            return bad(
                "gradstats.alphas",
                "need at least one positive alpha".into(),
            );
        }
        if self.gradstats_bins == 0 || self.gradstats_batch == 0 {
            return bad("gradstats.bins", "bins and batch must be at least 1".into());
        }
        Ok(())
    }
}
