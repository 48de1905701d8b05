//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SPKGRAD\0" | version u32 | scalar bytes u8 | config digest [u8; 32]
//! layer count u32 | layer sizes u32 × count
//! weights: every matrix in order, raw scalars
//! T u32 | factors f64 × T | beta f64 | frozen u8
//! optimizer flag u8, then if 1:
//!   kind u8 (0 sgd_momentum, 1 adamw) | hyper f64 × 3 | weight decay f64 | step u64
//!   first-moment buffers | second-moment buffers (adamw only)
//! ```

use std::path::Path;

use spikegrad::{NetworkParams, OptimizerKind, OptimizerState, Scalar, TemporalFactors, Tensor};

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"SPKGRAD\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub digest: [u8; 32],
    pub layer_sizes: Vec<usize>,
    pub params: NetworkParams<S>,
    pub factors: TemporalFactors,
    pub optimizer: Option<OptimizerState<S>>,
}

fn format_err(msg: impl Into<String>) -> CliError {
    CliError::Config(format!("checkpoint: {}", msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, CliError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CliError> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn tensor<S: Scalar>(&mut self, shape: &[usize], what: &str) -> Result<Tensor<S>, CliError> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * S::BYTES, what)?;
        let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| format_err(e.to_string()))
    }
}

fn weight_shapes(sizes: &[usize]) -> Vec<[usize; 2]> {
    sizes.windows(2).map(|w| [w[1], w[0]]).collect()
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(S::BYTES as u8);
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        let put = |out: &mut Vec<u8>, t: &Tensor<S>| {
            for &v in t.data() {
                v.write_le(out);
            }
        };
        for w in &self.params.weights {
            put(&mut out, w);
        }
        let f = self.factors.factors();
        out.extend_from_slice(&(f.len() as u32).to_le_bytes());
        for &v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.factors.beta().to_le_bytes());
        out.push(self.factors.is_frozen() as u8);
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let (kind, hyper) = match opt.kind {
                    OptimizerKind::SgdMomentum { momentum } => (0u8, [momentum, 0.0, 0.0]),
                    OptimizerKind::AdamW { beta1, beta2, eps } => (1u8, [beta1, beta2, eps]),
                };
                out.push(kind);
                for h in hyper {
                    out.extend_from_slice(&h.to_le_bytes());
                }
                out.extend_from_slice(&opt.weight_decay.to_le_bytes());
                out.extend_from_slice(&opt.step.to_le_bytes());
                for b in opt.first.iter().chain(&opt.second) {
                    put(&mut out, b);
                }
            }
        }
        out
    }

    /// Parses a checkpoint. A digest differing from `expected` only produces a warning,
    /// returned alongside the checkpoint.
    pub fn from_bytes(
        bytes: &[u8],
        expected: Option<&[u8; 32]>,
    ) -> Result<(Self, Option<String>), CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(format_err("wrong magic, not a spikegrad checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_err(format!(
                "version {version} is not supported (expected {VERSION})"
            )));
        }
        let width = r.u8("scalar width")? as usize;
        if width != S::BYTES {
            return Err(format_err(format!(
                "stored with {}-byte scalars but {} was requested",
                width,
                S::NAME
            )));
        }
        let digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let warning = expected
            .filter(|e| **e != digest)
            .map(|_| "checkpoint was written under a different configuration".to_string());
        let count = r.u32("layer count")? as usize;
        if !(3..=1024).contains(&count) {
            return Err(format_err(format!("implausible layer count {count}")));
        }
        let layer_sizes = (0..count)
            .map(|_| r.u32("layer size").map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let shapes = weight_shapes(&layer_sizes);
        let weights = shapes
            .iter()
            .map(|s| r.tensor::<S>(s, "weights"))
            .collect::<Result<Vec<_>, _>>()?;
        let t = r.u32("timesteps")? as usize;
        let f = (0..t)
            .map(|_| r.f64("factors"))
            .collect::<Result<Vec<_>, _>>()?;
        let beta = r.f64("beta")?;
        let frozen = r.u8("frozen flag")? != 0;
        let factors =
            TemporalFactors::from_parts(f, beta, frozen).map_err(|e| format_err(e.to_string()))?;
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let kind_tag = r.u8("optimizer kind")?;
                let h = [r.f64("hyper")?, r.f64("hyper")?, r.f64("hyper")?];
                let weight_decay = r.f64("weight decay")?;
                let step = r.u64("step")?;
                let kind = match kind_tag {
                    0 => OptimizerKind::SgdMomentum { momentum: h[0] },
                    1 => OptimizerKind::AdamW {
                        beta1: h[0],
                        beta2: h[1],
                        eps: h[2],
                    },
                    other => return Err(format_err(format!("unknown optimizer kind {other}"))),
                };
                let first = shapes
                    .iter()
                    .map(|s| r.tensor::<S>(s, "optimizer buffers"))
                    .collect::<Result<Vec<_>, _>>()?;
                let second = if kind_tag == 1 {
                    shapes
                        .iter()
                        .map(|s| r.tensor::<S>(s, "optimizer buffers"))
                        .collect::<Result<Vec<_>, _>>()?
                } else {
                    Vec::new()
                };
                Some(OptimizerState {
                    kind,
                    weight_decay,
                    step,
                    first,
                    second,
                })
            }
            other => return Err(format_err(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(format_err(format!(
                "{} trailing bytes after the optimizer section",
                bytes.len() - r.pos
            )));
        }
        Ok((
            Checkpoint {
                digest,
                layer_sizes,
                params: NetworkParams { weights },
                factors,
                optimizer,
            },
            warning,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(
        path: &Path,
        expected: Option<&[u8; 32]>,
    ) -> Result<(Self, Option<String>), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, expected)
    }
}

/// Scalar width stored in a checkpoint, without parsing the rest.
pub fn stored_width(bytes: &[u8]) -> Option<usize> {
    (bytes.len() > 12 && &bytes[..8] == MAGIC).then(|| bytes[12] as usize)
}
