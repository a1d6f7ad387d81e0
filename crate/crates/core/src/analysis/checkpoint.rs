//! Checkpoint files.
//!
//! Layout (all header lines are UTF-8 text terminated by `\n`):
//!
//! ```text
//! stnet-checkpoint <version>
//! epoch <n>
//! adam <lr> <beta1> <beta2> <eps> <step>      (or `adam none`)
//! config <line count>
//! <config lines, key = value>
//! log <line count>
//! <epoch> <L_d> <L_c> <L_b> <L> <val mae> <val mse>
//! entries <count>
//! entry <kind> <name> <N> <C> <H> <W>
//! <N*C*H*W little-endian f64 values>
//! ...
//! end
//! ```
//!
//! `kind` is `param`, `adam_m` or `adam_v`. Floats in header lines use the
//! shortest representation that parses back to the same bits, so a
//! save → load → save cycle is byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::tensor::{Adam, AdamConfig, ParamStore, Shape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "stnet-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint: expected header '{MAGIC} <version>'")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("checkpoint truncated at byte offset {offset}: {what}")]
    Truncated { offset: usize, what: String },
    #[error("malformed checkpoint at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("parameter {name}: checkpoint shape {found} disagrees with model shape {expected}")]
    ShapeMismatch {
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error("checkpoint lists parameter {found:?} where the model expects {expected:?}")]
    NameMismatch { expected: String, found: String },
    #[error("checkpoint holds {found} parameters, model has {expected}")]
    CountMismatch { expected: usize, found: usize },
}

/// One logged epoch as stored in a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub density: f64,
    pub confidence: f64,
    pub background: f64,
    pub total: f64,
    pub val_mae: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    /// Canonical `key = value` text of the training configuration.
    pub config: String,
    pub log: Vec<LogRecord>,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(
        epoch: usize,
        config: String,
        log: Vec<LogRecord>,
        params: &ParamStore,
        optimizer: Option<&Adam>,
    ) -> Self {
        Self {
            epoch,
            config,
            log,
            params: params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Copy parameter values into `store`, checking names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.params.len() != store.len() {
            return Err(CheckpointError::CountMismatch {
                expected: store.len(),
                found: self.params.len(),
            });
        }
        for ((name, value), p) in self.params.iter().zip(store.iter_mut()) {
            if *name != p.name {
                return Err(CheckpointError::NameMismatch {
                    expected: p.name.clone(),
                    found: name.clone(),
                });
            }
            if value.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.value.shape(),
                    found: value.shape(),
                });
            }
        }
        for ((_, value), p) in self.params.iter().zip(store.iter_mut()) {
            p.value = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        writeln!(head, "{MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(head, "epoch {}", self.epoch).unwrap();
        match &self.optimizer {
            Some(a) => {
                let c = a.config;
                writeln!(head, "adam {:?} {:?} {:?} {:?} {}", c.lr, c.beta1, c.beta2, c.eps, a.step_count()).unwrap()
            }
            None => writeln!(head, "adam none").unwrap(),
        }
        let config_lines: Vec<&str> = self.config.lines().collect();
        writeln!(head, "config {}", config_lines.len()).unwrap();
        for l in &config_lines {
            writeln!(head, "{l}").unwrap();
        }
        writeln!(head, "log {}", self.log.len()).unwrap();
        for r in &self.log {
            writeln!(
                head,
                "{} {:?} {:?} {:?} {:?} {:?} {:?}",
                r.epoch, r.density, r.confidence, r.background, r.total, r.val_mae, r.val_mse
            )
            .unwrap();
        }
        let moments = self.optimizer.as_ref().map_or(0, |a| a.first_moments().len());
        writeln!(head, "entries {}", self.params.len() + 2 * moments).unwrap();

        let mut out = head.into_bytes();
        let mut entry = |kind: &str, name: &str, shape: Shape, data: &[f64]| {
            out.extend_from_slice(
                format!("entry {kind} {name} {} {} {} {}\n", shape.n, shape.c, shape.h, shape.w).as_bytes(),
            );
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, value) in &self.params {
            entry("param", name, value.shape(), value.data());
        }
        if let Some(a) = &self.optimizer {
            for (kind, moments) in [("adam_m", a.first_moments()), ("adam_v", a.second_moments())] {
                for (i, m) in moments.iter().enumerate() {
                    let name = self.params.get(i).map_or("?", |(n, _)| n.as_str());
                    let shape = self.params.get(i).map_or(Shape::new(1, 1, 1, m.len()), |(_, v)| v.shape());
                    entry(kind, name, shape, m);
                }
            }
        }
        out.extend_from_slice(b"end\n");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.line("header")?;
        let (m, version) = magic.split_once(' ').ok_or(CheckpointError::BadMagic)?;
        if m != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(CheckpointError::Version {
                found: version.into(),
                expected: CHECKPOINT_VERSION,
            });
        }
        let epoch = r.keyed("epoch")?;
        let adam_line = r.line("optimizer header")?;
        let adam_cfg = match adam_line.split_whitespace().collect::<Vec<_>>()[..] {
            ["adam", "none"] => None,
            ["adam", lr, b1, b2, eps, step] => {
                let f = |s: &str| r.parse::<f64>(s, "adam hyperparameter");
                let cfg = AdamConfig {
                    lr: f(lr)?,
                    beta1: f(b1)?,
                    beta2: f(b2)?,
                    eps: f(eps)?,
                };
                Some((cfg, r.parse::<u64>(step, "adam step")?))
            }
            _ => return Err(r.malformed(format!("bad optimizer line {adam_line:?}"))),
        };
        let n_config: usize = r.keyed("config")?;
        let mut config = String::new();
        for _ in 0..n_config {
            config.push_str(&r.line("config line")?);
            config.push('\n');
        }
        let n_log: usize = r.keyed("log")?;
        let mut log = Vec::with_capacity(n_log);
        for _ in 0..n_log {
            let line = r.line("log line")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(r.malformed(format!("log line {line:?} needs 7 fields")));
            }
            let v = |i: usize| r.parse::<f64>(f[i], "log value");
            log.push(LogRecord {
                epoch: r.parse(f[0], "log epoch")?,
                density: v(1)?,
                confidence: v(2)?,
                background: v(3)?,
                total: v(4)?,
                val_mae: v(5)?,
                val_mse: v(6)?,
            });
        }
        let n_entries: usize = r.keyed("entries")?;
        let mut params = Vec::new();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for _ in 0..n_entries {
            let line = r.line("entry header")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 || f[0] != "entry" {
                return Err(r.malformed(format!("bad entry header {line:?}")));
            }
            let dims: Vec<usize> = f[3..]
                .iter()
                .map(|s| r.parse::<usize>(s, "entry dimension"))
                .collect::<Result<_, _>>()?;
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let data = r.payload(shape.numel(), f[2])?;
            match f[1] {
                "param" => params.push((f[2].to_string(), Tensor::from_vec(shape, data).expect("sized"))),
                "adam_m" => first.push(data),
                "adam_v" => second.push(data),
                other => return Err(r.malformed(format!("unknown entry kind {other:?}"))),
            }
        }
        let end = r.line("end marker")?;
        if end != "end" {
            return Err(r.malformed(format!("expected end marker, found {end:?}")));
        }
        if r.pos != bytes.len() {
            return Err(r.malformed("trailing bytes after end marker".into()));
        }
        let optimizer = match adam_cfg {
            Some((cfg, step)) => {
                if first.len() != params.len() || second.len() != params.len() {
                    return Err(r.malformed(format!(
                        "optimizer moments for {}/{} of {} parameters",
                        first.len(),
                        second.len(),
                        params.len()
                    )));
                }
                Some(Adam::from_parts(cfg, step, first, second))
            }
            None => None,
        };
        Ok(Self {
            epoch,
            config,
            log,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.into(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn malformed(&self, reason: String) -> CheckpointError {
        CheckpointError::Malformed {
            offset: self.pos,
            reason,
        }
    }

    fn line(&mut self, what: &str) -> Result<String, CheckpointError> {
        let rest = &self.bytes[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                what: format!("{what} missing"),
            });
        };
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| self.malformed(format!("{what} is not UTF-8")))?;
        self.pos += end + 1;
        Ok(text.to_string())
    }

    fn parse<T: std::str::FromStr>(&self, s: &str, what: &str) -> Result<T, CheckpointError> {
        s.parse().map_err(|_| self.malformed(format!("invalid {what} {s:?}")))
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CheckpointError> {
        let line = self.line(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => self.parse(v, key),
            _ => Err(self.malformed(format!("expected '{key} <value>', found {line:?}"))),
        }
    }

    fn payload(&mut self, count: usize, name: &str) -> Result<Vec<f64>, CheckpointError> {
        let need = count * 8;
        let available = self.bytes.len() - self.pos;
        if available < need {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                what: format!("payload of {name} needs {need} bytes from offset {}, {available} remain", self.pos),
            });
        }
        let data = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.pos += need;
        Ok(data)
    }
}
