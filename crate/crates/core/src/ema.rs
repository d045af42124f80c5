//! Exponential moving averages of checkpoint tensors at multiple decay
//! rates, with best-snapshot selection at the lowest validation loss.
//!
//! Update convention: the decay rate `a` is the new-sample fraction,
//!
//! ```text
//! state <- (1 - a) * state + a * theta
//! ```
//!
//! so the configured 1e-3-scale rates blend a small slice of each new
//! checkpoint into a long memory. The first update initializes the state to
//! the observed checkpoint (no zero bias, no bias correction). Averages are
//! accumulated in f64 and cut to f32 at the export/file boundary.
//!
//! # Checkpoint container format
//!
//! A checkpoint file is a small self-describing binary container:
//!
//! ```text
//! bytes 0..8    magic "MKCKPT01"
//! bytes 8..12   u32 little-endian: header length H
//! bytes 12..12+H  UTF-8 JSON header:
//!               {"step": u64, "validation_loss": f64|null,
//!                "tensors": [{"name": str, "shape": [u64...]}, ...]}
//! then          payload: for each tensor in header order, shape-product
//!               f32 values, little-endian, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MKCKPT01";

/// Default decay-rate triple: 1e-3, 5e-4 and 2.5e-4.
pub const DEFAULT_DECAY_RATES: [f64; 3] = [1e-3, 5e-4, 2.5e-4];

/// Named flat f32 tensor with shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: self.shape.clone(),
                got: vec![self.data.len()],
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: name.to_string(),
            });
        }
        Ok(())
    }
}

/// Model weights at one training step, optionally tagged with a validation
/// loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSnapshot {
    pub step: u64,
    pub tensors: BTreeMap<String, TensorData>,
    pub validation_loss: Option<f64>,
}

impl CheckpointSnapshot {
    pub fn validate(&self) -> Result<()> {
        for (name, tensor) in &self.tensors {
            tensor.validate(name)?;
        }
        if let Some(loss) = self.validation_loss {
            if !loss.is_finite() {
                return Err(Error::MissingLoss { step: self.step });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct RateState {
    rate: f64,
    tensors: BTreeMap<String, Vec<f64>>,
    best: Option<BestSnapshot>,
}

#[derive(Debug, Clone)]
struct BestSnapshot {
    loss: f64,
    snapshot: CheckpointSnapshot,
}

/// Parallel EMA tracker: one shadow copy of the weights per decay rate, plus
/// the raw (non-averaged) weights, each with its own lowest-loss snapshot.
#[derive(Debug, Clone)]
pub struct EmaTracker {
    shapes: BTreeMap<String, Vec<usize>>,
    states: Vec<RateState>,
    best_raw: Option<BestSnapshot>,
    updates: u64,
}

impl EmaTracker {
    pub fn new(decay_rates: &[f64]) -> Result<Self> {
        if decay_rates.is_empty() {
            return Err(Error::InvalidParam {
                name: "decay_rates",
                msg: "at least one decay rate is required".into(),
            });
        }
        for &rate in decay_rates {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::InvalidParam {
                    name: "decay_rates",
                    msg: format!("decay rate {rate} outside (0, 1]"),
                });
            }
        }
        Ok(Self {
            shapes: BTreeMap::new(),
            states: decay_rates
                .iter()
                .map(|&rate| RateState {
                    rate,
                    tensors: BTreeMap::new(),
                    best: None,
                })
                .collect(),
            best_raw: None,
            updates: 0,
        })
    }

    /// Tracker with the default three decay rates.
    pub fn with_default_rates() -> Self {
        Self::new(&DEFAULT_DECAY_RATES).expect("default rates are valid")
    }

    pub fn decay_rates(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.rate).collect()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn check_shapes(&self, snapshot: &CheckpointSnapshot) -> Result<()> {
        if self.updates == 0 {
            return Ok(());
        }
        for (name, expected) in &self.shapes {
            match snapshot.tensors.get(name) {
                Some(t) if &t.shape == expected => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: expected.clone(),
                        got: t.shape.clone(),
                    })
                }
                None => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: expected.clone(),
                        got: vec![],
                    })
                }
            }
        }
        for name in snapshot.tensors.keys() {
            if !self.shapes.contains_key(name) {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: vec![],
                    got: snapshot.tensors[name].shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Blend one checkpoint into every per-rate average. The first call
    /// initializes each average to the checkpoint itself.
    pub fn update(&mut self, snapshot: &CheckpointSnapshot) -> Result<()> {
        snapshot.validate()?;
        self.check_shapes(snapshot)?;
        if self.updates == 0 {
            self.shapes = snapshot
                .tensors
                .iter()
                .map(|(name, t)| (name.clone(), t.shape.clone()))
                .collect();
            for state in &mut self.states {
                state.tensors = snapshot
                    .tensors
                    .iter()
                    .map(|(name, t)| {
                        (name.clone(), t.data.iter().map(|&v| f64::from(v)).collect())
                    })
                    .collect();
            }
        } else {
            for state in &mut self.states {
                let a = state.rate;
                for (name, tensor) in &snapshot.tensors {
                    let shadow = state.tensors.get_mut(name).expect("shapes checked");
                    for (s, &v) in shadow.iter_mut().zip(&tensor.data) {
                        *s = (1.0 - a) * *s + a * f64::from(v);
                    }
                }
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Current average for one decay rate, cut to f32.
    pub fn state(&self, rate_index: usize) -> Result<CheckpointSnapshot> {
        if self.updates == 0 {
            return Err(Error::EmptyTracker);
        }
        let state = self.states.get(rate_index).ok_or(Error::InvalidParam {
            name: "rate_index",
            msg: format!("no decay rate at index {rate_index}"),
        })?;
        Ok(CheckpointSnapshot {
            step: 0,
            tensors: state
                .tensors
                .iter()
                .map(|(name, data)| {
                    (
                        name.clone(),
                        TensorData::new(
                            self.shapes[name].clone(),
                            data.iter().map(|&v| v as f32).collect(),
                        ),
                    )
                })
                .collect(),
            validation_loss: None,
        })
    }

    /// Consider the snapshot's validation loss: each per-rate average and the
    /// raw weights replace their stored best iff the loss strictly improves
    /// (ties keep the earlier snapshot).
    pub fn record_validation(&mut self, snapshot: &CheckpointSnapshot) -> Result<()> {
        let Some(loss) = snapshot.validation_loss else {
            return Err(Error::MissingLoss {
                step: snapshot.step,
            });
        };
        if !loss.is_finite() {
            return Err(Error::MissingLoss {
                step: snapshot.step,
            });
        }
        if self.updates == 0 {
            return Err(Error::EmptyTracker);
        }
        snapshot.validate()?;
        self.check_shapes(snapshot)?;

        let improves = |best: &Option<BestSnapshot>| best.as_ref().map_or(true, |b| loss < b.loss);
        if improves(&self.best_raw) {
            self.best_raw = Some(BestSnapshot {
                loss,
                snapshot: snapshot.clone(),
            });
        }
        for i in 0..self.states.len() {
            if improves(&self.states[i].best) {
                let mut ema = self.state(i)?;
                ema.step = snapshot.step;
                ema.validation_loss = Some(loss);
                self.states[i].best = Some(BestSnapshot {
                    loss,
                    snapshot: ema,
                });
            }
        }
        Ok(())
    }

    /// Export the inference ensemble: the raw best plus one best per decay
    /// rate, each tagged with a model id (`raw`, `ema-<rate>`). With the
    /// default three rates this yields the four-model ensemble.
    pub fn export_ensemble(&self) -> Result<Vec<(String, CheckpointSnapshot)>> {
        let raw = self.best_raw.as_ref().ok_or(Error::NothingRecorded)?;
        let mut out = vec![("raw".to_string(), raw.snapshot.clone())];
        for state in &self.states {
            let best = state.best.as_ref().ok_or(Error::NothingRecorded)?;
            out.push((format!("ema-{}", state.rate), best.snapshot.clone()));
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: u64,
    validation_loss: Option<f64>,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

/// Write a snapshot in the documented container format.
pub fn write_checkpoint(path: &Path, snapshot: &CheckpointSnapshot) -> Result<()> {
    snapshot.validate()?;
    let header = CheckpointHeader {
        step: snapshot.step,
        validation_loss: snapshot.validation_loss,
        tensors: snapshot
            .tensors
            .iter()
            .map(|(name, t)| TensorHeader {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&u32::try_from(header_bytes.len()).expect("header fits u32").to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for t in snapshot.tensors.values() {
        for v in &t.data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a snapshot back, bit-exactly.
pub fn read_checkpoint(path: &Path) -> Result<CheckpointSnapshot> {
    let display = path.display().to_string();
    let bad = |msg: &str| Error::FileFormat {
        path: display.clone(),
        msg: msg.to_string(),
    };
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint container (bad magic)"));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| bad("truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| bad(&format!("bad header json: {e}")))?;

    let mut tensors = BTreeMap::new();
    for th in header.tensors {
        let count: usize = th.shape.iter().product();
        let mut payload = vec![0u8; count * 4];
        file.read_exact(&mut payload)
            .map_err(|_| bad(&format!("truncated payload for tensor `{}`", th.name)))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(th.name, TensorData::new(th.shape, data));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(CheckpointSnapshot {
        step: header.step,
        tensors,
        validation_loss: header.validation_loss,
    })
}
