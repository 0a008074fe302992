//! JSON checkpoint: model and optimizer tensors as base64 little-endian `f64`
//! plus the shuffle RNG position, so that a resumed run continues bit-exactly.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, MlpModel, TrainError, TrainState};
use crate::indicators::LossCurve;

pub const CHECKPOINT_FORMAT: &str = "gridrun-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Position in the key stream; a decimal string because it is 128-bit.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamTensors {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: String,
    pub v: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dims: Vec<usize>,
    pub params: String,
    pub adam: AdamTensors,
    pub rng: RngState,
    pub epochs_done: u32,
    pub train_losses: String,
    pub test_losses: String,
}

pub(crate) fn encode_f64s(xs: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_f64s(s: &str) -> Result<Vec<f64>, TrainError> {
    let bytes = B64
        .decode(s)
        .map_err(|e| TrainError::Checkpoint(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(TrainError::Checkpoint("tensor byte length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

impl Checkpoint {
    pub fn capture(model: &MlpModel, state: &TrainState) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            dims: model.dims.clone(),
            params: encode_f64s(&model.params),
            adam: AdamTensors {
                beta1: state.adam.config.beta1,
                beta2: state.adam.config.beta2,
                eps: state.adam.config.eps,
                t: state.adam.t,
                m: encode_f64s(&state.adam.m),
                v: encode_f64s(&state.adam.v),
            },
            rng: RngState {
                seed: hex(&state.rng.get_seed()),
                stream: state.rng.get_stream(),
                word_pos: state.rng.get_word_pos().to_string(),
            },
            epochs_done: state.epochs_done(),
            train_losses: encode_f64s(&state.history.train),
            test_losses: encode_f64s(&state.history.test),
        }
    }

    pub fn restore(&self) -> Result<(MlpModel, TrainState), TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if self.format != CHECKPOINT_FORMAT {
            return Err(bad("unknown checkpoint format"));
        }
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(bad("invalid layer dims"));
        }
        let params = decode_f64s(&self.params)?;
        if params.len() != MlpModel::param_count_for(&self.dims) {
            return Err(bad("parameter count does not match dims"));
        }
        let m = decode_f64s(&self.adam.m)?;
        let v = decode_f64s(&self.adam.v)?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer moments do not match parameters"));
        }
        let seed: [u8; 32] = unhex(&self.rng.seed)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("rng seed must be 32 hex bytes"))?;
        let word_pos: u128 = self.rng.word_pos.parse().map_err(|_| bad("rng word_pos"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.rng.stream);
        rng.set_word_pos(word_pos);
        let train = decode_f64s(&self.train_losses)?;
        let test = decode_f64s(&self.test_losses)?;
        if train.len() != test.len() || train.len() != self.epochs_done as usize {
            return Err(bad("loss history does not match epochs_done"));
        }
        let model = MlpModel {
            dims: self.dims.clone(),
            params,
        };
        let state = TrainState {
            adam: AdamState {
                config: AdamConfig {
                    beta1: self.adam.beta1,
                    beta2: self.adam.beta2,
                    eps: self.adam.eps,
                },
                m,
                v,
                t: self.adam.t,
            },
            rng,
            history: LossCurve { train, test },
        };
        Ok((model, state))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        crate::pipeline::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }
}
