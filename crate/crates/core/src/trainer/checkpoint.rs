//! Checkpoint directories.
//!
//! - `params.json`: shapes, temperature, hyperparameters, epoch, RNG state,
//!   current weight table and mining state
//! - `params.f32`: every parameter array concatenated in declared order, as
//!   one `1 x N` float32 matrix
//! - `params.f64`: the same values at full precision (used for resuming)
//! - `adam.f64`: Adam first and second moments as a `2 x N` matrix

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::binfmt;
use crate::encoder::{AdamState, EncoderDims, EncoderParams, PARAM_NAMES};
use crate::mining::WeightTable;
use crate::{Error, Result};

pub const META_FILE: &str = "params.json";
pub const PARAMS_F32_FILE: &str = "params.f32";
pub const PARAMS_F64_FILE: &str = "params.f64";
pub const ADAM_FILE: &str = "adam.f64";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Shuffling is reseeded from `(seed, epoch)` at every epoch, so this pair is
/// the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub tensors: Vec<TensorSpec>,
    pub dims: EncoderDims,
    pub tau: f64,
    /// Identity label of each classifier row.
    pub class_labels: Vec<u64>,
    pub epoch: usize,
    pub rng: RngState,
    pub config: TrainConfig,
    pub adam_step: u64,
    pub weight_table: WeightTable,
    pub last_mined: Option<Vec<u64>>,
}

impl CheckpointMeta {
    pub fn from_json(text: &str) -> Result<Self> {
        let meta: Self = serde_json::from_str(text)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::UnknownVersion(meta.format_version));
        }
        meta.dims.validate()?;
        if !(meta.tau.is_finite() && meta.tau > 0.0) {
            return Err(Error::Temperature(meta.tau));
        }
        let expected = EncoderParams::zeros(&meta.dims, meta.tau).shapes();
        let declared: Vec<&[usize]> = meta.tensors.iter().map(|t| t.shape.as_slice()).collect();
        let names_ok = meta
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .eq(PARAM_NAMES.iter().copied());
        if !names_ok || declared != expected.iter().map(Vec::as_slice).collect::<Vec<_>>() {
            return Err(Error::malformed(
                "checkpoint",
                "tensor list does not match encoder dimensions",
            ));
        }
        if meta.class_labels.len() != meta.dims.n_classes {
            return Err(Error::malformed(
                "checkpoint",
                format!(
                    "{} class labels for {} classifier rows",
                    meta.class_labels.len(),
                    meta.dims.n_classes
                ),
            ));
        }
        Ok(meta)
    }

    fn n_values(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

fn flat_row(values: Vec<f64>) -> Array2<f64> {
    let n = values.len();
    Array2::from_shape_vec((1, n), values).expect("1 x n")
}

fn flat_values(m: Array2<f64>, rows: usize, n: usize, file: &str) -> Result<Vec<f64>> {
    if m.dim() != (rows, n) {
        return Err(Error::malformed(
            "checkpoint",
            format!("{file} is {:?}, expected ({rows}, {n})", m.dim()),
        ));
    }
    Ok(m.into_raw_vec_and_offset().0)
}

pub fn save(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    binfmt::create_dir(dir)?;
    let params = &state.params;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        tensors: PARAM_NAMES
            .iter()
            .zip(params.shapes())
            .map(|(n, s)| TensorSpec {
                name: (*n).to_string(),
                shape: s,
            })
            .collect(),
        dims: params.dims(),
        tau: params.tau,
        class_labels: state.class_labels.clone(),
        epoch: state.epoch,
        rng: RngState {
            seed: config.seed,
            next_epoch: state.epoch,
        },
        config: config.clone(),
        adam_step: state.adam.step,
        weight_table: state.weights.clone(),
        last_mined: state.last_mined.as_ref().map(|s| s.iter().copied().collect()),
    };
    binfmt::write_file(&dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    let flat = params.flatten();
    let as_f32 = Array2::from_shape_fn((1, flat.len()), |(_, j)| flat[j] as f32);
    binfmt::write_file(&dir.join(PARAMS_F32_FILE), binfmt::encode_f32(&as_f32)?)?;
    binfmt::write_file(&dir.join(PARAMS_F64_FILE), binfmt::encode_f64(&flat_row(flat))?)?;
    let mut moments = state.adam.m.flatten();
    moments.extend(state.adam.v.flatten());
    let n = params.n_values();
    let moments = Array2::from_shape_vec((2, n), moments).expect("2 x n");
    binfmt::write_file(&dir.join(ADAM_FILE), binfmt::encode_f64(&moments)?)
}

/// Encoder parameters and metadata. Full-precision values are preferred when
/// `params.f64` is present.
pub fn load_params(dir: &Path) -> Result<(EncoderParams, CheckpointMeta)> {
    let meta = CheckpointMeta::from_json(&binfmt::read_string(&dir.join(META_FILE))?)?;
    let n = meta.n_values();
    let exact = dir.join(PARAMS_F64_FILE);
    let flat = if exact.exists() {
        flat_values(
            binfmt::decode_f64(&binfmt::read_file(&exact)?)?,
            1,
            n,
            PARAMS_F64_FILE,
        )?
    } else {
        let m = binfmt::decode_f32(&binfmt::read_file(&dir.join(PARAMS_F32_FILE))?)?;
        flat_values(m.mapv(f64::from), 1, n, PARAMS_F32_FILE)?
    };
    let mut params = EncoderParams::zeros(&meta.dims, meta.tau);
    params.assign_flat(&flat)?;
    if !params.is_finite() {
        return Err(Error::malformed("checkpoint", "non-finite parameter"));
    }
    Ok((params, meta))
}

/// Everything needed to continue training exactly where the checkpoint left off.
pub fn load_state(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let (params, meta) = load_params(dir)?;
    let n = params.n_values();
    let moments = flat_values(
        binfmt::decode_f64(&binfmt::read_file(&dir.join(ADAM_FILE))?)?,
        2,
        n,
        ADAM_FILE,
    )?;
    let mut adam = AdamState::new(&params);
    adam.m.assign_flat(&moments[..n])?;
    adam.v.assign_flat(&moments[n..])?;
    adam.step = meta.adam_step;
    let state = TrainState {
        epoch: meta.epoch,
        params,
        adam,
        weights: meta.weight_table.clone(),
        last_mined: meta
            .last_mined
            .as_ref()
            .map(|v| v.iter().copied().collect::<BTreeSet<u64>>()),
        class_labels: meta.class_labels.clone(),
        history: Vec::new(),
        refreshes: Vec::new(),
        epoch_log: Vec::new(),
    };
    Ok((state, meta))
}
