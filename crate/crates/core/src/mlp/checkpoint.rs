//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding a text manifest plus a binary weight
//! file:
//!
//! - `manifest.txt`: `key = value` lines (format tag, input_dim,
//!   layer_sizes, activation, training_step).
//! - `weights.bin`: for each layer in order, the weight matrix row-major
//!   followed by the bias vector, as little-endian 32-bit floats.
//!
//! The weight file is written before the manifest, so a directory with a
//! readable manifest is always complete.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Activation, DenseLayer, NetworkParams};

pub const FORMAT_TAG: &str = "highway-rl-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Write `params` (rounded to f32) and the training step to `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &NetworkParams,
    training_step: u64,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;

    let mut blob = Vec::new();
    for layer in &params.layers {
        for &w in &layer.w {
            blob.extend_from_slice(&(w as f32).to_le_bytes());
        }
        for &b in &layer.b {
            blob.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    let tmp = dir.join(format!("{WEIGHTS_FILE}.tmp"));
    fs::File::create(&tmp)?.write_all(&blob)?;
    fs::rename(&tmp, dir.join(WEIGHTS_FILE))?;

    let sizes: Vec<String> = params.layer_sizes().iter().map(|s| s.to_string()).collect();
    let manifest = format!(
        "format = {FORMAT_TAG}\ninput_dim = {}\nlayer_sizes = {}\nactivation = {}\ntraining_step = {training_step}\n",
        params.input_dim(),
        sizes.join(","),
        params.activation.name(),
    );
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::File::create(&tmp)?.write_all(manifest.as_bytes())?;
    fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

fn manifest_value<'a>(fields: &'a [(String, String)], key: &str) -> Result<&'a str, CheckpointError> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| CheckpointError::Format(format!("manifest missing '{key}'")))
}

/// Load a checkpoint directory; returns the parameters (promoted to f64)
/// and the training step recorded in the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(NetworkParams, u64), CheckpointError> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let fields: Vec<(String, String)> = manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CheckpointError::Format(format!("bad manifest line: '{line}'")))
        })
        .collect::<Result<_, _>>()?;

    let format = manifest_value(&fields, "format")?;
    if format != FORMAT_TAG {
        return Err(CheckpointError::Format(format!("unknown format tag '{format}'")));
    }
    let sizes: Vec<usize> = manifest_value(&fields, "layer_sizes")?
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CheckpointError::Format(format!("bad layer_sizes: {e}")))?;
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(CheckpointError::Format("layer_sizes must list at least two positive widths".into()));
    }
    let input_dim: usize = manifest_value(&fields, "input_dim")?
        .parse()
        .map_err(|e| CheckpointError::Format(format!("bad input_dim: {e}")))?;
    if input_dim != sizes[0] {
        return Err(CheckpointError::Format(format!(
            "input_dim {input_dim} disagrees with layer_sizes[0] = {}",
            sizes[0]
        )));
    }
    let activation = Activation::from_name(manifest_value(&fields, "activation")?)
        .ok_or_else(|| CheckpointError::Format("unknown activation".into()))?;
    let training_step: u64 = manifest_value(&fields, "training_step")?
        .parse()
        .map_err(|e| CheckpointError::Format(format!("bad training_step: {e}")))?;

    let expected_floats: usize =
        sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    let mut blob = Vec::new();
    fs::File::open(dir.join(WEIGHTS_FILE))?.read_to_end(&mut blob)?;
    if blob.len() != expected_floats * 4 {
        return Err(CheckpointError::Format(format!(
            "weight file holds {} bytes, expected {}",
            blob.len(),
            expected_floats * 4
        )));
    }

    let mut floats = blob.chunks_exact(4).map(|c| {
        f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
    });
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for pair in sizes.windows(2) {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let w: Vec<f64> = floats.by_ref().take(in_dim * out_dim).collect();
        let b: Vec<f64> = floats.by_ref().take(out_dim).collect();
        if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
            return Err(CheckpointError::Format("non-finite value in weight file".into()));
        }
        layers.push(DenseLayer { in_dim, out_dim, w, b });
    }

    Ok((NetworkParams { layers, activation }, training_step))
}
