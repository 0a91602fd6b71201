//! Checkpoints: a binary parameter blob plus a JSON manifest.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Strategy, VelocityModel};
use crate::pipeline::atomic_write;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ASCVCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartEntry {
    pub name: String,
    pub n_params: usize,
    pub n_stats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub epoch: usize,
    pub validation_loss: f64,
    pub parts: Vec<PartEntry>,
    pub rotations: usize,
    pub latent_len: usize,
    pub blob_sha256: String,
}

fn parts(model: &VelocityModel) -> Vec<(String, &super::Part)> {
    let mut out = vec![("encoder".to_string(), &model.encoder)];
    for (i, p) in model.performers.iter().enumerate() {
        out.push((format!("performer-{i}"), p));
    }
    if let Some(c) = &model.classifier {
        out.push(("classifier".to_string(), c));
    }
    out
}

pub fn encode_blob(model: &VelocityModel) -> Vec<u8> {
    let mut blob = Vec::from(&MAGIC[..]);
    let mut push = |vals: &[f64]| vals.iter().for_each(|v| blob.extend(v.to_le_bytes()));
    for (_, p) in parts(model) {
        push(&p.params);
        push(&p.stats);
    }
    for r in &model.rotations {
        push(r.as_slice().expect("standard layout"));
    }
    blob
}

pub fn manifest(
    model: &VelocityModel,
    epoch: usize,
    validation_loss: f64,
    blob: &[u8],
) -> CheckpointManifest {
    CheckpointManifest {
        config: model.config,
        strategy: model.strategy,
        seed: model.seed,
        epoch,
        validation_loss,
        parts: parts(model)
            .into_iter()
            .map(|(name, p)| PartEntry {
                name,
                n_params: p.params.len(),
                n_stats: p.stats.len(),
            })
            .collect(),
        rotations: model.rotations.len(),
        latent_len: model.latent_len(),
        blob_sha256: crate::rng::sha256_hex(blob),
    }
}

/// Writes `checkpoint.bin` and `manifest.json` into `dir`.
pub fn write_checkpoint(
    dir: &Path,
    model: &VelocityModel,
    epoch: usize,
    validation_loss: f64,
) -> Result<CheckpointManifest> {
    let blob = encode_blob(model);
    let m = manifest(model, epoch, validation_loss, &blob);
    atomic_write(&dir.join("checkpoint.bin"), &blob)?;
    atomic_write(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&m)?.as_bytes(),
    )?;
    Ok(m)
}

pub fn read_checkpoint(dir: &Path) -> Result<(VelocityModel, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    let bpath = dir.join("checkpoint.bin");
    let m: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if crate::rng::sha256_hex(&blob) != m.blob_sha256 {
        return Err(Error::MissingData(format!(
            "{} does not match its manifest",
            bpath.display()
        )));
    }
    let mut model = VelocityModel::new(m.config, m.strategy, m.seed)?;
    let expected: Vec<(usize, usize)> = m.parts.iter().map(|p| (p.n_params, p.n_stats)).collect();
    let actual: Vec<(usize, usize)> = parts(&model)
        .iter()
        .map(|(_, p)| (p.params.len(), p.stats.len()))
        .collect();
    if expected != actual || m.rotations != model.rotations.len() {
        return Err(Error::Shape(
            "checkpoint layout does not match its configuration".into(),
        ));
    }
    let values: Vec<f64> = blob[MAGIC.len()..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut rest = &values[..];
    let mut take = |dst: &mut [f64]| -> Result<()> {
        if rest.len() < dst.len() {
            return Err(Error::Parse {
                offset: blob.len(),
                message: "truncated checkpoint".into(),
            });
        }
        let (a, b) = rest.split_at(dst.len());
        dst.copy_from_slice(a);
        rest = b;
        Ok(())
    };
    take(&mut model.encoder.params)?;
    take(&mut model.encoder.stats)?;
    for p in &mut model.performers {
        take(&mut p.params)?;
        take(&mut p.stats)?;
    }
    if let Some(c) = &mut model.classifier {
        take(&mut c.params)?;
        take(&mut c.stats)?;
    }
    let l = model.latent_len();
    for r in &mut model.rotations {
        let mut buf = vec![0.0; l * l];
        take(&mut buf)?;
        *r = Array2::from_shape_vec((l, l), buf).expect("square");
    }
    Ok((model, m))
}
