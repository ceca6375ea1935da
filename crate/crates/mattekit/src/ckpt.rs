//! Checkpoint persistence: a directory holding the model config, parameter
//! tensors, optimizer state, and iteration counter.
//!
//! `params.bin` and `optim.bin` are little-endian binary blobs written in a
//! fixed order, so identical training runs produce byte-identical
//! checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MatteError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Params;
use crate::optim::Sgd;
use crate::tensor::Tensor;

const PARAMS_MAGIC: &[u8; 4] = b"MKP1";
const OPTIM_MAGIC: &[u8; 4] = b"MKO1";

#[derive(Serialize, Deserialize)]
struct Meta {
    iteration: usize,
}

/// Writes `config.toml`, `params.bin`, `meta.toml`, and (when an optimizer is
/// given) `optim.bin` into `dir`, creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    iteration: usize,
    optim: Option<&Sgd>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config = toml::to_string_pretty(model.config())
        .map_err(|e| MatteError::Checkpoint(format!("config serialization failed: {e}")))?;
    fs::write(dir.join("config.toml"), config)?;
    let meta = toml::to_string_pretty(&Meta { iteration })
        .map_err(|e| MatteError::Checkpoint(format!("meta serialization failed: {e}")))?;
    fs::write(dir.join("meta.toml"), meta)?;
    write_params(&dir.join("params.bin"), &model.params)?;
    if let Some(sgd) = optim {
        write_velocity(&dir.join("optim.bin"), sgd.velocity())?;
    }
    Ok(())
}

/// Rebuilds the model from a checkpoint directory. Every stored tensor must
/// match a parameter of the rebuilt model by name and shape, and every model
/// parameter must be present; anything else is an error.
///
/// Returns the model, the stored iteration, and the optimizer velocity when
/// `optim.bin` exists.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, usize, Option<BTreeMap<String, Vec<f64>>>)> {
    let config_text = fs::read_to_string(dir.join("config.toml"))
        .map_err(|e| MatteError::Checkpoint(format!("cannot read {}/config.toml: {e}", dir.display())))?;
    let config: ModelConfig = toml::from_str(&config_text)
        .map_err(|e| MatteError::Checkpoint(format!("bad config.toml: {e}")))?;
    let meta_text = fs::read_to_string(dir.join("meta.toml"))
        .map_err(|e| MatteError::Checkpoint(format!("cannot read {}/meta.toml: {e}", dir.display())))?;
    let meta: Meta = toml::from_str(&meta_text)
        .map_err(|e| MatteError::Checkpoint(format!("bad meta.toml: {e}")))?;

    let mut model = Model::new(config, 0)?;
    let stored = read_params(&dir.join("params.bin"))?;
    apply_params(&mut model.params, stored)?;

    let optim_path = dir.join("optim.bin");
    let velocity = if optim_path.exists() { Some(read_velocity(&optim_path)?) } else { None };
    Ok((model, meta.iteration, velocity))
}

fn apply_params(params: &mut Params, stored: Vec<(String, Tensor)>) -> Result<()> {
    if stored.len() != params.len() {
        return Err(MatteError::Checkpoint(format!(
            "expected {} parameters, checkpoint holds {}",
            params.len(),
            stored.len()
        )));
    }
    for (name, value) in stored {
        let current = params.lookup(&name)?;
        if current.shape() != value.shape() {
            return Err(MatteError::Checkpoint(format!(
                "shape mismatch for {name}: model {:?}, checkpoint {:?}",
                current.shape(),
                value.shape()
            )));
        }
        *params.get_mut(&name) = value;
    }
    Ok(())
}

fn write_params(path: &Path, params: &Params) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for entry in params.iter() {
        write_name(&mut w, &entry.name)?;
        w.write_all(&[entry.trainable as u8])?;
        let (n, c, h, wd) = entry.value.shape();
        for dim in [n, c, h, wd] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        write_f64s(&mut w, entry.value.data())?;
    }
    w.flush()?;
    Ok(())
}

fn read_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(
        fs::File::open(path)
            .map_err(|e| MatteError::Checkpoint(format!("cannot open {}: {e}", path.display())))?,
    );
    expect_magic(&mut r, PARAMS_MAGIC)?;
    let count = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_name(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let dims: [usize; 4] = [
            read_u64(&mut r)? as usize,
            read_u64(&mut r)? as usize,
            read_u64(&mut r)? as usize,
            read_u64(&mut r)? as usize,
        ];
        let numel = dims.iter().product();
        let data = read_f64s(&mut r, numel)?;
        out.push((name, Tensor::from_vec(dims[0], dims[1], dims[2], dims[3], data)));
    }
    Ok(out)
}

fn write_velocity(path: &Path, velocity: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(OPTIM_MAGIC)?;
    w.write_all(&(velocity.len() as u64).to_le_bytes())?;
    for (name, buf) in velocity {
        write_name(&mut w, name)?;
        w.write_all(&(buf.len() as u64).to_le_bytes())?;
        write_f64s(&mut w, buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_velocity(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut r = BufReader::new(
        fs::File::open(path)
            .map_err(|e| MatteError::Checkpoint(format!("cannot open {}: {e}", path.display())))?,
    );
    expect_magic(&mut r, OPTIM_MAGIC)?;
    let count = read_u64(&mut r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name = read_name(&mut r)?;
        let len = read_u64(&mut r)? as usize;
        out.insert(name, read_f64s(&mut r, len)?);
    }
    Ok(out)
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| MatteError::Checkpoint(format!("bad parameter name: {e}")))
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| MatteError::Checkpoint(format!("truncated tensor data: {e}")))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(MatteError::Checkpoint(format!(
            "bad magic {buf:?}, expected {magic:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionMode;
    use crate::synth::synth_background;
    use tempfile::tempdir;

    fn tiny_model(seed: u64) -> Model {
        let config = ModelConfig {
            encoder_widths: [3, 4, 5, 6, 7],
            ppm_bins: vec![1, 2],
            scb_channels: 6,
            hrdb_channels: 5,
            guidance_taps: vec![1, 3],
            fusion: FusionMode::Rep,
        };
        Model::new(config, seed).unwrap()
    }

    #[test]
    fn round_trip_restores_bitwise_identical_forward() {
        let dir = tempdir().unwrap();
        let model = tiny_model(5);
        let mut sgd = Sgd::new(0.9, 4e-5);
        sgd.set_velocity(BTreeMap::from([("enc.stem.conv.weight".into(), vec![0.25; 9])]));
        save_checkpoint(dir.path(), &model, 42, Some(&sgd)).unwrap();

        let (restored, iteration, velocity) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(iteration, 42);
        assert_eq!(velocity.unwrap()["enc.stem.conv.weight"], vec![0.25; 9]);
        assert_eq!(restored.config(), model.config());
        for (a, b) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data(), "{} drifted", a.name);
        }
        let image = synth_background(3, 32);
        let out_a = model.infer_one(&image, false).unwrap();
        let out_b = restored.infer_one(&image, false).unwrap();
        assert_eq!(out_a.alpha.data(), out_b.alpha.data());
    }

    #[test]
    fn optimizer_state_is_optional() {
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &tiny_model(1), 7, None).unwrap();
        let (_, iteration, velocity) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(iteration, 7);
        assert!(velocity.is_none());
    }

    #[test]
    fn mismatched_config_is_rejected_loudly() {
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &tiny_model(2), 1, None).unwrap();
        // Rewrite the config with different widths: stored tensors no longer fit.
        let other = ModelConfig { encoder_widths: [4, 5, 6, 7, 8], ..tiny_model(2).config().clone() };
        fs::write(dir.path().join("config.toml"), toml::to_string_pretty(&other).unwrap()).unwrap();
        let err = match load_checkpoint(dir.path()) {
            Ok(_) => panic!("mismatched config was accepted"),
            Err(e) => e,
        };
        assert!(matches!(err, MatteError::Checkpoint(_)), "got {err:?}");
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &tiny_model(3), 1, None).unwrap();
        let path = dir.path().join("params.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
