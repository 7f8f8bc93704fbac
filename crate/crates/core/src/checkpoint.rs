//! Encoder checkpoints.
//!
//! ```text
//! <dir>/config.txt          key=value lines
//! <dir>/params/index.txt    tensor names, one per line, in store order
//! <dir>/params/<name>.f32   u32 rank, u32 dims..., f32 data (all little-endian)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::{freeze, FrozenModel, ModelConfig, Modality, TransformerModel};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Mat, Scalar};
use crate::tokenizer::TokenLayout;

fn config_text(config: &ModelConfig, frozen: bool) -> String {
    let l = &config.layout;
    [
        ("kind", "encoder".to_string()),
        ("modality", config.modality.to_string()),
        ("embed_dim", config.embed_dim.to_string()),
        ("depth", config.depth.to_string()),
        ("heads", config.heads.to_string()),
        ("mlp_ratio", config.mlp_ratio.to_string()),
        ("decoder_dim", config.decoder_dim.to_string()),
        ("decoder_depth", config.decoder_depth.to_string()),
        ("t_tokens", l.t_tokens.to_string()),
        ("h_tokens", l.h_tokens.to_string()),
        ("w_tokens", l.w_tokens.to_string()),
        ("pt", l.pt.to_string()),
        ("ps", l.ps.to_string()),
        ("channels", l.channels.to_string()),
        ("frozen", frozen.to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{k}={v}\n"))
    .collect()
}

fn encode_tensor<T: Scalar>(m: &Mat<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.len());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Mat<f32>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::corrupt(path, "truncated tensor header"))
    };
    let rank = word(0)? as usize;
    if rank == 0 || rank > 2 {
        return Err(Error::corrupt(path, format!("unsupported tensor rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank).map(|i| word(1 + i).map(|d| d as usize)).collect::<Result<_>>()?;
    let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
    let body = &bytes[4 * (1 + rank)..];
    if body.len() != rows * cols * 4 {
        return Err(Error::corrupt(path, format!("expected {} data bytes, found {}", rows * cols * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Mat::from_vec(rows, cols, data))
}

fn write_checkpoint<T: Scalar>(model: &TransformerModel<T>, dir: &Path, frozen: bool) -> Result<()> {
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir)?;
    fs::write(dir.join("config.txt"), config_text(model.config(), frozen))?;
    let store = model.params();
    let mut index = String::new();
    for (name, value) in store.names().iter().zip(store.values()) {
        index.push_str(name);
        index.push('\n');
        fs::write(pdir.join(format!("{name}.f32")), encode_tensor(value))?;
    }
    fs::write(pdir.join("index.txt"), index)?;
    Ok(())
}

/// Writes a trainable encoder. Values are stored as f32.
pub fn save_checkpoint<T: Scalar>(model: &TransformerModel<T>, dir: &Path) -> Result<()> {
    write_checkpoint(model, dir, false)
}

pub fn save_frozen<T: Scalar>(model: &FrozenModel<T>, dir: &Path) -> Result<()> {
    write_checkpoint(model.model(), dir, true)
}

fn parse_config(dir: &Path) -> Result<(ModelConfig, bool)> {
    let path = dir.join("config.txt");
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let text = fs::read_to_string(&path)?;
    let mut kv = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::corrupt(&path, format!("malformed line {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("{} is missing {k}", path.display())));
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Config(format!("{}: {k} is not an integer", path.display())))
    };
    if get("kind")? != "encoder" {
        return Err(Error::Config(format!("{} does not describe an encoder", path.display())));
    }
    let layout = TokenLayout {
        t_tokens: num("t_tokens")?,
        h_tokens: num("h_tokens")?,
        w_tokens: num("w_tokens")?,
        pt: num("pt")?,
        ps: num("ps")?,
        channels: num("channels")?,
    };
    let config = ModelConfig {
        embed_dim: num("embed_dim")?,
        depth: num("depth")?,
        heads: num("heads")?,
        mlp_ratio: num("mlp_ratio")?,
        decoder_dim: num("decoder_dim")?,
        decoder_depth: num("decoder_depth")?,
        layout,
        modality: get("modality")?.parse()?,
    };
    config.validate()?;
    let frozen = match get("frozen").map(String::as_str) {
        Ok("true") => true,
        Ok("false") | Err(_) => false,
        Ok(other) => return Err(Error::Config(format!("frozen must be true|false, got {other:?}"))),
    };
    Ok((config, frozen))
}

/// Reads an encoder checkpoint; tensor names and shapes are checked against
/// the stored config. Also returns whether it was saved frozen.
pub fn load_checkpoint_with_flag(dir: &Path) -> Result<(TransformerModel<f32>, bool)> {
    let (config, frozen) = parse_config(dir)?;
    let pdir = dir.join("params");
    let index_path = pdir.join("index.txt");
    if !index_path.is_file() {
        return Err(Error::MissingManifest(index_path));
    }
    let index = fs::read_to_string(&index_path)?;
    let mut store = ParamStore::new();
    for name in index.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let path = pdir.join(format!("{name}.f32"));
        let value = decode_tensor(&fs::read(&path)?, &path)?;
        // buffers are the fixed positional tables
        store.insert(name, value, name != "pos_embed");
    }
    Ok((TransformerModel::from_params(config, store)?, frozen))
}

pub fn load_checkpoint(dir: &Path) -> Result<TransformerModel<f32>> {
    load_checkpoint_with_flag(dir).map(|(m, _)| m)
}

/// Loads and checks the modality.
pub fn load_checkpoint_as(dir: &Path, modality: Modality) -> Result<TransformerModel<f32>> {
    let model = load_checkpoint(dir)?;
    if model.modality() != modality {
        return Err(Error::Config(format!(
            "{} holds a {} model, expected {modality}",
            dir.display(),
            model.modality()
        )));
    }
    Ok(model)
}

/// Loads a teacher and freezes it.
pub fn load_teacher(dir: &Path, modality: Modality) -> Result<FrozenModel<f32>> {
    load_checkpoint_as(dir, modality).map(freeze)
}
