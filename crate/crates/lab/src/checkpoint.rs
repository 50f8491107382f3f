//! Binary checkpoints for parameters and dictionaries, each with a JSON
//! sidecar.
//!
//! Parameter file: `DCFP`, u32 version, u32 block count, then per block a
//! u32 name length, the name, u64 rows and u64 cols; after all headers, every
//! block's values as little-endian f64 in block order. Dictionary file:
//! `DCFD`, u32 version, u64 rows, u64 cols, values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use deconfound_core::causal::Dictionary;
use deconfound_core::corpus::Vocab;
use deconfound_core::linalg::Matrix;
use deconfound_core::model::{Dims, ModelParams, Task, BLOCK_NAMES};
use deconfound_core::train::{DebiasModel, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PARAMS_MAGIC: [u8; 4] = *b"DCFP";
pub const DICT_MAGIC: [u8; 4] = *b"DCFD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub format_version: u32,
    pub dims: Dims,
    pub seed: u64,
    pub config_hash: String,
    pub train_config: TrainConfig,
    /// Vocabulary words in index order, starting at index 1.
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictMeta {
    pub n: usize,
    pub d: usize,
    pub task: Task,
    pub seed: u64,
    pub source_ids: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format { path: path.to_path_buf(), message: message.into() }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    read_array::<4, _>(r).map(u32::from_le_bytes)
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    read_array::<8, _>(r).map(u64::from_le_bytes)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| read_array::<8, _>(r).map(f64::from_le_bytes)).collect()
}

fn check_header<R: Read>(r: &mut R, magic: [u8; 4], path: &Path) -> Result<(), CheckpointError> {
    let m = read_array::<4, _>(r).map_err(io_err(path))?;
    if m != magic {
        return Err(format_err(path, format!("bad magic {m:?}")));
    }
    let v = read_u32(r).map_err(io_err(path))?;
    if v != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {v}")));
    }
    Ok(())
}

pub fn write_params(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let blocks = params.blocks();
    let run = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(&PARAMS_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, m) in &blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
        }
        for (_, m) in &blocks {
            write_f64s(w, m.as_slice())?;
        }
        w.flush()
    };
    run(&mut w).map_err(io_err(path))
}

pub fn read_params(path: &Path) -> Result<ModelParams, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    check_header(&mut r, PARAMS_MAGIC, path)?;
    let n = read_u32(&mut r).map_err(io_err(path))? as usize;
    if n != BLOCK_NAMES.len() {
        return Err(format_err(path, format!("expected {} blocks, found {n}", BLOCK_NAMES.len())));
    }
    let mut shapes = Vec::with_capacity(n);
    for expected in BLOCK_NAMES {
        let len = read_u32(&mut r).map_err(io_err(path))? as usize;
        if len > 64 {
            return Err(format_err(path, "block name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err(path))?;
        if name != expected.as_bytes() {
            return Err(format_err(path, format!("expected block {expected}, found {}", String::from_utf8_lossy(&name))));
        }
        let rows = read_u64(&mut r).map_err(io_err(path))? as usize;
        let cols = read_u64(&mut r).map_err(io_err(path))? as usize;
        shapes.push((rows, cols));
    }
    let emb = shapes[0];
    let img = shapes[1];
    let dims = Dims { vocab_rows: emb.0, embed: emb.1, feature: img.1, hidden: shapes[2].0, attn: shapes[9].0 };
    let mut params = ModelParams::zeros(&dims);
    for ((name, block), &(rows, cols)) in params.blocks_mut().into_iter().zip(&shapes) {
        if block.shape() != (rows, cols) {
            return Err(format_err(path, format!("block {name} has inconsistent shape {rows}x{cols}")));
        }
        let data = read_f64s(&mut r, rows * cols).map_err(io_err(path))?;
        *block = Matrix::from_vec(rows, cols, data).map_err(|e| format_err(path, e.to_string()))?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io_err(path))?;
    if !rest.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", rest.len())));
    }
    Ok(params)
}

pub fn write_dictionary(dict: &Dictionary, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let run = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        w.write_all(&DICT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(dict.rows.rows() as u64).to_le_bytes())?;
        w.write_all(&(dict.rows.cols() as u64).to_le_bytes())?;
        write_f64s(w, dict.rows.as_slice())?;
        w.flush()
    };
    run(&mut w).map_err(io_err(path))?;
    let meta = DictMeta {
        n: dict.len(),
        d: dict.dim(),
        task: dict.task,
        seed: dict.seed,
        source_ids: dict.source_ids.clone(),
    };
    write_json(&meta, &path.with_extension("json"))
}

pub fn read_dictionary(path: &Path) -> Result<Dictionary, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    check_header(&mut r, DICT_MAGIC, path)?;
    let rows = read_u64(&mut r).map_err(io_err(path))? as usize;
    let cols = read_u64(&mut r).map_err(io_err(path))? as usize;
    let data = read_f64s(&mut r, rows * cols).map_err(io_err(path))?;
    let meta: DictMeta = read_json(&path.with_extension("json"))?;
    if meta.n != rows || meta.d != cols || meta.source_ids.len() != rows {
        return Err(format_err(path, "sidecar disagrees with binary rows"));
    }
    Ok(Dictionary {
        rows: Matrix::from_vec(rows, cols, data).map_err(|e| format_err(path, e.to_string()))?,
        source_ids: meta.source_ids,
        task: meta.task,
        seed: meta.seed,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CheckpointError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CheckpointError::Json { path: path.to_path_buf(), source: e })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CheckpointError> {
    let f = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| CheckpointError::Json { path: path.to_path_buf(), source: e })
}

fn dict_file(dir: &Path, task: Task) -> PathBuf {
    dir.join(format!("dict_{}.bin", task.as_str()))
}

/// Writes `params.bin`, `params.json` and one dictionary pair per task.
pub fn save_model(model: &DebiasModel, cfg: &TrainConfig, config_hash: &str, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_params(&model.params, &dir.join("params.bin"))?;
    let meta = ParamsMeta {
        format_version: FORMAT_VERSION,
        dims: model.params.dims(),
        seed: cfg.seed,
        config_hash: config_hash.to_string(),
        train_config: cfg.clone(),
        vocab: model.vocab.words().to_vec(),
    };
    write_json(&meta, &dir.join("params.json"))?;
    if let Some(dicts) = &model.dictionaries {
        for d in dicts {
            write_dictionary(d, &dict_file(dir, d.task))?;
        }
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(DebiasModel, ParamsMeta), CheckpointError> {
    let params = read_params(&dir.join("params.bin"))?;
    let meta: ParamsMeta = read_json(&dir.join("params.json"))?;
    if params.dims() != meta.dims {
        return Err(format_err(dir, "params.json dims disagree with params.bin"));
    }
    let vocab = Vocab::from_words(&meta.vocab);
    if vocab.table_rows() != meta.dims.vocab_rows {
        return Err(format_err(dir, "vocabulary size disagrees with the embedding table"));
    }
    let paths = Task::ALL.map(|t| dict_file(dir, t));
    let dictionaries = if paths.iter().all(|p| p.exists()) {
        Some([read_dictionary(&paths[0])?, read_dictionary(&paths[1])?])
    } else {
        None
    };
    Ok((DebiasModel { vocab, params, dictionaries }, meta))
}
