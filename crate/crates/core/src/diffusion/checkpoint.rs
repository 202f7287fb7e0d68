//! Checkpoint format: `params.bin` concatenates one TNSR blob per named
//! parameter; `manifest.txt` lists `name rowsxcols byte-offset` per line;
//! `config.txt` carries the model config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::config::{parse_config, write_config};
use super::model::ModelState;
use super::DiffusionError;
use crate::tensorio::{self, Tensor, TensorIoError};

fn io_err(path: &Path, e: std::io::Error) -> DiffusionError {
    DiffusionError::Io(TensorIoError::Io { path: path.to_path_buf(), source: e })
}

pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<(), DiffusionError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let bin_path = dir.join("params.bin");
    let file = File::create(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    let mut manifest = String::new();
    let mut offset = 0usize;
    for p in state.params() {
        let (rows, cols) = p.value.dim();
        let tensor =
            Tensor::new(vec![rows, cols], p.value.iter().copied().collect()).unwrap();
        tensorio::write_tensor_to(&tensor, &mut w).map_err(|e| io_err(&bin_path, e))?;
        manifest.push_str(&format!("{} {}x{} {}\n", p.name, rows, cols, offset));
        offset += tensorio::encoded_len(&tensor);
    }
    w.flush().map_err(|e| io_err(&bin_path, e))?;
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| io_err(&dir.join("manifest.txt"), e))?;
    std::fs::write(dir.join("config.txt"), write_config(&state.config, None))
        .map_err(|e| io_err(&dir.join("config.txt"), e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelState, DiffusionError> {
    let config_text = std::fs::read_to_string(dir.join("config.txt"))
        .map_err(|e| io_err(&dir.join("config.txt"), e))?;
    let (config, _) = parse_config(&config_text)?;
    let mut state = ModelState::init(config, 0)?;

    let manifest_path = dir.join("manifest.txt");
    let manifest = std::fs::read_to_string(&manifest_path)
        .map_err(|e| io_err(&manifest_path, e))?;
    let bin_path = dir.join("params.bin");
    let file = File::open(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let mut r = BufReader::new(file);

    let mut loaded = 0usize;
    let mut cursor = 0usize;
    for (ln, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(DiffusionError::Checkpoint(format!(
                "manifest line {}: expected `name RxC offset`",
                ln + 1
            )));
        }
        let name = parts[0];
        let (rows, cols) = parts[1].split_once('x').ok_or_else(|| {
            DiffusionError::Checkpoint(format!("manifest line {}: bad dims `{}`", ln + 1, parts[1]))
        })?;
        let rows: usize = rows.parse().map_err(|_| {
            DiffusionError::Checkpoint(format!("manifest line {}: bad dims", ln + 1))
        })?;
        let cols: usize = cols.parse().map_err(|_| {
            DiffusionError::Checkpoint(format!("manifest line {}: bad dims", ln + 1))
        })?;
        let offset: usize = parts[2].parse().map_err(|_| {
            DiffusionError::Checkpoint(format!("manifest line {}: bad offset", ln + 1))
        })?;
        if offset != cursor {
            return Err(DiffusionError::Checkpoint(format!(
                "manifest line {}: offset {offset} does not match stream position {cursor}",
                ln + 1
            )));
        }
        let tensor = tensorio::read_tensor_from(&mut r, &bin_path)?;
        if tensor.dims() != [rows, cols] {
            return Err(DiffusionError::Checkpoint(format!(
                "parameter `{name}`: manifest {rows}x{cols} vs stored {:?}",
                tensor.dims()
            )));
        }
        cursor += tensorio::encoded_len(&tensor);
        if !state.has_param(name) {
            return Err(DiffusionError::Checkpoint(format!(
                "parameter `{name}` not present in the configured model"
            )));
        }
        let value = Array2::from_shape_vec((rows, cols), tensor.into_data()).unwrap();
        if state.param(name).dim() != value.dim() {
            return Err(DiffusionError::Checkpoint(format!(
                "parameter `{name}`: expected {:?}, got {:?}",
                state.param(name).dim(),
                value.dim()
            )));
        }
        *state.param_mut(name) = value;
        loaded += 1;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| io_err(&bin_path, e))? != 0 {
        return Err(DiffusionError::Checkpoint("params.bin has trailing bytes".into()));
    }
    if loaded != state.params().len() {
        return Err(DiffusionError::Checkpoint(format!(
            "checkpoint has {loaded} parameters, model needs {}",
            state.params().len()
        )));
    }
    Ok(state)
}
