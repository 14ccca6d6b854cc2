//! Single-file checkpoint:
//!
//! ```text
//! anatbias-checkpoint v1\n
//! <key>=<value>\n            one line per DecoderConfig field
//! tensors=<count>\n
//! tensor <name> <rows> <cols>\n<rows*cols little-endian f64>   repeated
//! ```

use std::io::{BufRead, Read};
use std::path::Path;

use super::config::DecoderConfig;
use super::model::DecoderModel;
use crate::error::{Error, Result};
use crate::formats::write_atomic;
use crate::numerics::Matrix;

const MAGIC: &str = "anatbias-checkpoint v1";

pub fn encode_checkpoint(model: &DecoderModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    for (key, value) in model.config().to_pairs() {
        out.extend_from_slice(format!("{key}={value}\n").as_bytes());
    }
    let tensors = model.weights().named();
    out.extend_from_slice(format!("tensors={}\n", tensors.len()).as_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(format!("tensor {name} {} {}\n", m.rows(), m.cols()).as_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<DecoderModel> {
    let bad = |reason: String| Error::format("checkpoint", reason);
    let mut line = String::new();
    let next_line = |src: &mut &[u8], line: &mut String| -> Result<()> {
        line.clear();
        src.read_line(line).map_err(|e| bad(e.to_string()))?;
        if !line.ends_with('\n') {
            return Err(bad("unexpected end of header".into()));
        }
        line.pop();
        Ok(())
    };

    next_line(&mut bytes, &mut line)?;
    if line != MAGIC {
        return Err(bad(format!("unknown version tag {line:?}")));
    }
    let mut config = DecoderConfig::toy(1);
    let n_tensors = loop {
        next_line(&mut bytes, &mut line)?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        let value: usize = value.parse().map_err(|_| bad(format!("bad value in {line:?}")))?;
        if key == "tensors" {
            break value;
        }
        if !config.set(key, value) {
            return Err(bad(format!("unknown config key {key:?}")));
        }
    };

    let mut model = DecoderModel::new(config.clone(), 0).map_err(|e| bad(e.to_string()))?;
    let expected: Vec<(String, (usize, usize))> = model
        .weights()
        .named()
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect();
    if expected.len() != n_tensors {
        return Err(bad(format!("{n_tensors} tensors, expected {}", expected.len())));
    }
    for ((name, shape), (_, slot)) in expected.iter().zip(model.weights_mut().named_mut()) {
        next_line(&mut bytes, &mut line)?;
        let parts: Vec<&str> = line.split(' ').collect();
        let header_ok = parts.len() == 4
            && parts[0] == "tensor"
            && parts[1] == name
            && parts[2].parse() == Ok(shape.0)
            && parts[3].parse() == Ok(shape.1);
        if !header_ok {
            return Err(bad(format!(
                "expected tensor {name} {} {}, got {line:?}",
                shape.0, shape.1
            )));
        }
        let mut buf = vec![0u8; shape.0 * shape.1 * 8];
        bytes
            .read_exact(&mut buf)
            .map_err(|_| bad(format!("truncated data for {name}")))?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *slot = Matrix::from_vec(shape.0, shape.1, values)?;
    }
    if !bytes.is_empty() {
        return Err(bad(format!("{} trailing bytes", bytes.len())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DecoderModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<DecoderModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
