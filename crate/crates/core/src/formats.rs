//! File formats: 8-bit binary PGM (P5) for masks and their smoothed layers,
//! plain CSV for matrices and tables, and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::bias::{BiasMatrix, BiasMode};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskStack};
use crate::numerics::Matrix;

/// Grey image with 8-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Parses a binary P5 PGM with `maxval < 256`. Comments in the header are allowed.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |reason: &str| Error::format("PGM", reason);
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return Err(bad("not a binary (P5) PGM"));
    }
    let mut number = |what: &str| -> Result<usize> {
        std::str::from_utf8(token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("invalid {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM (maxval 1..=255) is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = pos + 1;
    let need = width * height;
    if bytes.len() < data_start + need {
        return Err(bad("raster shorter than width x height"));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[data_start..data_start + need].to_vec(),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

/// Reads a square binary mask of the given side; pixels above 127 are on.
pub fn read_mask_pgm(path: &Path, side: usize) -> Result<BinaryMask> {
    let img = read_pgm(path)?;
    if img.width != side || img.height != side {
        return Err(Error::format(
            "mask",
            format!(
                "{} is {}x{}, expected {side}x{side}",
                path.display(),
                img.width,
                img.height
            ),
        ));
    }
    BinaryMask::from_cells(side, img.pixels.iter().map(|&p| (p > 127) as u8).collect())
}

pub fn mask_to_image(mask: &BinaryMask) -> GrayImage {
    GrayImage {
        width: mask.side(),
        height: mask.side(),
        pixels: mask.cells().iter().map(|&c| c * 255).collect(),
    }
}

/// `round(255 * v)` per cell, clamped to the 8-bit range.
pub fn layer_to_image(layer: &Matrix) -> GrayImage {
    GrayImage {
        width: layer.cols(),
        height: layer.rows(),
        pixels: layer
            .as_slice()
            .iter()
            .map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
            .collect(),
    }
}

/// Six-decimal rendering with `-inf` for negative infinity and no negative zero.
pub fn fmt_value(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        return "-inf".to_string();
    }
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

/// Smoothed layers as CSV: header `layer,row,c0..c{n-1}`, one line per grid row.
pub fn mask_stack_csv(stack: &MaskStack) -> String {
    let side = stack.layer(1).cols();
    let mut out = String::from("layer,row");
    for c in 0..side {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    for (l, m) in stack.layers().iter().enumerate() {
        for (r, row) in m.iter_rows().enumerate() {
            out.push_str(&format!("{},{r}", l + 1));
            for &v in row {
                out.push(',');
                out.push_str(&fmt_value(v));
            }
            out.push('\n');
        }
    }
    out
}

/// Metadata for a bias dump header.
#[derive(Clone, Copy, Debug)]
pub struct BiasDumpHeader {
    pub mode: BiasMode,
    pub layer: usize,
    pub t_rep: usize,
    pub total_len: usize,
    pub scale: f64,
}

/// One header row of `key=value` cells, then one CSV row per query.
pub fn bias_matrix_csv(header: &BiasDumpHeader, bias: &BiasMatrix) -> String {
    let mut out = format!(
        "mode={},layer={},t_rep={},total_len={},scale={}\n",
        header.mode,
        header.layer,
        header.t_rep,
        header.total_len,
        fmt_value(header.scale)
    );
    for row in bias.as_matrix().iter_rows() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_value(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parses a bias dump's data rows back into a matrix (`-inf` understood).
pub fn parse_bias_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines();
    lines.next().ok_or_else(|| Error::format("bias CSV", "empty"))?;
    let rows = lines
        .map(|line| {
            line.split(',')
                .map(|cell| match cell {
                    "-inf" => Ok(f64::NEG_INFINITY),
                    other => other
                        .parse()
                        .map_err(|_| Error::format("bias CSV", format!("bad cell {other:?}"))),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Writes via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
