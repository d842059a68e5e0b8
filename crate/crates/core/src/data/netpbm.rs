//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    // Exactly one whitespace byte separates maxval from the raster.
    if pos >= bytes.len() {
        return Err(format_err(path, "missing raster"));
    }
    let data_start = pos + 1;
    let magic: [u8; 2] = fields[0]
        .try_into()
        .map_err(|_| format_err(path, "bad magic"))?;
    let num = |b: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, format!("bad {what}")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero image extent"));
    }
    if maxval != 255 {
        return Err(format_err(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start,
    })
}

fn read_raster(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&bytes, path)?;
    if &h.magic != magic {
        return Err(format_err(
            path,
            format!("expected {}, found {}", String::from_utf8_lossy(magic), String::from_utf8_lossy(&h.magic)),
        ));
    }
    let n = h.width * h.height * channels;
    let raster = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| format_err(path, format!("raster needs {n} bytes")))?;
    Ok((h.width, h.height, raster.to_vec()))
}

fn write_raster(path: &Path, magic: &str, width: usize, height: usize, raster: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(raster);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a P6 file as a 3×H×W tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, raster) = read_raster(path, b"P6", 3)?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raster.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a 3×H×W tensor, clamped to [0, 1], as P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::contract("write_ppm", format!("expected 3×H×W, got {:?}", image.shape())));
    };
    let plane = h * w;
    let d = image.data();
    let raster: Vec<u8> = (0..plane)
        .flat_map(|i| [to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])])
        .collect();
    write_raster(path, "P6", w, h, &raster)
}

/// Reads a P5 file as (width, height, samples).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_raster(path, b"P5", 1)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height || pixels.is_empty() {
        return Err(Error::contract(
            "write_pgm",
            format!("{width}×{height} needs {} samples, got {}", width * height, pixels.len()),
        ));
    }
    write_raster(path, "P5", width, height, pixels)
}
