//! Binary PGM (P5) and PPM (P6) image I/O, 8 bits per sample.
//!
//! Loading maps sample `k` to `k / 256`, which keeps every pixel a dyadic
//! rational: frame differences and their reconstructions are then exact in
//! binary floating point. Writing quantizes with the inverse map.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantize a [0, 1] pixel to its 8-bit sample.
pub fn quantize(v: f64) -> u8 {
    (v * 256.0).floor().clamp(0.0, 255.0) as u8
}

/// Map an 8-bit sample to its dyadic pixel value.
pub fn dequantize(b: u8) -> f64 {
    b as f64 / 256.0
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PNM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Read a P5 or P6 file into a C×H×W tensor (C = 1 or 3) with pixels in
/// [0, 1).
pub fn read_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open image {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = read_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported magic '{other}' (want P5 or P6)",
                path.display()
            )))
        }
    };
    let w: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad width", path.display())))?;
    let h: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad height", path.display())))?;
    let maxval: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad maxval", path.display())))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "{}: only 8-bit samples supported (maxval {maxval})",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "{}: truncated pixel data ({} of {need} bytes)",
            path.display(),
            bytes.len().saturating_sub(pos)
        )));
    }
    // interleaved samples → planar C×H×W
    let mut data = vec![0.0; need];
    let pixels = &bytes[pos..pos + need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[c * h * w + y * w + x] = dequantize(pixels[(y * w + x) * channels + c]);
            }
        }
    }
    Tensor::from_vec(vec![channels, h, w], data)
}

/// Write a C×H×W tensor (C = 1 or 3, values in [0, 1]) as P5/P6.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 {
        return Err(Error::Usage(format!(
            "write_image expects C×H×W, got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::Usage(format!(
                "write_image supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = Vec::with_capacity(32 + c * h * w);
    out.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    let src = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize(src[ch * h * w + y * w + x]));
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Write a matrix as an 8-bit grayscale PGM, min-max normalized per map
/// (constant maps come out black).
pub fn write_normalized_pgm(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::Usage(format!(
            "attention map must be 2-D, got {:?}",
            map.shape()
        )));
    }
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = (map.rows(), map.cols());
    let mut out = Vec::with_capacity(32 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in map.data() {
        out.push(((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
