//! Binary portable pixmap (P6) and graymap (P5) output and input.

use std::path::Path;

use fmfilter_tensor::{IntTensor, Tensor};

use crate::error::{format_err, invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageMode {
    /// `[3,H,W]` in `[0,1]`.
    Rgb,
    /// `[1,H,W]` in `[0,1]`; one is white.
    Gray,
    /// `[1,H,W]` inverse depth, scaled so the largest value is white.
    Depth,
}

/// Fixed label palette, cycled for more than eight classes.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode(t: &Tensor, mode: ImageMode) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    match mode {
        ImageMode::Rgb => {
            if c != 3 {
                return invalid(format!("rgb image needs 3 channels, got {c}"));
            }
            let mut out = header("P6", w, h);
            let plane = h * w;
            for i in 0..plane {
                for ch in 0..3 {
                    out.push(quantize(t.data()[ch * plane + i]));
                }
            }
            Ok(out)
        }
        ImageMode::Gray | ImageMode::Depth => {
            if c != 1 {
                return invalid(format!("gray image needs 1 channel, got {c}"));
            }
            let scale = if mode == ImageMode::Depth {
                let m = t.data().iter().cloned().fold(0.0, f64::max);
                if m > 0.0 {
                    1.0 / m
                } else {
                    0.0
                }
            } else {
                1.0
            };
            let mut out = header("P5", w, h);
            out.extend(t.data().iter().map(|v| quantize(v * scale)));
            Ok(out)
        }
    }
}

pub fn encode_labels(labels: &IntTensor) -> Result<Vec<u8>> {
    let s = labels.shape();
    if s.len() != 3 || s[0] != 1 {
        return invalid(format!("labels must be [1,H,W], got {s:?}"));
    }
    let mut out = header("P6", s[2], s[1]);
    for l in labels.data() {
        if *l < 0 {
            return invalid(format!("negative label {l}"));
        }
        out.extend(PALETTE[*l as usize % PALETTE.len()]);
    }
    Ok(out)
}

pub fn write_image(path: &Path, t: &Tensor, mode: ImageMode) -> Result<()> {
    std::fs::write(path, encode(t, mode)?)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &IntTensor) -> Result<()> {
    std::fs::write(path, encode_labels(labels)?)?;
    Ok(())
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err("pnm", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    if t.len() > 9 || !t.iter().all(u8::is_ascii_digit) {
        return Err(format_err("pnm", format!("bad number {:?}", String::from_utf8_lossy(t))));
    }
    Ok(std::str::from_utf8(t).unwrap().parse().unwrap())
}

/// Decodes a binary P5/P6 image with 8-bit samples into `[1|3, H, W]` in `[0,1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos)? {
        b"P5" => 1,
        b"P6" => 3,
        m => return Err(format_err("pnm", format!("unsupported magic {:?}", String::from_utf8_lossy(m)))),
    };
    let w = number(bytes, &mut pos)?;
    let h = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(format_err("pnm", format!("unsupported size {w}x{h} or maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("pnm", "missing separator before pixel data"));
    }
    pos += 1;
    let n = w.checked_mul(h).and_then(|p| p.checked_mul(channels)).ok_or_else(|| format_err("pnm", "image too large"))?;
    if bytes.len() - pos != n {
        return Err(format_err("pnm", format!("expected {n} sample bytes, found {}", bytes.len() - pos)));
    }
    let plane = w * h;
    let px = &bytes[pos..];
    let mut data = vec![0.0; n];
    for i in 0..plane {
        for c in 0..channels {
            data[c * plane + i] = px[i * channels + c] as f64 / maxval as f64;
        }
    }
    Ok(Tensor::new(vec![channels, h, w], data)?)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}
