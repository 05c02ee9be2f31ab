//! Binary PPM (P6, 8-bit) images.

use std::path::Path;

use neurimg_tensor::Tensor;

use crate::error::{CliError, Result};

/// Encodes an `H × W × 3` image in `[0, 1]`; values are clamped and rounded
/// to 8 bits.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, 3] = img.shape() else {
        return Err(CliError::Usage(format!("PPM needs an H×W×3 image, got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn malformed(msg: &str) -> CliError {
    CliError::Io(format!("malformed PPM: {msg}"))
}

/// Decodes a P6 image with maxval 255 into `H × W × 3` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(malformed("not P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| malformed("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(malformed("only 8-bit images are supported"));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    pos += 1;
    let n = w * h * 3;
    if bytes.len() < pos + n {
        return Err(malformed("pixel data is truncated"));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(&[h, w, 3], data)?)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?)
}
