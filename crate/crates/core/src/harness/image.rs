//! Binary 8-bit grayscale PGM (P5) output for 2-D signals.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{DcsError, Result};

/// Maps a value in [-1, 1] to a byte; values outside are clamped first.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 0.5 * 255.0).round() as u8
}

/// Row-major pixel bytes of `x` reshaped to `(h, w)`.
pub fn to_pixels(x: &DVector<f64>, (h, w): (usize, usize)) -> Result<Vec<u8>> {
    if h * w != x.len() || h == 0 || w == 0 {
        return Err(DcsError::Dimension {
            context: "emit_image shape",
            expected: x.len(),
            got: h * w,
        });
    }
    Ok(x.iter().map(|&v| quantize(v)).collect())
}

/// Writes `x` as an `h` by `w` binary PGM.
pub fn emit_image(x: &DVector<f64>, shape: (usize, usize), path: &Path) -> Result<()> {
    let pixels = to_pixels(x, shape)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", shape.1, shape.0)?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok(())
}

/// A decoded 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Reads a binary PGM with maxval 255; `#` comments in the header are skipped.
pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| DcsError::Argument(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    let mut token = || -> Option<String> {
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
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(bad("not a binary PGM"));
    }
    let mut number = || token().and_then(|t| t.parse::<usize>().ok());
    let (width, height, maxval) = match (number(), number(), number()) {
        (Some(w), Some(h), Some(m)) => (w, h, m),
        _ => return Err(bad("malformed header")),
    };
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let pixels = bytes
        .get(start..start + width * height)
        .ok_or_else(|| bad("truncated raster"))?
        .to_vec();
    Ok(Pgm { width, height, pixels })
}
