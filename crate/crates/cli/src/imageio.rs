//! Image files: 8-bit RGB PNG and the lossless `ERAF` raw float format.
//!
//! `ERAF` layout (little-endian): magic `ERAF`, u32 version 1, u32 channels,
//! u32 height, u32 width, then `channels·height·width` f32 values in
//! channel-major row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use eranet::Tensor4;

use crate::error::{CliError, Result};

pub const RAW_MAGIC: [u8; 4] = *b"ERAF";
pub const RAW_VERSION: u32 = 1;
const RAW_HEADER: usize = 20;

/// `[0, 1]` → 8-bit with round-half-up and clamping.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

fn is_raw(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("eraf"))
}

/// True for file names the loaders accept.
pub fn is_image_path(path: &Path) -> bool {
    is_raw(path)
        || path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn encode_raw(t: &Tensor4<f64>) -> Vec<u8> {
    let [_, c, h, w] = t.shape();
    let mut out = Vec::with_capacity(RAW_HEADER + 4 * c * h * w);
    out.extend_from_slice(&RAW_MAGIC);
    for v in [RAW_VERSION, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &t.data()[..c * h * w] {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> std::result::Result<Tensor4<f64>, String> {
    if bytes.len() < RAW_HEADER {
        return Err(format!(
            "raw image header truncated ({} bytes)",
            bytes.len()
        ));
    }
    if bytes[..4] != RAW_MAGIC {
        return Err("not an ERAF raw image".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != RAW_VERSION {
        return Err(format!("unsupported raw image version {}", word(0)));
    }
    let (c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let need = RAW_HEADER + 4 * c * h * w;
    if bytes.len() != need {
        return Err(format!(
            "raw image is {} bytes, header implies {need}",
            bytes.len()
        ));
    }
    let data = bytes[RAW_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor4::from_vec([1, c, h, w], data).map_err(|e| e.to_string())
}

/// Loads one image as a `(1, 3, h, w)` tensor in `[0, 1]` (raw files keep
/// their stored channel count and values).
pub fn load_image(path: &Path) -> Result<Tensor4<f64>> {
    let fail = |e: String| CliError::Data(format!("{}: {e}", path.display()));
    if is_raw(path) {
        let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
        return decode_raw(&bytes).map_err(fail);
    }
    let img = image::open(path)
        .map_err(|e| fail(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
        dequantize(img.get_pixel(x as u32, y as u32)[c])
    }))
}

/// PNG bytes of the first image of a 3-channel tensor.
pub fn encode_png(t: &Tensor4<f64>) -> Result<Vec<u8>> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(CliError::Data(format!(
            "PNG output needs 3 channels, got {c}"
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            px[ch] = quantize(t.get(0, ch, y as usize, x as usize));
        }
    }
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(out)
}

/// Writes via a temporary file in the target directory and an atomic rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let fail = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(fail)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

/// Saves as PNG or, for `.eraf` paths, as raw floats.
pub fn save_image(path: &Path, t: &Tensor4<f64>) -> Result<()> {
    let bytes = if is_raw(path) {
        encode_raw(t)
    } else {
        encode_png(t)?
    };
    write_atomic(path, &bytes)
}

/// Image files directly inside `dir`, sorted by name; a file path yields itself.
pub fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries =
        fs::read_dir(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up_and_clamps() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
        for v in 0..=255u8 {
            assert_eq!(quantize(dequantize(v)), v);
        }
    }

    #[test]
    fn raw_round_trip_and_rejection() {
        let t = Tensor4::from_fn([1, 3, 2, 5], |_, c, y, x| {
            (c * 10 + y * 5 + x) as f64 / 64.0
        });
        let bytes = encode_raw(&t);
        assert_eq!(&bytes[..4], b"ERAF");
        assert_eq!(bytes.len(), 20 + 4 * 30);
        assert_eq!(decode_raw(&bytes).unwrap(), t);
        assert!(decode_raw(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_raw(&bad).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let t = Tensor4::from_fn([1, 3, 4, 3], |_, c, y, x| {
            dequantize((c * 60 + y * 20 + x * 7) as u8)
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_image(&p, &t).unwrap();
        assert_eq!(load_image(&p).unwrap(), t);
        assert_eq!(list_images(dir.path()).unwrap(), vec![p]);
    }
}
