//! File I/O: 8-bit PNG images and PFM float maps.
//!
//! Images are scaled to `[0, 1]` on load and quantized back to 8 bits on
//! save. Float maps (disparities, masks) use the binary PFM format:
//! a `Pf` magic line, a `width height` line, a scale line whose sign gives
//! the byte order (negative = little-endian), then `width * height` f32
//! scanlines stored bottom-up. Maps are normalized to top-down row order in
//! memory regardless of the file's scale sign; the scale magnitude is not
//! applied to the values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DisparityMap, OcclusionMask, Tensor3};

/// Loads an 8-bit grayscale or RGB raster image, scaling values to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)?;
    let img = reader
        .decode()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;

    use image::DynamicImage::*;
    let (w, h, channels, bytes): (usize, usize, usize, Vec<u8>) = match img {
        ImageLuma8(b) => (b.width() as usize, b.height() as usize, 1, b.into_raw()),
        ImageLumaA8(b) => {
            let raw = image::DynamicImage::ImageLumaA8(b).to_luma8();
            (raw.width() as usize, raw.height() as usize, 1, raw.into_raw())
        }
        ImageRgb8(b) => (b.width() as usize, b.height() as usize, 3, b.into_raw()),
        ImageRgba8(b) => {
            let raw = image::DynamicImage::ImageRgba8(b).to_rgb8();
            (raw.width() as usize, raw.height() as usize, 3, raw.into_raw())
        }
        other => {
            return Err(Error::format(format!(
                "{}: unsupported bit depth or color type {:?}",
                path.display(),
                other.color()
            )))
        }
    };

    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor3::from_vec(h, w, channels, data)
}

/// Saves a 1- or 3-channel tensor as an 8-bit PNG. Values are clamped to
/// `[0, 1]` and rounded to the nearest of 256 levels.
pub fn save_image(t: &Tensor3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let bytes: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let (h, w) = (t.height() as u32, t.width() as u32);
    let saved = match t.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer sized from tensor")
            .save(path),
        3 => image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer sized from tensor")
            .save(path),
        c => {
            return Err(Error::dimension(format!(
                "save_image requires 1 or 3 channels, got {c}"
            )))
        }
    };
    saved.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::format(other.to_string()),
    })
}

fn read_pfm_token(reader: &mut impl Read) -> Result<String> {
    // Tokens are separated by single whitespace bytes (space, \n, \r, \t).
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte)?;
        if n == 0 {
            if token.is_empty() {
                return Err(Error::parse("unexpected end of PFM header".to_string()));
            }
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
        if token.len() > 32 {
            return Err(Error::parse("oversized PFM header token".to_string()));
        }
    }
    String::from_utf8(token).map_err(|_| Error::parse("non-ascii PFM header".to_string()))
}

/// Raw PFM payload: top-down row-major single-channel f32 data, widened.
fn load_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);

    let magic = read_pfm_token(&mut reader)?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => {
            return Err(Error::format(format!(
                "{}: expected 1-channel PFM (Pf), got 3-channel (PF)",
                path.display()
            )))
        }
        other => {
            return Err(Error::parse(format!(
                "{}: bad PFM magic {other:?}",
                path.display()
            )))
        }
    }

    let width: usize = read_pfm_token(&mut reader)?
        .parse()
        .map_err(|_| Error::parse("bad PFM width".to_string()))?;
    let height: usize = read_pfm_token(&mut reader)?
        .parse()
        .map_err(|_| Error::parse("bad PFM height".to_string()))?;
    let scale: f64 = read_pfm_token(&mut reader)?
        .parse()
        .map_err(|_| Error::parse("bad PFM scale".to_string()))?;
    if width == 0 || height == 0 {
        return Err(Error::parse("zero PFM dimension".to_string()));
    }
    let little_endian = scale < 0.0;

    let mut raw = vec![0u8; width * height * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::parse(format!("{}: truncated PFM payload", path.display())))?;

    // Scanlines are stored bottom-up; flip to top-down.
    let mut values = vec![0.0f64; width * height];
    for file_row in 0..height {
        let mem_row = height - 1 - file_row;
        for x in 0..width {
            let i = (file_row * width + x) * 4;
            let b = [raw[i], raw[i + 1], raw[i + 2], raw[i + 3]];
            let v = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            values[mem_row * width + x] = v as f64;
        }
    }
    Ok((height, width, values))
}

fn save_pfm(height: usize, width: usize, values: &[f64], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "Pf\n{} {}\n-1.0\n", width, height)?;
    for file_row in 0..height {
        let mem_row = height - 1 - file_row;
        for x in 0..width {
            let v = values[mem_row * width + x] as f32;
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a single-channel PFM as a disparity map.
pub fn load_float_map(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let (h, w, values) = load_pfm(path.as_ref())?;
    DisparityMap::from_vec(h, w, values)
}

pub fn save_float_map(d: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    save_pfm(d.height(), d.width(), d.values(), path.as_ref())
}

/// Loads a PFM whose values must be exactly 0.0 or 1.0 as a binary mask.
pub fn load_mask(path: impl AsRef<Path>) -> Result<OcclusionMask> {
    let path = path.as_ref();
    let (h, w, values) = load_pfm(path)?;
    let mut bits = Vec::with_capacity(values.len());
    for v in values {
        if v == 0.0 {
            bits.push(0);
        } else if v == 1.0 {
            bits.push(1);
        } else {
            return Err(Error::format(format!(
                "{}: mask value {v} is not exactly 0 or 1",
                path.display()
            )));
        }
    }
    OcclusionMask::from_vec(h, w, bits)
}

pub fn save_mask(m: &OcclusionMask, path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<f64> = m.values().iter().map(|&v| v as f64).collect();
    save_pfm(m.height(), m.width(), &values, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn load_all_black_image() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("black.png");
        image::GrayImage::from_raw(2, 2, vec![0, 0, 0, 0])
            .unwrap()
            .save(&path)
            .unwrap();
        let t = load_image(&path).unwrap();
        assert_eq!(t.shape(), (2, 2, 1));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_scales_endpoints() {
        let dir = tempdir().unwrap();
        let full = dir.path().join("full.png");
        image::GrayImage::from_raw(1, 1, vec![255])
            .unwrap()
            .save(&full)
            .unwrap();
        assert_eq!(load_image(&full).unwrap().get(0, 0, 0), 1.0);

        let mid = dir.path().join("mid.png");
        image::GrayImage::from_raw(1, 1, vec![128])
            .unwrap()
            .save(&mid)
            .unwrap();
        assert_eq!(load_image(&mid).unwrap().get(0, 0, 0), 128.0 / 255.0);
    }

    #[test]
    fn load_rejects_16_bit() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(1, 1, vec![65535u16])
            .unwrap()
            .save(&path)
            .unwrap();
        match load_image(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn load_missing_file_is_io_error() {
        match load_image("/nonexistent/nowhere.png") {
            Err(Error::Io(_)) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn save_clamps_and_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.png");

        let t = Tensor3::from_vec(1, 3, 1, vec![0.5, 1.7, -0.2]).unwrap();
        save_image(&t, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!((back.get(0, 0, 0) - 0.5).abs() <= 1.0 / 255.0);
        assert_eq!(back.get(0, 1, 0), 1.0);
        assert_eq!(back.get(0, 2, 0), 0.0);
    }

    #[test]
    fn rgb_round_trip_within_one_level() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let t = Tensor3::from_fn(4, 5, 3, |y, x, c| ((y * 31 + x * 7 + c * 3) % 255) as f64 / 255.0);
        save_image(&t, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn pfm_fixture_negative_scale() {
        // Hand-written fixture: 4x4, scale -1.0, all values 2.5.
        let dir = tempdir().unwrap();
        let path = dir.path().join("fix.pfm");
        let mut bytes = b"Pf\n4 4\n-1.0\n".to_vec();
        for _ in 0..16 {
            bytes.extend_from_slice(&2.5f32.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let d = load_float_map(&path).unwrap();
        assert_eq!(d.hw(), (4, 4));
        assert!(d.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn pfm_positive_scale_is_big_endian() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("be.pfm");
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-1.75f32).to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let d = load_float_map(&path).unwrap();
        assert_eq!(d.values(), &[1.5, -1.75]);
    }

    #[test]
    fn pfm_rows_are_flipped_to_top_down() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rows.pfm");
        // File rows bottom-up: first stored row is the bottom row.
        let mut bytes = b"Pf\n1 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_le_bytes()); // bottom
        bytes.extend_from_slice(&0.5f32.to_le_bytes()); // top
        std::fs::write(&path, bytes).unwrap();
        let d = load_float_map(&path).unwrap();
        assert_eq!(d.get(0, 0), 0.5);
        assert_eq!(d.get(1, 0), 0.25);
    }

    #[test]
    fn pfm_three_channel_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c3.pfm");
        std::fs::write(&path, b"PF\n2 2\n-1.0\n").unwrap();
        match load_float_map(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pfm_empty_file_is_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.pfm");
        std::fs::write(&path, b"").unwrap();
        match load_float_map(&path) {
            Err(Error::Parse(_)) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pfm_truncated_payload_is_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.pfm");
        let mut bytes = b"Pf\n4 4\n-1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_float_map(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn float_map_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("exact.pfm");
        // Values that are exactly representable in f32.
        let values: Vec<f64> = (0..12)
            .map(|i| (i as f32 * 0.125 - 0.6875) as f64)
            .collect();
        let d = DisparityMap::from_vec(3, 4, values).unwrap();
        save_float_map(&d, &path).unwrap();
        let back = load_float_map(&path).unwrap();
        for (a, b) in d.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mask_round_trip_and_binary_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.pfm");
        let m = OcclusionMask::from_fn(3, 3, |y, x| (y + x) % 2 == 0);
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);

        // Soft values are rejected.
        let soft = dir.path().join("soft.pfm");
        let d = DisparityMap::from_vec(1, 1, vec![0.25]).unwrap();
        save_float_map(&d, &soft).unwrap();
        assert!(matches!(load_mask(&soft), Err(Error::Format(_))));
    }
}
