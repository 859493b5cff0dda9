//! Binary PGM (P5) rasters plus a JSON sidecar carrying the pixel pitch.
//!
//! Intensity images are written with maxval 65535 (big-endian samples);
//! masks with maxval 255 using 0/255. The sidecar lives next to the raster
//! with a `.json` extension: `{"pixel_pitch_mm": 0.1, "semantics": "image"}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, GrayImage, MaskKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub pixel_pitch_mm: f64,
    pub semantics: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while let Some(&c) = bytes.get(pos) {
                        pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("expected a decimal header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header field out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        offset: pos,
    })
}

/// Raw samples plus maxval.
fn decode_samples(bytes: &[u8]) -> Result<(Header, Vec<u32>)> {
    let header = parse_header(bytes)?;
    let n = header.width * header.height;
    let bps = if header.maxval > 255 { 2 } else { 1 };
    let payload = &bytes[header.offset..];
    if payload.len() < n * bps {
        return Err(Error::Format(format!(
            "pixel payload has {} bytes, expected {}",
            payload.len(),
            n * bps
        )));
    }
    let samples: Vec<u32> = if bps == 2 {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    } else {
        payload[..n].iter().map(|&b| u32::from(b)).collect()
    };
    if samples.iter().any(|&s| s > header.maxval) {
        return Err(Error::Format("sample exceeds maxval".into()));
    }
    Ok((header, samples))
}

/// Decode an in-memory P5 raster into normalized intensities.
pub fn decode_pgm(bytes: &[u8], pixel_pitch: f64) -> Result<GrayImage> {
    let (header, samples) = decode_samples(bytes)?;
    let scale = f64::from(header.maxval);
    let px = samples.iter().map(|&s| f64::from(s) / scale).collect();
    GrayImage::from_pixels(header.width, header.height, px, pixel_pitch)
}

pub fn encode_pgm16(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    out.reserve(img.pixels().len() * 2);
    for &v in img.pixels() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn encode_pgm_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let sc = sidecar_path(path);
    let text = fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("sidecar {}: {e}", sc.display())))
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let sc = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&sc, text).map_err(|e| Error::io(&sc, e))
}

/// Load a P5 image (maxval 255 or 65535) and its pixel-pitch sidecar.
pub fn load_pgm16(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sidecar = read_sidecar(path)?;
    decode_pgm(&bytes, sidecar.pixel_pitch_mm)
}

pub fn save_pgm16(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm16(img)).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            pixel_pitch_mm: img.pixel_pitch(),
            semantics: "image".into(),
        },
    )
}

pub fn save_mask(mask: &BinaryMask, pixel_pitch: f64, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm_mask(mask)).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            pixel_pitch_mm: pixel_pitch,
            semantics: mask.kind().as_str().into(),
        },
    )
}

/// Load a mask; samples above half of maxval are set. The sidecar, when
/// present, supplies the semantics tag (defaults to prediction).
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, samples) = decode_samples(&bytes)?;
    let kind = match read_sidecar(path) {
        Ok(sc) => serde_json::from_value(serde_json::Value::String(sc.semantics))
            .map_err(|e| Error::Format(format!("unknown mask semantics: {e}")))?,
        Err(Error::Io { .. }) => MaskKind::Prediction,
        Err(e) => return Err(e),
    };
    let half = header.maxval / 2;
    let bits = samples.iter().map(|&s| s > half).collect();
    BinaryMask::from_bits(header.width, header.height, bits, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm16(w: usize, h: usize, vals: &[u16]) -> Vec<u8> {
        let mut b = format!("P5\n# comment\n{w} {h}\n65535\n").into_bytes();
        for v in vals {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b
    }

    #[test]
    fn decode_16bit_normalizes() {
        let img = decode_pgm(&pgm16(2, 2, &[0, 65535, 32768, 0]), 0.1).unwrap();
        assert_eq!(img.pixels()[0], 0.0);
        assert_eq!(img.pixels()[1], 1.0);
        assert!((img.pixels()[2] - 32768.0 / 65535.0).abs() < 1e-15);
        assert!((img.pixels()[2] - 0.500_007_6).abs() < 1e-7);
    }

    #[test]
    fn decode_8bit_saturates() {
        let mut b = b"P5 1 1 255\n".to_vec();
        b.push(255);
        assert_eq!(decode_pgm(&b, 0.1).unwrap().pixels(), &[1.0]);
    }

    #[test]
    fn malformed_inputs() {
        let mut truncated = pgm16(2, 2, &[1, 2, 3]);
        assert!(matches!(decode_pgm(&truncated, 0.1), Err(Error::Format(_))));
        truncated.truncate(3);
        assert!(matches!(decode_pgm(&truncated, 0.1), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n0 2\n255\n", 0.1), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0", 0.1), Err(Error::Format(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.pgm");
        let img = GrayImage::filled(5, 3, 0.5, 0.07).unwrap();
        save_pgm16(&img, &p).unwrap();
        let back = load_pgm16(&p).unwrap();
        assert_eq!(back.pixel_pitch(), 0.07);
        assert!(back.pixels().iter().all(|v| (v - 0.5).abs() <= 1.0 / 65535.0));

        let zeros = GrayImage::new(4, 4, 0.1).unwrap();
        save_pgm16(&zeros, &p).unwrap();
        assert!(load_pgm16(&p).unwrap().pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let img = GrayImage::new(2, 2, 0.1).unwrap();
        let err = save_pgm16(&img, Path::new("/nonexistent-dir/x/y.pgm")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn mask_round_trip_keeps_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("weld.pgm");
        let mut m = BinaryMask::new(3, 2, MaskKind::WeldRegion);
        m.set(2, 1, true);
        save_mask(&m, 0.1, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }
}
