//! File formats: binary PGM masks, TOML calibration and configs, CSV tables.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::localization::CameraModel;
use crate::mask::BinaryMask;

/// Parses a binary PGM (P5). Pixels above 127 are foreground. 16-bit
/// payloads (maxval > 255) are read big-endian.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    let err = |offset: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err(0, "expected magic number P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if pos > 2 && k == 0 && !bytes[pos - 1].is_ascii_whitespace() {
            return Err(err(pos, "expected whitespace after magic number"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            let what = ["width", "height", "maxval"][k];
            return Err(err(start, &format!("expected {what}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(start, "header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(pos, "image dimensions must be positive"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos, "maxval must be in 1..=65535"));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(pos, "expected single whitespace before raster"));
    }
    pos += 1;

    let depth = if maxval > 255 { 2 } else { 1 };
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(depth))
        .ok_or_else(|| err(pos, "image too large"))?;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| err(bytes.len(), &format!("truncated raster: expected {n} bytes")))?;
    let bits = if depth == 1 {
        raster.iter().map(|&v| v > 127).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) > 127)
            .collect()
    };
    BinaryMask::from_bits(width, height, bits)
}

/// Serializes a mask as 8-bit P5 with values 0 and 255.
pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_pgm(mask))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Deserializes a TOML file, reporting the offending key on failure.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| Error::file(path, e.message()))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::file(path, e))?;
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::file(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::file(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Calibration file contents. Matrices are row-major; `T` is in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct CalibrationFile {
    pub K: [f64; 9],
    pub R: [f64; 9],
    pub T: [f64; 3],
    pub image_width: usize,
    pub image_height: usize,
}

impl CalibrationFile {
    pub fn from_camera(cam: &CameraModel, image_width: usize, image_height: usize) -> Self {
        let rows = |m: &Mat3| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[3 * r + c] = m[(r, c)];
                }
            }
            out
        };
        let t = cam.translation();
        Self {
            K: rows(cam.intrinsics()),
            R: rows(cam.rotation()),
            T: [t.x, t.y, t.z],
            image_width,
            image_height,
        }
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::new(
            Mat3::from_row_slice(&self.K),
            Mat3::from_row_slice(&self.R),
            Vec3::from_row_slice(&self.T),
        )
    }
}

/// Loads a calibration and checks it against the camera model invariants.
pub fn read_calibration(path: &Path) -> Result<(CalibrationFile, CameraModel)> {
    let calib: CalibrationFile = read_toml(path)?;
    let cam = calib.camera().map_err(|e| Error::file(path, e))?;
    if calib.image_width == 0 || calib.image_height == 0 {
        return Err(Error::file(path, "image_width and image_height must be positive"));
    }
    Ok((calib, cam))
}

/// Reads the `length_mm` column of a CSV. When a `frame` column is present
/// only rows whose frame is `clip` are used, so estimate-clip outputs can be
/// concatenated into one file per fish population.
pub fn read_length_column(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    let headers = reader.headers().map_err(|e| Error::file(path, e))?.clone();
    let col = headers
        .iter()
        .position(|h| h == "length_mm")
        .ok_or_else(|| Error::file(path, "missing column `length_mm`"))?;
    let frame_col = headers.iter().position(|h| h == "frame");
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::file(path, e))?;
        if let Some(fc) = frame_col {
            if record.get(fc) != Some("clip") {
                continue;
            }
        }
        let cell = record.get(col).unwrap_or("");
        let v: f64 = cell.trim().parse().map_err(|_| {
            Error::file(path, format!("row {}: `{cell}` is not a length", i + 1))
        })?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::file(path, "no length rows"));
    }
    Ok(out)
}

/// Writes rows of string cells under `header`.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::file(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::file(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::file(path, e.error()))?;
    write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.pgm")
    }

    #[test]
    fn pgm_round_trip() {
        let m = BinaryMask::from_fn(7, 5, |x, y| (x * 3 + y) % 4 == 0).unwrap();
        assert_eq!(parse_pgm(&encode_pgm(&m), p()).unwrap(), m);
    }

    #[test]
    fn all_white_pgm_is_all_foreground() {
        let mut bytes = b"P5\n# comment\n4 3\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let m = parse_pgm(&bytes, p()).unwrap();
        assert_eq!(m.count(), 12);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let mut bytes = b"P5 4 3 255\n".to_vec();
        bytes.extend([0u8; 11]);
        match parse_pgm(&bytes, p()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_reports_offset() {
        match parse_pgm(b"P6 1 1 255\n\0", p()) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_pgm(b"P5 4 x 255\n", p()) {
            Err(Error::Parse { offset: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sixteen_bit_pgm() {
        let mut bytes = b"P5 2 1 65535\n".to_vec();
        bytes.extend([0x00, 0x80, 0x00, 0x7f]);
        let m = parse_pgm(&bytes, p()).unwrap();
        assert!(m.get(0, 0) && !m.get(1, 0));
    }

    #[test]
    fn calibration_missing_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.toml");
        fs::write(
            &path,
            "K = [1.0, 0, 0, 0, 1, 0, 0, 0, 1]\nT = [0.0, 0.0, 5000.0]\nimage_width = 10\nimage_height = 10\n",
        )
        .unwrap();
        let err = read_calibration(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("`R`"), "{err}");
    }
}
