//! Reflectance bitmap standing in for the sample under the probe.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stage::StagePose;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read scene file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid PGM data: {0}")]
    Format(String),
    #[error("scene dimensions must be positive")]
    Empty,
}

/// Grayscale scene. Pixel `(col, row)` is centred at
/// `origin + (col * pitch, row * pitch)` in stage micrometers; row 0 is the
/// lowest y. Lookup is nearest-neighbour, and anything off the bitmap reads
/// as black.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    width: usize,
    height: usize,
    reflectance: Vec<f64>,
    pub origin: StagePose,
    pub pitch_um: f64,
}

impl Scene {
    /// Builds a scene from row-major values (row 0 = bottom). Values are
    /// clamped into [0, 1]; NaN becomes 0.
    pub fn from_rows(width: usize, height: usize, values: Vec<f64>, pitch_um: f64) -> Result<Self, SceneError> {
        if width == 0 || height == 0 {
            return Err(SceneError::Empty);
        }
        if values.len() != width * height {
            return Err(SceneError::Format(format!(
                "expected {} values, got {}",
                width * height,
                values.len()
            )));
        }
        let reflectance = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(Self { width, height, reflectance, origin: StagePose::default(), pitch_um })
    }

    pub fn uniform(width: usize, height: usize, value: f64, pitch_um: f64) -> Self {
        Self::from_rows(width, height, vec![value; width * height], pitch_um).expect("non-empty")
    }

    /// Alternating 1/0 cells, starting with 1 at (0, 0).
    pub fn checkerboard(width: usize, height: usize, pitch_um: f64) -> Self {
        let values = (0..height)
            .flat_map(|r| (0..width).map(move |c| if (r + c) % 2 == 0 { 1.0 } else { 0.0 }))
            .collect();
        Self::from_rows(width, height, values, pitch_um).expect("non-empty")
    }

    /// High-contrast synthetic logo: a ring and a block letter in bright
    /// foil on a dark backing.
    pub fn logo(width: usize, height: usize, pitch_um: f64) -> Self {
        const FOIL: f64 = 0.95;
        const BACKING: f64 = 0.05;
        let (w, h) = (width as f64, height as f64);
        let values = (0..height)
            .flat_map(|r| {
                (0..width).map(move |c| {
                    // normalised coordinates in [0, 1), y up
                    let u = (c as f64 + 0.5) / w;
                    let v = (r as f64 + 0.5) / h;
                    let d = ((u - 0.32).powi(2) + (v - 0.5).powi(2)).sqrt();
                    let ring = (0.14..=0.26).contains(&d);
                    // block "D": vertical bar plus a bowl
                    let bar = (0.62..=0.70).contains(&u) && (0.2..=0.8).contains(&v);
                    let bowl_d = ((u - 0.70).powi(2) + (v - 0.5).powi(2)).sqrt();
                    let bowl = u >= 0.70 && (0.22..=0.30).contains(&bowl_d);
                    if ring || bar || bowl {
                        FOIL
                    } else {
                        BACKING
                    }
                })
            })
            .collect();
        Self::from_rows(width, height, values, pitch_um).expect("non-empty")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn value(&self, col: usize, row: usize) -> f64 {
        self.reflectance[row * self.width + col]
    }

    /// Reflectance seen by a probe at `pose`.
    pub fn reflectance_at(&self, pose: StagePose) -> f64 {
        let col = ((pose.x - self.origin.x) / self.pitch_um).round();
        let row = ((pose.y - self.origin.y) / self.pitch_um).round();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return 0.0;
        }
        self.value(col as usize, row as usize)
    }

    /// Loads a P2 or P5 graymap. The first image row in the file is the top
    /// of the sample (highest y).
    pub fn load_pgm(path: &Path, pitch_um: f64) -> Result<Self, SceneError> {
        let bytes = std::fs::read(path).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_pgm(&bytes, pitch_um)
    }

    pub fn parse_pgm(bytes: &[u8], pitch_um: f64) -> Result<Self, SceneError> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos).ok_or_else(|| SceneError::Format("missing magic".into()))?;
        let binary = match magic.as_str() {
            "P2" => false,
            "P5" => true,
            other => return Err(SceneError::Format(format!("unsupported magic {other}"))),
        };
        let mut header = [0usize; 3];
        for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
            *slot = next_token(bytes, &mut pos)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| SceneError::Format(format!("bad {name}")))?;
        }
        let [width, height, maxval] = header;
        if width == 0 || height == 0 {
            return Err(SceneError::Empty);
        }
        if maxval == 0 || maxval > 65535 {
            return Err(SceneError::Format(format!("bad maxval {maxval}")));
        }
        let n = width * height;
        let samples: Vec<usize> = if binary {
            pos += 1; // single whitespace after maxval
            let wide = maxval > 255;
            let need = if wide { 2 * n } else { n };
            let data = bytes
                .get(pos..pos + need)
                .ok_or_else(|| SceneError::Format("truncated raster".into()))?;
            if wide {
                data.chunks(2).map(|b| (b[0] as usize) << 8 | b[1] as usize).collect()
            } else {
                data.iter().map(|&b| b as usize).collect()
            }
        } else {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let t = next_token(bytes, &mut pos).ok_or_else(|| SceneError::Format("truncated raster".into()))?;
                out.push(t.parse().map_err(|_| SceneError::Format(format!("bad sample {t}")))?);
            }
            out
        };
        if samples.iter().any(|&s| s > maxval) {
            return Err(SceneError::Format("sample exceeds maxval".into()));
        }
        // flip: file row 0 is the top
        let values = (0..height)
            .rev()
            .flat_map(|r| samples[r * width..(r + 1) * width].iter().map(|&s| s as f64 / maxval as f64))
            .collect();
        Self::from_rows(width, height, values, pitch_um)
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbour_lookup() {
        let s = Scene::checkerboard(2, 2, 100.0);
        assert_eq!(s.reflectance_at(StagePose::new(0.0, 0.0)), 1.0);
        assert_eq!(s.reflectance_at(StagePose::new(100.0, 0.0)), 0.0);
        assert_eq!(s.reflectance_at(StagePose::new(100.0, 100.0)), 1.0);
        assert_eq!(s.reflectance_at(StagePose::new(40.0, 149.0)), 0.0);
        assert_eq!(s.reflectance_at(StagePose::new(300.0, 0.0)), 0.0);
    }

    #[test]
    fn values_are_clamped() {
        let s = Scene::from_rows(2, 1, vec![-1.0, 3.0], 1.0).unwrap();
        assert_eq!((s.value(0, 0), s.value(1, 0)), (0.0, 1.0));
    }

    #[test]
    fn pgm_flip() {
        let s = Scene::parse_pgm(b"P2\n# test\n2 2\n4\n4 0\n0 2\n", 10.0).unwrap();
        // bottom row of the sample is the last file row
        assert_eq!(s.value(0, 0), 0.0);
        assert_eq!(s.value(1, 0), 0.5);
        assert_eq!(s.value(0, 1), 1.0);
        let bin = Scene::parse_pgm(b"P5 2 1 255\n\xff\x00", 1.0).unwrap();
        assert_eq!((bin.value(0, 0), bin.value(1, 0)), (1.0, 0.0));
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(Scene::parse_pgm(b"P3 1 1 255 0 0 0", 1.0).is_err());
        assert!(Scene::parse_pgm(b"P2 2 2 255 1 2 3", 1.0).is_err());
        assert!(Scene::parse_pgm(b"P2 0 2 255", 1.0).is_err());
        assert!(Scene::parse_pgm(b"P2 1 1 10 11", 1.0).is_err());
    }

    #[test]
    fn logo_has_contrast() {
        let s = Scene::logo(32, 32, 100.0);
        let bright = s.reflectance.iter().filter(|&&v| v > 0.5).count();
        assert!(bright > 50 && bright < 32 * 32 / 2, "{bright}");
    }
}
