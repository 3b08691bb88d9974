//! Point clouds and their on-disk formats.
//!
//! Binary (`.pgpc`): the 4-byte magic `PGPC`, the point count as a little-endian
//! `u32`, then `count` little-endian `f32` triples `x y z`.
//!
//! Text (`.xyz`/`.txt`): one point per line, three whitespace-separated
//! decimal coordinates. Blank lines and lines starting with `#` are ignored.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub const PGPC_MAGIC: &[u8; 4] = b"PGPC";

/// An unordered set of 3D points, optionally labeled with a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid_arg("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid_arg(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, label })
    }

    #[inline]
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn encode_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.points.len() * 12);
        out.extend_from_slice(PGPC_MAGIC);
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for p in &self.points {
            for c in p {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("PGPC header truncated"));
        }
        if &bytes[..4] != PGPC_MAGIC {
            return Err(Error::format("bad PGPC magic"));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = &bytes[8..];
        if payload.len() != count * 12 {
            return Err(Error::format(format!(
                "PGPC payload holds {} bytes, header promises {} points",
                payload.len(),
                count
            )));
        }
        let points = payload
            .chunks_exact(12)
            .map(|c| {
                let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().unwrap()) as f64;
                [f(0), f(4), f(8)]
            })
            .collect();
        PointCloud::new(points, None)
    }

    pub fn encode_text(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 24);
        for p in &self.points {
            s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        s
    }

    pub fn decode_text<R: Read>(reader: R) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = t
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(Error::format(format!(
                    "line {}: expected 3 coordinates, found {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        PointCloud::new(points, None)
    }

    /// Writes the cloud, choosing the format from the extension (`.pgpc` is
    /// binary, anything else is text).
    pub fn save(&self, path: &Path) -> Result<()> {
        if is_binary_path(path) {
            fs::write(path, self.encode_binary())?;
        } else {
            let mut f = fs::File::create(path)?;
            f.write_all(self.encode_text().as_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if is_binary_path(path) {
            Self::decode_binary(&fs::read(path)?)
        } else {
            Self::decode_text(fs::File::open(path)?)
        }
    }
}

fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgpc"))
}

#[inline]
pub fn dist_sq(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Symmetric Chamfer distance (mean squared nearest-neighbor distance, both
/// directions).
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> f64 {
    fn one_way(a: &[Point], b: &[Point]) -> f64 {
        a.iter()
            .map(|p| b.iter().map(|q| dist_sq(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    }
    one_way(a, b) + one_way(b, a)
}
