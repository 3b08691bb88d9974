//! Synthetic test-time distribution shifts.
//!
//! These are desk-scale analogues of the usual point-cloud corruption families,
//! not a reimplementation of any external benchmark generator. Magnitudes scale
//! linearly with a severity in `1..=5`; the full table is available at runtime
//! through [`describe`].

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::seed;
use crate::tokenizer::knn_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    None,
    Uniform,
    Gaussian,
    Background,
    Impulse,
    Upsampling,
    DensityDec,
    DensityInc,
    Cutout,
    Rotation,
    Shear,
    Distortion,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 12] = [
        CorruptionKind::None,
        CorruptionKind::Uniform,
        CorruptionKind::Gaussian,
        CorruptionKind::Background,
        CorruptionKind::Impulse,
        CorruptionKind::Upsampling,
        CorruptionKind::DensityDec,
        CorruptionKind::DensityInc,
        CorruptionKind::Cutout,
        CorruptionKind::Rotation,
        CorruptionKind::Shear,
        CorruptionKind::Distortion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::Uniform => "uniform",
            CorruptionKind::Gaussian => "gaussian",
            CorruptionKind::Background => "background",
            CorruptionKind::Impulse => "impulse",
            CorruptionKind::Upsampling => "upsampling",
            CorruptionKind::DensityDec => "density_dec",
            CorruptionKind::DensityInc => "density_inc",
            CorruptionKind::Cutout => "cutout",
            CorruptionKind::Rotation => "rotation",
            CorruptionKind::Shear => "shear",
            CorruptionKind::Distortion => "distortion",
        }
    }

    pub fn family(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::Uniform
            | CorruptionKind::Gaussian
            | CorruptionKind::Impulse
            | CorruptionKind::Background
            | CorruptionKind::Upsampling => "noise",
            CorruptionKind::DensityDec | CorruptionKind::DensityInc | CorruptionKind::Cutout => {
                "density"
            }
            CorruptionKind::Rotation | CorruptionKind::Shear | CorruptionKind::Distortion => {
                "transformation"
            }
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid_arg(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub rng_seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, rng_seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            severity,
            rng_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        Self {
            kind: CorruptionKind::None,
            severity: 1,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::invalid_arg(format!(
                "severity {} outside 1..=5",
                self.severity
            )));
        }
        Ok(())
    }

    /// The same corruption with a seed specialised to one sample of a stream.
    pub fn for_sample(&self, index: usize) -> Self {
        Self {
            rng_seed: seed::derive_indexed(self.rng_seed, index as u64),
            ..*self
        }
    }
}

/// Corrupts every cloud of a stream, sample `i` with `spec.for_sample(i)`.
pub fn corrupt_stream(dataset: &[PointCloud], spec: &CorruptionSpec) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, c)| apply_corruption(c, &spec.for_sample(i)))
        .collect()
}

pub fn apply_corruption(cloud: &PointCloud, spec: &CorruptionSpec) -> Result<PointCloud> {
    spec.validate()?;
    if spec.kind == CorruptionKind::None {
        return Ok(cloud.clone());
    }
    let s = spec.severity as f64;
    let sev = spec.severity as usize;
    let mut rng = seed::rng(spec.rng_seed);
    let pts = cloud.points();
    let n = pts.len();

    let out: Vec<Point> = match spec.kind {
        CorruptionKind::None => unreachable!(),
        CorruptionKind::Uniform => {
            let a = 0.02 * s;
            pts.iter()
                .map(|p| p.map(|c| c + rng.random_range(-a..=a)))
                .collect()
        }
        CorruptionKind::Gaussian => {
            let normal = Normal::new(0.0, 0.01 * s).expect("positive std");
            pts.iter()
                .map(|p| p.map(|c| c + normal.sample(&mut rng)))
                .collect()
        }
        CorruptionKind::Impulse => {
            let m = ceil_count(n, 5, sev).min(n);
            let mut out = pts.to_vec();
            for i in sample(&mut rng, n, m) {
                for c in out[i].iter_mut() {
                    *c += if rng.random_bool(0.5) { 0.1 } else { -0.1 };
                }
            }
            out
        }
        CorruptionKind::Background => {
            let (lo, hi) = cloud.bounding_box();
            let mut out = pts.to_vec();
            for _ in 0..(8 * spec.severity as usize) {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    let mid = 0.5 * (lo[a] + hi[a]);
                    let half = 0.5 * (hi[a] - lo[a]) * 1.1;
                    p[a] = if half > 0.0 {
                        rng.random_range(mid - half..=mid + half)
                    } else {
                        mid
                    };
                }
                out.push(p);
            }
            out
        }
        CorruptionKind::Upsampling => {
            let m = ceil_count(n, 10, sev).min(n);
            let jitter = Normal::new(0.0, 0.01).expect("positive std");
            let mut out = pts.to_vec();
            for i in sample(&mut rng, n, m) {
                out.push(pts[i].map(|c| c + jitter.sample(&mut rng)));
            }
            out
        }
        CorruptionKind::DensityDec => {
            // never drop the whole cloud
            let m = ceil_count(n, 6, sev).min(n - 1);
            let center = pts[rng.random_range(0..n)];
            let drop = knn_indices(pts, &center, m);
            remove_indices(pts, &drop)
        }
        CorruptionKind::DensityInc => {
            let m = ceil_count(n, 6, sev).min(n);
            let jitter = Normal::new(0.0, 0.01).expect("positive std");
            let center = pts[rng.random_range(0..n)];
            let mut out = pts.to_vec();
            for i in knn_indices(pts, &center, m) {
                out.push(pts[i].map(|c| c + jitter.sample(&mut rng)));
            }
            out
        }
        CorruptionKind::Cutout => {
            let mut out = pts.to_vec();
            for _ in 0..spec.severity {
                if out.len() <= 1 {
                    break;
                }
                let m = 16.min(out.len() - 1);
                let center = out[rng.random_range(0..out.len())];
                let drop = knn_indices(&out, &center, m);
                out = remove_indices(&out, &drop);
            }
            out
        }
        CorruptionKind::Rotation => {
            let axis = random_unit(&mut rng);
            let r = rotation_matrix(axis, (s * 7.5).to_radians());
            pts.iter().map(|p| mat3_apply(&r, p)).collect()
        }
        CorruptionKind::Shear => {
            let a = 0.05 * s;
            let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            for (i, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    if i != j {
                        *v = rng.random_range(-a..=a);
                    }
                }
            }
            pts.iter().map(|p| mat3_apply(&m, p)).collect()
        }
        CorruptionKind::Distortion => {
            const KERNELS: usize = 5;
            const WIDTH: f64 = 0.2;
            let amp = 0.05 * s;
            let kernels: Vec<(Point, Point)> = (0..KERNELS)
                .map(|_| {
                    let c = pts[rng.random_range(0..n)];
                    let dir = random_unit(&mut rng);
                    (c, dir.map(|v| v * amp))
                })
                .collect();
            pts.iter()
                .map(|p| {
                    let mut q = *p;
                    for (c, disp) in &kernels {
                        let w = (-crate::cloud::dist_sq(p, c) / (2.0 * WIDTH * WIDTH)).exp();
                        for a in 0..3 {
                            q[a] += w * disp[a];
                        }
                    }
                    q
                })
                .collect()
        }
    };
    PointCloud::new(out, cloud.label)
}

/// `ceil(percent/100 * severity * n)` in exact integer arithmetic.
fn ceil_count(n: usize, percent: usize, severity: usize) -> usize {
    (n * percent * severity).div_ceil(100)
}

fn remove_indices(pts: &[Point], drop: &[usize]) -> Vec<Point> {
    let mut keep = vec![true; pts.len()];
    for &i in drop {
        keep[i] = false;
    }
    pts.iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect()
}

fn random_unit<R: Rng>(rng: &mut R) -> Point {
    loop {
        let v: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

/// Rodrigues rotation about a unit axis.
pub fn rotation_matrix(axis: Point, angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn mat3_apply(m: &[[f64; 3]; 3], p: &Point) -> Point {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionDescription {
    pub kind: CorruptionKind,
    pub family: String,
    pub transform: String,
    pub point_count: String,
}

/// The corruption table, as emitted by `purge-gate corruptions --describe`.
pub fn describe() -> Vec<CorruptionDescription> {
    use CorruptionKind::*;
    let row = |kind: CorruptionKind, transform: &str, count: &str| CorruptionDescription {
        kind,
        family: kind.family().to_string(),
        transform: transform.to_string(),
        point_count: count.to_string(),
    };
    vec![
        row(None, "identity", "N"),
        row(Uniform, "add U(-0.02*s, 0.02*s) to every coordinate", "N"),
        row(Gaussian, "add N(0, (0.01*s)^2) to every coordinate", "N"),
        row(
            Impulse,
            "displace a random subset of ceil(0.05*s*N) points by +-0.1 per axis",
            "N",
        ),
        row(
            Background,
            "append 8*s points uniform in the bounding box scaled by 1.1 about its center",
            "N + 8*s",
        ),
        row(
            Upsampling,
            "duplicate ceil(0.1*s*N) random points with N(0, 0.01^2) jitter",
            "N + ceil(0.1*s*N)",
        ),
        row(
            DensityDec,
            "drop the ceil(0.06*s*N) nearest neighbors of a random point",
            "N - ceil(0.06*s*N)",
        ),
        row(
            DensityInc,
            "duplicate the ceil(0.06*s*N) nearest neighbors of a random point with N(0, 0.01^2) jitter",
            "N + ceil(0.06*s*N)",
        ),
        row(
            Cutout,
            "remove s patches of the 16 nearest neighbors of a random remaining point",
            "N - 16*s",
        ),
        row(
            Rotation,
            "rotate by s*7.5 degrees about a uniformly random axis",
            "N",
        ),
        row(
            Shear,
            "multiply by I + off-diagonal entries drawn from U(-0.05*s, 0.05*s)",
            "N",
        ),
        row(
            Distortion,
            "add 5 Gaussian RBF displacement kernels (width 0.2, amplitude 0.05*s, centers on random points)",
            "N",
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{chamfer_distance, dist_sq};

    fn sphere(n: usize, seed_: u64) -> PointCloud {
        let mut rng = seed::rng(seed_);
        let pts = (0..n).map(|_| random_unit(&mut rng)).collect();
        PointCloud::new(pts, Some(2)).unwrap()
    }

    #[test]
    fn none_is_identity() {
        let c = sphere(100, 1);
        assert_eq!(apply_corruption(&c, &CorruptionSpec::none()).unwrap(), c);
    }

    #[test]
    fn severity_out_of_range_is_rejected() {
        assert!(CorruptionSpec::new(CorruptionKind::Gaussian, 0, 1).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Gaussian, 6, 1).is_err());
        let bad = CorruptionSpec {
            kind: CorruptionKind::Uniform,
            severity: 9,
            rng_seed: 0,
        };
        assert!(apply_corruption(&sphere(10, 1), &bad).is_err());
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let c = sphere(64, 2);
        for sev in 1..=5 {
            let r = apply_corruption(&c, &CorruptionSpec::new(CorruptionKind::Rotation, sev, 11).unwrap())
                .unwrap();
            for i in 0..64 {
                for j in (i + 1)..64 {
                    let a = dist_sq(&c.points()[i], &c.points()[j]).sqrt();
                    let b = dist_sq(&r.points()[i], &r.points()[j]).sqrt();
                    assert!((a - b).abs() <= 1e-5 * a.max(1e-12));
                }
            }
        }
    }

    #[test]
    fn background_appends_points_in_scaled_box() {
        let c = sphere(512, 3);
        let out =
            apply_corruption(&c, &CorruptionSpec::new(CorruptionKind::Background, 3, 5).unwrap())
                .unwrap();
        assert_eq!(out.len(), 512 + 24);
        assert_eq!(&out.points()[..512], c.points());
        let (lo, hi) = c.bounding_box();
        for p in &out.points()[512..] {
            for a in 0..3 {
                let mid = 0.5 * (lo[a] + hi[a]);
                let half = 0.55 * (hi[a] - lo[a]);
                assert!(p[a] >= mid - half - 1e-12 && p[a] <= mid + half + 1e-12);
            }
        }
    }

    #[test]
    fn point_counts_follow_the_table() {
        let c = sphere(200, 4);
        for kind in CorruptionKind::ALL {
            for sev in 1..=5u8 {
                let out = apply_corruption(&c, &CorruptionSpec::new(kind, sev, 7).unwrap()).unwrap();
                let expect = match kind {
                    CorruptionKind::Background => 200 + 8 * sev as usize,
                    CorruptionKind::Upsampling => 200 + (200 * 10 * sev as usize).div_ceil(100),
                    CorruptionKind::DensityDec => 200 - (200 * 6 * sev as usize).div_ceil(100),
                    CorruptionKind::DensityInc => 200 + (200 * 6 * sev as usize).div_ceil(100),
                    CorruptionKind::Cutout => 200 - 16 * sev as usize,
                    _ => 200,
                };
                assert_eq!(out.len(), expect, "{kind} severity {sev}");
                assert_eq!(out.label, Some(2));
            }
        }
    }

    #[test]
    fn same_spec_is_bit_identical() {
        let c = sphere(128, 5);
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 4, 99).unwrap();
            assert_eq!(
                apply_corruption(&c, &spec).unwrap(),
                apply_corruption(&c, &spec).unwrap()
            );
        }
    }

    #[test]
    fn chamfer_grows_with_severity() {
        let c = sphere(256, 6);
        for kind in CorruptionKind::ALL.into_iter().filter(|k| *k != CorruptionKind::None) {
            let mut prev = 0.0;
            for sev in 1..=5u8 {
                let mean = (0..20u64)
                    .map(|seed_| {
                        let out =
                            apply_corruption(&c, &CorruptionSpec::new(kind, sev, seed_).unwrap())
                                .unwrap();
                        chamfer_distance(c.points(), out.points())
                    })
                    .sum::<f64>()
                    / 20.0;
                assert!(mean >= prev, "{kind}: severity {sev} chamfer {mean} < {prev}");
                prev = mean;
            }
        }
    }

    #[test]
    fn kind_names_parse_back() {
        for kind in CorruptionKind::ALL {
            assert_eq!(kind.name().parse::<CorruptionKind>().unwrap(), kind);
        }
        assert_eq!("density-dec".parse::<CorruptionKind>().unwrap(), CorruptionKind::DensityDec);
        assert!("lidar".parse::<CorruptionKind>().is_err());
        assert_eq!(describe().len(), CorruptionKind::ALL.len());
    }
}
