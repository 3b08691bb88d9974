//! Synthetic labeled shape clouds and the on-disk dataset layout.
//!
//! A dataset directory holds `train/` and `test/`, each with `index.csv`
//! (`file,label`) and one binary `.pgpc` cloud per row.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{chamfer_distance, Point, PointCloud};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cross => "cross",
        }
    }

    /// A uniform sample from the shape's surface, roughly in `[-1, 1]^3`.
    fn sample_surface(self, rng: &mut impl Rng) -> Point {
        match self {
            ShapeClass::Sphere => {
                let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                v.map(|c| c / n)
            }
            ShapeClass::Cube => {
                let face = rng.random_range(0..6);
                let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            ShapeClass::Cylinder => {
                const R: f64 = 0.6;
                let side = 2.0 * std::f64::consts::PI * R * 2.0;
                let caps = 2.0 * std::f64::consts::PI * R * R;
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                if rng.random_range(0.0..side + caps) < side {
                    [R * theta.cos(), R * theta.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let r = R * rng.random::<f64>().sqrt();
                    let z = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            ShapeClass::Cross => {
                let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if rng.random_bool(0.5) {
                    [0.0, a, b]
                } else {
                    [a, 0.0, b]
                }
            }
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::invalid_arg(format!("unknown shape class `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub classes: Vec<ShapeClass>,
    pub points_per_cloud: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Relative std of the per-point jitter.
    pub jitter: f64,
    /// Per-axis scale is drawn from `[1 - a, 1 + a]`.
    pub anisotropy: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: ShapeClass::ALL.to_vec(),
            points_per_cloud: 512,
            train_per_class: 200,
            test_per_class: 50,
            jitter: 0.005,
            anisotropy: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut c = self.classes.clone();
        c.sort_by_key(|k| k.name());
        c.dedup();
        if c.len() != self.classes.len() {
            return Err(Error::invalid_arg("dataset classes must be distinct"));
        }
        if self.classes.len() < 2 {
            return Err(Error::invalid_arg("a dataset needs at least 2 classes"));
        }
        if self.points_per_cloud == 0 {
            return Err(Error::invalid_arg("points_per_cloud must be positive"));
        }
        if !(0.0..1.0).contains(&self.anisotropy) || !(self.jitter >= 0.0) {
            return Err(Error::invalid_arg("jitter must be >= 0 and anisotropy in [0, 1)"));
        }
        Ok(())
    }

    /// Generates one split; sample `i` has label `i % classes`.
    pub fn generate(&self, split: Split, root_seed: u64) -> Result<Vec<PointCloud>> {
        self.validate()?;
        let per_class = match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        };
        let base = seed::derive_indexed(seed::derive(root_seed, Stream::Data), split as u64);
        let n = per_class * self.classes.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let label = i % self.classes.len();
                let mut rng = seed::rng(seed::derive_indexed(base, i as u64));
                self.generate_one(self.classes[label], label, &mut rng)
            })
            .collect()
    }

    fn generate_one(&self, class: ShapeClass, label: usize, rng: &mut impl Rng) -> Result<PointCloud> {
        let jitter = Normal::new(0.0, self.jitter.max(f64::MIN_POSITIVE)).expect("valid std");
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = angle.sin_cos();
        let a = self.anisotropy;
        let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0 - a..=1.0 + a));
        let mut pts: Vec<Point> = (0..self.points_per_cloud)
            .map(|_| {
                let p = class.sample_surface(rng);
                let p: Point = std::array::from_fn(|k| {
                    let j = if self.jitter > 0.0 { jitter.sample(rng) } else { 0.0 };
                    (p[k] + j) * scale[k]
                });
                [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
            })
            .collect();
        normalize_unit_sphere(&mut pts);
        // store exactly what the binary format can represent
        for p in &mut pts {
            *p = p.map(|v| v as f32 as f64);
        }
        PointCloud::new(pts, Some(label))
    }
}

/// Centers on the centroid and scales the farthest point to radius 1.
pub fn normalize_unit_sphere(pts: &mut [Point]) {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts.iter() {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let mut r: f64 = 0.0;
    for p in pts.iter_mut() {
        for k in 0..3 {
            p[k] -= c[k];
        }
        r = r.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if r > 0.0 {
        for p in pts.iter_mut() {
            *p = p.map(|v| v / r);
        }
    }
}

pub fn write_split(dir: &Path, clouds: &[PointCloud]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("file,label\n");
    for (i, c) in clouds.iter().enumerate() {
        let name = format!("{i:05}.pgpc");
        c.save(&dir.join(&name))?;
        let label = c.label.map(|l| l.to_string()).unwrap_or_default();
        index.push_str(&format!("{name},{label}\n"));
    }
    fs::write(dir.join("index.csv"), index)?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<Vec<PointCloud>> {
    let index = fs::read_to_string(dir.join("index.csv"))?;
    let mut lines = index.lines();
    if lines.next().map(str::trim) != Some("file,label") {
        return Err(Error::format(format!("{}: bad index.csv header", dir.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (file, label) = l
                .split_once(',')
                .ok_or_else(|| Error::format(format!("bad index.csv row `{l}`")))?;
            let label = match label.trim() {
                "" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| Error::format(format!("bad label `{s}`")))?,
                ),
            };
            let mut c = PointCloud::load(&dir.join(file.trim()))?;
            c.label = label;
            Ok(c)
        })
        .collect()
}

/// Writes `train/` and `test/` under `dir` plus `dataset.json` with the spec.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, root_seed: u64) -> Result<(usize, usize)> {
    let train = spec.generate(Split::Train, root_seed)?;
    let test = spec.generate(Split::Test, root_seed)?;
    write_split(&dir.join(Split::Train.dir()), &train)?;
    write_split(&dir.join(Split::Test.dir()), &test)?;
    let meta = serde_json::json!({ "spec": spec, "seed": root_seed });
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok((train.len(), test.len()))
}

pub fn read_dataset_split(dir: &Path, split: Split) -> Result<Vec<PointCloud>> {
    read_split(&dir.join(split.dir()))
}

/// Accuracy of assigning each test cloud to the class whose reference clouds
/// have the smallest mean Chamfer distance to it.
pub fn chamfer_nearest_centroid_accuracy(
    references: &[PointCloud],
    test: &[PointCloud],
    n_classes: usize,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid_arg("empty test set"));
    }
    let correct: usize = test
        .par_iter()
        .map(|t| {
            let mut sum = vec![0.0; n_classes];
            let mut count = vec![0usize; n_classes];
            for r in references {
                if let Some(l) = r.label.filter(|&l| l < n_classes) {
                    sum[l] += chamfer_distance(t.points(), r.points());
                    count[l] += 1;
                }
            }
            let mut best = None;
            for c in 0..n_classes {
                if count[c] > 0 {
                    let m = sum[c] / count[c] as f64;
                    if best.is_none_or(|(_, bm)| m < bm) {
                        best = Some((c, m));
                    }
                }
            }
            (best.map(|b| b.0) == t.label) as usize
        })
        .sum();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            points_per_cloud: 128,
            train_per_class: 5,
            test_per_class: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn splits_are_balanced_and_normalized() {
        let train = small().generate(Split::Train, 1).unwrap();
        assert_eq!(train.len(), 20);
        for c in 0..4 {
            assert_eq!(train.iter().filter(|x| x.label == Some(c)).count(), 5);
        }
        for cloud in &train {
            assert_eq!(cloud.len(), 128);
            let r = cloud
                .points()
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = small().generate(Split::Test, 9).unwrap();
        let b = small().generate(Split::Test, 9).unwrap();
        assert_eq!(a, b);
        let c = small().generate(Split::Test, 10).unwrap();
        assert_ne!(a, c);
        assert_ne!(a, small().generate(Split::Train, 9).unwrap()[..a.len()].to_vec());
    }

    #[test]
    fn one_class_is_rejected() {
        let spec = DatasetSpec {
            classes: vec![ShapeClass::Cube],
            ..small()
        };
        assert!(spec.generate(Split::Train, 0).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (n_train, n_test) = write_dataset(dir.path(), &small(), 3).unwrap();
        assert_eq!((n_train, n_test), (20, 12));
        let back = read_dataset_split(dir.path(), Split::Train).unwrap();
        assert_eq!(back, small().generate(Split::Train, 3).unwrap());
        let first = fs::read(dir.path().join("train/00000.pgpc")).unwrap();
        let again = tempfile::tempdir().unwrap();
        write_dataset(again.path(), &small(), 3).unwrap();
        assert_eq!(first, fs::read(again.path().join("train/00000.pgpc")).unwrap());
    }

    #[test]
    fn classes_separate_under_chamfer() {
        let spec = small();
        let train = spec.generate(Split::Train, 4).unwrap();
        let test = spec.generate(Split::Test, 4).unwrap();
        let acc = chamfer_nearest_centroid_accuracy(&train, &test, 4).unwrap();
        assert!(acc >= 0.7, "accuracy {acc}");
    }
}
