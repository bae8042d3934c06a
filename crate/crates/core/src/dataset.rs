//! Synthetic datasets: generation, on-disk layout (PLY + sidecar JSON +
//! manifest), and the train/val/test split.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DataConfig;
use crate::error::{GsError, Result};
use crate::geometry::{generate_shape, inject_random_defect_in, Category, DefectSpec, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub category: Category,
    pub split: Split,
    pub object_label: bool,
    pub points: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub train_categories: Vec<Category>,
    pub test_categories: Vec<Category>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    /// Errors when any category appears on both sides of the split.
    pub fn check_disjoint(&self) -> Result<()> {
        check_disjoint(&self.train_categories, &self.test_categories)
    }
}

pub fn check_disjoint(train: &[Category], test: &[Category]) -> Result<()> {
    let a: BTreeSet<_> = train.iter().collect();
    let overlap: Vec<&str> = test.iter().filter(|c| a.contains(c)).map(|c| c.as_str()).collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(GsError::Protocol(format!("categories {} are both trained on and evaluated", overlap.join(", "))))
    }
}

/// Per-object sidecar stored next to each PLY file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub category: Category,
    pub object_label: bool,
    /// Anomalous point indices as `[start, length]` runs.
    pub point_labels: Vec<[usize; 2]>,
    pub defect: Option<DefectSpec>,
}

pub fn rle_encode(labels: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] {
            let start = i;
            while i < labels.len() && labels[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

pub fn rle_decode(runs: &[[usize; 2]], n: usize) -> Result<Vec<bool>> {
    let mut labels = vec![false; n];
    for &[start, len] in runs {
        if start + len > n {
            return Err(GsError::Format(format!("label run {start}+{len} exceeds {n} points")));
        }
        labels[start..start + len].iter_mut().for_each(|l| *l = true);
    }
    Ok(labels)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SampleRecord,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

fn object_seed(seed: u64, category: Category, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(category.as_str().as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Whether object `i` of a category is anomalous: spreads `ratio` evenly.
fn is_anomalous(i: usize, ratio: f64) -> bool {
    ((i + 1) as f64 * ratio).floor() > (i as f64 * ratio).floor()
}

impl Dataset {
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Self> {
        check_disjoint(&cfg.train_categories, &cfg.test_categories)?;
        let mut samples = Vec::new();
        let val_every = if cfg.val_fraction > 0.0 { (1.0 / cfg.val_fraction).round().max(2.0) as usize } else { 0 };
        let groups = cfg
            .train_categories
            .iter()
            .map(|c| (*c, cfg.per_category, true))
            .chain(cfg.test_categories.iter().map(|c| (*c, cfg.test_per_category, false)));
        for (category, count, train) in groups {
            for i in 0..count {
                let s = object_seed(seed, category, i);
                let base = generate_shape(category, cfg.points, s)?;
                let cloud = if is_anomalous(i, cfg.anomaly_ratio) { inject_random_defect_in(&base, &cfg.defects, s ^ 0xd3f3c7)? } else { base };
                let split = if !train {
                    Split::Test
                } else if val_every > 0 && i % val_every == val_every - 1 {
                    Split::Val
                } else {
                    Split::Train
                };
                let record = SampleRecord {
                    id: format!("{}-{i:04}", category.as_str()),
                    category,
                    split,
                    object_label: cloud.object_label,
                    points: cloud.len(),
                    seed: s,
                };
                samples.push(Sample { record, cloud });
            }
        }
        let manifest = Manifest {
            seed,
            train_categories: cfg.train_categories.clone(),
            test_categories: cfg.test_categories.clone(),
            samples: samples.iter().map(|s| s.record.clone()).collect(),
        };
        Ok(Dataset { manifest, samples })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.record.split == split).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("objects"))?;
        for s in &self.samples {
            write_ply(&s.cloud, &dir.join("objects").join(format!("{}.ply", s.record.id)))?;
            let side = Sidecar {
                id: s.record.id.clone(),
                category: s.record.category,
                object_label: s.cloud.object_label,
                point_labels: rle_encode(&s.cloud.point_labels),
                defect: s.cloud.defect,
            };
            std::fs::write(dir.join("objects").join(format!("{}.json", s.record.id)), serde_json::to_string_pretty(&side)?)?;
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for r in &manifest.samples {
            let (points, normals) = read_ply(&dir.join("objects").join(format!("{}.ply", r.id)))?;
            let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(dir.join("objects").join(format!("{}.json", r.id)))?)?;
            let point_labels = rle_decode(&side.point_labels, points.len())?;
            let cloud = PointCloud {
                points,
                normals,
                point_labels,
                object_label: side.object_label,
                category: side.category.as_str().to_string(),
                defect: side.defect,
            };
            cloud.validate()?;
            samples.push(Sample { record: r.clone(), cloud });
        }
        Ok(Dataset { manifest, samples })
    }
}

/// ASCII PLY with coordinates, optional normals, and optional per-point scalar quality.
pub fn write_ply_with_quality(cloud: &PointCloud, quality: Option<&[f64]>, path: &Path) -> Result<()> {
    let mut out = String::new();
    let n = cloud.len();
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {n}").unwrap();
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals.is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if quality.is_some() {
        out.push_str("property double quality\n");
    }
    out.push_str("end_header\n");
    for i in 0..n {
        let p = cloud.points[i];
        write!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
        if let Some(nr) = &cloud.normals {
            write!(out, " {} {} {}", nr[i][0], nr[i][1], nr[i][2]).unwrap();
        }
        if let Some(q) = quality {
            write!(out, " {}", q[i]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_ply_with_quality(cloud, None, path)
}

type PlyData = (Vec<[f64; 3]>, Option<Vec<[f64; 3]>>);

/// Reads ASCII PLY vertices (x, y, z and optional nx, ny, nz).
pub fn read_ply(path: &Path) -> Result<PlyData> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: &str| GsError::Format(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut n = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(bad("only ascii PLY is supported")),
            ["element", "vertex", c] => n = Some(c.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let n = n.ok_or_else(|| bad("no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(bad("vertices lack x/y/z")),
    };
    let nc = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut points = Vec::with_capacity(n);
    let mut normals = nc.map(|_| Vec::with_capacity(n));
    for line in lines.take(n) {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad number"))?;
        if v.len() < props.len() {
            return Err(bad("short vertex row"));
        }
        points.push([v[x], v[y], v[z]]);
        if let (Some(ns), Some((a, b, c))) = (normals.as_mut(), nc) {
            ns.push([v[a], v[b], v[c]]);
        }
    }
    if points.len() != n {
        return Err(bad("fewer vertex rows than declared"));
    }
    Ok((points, normals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            train_categories: vec![Category::Sphere, Category::Cube],
            test_categories: vec![Category::Torus],
            per_category: 10,
            test_per_category: 4,
            anomaly_ratio: 0.5,
            points: 256,
            val_fraction: 0.1,
            defects: Default::default(),
        }
    }

    #[test]
    fn rle_round_trip() {
        let l = vec![false, true, true, false, true, false, false, true];
        assert_eq!(rle_encode(&l), vec![[1, 2], [4, 1], [7, 1]]);
        assert_eq!(rle_decode(&rle_encode(&l), l.len()).unwrap(), l);
        assert!(rle_decode(&[[6, 3]], 8).is_err());
    }

    #[test]
    fn splits_and_labels() {
        let d = Dataset::generate(&small(), 3).unwrap();
        assert_eq!(d.split(Split::Test).len(), 4);
        assert_eq!(d.split(Split::Val).len(), 2);
        assert_eq!(d.split(Split::Train).len(), 18);
        assert!(d.split(Split::Test).iter().all(|s| s.record.category == Category::Torus));
        let anomalous = d.samples.iter().filter(|s| s.record.object_label).count();
        assert_eq!(anomalous, 12);
        for s in &d.samples {
            assert_eq!(s.cloud.object_label, s.cloud.point_labels.iter().any(|&l| l));
        }
    }

    #[test]
    fn overlapping_categories_are_a_protocol_violation() {
        let mut c = small();
        c.test_categories.push(Category::Cube);
        let e = Dataset::generate(&c, 0).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn disk_round_trip() {
        let d = Dataset::generate(&small(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            assert_eq!(a.cloud, b.cloud);
        }
    }
}
