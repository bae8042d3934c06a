//! Point clouds, synthetic primitive shapes, and geometric defect injection.
//!
//! Every generated object is sampled on the surface of an analytic primitive,
//! placed in a fixed canonical pose and scaled so that its farthest point lies
//! on the unit sphere. Defects are injected afterwards without renormalizing,
//! so points away from the defect keep their exact coordinates.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};
use crate::neighbors::{dist2, knn};

pub const MIN_POINTS: usize = 256;

/// Primitive object classes standing in for dataset categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    RoundedPrism,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Sphere,
        Category::Cube,
        Category::Cylinder,
        Category::Torus,
        Category::RoundedPrism,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Sphere => "sphere",
            Category::Cube => "cube",
            Category::Cylinder => "cylinder",
            Category::Torus => "torus",
            Category::RoundedPrism => "rounded-prism",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = GsError;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| GsError::config(format!("unknown category `{s}`")))
    }
}

/// A labeled point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Outward unit normals, when known analytically.
    pub normals: Option<Vec<[f64; 3]>>,
    pub point_labels: Vec<bool>,
    pub object_label: bool,
    pub category: String,
    pub defect: Option<DefectSpec>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn anomalous_count(&self) -> usize {
        self.point_labels.iter().filter(|&&l| l).count()
    }

    /// Checks the structural invariants every cloud must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.point_labels.len() {
            return Err(GsError::config("point/label count mismatch"));
        }
        if let Some(n) = &self.normals {
            if n.len() != self.points.len() {
                return Err(GsError::config("point/normal count mismatch"));
            }
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(GsError::Scoring("non-finite coordinate".into()));
        }
        if self.object_label != self.point_labels.iter().any(|&l| l) {
            return Err(GsError::config("object label disagrees with point labels"));
        }
        Ok(())
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| norm(p)).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    Dent,
    Bump,
    Crack,
    MissingRegion,
}

impl DefectKind {
    pub const ALL: [DefectKind; 4] =
        [DefectKind::Dent, DefectKind::Bump, DefectKind::Crack, DefectKind::MissingRegion];
}

/// Parameters of one injected surface defect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub kind: DefectKind,
    /// Direction from the origin towards the defect; need not be unit length.
    pub center: [f64; 3],
    /// Region radius as a fraction of the (unit) object scale, in (0, 0.5].
    pub radius: f64,
    /// Peak displacement as a fraction of object scale, in (0, 0.3].
    pub magnitude: f64,
}

impl DefectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius <= 0.5) {
            return Err(GsError::config(format!("defect radius {} outside (0, 0.5]", self.radius)));
        }
        if !(self.magnitude > 0.0 && self.magnitude <= 0.3) {
            return Err(GsError::config(format!(
                "defect magnitude {} outside (0, 0.3]",
                self.magnitude
            )));
        }
        if !(norm(&self.center) > 1e-12) || self.center.iter().any(|c| !c.is_finite()) {
            return Err(GsError::config("defect center must be a nonzero direction"));
        }
        Ok(())
    }

    /// Draws a random defect with parameters in the default generation ranges.
    pub fn random(rng: &mut impl Rng) -> Self {
        Self::random_in(rng, &DefectRanges::default())
    }

    pub fn random_in(rng: &mut impl Rng, ranges: &DefectRanges) -> Self {
        let kind = DefectKind::ALL[rng.gen_range(0..DefectKind::ALL.len())];
        let center = random_unit(rng);
        let radius = rng.gen_range(ranges.radius[0]..=ranges.radius[1]);
        let magnitude = rng.gen_range(ranges.magnitude[0]..=ranges.magnitude[1]);
        DefectSpec { kind, center, radius, magnitude }
    }
}

/// Sampling ranges `[lo, hi]` for random defects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefectRanges {
    pub radius: [f64; 2],
    pub magnitude: [f64; 2],
}

impl Default for DefectRanges {
    fn default() -> Self {
        DefectRanges { radius: [0.18, 0.3], magnitude: [0.08, 0.16] }
    }
}

impl DefectRanges {
    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.radius;
        let [m0, m1] = self.magnitude;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 0.5) || !(m0 > 0.0 && m0 <= m1 && m1 <= 0.3) {
            return Err(GsError::config("defect ranges must satisfy 0 < lo <= hi with radius <= 0.5 and magnitude <= 0.3"));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
fn scale(v: &[f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn unit(v: &[f64; 3]) -> [f64; 3] {
    let n = norm(v);
    if n > 0.0 {
        scale(v, 1.0 / n)
    } else {
        [0.0, 0.0, 1.0]
    }
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ];
        let n = norm(&v);
        if n > 1e-9 {
            return scale(&v, 1.0 / n);
        }
    }
}

/// Fixed pose applied to every primitive so that no flat face or cylinder
/// side is seen exactly edge-on by all cameras of the X-axis view schedule.
fn canonical_pose() -> Matrix3<f64> {
    let (ay, az) = (35f64.to_radians(), 25f64.to_radians());
    let ry = Matrix3::new(ay.cos(), 0.0, ay.sin(), 0.0, 1.0, 0.0, -ay.sin(), 0.0, ay.cos());
    let rz = Matrix3::new(az.cos(), -az.sin(), 0.0, az.sin(), az.cos(), 0.0, 0.0, 0.0, 1.0);
    ry * rz
}

/// Oversampling factor for blue-noise thinning of surface samples.
const CANDIDATES: usize = 4;

/// Greedy farthest-point selection of `n` indices, starting at index 0.
pub fn farthest_point_order(points: &[[f64; 3]], n: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(n.min(points.len()));
    if points.is_empty() {
        return order;
    }
    let mut best = vec![f64::INFINITY; points.len()];
    let mut cur = 0;
    while order.len() < n.min(points.len()) {
        order.push(cur);
        let c = points[cur];
        let mut next = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far {
                far = best[i];
                next = i;
            }
        }
        cur = next;
    }
    order
}

/// Samples `n` points evenly over the surface of a primitive: uniform
/// candidates are thinned by farthest-point selection so spacing is regular.
///
/// The result is centered on the primitive's own center, posed, and scaled so
/// that the largest point norm is exactly 1. All labels are normal.
pub fn generate_shape(category: Category, n: usize, seed: u64) -> Result<PointCloud> {
    if n < MIN_POINTS {
        return Err(GsError::config(format!("need at least {MIN_POINTS} points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ba9e);
    let mut points = Vec::with_capacity(CANDIDATES * n);
    let mut normals = Vec::with_capacity(CANDIDATES * n);
    for _ in 0..CANDIDATES * n {
        let (p, nrm) = match category {
            Category::Sphere => {
                let u = random_unit(&mut rng);
                (u, u)
            }
            Category::Cube => sample_box(&mut rng, [1.0, 1.0, 1.0], 0.0),
            Category::Cylinder => sample_cylinder(&mut rng, 0.5, 0.8),
            Category::Torus => sample_torus(&mut rng, 0.7, 0.3),
            Category::RoundedPrism => sample_box(&mut rng, [0.7, 0.45, 0.3], 0.2),
        };
        points.push(p);
        normals.push(nrm);
    }
    let keep = farthest_point_order(&points, n);
    let mut points: Vec<[f64; 3]> = keep.iter().map(|&i| points[i]).collect();
    let mut normals: Vec<[f64; 3]> = keep.iter().map(|&i| normals[i]).collect();
    if category != Category::Sphere {
        let r = canonical_pose();
        for (p, nrm) in points.iter_mut().zip(normals.iter_mut()) {
            *p = mat_apply(&r, p);
            *nrm = mat_apply(&r, nrm);
        }
    }
    let max_norm = points.iter().map(norm).fold(0.0, f64::max);
    for p in &mut points {
        *p = scale(p, 1.0 / max_norm);
    }
    Ok(PointCloud {
        points,
        normals: Some(normals),
        point_labels: vec![false; n],
        object_label: false,
        category: category.as_str().to_string(),
        defect: None,
    })
}

fn mat_apply(m: &Matrix3<f64>, p: &[f64; 3]) -> [f64; 3] {
    let v = m * nalgebra::Vector3::new(p[0], p[1], p[2]);
    [v[0], v[1], v[2]]
}

/// Uniform sample on a box with half extents `half` inflated by a rounding radius.
fn sample_box(rng: &mut impl Rng, half: [f64; 3], round: f64) -> ([f64; 3], [f64; 3]) {
    // Faces: for axis a, area 4 * half[b] * half[c] each (two faces per axis).
    // Edges (rounded only): quarter cylinders along axis a, 4 per axis, area (pi/2) * round * 2 half[a].
    // Corners: 8 sphere octants, total area 4 pi round^2.
    let face_area: [f64; 3] = [
        4.0 * half[1] * half[2],
        4.0 * half[0] * half[2],
        4.0 * half[0] * half[1],
    ];
    let edge_area: [f64; 3] = [
        PI * round * half[0],
        PI * round * half[1],
        PI * round * half[2],
    ];
    let corner_area = 4.0 * PI * round * round / 8.0;
    let mut weights = Vec::with_capacity(26);
    for (a, fa) in face_area.iter().enumerate() {
        for s in [-1.0, 1.0] {
            weights.push((0u8, a, s, 0.0, *fa));
        }
    }
    if round > 0.0 {
        for (a, ea) in edge_area.iter().enumerate() {
            for s1 in [-1.0, 1.0] {
                for s2 in [-1.0, 1.0] {
                    weights.push((1u8, a, s1, s2, *ea));
                }
            }
        }
        for c in 0..8 {
            weights.push((2u8, c, 0.0, 0.0, corner_area));
        }
    }
    let total: f64 = weights.iter().map(|w| w.4).sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut chosen = weights[weights.len() - 1];
    for w in &weights {
        if pick < w.4 {
            chosen = *w;
            break;
        }
        pick -= w.4;
    }
    let (part, a, s1, s2, _) = chosen;
    match part {
        0 => {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let mut p = [0.0; 3];
            p[a] = s1 * (half[a] + round);
            p[b] = rng.gen_range(-half[b]..half[b]);
            p[c] = rng.gen_range(-half[c]..half[c]);
            let mut n = [0.0; 3];
            n[a] = s1;
            (p, n)
        }
        1 => {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let phi = rng.gen_range(0.0..PI / 2.0);
            let mut n = [0.0; 3];
            n[b] = s1 * phi.cos();
            n[c] = s2 * phi.sin();
            let mut p = [0.0; 3];
            p[a] = rng.gen_range(-half[a]..half[a]);
            p[b] = s1 * half[b] + round * n[b];
            p[c] = s2 * half[c] + round * n[c];
            (p, n)
        }
        _ => {
            let signs = [
                if a & 1 == 0 { -1.0 } else { 1.0 },
                if a & 2 == 0 { -1.0 } else { 1.0 },
                if a & 4 == 0 { -1.0 } else { 1.0 },
            ];
            let u = random_unit(rng);
            let n = [u[0].abs() * signs[0], u[1].abs() * signs[1], u[2].abs() * signs[2]];
            let p = [
                signs[0] * half[0] + round * n[0],
                signs[1] * half[1] + round * n[1],
                signs[2] * half[2] + round * n[2],
            ];
            (p, n)
        }
    }
}

/// Cylinder with its axis along y.
fn sample_cylinder(rng: &mut impl Rng, radius: f64, half_height: f64) -> ([f64; 3], [f64; 3]) {
    let side = 2.0 * PI * radius * 2.0 * half_height;
    let caps = 2.0 * PI * radius * radius;
    if rng.gen::<f64>() * (side + caps) < side {
        let phi = rng.gen_range(0.0..2.0 * PI);
        let y = rng.gen_range(-half_height..half_height);
        ([radius * phi.cos(), y, radius * phi.sin()], [phi.cos(), 0.0, phi.sin()])
    } else {
        let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let rr = radius * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..2.0 * PI);
        ([rr * phi.cos(), s * half_height, rr * phi.sin()], [0.0, s, 0.0])
    }
}

/// Torus around the y axis; the minor angle is rejection-sampled for uniform area density.
fn sample_torus(rng: &mut impl Rng, major: f64, minor: f64) -> ([f64; 3], [f64; 3]) {
    let u = rng.gen_range(0.0..2.0 * PI);
    let v = loop {
        let v = rng.gen_range(0.0..2.0 * PI);
        if rng.gen::<f64>() * (major + minor) < major + minor * v.cos() {
            break v;
        }
    };
    let ring = major + minor * v.cos();
    let p = [ring * u.cos(), minor * v.sin(), ring * u.sin()];
    let n = [v.cos() * u.cos(), v.sin(), v.cos() * u.sin()];
    (p, n)
}

/// Unit normals from principal component analysis of each point's neighborhood.
///
/// The sign is chosen to point away from the cloud centroid; see
/// [`orient_normals`] for clouds that carry reference normals.
pub fn estimate_normals(points: &[[f64; 3]], neighbors: usize) -> Vec<[f64; 3]> {
    let nn = knn(points, neighbors);
    let centroid = centroid(points);
    nn.iter()
        .zip(points)
        .map(|(idx, p)| {
            let m = idx.iter().fold([0.0; 3], |acc, &j| {
                [acc[0] + points[j][0], acc[1] + points[j][1], acc[2] + points[j][2]]
            });
            let m = scale(&m, 1.0 / idx.len() as f64);
            let mut cov = Matrix3::<f64>::zeros();
            for &j in idx {
                let d = nalgebra::Vector3::new(
                    points[j][0] - m[0],
                    points[j][1] - m[1],
                    points[j][2] - m[2],
                );
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut best = 0;
            for i in 1..3 {
                if eig.eigenvalues[i] < eig.eigenvalues[best] {
                    best = i;
                }
            }
            let v = eig.eigenvectors.column(best);
            let mut n = unit(&[v[0], v[1], v[2]]);
            let out = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
            if dot(&n, &out) < 0.0 {
                n = scale(&n, -1.0);
            }
            n
        })
        .collect()
}

/// Flips each normal to agree in sign with a reference normal.
pub fn orient_normals(normals: &mut [[f64; 3]], reference: &[[f64; 3]]) {
    for (n, r) in normals.iter_mut().zip(reference) {
        if dot(n, r) < 0.0 {
            *n = scale(n, -1.0);
        }
    }
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let s = points.iter().fold([0.0; 3], |acc, p| [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]);
    scale(&s, 1.0 / points.len().max(1) as f64)
}

/// The point of the cloud lying closest to the direction `center`, ties by index.
pub fn defect_anchor(points: &[[f64; 3]], center: &[f64; 3]) -> usize {
    let c = unit(center);
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let n = norm(p);
        let cos = if n > 0.0 { dot(p, &c) / n } else { -1.0 };
        if cos > best.0 {
            best = (cos, i);
        }
    }
    best.1
}

/// Raised-cosine falloff, strictly positive for `t < 1`.
#[inline]
fn falloff(t: f64) -> f64 {
    0.5 * (1.0 + (PI * t).cos())
}

/// Injects one surface defect into a normal object.
///
/// Dents and bumps displace every point within Euclidean distance `radius` of
/// the anchor point along its normal (inwards or outwards) with a raised-cosine
/// profile. Cracks displace a narrow band through the anchor inwards. A missing
/// region deletes the points within `radius`; the surviving rim, out to
/// 1.25 x radius, is labeled anomalous. Points farther than 1.5 x radius from the
/// anchor are never modified.
pub fn inject_defect(cloud: &PointCloud, spec: &DefectSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    if cloud.object_label || cloud.point_labels.iter().any(|&l| l) {
        return Err(GsError::config("defects can only be injected into normal objects"));
    }
    if cloud.is_empty() {
        return Err(GsError::Rejected("empty cloud".into()));
    }
    let normals = match &cloud.normals {
        Some(n) => n.clone(),
        None => estimate_normals(&cloud.points, 16),
    };
    let anchor_idx = defect_anchor(&cloud.points, &spec.center);
    let anchor = cloud.points[anchor_idx];
    let r2 = spec.radius * spec.radius;

    let mut out = cloud.clone();
    match spec.kind {
        DefectKind::Dent | DefectKind::Bump => {
            let sign = if spec.kind == DefectKind::Bump { 1.0 } else { -1.0 };
            for (i, p) in cloud.points.iter().enumerate() {
                let d2 = dist2(p, &anchor);
                if d2 < r2 {
                    let w = falloff(d2.sqrt() / spec.radius);
                    let n = &normals[i];
                    let s = sign * spec.magnitude * w;
                    out.points[i] = [p[0] + s * n[0], p[1] + s * n[1], p[2] + s * n[2]];
                    out.point_labels[i] = true;
                }
            }
        }
        DefectKind::Crack => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4ac_c4ac);
            let n0 = normals[anchor_idx];
            let along = loop {
                let t = cross(&n0, &random_unit(&mut rng));
                if norm(&t) > 1e-6 {
                    break unit(&t);
                }
            };
            let across = unit(&cross(&n0, &along));
            let width = (0.25 * spec.radius).max(0.03);
            for (i, p) in cloud.points.iter().enumerate() {
                let d = [p[0] - anchor[0], p[1] - anchor[1], p[2] - anchor[2]];
                if dist2(p, &anchor) >= r2 {
                    continue;
                }
                let a = dot(&d, &across).abs();
                if a < width {
                    let w = (1.0 - a / width) * falloff(dot(&d, &along).abs() / spec.radius).sqrt();
                    if w > 0.0 {
                        let n = &normals[i];
                        let s = -spec.magnitude * w;
                        out.points[i] = [p[0] + s * n[0], p[1] + s * n[1], p[2] + s * n[2]];
                        out.point_labels[i] = true;
                    }
                }
            }
        }
        DefectKind::MissingRegion => {
            let rim2 = (1.25 * spec.radius).powi(2);
            let mut points = Vec::with_capacity(cloud.len());
            let mut labels = Vec::with_capacity(cloud.len());
            let mut kept_normals = Vec::with_capacity(cloud.len());
            let mut removed = 0usize;
            for (i, p) in cloud.points.iter().enumerate() {
                let d2 = dist2(p, &anchor);
                if d2 < r2 {
                    removed += 1;
                    continue;
                }
                points.push(*p);
                labels.push(d2 < rim2);
                kept_normals.push(normals[i]);
            }
            if removed == 0 || !labels.iter().any(|&l| l) {
                return Err(GsError::Rejected(format!(
                    "missing region at anchor {anchor_idx} removed {removed} points"
                )));
            }
            if points.len() < MIN_POINTS {
                return Err(GsError::Rejected("missing region leaves too few points".into()));
            }
            out.points = points;
            out.point_labels = labels;
            out.normals = cloud.normals.as_ref().map(|_| kept_normals);
        }
    }
    if !out.point_labels.iter().any(|&l| l) {
        return Err(GsError::Rejected(format!(
            "{:?} region around anchor {anchor_idx} captured no points",
            spec.kind
        )));
    }
    out.object_label = true;
    out.defect = Some(*spec);
    Ok(out)
}

/// Generates a defect with retries on rejection; the seed drives both the
/// defect parameters and the retry sequence.
pub fn inject_random_defect(cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    inject_random_defect_in(cloud, &DefectRanges::default(), seed)
}

pub fn inject_random_defect_in(cloud: &PointCloud, ranges: &DefectRanges, seed: u64) -> Result<PointCloud> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let spec = DefectSpec::random_in(&mut rng, ranges);
        match inject_defect(cloud, &spec, rng.gen()) {
            Ok(c) => return Ok(c),
            Err(GsError::Rejected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(GsError::Rejected("no defect placement succeeded after 64 attempts".into()))
}
