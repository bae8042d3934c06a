//! Multi-view orthographic projection of point clouds and back-projection of
//! per-pixel scores onto the points that own those pixels.
//!
//! Each view rotates the cloud about the X axis and looks down the -Z axis
//! (larger z is closer to the camera). Points are splatted as small discs into a
//! z-buffer; every point whose depth is within `depth_tolerance` of the winning
//! depth of a pixel co-owns that pixel and is marked visible in the view.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};
use crate::geometry::{estimate_normals, orient_normals, PointCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Disc radius in pixels; the pixel containing the point is always covered.
    pub splat_radius: f64,
    /// Co-ownership tolerance in object units.
    pub depth_tolerance: f64,
    /// Fraction of the smaller image side spanned by the unit sphere's diameter.
    pub fill: f64,
    pub normal_neighbors: usize,
    /// Points whose view-space normal z falls below this are back faces and
    /// are not splatted; values below -1 disable culling.
    pub backface_threshold: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            views: 9,
            height: 112,
            width: 112,
            splat_radius: 3.5,
            depth_tolerance: 1e-3,
            fill: 0.8,
            normal_neighbors: 16,
            backface_threshold: -0.2,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(GsError::config("at least one view is required"));
        }
        if self.height < 32 || self.width < 32 {
            return Err(GsError::config(format!(
                "resolution {}x{} is below the 32x32 minimum",
                self.height, self.width
            )));
        }
        if !(self.splat_radius >= 0.0) || !(self.depth_tolerance >= 0.0) {
            return Err(GsError::config("splat radius and depth tolerance must be non-negative"));
        }
        if !(self.fill > 0.0 && self.fill <= 1.0) {
            return Err(GsError::config("fill must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Rotation angles about the X axis, evenly spaced from 4pi/5 down to -4pi/5.
pub fn view_angles(v: usize) -> Vec<f64> {
    match v {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..v)
            .map(|i| {
                let a = 0.8 * PI * (1.0 - 2.0 * i as f64 / (v - 1) as f64);
                if a.abs() < 1e-15 {
                    0.0
                } else {
                    a
                }
            })
            .collect(),
    }
}

#[inline]
pub fn rotate_x(p: &[f64; 3], angle: f64) -> [f64; 3] {
    if angle == 0.0 {
        return *p;
    }
    let (s, c) = angle.sin_cos();
    [p[0], p[1] * c - p[2] * s, p[1] * s + p[2] * c]
}

/// One rasterized view of a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub angle: f64,
    /// Shaded intensity in [0, 1], row-major h x w; 0 is background.
    pub rendered: Vec<f64>,
    /// Normalized depth in [0, 1], row-major; 0 is background, nearer is brighter.
    pub depth: Vec<f64>,
    /// Nearest owning point per pixel, -1 for background.
    pub pixel_map: Vec<i32>,
    /// CSR offsets into `owners`, length h*w + 1.
    pub owner_offsets: Vec<u32>,
    /// All co-owners of each pixel, ascending point index.
    pub owners: Vec<u32>,
    pub visibility: Vec<bool>,
}

impl View {
    pub fn pixel_owners(&self, pixel: usize) -> &[u32] {
        &self.owners[self.owner_offsets[pixel] as usize..self.owner_offsets[pixel + 1] as usize]
    }

    pub fn is_background(&self, pixel: usize) -> bool {
        self.pixel_map[pixel] < 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub height: usize,
    pub width: usize,
    pub n_points: usize,
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn angles(&self) -> Vec<f64> {
        self.views.iter().map(|v| v.angle).collect()
    }

    /// Number of views in which each point is visible.
    pub fn visible_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_points];
        for v in &self.views {
            for (j, &vis) in v.visibility.iter().enumerate() {
                c[j] += vis as usize;
            }
        }
        c
    }
}

/// Renders `config.views` views of a normalized cloud.
pub fn project_views(cloud: &PointCloud, config: &ProjectionConfig) -> Result<ViewSet> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(GsError::config("cannot project an empty cloud"));
    }
    let mut normals = estimate_normals(&cloud.points, config.normal_neighbors.min(cloud.len()));
    if let Some(reference) = &cloud.normals {
        orient_normals(&mut normals, reference);
    }
    project_with_normals(&cloud.points, &normals, config, &view_angles(config.views))
}

/// Projection at explicit angles with caller-supplied shading normals.
pub fn project_with_normals(
    points: &[[f64; 3]],
    normals: &[[f64; 3]],
    config: &ProjectionConfig,
    angles: &[f64],
) -> Result<ViewSet> {
    config.validate()?;
    if points.len() != normals.len() {
        return Err(GsError::config("point/normal count mismatch"));
    }
    let views = angles
        .par_iter()
        .map(|&a| rasterize(points, normals, config, a))
        .collect();
    Ok(ViewSet { height: config.height, width: config.width, n_points: points.len(), views })
}

fn covered_pixels(row: f64, col: f64, radius: f64, h: usize, w: usize, out: &mut Vec<usize>) {
    out.clear();
    let (r0, c0) = (row.floor(), col.floor());
    if r0 >= 0.0 && c0 >= 0.0 && (r0 as usize) < h && (c0 as usize) < w {
        out.push(r0 as usize * w + c0 as usize);
    }
    let rr = radius * radius;
    let lo_r = (row - radius - 0.5).floor().max(0.0) as i64;
    let hi_r = ((row + radius - 0.5).ceil() as i64).min(h as i64 - 1);
    let lo_c = (col - radius - 0.5).floor().max(0.0) as i64;
    let hi_c = ((col + radius - 0.5).ceil() as i64).min(w as i64 - 1);
    for r in lo_r..=hi_r {
        for c in lo_c..=hi_c {
            let dr = r as f64 + 0.5 - row;
            let dc = c as f64 + 0.5 - col;
            if dr * dr + dc * dc <= rr {
                let p = r as usize * w + c as usize;
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
    }
}

fn rasterize(points: &[[f64; 3]], normals: &[[f64; 3]], config: &ProjectionConfig, angle: f64) -> View {
    let (h, w) = (config.height, config.width);
    let scale = config.fill * h.min(w) as f64 / 2.0;
    let n = points.len();
    let rotated: Vec<[f64; 3]> = points.iter().map(|p| rotate_x(p, angle)).collect();

    let mut zbuf = vec![f64::NEG_INFINITY; h * w];
    let mut winner = vec![-1i32; h * w];
    let mut cover = Vec::new();
    let mut splats: Vec<Vec<usize>> = Vec::with_capacity(n);
    for (j, p) in rotated.iter().enumerate() {
        if rotate_x(&normals[j], angle)[2] < config.backface_threshold {
            splats.push(Vec::new());
            continue;
        }
        let col = w as f64 / 2.0 + p[0] * scale;
        let row = h as f64 / 2.0 - p[1] * scale;
        covered_pixels(row, col, config.splat_radius, h, w, &mut cover);
        for &px in &cover {
            if p[2] > zbuf[px] {
                zbuf[px] = p[2];
                winner[px] = j as i32;
            }
        }
        splats.push(cover.clone());
    }

    // Co-owners, bucketed per pixel; iteration order keeps each bucket sorted.
    let mut counts = vec![0u32; h * w + 1];
    let mut visibility = vec![false; n];
    for (j, p) in rotated.iter().enumerate() {
        for &px in &splats[j] {
            if p[2] >= zbuf[px] - config.depth_tolerance {
                counts[px + 1] += 1;
                visibility[j] = true;
            }
        }
    }
    for i in 0..h * w {
        counts[i + 1] += counts[i];
    }
    let mut owners = vec![0u32; counts[h * w] as usize];
    let mut fill = counts.clone();
    for (j, p) in rotated.iter().enumerate() {
        for &px in &splats[j] {
            if p[2] >= zbuf[px] - config.depth_tolerance {
                owners[fill[px] as usize] = j as u32;
                fill[px] += 1;
            }
        }
    }

    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for px in 0..h * w {
        if winner[px] >= 0 {
            zmin = zmin.min(zbuf[px]);
            zmax = zmax.max(zbuf[px]);
        }
    }
    let mut rendered = vec![0.0; h * w];
    let mut depth = vec![0.0; h * w];
    for px in 0..h * w {
        let j = winner[px];
        if j < 0 {
            continue;
        }
        let nz = rotate_x(&normals[j as usize], angle)[2];
        rendered[px] = 0.15 + 0.85 * nz.abs().min(1.0);
        depth[px] = if zmax > zmin { 0.15 + 0.85 * (zbuf[px] - zmin) / (zmax - zmin) } else { 1.0 };
    }
    View { angle, rendered, depth, pixel_map: winner, owner_offsets: counts, owners, visibility }
}

/// How back-projected scores are averaged over views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewNormalization {
    /// Divide the per-view sum by the total number of views.
    #[default]
    ViewCount,
    /// Divide by the number of views in which the point is visible.
    VisibleCount,
}

fn check_maps(maps: &[Vec<f64>], views: &ViewSet) -> Result<()> {
    if maps.len() != views.len() {
        return Err(GsError::config(format!("{} score maps for {} views", maps.len(), views.len())));
    }
    if let Some(m) = maps.iter().find(|m| m.len() != views.pixels()) {
        return Err(GsError::config(format!("score map has {} pixels, expected {}", m.len(), views.pixels())));
    }
    Ok(())
}

/// Transfers per-view pixel scores onto points.
///
/// In each view a visible point receives the mean score of the pixels it
/// (co-)owns and an occluded point receives 0; the per-view scores are then
/// summed and divided according to `normalization`.
pub fn back_project(maps: &[Vec<f64>], views: &ViewSet, normalization: ViewNormalization) -> Result<Vec<f64>> {
    check_maps(maps, views)?;
    let n = views.n_points;
    let mut total = vec![0.0; n];
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0u32; n];
    for (view, map) in views.views.iter().zip(maps) {
        sum.iter_mut().for_each(|s| *s = 0.0);
        cnt.iter_mut().for_each(|c| *c = 0);
        for (px, &score) in map.iter().enumerate() {
            for &j in view.pixel_owners(px) {
                sum[j as usize] += score;
                cnt[j as usize] += 1;
            }
        }
        for j in 0..n {
            if cnt[j] > 0 {
                total[j] += sum[j] / cnt[j] as f64;
            }
        }
    }
    match normalization {
        ViewNormalization::ViewCount => {
            let v = views.len() as f64;
            total.iter_mut().for_each(|t| *t /= v);
        }
        ViewNormalization::VisibleCount => {
            for (t, c) in total.iter_mut().zip(views.visible_counts()) {
                *t = if c > 0 { *t / c as f64 } else { 0.0 };
            }
        }
    }
    Ok(total)
}

/// Per-view binary label maps: a pixel takes the label of its nearest owner.
pub fn label_maps(views: &ViewSet, point_labels: &[bool]) -> Vec<Vec<f64>> {
    views
        .views
        .iter()
        .map(|v| {
            v.pixel_map
                .iter()
                .map(|&j| if j >= 0 && point_labels[j as usize] { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    height: usize,
    width: usize,
    views: usize,
    n_points: usize,
    angles: Vec<f64>,
    image_dtype: String,
    visibility_dtype: String,
    pixel_map_dtype: String,
    owners_dtype: String,
}

fn write_png16(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    let buf: Vec<u16> = data.iter().map(|&x| (x.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| GsError::Format("image buffer size mismatch".into()))?;
    img.save(path).map_err(|e| GsError::Format(e.to_string()))
}

/// Saves a score map in [0, 1] as an RGB heatmap (blue low, red high) over
/// the grayscale rendering; background pixels of `shade` stay black.
pub fn save_heatmap(path: &Path, map: &[f64], shade: &[f64], h: usize, w: usize) -> Result<()> {
    if map.len() != h * w || shade.len() != h * w {
        return Err(GsError::config("heatmap size mismatch"));
    }
    let mut buf = Vec::with_capacity(3 * h * w);
    for (&m, &s) in map.iter().zip(shade) {
        let m = m.clamp(0.0, 1.0);
        let rgb = if s <= 0.0 { [0.0; 3] } else { [m, 1.0 - (2.0 * m - 1.0).abs(), 1.0 - m].map(|c| 0.65 * c + 0.35 * s) };
        buf.extend(rgb.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).ok_or_else(|| GsError::Format("image buffer size mismatch".into()))?;
    img.save(path).map_err(|e| GsError::Format(e.to_string()))
}

fn read_png16(path: &Path, h: usize, w: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| GsError::Format(e.to_string()))?.into_luma16();
    if img.width() as usize != w || img.height() as usize != h {
        return Err(GsError::Format(format!("{} has unexpected size", path.display())));
    }
    Ok(img.into_raw().into_iter().map(|x| x as f64 / 65535.0).collect())
}

/// Writes a view set as a cache directory.
///
/// Images are 16-bit PNGs (quantized to 1/65535); visibility, pixel maps, and
/// owner lists are raw little-endian arrays described by `header.json`.
pub fn save_viewset(views: &ViewSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = CacheHeader {
        height: views.height,
        width: views.width,
        views: views.len(),
        n_points: views.n_points,
        angles: views.angles(),
        image_dtype: "u16-png".into(),
        visibility_dtype: "u8".into(),
        pixel_map_dtype: "i32-le".into(),
        owners_dtype: "u32-le".into(),
    };
    fs::write(dir.join("header.json"), serde_json::to_vec_pretty(&header)?)?;
    let mut vis = Vec::with_capacity(views.len() * views.n_points);
    let mut pmap = Vec::new();
    let mut own = Vec::new();
    for (i, v) in views.views.iter().enumerate() {
        write_png16(&dir.join(format!("rendered_{i}.png")), &v.rendered, views.height, views.width)?;
        write_png16(&dir.join(format!("depth_{i}.png")), &v.depth, views.height, views.width)?;
        vis.extend(v.visibility.iter().map(|&b| b as u8));
        pmap.extend(v.pixel_map.iter().flat_map(|x| x.to_le_bytes()));
        own.extend((v.owners.len() as u32).to_le_bytes());
        own.extend(v.owner_offsets.iter().flat_map(|x| x.to_le_bytes()));
        own.extend(v.owners.iter().flat_map(|x| x.to_le_bytes()));
    }
    fs::File::create(dir.join("visibility.bin"))?.write_all(&vis)?;
    fs::File::create(dir.join("pixel_map.bin"))?.write_all(&pmap)?;
    fs::File::create(dir.join("owners.bin"))?.write_all(&own)?;
    Ok(())
}

fn read_u32s(bytes: &[u8], at: &mut usize, count: usize) -> Result<Vec<u32>> {
    let end = *at + 4 * count;
    if end > bytes.len() {
        return Err(GsError::Format("truncated owner array".into()));
    }
    let out = bytes[*at..end].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    *at = end;
    Ok(out)
}

pub fn load_viewset(dir: &Path) -> Result<ViewSet> {
    let header: CacheHeader = serde_json::from_slice(&fs::read(dir.join("header.json"))?)?;
    let (h, w, n) = (header.height, header.width, header.n_points);
    let mut vis = Vec::new();
    fs::File::open(dir.join("visibility.bin"))?.read_to_end(&mut vis)?;
    let pmap = fs::read(dir.join("pixel_map.bin"))?;
    let own = fs::read(dir.join("owners.bin"))?;
    if vis.len() != header.views * n || pmap.len() != header.views * h * w * 4 {
        return Err(GsError::Format("view cache arrays do not match header".into()));
    }
    let mut at = 0;
    let mut views = Vec::with_capacity(header.views);
    for (i, &angle) in header.angles.iter().enumerate() {
        let len = read_u32s(&own, &mut at, 1)?[0] as usize;
        let owner_offsets = read_u32s(&own, &mut at, h * w + 1)?;
        let owners = read_u32s(&own, &mut at, len)?;
        let pixel_map = pmap[i * h * w * 4..(i + 1) * h * w * 4]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        views.push(View {
            angle,
            rendered: read_png16(&dir.join(format!("rendered_{i}.png")), h, w)?,
            depth: read_png16(&dir.join(format!("depth_{i}.png")), h, w)?,
            pixel_map,
            owner_offsets,
            owners,
            visibility: vis[i * n..(i + 1) * n].iter().map(|&b| b != 0).collect(),
        });
    }
    Ok(ViewSet { height: h, width: w, n_points: n, views })
}
