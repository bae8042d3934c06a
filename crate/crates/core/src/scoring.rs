//! Similarity-based classification and segmentation of projected views, and
//! aggregation of the per-view maps onto the 3D points.

use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};
use crate::projection::{back_project, ViewNormalization, ViewSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub temperature: f64,
    /// Gaussian smoothing of the final map, in pixels.
    pub sigma: f64,
    pub normalization: ViewNormalization,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { temperature: 0.07, sigma: 4.0, normalization: ViewNormalization::ViewCount }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; zero-norm inputs are a scoring error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GsError::config(format!("cosine of {}- and {}-vectors", a.len(), b.len())));
    }
    let (na, nb) = (l2(a), l2(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(GsError::Scoring("cosine similarity of a zero-norm vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Two-way softmax over (normal, anomaly) similarities at temperature `tau`.
/// Returns (p_normal, p_anomaly).
pub fn two_way_softmax(cos_normal: f64, cos_anomaly: f64, tau: f64) -> (f64, f64) {
    let m = cos_normal.max(cos_anomaly);
    let en = ((cos_normal - m) / tau).exp();
    let ea = ((cos_anomaly - m) / tau).exp();
    (en / (en + ea), ea / (en + ea))
}

/// Probability that a view is anomalous given its global feature.
pub fn classify_view(global: &[f64], normal: &[f64], anomaly: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(GsError::config("temperature must be positive"));
    }
    let cn = cosine(global, normal)?;
    let ca = cosine(global, anomaly)?;
    Ok(two_way_softmax(cn, ca, tau).1)
}

/// Interpolation weights from a coarse grid of `cells` cells, each `patch`
/// pixels wide, onto `size` pixels. Cell centers sit at pixel coordinate
/// (i + 0.5) * patch; samples beyond the outermost centers clamp.
pub fn bilinear_weights(size: usize, cells: usize, patch: f64) -> Vec<(usize, usize, f64)> {
    (0..size)
        .map(|r| {
            let x = ((r as f64 + 0.5) / patch - 0.5).clamp(0.0, (cells - 1) as f64);
            let a0 = (x.floor() as usize).min(cells - 1);
            let a1 = (a0 + 1).min(cells - 1);
            (a0, a1, x - a0 as f64)
        })
        .collect()
}

/// Bilinear upsampling of a row-major `gh x gw` grid to `h x w`.
pub fn bilinear_upsample(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let rows = bilinear_weights(h, gh, h as f64 / gh as f64);
    let cols = bilinear_weights(w, gw, w as f64 / gw as f64);
    let mut out = vec![0.0; h * w];
    for (r, &(a0, a1, fa)) in rows.iter().enumerate() {
        for (c, &(b0, b1, fb)) in cols.iter().enumerate() {
            let g = |a: usize, b: usize| grid[a * gw + b];
            out[r * w + c] = (1.0 - fa) * ((1.0 - fb) * g(a0, b0) + fb * g(a0, b1))
                + fa * ((1.0 - fb) * g(a1, b0) + fb * g(a1, b1));
        }
    }
    out
}

/// Normalized Gaussian taps out to `round(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let radius = (4.0 * sigma + 0.5).floor() as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|x| (-0.5 * (x * x) as f64 / (sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn convolve_axis(img: &[f64], h: usize, w: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let off = t as i64 - radius;
                let v = if along_rows {
                    img[reflect(r as i64 + off, h) * w + c]
                } else {
                    img[r * w + reflect(c as i64 + off, w)]
                };
                acc += k * v;
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Separable Gaussian filter with reflective boundaries, truncated at 4 sigma.
pub fn gaussian_filter(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let tmp = convolve_axis(img, h, w, &k, true);
    convolve_axis(&tmp, h, w, &k, false)
}

/// Dense `size x size` matrix form of the 1-D reflective Gaussian filter.
pub fn gaussian_matrix(size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let mut m = vec![0.0; size * size];
    for r in 0..size {
        for (t, &kv) in k.iter().enumerate() {
            let src = reflect(r as i64 + t as i64 - radius, size);
            m[r * size + src] += kv;
        }
    }
    m
}

/// Dense `size x cells` matrix form of 1-D bilinear upsampling.
pub fn bilinear_matrix(size: usize, cells: usize) -> Vec<f64> {
    let mut m = vec![0.0; size * cells];
    for (r, (a0, a1, f)) in bilinear_weights(size, cells, size as f64 / cells as f64).into_iter().enumerate() {
        m[r * cells + a0] += 1.0 - f;
        m[r * cells + a1] += f;
    }
    m
}

/// The combined 1-D operator `gaussian * bilinear` of shape `size x cells`.
pub fn smoothing_upsample_matrix(size: usize, cells: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian_matrix(size, sigma);
    let u = bilinear_matrix(size, cells);
    let mut m = vec![0.0; size * cells];
    for r in 0..size {
        for k in 0..size {
            let gk = g[r * size + k];
            if gk == 0.0 {
                continue;
            }
            for a in 0..cells {
                m[r * cells + a] += gk * u[k * cells + a];
            }
        }
    }
    m
}

/// Per-view segmentation maps, each row-major `h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMaps {
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
    pub combined: Vec<f64>,
}

/// Patch-level (normal, anomaly) probabilities for `p` local features of dimension `d`.
pub fn patch_probabilities(local: &[f64], d: usize, normal: &[f64], anomaly: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if d == 0 || local.len() % d != 0 || normal.len() != d || anomaly.len() != d {
        return Err(GsError::config("local feature / text embedding dimensions disagree"));
    }
    let (nn, na) = (l2(normal), l2(anomaly));
    if !(nn > 0.0 && na > 0.0) {
        return Err(GsError::Scoring("zero-norm text embedding".into()));
    }
    let mut pn = Vec::with_capacity(local.len() / d);
    let mut pa = Vec::with_capacity(local.len() / d);
    for f in local.chunks_exact(d) {
        // A zero patch feature has no direction; treat both similarities as 0.
        let nf = l2(f).max(1e-12);
        let cn = f.iter().zip(normal).map(|(x, y)| x * y).sum::<f64>() / (nf * nn);
        let ca = f.iter().zip(anomaly).map(|(x, y)| x * y).sum::<f64>() / (nf * na);
        let (a, b) = two_way_softmax(cn, ca, tau);
        pn.push(a);
        pa.push(b);
    }
    Ok((pn, pa))
}

/// Segments one view from its patch features.
///
/// Both probability grids are bilinearly upsampled; the final map is
/// `G_sigma(0.5 (1 - normal) + 0.5 anomaly)`.
#[allow(clippy::too_many_arguments)]
pub fn segment_view(
    local: &[f64],
    d: usize,
    grid: (usize, usize),
    normal: &[f64],
    anomaly: &[f64],
    tau: f64,
    resolution: (usize, usize),
    sigma: f64,
) -> Result<SegmentMaps> {
    let (gh, gw) = grid;
    let (h, w) = resolution;
    if gh * gw * d != local.len() {
        return Err(GsError::config(format!("{} local values do not form a {gh}x{gw}x{d} grid", local.len())));
    }
    if gh == 0 || gw == 0 || h < gh || w < gw {
        return Err(GsError::config("patch grid inconsistent with resolution"));
    }
    let (pn, pa) = patch_probabilities(local, d, normal, anomaly, tau)?;
    let normal_map = bilinear_upsample(&pn, gh, gw, h, w);
    let anomaly_map = bilinear_upsample(&pa, gh, gw, h, w);
    let pre: Vec<f64> = normal_map.iter().zip(&anomaly_map).map(|(n, a)| 0.5 * (1.0 - n) + 0.5 * a).collect();
    let combined = gaussian_filter(&pre, h, w, sigma);
    Ok(SegmentMaps { normal: normal_map, anomaly: anomaly_map, combined })
}

/// Global and local features for every view of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePack {
    pub dim: usize,
    pub grid: (usize, usize),
    /// `v` rows of `dim` values.
    pub global: Vec<Vec<f64>>,
    /// `v` rows of `grid.0 * grid.1 * dim` values.
    pub local: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreResult {
    pub per_view_prob: Vec<f64>,
    pub object_prob: f64,
    pub maps_normal: Vec<Vec<f64>>,
    pub maps_anomaly: Vec<Vec<f64>>,
    pub maps_final: Vec<Vec<f64>>,
    pub point_scores: Vec<f64>,
}

/// Scores an object from its per-view features and the pair of text embeddings.
pub fn score_object(
    features: &FeaturePack,
    normal: &[f64],
    anomaly: &[f64],
    views: &ViewSet,
    config: &ScoringConfig,
) -> Result<ScoreResult> {
    if features.global.len() != views.len() || features.local.len() != views.len() {
        return Err(GsError::config("feature pack and view set disagree on view count"));
    }
    let mut per_view_prob = Vec::with_capacity(views.len());
    let mut maps_normal = Vec::with_capacity(views.len());
    let mut maps_anomaly = Vec::with_capacity(views.len());
    let mut maps_final = Vec::with_capacity(views.len());
    for (g, l) in features.global.iter().zip(&features.local) {
        per_view_prob.push(classify_view(g, normal, anomaly, config.temperature)?);
        let m = segment_view(
            l,
            features.dim,
            features.grid,
            normal,
            anomaly,
            config.temperature,
            (views.height, views.width),
            config.sigma,
        )?;
        maps_normal.push(m.normal);
        maps_anomaly.push(m.anomaly);
        maps_final.push(m.combined);
    }
    let object_prob = per_view_prob.iter().sum::<f64>() / per_view_prob.len() as f64;
    let point_scores = back_project(&maps_final, views, config.normalization)?;
    Ok(ScoreResult { per_view_prob, object_prob, maps_normal, maps_anomaly, maps_final, point_scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_similarities_give_one_half() {
        let g = [1.0, 2.0, 0.5];
        assert!((classify_view(&g, &g, &g, 0.07).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn classify_matches_scalar_evaluation() {
        // Construct unit vectors with cos(g, n) = 0.2 and cos(g, a) = 0.8.
        let g = [1.0, 0.0, 0.0];
        let n = [0.2, (1.0f64 - 0.04).sqrt(), 0.0];
        let a = [0.8, 0.0, 0.6];
        let p = classify_view(&g, &n, &a, 0.07).unwrap();
        let want = 1.0 / (1.0 + (-0.6f64 / 0.07).exp());
        assert!((p - want).abs() < 1e-12);
        assert!((p - 0.99981).abs() < 1e-5);
        let scaled = [37.0, 0.0, 0.0];
        assert_eq!(classify_view(&scaled, &n, &a, 0.07).unwrap(), p);
    }

    #[test]
    fn classify_rejects_zero_features() {
        assert!(matches!(classify_view(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.07), Err(GsError::Scoring(_))));
        assert!(classify_view(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn classify_is_monotone_in_anomaly_similarity() {
        let (g, n) = ([1.0, 0.0], [0.0, 1.0]);
        let mut prev = 0.0;
        for k in (0..40).rev() {
            // cos(g, a) = cos(theta) grows as theta shrinks.
            let theta = std::f64::consts::PI * k as f64 / 40.0;
            let p = classify_view(&g, &n, &[theta.cos(), theta.sin()], 0.07).unwrap();
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn bilinear_two_by_two_to_four_by_four() {
        let grid = [0.0, 1.0, 2.0, 3.0];
        let up = bilinear_upsample(&grid, 2, 2, 4, 4);
        // Row/column source weights: 0 -> (1, 0), 1 -> (0.75, 0.25), 2 -> (0.25, 0.75), 3 -> (0, 1).
        let w = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for r in 0..4 {
            for c in 0..4 {
                let mut want = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        want += w[r][a] * w[c][b] * grid[a * 2 + b];
                    }
                }
                assert!((up[r * 4 + c] - want).abs() < 1e-15, "({r},{c})");
            }
        }
        assert_eq!(up[0], 0.0);
        assert_eq!(up[5], 0.75 * 0.25 + 0.25 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0);
    }

    #[test]
    fn constant_fields_are_preserved() {
        let up = bilinear_upsample(&[0.3; 49], 7, 7, 112, 112);
        assert!(up.iter().all(|&x| (x - 0.3).abs() < 1e-15));
        let g = gaussian_filter(&up, 112, 112, 4.0);
        assert!(g.iter().all(|&x| (x - 0.3).abs() < 1e-12));
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect(-9, 3), 2);
    }

    #[test]
    fn matrix_operators_match_direct_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (gh, gw, h, w) = (3, 4, 24, 32);
        let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen()).collect();
        let direct = gaussian_filter(&bilinear_upsample(&grid, gh, gw, h, w), h, w, 2.5);
        let kh = smoothing_upsample_matrix(h, gh, 2.5);
        let kw = smoothing_upsample_matrix(w, gw, 2.5);
        for r in 0..h {
            for c in 0..w {
                let mut v = 0.0;
                for a in 0..gh {
                    for b in 0..gw {
                        v += kh[r * gh + a] * grid[a * gw + b] * kw[c * gw + b];
                    }
                }
                assert!((v - direct[r * w + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_maps_are_complementary_and_composite_is_filtered_anomaly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let local: Vec<f64> = (0..49 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tn: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = segment_view(&local, d, (7, 7), &tn, &ta, 0.07, (112, 112), 4.0).unwrap();
        for (n, a) in m.normal.iter().zip(&m.anomaly) {
            assert!((n + a - 1.0).abs() < 1e-12);
        }
        let filtered = gaussian_filter(&m.anomaly, 112, 112, 4.0);
        for (x, y) in m.combined.iter().zip(&filtered) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(segment_view(&local[..10], d, (7, 7), &tn, &ta, 0.07, (112, 112), 4.0).is_err());
    }
}
