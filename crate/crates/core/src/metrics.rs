//! Object- and point-level ranking metrics: AUROC, average precision, and
//! per-region overlap (PRO) integrated up to a false-positive-rate limit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GsError, Result};
use crate::neighbors::knn;

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(GsError::config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GsError::Scoring("non-finite score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score (stable on index for ties).
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Groups of equal scores in descending order.
fn tie_groups<'a>(scores: &'a [f64], order: &'a [usize]) -> impl Iterator<Item = &'a [usize]> + 'a {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= order.len() {
            return None;
        }
        let s = scores[order[start]];
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == s {
            end += 1;
        }
        let g = &order[start..end];
        start = end;
        Some(g)
    })
}

/// Probability that a random positive outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GsError::UndefinedMetric("AUROC needs both classes".into()));
    }
    let order = descending(scores);
    // Walk from the top: each positive beats all negatives below its tie group.
    let mut neg_above = 0usize;
    let mut wins = 0.0;
    for g in tie_groups(scores, &order) {
        let gp = g.iter().filter(|&&i| labels[i]).count();
        let gn = g.len() - gp;
        wins += gp as f64 * (neg - neg_above - gn) as f64 + 0.5 * (gp * gn) as f64;
        neg_above += gn;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise area under the precision-recall curve over descending thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(GsError::UndefinedMetric("average precision needs a positive".into()));
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for g in tie_groups(scores, &order) {
        let gp = g.iter().filter(|&&i| labels[i]).count();
        tp += gp;
        fp += g.len() - gp;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Trapezoidal area under a piecewise-linear curve from x = 0 to `x_max`,
/// interpolating at the limit. `curve` must be sorted by x.
pub fn trapezoid_until(curve: &[(f64, f64)], x_max: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= x_max {
            break;
        }
        if x1 <= x_max {
            area += 0.5 * (x1 - x0) * (y0 + y1);
        } else {
            let y = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0);
            area += 0.5 * (x_max - x0) * (y0 + y);
            break;
        }
    }
    area
}

/// Per-region overlap integrated over false-positive rates in [0, `fpr_limit`]
/// and normalized by the limit.
///
/// `regions` are disjoint index sets of anomalous points. The curve starts at
/// (0, 0) and gains one vertex per distinct score threshold.
pub fn pro(scores: &[f64], labels: &[bool], regions: &[Vec<usize>], fpr_limit: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(GsError::config("PRO integration limit must be in (0, 1]"));
    }
    let regions: Vec<&Vec<usize>> = regions.iter().filter(|r| !r.is_empty()).collect();
    if regions.is_empty() || !labels.iter().any(|&l| l) {
        return Err(GsError::UndefinedMetric("PRO needs at least one anomalous region".into()));
    }
    let neg = labels.iter().filter(|&&l| !l).count();
    if neg == 0 {
        return Err(GsError::UndefinedMetric("PRO needs normal points".into()));
    }
    let mut weight = vec![0.0; scores.len()];
    let n_regions = regions.len() as f64;
    for r in &regions {
        for &i in r.iter() {
            if i >= scores.len() {
                return Err(GsError::config("region index out of range"));
            }
            weight[i] = 1.0 / (r.len() as f64 * n_regions);
        }
    }
    let order = descending(scores);
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut overlap) = (0usize, 0.0);
    for g in tie_groups(scores, &order) {
        for &i in g {
            if labels[i] {
                overlap += weight[i];
            } else {
                fp += 1;
            }
        }
        curve.push((fp as f64 / neg as f64, overlap));
    }
    Ok(trapezoid_until(&curve, fpr_limit) / fpr_limit)
}

/// Connected components of the anomalous points over a symmetric k-NN graph
/// built among the anomalous points only.
pub fn knn_regions(points: &[[f64; 3]], labels: &[bool], k: usize) -> Vec<Vec<usize>> {
    let anomalous: Vec<usize> = (0..points.len()).filter(|&i| labels[i]).collect();
    if anomalous.is_empty() {
        return Vec::new();
    }
    let sub: Vec<[f64; 3]> = anomalous.iter().map(|&i| points[i]).collect();
    let nn = knn(&sub, k + 1);
    let mut parent: Vec<usize> = (0..sub.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (a, row) in nn.iter().enumerate() {
        for &b in row {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for a in 0..sub.len() {
        let r = find(&mut parent, a);
        groups.entry(r).or_default().push(anomalous[a]);
    }
    groups.into_values().collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub o_auroc: Option<f64>,
    pub o_ap: Option<f64>,
    pub p_auroc: Option<f64>,
    pub p_pro: Option<f64>,
    pub objects: usize,
    pub anomalous_objects: usize,
    pub points: usize,
    pub anomalous_points: usize,
}

/// Evaluation output; metrics undefined for the data (e.g. no anomalies) are null.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    #[serde(flatten)]
    pub overall: MetricRow,
    pub per_category: BTreeMap<String, MetricRow>,
}

/// Scores of one evaluated object.
#[derive(Clone, Debug)]
pub struct ObjectScores<'a> {
    pub category: &'a str,
    pub object_score: f64,
    pub object_label: bool,
    pub point_scores: &'a [f64],
    pub point_labels: &'a [bool],
    /// Anomalous regions as indices into this object's points.
    pub regions: Vec<Vec<usize>>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(GsError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Pools points across objects and computes all four metrics.
pub fn metric_row(objects: &[ObjectScores<'_>], fpr_limit: f64) -> Result<MetricRow> {
    let obj_scores: Vec<f64> = objects.iter().map(|o| o.object_score).collect();
    let obj_labels: Vec<bool> = objects.iter().map(|o| o.object_label).collect();
    let mut pts = Vec::new();
    let mut lbl = Vec::new();
    let mut regions = Vec::new();
    for o in objects {
        if o.point_scores.len() != o.point_labels.len() {
            return Err(GsError::config("point score/label count mismatch"));
        }
        let offset = pts.len();
        pts.extend_from_slice(o.point_scores);
        lbl.extend_from_slice(o.point_labels);
        regions.extend(o.regions.iter().map(|r| r.iter().map(|i| i + offset).collect::<Vec<_>>()));
    }
    Ok(MetricRow {
        o_auroc: defined(auroc(&obj_scores, &obj_labels))?,
        o_ap: defined(average_precision(&obj_scores, &obj_labels))?,
        p_auroc: defined(auroc(&pts, &lbl))?,
        p_pro: defined(pro(&pts, &lbl, &regions, fpr_limit))?,
        objects: objects.len(),
        anomalous_objects: obj_labels.iter().filter(|&&l| l).count(),
        points: pts.len(),
        anomalous_points: lbl.iter().filter(|&&l| l).count(),
    })
}

pub fn metric_table(objects: &[ObjectScores<'_>], fpr_limit: f64) -> Result<MetricTable> {
    let mut by_cat: BTreeMap<String, Vec<ObjectScores<'_>>> = BTreeMap::new();
    for o in objects {
        by_cat.entry(o.category.to_string()).or_default().push(o.clone());
    }
    let mut per_category = BTreeMap::new();
    for (cat, objs) in &by_cat {
        per_category.insert(cat.clone(), metric_row(objs, fpr_limit)?);
    }
    Ok(MetricTable { overall: metric_row(objects, fpr_limit)?, per_category })
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

impl MetricTable {
    /// Text table in the "(O-R, O-A) (P-R, P-P)" layout.
    pub fn format_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>14} {:>14}", "category", "(O-R, O-A)", "(P-R, P-P)");
        let row = |name: &str, r: &MetricRow| {
            format!(
                "{:<16} {:>14} {:>14}\n",
                name,
                format!("({}, {})", pct(r.o_auroc), pct(r.o_ap)),
                format!("({}, {})", pct(r.p_auroc), pct(r.p_pro))
            )
        };
        for (cat, r) in &self.per_category {
            s.push_str(&row(cat, r));
        }
        s.push_str(&row("mean", &self.overall));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(GsError::UndefinedMetric(_))));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert!(matches!(average_precision(&[0.3], &[false]), Err(GsError::UndefinedMetric(_))));
    }

    #[test]
    fn pro_perfect_and_constant() {
        let labels = [true, true, false, false, false, true];
        let scores: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
        let regions = vec![vec![0, 1], vec![5]];
        assert!((pro(&scores, &labels, &regions, 0.3).unwrap() - 1.0).abs() < 1e-12);
        // A constant prediction jumps straight from (0, 0) to (1, 1); the
        // area under y = x up to 0.3 is 0.045, normalized to 0.15.
        let c = pro(&[0.4; 6], &labels, &regions, 0.3).unwrap();
        assert!((c - 0.15).abs() < 1e-12);
        assert!(matches!(pro(&[0.1, 0.2], &[false, false], &[], 0.3), Err(GsError::UndefinedMetric(_))));
    }

    #[test]
    fn pro_region_averaging() {
        // Region A fully detected with zero false positives, region B missed.
        let labels = [true, true, true, true, false, false, false, false];
        let scores = [0.9, 0.9, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2];
        let regions = vec![vec![0, 1], vec![2, 3]];
        // Curve: (0,0) -> (0,0.5) -> (1,0.5) -> (1,1); area up to 0.3 is 0.15.
        let p = pro(&scores, &labels, &regions, 0.3).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_interpolates_at_limit() {
        let c = [(0.0, 0.0), (0.2, 1.0), (0.6, 1.0)];
        assert!((trapezoid_until(&c, 0.4) - (0.1 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn regions_from_knn_graph() {
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push([i as f64 * 0.01, 0.0, 0.0]);
        }
        for i in 0..5 {
            pts.push([10.0 + i as f64 * 0.01, 0.0, 0.0]);
        }
        pts.push([5.0, 0.0, 0.0]);
        let mut labels = vec![true; 10];
        labels.push(false);
        let r = knn_regions(&pts, &labels, 3);
        assert_eq!(r, vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
    }

    #[test]
    fn table_formats_and_serializes() {
        let ps = [0.1, 0.9, 0.2];
        let pl = [false, true, false];
        let qs = [0.3, 0.1, 0.2];
        let ql = [false; 3];
        let objs = vec![
            ObjectScores { category: "cube", object_score: 0.8, object_label: true, point_scores: &ps, point_labels: &pl, regions: vec![vec![1]] },
            ObjectScores { category: "cube", object_score: 0.2, object_label: false, point_scores: &qs, point_labels: &ql, regions: vec![] },
        ];
        let t = metric_table(&objs, 0.3).unwrap();
        assert_eq!(t.overall.o_auroc, Some(1.0));
        assert!(t.format_table().contains("(100.0, 100.0)"));
        let json = serde_json::to_string(&t).unwrap();
        let back: MetricTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
