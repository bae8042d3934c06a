//! Brute-force k-nearest-neighbor queries over small point sets.

use rayon::prelude::*;

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Indices of the `k` nearest points to every point, the point itself included.
///
/// Rows are sorted by ascending distance; equal distances are ordered by index,
/// so the result is a pure function of the coordinates.
pub fn knn(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let k = k.min(points.len());
    points
        .par_iter()
        .map(|p| {
            let mut cand: Vec<(f64, usize)> =
                points.iter().enumerate().map(|(j, q)| (dist2(p, q), j)).collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Indices of the `k` nearest points in `points` for each query.
pub fn knn_query(points: &[[f64; 3]], queries: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let k = k.min(points.len());
    queries
        .par_iter()
        .map(|p| {
            let mut cand: Vec<(f64, usize)> =
                points.iter().enumerate().map(|(j, q)| (dist2(p, q), j)).collect();
            cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_includes_self_first() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        let nn = knn(&pts, 2);
        assert_eq!(nn[0], vec![0, 3]);
        assert_eq!(nn[1], vec![1, 3]);
        assert_eq!(nn[2], vec![2, 1]);
    }

    #[test]
    fn ties_break_by_index() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(knn(&pts, 2)[0], vec![0, 1]);
        assert_eq!(knn_query(&pts, &[[0.0, 0.0, 0.0]], 3)[0], vec![0, 1, 2]);
    }
}
