//! Adaptive binning for report aggregation: greedy left-to-right bins
//! holding at least `min_per_bin` points and spanning at least
//! `min_log10_width` on the log10 x-axis; medians with IQR per bin.

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub x_lo: f64,
    pub x_hi: f64,
    pub count: usize,
    /// Median x of the members, used as the bin's plot position.
    pub x_median: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Bin {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and nonempty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Greedy left-to-right adaptive binning of (x, y) points. Points with
/// non-finite coordinates or x <= 0 are skipped (x is log-scaled).
/// Fewer than `min_per_bin` usable points collapse to a single bin; a
/// trailing underfull group merges into the previous bin.
pub fn adaptive_bin_summary(
    points: &[(f64, f64)],
    min_per_bin: usize,
    min_log10_width: f64,
) -> Vec<Bin> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite() && *x > 0.0)
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    if pts.is_empty() {
        return Vec::new();
    }

    let mut groups: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut current: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < pts.len() {
        // Equal x-values always share a bin so the result does not depend
        // on the input order of ties.
        let mut j = i;
        while j < pts.len() && pts[j].0 == pts[i].0 {
            j += 1;
        }
        current.extend_from_slice(&pts[i..j]);
        i = j;
        let span = (current.last().unwrap().0 / current[0].0).log10();
        if current.len() >= min_per_bin && span >= min_log10_width {
            groups.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        match groups.last_mut() {
            Some(prev) => prev.extend_from_slice(&current),
            None => groups.push(current),
        }
    }

    groups
        .into_iter()
        .map(|g| {
            let mut xs: Vec<f64> = g.iter().map(|p| p.0).collect();
            let mut ys: Vec<f64> = g.iter().map(|p| p.1).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Bin {
                x_lo: xs[0],
                x_hi: *xs.last().unwrap(),
                count: g.len(),
                x_median: quantile(&xs, 0.5),
                median: quantile(&ys, 0.5),
                q1: quantile(&ys, 0.25),
                q3: quantile(&ys, 0.75),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ten_identical_points_give_one_bin_with_zero_iqr() {
        let pts = vec![(5.0, 2.0); 10];
        let bins = adaptive_bin_summary(&pts, 10, 0.1);
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].count, 10);
        assert_eq!(bins[0].median, 2.0);
        assert_eq!(bins[0].iqr(), 0.0);
    }

    #[test]
    fn three_decades_ten_each_give_three_bins() {
        let mut pts = Vec::new();
        for d in 0..3 {
            for k in 0..10 {
                let x = 10f64.powi(d) * (1.0 + 0.05 * k as f64);
                pts.push((x, d as f64));
            }
        }
        let bins = adaptive_bin_summary(&pts, 10, 0.1);
        assert_eq!(bins.len(), 3);
        for (d, bin) in bins.iter().enumerate() {
            assert_eq!(bin.count, 10);
            assert_eq!(bin.median, d as f64);
        }
    }

    #[test]
    fn too_few_points_collapse_to_single_bin() {
        let pts = vec![(1.0, 1.0), (10.0, 2.0), (100.0, 3.0)];
        let bins = adaptive_bin_summary(&pts, 10, 0.1);
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].count, 3);
        assert_eq!(bins[0].median, 2.0);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|_| (10f64.powf(rng.gen_range(0.0..3.0)), rng.gen_range(-1.0..1.0)))
            .collect();
        let bins = adaptive_bin_summary(&pts, 10, 0.1);
        let mut shuffled = pts.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        assert_eq!(bins, adaptive_bin_summary(&shuffled, 10, 0.1));
    }

    #[test]
    fn bin_stats_match_brute_force_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|_| (10f64.powf(rng.gen_range(0.0..2.5)), rng.gen_range(0.0..5.0)))
            .collect();
        let bins = adaptive_bin_summary(&pts, 10, 0.1);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 200);
        for bin in &bins {
            // Recompute from membership by x-range.
            let mut ys: Vec<f64> = pts
                .iter()
                .filter(|(x, _)| *x >= bin.x_lo && *x <= bin.x_hi)
                .map(|(_, y)| *y)
                .collect();
            assert_eq!(ys.len(), bin.count);
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = if ys.len() % 2 == 1 {
                ys[ys.len() / 2]
            } else {
                0.5 * (ys[ys.len() / 2 - 1] + ys[ys.len() / 2])
            };
            assert!((bin.median - mid).abs() < 1e-12);
            assert!(bin.q1 <= bin.median && bin.median <= bin.q3);
        }
    }

    #[test]
    fn non_finite_and_nonpositive_points_are_skipped() {
        let mut pts = vec![(5.0, 2.0); 10];
        pts.push((f64::NAN, 1.0));
        pts.push((3.0, f64::INFINITY));
        pts.push((-1.0, 0.0));
        pts.push((0.0, 0.0));
        let bins = adaptive_bin_summary(&pts, 10, 0.1);
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].count, 10);
    }

    #[test]
    fn bins_satisfy_both_minima_except_possibly_the_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<(f64, f64)> = (0..500)
            .map(|_| (10f64.powf(rng.gen_range(0.0..4.0)), rng.gen_range(0.0..1.0)))
            .collect();
        let bins = adaptive_bin_summary(&pts, 10, 0.1);
        assert!(bins.len() > 1);
        for bin in &bins[..bins.len() - 1] {
            assert!(bin.count >= 10);
            assert!((bin.x_hi / bin.x_lo).log10() >= 0.1);
        }
    }
}
