//! Dynamic time warping and linear time-axis interpolation.
//!
//! ```
//! use scent::align::{dtw, Distance};
//! use scent::features::FeatureSequence;
//!
//! let a = FeatureSequence::from_frames(&[vec![0.0]]).unwrap();
//! let b = FeatureSequence::from_frames(&[vec![0.0], vec![0.0], vec![0.0]]).unwrap();
//! let path = dtw(&a, &b, Distance::Euclidean).unwrap();
//! assert_eq!(path.pairs(), &[(0, 0), (0, 1), (0, 2)]);
//! assert_eq!(path.cost(), 0.0);
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use crate::features::FeatureSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("cannot align an empty sequence")]
    Empty,
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("path does not cover a {source_frames}x{target_frames} grid")]
    PathMismatch {
        source_frames: usize,
        target_frames: usize,
    },
    #[error("interpolation ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("interpolated length would be {0} frames")]
    TooShort(usize),
}

/// Local frame distance used by [`dtw`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Euclidean,
    SquaredEuclidean,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Self::Euclidean => sq.sqrt(),
            Self::SquaredEuclidean => sq,
        }
    }
}

/// Monotone alignment from `(0, 0)` to `(T_x − 1, T_y − 1)` as
/// `(source, target)` index pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwPath {
    pairs: Vec<(usize, usize)>,
    cost: f64,
}

impl DtwPath {
    /// Build a path from explicit pairs, checking endpoints and step set.
    pub fn new(pairs: Vec<(usize, usize)>, cost: f64) -> Result<Self, AlignError> {
        let Some(&(si, ti)) = pairs.last() else {
            return Err(AlignError::Empty);
        };
        let bad = AlignError::PathMismatch {
            source_frames: si + 1,
            target_frames: ti + 1,
        };
        if pairs[0] != (0, 0) {
            return Err(bad);
        }
        for w in pairs.windows(2) {
            let step = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            if !matches!(step, (1, 0) | (0, 1) | (1, 1)) {
                return Err(bad);
            }
        }
        Ok(Self { pairs, cost })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn source_len(&self) -> usize {
        self.pairs.last().map_or(0, |p| p.0 + 1)
    }

    pub fn target_len(&self) -> usize {
        self.pairs.last().map_or(0, |p| p.1 + 1)
    }

    /// Recompute the cost of this path between two sequences.
    pub fn cost_between(&self, a: &FeatureSequence, b: &FeatureSequence, d: Distance) -> f64 {
        self.pairs
            .iter()
            .fold(0.0, |acc, &(i, j)| acc + d.eval(a.frame(i), b.frame(j)))
    }

    /// For each target frame, the first source frame paired with it.
    pub fn source_for_target(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.target_len()];
        for &(i, j) in &self.pairs {
            if out[j] == usize::MAX {
                out[j] = i;
            }
        }
        out
    }

    /// Nearest-index subsampling onto the attention grid: decoder step `t`
    /// looks up target frame `t · r` and reports its source frame divided by
    /// the encoder downsampling factor.
    pub fn encoder_track(&self, steps: usize, r: usize, downsample: usize) -> Vec<usize> {
        let src = self.source_for_target();
        (0..steps)
            .map(|t| src[(t * r).min(src.len() - 1)] / downsample)
            .collect()
    }

    /// Two tab-separated index columns, one pair per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("source\ttarget\n");
        for (i, j) in &self.pairs {
            writeln!(s, "{i}\t{j}").expect("writing to a String");
        }
        s
    }
}

/// Globally optimal monotone alignment with steps (1,0), (0,1) and (1,1).
/// Equal-cost predecessors resolve to the diagonal first, then (0,1), then
/// (1,0).
pub fn dtw(a: &FeatureSequence, b: &FeatureSequence, d: Distance) -> Result<DtwPath, AlignError> {
    let (n, m) = (a.frames(), b.frames());
    if n == 0 || m == 0 {
        return Err(AlignError::Empty);
    }
    if a.dims() != b.dims() {
        return Err(AlignError::DimensionMismatch(a.dims(), b.dims()));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let local = d.eval(a.frame(i), b.frame(j));
            acc[i * m + j] = if i == 0 && j == 0 {
                local
            } else {
                let (_, prev) = best_predecessor(&acc, m, i, j);
                prev + local
            };
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let ((pi, pj), _) = best_predecessor(&acc, m, i, j);
        i = pi;
        j = pj;
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath {
        pairs,
        cost: acc[n * m - 1],
    })
}

fn best_predecessor(acc: &[f64], m: usize, i: usize, j: usize) -> ((usize, usize), f64) {
    let mut best = ((usize::MAX, usize::MAX), f64::INFINITY);
    let candidates = [
        (i > 0 && j > 0).then(|| (i - 1, j - 1)),
        (j > 0).then(|| (i, j - 1)),
        (i > 0).then(|| (i - 1, j)),
    ];
    for (pi, pj) in candidates.into_iter().flatten() {
        let v = acc[pi * m + pj];
        if v < best.1 {
            best = ((pi, pj), v);
        }
    }
    best
}

/// Resample `a` onto the target axis of `path`, averaging the source frames
/// that share a target index.
pub fn warp_to_target(a: &FeatureSequence, path: &DtwPath) -> Result<FeatureSequence, AlignError> {
    if path.source_len() != a.frames() {
        return Err(AlignError::PathMismatch {
            source_frames: a.frames(),
            target_frames: path.target_len(),
        });
    }
    let mut out = FeatureSequence::zeros(path.target_len(), a.dims());
    let mut counts = vec![0usize; path.target_len()];
    for &(i, j) in path.pairs() {
        counts[j] += 1;
        for (o, v) in out.frame_mut(j).iter_mut().zip(a.frame(i)) {
            *o += v;
        }
    }
    for (j, c) in counts.iter().enumerate() {
        out.frame_mut(j).iter_mut().for_each(|v| *v /= *c as f64);
    }
    Ok(out)
}

/// Linear interpolation along time to `round(ratio · T_x)` frames with both
/// endpoints preserved.
pub fn interpolate_source(a: &FeatureSequence, ratio: f64) -> Result<FeatureSequence, AlignError> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(AlignError::InvalidRatio(ratio));
    }
    if a.frames() == 0 {
        return Err(AlignError::Empty);
    }
    let len = (ratio * a.frames() as f64).round() as usize;
    if len < 1 {
        return Err(AlignError::TooShort(len));
    }
    let mut out = FeatureSequence::zeros(len, a.dims());
    let last = a.frames() - 1;
    for j in 0..len {
        let pos = if len == 1 {
            0.0
        } else {
            j as f64 * last as f64 / (len - 1) as f64
        };
        let lo = (pos.floor() as usize).min(last);
        let hi = (lo + 1).min(last);
        let frac = pos - lo as f64;
        for (d, o) in out.frame_mut(j).iter_mut().enumerate() {
            *o = if frac == 0.0 {
                a.get(lo, d)
            } else {
                (1.0 - frac) * a.get(lo, d) + frac * a.get(hi, d)
            };
        }
    }
    Ok(out)
}

/// Total target duration over total source duration for paired items.
pub fn duration_ratio(pairs: &[(f64, f64)]) -> Result<f64, AlignError> {
    let (src, tgt) = pairs
        .iter()
        .fold((0.0, 0.0), |(s, t), (a, b)| (s + a, t + b));
    if pairs.is_empty() || src <= 0.0 {
        return Err(AlignError::Empty);
    }
    Ok(tgt / src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::from_frames(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, frames: usize, dims: usize) -> FeatureSequence {
        let data = (0..frames * dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureSequence::new(frames, dims, data).unwrap()
    }

    fn brute_force(a: &FeatureSequence, b: &FeatureSequence, d: Distance) -> f64 {
        fn go(a: &FeatureSequence, b: &FeatureSequence, d: Distance, i: usize, j: usize, acc: f64) -> f64 {
            let acc = acc + d.eval(a.frame(i), b.frame(j));
            if i + 1 == a.frames() && j + 1 == b.frames() {
                return acc;
            }
            let mut best = f64::INFINITY;
            for (di, dj) in [(1, 1), (0, 1), (1, 0)] {
                if i + di < a.frames() && j + dj < b.frames() {
                    best = best.min(go(a, b, d, i + di, j + dj, acc));
                }
            }
            best
        }
        go(a, b, d, 0, 0, 0.0)
    }

    #[test]
    fn identical_sequences_align_diagonally() {
        let a = seq(&[&[0.0, 1.0], &[2.0, 0.5], &[1.0, 1.0], &[-1.0, 0.0]]);
        let p = dtw(&a, &a, Distance::Euclidean).unwrap();
        assert_eq!(p.pairs(), &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(p.cost(), 0.0);
    }

    #[test]
    fn constant_sequences_prefer_the_diagonal() {
        let a = seq(&[&[0.0][..]; 3]);
        let b = seq(&[&[0.0][..]; 5]);
        let p = dtw(&a, &b, Distance::Euclidean).unwrap();
        assert_eq!(p.pairs(), &[(0, 0), (0, 1), (0, 2), (1, 3), (2, 4)]);
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let a = { let n = rng.random_range(1..=6); random_seq(&mut rng, n, 3) };
            let b = { let n = rng.random_range(1..=6); random_seq(&mut rng, n, 3) };
            let p = dtw(&a, &b, Distance::Euclidean).unwrap();
            assert_eq!(p.cost(), brute_force(&a, &b, Distance::Euclidean));
            assert_eq!(p.cost(), p.cost_between(&a, &b, Distance::Euclidean));
            DtwPath::new(p.pairs().to_vec(), p.cost()).unwrap();
            let q = dtw(&b, &a, Distance::Euclidean).unwrap();
            assert!((p.cost() - q.cost()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        let a = seq(&[&[0.0]]);
        let b = seq(&[&[0.0, 1.0]]);
        assert_eq!(
            dtw(&a, &b, Distance::Euclidean).unwrap_err(),
            AlignError::DimensionMismatch(1, 2)
        );
        assert!(DtwPath::new(vec![(0, 0), (2, 1)], 0.0).is_err());
        assert!(DtwPath::new(vec![(1, 0)], 0.0).is_err());
    }

    #[test]
    fn warping_identity_constant_and_averaging() {
        let a = seq(&[&[1.0], &[2.0], &[3.0]]);
        let diag = DtwPath::new(vec![(0, 0), (1, 1), (2, 2)], 0.0).unwrap();
        assert_eq!(warp_to_target(&a, &diag).unwrap(), a);
        let single = seq(&[&[4.0, 5.0]]);
        let fan = DtwPath::new(vec![(0, 0), (0, 1), (0, 2)], 0.0).unwrap();
        let w = warp_to_target(&single, &fan).unwrap();
        assert!(w.iter_frames().all(|f| f == [4.0, 5.0]));
        let merge = DtwPath::new(vec![(0, 0), (1, 0), (2, 1)], 0.0).unwrap();
        assert_eq!(warp_to_target(&a, &merge).unwrap(), seq(&[&[1.5], &[3.0]]));
        assert!(warp_to_target(&single, &merge).is_err());
    }

    #[test]
    fn warped_source_is_no_farther_from_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..30 {
            let a = { let n = rng.random_range(2..12); random_seq(&mut rng, n, 2) };
            let b = { let n = rng.random_range(2..12); random_seq(&mut rng, n, 2) };
            let p = dtw(&a, &b, Distance::Euclidean).unwrap();
            let w = warp_to_target(&a, &p).unwrap();
            let q = dtw(&w, &b, Distance::Euclidean).unwrap();
            assert!(q.cost() <= p.cost() + 1e-12);
        }
    }

    #[test]
    fn interpolation_cases() {
        let a = seq(&[&[1.0, -2.0], &[3.0, 0.5], &[0.0, 0.0]]);
        assert_eq!(interpolate_source(&a, 1.0).unwrap(), a);
        let two = seq(&[&[0.0], &[3.0]]);
        let up = interpolate_source(&two, 2.0).unwrap();
        assert_eq!(up.frames(), 4);
        for (j, want) in [0.0, 1.0, 2.0, 3.0].iter().enumerate() {
            assert!((up.get(j, 0) - want).abs() < 1e-12);
        }
        let flat = seq(&[&[0.7][..]; 5]);
        let f = interpolate_source(&flat, 0.6).unwrap();
        assert_eq!(f.frames(), 3);
        assert!(f.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert_eq!(interpolate_source(&a, 0.1).unwrap_err(), AlignError::TooShort(0));
        assert!(interpolate_source(&a, -1.0).is_err());
    }

    #[test]
    fn interpolation_stays_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_seq(&mut rng, 17, 4);
        let b = interpolate_source(&a, 1.37).unwrap();
        for d in 0..4 {
            let col = |s: &FeatureSequence| (0..s.frames()).map(|t| s.get(t, d)).collect::<Vec<_>>();
            let (ca, cb) = (col(&a), col(&b));
            let (lo, hi) = ca.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
            assert!(cb.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
            assert_eq!(cb[0], ca[0]);
            assert_eq!(cb[cb.len() - 1], ca[ca.len() - 1]);
        }
    }

    #[test]
    fn ratio_of_durations() {
        assert_eq!(duration_ratio(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), 1.0);
        assert_eq!(duration_ratio(&[(1.0, 2.0), (0.5, 1.0)]).unwrap(), 2.0);
        assert!(duration_ratio(&[]).is_err());
    }

    #[test]
    fn encoder_track_subsamples_nearest() {
        let p = DtwPath::new(vec![(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (7, 7)], 0.0).unwrap();
        assert_eq!(p.encoder_track(4, 2, 4), vec![0, 0, 1, 1]);
        assert!(p.to_tsv().starts_with("source\ttarget\n0\t0\n1\t1\n"));
    }
}
