//! Empirical quantiles and the two batch statistics built on them:
//! tertile partitions of loss weights and IQR filtering of gradient norms.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Linear-interpolation quantile of an ascending-sorted sample
/// (position `alpha * (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], alpha: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = alpha * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(LabError::Partition("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LabError::Domain(format!("quantile level {alpha} outside [0, 1]")));
    }
    Ok(quantile_sorted(&sorted_copy(values)?, alpha))
}

fn sorted_copy(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(LabError::Numeric {
            index: i,
            what: "non-finite weight".into(),
        });
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Tertile membership of a batch by weight rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TertilePartition {
    pub top_idx: Vec<usize>,
    pub mid_idx: Vec<usize>,
    pub bot_idx: Vec<usize>,
    pub q13: f64,
    pub q23: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tertile {
    Top,
    Mid,
    Bot,
}

impl TertilePartition {
    /// Membership rule: top iff `w >= q_hi`, else bottom iff `w <= q_lo`,
    /// else middle. The precedence only matters when `q_lo == q_hi`.
    pub fn classify(w: f64, q_lo: f64, q_hi: f64) -> Tertile {
        if w >= q_hi {
            Tertile::Top
        } else if w <= q_lo {
            Tertile::Bot
        } else {
            Tertile::Mid
        }
    }

    pub fn membership(&self, n: usize) -> Vec<Tertile> {
        let mut out = vec![Tertile::Mid; n];
        for &i in &self.top_idx {
            out[i] = Tertile::Top;
        }
        for &i in &self.bot_idx {
            out[i] = Tertile::Bot;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.top_idx.len() + self.mid_idx.len() + self.bot_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.top_idx.len(), self.mid_idx.len(), self.bot_idx.len())
    }
}

/// Splits `weights` into top/middle/bottom groups at the `alphas` quantiles.
pub fn quantile_partition_at(weights: &[f64], alphas: (f64, f64)) -> Result<TertilePartition> {
    if weights.is_empty() {
        return Err(LabError::Partition("cannot partition an empty batch".into()));
    }
    if weights.len() < 3 {
        return Err(LabError::Partition(format!(
            "tertile partition needs at least 3 items, got {}",
            weights.len()
        )));
    }
    if !(0.0 <= alphas.0 && alphas.0 <= alphas.1 && alphas.1 <= 1.0) {
        return Err(LabError::Domain(format!("invalid quantile levels {alphas:?}")));
    }
    let sorted = sorted_copy(weights)?;
    let q13 = quantile_sorted(&sorted, alphas.0);
    let q23 = quantile_sorted(&sorted, alphas.1);
    Ok(partition_with_thresholds(weights, q13, q23))
}

pub fn quantile_partition(weights: &[f64]) -> Result<TertilePartition> {
    quantile_partition_at(weights, (1.0 / 3.0, 2.0 / 3.0))
}

/// Applies precomputed thresholds (e.g. from a larger reference sample).
pub fn partition_with_thresholds(weights: &[f64], q13: f64, q23: f64) -> TertilePartition {
    let mut p = TertilePartition {
        top_idx: Vec::new(),
        mid_idx: Vec::new(),
        bot_idx: Vec::new(),
        q13,
        q23,
    };
    for (i, &w) in weights.iter().enumerate() {
        match TertilePartition::classify(w, q13, q23) {
            Tertile::Top => p.top_idx.push(i),
            Tertile::Mid => p.mid_idx.push(i),
            Tertile::Bot => p.bot_idx.push(i),
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqrFilter {
    pub kept_indices: Vec<usize>,
    pub threshold: f64,
    pub q1: f64,
    pub q3: f64,
}

impl IqrFilter {
    pub fn removed(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|i| !self.kept_indices.contains(i)).collect()
    }
}

/// Keeps values at or below `Q3 + 1.5 (Q3 - Q1)`.
pub fn iqr_filter(norms: &[f64]) -> Result<IqrFilter> {
    if norms.len() < 4 {
        return Err(LabError::Partition(format!(
            "IQR filter needs at least 4 values, got {}",
            norms.len()
        )));
    }
    let sorted = sorted_copy(norms)?;
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let threshold = q3 + 1.5 * (q3 - q1);
    let kept_indices = norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n <= threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(IqrFilter {
        kept_indices,
        threshold,
        q1,
        q3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Sort-and-interpolate oracle written out longhand.
    fn oracle_quantile(xs: &[f64], alpha: f64) -> f64 {
        let mut s = xs.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = alpha * (s.len() as f64 - 1.0);
        let i = pos as usize;
        if i + 1 >= s.len() {
            return s[s.len() - 1];
        }
        s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
    }

    #[test]
    fn one_through_nine() {
        let w: Vec<f64> = (1..=9).map(f64::from).collect();
        let p = quantile_partition(&w).unwrap();
        assert!((p.q13 - oracle_quantile(&w, 1.0 / 3.0)).abs() < 1e-12);
        assert!((p.q13 - 11.0 / 3.0).abs() < 1e-12);
        assert!((p.q23 - 19.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.sizes(), (3, 3, 3));
        assert_eq!(p.bot_idx, vec![0, 1, 2]);
        assert_eq!(p.top_idx, vec![6, 7, 8]);
    }

    #[test]
    fn zeros_and_one() {
        let p = quantile_partition(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p.q13, 0.0);
        assert!((p.q23 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.bot_idx, vec![0, 1]);
        assert_eq!(p.top_idx, vec![2]);
        assert!(p.mid_idx.is_empty());
    }

    #[test]
    fn all_equal_goes_to_top() {
        let p = quantile_partition(&[0.4; 5]).unwrap();
        assert_eq!(p.q13, 0.4);
        assert_eq!(p.q23, 0.4);
        assert_eq!(p.sizes(), (5, 0, 0));
    }

    #[test]
    fn abs_advantage_example() {
        let p = quantile_partition(&[0.1, 0.5, 0.9]).unwrap();
        assert_eq!((p.top_idx.clone(), p.mid_idx.clone(), p.bot_idx.clone()), (vec![2], vec![1], vec![0]));
    }

    #[test]
    fn too_small_or_empty() {
        assert!(matches!(quantile_partition(&[]), Err(LabError::Partition(_))));
        assert!(matches!(quantile_partition(&[1.0, 2.0]), Err(LabError::Partition(_))));
        assert!(iqr_filter(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn iqr_examples() {
        let f = iqr_filter(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((f.q1, f.q3, f.threshold), (2.0, 4.0, 7.0));
        assert_eq!(f.kept_indices, vec![0, 1, 2, 3]);
        assert_eq!(f.removed(5), vec![4]);

        let f = iqr_filter(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (q1, q3) = (oracle_quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), oracle_quantile(&[1.0, 2.0, 3.0, 4.0], 0.75));
        assert_eq!((q1, q3), (1.75, 3.25));
        assert!((f.threshold - (q3 + 1.5 * (q3 - q1))).abs() < 1e-12);
        assert_eq!(f.kept_indices.len(), 4);

        let f = iqr_filter(&[2.5; 6]).unwrap();
        assert_eq!(f.threshold, 2.5);
        assert_eq!(f.kept_indices.len(), 6);
    }

    #[test]
    fn iqr_idempotent_on_examples() {
        for v in [vec![1.0, 2.0, 3.0, 4.0, 100.0], vec![1.0, 2.0, 3.0, 4.0]] {
            let f = iqr_filter(&v).unwrap();
            let kept: Vec<f64> = f.kept_indices.iter().map(|&i| v[i]).collect();
            let again = iqr_filter(&kept).unwrap();
            assert_eq!(again.kept_indices.len(), kept.len());
        }
    }

    proptest::proptest! {
        #[test]
        fn partition_is_disjoint_exhaustive_and_consistent(ws in proptest::collection::vec(-5.0f64..5.0, 3..40)) {
            let p = quantile_partition(&ws).unwrap();
            let mut all: Vec<usize> = p.top_idx.iter().chain(&p.mid_idx).chain(&p.bot_idx).copied().collect();
            all.sort();
            proptest::prop_assert_eq!(all, (0..ws.len()).collect::<Vec<_>>());
            proptest::prop_assert!(p.q13 <= p.q23);
            for &i in &p.top_idx { proptest::prop_assert!(ws[i] >= p.q23); }
            for &i in &p.bot_idx { proptest::prop_assert!(ws[i] <= p.q13 && ws[i] < p.q23); }
            for &i in &p.mid_idx { proptest::prop_assert!(p.q13 < ws[i] && ws[i] < p.q23); }
            proptest::prop_assert!((p.q13 - oracle_quantile(&ws, 1.0/3.0)).abs() < 1e-9);
        }
    }
}
