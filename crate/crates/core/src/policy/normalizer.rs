use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension affine map of `[min, max]` onto `[−1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ActionNormalizer {
    pub fn fit<'a>(dim: usize, actions: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut n = 0;
        for a in actions {
            if a.len() != dim {
                return Err(Error::dim(format!("action of length {} for dimension {dim}", a.len())));
            }
            for i in 0..dim {
                min[i] = min[i].min(a[i]);
                max[i] = max[i].max(a[i]);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::usage("cannot fit a normalizer on no actions"));
        }
        Ok(Self { min, max })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn range(&self, i: usize) -> f64 {
        let r = self.max[i] - self.min[i];
        if r > 1e-12 {
            r
        } else {
            1.0
        }
    }

    /// Normalizes a flattened `[L × D]` trajectory in place.
    pub fn normalize(&self, a: &mut [f64]) {
        let d = self.dim();
        for (j, v) in a.iter_mut().enumerate() {
            let i = j % d;
            *v = 2.0 * (*v - self.min[i]) / self.range(i) - 1.0;
        }
    }

    pub fn denormalize(&self, a: &mut [f64]) {
        let d = self.dim();
        for (j, v) in a.iter_mut().enumerate() {
            let i = j % d;
            *v = (*v + 1.0) * 0.5 * self.range(i) + self.min[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extremes_map_to_unit_interval() {
        let acts = [[0.5, -2.0], [-0.5, 4.0], [0.0, 1.0]];
        let n = ActionNormalizer::fit(2, acts.iter().map(|a| &a[..])).unwrap();
        let mut lo = vec![-0.5, -2.0];
        let mut hi = vec![0.5, 4.0];
        n.normalize(&mut lo);
        n.normalize(&mut hi);
        assert_eq!(lo, vec![-1.0, -1.0]);
        assert_eq!(hi, vec![1.0, 1.0]);
    }

    #[test]
    fn empty_fit_is_usage_error() {
        assert!(ActionNormalizer::fit(2, std::iter::empty()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(lo in -5.0..0.0f64, span in 0.01..10.0f64, t in proptest::collection::vec(0.0..1.0f64, 16)) {
            let acts = [[lo, lo], [lo + span, lo + span]];
            let n = ActionNormalizer::fit(2, acts.iter().map(|a| &a[..])).unwrap();
            let orig: Vec<f64> = t.iter().map(|u| lo + u * span).collect();
            let mut a = orig.clone();
            n.normalize(&mut a);
            prop_assert!(a.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            n.denormalize(&mut a);
            for (x, y) in a.iter().zip(&orig) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
