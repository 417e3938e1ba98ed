use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::visible_count;
use crate::error::{Error, Result};

/// Which patches of one image are visible to the encoder.
///
/// The first `keep` entries of `permutation` are visible, in encoder token order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    permutation: Vec<usize>,
    keep: usize,
}

impl MaskPlan {
    pub fn new(permutation: Vec<usize>, keep: usize) -> Result<Self> {
        let n = permutation.len();
        let mut seen = vec![false; n];
        for &p in &permutation {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("{permutation:?} is not a permutation of 0..{n}")));
            }
        }
        if keep == 0 || keep > n {
            return Err(Error::invalid(format!("keep count {keep} outside 1..={n}")));
        }
        Ok(MaskPlan { permutation, keep })
    }

    /// Nothing masked, tokens in natural order.
    pub fn identity(n: usize) -> Self {
        MaskPlan { permutation: (0..n).collect(), keep: n }
    }

    pub fn from_rng<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
        }
        let keep = visible_count(n, ratio);
        if keep == 0 {
            return Err(Error::invalid(format!("mask ratio {ratio} leaves no visible patch out of {n}")));
        }
        let mut permutation: Vec<usize> = (0..n).collect();
        permutation.shuffle(rng);
        Ok(MaskPlan { permutation, keep })
    }

    pub fn num_patches(&self) -> usize {
        self.permutation.len()
    }

    pub fn num_visible(&self) -> usize {
        self.keep
    }

    pub fn num_masked(&self) -> usize {
        self.permutation.len() - self.keep
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn visible(&self) -> &[usize] {
        &self.permutation[..self.keep]
    }

    pub fn masked(&self) -> &[usize] {
        &self.permutation[self.keep..]
    }

    /// Per patch: `Some(slot)` of its encoder token if visible, `None` if masked.
    pub fn slots(&self) -> Vec<Option<usize>> {
        let mut slots = vec![None; self.permutation.len()];
        for (j, &p) in self.visible().iter().enumerate() {
            slots[p] = Some(j);
        }
        slots
    }
}

/// Seeded uniform random masking of `n` patches at ratio `r`.
pub fn random_masking(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    MaskPlan::from_rng(n, ratio, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ratio_keeps_a_quarter() {
        let plan = random_masking(196, 0.75, 3).unwrap();
        assert_eq!(plan.num_visible(), 49);
        assert_eq!(plan.num_masked(), 147);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let plan = random_masking(16, 0.0, 1).unwrap();
        assert_eq!(plan.num_visible(), 16);
        assert!(plan.masked().is_empty());
    }

    #[test]
    fn rejects_empty_visible_set() {
        assert!(random_masking(3, 0.9, 0).is_err());
        assert!(random_masking(16, 1.0, 0).is_err());
    }

    #[test]
    fn same_seed_same_plan() {
        assert_eq!(random_masking(64, 0.75, 9).unwrap(), random_masking(64, 0.75, 9).unwrap());
    }

    #[test]
    fn masking_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = 10_000;
        let mut counts = [0usize; 16];
        for _ in 0..draws {
            let plan = MaskPlan::from_rng(16, 0.75, &mut rng).unwrap();
            for &m in plan.masked() {
                counts[m] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.75).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn slots_partition_patches() {
        let plan = random_masking(64, 0.75, 5).unwrap();
        let slots = plan.slots();
        assert_eq!(slots.iter().filter(|s| s.is_some()).count(), 16);
        for (j, &p) in plan.visible().iter().enumerate() {
            assert_eq!(slots[p], Some(j));
        }
    }
}
