//! K-way disjoint token partitions and the attention masks they induce.
//!
//! Tokens are shuffled by a random permutation, the shuffled sequence is cut
//! at `K - 1` random split points, and attention is only allowed between
//! tokens of the same segment. No token is ever dropped.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    /// Spatial token indices of each subset, in shuffled order. May be empty.
    pub subsets: Vec<Vec<usize>>,
    /// Shuffled position → spatial index.
    pub perm: Rc<Vec<usize>>,
    /// Spatial index → shuffled position.
    pub inv_perm: Rc<Vec<usize>>,
    /// Segment boundaries in shuffled order, `0 = v_0 ≤ … ≤ v_K = N`.
    pub bounds: Vec<usize>,
}

impl Partition {
    /// Builds a partition from a permutation and `K - 1` split points in `0..=N`.
    pub fn from_splits(perm: Vec<usize>, splits: &[usize]) -> Result<Self> {
        let n = perm.len();
        if n == 0 {
            return Err(Error::InvalidRange("partition needs N >= 1".into()));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidRange(format!("{perm:?} is not a permutation")));
            }
        }
        if let Some(s) = splits.iter().find(|&&s| s > n) {
            return Err(Error::InvalidRange(format!("split point {s} exceeds N={n}")));
        }
        let mut bounds = Vec::with_capacity(splits.len() + 2);
        bounds.push(0);
        bounds.extend_from_slice(splits);
        bounds.push(n);
        bounds.sort_unstable();
        let subsets = bounds.windows(2).map(|w| perm[w[0]..w[1]].to_vec()).collect();
        let mut inv = vec![0; n];
        for (pos, &idx) in perm.iter().enumerate() {
            inv[idx] = pos;
        }
        Ok(Self { subsets, perm: Rc::new(perm), inv_perm: Rc::new(inv), bounds })
    }

    /// The trivial `K = 1` partition with the identity permutation.
    pub fn identity(n: usize) -> Self {
        Self::from_splits((0..n).collect(), &[]).expect("identity partition is valid")
    }

    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.subsets.iter().map(Vec::len).collect()
    }

    /// Subset id of each spatial token.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.n()];
        for (k, s) in self.subsets.iter().enumerate() {
            for &i in s {
                labels[i] = k;
            }
        }
        labels
    }

    /// Same partition with empty subsets removed.
    pub fn without_empty(&self) -> Self {
        let mut bounds = self.bounds.clone();
        bounds.dedup();
        let inner = &bounds[1..bounds.len() - 1];
        Self::from_splits(self.perm.as_ref().clone(), inner).expect("valid partition")
    }
}

/// Samples a uniform permutation of `0..n` and `k - 1` split points drawn
/// uniformly (with replacement) from `1..n`. Duplicate split points produce
/// empty subsets.
pub fn sample_partition<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Partition> {
    if k < 1 {
        return Err(Error::InvalidK(k));
    }
    if n < 1 {
        return Err(Error::InvalidRange("partition needs N >= 1".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let splits: Vec<usize> =
        (1..k).map(|_| if n >= 2 { rng.random_range(1..n) } else { n }).collect();
    Partition::from_splits(perm, &splits)
}

/// Boolean `[N, N]` attention mask over shuffled positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allow[i * n + j] = f(i, j);
            }
        }
        Self { n, allow }
    }

    pub fn all(n: usize) -> Self {
        Self { n, allow: vec![true; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.n..(i + 1) * self.n]
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn is_all(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// Permutes rows and columns: `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.n, |i, j| self.allowed(perm[i], perm[j]))
    }

    /// As a 0/1 tensor.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::from_fn([self.n, self.n], |i| if self.allow[i] { F::one() } else { F::zero() })
    }
}

/// Block outer product of the segment indicator matrix with itself.
pub fn build_attention_mask(part: &Partition) -> AttentionMask {
    let n = part.n();
    let mut segment = vec![0; n];
    for (k, w) in part.bounds.windows(2).enumerate() {
        for s in &mut segment[w[0]..w[1]] {
            *s = k;
        }
    }
    AttentionMask::from_fn(n, |i, j| segment[i] == segment[j])
}

/// Rows of `tokens` (spatial order) rearranged into shuffled order.
pub fn shuffle<F: Float>(tokens: &Tensor<F>, part: &Partition) -> Result<Tensor<F>> {
    check_len(tokens, part)?;
    Ok(tokens.gather_rows(&part.perm))
}

/// Rows of `tokens` (shuffled order) put back into spatial order.
pub fn reassemble<F: Float>(tokens: &Tensor<F>, part: &Partition) -> Result<Tensor<F>> {
    check_len(tokens, part)?;
    Ok(tokens.gather_rows(&part.inv_perm))
}

fn check_len<F: Float>(tokens: &Tensor<F>, part: &Partition) -> Result<()> {
    if tokens.ndim() != 2 || tokens.shape()[0] != part.n() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} tokens for a partition of {} indices",
            tokens.shape(),
            part.n()
        )));
    }
    Ok(())
}

/// Token-dropping mask for the naive-masking comparison: `true` = kept.
pub fn sample_naive_keep<R: Rng + ?Sized>(n: usize, mask_ratio: f64, rng: &mut R) -> Vec<bool> {
    let drop = ((n as f64) * mask_ratio.clamp(0.0, 1.0)).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut keep = vec![true; n];
    for &i in &idx[..drop.min(n.saturating_sub(1))] {
        keep[i] = false;
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k1_is_single_subset_and_full_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_partition(6, 1, &mut rng).unwrap();
        assert_eq!(p.sizes(), vec![6]);
        assert!(build_attention_mask(&p).is_all());
    }

    #[test]
    fn forced_even_splits() {
        let p = Partition::from_splits(vec![5, 3, 1, 0, 2, 4], &[4, 2]).unwrap();
        assert_eq!(p.sizes(), vec![2, 2, 2]);
        assert_eq!(p.subsets, vec![vec![5, 3], vec![1, 0], vec![2, 4]]);
    }

    #[test]
    fn duplicate_splits_make_empty_subset() {
        let p = Partition::from_splits(vec![0, 1, 2, 3], &[2, 2]).unwrap();
        assert_eq!(p.sizes(), vec![2, 0, 2]);
        let m = build_attention_mask(&p);
        assert_eq!(m, build_attention_mask(&p.without_empty()));
        assert_eq!(p.without_empty().k(), 2);
    }

    #[test]
    fn invalid_k_and_oversized_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(sample_partition(4, 0, &mut rng), Err(Error::InvalidK(0))));
        let p = sample_partition(3, 8, &mut rng).unwrap();
        assert_eq!(p.k(), 8);
        assert_eq!(p.sizes().iter().sum::<usize>(), 3);
        let single = sample_partition(1, 3, &mut rng).unwrap();
        assert_eq!(single.sizes().iter().sum::<usize>(), 1);
    }

    #[test]
    fn two_blocks_mask() {
        let p = Partition::from_splits(vec![0, 1, 2, 3], &[2]).unwrap();
        let m = build_attention_mask(&p);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allowed(i, j), (i < 2) == (j < 2));
            }
        }
    }

    #[test]
    fn reassemble_cases() {
        let t = Tensor::from_fn([4, 2], |i| i as f64);
        let id = Partition::identity(4);
        assert_eq!(reassemble(&t, &id).unwrap(), t);
        let rev = Partition::from_splits(vec![3, 2, 1, 0], &[]).unwrap();
        let r = reassemble(&t, &rev).unwrap();
        assert_eq!(r.data(), &[6., 7., 4., 5., 2., 3., 0., 1.]);
        assert!(reassemble(&Tensor::<f64>::zeros([3, 2]), &rev).is_err());
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let a = sample_partition(64, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_partition(64, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn naive_keep_ratio() {
        let keep = sample_naive_keep(100, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(keep.iter().filter(|&&k| !k).count(), 50);
    }
}
