//! Permutation language modeling: factorization orders, the attention masks
//! they induce, and the loss averaged over sampled orders.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, TensorError, Var};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PermutationError {
    #[error("order {0:?} is not a permutation of 0..{1}")]
    NotABijection(Vec<usize>, usize),
}

/// Order in which target positions are predicted.
///
/// `order[s]` is the position predicted at step `s`; `rank` is its inverse.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    order: Vec<usize>,
    rank: Vec<usize>,
}

impl Permutation {
    pub fn from_order(order: Vec<usize>) -> Result<Self, PermutationError> {
        let n = order.len();
        let mut rank = vec![usize::MAX; n];
        for (step, &pos) in order.iter().enumerate() {
            if pos >= n || rank[pos] != usize::MAX {
                return Err(PermutationError::NotABijection(order, n));
            }
            rank[pos] = step;
        }
        Ok(Self { order, rank })
    }

    /// Left-to-right order.
    pub fn identity(len: usize) -> Self {
        let order: Vec<usize> = (0..len).collect();
        Self {
            rank: order.clone(),
            order,
        }
    }

    /// Right-to-left order.
    pub fn reversed(len: usize) -> Self {
        Self::from_order((0..len).rev().collect()).expect("reversal is a bijection")
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn rank(&self) -> &[usize] {
        &self.rank
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &p)| i == p)
    }
}

fn factorial_at_least(n: usize, k: usize) -> bool {
    let mut f: usize = 1;
    for i in 2..=n {
        f = f.saturating_mul(i);
        if f >= k {
            return true;
        }
    }
    f >= k
}

/// Draw `k` orders over `len` positions.
///
/// The first is always left-to-right and the second (when `k >= 2`)
/// right-to-left. The rest are uniform; they are distinct from each other
/// and from the first two whenever `len!` is large enough.
pub fn sample_permutations<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<Permutation> {
    assert!(len >= 1 && k >= 1, "need len >= 1 and k >= 1");
    let mut perms = Vec::with_capacity(k);
    perms.push(Permutation::identity(len));
    if k >= 2 {
        perms.push(Permutation::reversed(len));
    }
    let distinct = factorial_at_least(len, k);
    while perms.len() < k {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        let p = Permutation::from_order(order).expect("shuffle keeps a bijection");
        if distinct && perms.contains(&p) {
            continue;
        }
        perms.push(p);
    }
    perms
}

/// Boolean attention masks for one permutation, `len x len`, row-major.
///
/// Row `i` is the query for position `i`; entry `j` says whether it may see
/// the content at position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    len: usize,
    content: Vec<bool>,
    query: Vec<bool>,
}

impl MaskPair {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn content(&self, i: usize, j: usize) -> bool {
        self.content[i * self.len + j]
    }

    pub fn query(&self, i: usize, j: usize) -> bool {
        self.query[i * self.len + j]
    }

    pub fn content_mask(&self) -> &[bool] {
        &self.content
    }

    pub fn query_mask(&self) -> &[bool] {
        &self.query
    }

    pub fn additive_content(&self) -> Arc<Vec<f64>> {
        additive(&self.content)
    }

    pub fn additive_query(&self) -> Arc<Vec<f64>> {
        additive(&self.query)
    }
}

/// `0` where allowed, `-inf` where not.
pub fn additive(allowed: &[bool]) -> Arc<Vec<f64>> {
    Arc::new(
        allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect(),
    )
}

/// Position `i` sees exactly the positions predicted before it.
pub fn masks_from_permutation(p: &Permutation) -> MaskPair {
    let n = p.len();
    let rank = p.rank();
    let mut content = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            content[i * n + j] = rank[j] < rank[i];
        }
    }
    MaskPair {
        len: n,
        query: content.clone(),
        content,
    }
}

/// Cloze mask for refinement: every query sees all of the first `visible`
/// content positions except itself.
pub fn cloze_mask(len: usize, visible: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..visible.min(len) {
            m[i * len + j] = i != j;
        }
    }
    m
}

/// Averaged cross-entropy over `K` logit sets, one per permutation.
///
/// Each set is `[T, V]` and is scored against the same `targets`.
pub fn plm_loss(g: &mut Graph<'_>, logit_sets: &[Var], targets: &[usize]) -> Result<Var, TensorError> {
    if logit_sets.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "plm_loss",
            detail: "no logit sets".into(),
        });
    }
    let dims = g.value(logit_sets[0]).dims().to_vec();
    let mut losses = Vec::with_capacity(logit_sets.len());
    for &logits in logit_sets {
        if g.value(logits).dims() != dims.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "plm_loss",
                detail: format!("{:?} vs {:?}", g.value(logits).dims(), dims),
            });
        }
        losses.push(g.softmax_ce(logits, targets, Some(crate::shaping::PAD))?);
    }
    g.mean(&losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(m: &MaskPair) -> Vec<String> {
        (0..m.len())
            .map(|i| {
                (0..m.len())
                    .map(|j| if m.content(i, j) { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn forced_first_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_permutations(4, 1, &mut rng);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].order(), &[0, 1, 2, 3]);
        let p = sample_permutations(4, 2, &mut rng);
        assert_eq!(p[1].order(), &[3, 2, 1, 0]);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let a = sample_permutations(3, 3, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_permutations(3, 3, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        let third = &a[2];
        let mut sorted = third.order().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(!third.is_identity());
        assert_ne!(third, &Permutation::reversed(3));
    }

    #[test]
    fn short_sequences_repeat_when_needed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_permutations(1, 3, &mut rng);
        assert!(p.iter().all(|p| p.order() == [0]));
        let p = sample_permutations(2, 5, &mut rng);
        assert_eq!(p.len(), 5);
    }

    #[test]
    fn rejects_non_bijection() {
        assert!(Permutation::from_order(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_order(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn mask_fixtures() {
        let m = masks_from_permutation(&Permutation::identity(3));
        assert_eq!(rows(&m), ["000", "100", "110"]);
        let m = masks_from_permutation(&Permutation::from_order(vec![2, 0, 1]).unwrap());
        assert_eq!(rows(&m), ["001", "101", "000"]);
        assert_eq!(m.query_mask(), m.content_mask());
    }

    #[test]
    fn cloze_excludes_self_and_padding() {
        let m = cloze_mask(3, 2);
        assert_eq!(
            m,
            vec![false, true, false, true, false, false, true, true, false]
        );
    }

    #[test]
    fn loss_of_equal_sets_is_that_set() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let l = g.leaf(Tensor::new(vec![2, 5], vals).unwrap());
        let single = plm_loss(&mut g, &[l], &[1, 4]).unwrap();
        let triple = plm_loss(&mut g, &[l, l, l], &[1, 4]).unwrap();
        assert!((g.value(single).item() - g.value(triple).item()).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_mismatched_sets() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 5]));
        let b = g.leaf(Tensor::zeros(&[3, 5]));
        assert!(plm_loss(&mut g, &[a, b], &[1, 1]).is_err());
        assert!(plm_loss(&mut g, &[], &[1, 1]).is_err());
    }
}
