//! Channel permutation indices and their offline composition.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static CONSTRUCTIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of permutation indices built on the current thread so far.
///
/// Inference code asserts this does not move while a compiled plan runs.
pub fn constructions() -> u64 {
    CONSTRUCTIONS.with(Cell::get)
}

fn note_construction() {
    CONSTRUCTIONS.with(|c| c.set(c.get() + 1));
}

/// A bijection on `0..n` stored together with its inverse.
///
/// Convention: `perm[slot]` names the source element placed at `slot`, so gathering
/// `x[perm[0]], x[perm[1]], ...` applies the permutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PermutationIndex {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl PermutationIndex {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut inverse = vec![usize::MAX; n];
        for (slot, &src) in perm.iter().enumerate() {
            if src >= n {
                return Err(Error::Range(format!("permutation entry {src} >= {n}")));
            }
            if inverse[src] != usize::MAX {
                return Err(Error::Range(format!("permutation repeats {src}")));
            }
            inverse[src] = slot;
        }
        note_construction();
        Ok(Self { perm, inverse })
    }

    pub fn identity(n: usize) -> Self {
        note_construction();
        Self {
            perm: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverted(&self) -> Self {
        note_construction();
        Self {
            perm: self.inverse.clone(),
            inverse: self.perm.clone(),
        }
    }

    /// Apply to a slice: `out[slot] = values[perm[slot]]`.
    pub fn apply<V: Copy>(&self, values: &[V]) -> Vec<V> {
        self.perm.iter().map(|&p| values[p]).collect()
    }
}

impl TryFrom<Vec<usize>> for PermutationIndex {
    type Error = Error;

    fn try_from(perm: Vec<usize>) -> Result<Self> {
        Self::new(perm)
    }
}

impl From<PermutationIndex> for Vec<usize> {
    fn from(p: PermutationIndex) -> Self {
        p.perm
    }
}

/// Stable sort of element indices by group id: members of group 0 first, in original order.
pub fn sort_by_group(assignment: &[usize]) -> PermutationIndex {
    let mut order: Vec<usize> = (0..assignment.len()).collect();
    order.sort_by_key(|&i| assignment[i]);
    PermutationIndex::new(order).expect("sorted indices form a permutation")
}

/// Merge a producer's output order with a consumer's group-sorted input order.
///
/// `prev_output_order.perm()[p]` is the logical channel stored at physical slot `p`;
/// `this_input_sort.perm()[i]` is the logical channel the consumer needs at slot `i`.
/// The result maps each consumer slot straight to the physical slot to read.
pub fn merge_indices(
    prev_output_order: &PermutationIndex,
    this_input_sort: &PermutationIndex,
) -> Result<PermutationIndex> {
    if prev_output_order.len() != this_input_sort.len() {
        return Err(Error::dim(
            "permutation length",
            prev_output_order.len(),
            this_input_sort.len(),
        ));
    }
    let merged = this_input_sort
        .perm
        .iter()
        .map(|&logical| prev_output_order.inverse[logical])
        .collect();
    PermutationIndex::new(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> PermutationIndex {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        PermutationIndex::new(v).unwrap()
    }

    #[test]
    fn stable_group_sort() {
        assert_eq!(sort_by_group(&[1, 0, 1, 0]).perm(), &[1, 3, 0, 2]);
        assert!(sort_by_group(&[0, 0, 1, 1]).is_identity());
        assert!(sort_by_group(&[2, 2, 2]).is_identity());
    }

    #[test]
    fn rejects_non_bijections() {
        assert!(PermutationIndex::new(vec![0, 0]).is_err());
        assert!(PermutationIndex::new(vec![0, 2]).is_err());
    }

    #[test]
    fn merge_with_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_perm(7, &mut rng);
        let id = PermutationIndex::identity(7);
        assert_eq!(merge_indices(&id, &p).unwrap(), p);
        assert_eq!(merge_indices(&p, &id).unwrap().perm(), p.inverse());
    }

    #[test]
    fn merge_length_mismatch() {
        let a = PermutationIndex::identity(3);
        let b = PermutationIndex::identity(4);
        assert!(merge_indices(&a, &b).is_err());
    }

    #[test]
    fn merge_matches_element_chase() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let prev = random_perm(8, &mut rng);
            let this = random_perm(8, &mut rng);
            let merged = merge_indices(&prev, &this).unwrap();
            // physical buffer: slot p holds logical channel prev[p]
            let physical: Vec<usize> = prev.perm().to_vec();
            for slot in 0..8 {
                let wanted = this.perm()[slot];
                let found = (0..8).find(|&p| physical[p] == wanted).unwrap();
                assert_eq!(merged.perm()[slot], found);
                assert_eq!(physical[merged.perm()[slot]], wanted);
            }
        }
    }

    #[test]
    fn counts_constructions() {
        let before = constructions();
        let _ = PermutationIndex::identity(3);
        let _ = sort_by_group(&[1, 0]);
        assert_eq!(constructions(), before + 2);
    }

    proptest! {
        #[test]
        fn inverse_round_trips(seed in 0u64..500, n in 1usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_perm(n, &mut rng);
            let values: Vec<usize> = (100..100 + n).collect();
            let there = p.apply(&values);
            let back = p.inverted().apply(&there);
            prop_assert_eq!(back, values);
        }

        #[test]
        fn merges_compose(seed in 0u64..500, n in 1usize..12) {
            // reading a-order through merge(a, b) then merge(b, c) equals merge(a, c)
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_perm(n, &mut rng), random_perm(n, &mut rng), random_perm(n, &mut rng));
            let ab = merge_indices(&a, &b).unwrap();
            let bc = merge_indices(&b, &c).unwrap();
            let via: Vec<usize> = (0..n).map(|i| ab.perm()[bc.perm()[i]]).collect();
            prop_assert_eq!(via, merge_indices(&a, &c).unwrap().perm().to_vec());
        }
    }
}
