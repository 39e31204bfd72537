//! Balanced binary tree over the joint vocabulary.
//!
//! A span of `n` leaves splits into `ceil(n/2)` on the left and `floor(n/2)`
//! on the right. Internal nodes are numbered in pre-order (root = 0), so the
//! tree over `J` leaves has exactly `J - 1` internal nodes and every path is
//! at most `ceil(log2 J)` long. Words are placed on leaves by a seeded
//! uniform permutation.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTree {
    seed: u64,
    /// `leaf_words[p]` is the word stored on the `p`-th leaf, left to right.
    leaf_words: Vec<usize>,
    offsets: Vec<usize>,
    nodes: Vec<usize>,
    bits: Vec<u8>,
}

impl WordTree {
    /// Builds the tree for `j` words with a seeded leaf assignment.
    pub fn build_balanced(j: usize, seed: u64) -> Result<Self> {
        if j < 2 {
            return Err(Error::InvalidArgument(format!(
                "word tree needs at least 2 words, got {j}"
            )));
        }
        let mut leaf_words: Vec<usize> = (0..j).collect();
        leaf_words.shuffle(&mut seeded_rng(seed, 0));
        Self::from_leaf_words(leaf_words, seed)
    }

    /// Rebuilds a tree from an explicit leaf permutation.
    pub fn from_leaf_words(leaf_words: Vec<usize>, seed: u64) -> Result<Self> {
        let j = leaf_words.len();
        if j < 2 {
            return Err(Error::InvalidArgument(format!(
                "word tree needs at least 2 words, got {j}"
            )));
        }
        let mut seen = vec![false; j];
        for &w in &leaf_words {
            if w >= j || seen[w] {
                return Err(Error::InvalidArgument(
                    "leaf assignment is not a permutation".into(),
                ));
            }
            seen[w] = true;
        }

        // Paths per leaf position, filled by the recursive split.
        let mut leaf_paths: Vec<Vec<(usize, u8)>> = vec![Vec::new(); j];
        let mut next_node = 0;
        let mut prefix = Vec::new();
        split(0, j, &mut next_node, &mut prefix, &mut leaf_paths);
        debug_assert_eq!(next_node, j - 1);

        let mut by_word: Vec<&[(usize, u8)]> = vec![&[]; j];
        for (pos, &w) in leaf_words.iter().enumerate() {
            by_word[w] = &leaf_paths[pos];
        }
        let mut offsets = Vec::with_capacity(j + 1);
        let mut nodes = Vec::new();
        let mut bits = Vec::new();
        offsets.push(0);
        for path in by_word {
            for &(n, b) in path {
                nodes.push(n);
                bits.push(b);
            }
            offsets.push(nodes.len());
        }
        Ok(WordTree {
            seed,
            leaf_words,
            offsets,
            nodes,
            bits,
        })
    }

    /// Number of leaves `J`.
    pub fn num_words(&self) -> usize {
        self.leaf_words.len()
    }

    /// Number of internal nodes `T = J - 1`.
    pub fn num_nodes(&self) -> usize {
        self.leaf_words.len() - 1
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn leaf_words(&self) -> &[usize] {
        &self.leaf_words
    }

    /// Node path (root first) and left/right bits (`0` = left) of word `v`.
    pub fn path(&self, v: usize) -> Result<(&[usize], &[u8])> {
        if v >= self.num_words() {
            return Err(Error::bounds("joint index", v, self.num_words()));
        }
        Ok(self.path_unchecked(v))
    }

    #[inline]
    pub(crate) fn path_unchecked(&self, v: usize) -> (&[usize], &[u8]) {
        let (lo, hi) = (self.offsets[v], self.offsets[v + 1]);
        (&self.nodes[lo..hi], &self.bits[lo..hi])
    }

    pub fn max_depth(&self) -> usize {
        self.offsets
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }
}

fn split(
    lo: usize,
    hi: usize,
    next_node: &mut usize,
    prefix: &mut Vec<(usize, u8)>,
    out: &mut [Vec<(usize, u8)>],
) {
    let n = hi - lo;
    if n == 1 {
        out[lo] = prefix.clone();
        return;
    }
    let node = *next_node;
    *next_node += 1;
    let mid = lo + n.div_ceil(2);
    prefix.push((node, 0));
    split(lo, mid, next_node, prefix, out);
    prefix.pop();
    prefix.push((node, 1));
    split(mid, hi, next_node, prefix, out);
    prefix.pop();
}
