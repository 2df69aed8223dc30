//! The live vertex set V, stored as a trie over label digits with per-cluster
//! subtree sizes: O(d) membership and deletion, O(kd) uniform cluster sampling.

use crate::error::{Error, Result};
use crate::label::{Cluster, Universe, Vertex, ROOT};
use crate::rng::SplitRng;

#[derive(Clone)]
pub struct VertexTrie {
    pub uni: Universe,
    /// size[cluster_index(σ)] = |V_σ|
    size: Vec<u32>,
}

impl VertexTrie {
    /// Full vertex set [k]^d.
    pub fn new_full(uni: &Universe) -> VertexTrie {
        let mut size = vec![0u32; uni.cluster_count() as usize];
        for depth in 0..=uni.d {
            let full = uni.full_size(depth) as u32;
            for prefix in 0..uni.pow(depth) as u32 {
                size[uni.cluster_index(Cluster { depth, prefix })] = full;
            }
        }
        VertexTrie { uni: uni.clone(), size }
    }

    pub fn size_of(&self, c: Cluster) -> u64 {
        self.size[self.uni.cluster_index(c)] as u64
    }

    pub fn len(&self) -> u64 {
        self.size_of(ROOT)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, v: Vertex) -> bool {
        self.size[self.uni.cluster_index(self.uni.leaf(v))] == 1
    }

    pub fn remove(&mut self, v: Vertex) -> Result<()> {
        if !self.contains(v) {
            return Err(Error::NotPresent(self.uni.label(v)));
        }
        for depth in 0..=self.uni.d {
            self.size[self.uni.cluster_index(self.uni.ancestor(v, depth))] -= 1;
        }
        Ok(())
    }

    /// Live vertices of a cluster, ascending by code.
    pub fn live(&self, c: Cluster) -> impl Iterator<Item = Vertex> + '_ {
        self.uni.code_range(c).map(Vertex).filter(|&v| self.contains(v))
    }

    /// Uniform over V_σ, walking the size-weighted tree.
    pub fn sample_uniform(&self, c: Cluster, rng: &mut SplitRng) -> Result<Vertex> {
        let total = self.size_of(c);
        if total == 0 {
            return Err(Error::EmptyCluster(self.uni.cluster_label(c)));
        }
        let mut r = rng.below(total);
        let mut cur = c;
        while cur.depth < self.uni.d {
            for i in 1..=self.uni.k {
                let child = self.uni.child(cur, i);
                let s = self.size_of(child);
                if r < s {
                    cur = child;
                    break;
                }
                r -= s;
            }
        }
        Ok(self.uni.leaf_vertex(cur))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn sizes_versus_recount_under_fuzz() {
        let uni = Universe::new(3, 4).unwrap();
        let mut trie = VertexTrie::new_full(&uni);
        let mut reference: HashSet<u32> = (0..uni.n() as u32).collect();
        let mut rng = SplitRng::seeded(11);
        for _ in 0..10_000 {
            if reference.is_empty() {
                break;
            }
            let pick = loop {
                let v = Vertex(rng.below(uni.n()) as u32);
                if reference.contains(&v.0) {
                    break v;
                }
            };
            trie.remove(pick).unwrap();
            reference.remove(&pick.0);
            assert!(trie.remove(pick).is_err());
            if reference.len().is_multiple_of(17) {
                for depth in 0..=uni.d {
                    for prefix in 0..uni.pow(depth) as u32 {
                        let c = Cluster { depth, prefix };
                        let brute = uni.code_range(c).filter(|code| reference.contains(code)).count();
                        assert_eq!(trie.size_of(c), brute as u64);
                    }
                }
            }
        }
        assert!(trie.is_empty());
    }

    #[test]
    fn singleton_cluster_samples_its_vertex() {
        let uni = Universe::new(2, 2).unwrap();
        let trie = VertexTrie::new_full(&uni);
        let mut rng = SplitRng::seeded(0);
        let leaf = uni.leaf(Vertex(3));
        for _ in 0..10 {
            assert_eq!(trie.sample_uniform(leaf, &mut rng).unwrap(), Vertex(3));
        }
    }

    #[test]
    fn empty_cluster_sampling_errors() {
        let uni = Universe::new(2, 1).unwrap();
        let mut trie = VertexTrie::new_full(&uni);
        trie.remove(Vertex(0)).unwrap();
        let mut rng = SplitRng::seeded(0);
        assert!(trie.sample_uniform(uni.leaf(Vertex(0)), &mut rng).is_err());
        assert_eq!(trie.sample_uniform(ROOT, &mut rng).unwrap(), Vertex(1));
    }

    #[test]
    fn sampling_is_uniform_chi_squared() {
        // 4 cells, 3 dof; chi^2 critical value at alpha = 0.001 is 16.266
        let uni = Universe::new(2, 2).unwrap();
        let trie = VertexTrie::new_full(&uni);
        let mut rng = SplitRng::seeded(5);
        let draws = 10_000usize;
        let mut counts = [0u64; 4];
        for _ in 0..draws {
            counts[trie.sample_uniform(ROOT, &mut rng).unwrap().0 as usize] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 16.266, "chi^2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn sampling_replays_deterministically() {
        let uni = Universe::new(3, 3).unwrap();
        let trie = VertexTrie::new_full(&uni);
        let seq = |seed: u64| -> Vec<Vertex> {
            let mut rng = SplitRng::seeded(seed);
            (0..50).map(|_| trie.sample_uniform(ROOT, &mut rng).unwrap()).collect()
        };
        assert_eq!(seq(9), seq(9));
        assert_ne!(seq(9), seq(10));
    }
}
