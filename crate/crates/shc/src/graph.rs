//! The static edge universe of a (k,d)-semi-hypercube: for every cluster σ and
//! ordered pair of its children, a perfect matching between the two full child
//! clusters. Every vertex has exactly one partner per (depth, sibling digit),
//! so the whole edge set is a flat index with O(1) lookup.

use crate::error::{Error, Result};
use crate::label::{Universe, Vertex, DEFAULT_SIZE_GUARD};
use crate::rng::SplitRng;
use crate::trie::VertexTrie;
use std::io::{BufRead, Write};

const NO_PARTNER: u32 = u32::MAX;

#[derive(Clone)]
pub struct SemiHypercube {
    pub uni: Universe,
    /// sibling[v·dk + depth·k + (s−1)] = partner of v in child cluster s at `depth`
    sibling: Vec<u32>,
}

impl SemiHypercube {
    /// All matchings uniformly random, drawn deterministically from `seed`.
    pub fn build_random_shc(k: u32, d: u32, seed: u64) -> Result<SemiHypercube> {
        SemiHypercube::build_random_with_guard(k, d, seed, DEFAULT_SIZE_GUARD)
    }

    pub fn build_random_with_guard(k: u32, d: u32, seed: u64, guard: u64) -> Result<SemiHypercube> {
        let uni = Universe::with_guard(k, d, guard)?;
        let mut rng = SplitRng::seeded(seed);
        SemiHypercube::build_with(&uni, |_, _, _, _, perm| rng.shuffle_u32(perm))
    }

    /// Matchings pair vertices with identical suffixes; edges = Hamming-distance-1 pairs.
    pub fn build_hypercube_style(k: u32, d: u32) -> Result<SemiHypercube> {
        let uni = Universe::new(k, d)?;
        SemiHypercube::build_with(&uni, |_, _, _, _, _| {})
    }

    /// Hypercube-style matchings except where `tweak` permutes them; crate-internal.
    pub(crate) fn build_tweaked(
        k: u32,
        d: u32,
        tweak: impl FnMut(u32, u32, u32, u32, &mut [u32]),
    ) -> Result<SemiHypercube> {
        let uni = Universe::new(k, d)?;
        SemiHypercube::build_with(&uni, tweak)
    }

    /// Shared constructor: `tweak(depth, prefix, i, j, perm)` mutates the identity
    /// position permutation for the matching between children i < j of (depth, prefix).
    fn build_with(
        uni: &Universe,
        mut tweak: impl FnMut(u32, u32, u32, u32, &mut [u32]),
    ) -> Result<SemiHypercube> {
        let k = uni.k as u64;
        let d = uni.d as u64;
        let slots = uni.n() * k * d;
        if slots > 64 * DEFAULT_SIZE_GUARD {
            return Err(Error::Capacity(format!("edge index needs {slots} slots")));
        }
        let mut sibling = vec![NO_PARTNER; slots as usize];
        let stride = (k * d) as usize;
        for depth in 0..uni.d {
            let m = uni.full_size(depth + 1);
            let mut perm: Vec<u32> = (0..m as u32).collect();
            for prefix in 0..uni.pow(depth) as u32 {
                for i in 1..uni.k {
                    for j in (i + 1)..=uni.k {
                        for (q, p) in perm.iter_mut().enumerate() {
                            *p = q as u32;
                        }
                        tweak(depth, prefix, i, j, &mut perm);
                        let base_i = (prefix as u64 * uni.k as u64 + (i - 1) as u64) * m;
                        let base_j = (prefix as u64 * uni.k as u64 + (j - 1) as u64) * m;
                        for q in 0..m {
                            let u = (base_i + q) as usize;
                            let w = (base_j + perm[q as usize] as u64) as usize;
                            sibling[u * stride + (depth * uni.k + j - 1) as usize] = w as u32;
                            sibling[w * stride + (depth * uni.k + i - 1) as usize] = u as u32;
                        }
                    }
                }
            }
        }
        Ok(SemiHypercube { uni: uni.clone(), sibling })
    }

    /// The unique partner of `v` in child cluster `sib` of v's depth-`depth` ancestor,
    /// in the full graph. `sib` must differ from v's own digit at `depth`.
    pub fn partner(&self, v: Vertex, depth: u32, sib: u32) -> Vertex {
        debug_assert!(depth < self.uni.d && sib >= 1 && sib <= self.uni.k);
        debug_assert_ne!(self.uni.digit(v, depth), sib);
        let stride = (self.uni.k * self.uni.d) as usize;
        let w = self.sibling[v.0 as usize * stride + (depth * self.uni.k + sib - 1) as usize];
        debug_assert_ne!(w, NO_PARTNER);
        Vertex(w)
    }

    /// Partner if it survives in V, absent otherwise. Errors when v itself is gone.
    pub fn edge_to_sibling(
        &self,
        trie: &VertexTrie,
        v: Vertex,
        depth: u32,
        sib: u32,
    ) -> Result<Option<Vertex>> {
        if !trie.contains(v) {
            return Err(Error::NotPresent(self.uni.label(v)));
        }
        let w = self.partner(v, depth, sib);
        Ok(if trie.contains(w) { Some(w) } else { None })
    }

    /// Surviving neighbors of `v` through matchings at exactly `depth`.
    pub fn live_partners<'a>(
        &'a self,
        trie: &'a VertexTrie,
        v: Vertex,
        depth: u32,
    ) -> impl Iterator<Item = Vertex> + 'a {
        let own = self.uni.digit(v, depth);
        (1..=self.uni.k)
            .filter(move |&s| s != own)
            .map(move |s| self.partner(v, depth, s))
            .filter(|&w| trie.contains(w))
    }

    /// Cluster-σ-degree of v for σ = v's depth-`depth` ancestor: surviving edges
    /// from v to the other children of σ.
    pub fn live_cluster_degree(&self, trie: &VertexTrie, v: Vertex, depth: u32) -> u32 {
        self.live_partners(trie, v, depth).count() as u32
    }

    /// All surviving neighbors of `v` at every depth.
    pub fn live_neighbors<'a>(
        &'a self,
        trie: &'a VertexTrie,
        v: Vertex,
    ) -> impl Iterator<Item = Vertex> + 'a {
        (0..self.uni.d).flat_map(move |depth| self.live_partners(trie, v, depth))
    }

    /// Every edge once, as (u, w) with u < w; deterministic order.
    pub fn edges(&self) -> impl Iterator<Item = (Vertex, Vertex)> + '_ {
        self.uni.vertices().flat_map(move |v| {
            (0..self.uni.d).flat_map(move |depth| {
                let own = self.uni.digit(v, depth);
                (1..=self.uni.k)
                    .filter(move |&s| s != own)
                    .map(move |s| self.partner(v, depth, s))
                    .filter(move |&w| v < w)
                    .map(move |w| (v, w))
            })
        })
    }

    pub fn has_edge(&self, u: Vertex, w: Vertex) -> bool {
        if u == w {
            return false;
        }
        let c = self.uni.lcp(u, w);
        self.partner(u, c.depth, self.uni.digit(w, c.depth)) == w
    }

    /// Structural check: every (depth, sibling) slot of every vertex filled, symmetric.
    pub fn verify_matchings(&self) -> Result<()> {
        let stride = (self.uni.k * self.uni.d) as usize;
        for v in self.uni.vertices() {
            for depth in 0..self.uni.d {
                let own = self.uni.digit(v, depth);
                for s in 1..=self.uni.k {
                    let slot = self.sibling[v.0 as usize * stride + (depth * self.uni.k + s - 1) as usize];
                    if s == own {
                        continue;
                    }
                    if slot == NO_PARTNER {
                        return Err(Error::InvalidGraph(format!(
                            "{} has no partner in sibling {s} at depth {depth}",
                            self.uni.label(v)
                        )));
                    }
                    let w = Vertex(slot);
                    if self.uni.ancestor(w, depth) != self.uni.ancestor(v, depth)
                        || self.uni.digit(w, depth) != s
                        || self.partner(w, depth, own) != v
                    {
                        return Err(Error::InvalidGraph(format!(
                            "matching between {} and {} is not symmetric",
                            self.uni.label(v),
                            self.uni.label(w)
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Text format: header `shc k d`, then one `u v` line per edge.
    pub fn save<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "shc {} {}", self.uni.k, self.uni.d)?;
        for (u, w) in self.edges() {
            writeln!(out, "{} {}", self.uni.label(u), self.uni.label(w))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<SemiHypercube> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty graph file".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (k, d) = match parts.as_slice() {
            ["shc", k, d] => (
                k.parse::<u32>().map_err(|_| Error::Parse(format!("bad k in header {header:?}")))?,
                d.parse::<u32>().map_err(|_| Error::Parse(format!("bad d in header {header:?}")))?,
            ),
            _ => return Err(Error::Parse(format!("expected `shc k d` header, got {header:?}"))),
        };
        let uni = Universe::new(k, d)?;
        let stride = (k * d) as usize;
        let mut sibling = vec![NO_PARTNER; uni.n() as usize * stride];
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (a, b) = match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(Error::Parse(format!("expected `u v`, got {line:?}"))),
            };
            let u = uni.parse_label(a)?;
            let w = uni.parse_label(b)?;
            if u == w {
                return Err(Error::InvalidGraph(format!("self-loop at {a}")));
            }
            let c = uni.lcp(u, w);
            let (i, j) = (uni.digit(u, c.depth), uni.digit(w, c.depth));
            for (x, y, s) in [(u, w, j), (w, u, i)] {
                let slot = &mut sibling[x.0 as usize * stride + (c.depth * k + s - 1) as usize];
                if *slot != NO_PARTNER {
                    return Err(Error::InvalidGraph(format!(
                        "{} has two partners in sibling {s} at depth {}",
                        uni.label(x),
                        c.depth
                    )));
                }
                *slot = y.0;
            }
        }
        let g = SemiHypercube { uni, sibling };
        g.verify_matchings()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::ROOT;

    fn edge_labels(g: &SemiHypercube) -> Vec<(String, String)> {
        g.edges().map(|(u, w)| (g.uni.label(u), g.uni.label(w))).collect()
    }

    #[test]
    fn one_dimensional_instances_are_complete_graphs() {
        // d = 1: each pair of singleton child clusters carries its unique matching edge
        let g = SemiHypercube::build_random_shc(2, 1, 42).unwrap();
        assert_eq!(edge_labels(&g), vec![("1".into(), "2".into())]);
        let g3 = SemiHypercube::build_random_shc(3, 1, 42).unwrap();
        assert_eq!(
            edge_labels(&g3),
            vec![("1".into(), "2".into()), ("1".into(), "3".into()), ("2".into(), "3".into())]
        );
    }

    #[test]
    fn random_builds_are_deterministic_in_the_seed() {
        let a = SemiHypercube::build_random_shc(4, 2, 7).unwrap();
        let b = SemiHypercube::build_random_shc(4, 2, 7).unwrap();
        let c = SemiHypercube::build_random_shc(4, 2, 8).unwrap();
        assert_eq!(edge_labels(&a), edge_labels(&b));
        assert_ne!(edge_labels(&a), edge_labels(&c));
    }

    #[test]
    fn hypercube_style_two_by_two() {
        let g = SemiHypercube::build_hypercube_style(2, 2).unwrap();
        let mut edges = edge_labels(&g);
        edges.sort();
        assert_eq!(
            edges,
            vec![
                ("1.1".to_string(), "1.2".to_string()),
                ("1.1".to_string(), "2.1".to_string()),
                ("1.2".to_string(), "2.2".to_string()),
                ("2.1".to_string(), "2.2".to_string()),
            ]
        );
    }

    #[test]
    fn fresh_degree_is_k_minus_one_times_d() {
        for (k, d) in [(2, 3), (3, 2), (4, 2)] {
            let g = SemiHypercube::build_random_shc(k, d, 1).unwrap();
            let trie = VertexTrie::new_full(&g.uni);
            for v in g.uni.vertices() {
                assert_eq!(g.live_neighbors(&trie, v).count() as u32, (k - 1) * d);
            }
            g.verify_matchings().unwrap();
        }
    }

    #[test]
    fn hypercube_edges_are_hamming_distance_one() {
        let g = SemiHypercube::build_hypercube_style(3, 2).unwrap();
        for (u, w) in g.edges() {
            let differing =
                (0..2).filter(|&l| g.uni.digit(u, l) != g.uni.digit(w, l)).count();
            assert_eq!(differing, 1);
        }
        assert_eq!(g.edges().count() as u32, 9 * 4 / 2);
    }

    #[test]
    fn edge_to_sibling_matches_linear_scan() {
        let g = SemiHypercube::build_random_shc(4, 2, 7).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let all_edges: Vec<(Vertex, Vertex)> = g.edges().collect();
        for v in g.uni.vertices() {
            for depth in 0..g.uni.d {
                for s in 1..=g.uni.k {
                    if s == g.uni.digit(v, depth) {
                        continue;
                    }
                    // scan: the unique edge from v whose other end lies in sibling cluster s at depth
                    let target = g.uni.child(g.uni.ancestor(v, depth), s);
                    let scan: Vec<Vertex> = all_edges
                        .iter()
                        .filter_map(|&(a, b)| {
                            let other = if a == v { Some(b) } else if b == v { Some(a) } else { None }?;
                            g.uni.contains(target, other).then_some(other)
                        })
                        .collect();
                    assert_eq!(scan.len(), 1);
                    assert_eq!(g.edge_to_sibling(&trie, v, depth, s).unwrap(), Some(scan[0]));
                }
            }
        }
    }

    #[test]
    fn deleted_partner_is_absent() {
        let g = SemiHypercube::build_hypercube_style(2, 2).unwrap();
        let mut trie = VertexTrie::new_full(&g.uni);
        let v11 = g.uni.parse_label("1.1").unwrap();
        let v21 = g.uni.parse_label("2.1").unwrap();
        assert_eq!(g.edge_to_sibling(&trie, v11, 0, 2).unwrap(), Some(v21));
        trie.remove(v21).unwrap();
        assert_eq!(g.edge_to_sibling(&trie, v11, 0, 2).unwrap(), None);
        trie.remove(v11).unwrap();
        assert!(g.edge_to_sibling(&trie, v11, 0, 2).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let g = SemiHypercube::build_random_shc(3, 3, 99).unwrap();
        let mut buf = Vec::new();
        g.save(&mut buf).unwrap();
        let loaded = SemiHypercube::load(&buf[..]).unwrap();
        assert_eq!(g.uni, loaded.uni);
        assert_eq!(edge_labels(&g), edge_labels(&loaded));
        let mut buf2 = Vec::new();
        loaded.save(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn loader_rejects_broken_matchings() {
        // duplicate partner in one sibling slot
        let text = "shc 2 1\n1 2\n1 2\n";
        assert!(SemiHypercube::load(text.as_bytes()).is_err());
        // missing edge
        let text = "shc 2 2\n1.1 2.1\n1.2 2.2\n1.1 1.2\n";
        assert!(SemiHypercube::load(text.as_bytes()).is_err());
        // complete
        let text = "shc 2 2\n1.1 2.1\n1.2 2.2\n1.1 1.2\n2.1 2.2\n";
        assert!(SemiHypercube::load(text.as_bytes()).is_ok());
    }

    #[test]
    fn lcp_spec_cases() {
        let uni = Universe::new(2, 2).unwrap();
        let g = SemiHypercube::build_hypercube_style(2, 2).unwrap();
        let v = |s: &str| uni.parse_label(s).unwrap();
        assert!(g.has_edge(v("1.1"), v("2.1")));
        assert!(!g.has_edge(v("1.1"), v("2.2")));
        assert_eq!(uni.lcp(v("1.1"), v("2.2")), ROOT);
    }
}
