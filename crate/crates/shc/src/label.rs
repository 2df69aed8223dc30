//! Vertex labels, clusters, and the prefix algebra connecting them.
//!
//! A vertex of a (k,d)-semi-hypercube is a d-tuple of digits from {1..k},
//! stored as its rank in [0, k^d). A cluster is a digit prefix; the clusters
//! form a k-ary tree of depth d whose leaves are the vertices.

use crate::error::{Error, Result};

/// Vertex code: rank of the label in [0, k^d), lexicographic by digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Vertex(pub u32);

/// Cluster: a label prefix of length `depth`, stored as its rank in [0, k^depth).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cluster {
    pub depth: u32,
    pub prefix: u32,
}

pub const ROOT: Cluster = Cluster { depth: 0, prefix: 0 };

/// The (k,d) label universe with precomputed powers and cluster-array offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Universe {
    pub k: u32,
    pub d: u32,
    /// pow[i] = k^i for i in 0..=d
    pow: Vec<u64>,
    /// offset[l] = number of clusters of depth < l; offset[d+1] = total cluster count
    offset: Vec<u64>,
}

/// Default cap on k^d; construction beyond it is refused unless overridden.
pub const DEFAULT_SIZE_GUARD: u64 = 1 << 22;

impl Universe {
    pub fn new(k: u32, d: u32) -> Result<Universe> {
        Universe::with_guard(k, d, DEFAULT_SIZE_GUARD)
    }

    pub fn with_guard(k: u32, d: u32, guard: u64) -> Result<Universe> {
        if k < 2 || d < 1 {
            return Err(Error::Precondition(format!("need k >= 2 and d >= 1, got k={k} d={d}")));
        }
        let mut pow = vec![1u64];
        for _ in 0..d {
            let next = pow.last().unwrap().checked_mul(k as u64);
            match next {
                Some(p) if p <= guard => pow.push(p),
                _ => return Err(Error::Capacity(format!("k^d = {k}^{d} exceeds size guard {guard}"))),
            }
        }
        let mut offset = vec![0u64];
        for i in 0..=d {
            offset.push(offset[i as usize] + pow[i as usize]);
        }
        Ok(Universe { k, d, pow, offset })
    }

    pub fn n(&self) -> u64 {
        self.pow[self.d as usize]
    }

    /// k^i
    pub fn pow(&self, i: u32) -> u64 {
        self.pow[i as usize]
    }

    /// Initial size k^(d-depth) of a cluster at the given depth.
    pub fn full_size(&self, depth: u32) -> u64 {
        self.pow[(self.d - depth) as usize]
    }

    pub fn cluster_count(&self) -> u64 {
        self.offset[self.d as usize + 1]
    }

    /// Position of a cluster in a flat array over all clusters, breadth-first.
    pub fn cluster_index(&self, c: Cluster) -> usize {
        debug_assert!(c.depth <= self.d && (c.prefix as u64) < self.pow[c.depth as usize]);
        (self.offset[c.depth as usize] + c.prefix as u64) as usize
    }

    /// 1-based digit of `v` at `depth` in 0..d.
    pub fn digit(&self, v: Vertex, depth: u32) -> u32 {
        debug_assert!(depth < self.d);
        ((v.0 as u64 / self.pow[(self.d - 1 - depth) as usize]) % self.k as u64) as u32 + 1
    }

    /// The depth-`depth` ancestor cluster of `v`.
    pub fn ancestor(&self, v: Vertex, depth: u32) -> Cluster {
        debug_assert!(depth <= self.d);
        Cluster { depth, prefix: (v.0 as u64 / self.pow[(self.d - depth) as usize]) as u32 }
    }

    /// Child cluster σ+i for 1-based child index i.
    pub fn child(&self, c: Cluster, i: u32) -> Cluster {
        debug_assert!(c.depth < self.d && i >= 1 && i <= self.k);
        Cluster { depth: c.depth + 1, prefix: c.prefix * self.k + (i - 1) }
    }

    pub fn parent(&self, c: Cluster) -> Cluster {
        debug_assert!(c.depth > 0);
        Cluster { depth: c.depth - 1, prefix: c.prefix / self.k }
    }

    /// 1-based index of `c` among its parent's children.
    pub fn child_index(&self, c: Cluster) -> u32 {
        debug_assert!(c.depth > 0);
        c.prefix % self.k + 1
    }

    /// Leaf cluster of a vertex (depth d).
    pub fn leaf(&self, v: Vertex) -> Cluster {
        Cluster { depth: self.d, prefix: v.0 }
    }

    /// The vertex of a leaf cluster.
    pub fn leaf_vertex(&self, c: Cluster) -> Vertex {
        debug_assert!(c.depth == self.d);
        Vertex(c.prefix)
    }

    /// Half-open range of vertex codes contained in the cluster.
    pub fn code_range(&self, c: Cluster) -> std::ops::Range<u32> {
        let w = self.pow[(self.d - c.depth) as usize];
        let lo = c.prefix as u64 * w;
        lo as u32..(lo + w) as u32
    }

    pub fn contains(&self, c: Cluster, v: Vertex) -> bool {
        self.ancestor(v, c.depth).prefix == c.prefix
    }

    /// Longest common prefix cluster of two vertices.
    pub fn lcp(&self, u: Vertex, v: Vertex) -> Cluster {
        let mut depth = 0;
        while depth < self.d && self.digit(u, depth) == self.digit(v, depth) {
            depth += 1;
        }
        self.ancestor(u, depth)
    }

    /// Dot-separated 1-based digits, e.g. "3.1.4".
    pub fn label(&self, v: Vertex) -> String {
        (0..self.d).map(|l| self.digit(v, l).to_string()).collect::<Vec<_>>().join(".")
    }

    /// Dot-separated digits of a cluster prefix; the root prints as "ε".
    pub fn cluster_label(&self, c: Cluster) -> String {
        if c.depth == 0 {
            return "ε".to_string();
        }
        let mut digits = Vec::with_capacity(c.depth as usize);
        let mut p = c.prefix as u64;
        for _ in 0..c.depth {
            digits.push((p % self.k as u64 + 1).to_string());
            p /= self.k as u64;
        }
        digits.reverse();
        digits.join(".")
    }

    pub fn parse_label(&self, s: &str) -> Result<Vertex> {
        let digits: Vec<&str> = s.split('.').collect();
        if digits.len() != self.d as usize {
            return Err(Error::Parse(format!("label {s:?} has {} digits, expected {}", digits.len(), self.d)));
        }
        let mut code = 0u64;
        for part in digits {
            let digit: u64 = part
                .parse()
                .map_err(|_| Error::Parse(format!("bad digit {part:?} in label {s:?}")))?;
            if digit < 1 || digit > self.k as u64 {
                return Err(Error::Parse(format!("digit {digit} out of [1, {}] in label {s:?}", self.k)));
            }
            code = code * self.k as u64 + (digit - 1);
        }
        Ok(Vertex(code as u32))
    }

    pub fn vertices(&self) -> impl Iterator<Item = Vertex> {
        (0..self.n() as u32).map(Vertex)
    }
}
