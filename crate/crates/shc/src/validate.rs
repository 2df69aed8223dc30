use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SemiHypercube;
use crate::label::{Cluster, Vertex, ROOT};
use crate::trie::VertexTrie;

/// Exact rational deletion tolerance, 0 < num/den < 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tau {
    pub num: u64,
    pub den: u64,
}

impl Tau {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 || num >= den {
            return Err(Error::Precondition(format!(
                "tolerance must lie strictly between 0 and 1, got {num}/{den}"
            )));
        }
        Ok(Tau { num, den })
    }

    /// Largest tolerance the self-pruning guarantees support: 1/(4350 d).
    pub fn strict_default(d: u32) -> Self {
        Tau { num: 1, den: 4350 * d as u64 }
    }

    /// Accepts "p/q" or a decimal like "0.01".
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |t: &str| Error::Parse(format!("invalid tolerance {t:?}"));
        if let Some((p, q)) = text.split_once('/') {
            let num: u64 = p.trim().parse().map_err(|_| bad(text))?;
            let den: u64 = q.trim().parse().map_err(|_| bad(text))?;
            return Tau::new(num, den);
        }
        if let Some((whole, frac)) = text.split_once('.') {
            let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| bad(text))? };
            if frac.is_empty() || frac.len() > 18 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad(text));
            }
            let den = 10u64.pow(frac.len() as u32);
            let num = whole
                .checked_mul(den)
                .and_then(|w| w.checked_add(frac.parse::<u64>().unwrap()))
                .ok_or_else(|| bad(text))?;
            return Tau::new(num, den);
        }
        Err(bad(text))
    }

    /// True when num/den <= 1/(4350 d), the regime every worst-case bound assumes.
    pub fn within_strict_bound(&self, d: u32) -> bool {
        self.num as u128 * 4350 * d as u128 <= self.den as u128
    }

    pub fn ensure_strict_bound(&self, d: u32) -> Result<()> {
        if self.within_strict_bound(d) {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "tolerance {}/{} exceeds 1/{} required for worst-case guarantees",
                self.num,
                self.den,
                4350 * d as u64
            )))
        }
    }

    /// True when num/den <= 1/(27 d), the regime the oblivious sampler assumes.
    pub fn within_routing_bound(&self, d: u32) -> bool {
        self.num as u128 * 27 * d as u128 <= self.den as u128
    }
}

impl std::fmt::Display for Tau {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Strict mode refuses inputs outside the proven parameter regime; experimental
/// mode runs them anyway and only reports what it observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Strict,
    Experimental,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Mode::Strict),
            "experimental" => Ok(Mode::Experimental),
            other => Err(Error::Parse(format!("unknown mode {other:?}"))),
        }
    }
}

/// A cluster is critical when nonempty yet holding less than a (1 - tau)
/// fraction of its capacity. Exact integer comparison, no rounding.
pub fn is_critical(trie: &VertexTrie, tau: Tau, c: Cluster) -> bool {
    let size = trie.size_of(c) as u128;
    let full = trie.uni.full_size(c.depth) as u128;
    size > 0 && size * (tau.den as u128) < full * (tau.den - tau.num) as u128
}

/// One structural defect found by `validate`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// A cluster has two or more critical children.
    MultipleCriticalChildren { cluster: String, children: Vec<String> },
    /// A critical child's average outward degree fell below (9/10) k'.
    LowAverageDegree {
        cluster: String,
        child: String,
        nonempty_noncritical: u32,
        child_size: u64,
        crossing_edges: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

/// Checks every cluster: at most one critical child, and any critical child
/// keeps average degree 9/10 k' into its noncritical siblings, where k' counts
/// the nonempty noncritical children.
pub fn validate(g: &SemiHypercube, trie: &VertexTrie, tau: Tau) -> ValidityReport {
    let uni = &trie.uni;
    let mut violations = Vec::new();
    for depth in 0..uni.d {
        for prefix in 0..uni.pow(depth) as u32 {
            let c = Cluster { depth, prefix };
            if trie.size_of(c) == 0 {
                continue;
            }
            let mut critical = Vec::new();
            let mut k_prime = 0u32;
            for i in 1..=uni.k {
                let child = uni.child(c, i);
                if trie.size_of(child) == 0 {
                    continue;
                }
                if is_critical(trie, tau, child) {
                    critical.push(child);
                } else {
                    k_prime += 1;
                }
            }
            if critical.len() > 1 {
                violations.push(Violation::MultipleCriticalChildren {
                    cluster: uni.cluster_label(c),
                    children: critical.iter().map(|&ch| uni.cluster_label(ch)).collect(),
                });
                continue;
            }
            if let Some(&child) = critical.first() {
                let crossing = crossing_edges(g, trie, c, child);
                let child_size = trie.size_of(child);
                // 9/10 k' |V_child| <= crossing, compared as integers.
                if 9u128 * k_prime as u128 * child_size as u128 > 10u128 * crossing as u128 {
                    violations.push(Violation::LowAverageDegree {
                        cluster: uni.cluster_label(c),
                        child: uni.cluster_label(child),
                        nonempty_noncritical: k_prime,
                        child_size,
                        crossing_edges: crossing,
                    });
                }
            }
        }
    }
    ValidityReport { valid: violations.is_empty(), violations }
}

/// Live edges from V_child to the rest of V_c, i.e. the depth-|c| edges
/// leaving the child. Each vertex has at most k-1 such edges.
pub fn crossing_edges(g: &SemiHypercube, trie: &VertexTrie, c: Cluster, child: Cluster) -> u64 {
    debug_assert_eq!(child.depth, c.depth + 1);
    let mut total = 0u64;
    for v in trie.live(child) {
        total += g.live_cluster_degree(trie, v, c.depth) as u64;
    }
    total
}

pub fn is_valid(g: &SemiHypercube, trie: &VertexTrie, tau: Tau) -> bool {
    validate(g, trie, tau).valid
}

/// True when additionally no cluster at all is critical (the stronger state
/// some routing guarantees need).
pub fn is_noncritical(trie: &VertexTrie, tau: Tau) -> bool {
    let uni = &trie.uni;
    for depth in 0..=uni.d {
        for prefix in 0..uni.pow(depth) as u32 {
            if is_critical(trie, tau, Cluster { depth, prefix }) {
                return false;
            }
        }
    }
    true
}

fn ensure_live(trie: &VertexTrie, v: Vertex) -> Result<()> {
    if trie.contains(v) {
        Ok(())
    } else {
        Err(Error::NotPresent(format!("vertex {} is not live", trie.uni.label(v))))
    }
}

/// Deepest critical proper ancestor of v, or the root if none is critical.
/// The root itself counts as an ancestor.
pub fn home_cluster(trie: &VertexTrie, tau: Tau, v: Vertex) -> Result<Cluster> {
    ensure_live(trie, v)?;
    for depth in (0..trie.uni.d).rev() {
        let c = trie.uni.ancestor(v, depth);
        if is_critical(trie, tau, c) {
            return Ok(c);
        }
    }
    Ok(ROOT)
}

/// Sum of (d - |c|) over critical proper ancestors c of v. Zero exactly when
/// no ancestor is critical; at most d(d+1)/2.
pub fn isolation(trie: &VertexTrie, tau: Tau, v: Vertex) -> Result<u64> {
    ensure_live(trie, v)?;
    let d = trie.uni.d;
    let mut total = 0u64;
    for depth in 0..d {
        if is_critical(trie, tau, trie.uni.ancestor(v, depth)) {
            total += (d - depth) as u64;
        }
    }
    Ok(total)
}

/// Number of critical proper ancestors of v.
pub fn crit_count(trie: &VertexTrie, tau: Tau, v: Vertex) -> Result<u32> {
    ensure_live(trie, v)?;
    let mut count = 0;
    for depth in 0..trie.uni.d {
        if is_critical(trie, tau, trie.uni.ancestor(v, depth)) {
            count += 1;
        }
    }
    Ok(count)
}

/// Minimum isolation over the live vertices of c.
pub fn isolation_cluster(trie: &VertexTrie, tau: Tau, c: Cluster) -> Result<u64> {
    if trie.size_of(c) == 0 {
        return Err(Error::EmptyCluster(format!(
            "cluster {} is empty",
            trie.uni.cluster_label(c)
        )));
    }
    let d = trie.uni.d;
    // Shared prefix: critical ancestors of c itself (including c).
    let mut above = 0u64;
    for depth in 0..=c.depth {
        let anc = Cluster { depth, prefix: c.prefix / trie.uni.pow(c.depth - depth) as u32 };
        if depth < d && is_critical(trie, tau, anc) {
            above += (d - depth) as u64;
        }
    }
    Ok(above + isolation_below(trie, tau, c))
}

/// Min over live v in c of the isolation contributed by ancestors strictly
/// deeper than c.
fn isolation_below(trie: &VertexTrie, tau: Tau, c: Cluster) -> u64 {
    let d = trie.uni.d;
    if c.depth == d {
        return 0;
    }
    let mut best = u64::MAX;
    for i in 1..=trie.uni.k {
        let child = trie.uni.child(c, i);
        if trie.size_of(child) == 0 {
            continue;
        }
        let here = if child.depth < d && is_critical(trie, tau, child) {
            (d - child.depth) as u64
        } else {
            0
        };
        best = best.min(here + isolation_below(trie, tau, child));
    }
    debug_assert_ne!(best, u64::MAX);
    best
}

/// A non-leaf cluster is degenerate when exactly one child is nonempty;
/// leaves are never degenerate.
pub fn is_degenerate(trie: &VertexTrie, c: Cluster) -> bool {
    if c.depth == trie.uni.d {
        return false;
    }
    let mut nonempty = 0;
    for i in 1..=trie.uni.k {
        if trie.size_of(trie.uni.child(c, i)) > 0 {
            nonempty += 1;
        }
    }
    nonempty == 1
}

/// Follows the chain of only-children down from c until a nondegenerate
/// cluster is reached.
pub fn representative(trie: &VertexTrie, c: Cluster) -> Result<Cluster> {
    if trie.size_of(c) == 0 {
        return Err(Error::EmptyCluster(format!(
            "cluster {} is empty",
            trie.uni.cluster_label(c)
        )));
    }
    let mut cur = c;
    while is_degenerate(trie, cur) {
        for i in 1..=trie.uni.k {
            let child = trie.uni.child(cur, i);
            if trie.size_of(child) > 0 {
                cur = child;
                break;
            }
        }
    }
    Ok(cur)
}
