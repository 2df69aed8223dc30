//! Self-pruning under adversarial deletions.
//!
//! Three engines share the same deletion model (one vertex in, a bounded set
//! of forced removals out) and differ in bookkeeping:
//! * [`Pruner`]: incremental shadow mark sets, one per degree threshold.
//! * [`ReferencePruner`]: single mark sets recomputed by degree scans; keeps
//!   an event log so tests can replay every decision independently.
//! * [`BatchedPruner`]: amortized variant that empties whole clusters between
//!   batches instead of trimming per deletion.

use std::collections::{BTreeMap, BTreeSet};

use num::{BigInt, BigRational, ToPrimitive};

use crate::error::{Error, Result};
use crate::graph::SemiHypercube;
use crate::label::{Cluster, Universe, Vertex, ROOT};
use crate::trie::VertexTrie;
use crate::validate::{self, Mode, Tau};

/// H_k = 1 + 1/2 + ... + 1/k, exact.
pub fn harmonic(k: u32) -> BigRational {
    (1..=k)
        .map(|i| BigRational::new(BigInt::from(1), BigInt::from(i)))
        .sum()
}

fn ceil_to_u64(r: &BigRational, what: &str) -> Result<u64> {
    r.ceil()
        .to_integer()
        .to_u64()
        .ok_or_else(|| Error::Capacity(format!("{what} does not fit in u64")))
}

/// Trim budget multiplier for the shadow engine: ceil(2 H_k cycle / tau).
pub fn shadow_trim_rate(k: u32, cycle: u32, tau: Tau) -> Result<u64> {
    let scale = BigRational::new(
        BigInt::from(2u32) * cycle * tau.den,
        BigInt::from(tau.num),
    );
    ceil_to_u64(&(harmonic(k) * scale), "trim rate")
}

/// Trim budget multiplier for the reference engine: ceil(3 d H_k / tau).
pub fn reference_trim_rate(k: u32, d: u32, tau: Tau) -> Result<u64> {
    let scale = BigRational::new(
        BigInt::from(3u32) * d * tau.den,
        BigInt::from(tau.num),
    );
    ceil_to_u64(&(harmonic(k) * scale), "trim rate")
}

/// Mark parameters a cluster inherits when chosen as trim target:
/// (ancestor depth the degrees are measured at, degree threshold).
pub type MarkInfo = (u32, u32);

/// Deletion engine with pre-materialized mark sets.
///
/// For every live cluster, ancestor depth, and threshold j, `shadow` holds the
/// cluster members whose degree at that ancestor level fell below j. Retarget
/// then reads mark counts in O(log) instead of rescanning degrees.
pub struct Pruner {
    pub g: SemiHypercube,
    pub trie: VertexTrie,
    pub tau: Tau,
    /// Each removal charges up to this many forced trims per ancestor level.
    pub trim_rate: u64,
    /// Every cycle-th target choice goes by size instead of mark count.
    pub cycle: u32,
    /// Current trim target (child index), per cluster.
    target: Vec<u32>,
    /// Child indices never yet chosen as targets, ascending, per cluster.
    untried: Vec<Vec<u32>>,
    /// Mark parameters handed down at targeting time, per cluster.
    minfo: Vec<Option<MarkInfo>>,
    /// shadow[(cluster, ancestor depth, j)] = live members of the cluster
    /// with fewer than j surviving edges at that ancestor level.
    shadow: BTreeMap<(usize, u32, u32), BTreeSet<Vertex>>,
}

impl Pruner {
    /// Strict mode enforces the worst-case guarantee preconditions
    /// (k >= 16d and tau <= 1/(4350 d)); experimental mode skips them.
    /// Both derive the trim rate from the harmonic formula.
    pub fn new(g: &SemiHypercube, tau: Tau, mode: Mode) -> Result<Pruner> {
        let (k, d) = (g.uni.k, g.uni.d);
        if mode == Mode::Strict {
            tau.ensure_strict_bound(d)?;
            if k < 16 * d {
                return Err(Error::Precondition(format!(
                    "worst-case pruning needs k >= 16 d, got k={k} d={d}"
                )));
            }
        }
        let cycle = 2 * d + 1;
        let trim_rate = shadow_trim_rate(k, cycle, tau)?;
        Ok(Pruner::assemble(g, tau, trim_rate))
    }

    /// Explicit trim rate, no parameter gates. For empirical studies.
    pub fn with_trim_rate(g: &SemiHypercube, tau: Tau, trim_rate: u64) -> Pruner {
        Pruner::assemble(g, tau, trim_rate)
    }

    fn assemble(g: &SemiHypercube, tau: Tau, trim_rate: u64) -> Pruner {
        let uni = g.uni.clone();
        let count = uni.cluster_count() as usize;
        let k = uni.k;
        Pruner {
            g: g.clone(),
            trie: VertexTrie::new_full(&uni),
            tau,
            trim_rate,
            cycle: 2 * uni.d + 1,
            target: vec![1; count],
            untried: vec![(2..=k).collect(); count],
            minfo: vec![None; count],
            shadow: BTreeMap::new(),
        }
    }

    pub fn target_of(&self, c: Cluster) -> u32 {
        self.target[self.g.uni.cluster_index(c)]
    }

    pub fn untried_of(&self, c: Cluster) -> &[u32] {
        &self.untried[self.g.uni.cluster_index(c)]
    }

    pub fn mark_info(&self, c: Cluster) -> Option<MarkInfo> {
        self.minfo[self.g.uni.cluster_index(c)]
    }

    /// Size of the mark set under the given parameters. Unset parameters and
    /// threshold 0 count nothing; thresholds >= k cover the whole cluster.
    pub fn shadow_count(&self, c: Cluster, info: Option<MarkInfo>) -> u64 {
        match info {
            None => 0,
            Some((_, 0)) => 0,
            Some((_, j)) if j >= self.g.uni.k => self.trie.size_of(c),
            Some((anchor_depth, j)) => self
                .shadow
                .get(&(self.g.uni.cluster_index(c), anchor_depth, j))
                .map_or(0, |s| s.len() as u64),
        }
    }

    /// Materialized mark set for explicit parameters.
    pub fn shadow_set(&self, c: Cluster, anchor_depth: u32, j: u32) -> BTreeSet<Vertex> {
        if j == 0 {
            BTreeSet::new()
        } else if j >= self.g.uni.k {
            self.trie.live(c).collect()
        } else {
            self.shadow
                .get(&(self.g.uni.cluster_index(c), anchor_depth, j))
                .cloned()
                .unwrap_or_default()
        }
    }

    /// Mark set under the cluster's own inherited parameters.
    pub fn mark_set(&self, c: Cluster) -> BTreeSet<Vertex> {
        match self.mark_info(c) {
            None => BTreeSet::new(),
            Some((anchor_depth, j)) => self.shadow_set(c, anchor_depth, j),
        }
    }

    /// (marked, live) pair maximizing marked/live over nonempty clusters;
    /// (0, 1) on an empty graph.
    pub fn max_mark_ratio(&self) -> (u64, u64) {
        let uni = &self.g.uni;
        let mut best = (0u64, 1u64);
        for depth in 0..=uni.d {
            for prefix in 0..uni.pow(depth) as u32 {
                let c = Cluster { depth, prefix };
                let size = self.trie.size_of(c);
                if size == 0 {
                    continue;
                }
                let marked = self.shadow_count(c, self.minfo[uni.cluster_index(c)]);
                if (marked as u128) * (best.1 as u128) > (best.0 as u128) * (size as u128) {
                    best = (marked, size);
                }
            }
        }
        best
    }

    /// Removes `v` and performs every forced trim the budget demands, walking
    /// ancestors bottom-up. Returns the forced removals, excluding `v`.
    pub fn delete(&mut self, v: Vertex) -> Result<Vec<Vertex>> {
        if !self.trie.contains(v) {
            return Err(Error::NotPresent(self.g.uni.label(v)));
        }
        self.process_removal(v)?;
        let mut removed = 1u64;
        let mut pruned = Vec::new();
        for depth in (0..self.g.uni.d).rev() {
            let c = self.g.uni.ancestor(v, depth);
            self.retarget(c);
            let budget = (self.trim_rate as u128).saturating_mul(removed as u128);
            let trims = budget.min(self.trie.size_of(c) as u128) as u64;
            for _ in 0..trims {
                let w = self.trim(c)?;
                pruned.push(w);
                removed += 1;
            }
        }
        Ok(pruned)
    }

    /// Moves the target off an empty child until it lands on a nonempty one
    /// or no untried children remain. Every cycle-th pick takes the smallest
    /// child, the rest take the most-marked one; ties go to the lowest index.
    pub fn retarget(&mut self, c: Cluster) {
        let ci = self.g.uni.cluster_index(c);
        loop {
            let t = self.target[ci];
            if self.trie.size_of(self.g.uni.child(c, t)) != 0 {
                return;
            }
            if self.untried[ci].is_empty() {
                return;
            }
            let pool = self.untried[ci].clone();
            let chosen = if pool.len() as u32 % self.cycle == 1 {
                let mut best = pool[0];
                let mut best_size = self.trie.size_of(self.g.uni.child(c, best));
                for &i in &pool[1..] {
                    let size = self.trie.size_of(self.g.uni.child(c, i));
                    if size < best_size {
                        best = i;
                        best_size = size;
                    }
                }
                best
            } else {
                let info = self.minfo[ci];
                let mut best = pool[0];
                let mut best_count = self.shadow_count(self.g.uni.child(c, best), info);
                for &i in &pool[1..] {
                    let count = self.shadow_count(self.g.uni.child(c, i), info);
                    if count > best_count {
                        best = i;
                        best_count = count;
                    }
                }
                best
            };
            let child_ci = self.g.uni.cluster_index(self.g.uni.child(c, chosen));
            if pool.len() == 1 {
                self.minfo[child_ci] = self.minfo[ci];
            } else {
                let threshold = (19 * (pool.len() as u64 - 1)).div_ceil(20) as u32;
                self.minfo[child_ci] = Some((c.depth, threshold));
            }
            self.target[ci] = chosen;
            self.untried[ci].retain(|&i| i != chosen);
        }
    }

    /// Removes one vertex by descending targets to a leaf, retargeting every
    /// cluster on the way back up.
    pub fn trim(&mut self, c: Cluster) -> Result<Vertex> {
        if c.depth == self.g.uni.d {
            let v = self.g.uni.leaf_vertex(c);
            self.process_removal(v)?;
            return Ok(v);
        }
        let child = self.g.uni.child(c, self.target[self.g.uni.cluster_index(c)]);
        if self.trie.size_of(child) == 0 {
            return Err(Error::EmptyCluster(self.g.uni.cluster_label(child)));
        }
        let w = self.trim(child)?;
        self.retarget(c);
        Ok(w)
    }

    /// Removes `v` from the trie after recording the degree drop of each
    /// surviving neighbor in every shadow set the neighbor belongs to, and
    /// purging `v` itself from the sets it sat in.
    pub fn process_removal(&mut self, v: Vertex) -> Result<()> {
        let d = self.g.uni.d;
        let k = self.g.uni.k;
        for lca_depth in 0..d {
            let partners: Vec<Vertex> = self.g.live_partners(&self.trie, v, lca_depth).collect();
            for u in partners {
                // Pre-removal degree; the edge to v still counts, so deg >= 1
                // and u now qualifies for exactly this one new threshold.
                let deg = self.g.live_cluster_degree(&self.trie, u, lca_depth);
                for depth in (lca_depth + 1)..=d {
                    let key = (
                        self.g.uni.cluster_index(self.g.uni.ancestor(u, depth)),
                        lca_depth,
                        deg,
                    );
                    self.shadow.entry(key).or_default().insert(u);
                }
            }
        }
        for lca_depth in 0..d {
            let deg = self.g.live_cluster_degree(&self.trie, v, lca_depth);
            for depth in (lca_depth + 1)..=d {
                let ci = self.g.uni.cluster_index(self.g.uni.ancestor(v, depth));
                for j in (deg + 1)..k {
                    if let Some(set) = self.shadow.get_mut(&(ci, lca_depth, j)) {
                        set.remove(&v);
                        if set.is_empty() {
                            self.shadow.remove(&(ci, lca_depth, j));
                        }
                    }
                }
            }
        }
        self.trie.remove(v)
    }
}

/// Why a mark event happened; enough for a replay to recompute the members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MarkReason {
    /// Last nonempty child: the parent's surviving marks pass down unchanged.
    Inherited,
    /// Degree scan at the anchor level, keeping vertices with
    /// 20 deg < 19 x; optionally skipping already-marked ones.
    Scan { anchor: Cluster, x: u32, skip_marked: bool },
    /// Degenerate descent: the previous event's members, one level deeper.
    Descent,
}

/// One step in a [`ReferencePruner`] run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PruneEvent {
    Removed(Vertex),
    Marked { cluster: Cluster, members: Vec<Vertex>, reason: MarkReason },
}

/// Deletion engine with single mark sets recomputed by degree scans.
///
/// Slower than [`Pruner`] but with directly auditable decisions: every
/// removal and mark lands in `log`. Mark sets are never purged of dead
/// vertices; consumers intersect with the live set.
pub struct ReferencePruner {
    pub g: SemiHypercube,
    pub trie: VertexTrie,
    pub tau: Tau,
    pub trim_rate: u64,
    target: Vec<u32>,
    marks: BTreeMap<usize, BTreeSet<Vertex>>,
    pub log: Vec<PruneEvent>,
}

impl ReferencePruner {
    pub fn new(g: &SemiHypercube, tau: Tau) -> Result<ReferencePruner> {
        let trim_rate = reference_trim_rate(g.uni.k, g.uni.d, tau)?;
        Ok(ReferencePruner::assemble(g, tau, trim_rate))
    }

    pub fn with_trim_rate(g: &SemiHypercube, tau: Tau, trim_rate: u64) -> ReferencePruner {
        ReferencePruner::assemble(g, tau, trim_rate)
    }

    fn assemble(g: &SemiHypercube, tau: Tau, trim_rate: u64) -> ReferencePruner {
        let uni = g.uni.clone();
        let count = uni.cluster_count() as usize;
        ReferencePruner {
            g: g.clone(),
            trie: VertexTrie::new_full(&uni),
            tau,
            trim_rate,
            target: vec![uni.k; count],
            marks: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn target_of(&self, c: Cluster) -> u32 {
        self.target[self.g.uni.cluster_index(c)]
    }

    /// Stored marks, dead vertices included.
    pub fn marks_of(&self, c: Cluster) -> BTreeSet<Vertex> {
        self.marks
            .get(&self.g.uni.cluster_index(c))
            .cloned()
            .unwrap_or_default()
    }

    fn remove_logged(&mut self, v: Vertex) -> Result<()> {
        self.trie.remove(v)?;
        self.log.push(PruneEvent::Removed(v));
        Ok(())
    }

    fn mark(&mut self, c: Cluster, members: &BTreeSet<Vertex>, reason: MarkReason) {
        self.log.push(PruneEvent::Marked {
            cluster: c,
            members: members.iter().copied().collect(),
            reason,
        });
        self.marks
            .entry(self.g.uni.cluster_index(c))
            .or_default()
            .extend(members.iter().copied());
        if c.depth < self.g.uni.d && validate::is_degenerate(&self.trie, c) {
            let child = self.g.uni.child(c, self.target[self.g.uni.cluster_index(c)]);
            self.mark(child, members, MarkReason::Descent);
        }
    }

    /// Recomputes the nonempty children and picks a fresh target: the
    /// smallest child every (2d+1)-th choice by survivor count, otherwise the
    /// one holding the most surviving parent marks. Ties go to the lowest
    /// index. Marks the new target.
    pub fn retarget(&mut self, c: Cluster) {
        let uni = self.g.uni.clone();
        let ci = uni.cluster_index(c);
        let pool: Vec<u32> = (1..=uni.k)
            .filter(|&i| self.trie.size_of(uni.child(c, i)) > 0)
            .collect();
        if pool.is_empty() {
            return;
        }
        if pool.len() == 1 {
            self.target[ci] = pool[0];
            let inherited: BTreeSet<Vertex> = self
                .marks
                .get(&ci)
                .map(|m| m.iter().copied().filter(|&v| self.trie.contains(v)).collect())
                .unwrap_or_default();
            self.mark(uni.child(c, pool[0]), &inherited, MarkReason::Inherited);
            return;
        }
        let chosen = if pool.len() as u32 % (2 * uni.d + 1) == 1 {
            let mut best = pool[0];
            let mut best_size = self.trie.size_of(uni.child(c, best));
            for &i in &pool[1..] {
                let size = self.trie.size_of(uni.child(c, i));
                if size < best_size {
                    best = i;
                    best_size = size;
                }
            }
            best
        } else {
            let parent_marks = self.marks.get(&ci).cloned().unwrap_or_default();
            let survivors = |child: Cluster| {
                self.trie
                    .live(child)
                    .filter(|v| parent_marks.contains(v))
                    .count() as u64
            };
            let mut best = pool[0];
            let mut best_count = survivors(uni.child(c, best));
            for &i in &pool[1..] {
                let count = survivors(uni.child(c, i));
                if count > best_count {
                    best = i;
                    best_count = count;
                }
            }
            best
        };
        self.target[ci] = chosen;
        let x = (pool.len() - 1) as u32;
        let child = uni.child(c, chosen);
        let members: BTreeSet<Vertex> = self
            .trie
            .live(child)
            .filter(|&w| {
                (20 * self.g.live_cluster_degree(&self.trie, w, c.depth) as u64) < 19 * (x as u64)
            })
            .collect();
        self.mark(child, &members, MarkReason::Scan { anchor: c, x, skip_marked: false });
    }

    /// Removes one vertex by descending targets to a leaf; a cluster only
    /// retargets when this trim emptied its target child.
    pub fn trim(&mut self, c: Cluster) -> Result<Vertex> {
        if c.depth == self.g.uni.d {
            let v = self.g.uni.leaf_vertex(c);
            self.remove_logged(v)?;
            return Ok(v);
        }
        let child = self.g.uni.child(c, self.target[self.g.uni.cluster_index(c)]);
        if self.trie.size_of(child) == 0 {
            return Err(Error::EmptyCluster(self.g.uni.cluster_label(child)));
        }
        let w = self.trim(child)?;
        if self.trie.size_of(child) == 0 {
            self.retarget(c);
        }
        Ok(w)
    }

    /// Removes `v`, then per ancestor either retargets (target emptied) or
    /// marks freshly low-degree target members, and pays the trim budget.
    /// Returns the forced removals, excluding `v`.
    pub fn delete(&mut self, v: Vertex) -> Result<Vec<Vertex>> {
        if !self.trie.contains(v) {
            return Err(Error::NotPresent(self.g.uni.label(v)));
        }
        let uni = self.g.uni.clone();
        self.remove_logged(v)?;
        let mut pruned = Vec::new();
        for depth in (0..uni.d).rev() {
            let c = uni.ancestor(v, depth);
            let t = self.target[uni.cluster_index(c)];
            let tchild = uni.child(c, t);
            if self.trie.size_of(tchild) == 0 {
                self.retarget(c);
            } else {
                let x = (1..=uni.k)
                    .filter(|&j| j != t && self.trie.size_of(uni.child(c, j)) > 0)
                    .count() as u32;
                let already = self.marks.get(&uni.cluster_index(tchild)).cloned().unwrap_or_default();
                let members: BTreeSet<Vertex> = self
                    .trie
                    .live(tchild)
                    .filter(|&w| {
                        !already.contains(&w)
                            && (20 * self.g.live_cluster_degree(&self.trie, w, depth) as u64)
                                < 19 * (x as u64)
                    })
                    .collect();
                self.mark(tchild, &members, MarkReason::Scan { anchor: c, x, skip_marked: true });
            }
            let budget = self
                .trim_rate
                .saturating_mul(pruned.len() as u64 + 1)
                .min(self.trie.size_of(c));
            for _ in 0..budget {
                if self.trie.size_of(c) == 0 {
                    break;
                }
                pruned.push(self.trim(c)?);
            }
        }
        Ok(pruned)
    }
}

/// Amortized engine: deletes arrive in up to `batches` batches, and after
/// each one every cluster that fell below the staged tolerance is emptied
/// outright, keeping the survivor graph free of critical clusters.
pub struct BatchedPruner {
    pub trie: VertexTrie,
    pub tau: Tau,
    pub batches: u32,
    pub processed: u32,
}

impl BatchedPruner {
    pub fn new(uni: &Universe, tau: Tau, batches: u32) -> Result<BatchedPruner> {
        if batches == 0 {
            return Err(Error::Precondition("need at least one batch".into()));
        }
        Ok(BatchedPruner {
            trie: VertexTrie::new_full(uni),
            tau,
            batches,
            processed: 0,
        })
    }

    /// Tolerance the survivors currently satisfy: tau * processed / batches.
    /// Zero before the first batch, under which only partially-empty clusters
    /// would count as critical.
    pub fn stage_tolerance(&self) -> Tau {
        Tau {
            num: self.tau.num * self.processed as u64,
            den: self.tau.den * self.batches as u64,
        }
    }

    /// Deletes the batch, then empties critical clusters bottom-up until none
    /// remain at the staged tolerance. Returns the extra removals.
    pub fn batch_delete(&mut self, batch: &[Vertex]) -> Result<Vec<Vertex>> {
        if self.processed >= self.batches {
            return Err(Error::Capacity(format!(
                "batch budget of {} exhausted",
                self.batches
            )));
        }
        let dels: BTreeSet<Vertex> = batch.iter().copied().collect();
        for &v in &dels {
            if !self.trie.contains(v) {
                return Err(Error::NotPresent(self.trie.uni.label(v)));
            }
        }
        self.processed += 1;
        let stage = self.stage_tolerance();
        for &v in &dels {
            self.trie.remove(v)?;
        }
        let mut pruned = Vec::new();
        self.sweep(ROOT, stage, &mut pruned)?;
        Ok(pruned)
    }

    // Emptying a cluster only shrinks ancestors, so one bottom-up pass
    // reaches the fixpoint.
    fn sweep(&mut self, c: Cluster, stage: Tau, pruned: &mut Vec<Vertex>) -> Result<()> {
        if self.trie.size_of(c) == 0 {
            return Ok(());
        }
        if c.depth < self.trie.uni.d {
            for i in 1..=self.trie.uni.k {
                self.sweep(self.trie.uni.child(c, i), stage, pruned)?;
            }
        }
        if validate::is_critical(&self.trie, stage, c) {
            let members: Vec<Vertex> = self.trie.live(c).collect();
            for v in members {
                self.trie.remove(v)?;
                pruned.push(v);
            }
        }
        Ok(())
    }
}
