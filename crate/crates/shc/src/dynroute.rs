//! Deterministic dynamic routing. Each cluster splits its cross-child demand
//! into a base part that rides a balanced direct edge and an overflow part
//! that first escapes through per-child balancers, re-entering one level of
//! direct demand between the far endpoints. Updates replay only the balancer
//! decisions the change touches, so the set of rerouted pairs stays linear in
//! the churn at every level.

use std::collections::{BTreeMap, BTreeSet};

use crate::balance::{BucketId, LoadBalancer, Recourse};
use crate::error::{Error, Result};
use crate::graph::SemiHypercube;
use crate::label::{Cluster, Universe, Vertex, ROOT};
use crate::route::Path;
use crate::trie::VertexTrie;
use crate::validate::{self, Mode, Tau};

/// One unit of demand: route from `a` to `b`, tracked by a caller-chosen id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct DemandPair {
    pub a: Vertex,
    pub b: Vertex,
    pub id: u64,
}

/// Pair identity inside the recursion: the original id plus the bit string of
/// legs taken so far (1 = escape leg, 0 = direct leg). Comparing by
/// (base, len, bits) makes "lowest id" well defined at every level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RecId {
    pub base: u64,
    pub len: u8,
    pub bits: u32,
}

impl RecId {
    pub fn root(base: u64) -> RecId {
        RecId { base, len: 0, bits: 0 }
    }

    /// Id one level down; `escape` marks overflow legs.
    pub fn child(self, escape: bool) -> RecId {
        RecId {
            base: self.base,
            len: self.len + 1,
            bits: (self.bits << 1) | escape as u32,
        }
    }

    pub fn parent(self) -> RecId {
        RecId {
            base: self.base,
            len: self.len - 1,
            bits: self.bits >> 1,
        }
    }
}

/// Buckets are matching edges, keyed by endpoint codes. Each escape balancer
/// is per child, so (balancer, bucket) already identifies (edge, owning side).
pub fn edge_bucket(u: Vertex, w: Vertex) -> BucketId {
    let (lo, hi) = if u.0 <= w.0 { (u, w) } else { (w, u) };
    ((lo.0 as u64) << 32) | hi.0 as u64
}

fn bucket_ends(e: BucketId) -> (Vertex, Vertex) {
    (Vertex((e >> 32) as u32), Vertex(e as u32))
}

/// Max demand pairs incident to one vertex; a pair with a = b counts twice.
pub fn demand_load<'a>(pairs: impl IntoIterator<Item = &'a DemandPair>) -> u64 {
    let mut per: BTreeMap<Vertex, u64> = BTreeMap::new();
    for p in pairs {
        *per.entry(p.a).or_insert(0) += 1;
        *per.entry(p.b).or_insert(0) += 1;
    }
    per.values().copied().max().unwrap_or(0)
}

type Record = (Vertex, Vertex, RecId);

/// Routing state of one cluster. `pairs` holds the demand routed inside it
/// with original endpoints. Cross demand between children i < j splits into
/// `base` (rides a direct (i, j) edge) and `ovf` (escapes first); `b_ovf[i]`
/// assigns escape edges out of child i, `b_dir[(i, j)]` the direct edges.
#[derive(Default)]
struct ClusterState {
    pairs: BTreeMap<RecId, (Vertex, Vertex)>,
    base: BTreeMap<(u32, u32), BTreeSet<RecId>>,
    ovf: BTreeMap<(u32, u32), BTreeSet<RecId>>,
    b_ovf: BTreeMap<u32, LoadBalancer<RecId>>,
    b_dir: BTreeMap<(u32, u32), LoadBalancer<RecId>>,
}

pub struct DynRouter {
    pub g: SemiHypercube,
    pub trie: VertexTrie,
    pub tau: Tau,
    pub load_bound: u64,
    pub mode: Mode,
    clusters: Vec<ClusterState>,
}

impl DynRouter {
    /// Route `demand` over the live vertices in `trie`. Strict mode checks
    /// validity and the load bound up front; both modes require live
    /// endpoints, unique ids, and tolerance at most 1/4.
    pub fn new(
        g: &SemiHypercube,
        trie: &VertexTrie,
        demand: &[DemandPair],
        tau: Tau,
        load_bound: u64,
        mode: Mode,
    ) -> Result<DynRouter> {
        if 4 * tau.num as u128 > tau.den as u128 {
            return Err(Error::Precondition(format!(
                "tolerance {tau} exceeds the 1/4 routing limit"
            )));
        }
        let mut ids = BTreeSet::new();
        for p in demand {
            if !ids.insert(p.id) {
                return Err(Error::Precondition(format!("duplicate demand id {}", p.id)));
            }
            for v in [p.a, p.b] {
                if !trie.contains(v) {
                    return Err(Error::NotPresent(format!(
                        "demand {} endpoint {} is not live",
                        p.id,
                        g.uni.label(v)
                    )));
                }
            }
        }
        if mode == Mode::Strict {
            if !validate::is_valid(g, trie, tau) {
                return Err(Error::InvalidGraph(
                    "routing requires a valid instance".into(),
                ));
            }
            let load = demand_load(demand.iter());
            if load > load_bound {
                return Err(Error::Capacity(format!(
                    "demand load {load} exceeds bound {load_bound}"
                )));
            }
        }
        let uni = g.uni.clone();
        let mut router = DynRouter {
            g: g.clone(),
            trie: trie.clone(),
            tau,
            load_bound,
            mode,
            clusters: (0..uni.cluster_count())
                .map(|_| ClusterState::default())
                .collect(),
        };
        // Register every live matching edge: a direct bucket at its split
        // cluster, an escape bucket for each endpoint's child.
        let mut dir_new: BTreeMap<(usize, (u32, u32)), BTreeSet<BucketId>> = BTreeMap::new();
        let mut ovf_new: BTreeMap<(usize, u32), BTreeSet<BucketId>> = BTreeMap::new();
        for (u, w) in g.edges() {
            if !(trie.contains(u) && trie.contains(w)) {
                continue;
            }
            let c = uni.lcp(u, w);
            let ci = uni.cluster_index(c);
            let (iu, iw) = (uni.digit(u, c.depth), uni.digit(w, c.depth));
            let e = edge_bucket(u, w);
            dir_new
                .entry((ci, (iu.min(iw), iu.max(iw))))
                .or_default()
                .insert(e);
            ovf_new.entry((ci, iu)).or_default().insert(e);
            ovf_new.entry((ci, iw)).or_default().insert(e);
        }
        let no_ids: BTreeSet<RecId> = BTreeSet::new();
        let no_buckets: BTreeSet<BucketId> = BTreeSet::new();
        for ((ci, key), buckets) in dir_new {
            router.clusters[ci]
                .b_dir
                .entry(key)
                .or_default()
                .update(&no_ids, &no_ids, &buckets, &no_buckets)?;
        }
        for ((ci, i), buckets) in ovf_new {
            router.clusters[ci]
                .b_ovf
                .entry(i)
                .or_default()
                .update(&no_ids, &no_ids, &buckets, &no_buckets)?;
        }
        let mut records: Vec<Record> = demand
            .iter()
            .map(|p| (p.a, p.b, RecId::root(p.id)))
            .collect();
        records.sort_by_key(|r| r.2);
        router.static_route(ROOT, records)?;
        Ok(router)
    }

    /// Demand currently routed, in id order.
    pub fn demand(&self) -> Vec<DemandPair> {
        let root = self.g.uni.cluster_index(ROOT);
        self.clusters[root]
            .pairs
            .iter()
            .map(|(id, &(a, b))| DemandPair { a, b, id: id.base })
            .collect()
    }

    pub fn pair_count(&self) -> usize {
        self.clusters[self.g.uni.cluster_index(ROOT)].pairs.len()
    }

    /// Per-edge path capacity at this depth: max(k, L) * 20^depth.
    pub fn level_capacity(&self, depth: u32) -> u128 {
        (self.g.uni.k as u64).max(self.load_bound) as u128 * 20u128.pow(depth)
    }

    /// Direct-pair budget of child pair (i, j) under the current live edge
    /// count: 4 * cap * |E| less cap * k^(d - depth - 1), floored at zero.
    pub fn overflow_threshold(&self, c: Cluster, i: u32, j: u32) -> u128 {
        let ci = self.g.uni.cluster_index(c);
        let key = (i.min(j), i.max(j));
        let edges = self.clusters[ci]
            .b_dir
            .get(&key)
            .map_or(0, |lb| lb.bucket_count());
        self.threshold_for(c.depth, edges)
    }

    fn threshold_for(&self, depth: u32, edges: u64) -> u128 {
        let cap = self.level_capacity(depth);
        let have = 4 * cap * edges as u128;
        let need = cap * self.g.uni.pow(self.g.uni.d - depth - 1) as u128;
        have.saturating_sub(need)
    }

    /// Base pairs of child pair (i, j) at `c`.
    pub fn base_ids(&self, c: Cluster, i: u32, j: u32) -> BTreeSet<RecId> {
        let ci = self.g.uni.cluster_index(c);
        self.clusters[ci]
            .base
            .get(&(i.min(j), i.max(j)))
            .cloned()
            .unwrap_or_default()
    }

    /// Overflow pairs of child pair (i, j) at `c`.
    pub fn ovf_ids(&self, c: Cluster, i: u32, j: u32) -> BTreeSet<RecId> {
        let ci = self.g.uni.cluster_index(c);
        self.clusters[ci]
            .ovf
            .get(&(i.min(j), i.max(j)))
            .cloned()
            .unwrap_or_default()
    }

    /// Current escape edge of pair `id` out of child `side`, as (near, far).
    fn escape_edge(&self, c: Cluster, id: RecId, side: u32) -> Result<(Vertex, Vertex)> {
        let ci = self.g.uni.cluster_index(c);
        let lb = self.clusters[ci].b_ovf.get(&side).ok_or_else(|| {
            Error::Invariant(format!("no escape balancer for child {side}"))
        })?;
        let e = lb.bucket_of(id).ok_or_else(|| {
            Error::Invariant(format!("pair {id:?} holds no escape edge out of child {side}"))
        })?;
        Ok(self.orient(e, c.depth, side))
    }

    /// Escape edge before this update's reassignments: the recorded old
    /// bucket if the balancer moved the pair, otherwise the current one.
    fn old_escape_edge(
        &self,
        c: Cluster,
        recs: &BTreeMap<u32, Recourse<RecId>>,
        id: RecId,
        side: u32,
    ) -> Result<(Vertex, Vertex)> {
        if let Some(rec) = recs.get(&side) {
            if let Some(&e) = rec.old_bucket.get(&id) {
                return Ok(self.orient(e, c.depth, side));
            }
        }
        self.escape_edge(c, id, side)
    }

    /// Current direct edge of pair `id` under key (i, j), oriented so the
    /// first vertex lies in child `side`.
    fn dir_edge(&self, c: Cluster, id: RecId, i: u32, j: u32, side: u32) -> Result<(Vertex, Vertex)> {
        let ci = self.g.uni.cluster_index(c);
        let key = (i.min(j), i.max(j));
        let lb = self.clusters[ci].b_dir.get(&key).ok_or_else(|| {
            Error::Invariant(format!("no direct balancer for children {key:?}"))
        })?;
        let e = lb.bucket_of(id).ok_or_else(|| {
            Error::Invariant(format!("pair {id:?} holds no direct edge for {key:?}"))
        })?;
        Ok(self.orient(e, c.depth, side))
    }

    fn orient(&self, e: BucketId, depth: u32, side: u32) -> (Vertex, Vertex) {
        let (u, w) = bucket_ends(e);
        if self.g.uni.digit(u, depth) == side {
            (u, w)
        } else {
            (w, u)
        }
    }

    fn static_route(&mut self, c: Cluster, mut demand: Vec<Record>) -> Result<()> {
        let uni = self.g.uni.clone();
        demand.sort_by_key(|r| r.2);
        if c.depth == uni.d {
            for &(a, b, id) in &demand {
                if a != b {
                    return Err(Error::Invariant(format!(
                        "leaf pair {id:?} has split endpoints"
                    )));
                }
            }
            return Ok(());
        }
        let ci = uni.cluster_index(c);
        for &(a, b, id) in &demand {
            self.clusters[ci].pairs.insert(id, (a, b));
        }
        let mut dir: Vec<Record> = Vec::new();
        let mut cross: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        for &(a, b, id) in &demand {
            let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
            if ia == ib {
                dir.push((a, b, id));
            } else {
                cross
                    .entry((ia.min(ib), ia.max(ib)))
                    .or_default()
                    .push((a, b, id));
            }
        }
        // Lowest ids ride direct edges up to the threshold, the rest escape.
        let mut ovf_groups: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        for ((i, j), group) in cross {
            let t = self.overflow_threshold(c, i, j);
            let cut = group.len().min(t.min(usize::MAX as u128) as usize);
            for &r in &group[..cut] {
                self.clusters[ci].base.entry((i, j)).or_default().insert(r.2);
                dir.push(r);
            }
            if cut < group.len() {
                let rest = group[cut..].to_vec();
                for &(_, _, id) in &rest {
                    self.clusters[ci].ovf.entry((i, j)).or_default().insert(id);
                }
                ovf_groups.insert((i, j), rest);
            }
        }
        // Overflow pairs join both endpoint children's escape balancers;
        // their continuations re-enter as direct records.
        let no_buckets: BTreeSet<BucketId> = BTreeSet::new();
        let no_ids: BTreeSet<RecId> = BTreeSet::new();
        let mut ovf_adds: BTreeMap<u32, BTreeSet<RecId>> = BTreeMap::new();
        for group in ovf_groups.values() {
            for &(a, b, id) in group {
                ovf_adds.entry(uni.digit(a, c.depth)).or_default().insert(id);
                ovf_adds.entry(uni.digit(b, c.depth)).or_default().insert(id);
            }
        }
        for (i, adds) in ovf_adds {
            self.clusters[ci]
                .b_ovf
                .entry(i)
                .or_default()
                .update(&adds, &no_ids, &no_buckets, &no_buckets)?;
        }
        let mut child_demand: BTreeMap<u32, Vec<Record>> = BTreeMap::new();
        for group in ovf_groups.values() {
            for &(a, b, id) in group {
                let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
                let (a1, c1) = self.escape_edge(c, id, ia)?;
                let (b1, d1) = self.escape_edge(c, id, ib)?;
                child_demand
                    .entry(ia)
                    .or_default()
                    .push((a, a1, id.child(true)));
                child_demand
                    .entry(ib)
                    .or_default()
                    .push((b1, b, id.child(true)));
                dir.push((c1, d1, id));
            }
        }
        // Direct records: cross ones ride a balanced (i, j) edge, same-child
        // ones pass straight down.
        let mut dir_cross: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        let mut dir_same: Vec<Record> = Vec::new();
        for r in dir {
            let (ia, ib) = (uni.digit(r.0, c.depth), uni.digit(r.1, c.depth));
            if ia == ib {
                dir_same.push(r);
            } else {
                dir_cross
                    .entry((ia.min(ib), ia.max(ib)))
                    .or_default()
                    .push(r);
            }
        }
        for (&key, group) in &dir_cross {
            let adds: BTreeSet<RecId> = group.iter().map(|r| r.2).collect();
            self.clusters[ci]
                .b_dir
                .entry(key)
                .or_default()
                .update(&adds, &no_ids, &no_buckets, &no_buckets)?;
        }
        if c.depth + 1 == uni.d {
            return Ok(());
        }
        for (&(i, j), group) in &dir_cross {
            for &(a, b, id) in group {
                let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
                let (a2, b2) = self.dir_edge(c, id, i, j, ia)?;
                child_demand
                    .entry(ia)
                    .or_default()
                    .push((a, a2, id.child(false)));
                child_demand
                    .entry(ib)
                    .or_default()
                    .push((b2, b, id.child(false)));
            }
        }
        for (a, b, id) in dir_same {
            child_demand
                .entry(uni.digit(a, c.depth))
                .or_default()
                .push((a, b, id.child(false)));
        }
        for (i, recs) in child_demand {
            self.static_route(uni.child(c, i), recs)?;
        }
        Ok(())
    }

    /// Reconstruct the current path of a routed pair. Endpoints must match
    /// the routed ones exactly.
    pub fn path_of(&self, pair: DemandPair) -> Result<Path> {
        let id = RecId::root(pair.id);
        let root = self.g.uni.cluster_index(ROOT);
        match self.clusters[root].pairs.get(&id) {
            Some(&(a, b)) if a == pair.a && b == pair.b => {}
            Some(_) => {
                return Err(Error::Precondition(format!(
                    "demand {} endpoints do not match the routed pair",
                    pair.id
                )))
            }
            None => {
                return Err(Error::UnknownId(format!(
                    "demand {} is not routed",
                    pair.id
                )))
            }
        }
        Ok(Path {
            vertices: self.walk(ROOT, pair.a, pair.b, id)?,
        })
    }

    /// All routed pairs with their current paths, in id order.
    pub fn paths(&self) -> Result<Vec<(DemandPair, Path)>> {
        self.demand()
            .into_iter()
            .map(|p| Ok((p, self.path_of(p)?)))
            .collect()
    }

    fn walk(&self, c: Cluster, a: Vertex, b: Vertex, id: RecId) -> Result<Vec<Vertex>> {
        let uni = &self.g.uni;
        if c.depth == uni.d {
            if a != b {
                return Err(Error::Invariant(format!(
                    "leaf pair {id:?} has split endpoints"
                )));
            }
            return Ok(vec![a]);
        }
        let ci = uni.cluster_index(c);
        match self.clusters[ci].pairs.get(&id) {
            Some(&(pa, pb)) if pa == a && pb == b => {}
            Some(_) => {
                return Err(Error::Invariant(format!("pair {id:?} endpoints drifted")))
            }
            None => {
                return Err(Error::UnknownId(format!("pair {id:?} is not routed here")))
            }
        }
        let (mut ca, mut cb) = (a, b);
        let (mut ia, mut ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
        let mut prefix: Vec<Vertex> = Vec::new();
        let mut suffix: Vec<Vertex> = Vec::new();
        let escaped = ia != ib
            && self.clusters[ci]
                .ovf
                .get(&(ia.min(ib), ia.max(ib)))
                .is_some_and(|s| s.contains(&id));
        if escaped {
            let (a1, c1) = self.escape_edge(c, id, ia)?;
            let (b1, d1) = self.escape_edge(c, id, ib)?;
            prefix = self.walk(uni.child(c, ia), a, a1, id.child(true))?;
            prefix.push(c1);
            suffix = vec![d1];
            suffix.extend(self.walk(uni.child(c, ib), b1, b, id.child(true))?);
            ca = c1;
            cb = d1;
            ia = uni.digit(ca, c.depth);
            ib = uni.digit(cb, c.depth);
        }
        let middle = if ia == ib {
            self.walk(uni.child(c, ia), ca, cb, id.child(false))?
        } else {
            let (a2, b2) = self.dir_edge(c, id, ia, ib, ia)?;
            let mut m = self.walk(uni.child(c, ia), ca, a2, id.child(false))?;
            m.extend(self.walk(uni.child(c, ib), b2, cb, id.child(false))?);
            m
        };
        let mut out = prefix;
        join(&mut out, middle)?;
        join(&mut out, suffix)?;
        Ok(out)
    }

    fn is_registered(&self, u: Vertex, w: Vertex) -> bool {
        if u == w {
            return false;
        }
        let c = self.g.uni.lcp(u, w);
        let ci = self.g.uni.cluster_index(c);
        let (iu, iw) = (self.g.uni.digit(u, c.depth), self.g.uni.digit(w, c.depth));
        self.clusters[ci]
            .b_dir
            .get(&(iu.min(iw), iu.max(iw)))
            .is_some_and(|lb| lb.clients_of(edge_bucket(u, w)).is_some())
    }

    /// Apply one batch change. Vertex additions are unsupported; an edge
    /// losing an endpoint must be listed in `e_minus`, a pair losing an
    /// endpoint in `d_minus`. Removals and edge churn replay first, then
    /// demand additions. Returns every id whose path may have changed.
    pub fn dynamic_update(
        &mut self,
        v_plus: &[Vertex],
        v_minus: &[Vertex],
        e_plus: &[(Vertex, Vertex)],
        e_minus: &[(Vertex, Vertex)],
        d_plus: &[DemandPair],
        d_minus: &[DemandPair],
    ) -> Result<BTreeSet<u64>> {
        if !v_plus.is_empty() {
            return Err(Error::Precondition(
                "vertex additions are not supported".into(),
            ));
        }
        let uni = self.g.uni.clone();
        let root = uni.cluster_index(ROOT);

        let mut vm: BTreeSet<Vertex> = BTreeSet::new();
        for &v in v_minus {
            if !self.trie.contains(v) {
                return Err(Error::NotPresent(format!(
                    "vertex {} is not live",
                    uni.label(v)
                )));
            }
            vm.insert(v);
        }
        let mut em: BTreeSet<BucketId> = BTreeSet::new();
        for &(u, w) in e_minus {
            if !self.is_registered(u, w) {
                return Err(Error::NotPresent(format!(
                    "edge {} - {} is not registered",
                    uni.label(u),
                    uni.label(w)
                )));
            }
            em.insert(edge_bucket(u, w));
        }
        let mut ep: BTreeSet<BucketId> = BTreeSet::new();
        for &(u, w) in e_plus {
            if !self.g.has_edge(u, w) {
                return Err(Error::Precondition(format!(
                    "{} - {} is not a matching edge",
                    uni.label(u),
                    uni.label(w)
                )));
            }
            if vm.contains(&u) || vm.contains(&w) || !self.trie.contains(u) || !self.trie.contains(w)
            {
                return Err(Error::Precondition(format!(
                    "edge {} - {} needs both endpoints live",
                    uni.label(u),
                    uni.label(w)
                )));
            }
            if self.is_registered(u, w) || em.contains(&edge_bucket(u, w)) {
                return Err(Error::Precondition(format!(
                    "edge {} - {} is already registered",
                    uni.label(u),
                    uni.label(w)
                )));
            }
            ep.insert(edge_bucket(u, w));
        }
        // Every live edge losing an endpoint must be listed for removal.
        for &v in &vm {
            for depth in 0..uni.d {
                for u in self.g.live_partners(&self.trie, v, depth) {
                    if !em.contains(&edge_bucket(v, u)) {
                        return Err(Error::Precondition(format!(
                            "edge {} - {} loses an endpoint but is not removed",
                            uni.label(v),
                            uni.label(u)
                        )));
                    }
                }
            }
        }
        let mut dm_ids: BTreeSet<u64> = BTreeSet::new();
        for p in d_minus {
            match self.clusters[root].pairs.get(&RecId::root(p.id)) {
                Some(&(a, b)) if a == p.a && b == p.b => {}
                Some(_) => {
                    return Err(Error::Precondition(format!(
                        "demand {} endpoints do not match the routed pair",
                        p.id
                    )))
                }
                None => {
                    return Err(Error::UnknownId(format!("demand {} is not routed", p.id)))
                }
            }
            if !dm_ids.insert(p.id) {
                return Err(Error::Precondition(format!(
                    "duplicate removal of demand {}",
                    p.id
                )));
            }
        }
        let mut dp_ids: BTreeSet<u64> = BTreeSet::new();
        for p in d_plus {
            if !dp_ids.insert(p.id) {
                return Err(Error::Precondition(format!("duplicate demand id {}", p.id)));
            }
            if self.clusters[root].pairs.contains_key(&RecId::root(p.id))
                && !dm_ids.contains(&p.id)
            {
                return Err(Error::Precondition(format!(
                    "demand id {} is already routed",
                    p.id
                )));
            }
            for v in [p.a, p.b] {
                if vm.contains(&v) || !self.trie.contains(v) {
                    return Err(Error::NotPresent(format!(
                        "demand {} endpoint {} is not live",
                        p.id,
                        uni.label(v)
                    )));
                }
            }
        }
        for (id, &(a, b)) in &self.clusters[root].pairs {
            if !dm_ids.contains(&id.base) && (vm.contains(&a) || vm.contains(&b)) {
                return Err(Error::Precondition(format!(
                    "demand {} touches a removed vertex but is not removed",
                    id.base
                )));
            }
        }
        if self.mode == Mode::Strict {
            if !ep.is_empty() {
                return Err(Error::Precondition(
                    "edge additions require experimental mode".into(),
                ));
            }
            for &e in &em {
                let (u, w) = bucket_ends(e);
                if !(vm.contains(&u) || vm.contains(&w)) {
                    return Err(Error::Precondition(format!(
                        "edge {} - {} keeps both endpoints; lone removal requires experimental mode",
                        uni.label(u),
                        uni.label(w)
                    )));
                }
            }
            let mut after = self.trie.clone();
            for &v in &vm {
                after.remove(v)?;
            }
            if !validate::is_valid(&self.g, &after, self.tau) {
                return Err(Error::InvalidGraph("update breaks validity".into()));
            }
            let survivors: Vec<DemandPair> = self
                .demand()
                .into_iter()
                .filter(|p| !dm_ids.contains(&p.id))
                .chain(d_plus.iter().copied())
                .collect();
            let load = demand_load(survivors.iter());
            if load > self.load_bound {
                return Err(Error::Capacity(format!(
                    "demand load {load} exceeds bound {}",
                    self.load_bound
                )));
            }
        }
        for &v in &vm {
            self.trie.remove(v)?;
        }
        let with_lca = |ids: &BTreeSet<BucketId>| -> Vec<(BucketId, Cluster)> {
            ids.iter()
                .map(|&e| {
                    let (u, w) = bucket_ends(e);
                    (e, uni.lcp(u, w))
                })
                .collect()
        };
        let edges_plus = with_lca(&ep);
        let edges_minus = with_lca(&em);
        let mut dm_records: Vec<Record> = d_minus
            .iter()
            .map(|p| (p.a, p.b, RecId::root(p.id)))
            .collect();
        dm_records.sort_by_key(|r| r.2);
        let mut dp_records: Vec<Record> = d_plus
            .iter()
            .map(|p| (p.a, p.b, RecId::root(p.id)))
            .collect();
        dp_records.sort_by_key(|r| r.2);
        // Removals and edge churn first; additions alone never displace
        // settled pairs.
        let first = self.rec_update(ROOT, &edges_plus, &edges_minus, Vec::new(), dm_records)?;
        let second = self.rec_update(ROOT, &[], &[], dp_records, Vec::new())?;
        let mut out: BTreeSet<u64> = first.into_iter().map(|id| id.base).collect();
        out.extend(second.into_iter().map(|id| id.base));
        out.extend(dp_ids);
        Ok(out)
    }

    /// Endpoints of the direct record `id` carries at this cluster: the pair
    /// itself when it rides base, the far ends of its escape edges when it
    /// overflowed.
    fn dir_endpoints(&self, c: Cluster, id: RecId) -> Result<(Vertex, Vertex)> {
        let ci = self.g.uni.cluster_index(c);
        let &(a, b) = self.clusters[ci].pairs.get(&id).ok_or_else(|| {
            Error::Invariant(format!("pair {id:?} has no endpoints here"))
        })?;
        let (ia, ib) = (self.g.uni.digit(a, c.depth), self.g.uni.digit(b, c.depth));
        if ia == ib {
            return Err(Error::Invariant(format!(
                "pair {id:?} does not ride a direct edge"
            )));
        }
        let key = (ia.min(ib), ia.max(ib));
        if self.clusters[ci]
            .ovf
            .get(&key)
            .is_some_and(|s| s.contains(&id))
        {
            let (_, c1) = self.escape_edge(c, id, ia)?;
            let (_, d1) = self.escape_edge(c, id, ib)?;
            Ok((c1, d1))
        } else {
            Ok((a, b))
        }
    }

    fn rec_update(
        &mut self,
        c: Cluster,
        e_plus: &[(BucketId, Cluster)],
        e_minus: &[(BucketId, Cluster)],
        mut d_plus: Vec<Record>,
        mut d_minus: Vec<Record>,
    ) -> Result<BTreeSet<RecId>> {
        let uni = self.g.uni.clone();
        if c.depth == uni.d {
            for &(a, b, id) in d_plus.iter().chain(d_minus.iter()) {
                if a != b {
                    return Err(Error::Invariant(format!(
                        "leaf pair {id:?} has split endpoints"
                    )));
                }
            }
            return Ok(BTreeSet::new());
        }
        let ci = uni.cluster_index(c);
        d_plus.sort_by_key(|r| r.2);
        d_minus.sort_by_key(|r| r.2);
        let arg_demand = d_plus.len() + d_minus.len();

        let mut e_lv_plus: BTreeMap<(u32, u32), BTreeSet<BucketId>> = BTreeMap::new();
        let mut e_lv_minus: BTreeMap<(u32, u32), BTreeSet<BucketId>> = BTreeMap::new();
        let mut lv_edges = 0usize;
        for (dst, src) in [(&mut e_lv_plus, e_plus), (&mut e_lv_minus, e_minus)] {
            for &(e, lca) in src {
                if lca == c {
                    let (u, w) = bucket_ends(e);
                    let (iu, iw) = (uni.digit(u, c.depth), uni.digit(w, c.depth));
                    dst.entry((iu.min(iw), iu.max(iw))).or_default().insert(e);
                    lv_edges += 1;
                }
            }
        }

        // Drop removed pairs before registering added ones: a reassignment
        // can carry the same recursive id out and back in one call.
        let mut dir_plus: Vec<Record> = Vec::new();
        let mut dir_minus: Vec<Record> = Vec::new();
        let mut cross_plus: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        let mut cross_minus: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        for &(a, b, id) in &d_minus {
            self.clusters[ci].pairs.remove(&id);
            let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
            if ia == ib {
                dir_minus.push((a, b, id));
            } else {
                cross_minus
                    .entry((ia.min(ib), ia.max(ib)))
                    .or_default()
                    .push((a, b, id));
            }
        }
        for &(a, b, id) in &d_plus {
            self.clusters[ci].pairs.insert(id, (a, b));
            let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
            if ia == ib {
                dir_plus.push((a, b, id));
            } else {
                cross_plus
                    .entry((ia.min(ib), ia.max(ib)))
                    .or_default()
                    .push((a, b, id));
            }
        }

        // Re-split every touched child pair: the threshold moves with the
        // edge count; promotions and demotions (lowest id first) keep base
        // full whenever overflow is nonempty.
        let mut keys: BTreeSet<(u32, u32)> = BTreeSet::new();
        keys.extend(cross_plus.keys().copied());
        keys.extend(cross_minus.keys().copied());
        keys.extend(e_lv_plus.keys().copied());
        keys.extend(e_lv_minus.keys().copied());
        let mut ovf_plus: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        let mut ovf_minus: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        for &key in &keys {
            let mut oset = self.clusters[ci].ovf.remove(&key).unwrap_or_default();
            let mut bset = self.clusters[ci].base.remove(&key).unwrap_or_default();
            let mut o_minus: Vec<Record> = Vec::new();
            let mut o_plus: Vec<Record> = Vec::new();
            for r in cross_minus.remove(&key).unwrap_or_default() {
                if oset.remove(&r.2) {
                    o_minus.push(r);
                } else if bset.remove(&r.2) {
                    dir_minus.push(r);
                } else {
                    return Err(Error::Invariant(format!(
                        "pair {:?} is not split under {key:?}",
                        r.2
                    )));
                }
            }
            let adds = cross_plus.remove(&key).unwrap_or_default();
            let edges = self.clusters[ci]
                .b_dir
                .get(&key)
                .map_or(0, |lb| lb.bucket_count()) as i128
                + e_lv_plus.get(&key).map_or(0, |s| s.len()) as i128
                - e_lv_minus.get(&key).map_or(0, |s| s.len()) as i128;
            let t = self
                .threshold_for(c.depth, edges.max(0) as u64)
                .min(i128::MAX as u128) as i128;
            let rf = (t - bset.len() as i128).min((oset.len() + adds.len()) as i128);
            if rf >= 0 {
                let mut cand: BTreeMap<RecId, (Vertex, Vertex, bool)> = BTreeMap::new();
                for &id in &oset {
                    let &(a, b) = self.clusters[ci].pairs.get(&id).ok_or_else(|| {
                        Error::Invariant(format!("pair {id:?} has no endpoints here"))
                    })?;
                    cand.insert(id, (a, b, true));
                }
                for &(a, b, id) in &adds {
                    cand.insert(id, (a, b, false));
                }
                for (n, (&id, &(a, b, from_ovf))) in cand.iter().enumerate() {
                    if (n as i128) < rf {
                        bset.insert(id);
                        if from_ovf {
                            oset.remove(&id);
                            o_minus.push((a, b, id));
                        }
                        dir_plus.push((a, b, id));
                    } else if !from_ovf {
                        oset.insert(id);
                        o_plus.push((a, b, id));
                    }
                }
            } else {
                let demote: Vec<RecId> = bset.iter().copied().take((-rf) as usize).collect();
                for id in demote {
                    bset.remove(&id);
                    let &(a, b) = self.clusters[ci].pairs.get(&id).ok_or_else(|| {
                        Error::Invariant(format!("pair {id:?} has no endpoints here"))
                    })?;
                    oset.insert(id);
                    dir_minus.push((a, b, id));
                    o_plus.push((a, b, id));
                }
                for &(a, b, id) in &adds {
                    oset.insert(id);
                    o_plus.push((a, b, id));
                }
            }
            if !oset.is_empty() {
                self.clusters[ci].ovf.insert(key, oset);
            }
            if !bset.is_empty() {
                self.clusters[ci].base.insert(key, bset);
            }
            if !o_minus.is_empty() {
                ovf_minus.insert(key, o_minus);
            }
            if !o_plus.is_empty() {
                ovf_plus.insert(key, o_plus);
            }
        }

        // Escape balancers: overflow churn plus edge churn, per child.
        let mut recs_ovf: BTreeMap<u32, Recourse<RecId>> = BTreeMap::new();
        for i in 1..=uni.k {
            let mut adds: BTreeSet<RecId> = BTreeSet::new();
            let mut removes: BTreeSet<RecId> = BTreeSet::new();
            let mut b_new: BTreeSet<BucketId> = BTreeSet::new();
            let mut b_del: BTreeSet<BucketId> = BTreeSet::new();
            for (&(x, y), group) in &ovf_plus {
                if x == i || y == i {
                    adds.extend(group.iter().map(|r| r.2));
                }
            }
            for (&(x, y), group) in &ovf_minus {
                if x == i || y == i {
                    removes.extend(group.iter().map(|r| r.2));
                }
            }
            for (&(x, y), s) in &e_lv_plus {
                if x == i || y == i {
                    b_new.extend(s.iter().copied());
                }
            }
            for (&(x, y), s) in &e_lv_minus {
                if x == i || y == i {
                    b_del.extend(s.iter().copied());
                }
            }
            if adds.is_empty() && removes.is_empty() && b_new.is_empty() && b_del.is_empty() {
                continue;
            }
            let rec = self.clusters[ci]
                .b_ovf
                .entry(i)
                .or_default()
                .update(&adds, &removes, &b_new, &b_del)?;
            recs_ovf.insert(i, rec);
        }
        // Re-emit legs for every escape assignment that changed. A side
        // whose balancer did not move the pair keeps its current edge.
        let mut child_plus: BTreeMap<u32, Vec<Record>> = BTreeMap::new();
        let mut child_minus: BTreeMap<u32, Vec<Record>> = BTreeMap::new();
        let mut gone: BTreeMap<RecId, (Vertex, Vertex)> = BTreeMap::new();
        for group in ovf_minus.values() {
            for &(a, b, id) in group {
                gone.insert(id, (a, b));
            }
        }
        let mut lost: BTreeSet<RecId> = BTreeSet::new();
        let mut gained: BTreeSet<RecId> = BTreeSet::new();
        for rec in recs_ovf.values() {
            lost.extend(rec.unassigned.iter().copied());
            gained.extend(rec.assigned.iter().copied());
        }
        for &id in &lost {
            let (a, b) = match self.clusters[ci].pairs.get(&id) {
                Some(&ends) => ends,
                None => *gone.get(&id).ok_or_else(|| {
                    Error::Invariant(format!("pair {id:?} lost its endpoints"))
                })?,
            };
            let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
            let (a1, c1) = self.old_escape_edge(c, &recs_ovf, id, ia)?;
            let (b1, d1) = self.old_escape_edge(c, &recs_ovf, id, ib)?;
            child_minus
                .entry(ia)
                .or_default()
                .push((a, a1, id.child(true)));
            child_minus
                .entry(ib)
                .or_default()
                .push((b1, b, id.child(true)));
            dir_minus.push((c1, d1, id));
        }
        for &id in &gained {
            let &(a, b) = self.clusters[ci].pairs.get(&id).ok_or_else(|| {
                Error::Invariant(format!("pair {id:?} has no endpoints here"))
            })?;
            let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
            let (a1, c1) = self.escape_edge(c, id, ia)?;
            let (b1, d1) = self.escape_edge(c, id, ib)?;
            child_plus
                .entry(ia)
                .or_default()
                .push((a, a1, id.child(true)));
            child_plus
                .entry(ib)
                .or_default()
                .push((b1, b, id.child(true)));
            dir_plus.push((c1, d1, id));
        }

        // Direct balancers: base churn, continuation churn, edge churn.
        let mut level_ids: BTreeSet<RecId> = BTreeSet::new();
        let mut dir_cross_plus: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        let mut dir_same_plus: Vec<Record> = Vec::new();
        for r in dir_plus {
            level_ids.insert(r.2);
            let (ia, ib) = (uni.digit(r.0, c.depth), uni.digit(r.1, c.depth));
            if ia == ib {
                dir_same_plus.push(r);
            } else {
                dir_cross_plus
                    .entry((ia.min(ib), ia.max(ib)))
                    .or_default()
                    .push(r);
            }
        }
        let mut dir_cross_minus: BTreeMap<(u32, u32), Vec<Record>> = BTreeMap::new();
        let mut dir_same_minus: Vec<Record> = Vec::new();
        for r in dir_minus {
            level_ids.insert(r.2);
            let (ia, ib) = (uni.digit(r.0, c.depth), uni.digit(r.1, c.depth));
            if ia == ib {
                dir_same_minus.push(r);
            } else {
                dir_cross_minus
                    .entry((ia.min(ib), ia.max(ib)))
                    .or_default()
                    .push(r);
            }
        }
        let mut keys3: BTreeSet<(u32, u32)> = BTreeSet::new();
        keys3.extend(dir_cross_plus.keys().copied());
        keys3.extend(dir_cross_minus.keys().copied());
        keys3.extend(e_lv_plus.keys().copied());
        keys3.extend(e_lv_minus.keys().copied());
        for &key in &keys3 {
            let (i, j) = key;
            let plus_group = dir_cross_plus.remove(&key).unwrap_or_default();
            let minus_group = dir_cross_minus.remove(&key).unwrap_or_default();
            let adds: BTreeSet<RecId> = plus_group.iter().map(|r| r.2).collect();
            let removes: BTreeSet<RecId> = minus_group.iter().map(|r| r.2).collect();
            let b_new = e_lv_plus.get(&key).cloned().unwrap_or_default();
            let b_del = e_lv_minus.get(&key).cloned().unwrap_or_default();
            let rec = self.clusters[ci]
                .b_dir
                .entry(key)
                .or_default()
                .update(&adds, &removes, &b_new, &b_del)?;
            level_ids.extend(rec.assigned.iter().copied());
            level_ids.extend(rec.unassigned.iter().copied());
            let minus_ep: BTreeMap<RecId, (Vertex, Vertex)> =
                minus_group.iter().map(|r| (r.2, (r.0, r.1))).collect();
            let plus_ep: BTreeMap<RecId, (Vertex, Vertex)> =
                plus_group.iter().map(|r| (r.2, (r.0, r.1))).collect();
            for &id in &rec.unassigned {
                let (a, b) = match minus_ep.get(&id) {
                    Some(&ends) => ends,
                    None => self.dir_endpoints(c, id)?,
                };
                let e = rec.old_bucket.get(&id).copied().ok_or_else(|| {
                    Error::Invariant(format!("pair {id:?} left no old direct edge"))
                })?;
                let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
                let (a2, b2) = self.orient(e, c.depth, ia);
                child_minus
                    .entry(ia)
                    .or_default()
                    .push((a, a2, id.child(false)));
                child_minus
                    .entry(ib)
                    .or_default()
                    .push((b2, b, id.child(false)));
            }
            for &id in &rec.assigned {
                let (a, b) = match plus_ep.get(&id) {
                    Some(&ends) => ends,
                    None => self.dir_endpoints(c, id)?,
                };
                let (ia, ib) = (uni.digit(a, c.depth), uni.digit(b, c.depth));
                let (a2, b2) = self.dir_edge(c, id, i, j, ia)?;
                child_plus
                    .entry(ia)
                    .or_default()
                    .push((a, a2, id.child(false)));
                child_plus
                    .entry(ib)
                    .or_default()
                    .push((b2, b, id.child(false)));
            }
        }
        for (a, b, id) in dir_same_minus {
            child_minus
                .entry(uni.digit(a, c.depth))
                .or_default()
                .push((a, b, id.child(false)));
        }
        for (a, b, id) in dir_same_plus {
            child_plus
                .entry(uni.digit(a, c.depth))
                .or_default()
                .push((a, b, id.child(false)));
        }

        // Per-level recourse stays linear in this level's inputs.
        let child_total: usize = child_plus.values().map(Vec::len).sum::<usize>()
            + child_minus.values().map(Vec::len).sum::<usize>();
        let bound = 72 * arg_demand as u128 + 320 * self.level_capacity(c.depth) * lv_edges as u128;
        if child_total as u128 > bound {
            return Err(Error::Invariant(format!(
                "child churn {child_total} exceeds the per-level bound {bound}"
            )));
        }

        let mut out = level_ids;
        if c.depth + 1 < uni.d {
            for i in 1..=uni.k {
                let child = uni.child(c, i);
                let dp = child_plus.remove(&i).unwrap_or_default();
                let dm = child_minus.remove(&i).unwrap_or_default();
                let ep_sub: Vec<(BucketId, Cluster)> = e_plus
                    .iter()
                    .filter(|&&(_, lca)| cluster_within(&uni, child, lca))
                    .copied()
                    .collect();
                let em_sub: Vec<(BucketId, Cluster)> = e_minus
                    .iter()
                    .filter(|&&(_, lca)| cluster_within(&uni, child, lca))
                    .copied()
                    .collect();
                if dp.is_empty() && dm.is_empty() && ep_sub.is_empty() && em_sub.is_empty() {
                    continue;
                }
                let sub = self.rec_update(child, &ep_sub, &em_sub, dp, dm)?;
                out.extend(sub.into_iter().map(RecId::parent));
            }
        }
        Ok(out)
    }

    /// Full structural audit for tests and fuzz drivers: balancer internals,
    /// threshold splits over the registered edges, and every child pair
    /// derivable from its parent's current assignments.
    pub fn check_invariants(&self) -> Result<()> {
        let uni = &self.g.uni;
        let mut registered: BTreeMap<(usize, (u32, u32)), BTreeSet<BucketId>> = BTreeMap::new();
        for (ci, st) in self.clusters.iter().enumerate() {
            for (&key, lb) in &st.b_dir {
                let buckets: BTreeSet<BucketId> = lb.buckets().collect();
                for &e in &buckets {
                    let (u, w) = bucket_ends(e);
                    if !self.g.has_edge(u, w)
                        || !self.trie.contains(u)
                        || !self.trie.contains(w)
                    {
                        return Err(Error::Invariant(format!(
                            "registered edge {} - {} is not a live matching edge",
                            uni.label(u),
                            uni.label(w)
                        )));
                    }
                }
                if !buckets.is_empty() {
                    registered.insert((ci, key), buckets);
                }
            }
        }
        let fail = |msg: String| Err(Error::Invariant(msg));
        for depth in 0..uni.d {
            for prefix in 0..uni.pow(depth) as u32 {
                let c = Cluster { depth, prefix };
                let ci = uni.cluster_index(c);
                let st = &self.clusters[ci];
                let mut cross: BTreeMap<(u32, u32), BTreeSet<RecId>> = BTreeMap::new();
                for (&id, &(a, b)) in &st.pairs {
                    if id.len != depth as u8 {
                        return fail(format!("pair {id:?} at wrong depth in {c:?}"));
                    }
                    for v in [a, b] {
                        if !uni.contains(c, v) || !self.trie.contains(v) {
                            return fail(format!("pair {id:?} endpoint {} invalid", uni.label(v)));
                        }
                    }
                    let (ia, ib) = (uni.digit(a, depth), uni.digit(b, depth));
                    if ia != ib {
                        cross
                            .entry((ia.min(ib), ia.max(ib)))
                            .or_default()
                            .insert(id);
                    }
                }
                // base/ovf partition the cross pairs; base fills before
                // anything overflows.
                let mut split_keys: BTreeSet<(u32, u32)> = cross.keys().copied().collect();
                split_keys.extend(st.base.keys().copied());
                split_keys.extend(st.ovf.keys().copied());
                for &key in &split_keys {
                    let b = st.base.get(&key).cloned().unwrap_or_default();
                    let o = st.ovf.get(&key).cloned().unwrap_or_default();
                    if !b.is_disjoint(&o) {
                        return fail(format!("base and overflow overlap at {c:?} {key:?}"));
                    }
                    let both: BTreeSet<RecId> = b.union(&o).copied().collect();
                    if both != cross.get(&key).cloned().unwrap_or_default() {
                        return fail(format!("split sets drift from pairs at {c:?} {key:?}"));
                    }
                    let edges = registered
                        .get(&(ci, key))
                        .map_or(0, |s| s.len() as u64);
                    let t = self.threshold_for(depth, edges);
                    if (b.len() as u128) > t || (!o.is_empty() && (b.len() as u128) != t) {
                        return fail(format!(
                            "threshold invariant broken at {c:?} {key:?}: base {} overflow {} threshold {t}",
                            b.len(),
                            o.len()
                        ));
                    }
                }
                // Direct balancers: buckets are exactly the live split edges;
                // clients are base pairs plus continuations landing there.
                let mut expect_dir: BTreeMap<(u32, u32), BTreeSet<RecId>> = BTreeMap::new();
                for (&key, ids) in &st.base {
                    expect_dir.entry(key).or_default().extend(ids.iter().copied());
                }
                let mut continuation: BTreeMap<RecId, (Vertex, Vertex)> = BTreeMap::new();
                for ids in st.ovf.values() {
                    for &id in ids {
                        let &(a, b) = st.pairs.get(&id).unwrap();
                        let (ia, ib) = (uni.digit(a, depth), uni.digit(b, depth));
                        let (_, c1) = self.escape_edge(c, id, ia)?;
                        let (_, d1) = self.escape_edge(c, id, ib)?;
                        continuation.insert(id, (c1, d1));
                        let (ic, idd) = (uni.digit(c1, depth), uni.digit(d1, depth));
                        if ic != idd {
                            expect_dir
                                .entry((ic.min(idd), ic.max(idd)))
                                .or_default()
                                .insert(id);
                        }
                    }
                }
                let mut dir_keys: BTreeSet<(u32, u32)> = expect_dir.keys().copied().collect();
                dir_keys.extend(st.b_dir.keys().copied());
                for &key in &dir_keys {
                    let want_clients = expect_dir.get(&key).cloned().unwrap_or_default();
                    match st.b_dir.get(&key) {
                        Some(lb) => {
                            lb.check_invariants()?;
                            let got_clients: BTreeSet<RecId> = lb.clients().collect();
                            if got_clients != want_clients {
                                return fail(format!(
                                    "direct balancer at {c:?} {key:?} drifted"
                                ));
                            }
                        }
                        None => {
                            if !want_clients.is_empty() {
                                return fail(format!(
                                    "missing direct balancer at {c:?} {key:?}"
                                ));
                            }
                        }
                    }
                }
                // Escape balancers: clients are the overflow pairs touching
                // the child, buckets all registered edges leaving it.
                for i in 1..=uni.k {
                    let mut want_clients: BTreeSet<RecId> = BTreeSet::new();
                    for (&(x, y), ids) in &st.ovf {
                        if x == i || y == i {
                            want_clients.extend(ids.iter().copied());
                        }
                    }
                    let mut want_buckets: BTreeSet<BucketId> = BTreeSet::new();
                    for (&(_, (x, y)), s) in
                        registered.range((ci, (0, 0))..=(ci, (u32::MAX, u32::MAX)))
                    {
                        if x == i || y == i {
                            want_buckets.extend(s.iter().copied());
                        }
                    }
                    match st.b_ovf.get(&i) {
                        Some(lb) => {
                            lb.check_invariants()?;
                            let got_clients: BTreeSet<RecId> = lb.clients().collect();
                            let got_buckets: BTreeSet<BucketId> = lb.buckets().collect();
                            if got_clients != want_clients || got_buckets != want_buckets {
                                return fail(format!(
                                    "escape balancer at {c:?} child {i} drifted"
                                ));
                            }
                        }
                        None => {
                            if !want_clients.is_empty() || !want_buckets.is_empty() {
                                return fail(format!(
                                    "missing escape balancer at {c:?} child {i}"
                                ));
                            }
                        }
                    }
                }
                // Child pairs are exactly the legs of this cluster's current
                // assignments.
                if depth + 1 < uni.d {
                    let mut expect_child: BTreeMap<u32, BTreeMap<RecId, (Vertex, Vertex)>> =
                        BTreeMap::new();
                    for (&id, &(a, b)) in &st.pairs {
                        let (ia, ib) = (uni.digit(a, depth), uni.digit(b, depth));
                        if ia == ib {
                            expect_child
                                .entry(ia)
                                .or_default()
                                .insert(id.child(false), (a, b));
                            continue;
                        }
                        let (ca, cb, down) = match continuation.get(&id) {
                            Some(&(c1, d1)) => {
                                let (a1, _) = self.escape_edge(c, id, ia)?;
                                let (b1, _) = self.escape_edge(c, id, ib)?;
                                expect_child
                                    .entry(ia)
                                    .or_default()
                                    .insert(id.child(true), (a, a1));
                                expect_child
                                    .entry(ib)
                                    .or_default()
                                    .insert(id.child(true), (b1, b));
                                (c1, d1, id.child(false))
                            }
                            None => (a, b, id.child(false)),
                        };
                        let (ic, idd) = (uni.digit(ca, depth), uni.digit(cb, depth));
                        if ic == idd {
                            expect_child.entry(ic).or_default().insert(down, (ca, cb));
                        } else {
                            let (a2, b2) = self.dir_edge(c, id, ic, idd, ic)?;
                            expect_child.entry(ic).or_default().insert(down, (ca, a2));
                            expect_child.entry(idd).or_default().insert(down, (b2, cb));
                        }
                    }
                    for i in 1..=uni.k {
                        let child_ci = uni.cluster_index(uni.child(c, i));
                        let want = expect_child.remove(&i).unwrap_or_default();
                        if self.clusters[child_ci].pairs != want {
                            return fail(format!(
                                "child pairs of {c:?} child {i} drifted from assignments"
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Registered buckets equal the live induced matching edges exactly.
    /// Holds as long as every update tracks the live set; lone edge removals
    /// or additions in experimental mode break the equality on purpose.
    pub fn check_full_registration(&self) -> Result<()> {
        let uni = &self.g.uni;
        for (u, w) in self.g.edges() {
            let live = self.trie.contains(u) && self.trie.contains(w);
            if live != self.is_registered(u, w) {
                return Err(Error::Invariant(format!(
                    "edge {} - {} registration disagrees with the live set",
                    uni.label(u),
                    uni.label(w)
                )));
            }
        }
        Ok(())
    }
}

fn cluster_within(uni: &Universe, outer: Cluster, inner: Cluster) -> bool {
    inner.depth >= outer.depth
        && inner.prefix as u64 / uni.pow(inner.depth - outer.depth) == outer.prefix as u64
}

fn join(out: &mut Vec<Vertex>, part: Vec<Vertex>) -> Result<()> {
    if part.is_empty() {
        return Ok(());
    }
    if out.is_empty() {
        *out = part;
        return Ok(());
    }
    if *out.last().unwrap() != part[0] {
        return Err(Error::Invariant("path segments do not meet".into()));
    }
    out.extend(part.into_iter().skip(1));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::Universe;
    use crate::rng::SplitRng;
    use crate::route::measure_congestion;

    fn v(uni: &Universe, label: &str) -> Vertex {
        uni.parse_label(label).unwrap()
    }

    fn pair(uni: &Universe, a: &str, b: &str, id: u64) -> DemandPair {
        DemandPair {
            a: v(uni, a),
            b: v(uni, b),
            id,
        }
    }

    fn quarter() -> Tau {
        Tau::new(1, 4).unwrap()
    }

    /// All paths valid, lengths within 4^d, congestion within max(k,L)*20^d,
    /// structure intact, edge registry matching the live set.
    fn audit(r: &DynRouter) {
        r.check_full_registration().unwrap();
        paths_ok(r);
    }

    fn paths_ok(r: &DynRouter) {
        r.check_invariants().unwrap();
        let paths = r.paths().unwrap();
        for (p, path) in &paths {
            path.check_valid(&r.g, &r.trie).unwrap();
            assert_eq!(path.start(), p.a);
            assert_eq!(path.end(), p.b);
            assert!(path.edge_count() as u128 <= 4u128.pow(r.g.uni.d));
        }
        let congestion = measure_congestion(paths.iter().map(|(_, p)| p));
        assert!(congestion.max() as u128 <= r.level_capacity(r.g.uni.d));
    }

    #[test]
    fn single_pair_rides_the_matching_edge() {
        let g = SemiHypercube::build_hypercube_style(2, 1).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let demand = [pair(&g.uni, "1", "2", 7)];
        let r = DynRouter::new(&g, &trie, &demand, quarter(), 1, Mode::Strict).unwrap();
        let path = r.path_of(demand[0]).unwrap();
        assert_eq!(path.vertices, vec![v(&g.uni, "1"), v(&g.uni, "2")]);
        assert_eq!(path.edge_count(), 1);
        audit(&r);

        let empty = DynRouter::new(&g, &trie, &[], quarter(), 1, Mode::Strict).unwrap();
        assert!(matches!(
            empty.path_of(demand[0]),
            Err(Error::UnknownId(_))
        ));
    }

    #[test]
    fn coincident_endpoints_route_as_a_point() {
        let g = SemiHypercube::build_hypercube_style(3, 2).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let demand = [pair(&g.uni, "2.3", "2.3", 4)];
        let r = DynRouter::new(&g, &trie, &demand, quarter(), 2, Mode::Strict).unwrap();
        let path = r.path_of(demand[0]).unwrap();
        assert_eq!(path.vertices, vec![v(&g.uni, "2.3")]);
        audit(&r);
    }

    #[test]
    fn threshold_formula_matches_hand_values() {
        let g = SemiHypercube::build_hypercube_style(4, 2).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let r = DynRouter::new(&g, &trie, &[], quarter(), 4, Mode::Strict).unwrap();
        // cap 4, four live edges per child pair: 4*4*4 - 4*4 = 48.
        assert_eq!(r.level_capacity(0), 4);
        assert_eq!(r.overflow_threshold(ROOT, 1, 2), 48);
        let c1 = g.uni.child(ROOT, 1);
        // depth 1: cap 80, one edge per leaf pair: 4*80 - 80 = 240.
        assert_eq!(r.overflow_threshold(c1, 2, 3), 240);
    }

    #[test]
    fn same_child_demand_stays_inside_the_child() {
        let g = SemiHypercube::build_hypercube_style(2, 2).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let demand = [pair(&g.uni, "1.1", "1.2", 3)];
        let r = DynRouter::new(&g, &trie, &demand, quarter(), 2, Mode::Strict).unwrap();
        let path = r.path_of(demand[0]).unwrap();
        assert_eq!(
            path.vertices,
            vec![v(&g.uni, "1.1"), v(&g.uni, "1.2")]
        );
        assert!(path.edge_count() as u128 <= 4u128.pow(g.uni.d - 1));
        for &w in &path.vertices {
            assert_eq!(g.uni.digit(w, 0), 1);
        }
        audit(&r);
    }

    /// Crafted sparse instance: one (1,2) edge, threshold 4, five pairs, so
    /// the highest id overflows and its path crosses three top-level edges.
    fn overflown() -> (DynRouter, Vec<DemandPair>) {
        let g = SemiHypercube::build_hypercube_style(3, 2).unwrap();
        let mut trie = VertexTrie::new_full(&g.uni);
        for dead in ["1.3", "2.1"] {
            trie.remove(v(&g.uni, dead)).unwrap();
        }
        let demand = vec![
            pair(&g.uni, "1.1", "2.2", 1),
            pair(&g.uni, "1.1", "2.3", 2),
            pair(&g.uni, "1.1", "2.2", 3),
            pair(&g.uni, "1.1", "2.3", 4),
            pair(&g.uni, "1.2", "2.2", 5),
        ];
        let r = DynRouter::new(&g, &trie, &demand, quarter(), 4, Mode::Experimental).unwrap();
        (r, demand)
    }

    #[test]
    fn overflow_pair_crosses_three_top_level_edges() {
        let (r, demand) = overflown();
        assert_eq!(r.overflow_threshold(ROOT, 1, 2), 4);
        let base = r.base_ids(ROOT, 1, 2);
        let ovf = r.ovf_ids(ROOT, 1, 2);
        assert_eq!(base.len(), 4);
        assert_eq!(ovf, BTreeSet::from([RecId::root(5)]));
        let path = r.path_of(demand[4]).unwrap();
        let top = path
            .edges()
            .filter(|&(x, y)| r.g.uni.lcp(x, y).depth == 0)
            .count();
        assert_eq!(top, 3);
        for p in &demand[..4] {
            let direct = r.path_of(*p).unwrap();
            let crossings = direct
                .edges()
                .filter(|&(x, y)| r.g.uni.lcp(x, y).depth == 0)
                .count();
            assert_eq!(crossings, 1);
        }
        audit(&r);
    }

    #[test]
    fn edge_churn_demotes_and_promotes_across_the_threshold() {
        let (mut r, _) = overflown();
        let uni = r.g.uni.clone();
        let e = (v(&uni, "1.2"), v(&uni, "2.2"));
        // Deleting the only (1,2) edge zeroes the threshold: every base pair
        // demotes to overflow.
        let changed = r
            .dynamic_update(&[], &[], &[], &[e], &[], &[])
            .unwrap();
        assert_eq!(r.overflow_threshold(ROOT, 1, 2), 0);
        assert!(r.base_ids(ROOT, 1, 2).is_empty());
        assert_eq!(r.ovf_ids(ROOT, 1, 2).len(), 5);
        assert_eq!(changed, BTreeSet::from([1, 2, 3, 4, 5]));
        paths_ok(&r);
        // Restoring it promotes the four lowest ids back to base.
        r.dynamic_update(&[], &[], &[e], &[], &[], &[]).unwrap();
        assert_eq!(
            r.base_ids(ROOT, 1, 2),
            (1..=4).map(RecId::root).collect::<BTreeSet<_>>()
        );
        assert_eq!(r.ovf_ids(ROOT, 1, 2), BTreeSet::from([RecId::root(5)]));
        audit(&r);
    }

    #[test]
    fn additions_touch_only_the_new_pair() {
        let g = SemiHypercube::build_random_shc(4, 2, 11).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let mut r = DynRouter::new(&g, &trie, &[], quarter(), 8, Mode::Strict).unwrap();
        let mut rng = SplitRng::seeded(901);
        let mut routed: Vec<DemandPair> = Vec::new();
        for id in 1..=20 {
            let a = Vertex(rng.below(g.uni.n()) as u32);
            let b = Vertex(rng.below(g.uni.n()) as u32);
            let p = DemandPair { a, b, id };
            if demand_load(routed.iter().chain([&p])) > r.load_bound {
                continue;
            }
            let before: Vec<Path> = routed.iter().map(|q| r.path_of(*q).unwrap()).collect();
            let changed = r
                .dynamic_update(&[], &[], &[], &[], &[p], &[])
                .unwrap();
            assert_eq!(changed, BTreeSet::from([id]));
            for (q, old) in routed.iter().zip(&before) {
                assert_eq!(r.path_of(*q).unwrap().vertices, old.vertices);
            }
            routed.push(p);
            audit(&r);
        }
        assert!(routed.len() > 10);
    }

    #[test]
    fn removals_report_every_changed_path() {
        let (mut r, demand) = overflown();
        let keep: Vec<DemandPair> = demand[..4].to_vec();
        let before: BTreeMap<u64, Path> = keep
            .iter()
            .map(|p| (p.id, r.path_of(*p).unwrap()))
            .collect();
        let changed = r
            .dynamic_update(&[], &[], &[], &[], &[], &[demand[4]])
            .unwrap();
        assert!(changed.contains(&5));
        assert!(matches!(r.path_of(demand[4]), Err(Error::UnknownId(_))));
        for p in &keep {
            let now = r.path_of(*p).unwrap();
            if now.vertices != before[&p.id].vertices {
                assert!(changed.contains(&p.id));
            }
        }
        audit(&r);
    }

    #[test]
    fn vertex_deletion_reroutes_with_full_bookkeeping() {
        let g = SemiHypercube::build_random_shc(4, 2, 5).unwrap();
        let uni = g.uni.clone();
        let trie = VertexTrie::new_full(&uni);
        let mut rng = SplitRng::seeded(77);
        let mut demand: Vec<DemandPair> = Vec::new();
        for id in 1..=12 {
            let a = Vertex(rng.below(uni.n()) as u32);
            let b = Vertex(rng.below(uni.n()) as u32);
            let p = DemandPair { a, b, id };
            if demand_load(demand.iter().chain([&p])) <= 3 {
                demand.push(p);
            }
        }
        let mut r = DynRouter::new(&g, &trie, &demand, quarter(), 4, Mode::Strict).unwrap();
        audit(&r);
        let mut next_id = 100;
        for step in 0..30 {
            if step % 3 == 2 {
                // Swap one pair for a fresh one on live vertices.
                let Some(&out) = demand.first() else { break };
                let survivors: Vec<Vertex> = r.trie.live(ROOT).collect();
                let a = survivors[rng.below(survivors.len() as u64) as usize];
                let b = survivors[rng.below(survivors.len() as u64) as usize];
                let p = DemandPair { a, b, id: next_id };
                next_id += 1;
                if demand_load(demand[1..].iter().chain([&p])) > r.load_bound {
                    continue;
                }
                let snapshot: BTreeMap<u64, Path> = r
                    .paths()
                    .unwrap()
                    .into_iter()
                    .map(|(q, path)| (q.id, path))
                    .collect();
                let changed = r
                    .dynamic_update(&[], &[], &[], &[], &[p], &[out])
                    .unwrap();
                demand.remove(0);
                demand.push(p);
                for (q, path) in r.paths().unwrap() {
                    if snapshot
                        .get(&q.id)
                        .is_none_or(|old| old.vertices != path.vertices)
                    {
                        assert!(changed.contains(&q.id), "path of {} moved silently", q.id);
                    }
                }
                audit(&r);
                continue;
            }
            // Delete a live vertex that keeps the instance valid, with its
            // incident edges and demand.
            let mut survivors: Vec<Vertex> = r.trie.live(ROOT).collect();
            survivors.retain(|&w| {
                let mut after = r.trie.clone();
                after.remove(w).unwrap();
                !after.is_empty() && validate::is_valid(&g, &after, r.tau)
            });
            let Some(&victim) = survivors.get(rng.below(survivors.len().max(1) as u64) as usize)
            else {
                break;
            };
            let e_minus: Vec<(Vertex, Vertex)> = (0..uni.d)
                .flat_map(|depth| {
                    g.live_partners(&r.trie, victim, depth)
                        .map(move |u| (victim, u))
                        .collect::<Vec<_>>()
                })
                .collect();
            let d_minus: Vec<DemandPair> = demand
                .iter()
                .filter(|p| p.a == victim || p.b == victim)
                .copied()
                .collect();
            let snapshot: BTreeMap<u64, Path> = r
                .paths()
                .unwrap()
                .into_iter()
                .map(|(q, path)| (q.id, path))
                .collect();
            let changed = r
                .dynamic_update(&[], &[victim], &[], &e_minus, &[], &d_minus)
                .unwrap();
            demand.retain(|p| p.a != victim && p.b != victim);
            for (q, path) in r.paths().unwrap() {
                if snapshot
                    .get(&q.id)
                    .is_none_or(|old| old.vertices != path.vertices)
                {
                    assert!(changed.contains(&q.id), "path of {} moved silently", q.id);
                }
            }
            audit(&r);
        }
        assert!(r.trie.len() < uni.n());
    }

    #[test]
    fn update_rejects_contract_violations() {
        let (mut r, demand) = overflown();
        let uni = r.g.uni.clone();
        assert!(matches!(
            r.dynamic_update(&[v(&uni, "3.3")], &[], &[], &[], &[], &[]),
            Err(Error::Precondition(_))
        ));
        // Vertex removal must carry its incident edges and demand.
        assert!(matches!(
            r.dynamic_update(&[], &[v(&uni, "3.1")], &[], &[], &[], &[]),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            r.dynamic_update(&[], &[], &[], &[], &[], &[pair(&uni, "1.1", "2.2", 99)]),
            Err(Error::UnknownId(_))
        ));
        // Removal endpoints are cross-checked against the routed pair.
        assert!(matches!(
            r.dynamic_update(&[], &[], &[], &[], &[], &[pair(&uni, "1.1", "2.3", 1)]),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            r.dynamic_update(&[], &[], &[], &[], &[pair(&uni, "1.3", "2.2", 50)], &[]),
            Err(Error::NotPresent(_))
        ));
        assert!(matches!(
            r.dynamic_update(&[], &[], &[], &[], &[demand[0]], &[]),
            Err(Error::Precondition(_))
        ));

        let g = SemiHypercube::build_hypercube_style(2, 1).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let mut strict =
            DynRouter::new(&g, &trie, &[pair(&g.uni, "1", "2", 1)], quarter(), 1, Mode::Strict)
                .unwrap();
        // Load bound enforced before mutation in strict mode.
        assert!(matches!(
            strict.dynamic_update(&[], &[], &[], &[], &[pair(&g.uni, "1", "2", 2)], &[]),
            Err(Error::Capacity(_))
        ));
        assert_eq!(strict.pair_count(), 1);
        assert!(matches!(
            strict.dynamic_update(
                &[],
                &[],
                &[],
                &[(v(&g.uni, "1"), v(&g.uni, "2"))],
                &[],
                &[]
            ),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            DynRouter::new(
                &g,
                &trie,
                &[pair(&g.uni, "1", "2", 1), pair(&g.uni, "2", "1", 1)],
                quarter(),
                4,
                Mode::Strict
            ),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            DynRouter::new(&g, &trie, &[], Tau::new(1, 3).unwrap(), 1, Mode::Strict),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn identical_histories_produce_identical_routings() {
        let run = || {
            let g = SemiHypercube::build_random_shc(4, 2, 9).unwrap();
            let trie = VertexTrie::new_full(&g.uni);
            let demand = [
                pair(&g.uni, "1.1", "3.4", 1),
                pair(&g.uni, "2.2", "4.1", 2),
                pair(&g.uni, "1.2", "1.4", 3),
            ];
            let mut r =
                DynRouter::new(&g, &trie, &demand, quarter(), 4, Mode::Strict).unwrap();
            r.dynamic_update(&[], &[], &[], &[], &[pair(&g.uni, "3.3", "2.1", 4)], &[])
                .unwrap();
            r.dynamic_update(&[], &[], &[], &[], &[], &[demand[1]]).unwrap();
            r.paths()
                .unwrap()
                .into_iter()
                .map(|(p, path)| (p.id, path.vertices))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
