use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::SemiHypercube;
use crate::label::{Cluster, Vertex, ROOT};
use crate::rng::SplitRng;
use crate::trie::VertexTrie;
use crate::validate::{
    is_critical, is_degenerate, is_noncritical, isolation, isolation_cluster, representative,
    Mode, Tau,
};

/// Nonempty vertex sequence; consecutive vertices are joined by an edge.
/// A single vertex is the empty path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Path {
    pub vertices: Vec<Vertex>,
}

impl Path {
    pub fn single(v: Vertex) -> Path {
        Path { vertices: vec![v] }
    }

    pub fn start(&self) -> Vertex {
        self.vertices[0]
    }

    pub fn end(&self) -> Vertex {
        *self.vertices.last().unwrap()
    }

    /// Number of edges, one less than the vertex count.
    pub fn edge_count(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vertex, Vertex)> + '_ {
        self.vertices.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn reversed(&self) -> Path {
        let mut vertices = self.vertices.clone();
        vertices.reverse();
        Path { vertices }
    }

    /// Joins a path starting where this one ends; the junction vertex is kept once.
    pub fn concat(mut self, other: Path) -> Path {
        assert_eq!(self.end(), other.start(), "paths do not share a junction");
        self.vertices.extend_from_slice(&other.vertices[1..]);
        self
    }

    pub fn push(&mut self, v: Vertex) {
        self.vertices.push(v);
    }

    /// Every consecutive pair must be a surviving edge of G[V].
    pub fn check_valid(&self, g: &SemiHypercube, trie: &VertexTrie) -> Result<()> {
        for &v in &self.vertices {
            if !trie.contains(v) {
                return Err(Error::Invariant(format!(
                    "path visits removed vertex {}",
                    g.uni.label(v)
                )));
            }
        }
        for (u, w) in self.edges() {
            if !g.has_edge(u, w) {
                return Err(Error::Invariant(format!(
                    "path step {} -> {} is not an edge",
                    g.uni.label(u),
                    g.uni.label(w)
                )));
            }
        }
        Ok(())
    }
}

/// Per-edge usage counts over a set of paths; keys are unordered endpoint pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CongestionMap {
    pub counts: BTreeMap<(Vertex, Vertex), u64>,
}

impl CongestionMap {
    pub fn add_path(&mut self, p: &Path) {
        for (u, w) in p.edges() {
            let key = if u.0 <= w.0 { (u, w) } else { (w, u) };
            *self.counts.entry(key).or_insert(0) += 1;
        }
    }

    pub fn max(&self) -> u64 {
        self.counts.values().copied().max().unwrap_or(0)
    }

    /// Sum over edges, which equals the sum of path lengths.
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.counts.is_empty() {
            0.0
        } else {
            self.total() as f64 / self.counts.len() as f64
        }
    }
}

pub fn measure_congestion<'a>(paths: impl IntoIterator<Item = &'a Path>) -> CongestionMap {
    let mut map = CongestionMap::default();
    for p in paths {
        map.add_path(p);
    }
    map
}

/// Vertices of a cluster from which the greedy path to `target` exists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReachSet {
    pub target: Vertex,
    pub cluster: Cluster,
    pub members: Vec<Vertex>,
}

impl ReachSet {
    pub fn contains(&self, v: Vertex) -> bool {
        self.members.binary_search_by_key(&v.0, |m| m.0).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn ensure_live(trie: &VertexTrie, v: Vertex) -> Result<()> {
    if trie.contains(v) {
        Ok(())
    } else {
        Err(Error::NotPresent(format!("vertex {} is not live", trie.uni.label(v))))
    }
}

/// Walks from s toward t, at each step crossing into t's side of the deepest
/// cluster still separating them. Absent when a required matching partner is
/// gone. At most d steps.
pub fn greedy_path(
    g: &SemiHypercube,
    trie: &VertexTrie,
    s: Vertex,
    t: Vertex,
) -> Result<Option<Path>> {
    ensure_live(trie, s)?;
    ensure_live(trie, t)?;
    let mut path = Path::single(s);
    let mut cur = s;
    while cur != t {
        let lcp = g.uni.lcp(cur, t);
        let toward = g.uni.digit(t, lcp.depth);
        match g.edge_to_sibling(trie, cur, lcp.depth, toward)? {
            Some(next) => {
                path.push(next);
                cur = next;
            }
            None => return Ok(None),
        }
    }
    debug_assert!(path.edge_count() <= g.uni.d as usize);
    Ok(Some(path))
}

/// Exact membership by running the greedy walk from every live vertex of `c`.
pub fn reach_set_oracle(
    g: &SemiHypercube,
    trie: &VertexTrie,
    t: Vertex,
    c: Cluster,
) -> Result<ReachSet> {
    ensure_live(trie, t)?;
    if !g.uni.contains(c, t) {
        return Err(Error::Precondition(format!(
            "target {} lies outside cluster {}",
            g.uni.label(t),
            g.uni.cluster_label(c)
        )));
    }
    let mut members = Vec::new();
    for s in trie.live(c) {
        if greedy_path(g, trie, s, t)?.is_some() {
            members.push(s);
        }
    }
    Ok(ReachSet { target: t, cluster: c, members })
}

/// A sampled path together with the number of midpoint draws it took.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledPath {
    pub path: Path,
    pub attempts: u32,
}

const MIDPOINT_CAP: u32 = 64;

fn join_via_midpoint(
    g: &SemiHypercube,
    trie: &VertexTrie,
    s: Vertex,
    t: Vertex,
    rng: &mut SplitRng,
) -> Result<SampledPath> {
    for attempt in 1..=MIDPOINT_CAP {
        let v = trie.sample_uniform(ROOT, rng)?;
        let Some(to_s) = greedy_path(g, trie, v, s)? else { continue };
        let Some(to_t) = greedy_path(g, trie, v, t)? else { continue };
        let path = to_s.reversed().concat(to_t);
        return Ok(SampledPath { path, attempts: attempt });
    }
    Err(Error::SamplingFailure(format!(
        "no midpoint reached both {} and {} in {MIDPOINT_CAP} draws",
        g.uni.label(s),
        g.uni.label(t)
    )))
}

/// Routes s to t through a uniform midpoint with greedy walks to both sides.
/// Sound on graphs with no critical cluster; strict mode verifies that along
/// with k >= 27d and tolerance <= 1/(27d).
pub fn sample_noncritical_path(
    g: &SemiHypercube,
    trie: &VertexTrie,
    tau: Tau,
    mode: Mode,
    s: Vertex,
    t: Vertex,
    rng: &mut SplitRng,
) -> Result<SampledPath> {
    ensure_live(trie, s)?;
    ensure_live(trie, t)?;
    if mode == Mode::Strict {
        let d = g.uni.d;
        if !tau.within_routing_bound(d) {
            return Err(Error::Precondition(format!(
                "tolerance {tau} exceeds 1/{} required by the midpoint sampler",
                27 * d as u64
            )));
        }
        if g.uni.k < 27 * d {
            return Err(Error::Precondition(format!(
                "k = {} below 27d = {} required by the midpoint sampler",
                g.uni.k,
                27 * d
            )));
        }
        if !is_noncritical(trie, tau) {
            return Err(Error::Precondition(
                "midpoint sampler requires a graph with no critical cluster".into(),
            ));
        }
    }
    join_via_midpoint(g, trie, s, t, rng)
}

const ESCAPE_HOP_CAP_PER_K: u32 = 128;

/// Repeatedly crosses a matching edge out of the deepest critical ancestor
/// until no critical cluster strictly below representative(root) remains.
/// Each accepted edge strictly lowers isolation. Also returns the isolation
/// floor of the escaped cluster per hop, a strictly decreasing sequence.
pub fn escape_trace(
    g: &SemiHypercube,
    trie: &VertexTrie,
    tau: Tau,
    s: Vertex,
    rng: &mut SplitRng,
) -> Result<(Path, Vec<u64>)> {
    ensure_live(trie, s)?;
    let uni = &g.uni;
    let d = uni.d;
    let rep = representative(trie, ROOT)?;
    let hop_cap = ESCAPE_HOP_CAP_PER_K * uni.k;
    let max_hops = (d as u64 * (d as u64 + 1)) / 2;
    let mut path = Path::single(s);
    let mut cur = s;
    let mut hop_isolations = Vec::new();
    loop {
        // Deepest critical proper ancestor strictly below the root's
        // representative; clusters on the degenerate chain above it are
        // critical for every vertex alike and are no obstacle to routing.
        let mut target = None;
        for depth in ((rep.depth + 1)..d).rev() {
            let c = uni.ancestor(cur, depth);
            if is_critical(trie, tau, c) {
                target = Some(c);
                break;
            }
        }
        let Some(sigma) = target else { return Ok((path, hop_isolations)) };
        if hop_isolations.len() as u64 >= max_hops {
            return Err(Error::Invariant(format!(
                "escape exceeded {max_hops} hops; the graph violates its validity contract"
            )));
        }

        // Deepest nondegenerate proper ancestor; the walk stops at the
        // representative at the latest.
        let mut anchor = uni.parent(sigma);
        while is_degenerate(trie, anchor) {
            anchor = uni.parent(anchor);
        }
        let eligible: Vec<u32> = (1..=uni.k)
            .filter(|&i| {
                let child = uni.child(anchor, i);
                trie.size_of(child) > 0 && !is_critical(trie, tau, child)
            })
            .collect();
        if eligible.is_empty() {
            return Err(Error::SamplingFailure(format!(
                "no noncritical sibling to escape into from cluster {}",
                uni.cluster_label(sigma)
            )));
        }
        let iso_floor = isolation_cluster(trie, tau, sigma)?;
        hop_isolations.push(iso_floor);

        let mut accepted = None;
        for _ in 0..hop_cap {
            let u = trie.sample_uniform(sigma, rng)?;
            let i = eligible[rng.below(eligible.len() as u64) as usize];
            let Some(v) = g.edge_to_sibling(trie, u, anchor.depth, i)? else { continue };
            if isolation(trie, tau, v)? >= iso_floor {
                continue;
            }
            let Some(to_cur) = greedy_path(g, trie, u, cur)? else { continue };
            accepted = Some((to_cur.reversed(), v));
            break;
        }
        let Some((to_u, v)) = accepted else {
            return Err(Error::SamplingFailure(format!(
                "no escape edge out of cluster {} accepted in {hop_cap} draws",
                uni.cluster_label(sigma)
            )));
        };
        path = path.concat(to_u);
        path.push(v);
        cur = v;
    }
}

pub fn escape(
    g: &SemiHypercube,
    trie: &VertexTrie,
    tau: Tau,
    s: Vertex,
    rng: &mut SplitRng,
) -> Result<Path> {
    escape_trace(g, trie, tau, s, rng).map(|(p, _)| p)
}

/// Oblivious route: escape both endpoints out of critical territory, then
/// join the escape exits through a uniform midpoint.
pub fn sample_path(
    g: &SemiHypercube,
    trie: &VertexTrie,
    tau: Tau,
    mode: Mode,
    s: Vertex,
    t: Vertex,
    rng: &mut SplitRng,
) -> Result<SampledPath> {
    ensure_live(trie, s)?;
    ensure_live(trie, t)?;
    if mode == Mode::Strict && !tau.within_routing_bound(g.uni.d) {
        return Err(Error::Precondition(format!(
            "tolerance {tau} exceeds 1/{} required by the oblivious router",
            27 * g.uni.d as u64
        )));
    }
    let head = escape(g, trie, tau, s, rng)?;
    let tail = escape(g, trie, tau, t, rng)?.reversed();
    let joined = join_via_midpoint(g, trie, head.end(), tail.start(), rng)?;
    Ok(SampledPath {
        path: head.concat(joined.path).concat(tail),
        attempts: joined.attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SemiHypercube;
    use crate::label::Universe;
    use crate::validate::{crit_count, home_cluster};

    fn v(uni: &Universe, label: &str) -> Vertex {
        uni.parse_label(label).unwrap()
    }

    fn remove(trie: &mut VertexTrie, labels: &[&str]) {
        for l in labels {
            let vx = trie.uni.parse_label(l).unwrap();
            trie.remove(vx).unwrap();
        }
    }

    #[test]
    fn greedy_descends_same_suffix_matchings() {
        let g = SemiHypercube::build_hypercube_style(2, 2).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let s = v(&g.uni, "1.1");
        let t = v(&g.uni, "2.2");
        let p = greedy_path(&g, &trie, s, t).unwrap().unwrap();
        let expect: Vec<Vertex> = ["1.1", "2.1", "2.2"].iter().map(|l| v(&g.uni, l)).collect();
        assert_eq!(p.vertices, expect);
        p.check_valid(&g, &trie).unwrap();

        let same = greedy_path(&g, &trie, s, s).unwrap().unwrap();
        assert_eq!(same, Path::single(s));
        assert_eq!(same.edge_count(), 0);
    }

    #[test]
    fn greedy_absent_when_bridge_removed() {
        let g = SemiHypercube::build_hypercube_style(2, 2).unwrap();
        let mut trie = VertexTrie::new_full(&g.uni);
        remove(&mut trie, &["2.1"]);
        let s = v(&g.uni, "1.1");
        let t = v(&g.uni, "2.2");
        assert_eq!(greedy_path(&g, &trie, s, t).unwrap(), None);
        assert!(greedy_path(&g, &trie, v(&g.uni, "2.1"), t).is_err());
        assert!(greedy_path(&g, &trie, s, v(&g.uni, "2.1")).is_err());
    }

    #[test]
    fn greedy_is_short_and_deterministic() {
        let g = SemiHypercube::build_random_shc(4, 3, 11).unwrap();
        let mut trie = VertexTrie::new_full(&g.uni);
        let mut rng = SplitRng::seeded(5);
        for _ in 0..12 {
            let victim = trie.sample_uniform(ROOT, &mut rng).unwrap();
            trie.remove(victim).unwrap();
        }
        for _ in 0..200 {
            let s = trie.sample_uniform(ROOT, &mut rng).unwrap();
            let t = trie.sample_uniform(ROOT, &mut rng).unwrap();
            let first = greedy_path(&g, &trie, s, t).unwrap();
            let second = greedy_path(&g, &trie, s, t).unwrap();
            assert_eq!(first, second);
            if let Some(p) = first {
                assert!(p.edge_count() <= g.uni.d as usize);
                assert_eq!((p.start(), p.end()), (s, t));
                p.check_valid(&g, &trie).unwrap();
                // Each step extends the common prefix with the target.
                let mut depth = g.uni.lcp(p.start(), t).depth;
                for (_, w) in p.edges() {
                    let next = g.uni.lcp(w, t).depth;
                    assert!(next > depth || w == t);
                    depth = next;
                }
            }
        }
    }

    #[test]
    fn reach_oracle_scopes_to_cluster() {
        let g = SemiHypercube::build_hypercube_style(2, 2).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let t = v(&g.uni, "2.2");
        let all = reach_set_oracle(&g, &trie, t, ROOT).unwrap();
        assert_eq!(all.len(), 4);
        let c2 = g.uni.ancestor(t, 1);
        let local = reach_set_oracle(&g, &trie, t, c2).unwrap();
        assert_eq!(local.members, vec![v(&g.uni, "2.1"), t]);
        assert!(local.contains(v(&g.uni, "2.1")));
        assert!(!local.contains(v(&g.uni, "1.1")));
        assert!(reach_set_oracle(&g, &trie, v(&g.uni, "1.1"), c2).is_err());
    }

    #[test]
    fn fresh_hypercube_sampler_always_accepts_first_midpoint() {
        let g = SemiHypercube::build_hypercube_style(2, 3).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let tau = Tau::new(1, 54).unwrap();
        let mut rng = SplitRng::seeded(42);
        let d = g.uni.d as usize;
        for round in 0..10_000u32 {
            let s = trie.sample_uniform(ROOT, &mut rng).unwrap();
            let t = trie.sample_uniform(ROOT, &mut rng).unwrap();
            let out =
                sample_noncritical_path(&g, &trie, tau, Mode::Experimental, s, t, &mut rng)
                    .unwrap();
            assert_eq!(out.attempts, 1, "round {round}");
            assert!(out.path.edge_count() <= 2 * d);
            assert_eq!((out.path.start(), out.path.end()), (s, t));
            out.path.check_valid(&g, &trie).unwrap();
        }
    }

    #[test]
    fn strict_sampler_rejects_undersized_parameters() {
        let g = SemiHypercube::build_hypercube_style(2, 3).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let s = v(&g.uni, "1.1.1");
        let t = v(&g.uni, "2.2.2");
        let mut rng = SplitRng::seeded(0);
        let err = sample_noncritical_path(
            &g,
            &trie,
            Tau::new(1, 81).unwrap(),
            Mode::Strict,
            s,
            t,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        let err = sample_noncritical_path(
            &g,
            &trie,
            Tau::new(1, 2).unwrap(),
            Mode::Strict,
            s,
            t,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn escape_is_trivial_without_critical_clusters() {
        let g = SemiHypercube::build_random_shc(3, 2, 9).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let tau = Tau::new(1, 4).unwrap();
        let mut rng = SplitRng::seeded(1);
        for s in g.uni.vertices() {
            let (p, hops) = escape_trace(&g, &trie, tau, s, &mut rng).unwrap();
            assert_eq!(p, Path::single(s));
            assert!(hops.is_empty());
        }
    }

    #[test]
    fn escape_leaves_a_critical_cluster() {
        let g = SemiHypercube::build_hypercube_style(3, 2).unwrap();
        let mut trie = VertexTrie::new_full(&g.uni);
        let tau = Tau::new(1, 4).unwrap();
        remove(&mut trie, &["1.1"]);
        let mut rng = SplitRng::seeded(3);
        for l in ["1.2", "1.3"] {
            let s = v(&g.uni, l);
            let (p, hops) = escape_trace(&g, &trie, tau, s, &mut rng).unwrap();
            assert_eq!(p.start(), s);
            p.check_valid(&g, &trie).unwrap();
            let end = p.end();
            assert_eq!(isolation(&trie, tau, end).unwrap(), 0);
            assert_eq!(home_cluster(&trie, tau, end).unwrap(), ROOT);
            assert_eq!(hops, vec![1]);
            let d = g.uni.d as u64;
            assert!(hops.len() as u64 <= d * (d + 1) / 2);
        }
    }

    #[test]
    fn escape_ignores_the_degenerate_chain_above_the_representative() {
        // Cluster 2 emptied: the root is degenerate and critical, its
        // representative is cluster 1. Removing 1.1.1 then makes 1.1
        // critical; escaping 1.1.2 must cross into 1.2 and stop.
        let g = SemiHypercube::build_hypercube_style(2, 3).unwrap();
        let mut trie = VertexTrie::new_full(&g.uni);
        let tau = Tau::new(1, 4).unwrap();
        remove(&mut trie, &["2.1.1", "2.1.2", "2.2.1", "2.2.2", "1.1.1"]);
        let rep = representative(&trie, ROOT).unwrap();
        assert_eq!(rep, g.uni.ancestor(v(&g.uni, "1.1.2"), 1));
        assert!(is_critical(&trie, tau, ROOT));

        let s = v(&g.uni, "1.1.2");
        let mut rng = SplitRng::seeded(8);
        let (p, hops) = escape_trace(&g, &trie, tau, s, &mut rng).unwrap();
        let expect: Vec<Vertex> = ["1.1.2", "1.2.2"].iter().map(|l| v(&g.uni, l)).collect();
        assert_eq!(p.vertices, expect);
        assert_eq!(hops.len(), 1);
        // A vertex already clear of critical clusters below the
        // representative escapes trivially despite the critical root.
        let t = v(&g.uni, "1.2.1");
        let (q, _) = escape_trace(&g, &trie, tau, t, &mut rng).unwrap();
        assert_eq!(q, Path::single(t));
        assert!(crit_count(&trie, tau, t).unwrap() > 0);
    }

    #[test]
    fn escape_hop_isolations_strictly_decrease() {
        // (6,3) at tau=1/5 with two nested critical clusters: "1.1" keeps a
        // single vertex (1 < 24/5) and "1" drops to 26 (< 144/5), while both
        // still clear the 9/10 outward-degree bar, so the instance is valid.
        let g = SemiHypercube::build_hypercube_style(6, 3).unwrap();
        let mut trie = VertexTrie::new_full(&g.uni);
        let tau = Tau::new(1, 5).unwrap();
        for b in 1..=5 {
            trie.remove(v(&g.uni, &format!("1.1.{b}"))).unwrap();
        }
        for j in 2..=6 {
            trie.remove(v(&g.uni, &format!("1.{j}.1"))).unwrap();
        }
        assert!(crate::validate::is_valid(&g, &trie, tau));
        let c11 = g.uni.ancestor(v(&g.uni, "1.1.6"), 2);
        let c1 = g.uni.ancestor(v(&g.uni, "1.1.6"), 1);
        assert!(is_critical(&trie, tau, c11) && is_critical(&trie, tau, c1));
        assert!(!is_critical(&trie, tau, ROOT));

        let s = v(&g.uni, "1.1.6");
        assert_eq!(isolation(&trie, tau, s).unwrap(), 3);
        let mut rng = SplitRng::seeded(13);
        let (p, hops) = escape_trace(&g, &trie, tau, s, &mut rng).unwrap();
        p.check_valid(&g, &trie).unwrap();
        assert_eq!(hops, vec![3, 2]);
        let d = g.uni.d as u64;
        assert!(hops.len() as u64 <= d * (d + 1) / 2);
        assert_eq!(isolation(&trie, tau, p.end()).unwrap(), 0);
    }

    #[test]
    fn sample_path_on_fresh_graph_behaves_like_midpoint_sampler() {
        let g = SemiHypercube::build_random_shc(3, 2, 2).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let tau = Tau::new(1, 54).unwrap();
        let s = v(&g.uni, "1.2");
        let t = v(&g.uni, "3.1");
        let a = sample_path(&g, &trie, tau, Mode::Strict, s, t, &mut SplitRng::seeded(77))
            .unwrap();
        let b = sample_path(&g, &trie, tau, Mode::Strict, s, t, &mut SplitRng::seeded(77))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!((a.path.start(), a.path.end()), (s, t));
        assert!(a.path.edge_count() <= 2 * g.uni.d as usize);
        a.path.check_valid(&g, &trie).unwrap();

        let closed =
            sample_path(&g, &trie, tau, Mode::Strict, s, s, &mut SplitRng::seeded(1)).unwrap();
        assert_eq!((closed.path.start(), closed.path.end()), (s, s));
    }

    #[test]
    fn sample_path_fuzz_on_damaged_instance() {
        let g = SemiHypercube::build_hypercube_style(3, 2).unwrap();
        let mut trie = VertexTrie::new_full(&g.uni);
        let tau = Tau::new(1, 4).unwrap();
        remove(&mut trie, &["1.1"]);
        let mut rng = SplitRng::seeded(123);
        let d = g.uni.d as usize;
        let cap = 2 * d + 2 * (d * (d + 1) / 2) * (d + 1);
        for _ in 0..500 {
            let s = trie.sample_uniform(ROOT, &mut rng).unwrap();
            let t = trie.sample_uniform(ROOT, &mut rng).unwrap();
            let out = sample_path(&g, &trie, tau, Mode::Experimental, s, t, &mut rng).unwrap();
            assert_eq!((out.path.start(), out.path.end()), (s, t));
            out.path.check_valid(&g, &trie).unwrap();
            assert!(out.path.edge_count() <= cap);
        }
    }

    #[test]
    fn congestion_counts_are_exact() {
        let empty = measure_congestion([]);
        assert_eq!(empty.max(), 0);
        assert_eq!(empty.total(), 0);

        let g = SemiHypercube::build_hypercube_style(2, 2).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let p = greedy_path(&g, &trie, v(&g.uni, "1.1"), v(&g.uni, "2.2"))
            .unwrap()
            .unwrap();
        let doubled = measure_congestion([&p, &p]);
        assert_eq!(doubled.counts.len(), p.edge_count());
        assert!(doubled.counts.values().all(|&c| c == 2));
        assert_eq!(doubled.total(), 2 * p.edge_count() as u64);
        assert_eq!(doubled.mean(), 2.0);
    }

    #[test]
    fn congestion_total_matches_path_lengths_and_recalibrates() {
        let g = SemiHypercube::build_hypercube_style(2, 3).unwrap();
        let trie = VertexTrie::new_full(&g.uni);
        let tau = Tau::new(1, 81).unwrap();
        let run = |seed: u64| {
            let mut rng = SplitRng::seeded(seed);
            let mut paths = Vec::new();
            for s in g.uni.vertices() {
                for t in g.uni.vertices() {
                    let out = sample_noncritical_path(
                        &g,
                        &trie,
                        tau,
                        Mode::Experimental,
                        s,
                        t,
                        &mut rng,
                    )
                    .unwrap();
                    paths.push(out.path);
                }
            }
            let lengths: u64 = paths.iter().map(|p| p.edge_count() as u64).sum();
            let map = measure_congestion(paths.iter());
            assert_eq!(map.total(), lengths);
            map.max()
        };
        // Unit demand routed twice with unrelated seeds lands within 4x.
        let (a, b) = (run(1000), run(2000));
        assert!(a <= 4 * b && b <= 4 * a, "max congestion {a} vs {b}");
    }
}
