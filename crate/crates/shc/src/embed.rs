//! Pruning a host graph while keeping it routable through an embedded
//! semi-hypercube. Every abstract edge is realized as a host path, and two
//! coverage maps translate a host edge deletion into abstract vertex
//! deletions for the self-pruning engine, then translate the fallout back
//! into trimmed host vertices. An optional inner dynamic router carries
//! explicit demand, projected endpoint by endpoint onto representatives at
//! the start of each vertex's covering path.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use crate::dynroute::{DemandPair, DynRouter};
use crate::error::{Error, Result};
use crate::graph::SemiHypercube;
use crate::label::Vertex;
use crate::prune::Pruner;
use crate::rng::SplitRng;
use crate::route::{self, Path};
use crate::validate::{Mode, Tau};

/// Index into a host graph's vertex table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct HostVertex(pub u32);

/// An abstract edge, keyed by endpoint codes with the smaller one first.
pub type CubeEdge = (Vertex, Vertex);

pub fn cube_key(u: Vertex, w: Vertex) -> CubeEdge {
    (u.min(w), u.max(w))
}

pub fn host_key(a: HostVertex, b: HostVertex) -> (HostVertex, HostVertex) {
    (a.min(b), a.max(b))
}

/// Simple undirected graph with unit-length edges and named vertices.
#[derive(Clone, Debug, Default)]
pub struct HostGraph {
    names: Vec<String>,
    index: BTreeMap<String, u32>,
    adj: Vec<BTreeSet<u32>>,
}

impl HostGraph {
    pub fn new() -> HostGraph {
        HostGraph::default()
    }

    /// Returns the vertex wearing `name`, creating it on first sight.
    pub fn intern(&mut self, name: &str) -> HostVertex {
        if let Some(&i) = self.index.get(name) {
            return HostVertex(i);
        }
        let i = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.adj.push(BTreeSet::new());
        HostVertex(i)
    }

    pub fn lookup(&self, name: &str) -> Option<HostVertex> {
        self.index.get(name).map(|&i| HostVertex(i))
    }

    pub fn name(&self, v: HostVertex) -> &str {
        &self.names[v.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn vertices(&self) -> impl Iterator<Item = HostVertex> {
        (0..self.names.len() as u32).map(HostVertex)
    }

    pub fn add_edge(&mut self, a: HostVertex, b: HostVertex) -> Result<()> {
        if a == b {
            return Err(Error::InvalidGraph(format!("self-loop at {}", self.name(a))));
        }
        if self.has_edge(a, b) {
            return Err(Error::InvalidGraph(format!(
                "duplicate edge {} {}",
                self.name(a),
                self.name(b)
            )));
        }
        self.adj[a.0 as usize].insert(b.0);
        self.adj[b.0 as usize].insert(a.0);
        Ok(())
    }

    pub fn has_edge(&self, a: HostVertex, b: HostVertex) -> bool {
        self.adj
            .get(a.0 as usize)
            .is_some_and(|set| set.contains(&b.0))
    }

    pub fn neighbors(&self, v: HostVertex) -> impl Iterator<Item = HostVertex> + '_ {
        self.adj[v.0 as usize].iter().map(|&i| HostVertex(i))
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|set| set.len()).sum::<usize>() / 2
    }

    /// Each edge once, smaller index first, ascending.
    pub fn edges(&self) -> impl Iterator<Item = (HostVertex, HostVertex)> + '_ {
        self.adj.iter().enumerate().flat_map(|(a, set)| {
            set.iter()
                .filter(move |&&b| a < b as usize)
                .map(move |&b| (HostVertex(a as u32), HostVertex(b)))
        })
    }

    /// Text format: header `host`, then one `u v` line per edge.
    pub fn save<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "host")?;
        for (a, b) in self.edges() {
            writeln!(out, "{} {}", self.name(a), self.name(b))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<HostGraph> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty host file".into()))??;
        if header.trim() != "host" {
            return Err(Error::Parse(format!(
                "expected `host` header, got {header:?}"
            )));
        }
        let mut g = HostGraph::new();
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
            let (a, b) = (g.intern(a), g.intern(b));
            g.add_edge(a, b)?;
        }
        Ok(g)
    }
}

/// A walk through the host graph; mirrors the abstract-path helpers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostPath {
    pub vertices: Vec<HostVertex>,
}

impl HostPath {
    pub fn single(v: HostVertex) -> HostPath {
        HostPath { vertices: vec![v] }
    }

    pub fn start(&self) -> HostVertex {
        self.vertices[0]
    }

    pub fn end(&self) -> HostVertex {
        *self.vertices.last().expect("path is never empty")
    }

    pub fn edge_count(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn edges(&self) -> impl Iterator<Item = (HostVertex, HostVertex)> + '_ {
        self.vertices.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn reversed(&self) -> HostPath {
        let mut vertices = self.vertices.clone();
        vertices.reverse();
        HostPath { vertices }
    }

    /// Joins a path starting where this one ends; the junction vertex is kept once.
    pub fn concat(mut self, other: HostPath) -> HostPath {
        assert_eq!(self.end(), other.start(), "paths do not share a junction");
        self.vertices.extend_from_slice(&other.vertices[1..]);
        self
    }

    /// Every consecutive pair must be a host edge.
    pub fn check_valid(&self, host: &HostGraph) -> Result<()> {
        for (a, b) in self.edges() {
            if !host.has_edge(a, b) {
                return Err(Error::Invariant(format!(
                    "path step {} -> {} is not a host edge",
                    host.name(a),
                    host.name(b)
                )));
            }
        }
        Ok(())
    }
}

/// Realization of every abstract edge as a host path with the same endpoints.
/// The abstract vertex with label L lives at the host vertex named L. The
/// congestion `kappa` (paths per host edge) and length `h` (edges per path)
/// are measured from the paths, never taken on trust.
#[derive(Clone, Debug)]
pub struct Embedding {
    /// Host path per abstract edge, running from the smaller-coded endpoint.
    pub paths: BTreeMap<CubeEdge, Vec<HostVertex>>,
    /// Host position of each abstract vertex, indexed by code.
    pub image: Vec<HostVertex>,
    pub preimage: BTreeMap<HostVertex, Vertex>,
    pub kappa: u64,
    pub h: u64,
}

impl Embedding {
    pub fn new(
        host: &HostGraph,
        g: &SemiHypercube,
        paths: BTreeMap<CubeEdge, Vec<HostVertex>>,
    ) -> Result<Embedding> {
        let uni = &g.uni;
        let mut missing: BTreeSet<CubeEdge> = g.edges().collect();
        for &(u, w) in paths.keys() {
            if !missing.remove(&(u, w)) {
                return Err(Error::InvalidEmbedding(format!(
                    "path given for {} {}, which is not an edge",
                    uni.label(u),
                    uni.label(w)
                )));
            }
        }
        if let Some(&(u, w)) = missing.first() {
            return Err(Error::InvalidEmbedding(format!(
                "edge {} {} has no path",
                uni.label(u),
                uni.label(w)
            )));
        }
        let mut image = Vec::with_capacity(uni.n() as usize);
        let mut preimage = BTreeMap::new();
        for v in uni.vertices() {
            let x = host.lookup(&uni.label(v)).ok_or_else(|| {
                Error::InvalidEmbedding(format!("no host vertex is named {}", uni.label(v)))
            })?;
            image.push(x);
            preimage.insert(x, v);
        }
        let mut use_count: BTreeMap<(HostVertex, HostVertex), u64> = BTreeMap::new();
        let mut covered: BTreeSet<HostVertex> = BTreeSet::new();
        let mut h = 0u64;
        for (&(u, w), p) in &paths {
            let tag = format!("path of {} {}", uni.label(u), uni.label(w));
            if p.len() < 2 {
                return Err(Error::InvalidEmbedding(format!(
                    "{tag} has fewer than two vertices"
                )));
            }
            let mut seen = BTreeSet::new();
            for &x in p {
                if x.0 as usize >= host.len() {
                    return Err(Error::InvalidEmbedding(format!(
                        "{tag} names a vertex outside the host"
                    )));
                }
                if !seen.insert(x) {
                    return Err(Error::InvalidEmbedding(format!(
                        "{tag} revisits {}",
                        host.name(x)
                    )));
                }
                covered.insert(x);
            }
            if p[0] != image[u.0 as usize] || *p.last().unwrap() != image[w.0 as usize] {
                return Err(Error::InvalidEmbedding(format!(
                    "{tag} does not run between its endpoints"
                )));
            }
            for pair in p.windows(2) {
                if !host.has_edge(pair[0], pair[1]) {
                    return Err(Error::InvalidEmbedding(format!(
                        "{tag} steps over the missing host edge {} {}",
                        host.name(pair[0]),
                        host.name(pair[1])
                    )));
                }
                *use_count.entry(host_key(pair[0], pair[1])).or_insert(0) += 1;
            }
            h = h.max((p.len() - 1) as u64);
        }
        for x in host.vertices() {
            if !covered.contains(&x) {
                return Err(Error::InvalidEmbedding(format!(
                    "host vertex {} lies on no path",
                    host.name(x)
                )));
            }
        }
        let kappa = use_count.values().copied().max().unwrap_or(0);
        Ok(Embedding { paths, image, preimage, kappa, h })
    }

    pub fn check(&self, host: &HostGraph, g: &SemiHypercube) -> Result<()> {
        let rebuilt = Embedding::new(host, g, self.paths.clone())?;
        if rebuilt.kappa != self.kappa || rebuilt.h != self.h {
            return Err(Error::InvalidEmbedding(
                "stored congestion or length disagrees with the paths".into(),
            ));
        }
        Ok(())
    }

    /// The path of edge (a, b), oriented to start at a's host position.
    pub fn host_path(&self, a: Vertex, b: Vertex) -> Result<Vec<HostVertex>> {
        let p = self.paths.get(&cube_key(a, b)).ok_or_else(|| {
            Error::InvalidEmbedding(format!("no path for edge {} {}", a.0, b.0))
        })?;
        if a < b {
            Ok(p.clone())
        } else {
            Ok(p.iter().rev().copied().collect())
        }
    }

    /// Text format: header `embed k d`, then per edge `u v : v0 v1 ... vm`.
    pub fn save<W: Write>(
        &self,
        g: &SemiHypercube,
        host: &HostGraph,
        out: &mut W,
    ) -> Result<()> {
        writeln!(out, "embed {} {}", g.uni.k, g.uni.d)?;
        for (&(u, w), p) in &self.paths {
            let stops: Vec<&str> = p.iter().map(|&x| host.name(x)).collect();
            writeln!(
                out,
                "{} {} : {}",
                g.uni.label(u),
                g.uni.label(w),
                stops.join(" ")
            )?;
        }
        Ok(())
    }
}

/// Reads an embedding file and reconstructs both the abstract graph it
/// defines (one edge per line) and the paths into `host`.
pub fn load_embedding<R: BufRead>(
    host: &HostGraph,
    input: R,
) -> Result<(SemiHypercube, Embedding)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty embedding file".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (k, d) = match parts.as_slice() {
        ["embed", k, d] => (
            k.parse::<u32>()
                .map_err(|_| Error::Parse(format!("bad k in header {header:?}")))?,
            d.parse::<u32>()
                .map_err(|_| Error::Parse(format!("bad d in header {header:?}")))?,
        ),
        _ => {
            return Err(Error::Parse(format!(
                "expected `embed k d` header, got {header:?}"
            )))
        }
    };
    let mut edge_lines = String::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut raw: Vec<(String, String, Vec<String>)> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (left, right) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("expected `u v : path`, got {line:?}")))?;
        let ends: Vec<&str> = left.split_whitespace().collect();
        let [u, w] = ends.as_slice() else {
            return Err(Error::Parse(format!("expected two endpoints, got {left:?}")));
        };
        let stops: Vec<String> = right.split_whitespace().map(str::to_string).collect();
        if stops.is_empty() {
            return Err(Error::Parse(format!("empty path in {line:?}")));
        }
        let norm = (u.min(w).to_string(), u.max(w).to_string());
        if !seen.insert(norm) {
            return Err(Error::Parse(format!("edge {u} {w} appears twice")));
        }
        edge_lines.push_str(&format!("{u} {w}\n"));
        raw.push((u.to_string(), w.to_string(), stops));
    }
    let g = SemiHypercube::load(format!("shc {k} {d}\n{edge_lines}").as_bytes())?;
    let mut paths = BTreeMap::new();
    for (u, w, stops) in raw {
        let u = g.uni.parse_label(&u)?;
        let w = g.uni.parse_label(&w)?;
        let mut p = Vec::with_capacity(stops.len());
        for s in &stops {
            p.push(
                host.lookup(s)
                    .ok_or_else(|| Error::Parse(format!("unknown host vertex {s:?}")))?,
            );
        }
        if w < u {
            p.reverse();
        }
        if paths.insert(cube_key(u, w), p).is_some() {
            return Err(Error::Parse(format!(
                "edge {} {} appears twice",
                g.uni.label(u),
                g.uni.label(w)
            )));
        }
    }
    let emb = Embedding::new(host, &g, paths)?;
    Ok((g, emb))
}

/// Host that realizes every abstract edge as a path with `extra(u, w)` fresh
/// interior vertices; zero everywhere reproduces the graph itself. Interior
/// hosts are named after the edge they subdivide.
pub fn subdivide(
    g: &SemiHypercube,
    mut extra: impl FnMut(Vertex, Vertex) -> u32,
) -> Result<(HostGraph, Embedding)> {
    let mut host = HostGraph::new();
    for v in g.uni.vertices() {
        host.intern(&g.uni.label(v));
    }
    let mut paths = BTreeMap::new();
    for (u, w) in g.edges() {
        let m = extra(u, w);
        let mut p = vec![HostVertex(u.0)];
        for i in 1..=m {
            p.push(host.intern(&format!(
                "{}~{}~{}",
                g.uni.label(u),
                g.uni.label(w),
                i
            )));
        }
        p.push(HostVertex(w.0));
        for pair in p.windows(2) {
            host.add_edge(pair[0], pair[1])?;
        }
        paths.insert((u, w), p);
    }
    let emb = Embedding::new(&host, g, paths)?;
    Ok((host, emb))
}

/// Host equal to the abstract graph; every path is the edge itself.
pub fn identity(g: &SemiHypercube) -> Result<(HostGraph, Embedding)> {
    subdivide(g, |_, _| 0)
}

/// One unit of demand between host vertices, tracked by a caller-chosen id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct HostDemand {
    pub a: HostVertex,
    pub b: HostVertex,
    pub id: u64,
}

/// Largest endpoint count at any single host vertex; a == b counts twice.
pub fn host_demand_load<'a>(pairs: impl IntoIterator<Item = &'a HostDemand>) -> u64 {
    let mut per: BTreeMap<HostVertex, u64> = BTreeMap::new();
    for p in pairs {
        *per.entry(p.a).or_insert(0) += 1;
        *per.entry(p.b).or_insert(0) += 1;
    }
    per.values().copied().max().unwrap_or(0)
}

/// What one prune step did: the abstract vertices whose edges used the
/// deleted host edge, everything the inner engine removed, the abstract
/// edges that left with them, and the host vertices trimmed because no
/// surviving path covers them.
#[derive(Clone, Debug, Default)]
pub struct PruneReport {
    pub affected: BTreeSet<Vertex>,
    pub removed: BTreeSet<Vertex>,
    pub dropped: BTreeSet<CubeEdge>,
    pub trimmed: Vec<HostVertex>,
}

struct RouterPart {
    router: DynRouter,
    load_bound: u64,
    demand: BTreeMap<u64, (HostVertex, HostVertex)>,
    pend_v: BTreeSet<Vertex>,
    pend_e: BTreeSet<CubeEdge>,
    pend_add: BTreeSet<(Vertex, Vertex, u64)>,
    pend_rem: BTreeSet<(Vertex, Vertex, u64)>,
}

/// Remaining host graph plus the machinery keeping it covered: the coverage
/// maps, the chosen covering edge per host vertex, the self-pruning engine
/// on the abstract graph, and optionally a dynamic router carrying demand
/// projected onto covering-path start vertices.
pub struct EmbedPruneState {
    pub host: HostGraph,
    pub g: SemiHypercube,
    pub emb: Embedding,
    pub tau: Tau,
    pub mode: Mode,
    live: BTreeSet<HostVertex>,
    dead_edges: BTreeSet<(HostVertex, HostVertex)>,
    /// Abstract edges whose endpoints both survive in the inner engine.
    surviving: BTreeSet<CubeEdge>,
    /// Per host vertex, the surviving abstract edges whose path covers it.
    covers: BTreeMap<HostVertex, BTreeSet<CubeEdge>>,
    /// Per host edge, the surviving abstract edges whose path rides it.
    users: BTreeMap<(HostVertex, HostVertex), BTreeSet<CubeEdge>>,
    /// Chosen covering edge per host vertex. Entries of trimmed vertices go
    /// stale on purpose so later projections replay the same endpoints.
    conn: BTreeMap<HostVertex, CubeEdge>,
    pub pruner: Pruner,
    router: Option<RouterPart>,
    last: PruneReport,
}

impl EmbedPruneState {
    /// Tolerance 1/(4350 d) and the derived trim budget.
    pub fn new(
        host: HostGraph,
        g: SemiHypercube,
        emb: Embedding,
        mode: Mode,
    ) -> Result<EmbedPruneState> {
        let tau = Tau::new(1, 4350 * g.uni.d as u64)?;
        let pruner = Pruner::new(&g, tau, mode)?;
        EmbedPruneState::assemble(host, g, emb, tau, pruner, mode)
    }

    /// Explicit tolerance and trim budget, no parameter gates. For studies.
    pub fn with_trim_rate(
        host: HostGraph,
        g: SemiHypercube,
        emb: Embedding,
        tau: Tau,
        trim_rate: u64,
        mode: Mode,
    ) -> Result<EmbedPruneState> {
        let pruner = Pruner::with_trim_rate(&g, tau, trim_rate);
        EmbedPruneState::assemble(host, g, emb, tau, pruner, mode)
    }

    pub fn with_demand(
        host: HostGraph,
        g: SemiHypercube,
        emb: Embedding,
        demand: &[HostDemand],
        load_bound: u64,
        mode: Mode,
    ) -> Result<EmbedPruneState> {
        let mut state = EmbedPruneState::new(host, g, emb, mode)?;
        state.attach_demand(demand, load_bound)?;
        Ok(state)
    }

    fn assemble(
        host: HostGraph,
        g: SemiHypercube,
        emb: Embedding,
        tau: Tau,
        pruner: Pruner,
        mode: Mode,
    ) -> Result<EmbedPruneState> {
        emb.check(&host, &g)?;
        let surviving: BTreeSet<CubeEdge> = g.edges().collect();
        let mut covers: BTreeMap<HostVertex, BTreeSet<CubeEdge>> = BTreeMap::new();
        let mut users: BTreeMap<(HostVertex, HostVertex), BTreeSet<CubeEdge>> = BTreeMap::new();
        for (&e, p) in &emb.paths {
            for &x in p {
                covers.entry(x).or_default().insert(e);
            }
            for pair in p.windows(2) {
                users.entry(host_key(pair[0], pair[1])).or_default().insert(e);
            }
        }
        let conn: BTreeMap<HostVertex, CubeEdge> = covers
            .iter()
            .map(|(&x, set)| (x, *set.first().expect("coverage is never empty")))
            .collect();
        Ok(EmbedPruneState {
            live: host.vertices().collect(),
            host,
            g,
            emb,
            tau,
            mode,
            dead_edges: BTreeSet::new(),
            surviving,
            covers,
            users,
            conn,
            pruner,
            router: None,
            last: PruneReport::default(),
        })
    }

    /// Starts carrying `demand` through an inner dynamic router sized for
    /// the worst projected concentration, `load_bound * k d (h + 1)`.
    pub fn attach_demand(&mut self, demand: &[HostDemand], load_bound: u64) -> Result<()> {
        if self.router.is_some() {
            return Err(Error::Precondition("demand is already attached".into()));
        }
        let mut map: BTreeMap<u64, (HostVertex, HostVertex)> = BTreeMap::new();
        for p in demand {
            for x in [p.a, p.b] {
                if !self.live.contains(&x) {
                    return Err(Error::NotPresent(format!(
                        "demand endpoint {} was pruned",
                        self.host.name(x)
                    )));
                }
            }
            if map.insert(p.id, (p.a, p.b)).is_some() {
                return Err(Error::Precondition(format!("duplicate demand id {}", p.id)));
            }
        }
        if self.mode == Mode::Strict {
            let load = host_demand_load(demand);
            if load > load_bound {
                return Err(Error::Capacity(format!(
                    "demand load {load} exceeds bound {load_bound}"
                )));
            }
        }
        let uni = &self.g.uni;
        let inner_bound = load_bound
            .checked_mul(uni.k as u64 * uni.d as u64 * (self.emb.h + 1))
            .ok_or_else(|| Error::Capacity("projected load bound overflows".into()))?;
        let mut projected = Vec::with_capacity(map.len());
        for (&id, &(u, v)) in &map {
            projected.push(DemandPair {
                a: self.rep_internal(u)?,
                b: self.rep_internal(v)?,
                id,
            });
        }
        let router = DynRouter::new(
            &self.g,
            &self.pruner.trie,
            &projected,
            self.tau,
            inner_bound,
            self.mode,
        )?;
        self.router = Some(RouterPart {
            router,
            load_bound,
            demand: map,
            pend_v: BTreeSet::new(),
            pend_e: BTreeSet::new(),
            pend_add: BTreeSet::new(),
            pend_rem: BTreeSet::new(),
        });
        Ok(())
    }

    pub fn is_live(&self, v: HostVertex) -> bool {
        self.live.contains(&v)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn live_vertices(&self) -> impl Iterator<Item = HostVertex> + '_ {
        self.live.iter().copied()
    }

    pub fn is_live_host_edge(&self, a: HostVertex, b: HostVertex) -> bool {
        self.host.has_edge(a, b)
            && !self.dead_edges.contains(&host_key(a, b))
            && self.live.contains(&a)
            && self.live.contains(&b)
    }

    pub fn live_host_edges(&self) -> Vec<(HostVertex, HostVertex)> {
        self.host
            .edges()
            .filter(|&(a, b)| self.is_live_host_edge(a, b))
            .collect()
    }

    pub fn surviving_edges(&self) -> &BTreeSet<CubeEdge> {
        &self.surviving
    }

    pub fn covering_of(&self, v: HostVertex) -> Option<&BTreeSet<CubeEdge>> {
        self.covers.get(&v)
    }

    pub fn users_of(&self, a: HostVertex, b: HostVertex) -> Option<&BTreeSet<CubeEdge>> {
        self.users.get(&host_key(a, b))
    }

    pub fn conn_of(&self, v: HostVertex) -> Option<CubeEdge> {
        self.conn.get(&v).copied()
    }

    pub fn last_report(&self) -> &PruneReport {
        &self.last
    }

    pub fn router(&self) -> Option<&DynRouter> {
        self.router.as_ref().map(|rp| &rp.router)
    }

    pub fn demand(&self) -> Vec<HostDemand> {
        match &self.router {
            Some(rp) => rp
                .demand
                .iter()
                .map(|(&id, &(a, b))| HostDemand { a, b, id })
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn pending_empty(&self) -> bool {
        match &self.router {
            Some(rp) => {
                rp.pend_v.is_empty()
                    && rp.pend_e.is_empty()
                    && rp.pend_add.is_empty()
                    && rp.pend_rem.is_empty()
            }
            None => true,
        }
    }

    fn ensure_live(&self, v: HostVertex) -> Result<()> {
        if !self.live.contains(&v) {
            return Err(Error::NotPresent(self.host.name(v).to_string()));
        }
        Ok(())
    }

    /// Projected endpoint of `v`: its own preimage while that survives, else
    /// the start vertex of its covering path. Reads stale entries of trimmed
    /// vertices so queued demand moves stay consistent.
    fn rep_internal(&self, v: HostVertex) -> Result<Vertex> {
        if let Some(&s) = self.emb.preimage.get(&v) {
            if self.pruner.trie.contains(s) {
                return Ok(s);
            }
        }
        let e = self.conn.get(&v).ok_or_else(|| {
            Error::Invariant(format!("{} has no covering edge", self.host.name(v)))
        })?;
        Ok(e.0)
    }

    pub fn rep_of(&self, v: HostVertex) -> Result<Vertex> {
        self.ensure_live(v)?;
        self.rep_internal(v)
    }

    /// Path from `v` to the host position of its projected endpoint: empty
    /// at a surviving preimage, otherwise the covering path walked backwards
    /// from `v` to its start.
    pub fn connection_of(&self, v: HostVertex) -> Result<HostPath> {
        self.ensure_live(v)?;
        if let Some(&s) = self.emb.preimage.get(&v) {
            if self.pruner.trie.contains(s) {
                return Ok(HostPath::single(v));
            }
        }
        let e = self.conn.get(&v).ok_or_else(|| {
            Error::Invariant(format!("{} has no covering edge", self.host.name(v)))
        })?;
        let p = &self.emb.paths[e];
        let idx = p.iter().position(|&x| x == v).ok_or_else(|| {
            Error::Invariant(format!(
                "covering edge of {} does not pass through it",
                self.host.name(v)
            ))
        })?;
        Ok(HostPath {
            vertices: p[..=idx].iter().rev().copied().collect(),
        })
    }

    /// Deletes one host edge. Every abstract edge riding it loses both
    /// endpoints to the inner engine (skipping ones earlier fallout already
    /// took), the edges incident to the removals leave the surviving set,
    /// and host vertices left uncovered are trimmed. Returns the trimmed
    /// vertices; the full accounting lands in `last_report`.
    pub fn prune_step(&mut self, a: HostVertex, b: HostVertex) -> Result<Vec<HostVertex>> {
        if !self.is_live_host_edge(a, b) {
            return Err(Error::NotPresent(format!(
                "host edge {} {} is not in the remaining graph",
                self.host.name(a),
                self.host.name(b)
            )));
        }
        let key = host_key(a, b);
        // Projected endpoints before any mutation, to tell moved demand apart.
        let mut old_rep: BTreeMap<HostVertex, Vertex> = BTreeMap::new();
        if let Some(rp) = &self.router {
            for &(u, v) in rp.demand.values() {
                for x in [u, v] {
                    let r = self.rep_internal(x)?;
                    old_rep.insert(x, r);
                }
            }
        }
        self.dead_edges.insert(key);
        let touched = self.users.get(&key).cloned().unwrap_or_default();
        let mut affected = BTreeSet::new();
        for &(u, w) in &touched {
            affected.insert(u);
            affected.insert(w);
        }
        let mut removed = BTreeSet::new();
        for &s in &affected {
            if !self.pruner.trie.contains(s) {
                continue;
            }
            removed.insert(s);
            for w in self.pruner.delete(s)? {
                removed.insert(w);
            }
        }
        let mut dropped = BTreeSet::new();
        for &s in &removed {
            for e in incident_cube_edges(&self.g, s) {
                if self.surviving.contains(&e) {
                    dropped.insert(e);
                }
            }
        }
        for e in &dropped {
            self.surviving.remove(e);
        }
        let mut touched_hosts = BTreeSet::new();
        for e in &dropped {
            let p = &self.emb.paths[e];
            for pair in p.windows(2) {
                let hk = host_key(pair[0], pair[1]);
                if let Some(set) = self.users.get_mut(&hk) {
                    set.remove(e);
                    if set.is_empty() {
                        self.users.remove(&hk);
                    }
                }
            }
            for &x in p {
                if let Some(set) = self.covers.get_mut(&x) {
                    set.remove(e);
                }
                touched_hosts.insert(x);
            }
        }
        let mut trimmed = Vec::new();
        for &x in &touched_hosts {
            if self.covers.get(&x).is_some_and(|set| set.is_empty()) {
                self.covers.remove(&x);
                self.live.remove(&x);
                trimmed.push(x);
            }
        }
        for &x in &touched_hosts {
            if !self.live.contains(&x) {
                continue;
            }
            let set = &self.covers[&x];
            let stale = self.conn.get(&x).is_none_or(|e| !set.contains(e));
            if stale {
                self.conn.insert(x, *set.first().expect("survivor is covered"));
            }
        }
        // Queue a remove-and-readd for each pair whose projection moved. A
        // move whose removal matches a queued add never reached the inner
        // router, so the two cancel instead.
        let mut moves = Vec::new();
        if let Some(rp) = &self.router {
            for (&id, &(u, v)) in &rp.demand {
                let old = (old_rep[&u], old_rep[&v]);
                let new = (self.rep_internal(u)?, self.rep_internal(v)?);
                if old != new {
                    moves.push(((old.0, old.1, id), (new.0, new.1, id)));
                }
            }
        }
        if let Some(rp) = &mut self.router {
            for (rem, add) in moves {
                if !rp.pend_add.remove(&rem) {
                    rp.pend_rem.insert(rem);
                }
                rp.pend_add.insert(add);
            }
            rp.pend_v.extend(removed.iter().copied());
            rp.pend_e.extend(dropped.iter().copied());
        }
        self.last = PruneReport {
            affected,
            removed,
            dropped,
            trimmed: trimmed.clone(),
        };
        Ok(trimmed)
    }

    /// Applies the demand change and flushes every queued prune effect into
    /// one inner update. Removals of pairs that never reached the router
    /// cancel against their queued additions. Returns the ids whose paths
    /// changed.
    pub fn reroute_step(
        &mut self,
        d_plus: &[HostDemand],
        d_minus: &[HostDemand],
    ) -> Result<BTreeSet<u64>> {
        if self.router.is_none() {
            return Err(Error::Precondition("no demand is attached".into()));
        }
        {
            let rp = self.router.as_ref().unwrap();
            let mut gone = BTreeSet::new();
            for p in d_minus {
                match rp.demand.get(&p.id) {
                    Some(&(a, b)) if (a, b) == (p.a, p.b) => {}
                    Some(_) => {
                        return Err(Error::Precondition(format!(
                            "demand {} endpoints do not match the routed pair",
                            p.id
                        )))
                    }
                    None => return Err(Error::UnknownId(p.id.to_string())),
                }
                if !gone.insert(p.id) {
                    return Err(Error::Precondition(format!(
                        "demand {} removed twice",
                        p.id
                    )));
                }
            }
            let mut next = rp.demand.clone();
            for p in d_minus {
                next.remove(&p.id);
            }
            for p in d_plus {
                for x in [p.a, p.b] {
                    if !self.live.contains(&x) {
                        return Err(Error::NotPresent(format!(
                            "demand endpoint {} was pruned",
                            self.host.name(x)
                        )));
                    }
                }
                if next.insert(p.id, (p.a, p.b)).is_some() {
                    return Err(Error::Precondition(format!(
                        "demand id {} is already routed",
                        p.id
                    )));
                }
            }
            // The surviving demand must sit on live host vertices.
            for (&id, &(u, v)) in &next {
                for x in [u, v] {
                    if !self.live.contains(&x) {
                        return Err(Error::Precondition(format!(
                            "demand {id} endpoint {} was pruned but the pair stays",
                            self.host.name(x)
                        )));
                    }
                }
            }
            if self.mode == Mode::Strict {
                let all: Vec<HostDemand> = next
                    .iter()
                    .map(|(&id, &(a, b))| HostDemand { a, b, id })
                    .collect();
                let load = host_demand_load(&all);
                if load > rp.load_bound {
                    return Err(Error::Capacity(format!(
                        "demand load {load} exceeds bound {}",
                        rp.load_bound
                    )));
                }
            }
        }
        let mut tmp_add = BTreeSet::new();
        for p in d_plus {
            tmp_add.insert((self.rep_internal(p.a)?, self.rep_internal(p.b)?, p.id));
        }
        let mut tmp_rem = BTreeSet::new();
        for p in d_minus {
            tmp_rem.insert((self.rep_internal(p.a)?, self.rep_internal(p.b)?, p.id));
        }
        let rp = self.router.as_mut().unwrap();
        let cancel: BTreeSet<(Vertex, Vertex, u64)> =
            rp.pend_add.intersection(&tmp_rem).copied().collect();
        let adds: Vec<DemandPair> = rp
            .pend_add
            .union(&tmp_add)
            .filter(|t| !cancel.contains(t))
            .map(|&(a, b, id)| DemandPair { a, b, id })
            .collect();
        let rems: Vec<DemandPair> = rp
            .pend_rem
            .union(&tmp_rem)
            .filter(|t| !cancel.contains(t))
            .map(|&(a, b, id)| DemandPair { a, b, id })
            .collect();
        let v_minus: Vec<Vertex> = rp.pend_v.iter().copied().collect();
        let e_minus: Vec<(Vertex, Vertex)> = rp.pend_e.iter().copied().collect();
        let changed = rp
            .router
            .dynamic_update(&[], &v_minus, &[], &e_minus, &adds, &rems)?;
        for p in d_minus {
            rp.demand.remove(&p.id);
        }
        for p in d_plus {
            rp.demand.insert(p.id, (p.a, p.b));
        }
        rp.pend_v.clear();
        rp.pend_e.clear();
        rp.pend_add.clear();
        rp.pend_rem.clear();
        Ok(changed)
    }

    fn project_inner(&self, p: &Path) -> Result<HostPath> {
        let mut out = vec![self.emb.image[p.start().0 as usize]];
        for (x, y) in p.edges() {
            let seg = self.emb.host_path(x, y)?;
            out.extend_from_slice(&seg[1..]);
        }
        Ok(HostPath { vertices: out })
    }

    /// The routed path of pair `id`: its endpoints' covering-path walks
    /// around the projection of the inner route between their projected
    /// endpoints. Queued prune effects must be flushed first.
    pub fn get_path(&self, id: u64) -> Result<HostPath> {
        let rp = self
            .router
            .as_ref()
            .ok_or_else(|| Error::Precondition("no demand is attached".into()))?;
        if !self.pending_empty() {
            return Err(Error::Precondition(
                "prune effects are queued; reroute first".into(),
            ));
        }
        let &(u, v) = rp.demand.get(&id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let head = self.connection_of(u)?;
        let tail = self.connection_of(v)?.reversed();
        let inner = rp.router.path_of(DemandPair {
            a: self.rep_internal(u)?,
            b: self.rep_internal(v)?,
            id,
        })?;
        Ok(head.concat(self.project_inner(&inner)?).concat(tail))
    }

    pub fn paths(&self) -> Result<Vec<(HostDemand, HostPath)>> {
        self.demand()
            .into_iter()
            .map(|p| Ok((p, self.get_path(p.id)?)))
            .collect()
    }

    /// Samples a route between live host vertices: covering-path walks
    /// around the projection of an inner sample between their projected
    /// endpoints.
    pub fn sample_embedded_path(
        &self,
        u: HostVertex,
        v: HostVertex,
        rng: &mut SplitRng,
    ) -> Result<HostPath> {
        self.ensure_live(u)?;
        self.ensure_live(v)?;
        let head = self.connection_of(u)?;
        let tail = self.connection_of(v)?.reversed();
        let inner = route::sample_path(
            &self.g,
            &self.pruner.trie,
            self.tau,
            self.mode,
            self.rep_internal(u)?,
            self.rep_internal(v)?,
            rng,
        )?;
        Ok(head.concat(self.project_inner(&inner.path)?).concat(tail))
    }

    /// Full rescan audit: the surviving set matches the inner engine, both
    /// coverage maps match a rebuild from the surviving paths, those paths
    /// avoid trimmed vertices and deleted host edges, every live host vertex
    /// keeps a surviving covering edge, and a flushed router carries exactly
    /// the projected demand.
    pub fn check_coverage(&self) -> Result<()> {
        let expect: BTreeSet<CubeEdge> = self
            .g
            .edges()
            .filter(|&(u, w)| self.pruner.trie.contains(u) && self.pruner.trie.contains(w))
            .collect();
        if expect != self.surviving {
            return Err(Error::Invariant(
                "surviving edges disagree with the inner engine".into(),
            ));
        }
        let mut want_covers: BTreeMap<HostVertex, BTreeSet<CubeEdge>> = BTreeMap::new();
        let mut want_users: BTreeMap<(HostVertex, HostVertex), BTreeSet<CubeEdge>> =
            BTreeMap::new();
        for e in &self.surviving {
            let p = &self.emb.paths[e];
            for &x in p {
                if !self.live.contains(&x) {
                    return Err(Error::Invariant(format!(
                        "surviving path visits trimmed host vertex {}",
                        self.host.name(x)
                    )));
                }
                want_covers.entry(x).or_default().insert(*e);
            }
            for pair in p.windows(2) {
                let hk = host_key(pair[0], pair[1]);
                if self.dead_edges.contains(&hk) {
                    return Err(Error::Invariant(format!(
                        "surviving path rides the deleted host edge {} {}",
                        self.host.name(hk.0),
                        self.host.name(hk.1)
                    )));
                }
                want_users.entry(hk).or_default().insert(*e);
            }
        }
        if want_users != self.users {
            return Err(Error::Invariant("host edge usage map drifted".into()));
        }
        if want_covers != self.covers {
            return Err(Error::Invariant("host vertex coverage map drifted".into()));
        }
        for &x in &self.live {
            let set = self.covers.get(&x).ok_or_else(|| {
                Error::Invariant(format!(
                    "live host vertex {} is on no surviving path",
                    self.host.name(x)
                ))
            })?;
            let ok = self.conn.get(&x).is_some_and(|e| set.contains(e));
            if !ok {
                return Err(Error::Invariant(format!(
                    "covering edge of {} is stale",
                    self.host.name(x)
                )));
            }
        }
        if let Some(rp) = &self.router {
            if self.pending_empty() {
                let mut want = BTreeSet::new();
                for (&id, &(u, v)) in &rp.demand {
                    want.insert((self.rep_internal(u)?, self.rep_internal(v)?, id));
                }
                let have: BTreeSet<(Vertex, Vertex, u64)> = rp
                    .router
                    .demand()
                    .into_iter()
                    .map(|p| (p.a, p.b, p.id))
                    .collect();
                if want != have {
                    return Err(Error::Invariant(
                        "projected demand drifted from the routed demand".into(),
                    ));
                }
                rp.router.check_invariants()?;
            }
        }
        Ok(())
    }
}

fn incident_cube_edges(g: &SemiHypercube, s: Vertex) -> Vec<CubeEdge> {
    let uni = &g.uni;
    let mut out = Vec::with_capacity(((uni.k - 1) * uni.d) as usize);
    for depth in 0..uni.d {
        let own = uni.digit(s, depth);
        for sib in 1..=uni.k {
            if sib != own {
                out.push(cube_key(s, g.partner(s, depth, sib)));
            }
        }
    }
    out
}
