//! Deterministic experiment drivers: adversaries, replayable prune and
//! routing runs with a shared CSV row schema, script shrinking for failing
//! strict runs, and parameter suggestions for a target instance size.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::dynroute::{demand_load, DemandPair, DynRouter};
use crate::error::{Error, Result};
use crate::graph::SemiHypercube;
use crate::label::{Vertex, ROOT};
use crate::prune::{shadow_trim_rate, Pruner};
use crate::rng::SplitRng;
use crate::route::{measure_congestion, sample_path};
use crate::trie::VertexTrie;
use crate::validate::{self, Mode, Tau};

/// Draws before an edge or demand sampler gives up on the current state.
const DRAW_CAP: u32 = 64;

/// Deletion strategies. The scripted kind replays a fixed op list; the
/// others draw from the live set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversaryKind {
    /// Uniform over live vertices.
    RandomVertex,
    /// Uniform inside the largest root child other than the current target.
    LargestNonTarget,
    /// Uniform live endpoint, then a uniform surviving edge out of it.
    RandomEdge,
    /// Fixed op list in order; ops naming dead vertices are skipped.
    Scripted,
}

impl FromStr for AdversaryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<AdversaryKind> {
        match s {
            "random" => Ok(AdversaryKind::RandomVertex),
            "largest-nontarget" => Ok(AdversaryKind::LargestNonTarget),
            "random-edge" => Ok(AdversaryKind::RandomEdge),
            "script" => Ok(AdversaryKind::Scripted),
            other => Err(Error::Parse(format!("unknown adversary {other:?}"))),
        }
    }
}

/// Deterministic op source: the same (kind, seed, script) replayed against
/// the same evolving state yields the same sequence.
#[derive(Clone, Debug)]
pub struct Adversary {
    pub kind: AdversaryKind,
    pub seed: u64,
    pub script: Vec<String>,
    rng: SplitRng,
    cursor: usize,
}

impl Adversary {
    pub fn new(kind: AdversaryKind, seed: u64) -> Adversary {
        Adversary { kind, seed, script: Vec::new(), rng: SplitRng::seeded(seed), cursor: 0 }
    }

    pub fn scripted(script: Vec<String>, seed: u64) -> Adversary {
        Adversary { kind: AdversaryKind::Scripted, ..Adversary::new(AdversaryKind::Scripted, seed) }
            .with_script(script)
    }

    fn with_script(mut self, script: Vec<String>) -> Adversary {
        self.script = script;
        self
    }

    /// Next vertex to delete, or None when the strategy is exhausted.
    /// `target` is the root child the caller is currently trimming toward.
    pub fn next_vertex(
        &mut self,
        g: &SemiHypercube,
        trie: &VertexTrie,
        target: u32,
    ) -> Result<Option<Vertex>> {
        if trie.size_of(ROOT) == 0 {
            return Ok(None);
        }
        match self.kind {
            AdversaryKind::RandomVertex => Ok(Some(trie.sample_uniform(ROOT, &mut self.rng)?)),
            AdversaryKind::LargestNonTarget => {
                let uni = &g.uni;
                let mut best: Option<(u64, u32)> = None;
                for i in (1..=uni.k).filter(|&i| i != target) {
                    let size = trie.size_of(uni.child(ROOT, i));
                    if size > 0 && best.is_none_or(|(s, _)| size > s) {
                        best = Some((size, i));
                    }
                }
                // Only the target child left: keep draining so runs finish.
                let c = best.map_or(ROOT, |(_, i)| uni.child(ROOT, i));
                Ok(Some(trie.sample_uniform(c, &mut self.rng)?))
            }
            AdversaryKind::RandomEdge => Ok(self.next_edge(g, trie)?.map(|(u, _)| u)),
            AdversaryKind::Scripted => {
                while self.cursor < self.script.len() {
                    let op = self.script[self.cursor].clone();
                    self.cursor += 1;
                    let v = g.uni.parse_label(op.trim())?;
                    if trie.contains(v) {
                        return Ok(Some(v));
                    }
                }
                Ok(None)
            }
        }
    }

    /// Next surviving edge, or None when no strategy draw finds one.
    /// Scripted ops use the form "u w".
    pub fn next_edge(
        &mut self,
        g: &SemiHypercube,
        trie: &VertexTrie,
    ) -> Result<Option<(Vertex, Vertex)>> {
        if self.kind == AdversaryKind::Scripted {
            while self.cursor < self.script.len() {
                let op = self.script[self.cursor].clone();
                self.cursor += 1;
                let Some((a, b)) = op.trim().split_once(' ') else {
                    return Err(Error::Parse(format!("edge op needs two labels, got {op:?}")));
                };
                let (u, w) = (g.uni.parse_label(a.trim())?, g.uni.parse_label(b.trim())?);
                if trie.contains(u) && trie.contains(w) && g.has_edge(u, w) {
                    return Ok(Some((u, w)));
                }
            }
            return Ok(None);
        }
        for _ in 0..DRAW_CAP {
            if trie.size_of(ROOT) == 0 {
                return Ok(None);
            }
            let u = trie.sample_uniform(ROOT, &mut self.rng)?;
            let nbrs: Vec<Vertex> = g.live_neighbors(trie, u).collect();
            if nbrs.is_empty() {
                continue;
            }
            let w = nbrs[self.rng.below(nbrs.len() as u64) as usize];
            return Ok(Some((u, w)));
        }
        Ok(None)
    }
}

/// One experiment step. Quantities a driver does not measure stay at their
/// defaults so every experiment shares one CSV schema.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricsRow {
    pub update: u64,
    pub op: String,
    pub pruned_count: u64,
    pub remaining: u64,
    pub valid: bool,
    pub max_congestion: u64,
    pub max_length: u64,
    pub recourse: u64,
    pub bound_ok: bool,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "update,op,pruned_count,remaining,valid,max_congestion,max_length,recourse,bound_ok";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.update,
            self.op,
            self.pruned_count,
            self.remaining,
            self.valid,
            self.max_congestion,
            self.max_length,
            self.recourse,
            self.bound_ok
        )
    }
}

/// Header plus one line per row.
pub fn write_csv(rows: &[MetricsRow], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{}", MetricsRow::HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Where an experiment gets its graph.
#[derive(Clone)]
pub enum GraphSource {
    Random { k: u32, d: u32, seed: u64 },
    HypercubeStyle { k: u32, d: u32 },
    Explicit(SemiHypercube),
}

impl GraphSource {
    pub fn build(&self) -> Result<SemiHypercube> {
        match self {
            GraphSource::Random { k, d, seed } => SemiHypercube::build_random_shc(*k, *d, *seed),
            GraphSource::HypercubeStyle { k, d } => SemiHypercube::build_hypercube_style(*k, *d),
            GraphSource::Explicit(g) => Ok(g.clone()),
        }
    }
}

impl fmt::Debug for GraphSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphSource::Random { k, d, seed } => {
                write!(f, "Random {{ k: {k}, d: {d}, seed: {seed} }}")
            }
            GraphSource::HypercubeStyle { k, d } => {
                write!(f, "HypercubeStyle {{ k: {k}, d: {d} }}")
            }
            GraphSource::Explicit(g) => write!(f, "Explicit({}, {})", g.uni.k, g.uni.d),
        }
    }
}

fn make_adversary(kind: AdversaryKind, script: &[String], seed: u64) -> Adversary {
    match kind {
        AdversaryKind::Scripted => Adversary::scripted(script.to_vec(), seed),
        other => Adversary::new(other, seed),
    }
}

/// Self-pruning experiment: one adversary deletion per update.
#[derive(Clone, Debug)]
pub struct PruneConfig {
    pub graph: GraphSource,
    pub tau: Tau,
    pub mode: Mode,
    pub adversary: AdversaryKind,
    pub script: Vec<String>,
    pub seed: u64,
    /// Updates to run; None drains the graph.
    pub budget: Option<u64>,
    /// Overrides the derived trim rate for empirical studies; strict mode
    /// refuses an override.
    pub trim_rate: Option<u64>,
}

fn build_pruner(cfg: &PruneConfig) -> Result<Pruner> {
    let g = cfg.graph.build()?;
    match cfg.trim_rate {
        Some(rate) => {
            if cfg.mode == Mode::Strict {
                return Err(Error::Precondition(
                    "strict mode derives its trim rate from the tolerance".into(),
                ));
            }
            Ok(Pruner::with_trim_rate(&g, cfg.tau, rate))
        }
        None => Pruner::new(&g, cfg.tau, cfg.mode),
    }
}

/// Exclusive worst-case fallout of one deletion: (rate + 1)^d - 1.
pub fn fallout_bound(trim_rate: u64, d: u32) -> u128 {
    (trim_rate as u128 + 1).pow(d) - 1
}

/// Runs deletions under the configured adversary, one metrics row each.
/// Strict mode stops at the first breach of validity or the fallout bound
/// and reports a minimized reproducing script; other modes record
/// `valid` and `bound_ok` and keep going.
pub fn run_prune_experiment(cfg: &PruneConfig) -> Result<Vec<MetricsRow>> {
    let mut p = build_pruner(cfg)?;
    let mut adv = make_adversary(cfg.adversary, &cfg.script, cfg.seed);
    let bound = fallout_bound(p.trim_rate, p.g.uni.d);
    let budget = cfg.budget.unwrap_or(u64::MAX);
    let mut rows = Vec::new();
    let mut ops: Vec<String> = Vec::new();
    while (rows.len() as u64) < budget {
        let target = p.target_of(ROOT);
        let Some(v) = adv.next_vertex(&p.g, &p.trie, target)? else { break };
        let op = p.g.uni.label(v);
        ops.push(op.clone());
        let fallout = p.delete(v)?;
        let valid = validate::is_valid(&p.g, &p.trie, cfg.tau);
        let bound_ok = (fallout.len() as u128) <= bound;
        rows.push(MetricsRow {
            update: rows.len() as u64 + 1,
            op,
            pruned_count: fallout.len() as u64,
            remaining: p.trie.size_of(ROOT),
            valid,
            bound_ok,
            ..MetricsRow::default()
        });
        if cfg.mode == Mode::Strict && !(valid && bound_ok) {
            let repro = shrink_prune_script(cfg, ops);
            return Err(Error::Invariant(format!(
                "update {} broke the pruning guarantee (valid {valid}, fallout {}); \
                 minimized repro: {}",
                rows.len(),
                fallout.len(),
                repro.join(" "),
            )));
        }
    }
    Ok(rows)
}

/// Replays a deletion script and reports whether any step breaks validity
/// or the fallout bound. Ops naming dead vertices are vacuous.
fn prune_script_fails(cfg: &PruneConfig, ops: &[String]) -> bool {
    let Ok(g) = cfg.graph.build() else { return false };
    let rate = match cfg.trim_rate {
        Some(rate) => rate,
        None => match shadow_trim_rate(g.uni.k, 2 * g.uni.d + 1, cfg.tau) {
            Ok(rate) => rate,
            Err(_) => return false,
        },
    };
    let mut p = Pruner::with_trim_rate(&g, cfg.tau, rate);
    let bound = fallout_bound(rate, g.uni.d);
    for op in ops {
        let Ok(v) = g.uni.parse_label(op) else { return false };
        if !p.trie.contains(v) {
            continue;
        }
        let Ok(fallout) = p.delete(v) else { return true };
        if !validate::is_valid(&p.g, &p.trie, cfg.tau) || (fallout.len() as u128) > bound {
            return true;
        }
    }
    false
}

/// Shortest failing prefix by bisection, then greedy single-op removal.
fn shrink_ops(fails: impl Fn(&[String]) -> bool, ops: Vec<String>) -> Vec<String> {
    let (mut lo, mut hi) = (1usize, ops.len());
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if fails(&ops[..mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut cur = ops[..lo].to_vec();
    let mut i = 0;
    while cur.len() > 1 && i < cur.len() {
        let mut cand = cur.clone();
        cand.remove(i);
        if fails(&cand) {
            cur = cand;
        } else {
            i += 1;
        }
    }
    cur
}

fn shrink_prune_script(cfg: &PruneConfig, ops: Vec<String>) -> Vec<String> {
    if !prune_script_fails(cfg, &ops) {
        return ops; // replay disagrees with the live run; keep the full trace
    }
    shrink_ops(|cand| prune_script_fails(cfg, cand), ops)
}

/// What the routing driver exercises each update.
#[derive(Clone, Debug)]
pub enum RoutingKind {
    /// Oblivious sampling over the survivor graph, after at most one
    /// adversary deletion per update.
    SamplerOnly { pairs_per_update: u32 },
    /// Deterministic router under churn; demand lost to deletions is
    /// replaced on survivors when the load budget allows.
    DynRouter { load_bound: u64, demand: Vec<DemandPair> },
}

#[derive(Clone, Debug)]
pub struct RoutingConfig {
    pub graph: GraphSource,
    pub tau: Tau,
    pub mode: Mode,
    pub adversary: AdversaryKind,
    pub script: Vec<String>,
    pub seed: u64,
    pub updates: u64,
    pub kind: RoutingKind,
}

pub fn run_routing_experiment(cfg: &RoutingConfig) -> Result<Vec<MetricsRow>> {
    match &cfg.kind {
        RoutingKind::SamplerOnly { pairs_per_update } => run_sampler(cfg, *pairs_per_update),
        RoutingKind::DynRouter { load_bound, demand } => run_dynrouter(cfg, *load_bound, demand),
    }
}

/// Victims whose removal keeps the instance valid; live order.
fn valid_preserving(g: &SemiHypercube, trie: &VertexTrie, tau: Tau) -> Vec<Vertex> {
    trie.live(ROOT)
        .filter(|&v| {
            let mut after = trie.clone();
            after.remove(v).expect("live vertex");
            validate::is_valid(g, &after, tau)
        })
        .collect()
}

/// One adversary victim, restricted to validity-preserving choices for the
/// random kinds. A script replays verbatim so a repro stays a repro.
fn pick_valid_victim(
    adv: &mut Adversary,
    g: &SemiHypercube,
    trie: &VertexTrie,
    tau: Tau,
    target: u32,
) -> Result<Option<Vertex>> {
    if adv.kind == AdversaryKind::Scripted {
        return adv.next_vertex(g, trie, target);
    }
    let pool: BTreeSet<Vertex> = valid_preserving(g, trie, tau).into_iter().collect();
    if pool.is_empty() {
        return Ok(None);
    }
    let mut scratch = trie.clone();
    let culls: Vec<Vertex> = scratch.live(ROOT).filter(|v| !pool.contains(v)).collect();
    for v in culls {
        scratch.remove(v)?;
    }
    adv.next_vertex(g, &scratch, target)
}

fn run_sampler(cfg: &RoutingConfig, pairs_per_update: u32) -> Result<Vec<MetricsRow>> {
    let g = cfg.graph.build()?;
    let d = g.uni.d;
    let mut trie = VertexTrie::new_full(&g.uni);
    let mut adv = make_adversary(cfg.adversary, &cfg.script, cfg.seed);
    let mut rng = SplitRng::seeded(cfg.seed.wrapping_add(1));
    let mut rows = Vec::new();
    for update in 1..=cfg.updates {
        // One plain deletion per update when the adversary finds a victim
        // that keeps the instance valid; then sample over the survivors.
        let op = match pick_valid_victim(&mut adv, &g, &trie, cfg.tau, 1)? {
            Some(v) => {
                trie.remove(v)?;
                g.uni.label(v)
            }
            None => "sample".to_string(),
        };
        let remaining = trie.size_of(ROOT);
        let valid = validate::is_valid(&g, &trie, cfg.tau);
        let mut paths = Vec::new();
        for _ in 0..pairs_per_update {
            if remaining == 0 {
                break;
            }
            let s = trie.sample_uniform(ROOT, &mut rng)?;
            let t = trie.sample_uniform(ROOT, &mut rng)?;
            paths.push(sample_path(&g, &trie, cfg.tau, cfg.mode, s, t, &mut rng)?.path);
        }
        let max_length = paths.iter().map(|q| q.edge_count() as u64).max().unwrap_or(0);
        let max_congestion = measure_congestion(&paths).max();
        rows.push(MetricsRow {
            update,
            op,
            pruned_count: 0,
            remaining,
            valid,
            max_congestion,
            max_length,
            recourse: 0,
            bound_ok: valid && max_length <= 2 * d as u64,
        });
        if remaining == 0 {
            break;
        }
    }
    Ok(rows)
}

fn draw_pair(
    trie: &VertexTrie,
    live_demand: &[DemandPair],
    load_bound: u64,
    next_id: &mut u64,
    rng: &mut SplitRng,
) -> Result<Option<DemandPair>> {
    for _ in 0..DRAW_CAP {
        let a = trie.sample_uniform(ROOT, rng)?;
        let b = trie.sample_uniform(ROOT, rng)?;
        if a == b {
            continue;
        }
        let cand = DemandPair { a, b, id: *next_id };
        if demand_load(live_demand.iter().chain(std::iter::once(&cand))) <= load_bound {
            *next_id += 1;
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

fn run_dynrouter(
    cfg: &RoutingConfig,
    load_bound: u64,
    demand: &[DemandPair],
) -> Result<Vec<MetricsRow>> {
    let g = cfg.graph.build()?;
    let (k, d) = (g.uni.k, g.uni.d);
    let trie = VertexTrie::new_full(&g.uni);
    let mut router = DynRouter::new(&g, &trie, demand, cfg.tau, load_bound, cfg.mode)?;
    let mut adv = make_adversary(cfg.adversary, &cfg.script, cfg.seed);
    let mut rng = SplitRng::seeded(cfg.seed.wrapping_add(1));
    let mut next_id = demand.iter().map(|p| p.id + 1).max().unwrap_or(0);
    let cong_bound = (k as u128).max(load_bound as u128) * 20u128.pow(d);
    let len_bound = 4u128.pow(d);
    let mut gone: BTreeSet<(Vertex, Vertex)> = BTreeSet::new();
    let mut rows = Vec::new();
    for update in 1..=cfg.updates {
        let (op, v_minus, e_minus) = if cfg.adversary == AdversaryKind::RandomEdge {
            // The adversary sees only liveness, so already-removed edges
            // come up again; redraw past them.
            let mut pick = None;
            for _ in 0..DRAW_CAP {
                match adv.next_edge(&router.g, &router.trie)? {
                    Some((u, w)) if gone.contains(&(u.min(w), u.max(w))) => continue,
                    other => {
                        pick = other;
                        break;
                    }
                }
            }
            let Some((u, w)) = pick else { break };
            gone.insert((u.min(w), u.max(w)));
            let op = format!("{}-{}", router.g.uni.label(u), router.g.uni.label(w));
            (op, Vec::new(), vec![(u, w)])
        } else {
            let victim = pick_valid_victim(&mut adv, &router.g, &router.trie, cfg.tau, 1)?;
            let Some(v) = victim else { break };
            let e_minus: Vec<(Vertex, Vertex)> =
                router.g.live_neighbors(&router.trie, v).map(|w| (v, w)).collect();
            (router.g.uni.label(v), vec![v], e_minus)
        };
        let d_minus: Vec<DemandPair> = router
            .demand()
            .into_iter()
            .filter(|p| v_minus.contains(&p.a) || v_minus.contains(&p.b))
            .collect();
        let mut changed: BTreeSet<u64> =
            router.dynamic_update(&[], &v_minus, &[], &e_minus, &[], &d_minus)?;
        let mut live_demand = router.demand();
        let mut d_plus = Vec::new();
        if router.trie.size_of(ROOT) >= 2 {
            for _ in 0..d_minus.len() {
                if let Some(p) =
                    draw_pair(&router.trie, &live_demand, load_bound, &mut next_id, &mut rng)?
                {
                    live_demand.push(p);
                    d_plus.push(p);
                }
            }
        }
        if !d_plus.is_empty() {
            changed.extend(router.dynamic_update(&[], &[], &[], &[], &d_plus, &[])?);
        }
        if cfg.mode == Mode::Strict {
            router.check_invariants()?;
        }
        let paths = router.paths()?;
        let max_length = paths.iter().map(|(_, q)| q.edge_count() as u64).max().unwrap_or(0);
        let max_congestion = measure_congestion(paths.iter().map(|(_, q)| q)).max();
        let valid = validate::is_valid(&router.g, &router.trie, cfg.tau)
            && paths.iter().all(|(_, q)| q.check_valid(&router.g, &router.trie).is_ok());
        let bound_ok =
            (max_congestion as u128) <= cong_bound && (max_length as u128) <= len_bound;
        rows.push(MetricsRow {
            update,
            op,
            pruned_count: v_minus.len() as u64,
            remaining: router.trie.size_of(ROOT),
            valid,
            max_congestion,
            max_length,
            recourse: changed.len() as u64,
            bound_ok,
        });
        if cfg.mode == Mode::Strict && !(valid && bound_ok) {
            return Err(Error::Invariant(format!(
                "update {update}: routing bounds failed \
                 (valid {valid}, congestion {max_congestion}, length {max_length})"
            )));
        }
        if router.trie.size_of(ROOT) < 2 {
            break;
        }
    }
    Ok(rows)
}

/// Suggested operating point for a target vertex count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSuggestion {
    pub k: u32,
    pub tau: Tau,
    pub trim_rate: u64,
    pub warnings: Vec<String>,
}

fn pow_leq(k: u64, d: u32, n: u64) -> bool {
    let mut acc: u128 = 1;
    for _ in 0..d {
        acc = acc.saturating_mul(k as u128);
        if acc > n as u128 {
            return false;
        }
    }
    true
}

/// Largest k with k^d <= n.
fn floor_root(n: u64, d: u32) -> u64 {
    let (mut lo, mut hi) = (0u64, n);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if pow_leq(mid, d, n) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Side length, tolerance, and trim rate for roughly n_target vertices in
/// d dimensions, with warnings where the worst-case guarantees need more.
pub fn suggest_parameters(n_target: u64, d: u32) -> Result<ParamSuggestion> {
    if d == 0 {
        return Err(Error::Precondition("need d >= 1".into()));
    }
    let k = floor_root(n_target, d);
    let tau = Tau::new(1, 4350 * d as u64)?;
    let mut warnings = Vec::new();
    if k < 2 {
        warnings.push(format!(
            "target size {n_target} leaves no usable side length at d = {d}"
        ));
    }
    if k > u32::MAX as u64 {
        warnings.push(format!("side length {k} clamped to {}", u32::MAX));
    }
    if k < 16 * d as u64 {
        warnings.push(format!(
            "k = {k} is below 16d = {}; the worst-case pruning guarantee does not apply",
            16 * d as u64
        ));
    }
    if k < 27 * d as u64 {
        warnings.push(format!(
            "k = {k} is below 27d = {}; the midpoint sampler guarantee does not apply",
            27 * d as u64
        ));
    }
    let k = u32::try_from(k).unwrap_or(u32::MAX);
    let trim_rate = if k < 2 { 0 } else { shadow_trim_rate(k, 2 * d + 1, tau)? };
    Ok(ParamSuggestion { k, tau, trim_rate, warnings })
}
