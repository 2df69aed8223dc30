//! Generator for remnants that force congestion. A small set of hard vertices,
//! built from k-cliques, reaches the rest of the live graph only through a cut
//! of exactly k matching edges, so any routing of a demand that saturates the
//! hard set pushes all of it through those k edges. Going up two dimensions
//! doubles the hard set while the cut stays k, so the congestion floor of the
//! family grows as 2^{(d−d0)/2}.

use crate::dynroute::DemandPair;
use crate::error::{Error, Result};
use crate::graph::SemiHypercube;
use crate::label::{Cluster, Universe, Vertex, ROOT};
use crate::trie::VertexTrie;
use crate::validate::{validate, Tau};
use std::collections::{BTreeMap, BTreeSet};

/// Closed-form shape of the family: hard-set and cut sizes per dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardFamilySpec {
    pub k: u32,
    pub d: u32,
    /// Dimension of the innermost block; the recursion starts here.
    pub d0: u32,
    pub tau: Tau,
    /// hard_sizes[i] = k·2^{⌊i/2⌋}, the hard-set size at dimension d0+i.
    pub hard_sizes: Vec<u64>,
    /// cut_sizes[i] = k at every dimension: doubling never widens the cut.
    pub cut_sizes: Vec<u64>,
}

impl HardFamilySpec {
    pub fn new(k: u32, d: u32, d0: u32, tau: Tau) -> Result<Self> {
        if k < 2 {
            return Err(Error::Precondition(format!("hard families need k >= 2, got k={k}")));
        }
        if d0 < 2 || d < d0 {
            return Err(Error::Precondition(format!("need d >= d0 >= 2, got d={d} d0={d0}")));
        }
        if (tau.num as u128) * (k as u128) < tau.den as u128 {
            return Err(Error::Precondition(format!(
                "tolerance {tau} is below 1/{k}; the padded blocks would turn critical"
            )));
        }
        let levels = (d - d0) as usize + 1;
        if levels / 2 >= 64 {
            return Err(Error::Capacity(format!("hard-set size k·2^{} overflows", levels / 2)));
        }
        let hard_sizes = (0..levels).map(|i| (k as u64) << (i / 2)).collect();
        let cut_sizes = vec![k as u64; levels];
        Ok(HardFamilySpec { k, d, d0, tau, hard_sizes, cut_sizes })
    }

    /// Hard-set size at dimension `dim` in d0..=d.
    pub fn hard_size(&self, dim: u32) -> u64 {
        self.hard_sizes[(dim - self.d0) as usize]
    }

    /// Cut size at dimension `dim` in d0..=d.
    pub fn cut_size(&self, dim: u32) -> u64 {
        self.cut_sizes[(dim - self.d0) as usize]
    }
}

/// Dimensions alternate between two layer kinds above the base: `Stack` places
/// a matched copy of the hard set in a fresh sibling (doubling it), `Pad`
/// surrounds the instance with near-full blocks that keep it valid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Stack,
    Pad,
}

fn layer_at(d0: u32, dim: u32) -> Layer {
    if (dim - d0).is_multiple_of(2) {
        Layer::Stack
    } else {
        Layer::Pad
    }
}

/// Hard-set size at dimension `m`: k·2^{⌊(m−d0)/2⌋}.
fn hard_size_at(k: u32, d0: u32, m: u32) -> u64 {
    (k as u64) << ((m - d0) / 2)
}

/// Digit string as a code relative to its own block, lexicographic.
fn rel_code(k: u32, p: &[u32]) -> u32 {
    p.iter().fold(0u32, |acc, &x| acc * k + (x - 1))
}

/// Positions (length `dim`, digits 1-based) of s/k full leaf cliques packed at
/// the end of a chain of 1-digits: 1^{dim−1−q} · base-k(c) · j. The packing is
/// prefix-contiguous in lexicographic order, so any partially covered cluster
/// has only full or empty siblings; that keeps one critical child per cluster
/// with all its outward edges alive.
fn collapsed_positions(k: u32, s: u64, dim: u32) -> Result<Vec<Vec<u32>>> {
    debug_assert!(s.is_multiple_of(k as u64));
    let cliques = s / k as u64;
    let mut q = 0u32;
    let mut cap = 1u64;
    while cap < cliques {
        cap *= k as u64;
        q += 1;
    }
    if q + 1 > dim {
        return Err(Error::Precondition(format!(
            "a hard set of {s} does not fit a {dim}-dimensional block at k={k}"
        )));
    }
    let mut out = Vec::with_capacity(s as usize);
    for c in 0..cliques {
        let mut enc = vec![1u32; (dim - 1) as usize];
        let mut rem = c;
        for t in 0..q {
            enc[(dim - 2 - t) as usize] = (rem % k as u64) as u32 + 1;
            rem /= k as u64;
        }
        for j in 1..=k {
            let mut p = enc.clone();
            p.push(j);
            out.push(p);
        }
    }
    Ok(out)
}

/// Hard positions of a block, relative to the block itself. A stacked block
/// holds a collapsed copy in child 1 and the previous hard set inside child 2;
/// a padded block keeps it inside child 1.
fn hard_rel(k: u32, d0: u32, dim: u32) -> Result<Vec<Vec<u32>>> {
    match layer_at(d0, dim) {
        Layer::Stack if dim == d0 => collapsed_positions(k, k as u64, d0),
        Layer::Stack => {
            let mut out = Vec::new();
            for p in collapsed_positions(k, hard_size_at(k, d0, dim - 1), dim - 1)? {
                let mut v = vec![1u32];
                v.extend_from_slice(&p);
                out.push(v);
            }
            for p in hard_rel(k, d0, dim - 1)? {
                let mut v = vec![2u32];
                v.extend_from_slice(&p);
                out.push(v);
            }
            Ok(out)
        }
        Layer::Pad => Ok(hard_rel(k, d0, dim - 1)?
            .into_iter()
            .map(|mut p| {
                p.insert(0, 1);
                p
            })
            .collect()),
    }
}

/// Per (depth, prefix) of a stacked-block root: matched position pairs.
type TweakMap = BTreeMap<(u32, u32), Vec<(u32, u32)>>;

/// Matching overrides along the spine of stacked blocks: the copy in child 1
/// is paired with the hard set of child 2, lowest positions first. Everywhere
/// else the digit-substitution matchings stay as they are.
fn matching_tweaks(k: u32, d: u32, d0: u32) -> Result<TweakMap> {
    let mut out = BTreeMap::new();
    let mut prefix = 0u32;
    let mut dim = d;
    loop {
        match layer_at(d0, dim) {
            Layer::Stack if dim == d0 => break,
            Layer::Stack => {
                let copy = collapsed_positions(k, hard_size_at(k, d0, dim - 1), dim - 1)?;
                let target = hard_rel(k, d0, dim - 1)?;
                debug_assert_eq!(copy.len(), target.len());
                let mut a: Vec<u32> = copy.iter().map(|p| rel_code(k, p)).collect();
                let mut b: Vec<u32> = target.iter().map(|p| rel_code(k, p)).collect();
                a.sort_unstable();
                b.sort_unstable();
                out.insert((d - dim, prefix), a.into_iter().zip(b).collect());
                prefix = prefix * k + 1;
                dim -= 1;
            }
            Layer::Pad => {
                prefix *= k;
                dim -= 1;
            }
        }
    }
    Ok(out)
}

/// Marks live and hard vertices of the recursion into flat bitmaps.
struct Carver<'a> {
    uni: &'a Universe,
    d0: u32,
    live: Vec<bool>,
    hard: Vec<bool>,
}

impl Carver<'_> {
    fn code(&self, digits: &[u32]) -> usize {
        debug_assert_eq!(digits.len(), self.uni.d as usize);
        let mut code = 0u64;
        for &x in digits {
            code = code * self.uni.k as u64 + (x - 1) as u64;
        }
        code as usize
    }

    fn mark(&mut self, prefix: &[u32], rel: &[u32], hard: bool) {
        let mut digits = prefix.to_vec();
        digits.extend_from_slice(rel);
        let c = self.code(&digits);
        self.live[c] = true;
        if hard {
            self.hard[c] = true;
        }
    }

    fn cluster_of(&self, prefix: &[u32]) -> Cluster {
        let mut c = ROOT;
        for &x in prefix {
            c = self.uni.child(c, x);
        }
        c
    }

    /// Whole subcube under `prefix` live, except the listed holes.
    fn mark_block(&mut self, prefix: &[u32], holes: &[Vec<u32>]) {
        for code in self.uni.code_range(self.cluster_of(prefix)) {
            self.live[code as usize] = true;
        }
        for h in holes {
            let mut digits = prefix.to_vec();
            digits.extend_from_slice(h);
            let c = self.code(&digits);
            self.live[c] = false;
        }
    }

    fn carve(&mut self, prefix: &mut Vec<u32>, dim: u32) -> Result<()> {
        match layer_at(self.d0, dim) {
            Layer::Stack if dim == self.d0 => {
                // the base pair: a chained k-clique plus a full block it is matched into
                for rel in collapsed_positions(self.uni.k, self.uni.k as u64, self.d0)? {
                    self.mark(prefix, &rel, true);
                }
                prefix.push(2);
                self.mark_block(prefix, &[]);
                prefix.pop();
            }
            Layer::Stack => {
                let s = hard_size_at(self.uni.k, self.d0, dim - 1);
                for p in collapsed_positions(self.uni.k, s, dim - 1)? {
                    let mut rel = vec![1u32];
                    rel.extend_from_slice(&p);
                    self.mark(prefix, &rel, true);
                }
                prefix.push(2);
                self.carve(prefix, dim - 1)?;
                prefix.pop();
            }
            Layer::Pad => {
                prefix.push(1);
                self.carve(prefix, dim - 1)?;
                prefix.pop();
                // siblings get holes exactly at the hard positions, so hard
                // vertices have no live partners outside the instance
                let holes = hard_rel(self.uni.k, self.d0, dim - 1)?;
                for i in 2..=self.uni.k {
                    prefix.push(i);
                    self.mark_block(prefix, &holes);
                    prefix.pop();
                }
            }
        }
        Ok(())
    }
}

/// A built member of the family: the remnant plus its distinguished hard set.
#[derive(Clone)]
pub struct HardInstance {
    pub spec: HardFamilySpec,
    pub g: SemiHypercube,
    pub trie: VertexTrie,
    pub hard: BTreeSet<Vertex>,
}

/// Builds the dimension-`d` member over a fresh hypercube-style graph and
/// audits it before returning: the remnant must validate at `tau` and match
/// the closed-form hard and cut sizes. Parameter shapes whose remnant fails
/// validation (small d0 cannot pay the crossing requirement) are refused.
pub fn build_hard_instance(k: u32, d: u32, d0: u32, tau: Tau) -> Result<HardInstance> {
    let spec = HardFamilySpec::new(k, d, d0, tau)?;
    let tweaks = matching_tweaks(k, d, d0)?;
    let g = SemiHypercube::build_tweaked(k, d, |depth, prefix, i, j, perm| {
        let pairs = match tweaks.get(&(depth, prefix)) {
            Some(pairs) if i == 1 && j == 2 => pairs,
            _ => return,
        };
        let mut inv: Vec<u32> = vec![0; perm.len()];
        for (q, &p) in perm.iter().enumerate() {
            inv[p as usize] = q as u32;
        }
        for &(a, b) in pairs {
            let (a, x) = (a as usize, inv[b as usize] as usize);
            perm.swap(a, x);
            inv[perm[x] as usize] = x as u32;
            inv[perm[a] as usize] = a as u32;
        }
    })?;
    let n = g.uni.n() as usize;
    let mut carver = Carver { uni: &g.uni, d0, live: vec![false; n], hard: vec![false; n] };
    carver.carve(&mut Vec::new(), d)?;
    let mut trie = VertexTrie::new_full(&g.uni);
    let mut hard = BTreeSet::new();
    for v in g.uni.vertices() {
        if !carver.live[v.0 as usize] {
            trie.remove(v)?;
        }
        if carver.hard[v.0 as usize] {
            hard.insert(v);
        }
    }
    let inst = HardInstance { spec, g, trie, hard };
    inst.check()?;
    Ok(inst)
}

/// Degree-respecting demand that saturates the hard set against the rest of
/// the live graph: every hard vertex appears in exactly its live degree many
/// pairs, partners cycle round-robin over the complement without exceeding
/// any partner's degree. All of it must cross the cut.
#[derive(Clone, Debug)]
pub struct HardDemand {
    pub pairs: Vec<DemandPair>,
    /// Pairs with exactly one hard endpoint; here all of them.
    pub crossing: u64,
    /// Surviving edges between the hard set and its complement.
    pub cut: u64,
}

impl HardDemand {
    /// Congestion floor: any routing puts ≥ crossing/cut load on some cut edge.
    pub fn floor(&self) -> (u64, u64) {
        (self.crossing, self.cut)
    }

    /// True when crossing/cut ≥ num/den, in exact integer arithmetic.
    pub fn ratio_at_least(&self, num: u64, den: u64) -> bool {
        self.crossing as u128 * den as u128 >= num as u128 * self.cut as u128
    }
}

impl HardInstance {
    /// Live vertices outside the hard set, for writing removed-vertex files.
    pub fn removed(&self) -> impl Iterator<Item = Vertex> + '_ {
        self.g.uni.vertices().filter(move |&v| !self.trie.contains(v))
    }

    pub fn live_degree(&self, v: Vertex) -> u64 {
        self.g.live_neighbors(&self.trie, v).count() as u64
    }

    /// Surviving edges with exactly one endpoint in the hard set, each once.
    pub fn cut_edges(&self) -> Vec<(Vertex, Vertex)> {
        let mut out = Vec::new();
        for &v in &self.hard {
            for w in self.g.live_neighbors(&self.trie, v) {
                if !self.hard.contains(&w) {
                    out.push((v, w));
                }
            }
        }
        out
    }

    /// The guaranteed floor s_d·(k−1) / 2k every built instance certifies.
    pub fn promised_floor(&self) -> (u64, u64) {
        let s = self.spec.hard_size(self.spec.d);
        (s * (self.spec.k as u64 - 1), 2 * self.spec.k as u64)
    }

    /// Structural audit: validity at τ plus the closed-form hard and cut sizes.
    pub fn check(&self) -> Result<()> {
        let report = validate(&self.g, &self.trie, self.spec.tau);
        if let Some(v) = report.violations.first() {
            return Err(Error::Precondition(format!(
                "k={} d={} d0={} tau={} leaves an invalid remnant: {v:?}",
                self.spec.k, self.spec.d, self.spec.d0, self.spec.tau
            )));
        }
        let want = self.spec.hard_size(self.spec.d);
        if self.hard.len() as u64 != want {
            return Err(Error::Invariant(format!(
                "hard set has {} vertices, closed form says {want}",
                self.hard.len()
            )));
        }
        let cut = self.cut_edges().len() as u64;
        if cut != self.spec.cut_size(self.spec.d) {
            return Err(Error::Invariant(format!(
                "cut has {cut} edges, closed form says {}",
                self.spec.cut_size(self.spec.d)
            )));
        }
        for &v in &self.hard {
            if !self.trie.contains(v) {
                return Err(Error::Invariant(format!("hard vertex {} pruned", self.g.uni.label(v))));
            }
            let inside = self
                .g
                .live_neighbors(&self.trie, v)
                .filter(|w| self.hard.contains(w))
                .count() as u64;
            if inside < self.spec.k as u64 - 1 {
                return Err(Error::Invariant(format!(
                    "hard vertex {} has only {inside} hard neighbors",
                    self.g.uni.label(v)
                )));
            }
        }
        Ok(())
    }

    pub fn hard_demand(&self) -> Result<HardDemand> {
        let mut others = Vec::new();
        let mut budget = Vec::new();
        for v in self.trie.live(ROOT) {
            if !self.hard.contains(&v) {
                others.push(v);
                budget.push(self.live_degree(v));
            }
        }
        if others.is_empty() && !self.hard.is_empty() {
            return Err(Error::Invariant("no live vertices outside the hard set".into()));
        }
        let mut pairs = Vec::new();
        let mut cursor = 0usize;
        for &v in &self.hard {
            for _ in 0..self.live_degree(v) {
                let mut scanned = 0;
                while budget[cursor] == 0 {
                    cursor = (cursor + 1) % others.len();
                    scanned += 1;
                    if scanned > others.len() {
                        return Err(Error::Invariant("complement degree budget exhausted".into()));
                    }
                }
                budget[cursor] -= 1;
                pairs.push(DemandPair { a: v, b: others[cursor], id: pairs.len() as u64 });
                cursor = (cursor + 1) % others.len();
            }
        }
        let cut = self.cut_edges().len() as u64;
        Ok(HardDemand { crossing: pairs.len() as u64, pairs, cut })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tau(num: u64, den: u64) -> Tau {
        Tau::new(num, den).unwrap()
    }

    #[test]
    fn closed_forms_follow_the_doubling_rule() {
        let spec = HardFamilySpec::new(4, 10, 4, tau(1, 4)).unwrap();
        assert_eq!(spec.hard_sizes, vec![4, 4, 8, 8, 16, 16, 32]);
        assert_eq!(spec.cut_sizes, vec![4; 7]);
        assert_eq!(spec.hard_size(4), 4);
        assert_eq!(spec.hard_size(7), 8);
        assert_eq!(spec.hard_size(10), 32);
        assert_eq!(spec.cut_size(10), 4);
    }

    #[test]
    fn base_instance_is_a_clique_behind_a_thin_cut() {
        for (k, d0) in [(4u32, 2u32), (4, 3), (8, 2)] {
            let inst = build_hard_instance(k, d0, d0, tau(1, k as u64)).unwrap();
            assert_eq!(inst.hard.len(), k as usize);
            assert_eq!(inst.cut_edges().len(), k as usize);
            for &v in &inst.hard {
                // k−1 clique edges plus the single matching edge out
                assert_eq!(inst.live_degree(v), k as u64);
            }
        }
    }

    #[test]
    fn deeper_instances_double_the_hard_set() {
        for (d, s) in [(4u32, 4u64), (5, 4), (6, 8), (7, 8)] {
            let inst = build_hard_instance(4, d, 4, tau(1, 4)).unwrap();
            assert_eq!(inst.hard.len() as u64, s, "dimension {d}");
            assert_eq!(inst.cut_edges().len(), 4, "dimension {d}");
        }
    }

    #[test]
    fn demand_saturates_hard_degrees_and_respects_budgets() {
        let inst = build_hard_instance(4, 6, 4, tau(1, 4)).unwrap();
        let demand = inst.hard_demand().unwrap();
        let mut load: BTreeMap<Vertex, u64> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for p in &demand.pairs {
            assert!(inst.hard.contains(&p.a) && !inst.hard.contains(&p.b));
            *load.entry(p.a).or_insert(0) += 1;
            *load.entry(p.b).or_insert(0) += 1;
            assert!(ids.insert(p.id));
        }
        for &v in &inst.hard {
            assert_eq!(load[&v], inst.live_degree(v));
        }
        for (&v, &l) in &load {
            assert!(l <= inst.live_degree(v), "{} overloaded", inst.g.uni.label(v));
        }
        assert_eq!(demand.crossing, demand.pairs.len() as u64);
    }

    #[test]
    fn cut_ratio_certifies_the_congestion_floor() {
        // hard degrees: base clique k−1+1, plus one matching edge up per stack
        let expect = [(4u32, 16u64, 4u64), (6, 36, 4), (8, 84, 4)];
        for (d, crossing, cut) in expect {
            let inst = build_hard_instance(4, d, 4, tau(1, 4)).unwrap();
            let demand = inst.hard_demand().unwrap();
            assert_eq!((demand.crossing, demand.cut), (crossing, cut), "dimension {d}");
            let (num, den) = inst.promised_floor();
            assert!(demand.ratio_at_least(num, den), "dimension {d}");
        }
    }

    #[test]
    fn congestion_floor_doubles_every_two_dimensions() {
        let ratios: Vec<(u64, u64)> = [4u32, 6, 8]
            .iter()
            .map(|&d| {
                let demand =
                    build_hard_instance(4, d, 4, tau(1, 4)).unwrap().hard_demand().unwrap();
                demand.floor()
            })
            .collect();
        for w in ratios.windows(2) {
            let ((c0, cut0), (c2, cut2)) = (w[0], w[1]);
            // 3/2 ≤ (c2/cut2)/(c0/cut0) ≤ 5/2 in exact arithmetic
            assert!(2 * c2 * cut0 >= 3 * c0 * cut2);
            assert!(2 * c2 * cut0 <= 5 * c0 * cut2);
        }
    }

    #[test]
    fn crossing_requirement_is_met_exactly_at_the_boundary() {
        // the padded level needs 9·k′·|bad| ≤ 10·crossing; k=9, d0=3 hits equality
        assert!(build_hard_instance(9, 4, 3, tau(1, 9)).is_ok());
        let err = build_hard_instance(8, 4, 3, tau(1, 8)).err().unwrap();
        assert!(matches!(err, Error::Precondition(_)), "{err}");
        assert!(err.to_string().contains("invalid remnant"), "{err}");
    }

    #[test]
    fn shallow_bases_cannot_pad_and_are_refused() {
        let err = build_hard_instance(4, 3, 2, tau(1, 4)).err().unwrap();
        assert!(matches!(err, Error::Precondition(_)), "{err}");
        // a looser tolerance keeps every child noncritical, lifting the requirement
        assert!(build_hard_instance(4, 3, 2, tau(1, 2)).is_ok());
    }

    #[test]
    fn malformed_parameters_are_refused() {
        for (k, d, d0, t) in [(1u32, 2u32, 2u32, tau(1, 2)), (4, 1, 1, tau(1, 4)), (4, 3, 4, tau(1, 4)), (4, 4, 4, tau(1, 8))] {
            let err = HardFamilySpec::new(k, d, d0, t).err().unwrap();
            assert!(matches!(err, Error::Precondition(_)), "{err}");
        }
    }

    #[test]
    fn the_family_sweeps_clean_over_small_shapes() {
        for k in [2u32, 3, 4] {
            for d0 in [2u32, 3, 4] {
                for d in d0..=d0 + 3 {
                    if (k as u64).pow(d) > 4096 {
                        continue;
                    }
                    match build_hard_instance(k, d, d0, tau(1, k as u64)) {
                        Ok(inst) => {
                            assert_eq!(inst.hard.len() as u64, inst.spec.hard_size(d));
                            assert_eq!(inst.cut_edges().len() as u64, inst.spec.cut_size(d));
                            let demand = inst.hard_demand().unwrap();
                            let (num, den) = inst.promised_floor();
                            assert!(demand.ratio_at_least(num, den), "k={k} d0={d0} d={d}");
                        }
                        Err(Error::Precondition(_)) => {}
                        Err(other) => panic!("k={k} d0={d0} d={d}: {other}"),
                    }
                }
            }
        }
    }

    #[test]
    fn removed_and_live_partition_the_cube() {
        let inst = build_hard_instance(4, 5, 4, tau(1, 4)).unwrap();
        let removed = inst.removed().count() as u64;
        assert_eq!(removed + inst.trie.len(), inst.g.uni.n());
        assert!(inst.removed().all(|v| !inst.trie.contains(v)));
    }
}
