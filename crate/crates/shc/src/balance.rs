use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub type ClientId = u64;
pub type BucketId = u64;

/// Clients reassigned by one update. `assigned` are clients that gained a
/// (new) bucket, `unassigned` those that lost one; `old_bucket` maps each
/// unassigned client to the bucket it sat in before the update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recourse<C = ClientId> {
    pub assigned: BTreeSet<C>,
    pub unassigned: BTreeSet<C>,
    pub old_bucket: BTreeMap<C, BucketId>,
}

impl<C> Default for Recourse<C> {
    fn default() -> Self {
        Recourse {
            assigned: BTreeSet::new(),
            unassigned: BTreeSet::new(),
            old_bucket: BTreeMap::new(),
        }
    }
}

impl<C: Ord> Recourse<C> {
    /// |assigned| + |unassigned|, the quantity the update bound constrains.
    pub fn size(&self) -> u64 {
        (self.assigned.len() + self.unassigned.len()) as u64
    }
}

/// Assigns clients to buckets so every bucket holds floor(|I|/|E|) or
/// ceil(|I|/|E|) clients, with low per-update reassignment churn.
#[derive(Clone, Debug)]
pub struct LoadBalancer<C = ClientId> {
    target: u64,
    low: BTreeSet<BucketId>,
    high: BTreeSet<BucketId>,
    bucket_of: BTreeMap<C, BucketId>,
    members: BTreeMap<BucketId, BTreeSet<C>>,
}

impl<C> Default for LoadBalancer<C> {
    fn default() -> Self {
        LoadBalancer {
            target: 0,
            low: BTreeSet::new(),
            high: BTreeSet::new(),
            bucket_of: BTreeMap::new(),
            members: BTreeMap::new(),
        }
    }
}

impl<C: Ord + Copy + std::fmt::Debug> LoadBalancer<C> {
    pub fn new() -> LoadBalancer<C> {
        LoadBalancer::default()
    }

    pub fn client_count(&self) -> u64 {
        self.bucket_of.len() as u64
    }

    pub fn bucket_count(&self) -> u64 {
        self.members.len() as u64
    }

    /// Current common load floor.
    pub fn target_load(&self) -> u64 {
        self.target
    }

    pub fn bucket_of(&self, client: C) -> Option<BucketId> {
        self.bucket_of.get(&client).copied()
    }

    pub fn clients_of(&self, bucket: BucketId) -> Option<&BTreeSet<C>> {
        self.members.get(&bucket)
    }

    pub fn buckets(&self) -> impl Iterator<Item = BucketId> + '_ {
        self.members.keys().copied()
    }

    pub fn clients(&self) -> impl Iterator<Item = C> + '_ {
        self.bucket_of.keys().copied()
    }

    /// Recourse bound for an update, computed from pre-update counts:
    /// |I⁺| + 3|I⁻| + 2 ceil(|I|/|E|) (|E⁻| + |E⁺|).
    pub fn recourse_bound(&self, adds: u64, removes: u64, new_buckets: u64, del_buckets: u64) -> u64 {
        let ratio = if self.members.is_empty() {
            0
        } else {
            self.client_count().div_ceil(self.bucket_count())
        };
        adds + 3 * removes + 2 * ratio * (del_buckets + new_buckets)
    }

    /// Applies client adds/removes and bucket adds/removes, then restores the
    /// floor/ceil load invariant while touching as few clients as possible.
    pub fn update(
        &mut self,
        adds: &BTreeSet<C>,
        removes: &BTreeSet<C>,
        new_buckets: &BTreeSet<BucketId>,
        del_buckets: &BTreeSet<BucketId>,
    ) -> Result<Recourse<C>> {
        for &e in del_buckets {
            if !self.members.contains_key(&e) {
                return Err(Error::UnknownId(format!("bucket {e} is not present")));
            }
        }
        for &e in new_buckets {
            if self.members.contains_key(&e) && !del_buckets.contains(&e) {
                return Err(Error::Precondition(format!("bucket {e} already exists")));
            }
        }
        for &i in removes {
            if !self.bucket_of.contains_key(&i) {
                return Err(Error::UnknownId(format!("client {i:?} is not present")));
            }
        }
        for &i in adds {
            if self.bucket_of.contains_key(&i) && !removes.contains(&i) {
                return Err(Error::Precondition(format!("client {i:?} already exists")));
            }
        }
        let client_total = self.bucket_of.len() - removes.len() + adds.len();
        let bucket_total = self.members.len() - del_buckets.len() + new_buckets.len();
        if bucket_total == 0 && client_total > 0 {
            return Err(Error::Precondition(
                "clients remain but every bucket was removed".into(),
            ));
        }
        let new_target = client_total.checked_div(bucket_total).unwrap_or(0) as u64;

        let mut pool: BTreeSet<C> = adds.clone();
        let mut fix: BTreeSet<BucketId> = new_buckets.clone();
        let mut out = Recourse::default();

        // 1. Drop removed buckets; their surviving clients rejoin the pool.
        for &e in del_buckets {
            for i in self.members.remove(&e).unwrap() {
                out.unassigned.insert(i);
                out.old_bucket.insert(i, e);
                self.bucket_of.remove(&i);
                if !removes.contains(&i) {
                    pool.insert(i);
                }
            }
        }

        // 2. New buckets start empty.
        for &e in new_buckets {
            self.members.insert(e, BTreeSet::new());
        }

        // 3. Detach removed clients; their buckets need refilling later.
        for &i in removes {
            let Some(e) = self.bucket_of.remove(&i) else { continue };
            self.members.get_mut(&e).unwrap().remove(&i);
            out.unassigned.insert(i);
            out.old_bucket.insert(i, e);
            fix.insert(e);
        }

        // 4. Retire low/high under the possibly shifted target load.
        for e in fix.iter().chain(del_buckets.iter()) {
            self.low.remove(e);
            self.high.remove(e);
        }
        if new_target == self.target + 1 {
            fix.extend(std::mem::take(&mut self.low));
            self.low = std::mem::take(&mut self.high);
        } else if new_target + 1 == self.target {
            fix.extend(std::mem::take(&mut self.high));
            self.high = std::mem::take(&mut self.low);
        } else if new_target.abs_diff(self.target) >= 2 {
            fix.extend(std::mem::take(&mut self.low));
            fix.extend(std::mem::take(&mut self.high));
        }

        // 5. Trim overfull buckets down to target+1 and settle them as high.
        for e in fix.clone() {
            let m = self.members.get_mut(&e).unwrap();
            if m.len() as u64 > new_target {
                let trim = m.len() as u64 - (new_target + 1);
                for _ in 0..trim {
                    let i = m.pop_first().unwrap();
                    self.bucket_of.remove(&i);
                    pool.insert(i);
                    out.unassigned.insert(i);
                    out.old_bucket.insert(i, e);
                }
                self.high.insert(e);
                fix.remove(&e);
            }
        }

        // 6. If the pool cannot fill the remaining buckets to the target,
        // pull one client each from enough high buckets.
        let tot_need: u64 = fix.iter().map(|e| new_target - self.members[e].len() as u64).sum();
        let deficit = tot_need.saturating_sub(pool.len() as u64);
        debug_assert!(deficit <= self.high.len() as u64);
        for _ in 0..deficit {
            let e = self.high.pop_first().unwrap();
            let i = self.members.get_mut(&e).unwrap().pop_first().unwrap();
            self.bucket_of.remove(&i);
            pool.insert(i);
            out.unassigned.insert(i);
            out.old_bucket.insert(i, e);
            self.low.insert(e);
        }

        out.assigned = pool.clone();

        // 7. Fill every remaining bucket to exactly the target.
        for e in std::mem::take(&mut fix) {
            let m = self.members.get_mut(&e).unwrap();
            while (m.len() as u64) < new_target {
                let i = pool.pop_first().unwrap();
                m.insert(i);
                self.bucket_of.insert(i, e);
            }
            self.low.insert(e);
        }

        // 8. Distribute leftovers one per low bucket.
        while let Some(i) = pool.pop_first() {
            let e = self.low.pop_first().unwrap();
            self.members.get_mut(&e).unwrap().insert(i);
            self.bucket_of.insert(i, e);
            self.high.insert(e);
        }

        self.target = new_target;
        Ok(out)
    }

    /// Full structural audit; used by tests after every fuzz step.
    pub fn check_invariants(&self) -> Result<()> {
        let clients = self.bucket_of.len() as u64;
        let buckets = self.members.len() as u64;
        let fail = |msg: String| Err(Error::Invariant(msg));
        if buckets == 0 {
            if clients > 0 || self.target != 0 || !self.low.is_empty() || !self.high.is_empty() {
                return fail("nonempty state with no buckets".into());
            }
            return Ok(());
        }
        if self.target != clients / buckets {
            return fail(format!("target {} != {clients}/{buckets}", self.target));
        }
        if self.high.len() as u64 != clients % buckets {
            return fail(format!("|high| {} != {clients} mod {buckets}", self.high.len()));
        }
        if self.low.len() + self.high.len() != self.members.len()
            || self.low.intersection(&self.high).next().is_some()
        {
            return fail("low/high do not partition the buckets".into());
        }
        let mut seen = 0u64;
        for (&e, m) in &self.members {
            let want = if self.low.contains(&e) {
                self.target
            } else if self.high.contains(&e) {
                self.target + 1
            } else {
                return fail(format!("bucket {e} in neither low nor high"));
            };
            if m.len() as u64 != want {
                return fail(format!("bucket {e} holds {} clients, want {want}", m.len()));
            }
            for &i in m {
                if self.bucket_of.get(&i) != Some(&e) {
                    return fail(format!("client {i:?} in bucket {e} but mapped elsewhere"));
                }
                seen += 1;
            }
        }
        if seen != clients {
            return fail(format!("{seen} assigned clients but {clients} mapped"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn set(ids: &[u64]) -> BTreeSet<u64> {
        ids.iter().copied().collect()
    }

    #[test]
    fn fills_floor_and_ceil_from_empty() {
        let mut lb = LoadBalancer::new();
        let r = lb.update(&set(&[1, 2, 3]), &set(&[]), &set(&[10, 20]), &set(&[])).unwrap();
        lb.check_invariants().unwrap();
        assert_eq!(lb.target_load(), 1);
        assert_eq!(r.assigned, set(&[1, 2, 3]));
        assert!(r.unassigned.is_empty());
        let loads: Vec<usize> =
            lb.buckets().map(|e| lb.clients_of(e).unwrap().len()).collect();
        assert_eq!(loads.iter().sum::<usize>(), 3);
        assert!(loads.iter().all(|&l| l == 1 || l == 2));
        assert_eq!(r.size(), 3);
        assert!(r.size() <= LoadBalancer::<ClientId>::new().recourse_bound(3, 0, 2, 0));
    }

    #[test]
    fn removed_bucket_spills_clients_to_survivor() {
        let mut lb = LoadBalancer::new();
        lb.update(&set(&[1, 2, 3]), &set(&[]), &set(&[10, 20]), &set(&[])).unwrap();
        let heavy = lb
            .buckets()
            .find(|&e| lb.clients_of(e).unwrap().len() == 2)
            .unwrap();
        let survivor = lb.buckets().find(|&e| e != heavy).unwrap();
        let bound = lb.recourse_bound(0, 0, 0, 1);
        let r = lb.update(&set(&[]), &set(&[]), &set(&[]), &set(&[heavy])).unwrap();
        lb.check_invariants().unwrap();
        assert_eq!(lb.target_load(), 3);
        assert_eq!(lb.clients_of(survivor).unwrap().len(), 3);
        assert_eq!(r.assigned.len(), 2);
        assert_eq!(r.unassigned.len(), 2);
        assert!(r.old_bucket.values().all(|&e| e == heavy));
        assert_eq!(bound, 4);
        assert!(r.size() <= bound);
    }

    #[test]
    fn empty_update_is_identity() {
        let mut lb = LoadBalancer::new();
        lb.update(&set(&[1, 2, 3]), &set(&[]), &set(&[10, 20]), &set(&[])).unwrap();
        let before: Vec<(u64, Option<u64>)> =
            lb.clients().map(|i| (i, lb.bucket_of(i))).collect();
        let r = lb.update(&set(&[]), &set(&[]), &set(&[]), &set(&[])).unwrap();
        assert_eq!(r, Recourse::default());
        let after: Vec<(u64, Option<u64>)> =
            lb.clients().map(|i| (i, lb.bucket_of(i))).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut lb = LoadBalancer::new();
        lb.update(&set(&[1]), &set(&[]), &set(&[10]), &set(&[])).unwrap();
        assert!(lb.update(&set(&[]), &set(&[2]), &set(&[]), &set(&[])).is_err());
        assert!(lb.update(&set(&[]), &set(&[]), &set(&[]), &set(&[99])).is_err());
        assert!(lb.update(&set(&[1]), &set(&[]), &set(&[]), &set(&[])).is_err());
        assert!(lb.update(&set(&[]), &set(&[]), &set(&[10]), &set(&[])).is_err());
        assert!(lb.update(&set(&[]), &set(&[]), &set(&[]), &set(&[10])).is_err());
        lb.check_invariants().unwrap();
        assert_eq!(lb.client_count(), 1);
    }

    #[test]
    fn remove_and_readd_same_client_in_one_update() {
        let mut lb = LoadBalancer::new();
        lb.update(&set(&[1, 2]), &set(&[]), &set(&[10, 20]), &set(&[])).unwrap();
        let r = lb.update(&set(&[1]), &set(&[1]), &set(&[]), &set(&[])).unwrap();
        lb.check_invariants().unwrap();
        assert_eq!(lb.client_count(), 2);
        assert!(r.assigned.contains(&1) && r.unassigned.contains(&1));
    }

    #[test]
    fn fuzz_preserves_invariants_and_recourse() {
        let mut lb = LoadBalancer::new();
        let mut rng = SplitRng::seeded(99);
        let mut clients: BTreeSet<u64> = BTreeSet::new();
        let mut buckets: BTreeSet<u64> = BTreeSet::new();
        let mut next_client = 0u64;
        let mut next_bucket = 1_000_000u64;
        for step in 0..20_000u32 {
            let mut adds = BTreeSet::new();
            let mut removes = BTreeSet::new();
            let mut newb = BTreeSet::new();
            let mut delb = BTreeSet::new();
            // Rates tilt toward shrinking once the population is large, so
            // the state hovers at a size where per-step audits stay cheap.
            let client_adds = if clients.len() < 120 { rng.below(4) } else { rng.below(2) };
            for _ in 0..client_adds {
                adds.insert(next_client);
                next_client += 1;
            }
            let live: Vec<u64> = clients.iter().copied().collect();
            for _ in 0..rng.below(4).min(live.len() as u64) {
                removes.insert(live[rng.below(live.len() as u64) as usize]);
            }
            let bucket_adds = if buckets.len() < 12 { rng.below(3) } else { rng.below(2) };
            for _ in 0..bucket_adds {
                newb.insert(next_bucket);
                next_bucket += 1;
            }
            let live_b: Vec<u64> = buckets.iter().copied().collect();
            for _ in 0..rng.below(3).min(live_b.len() as u64) {
                delb.insert(live_b[rng.below(live_b.len() as u64) as usize]);
            }
            // Keep the state legal: clients need at least one bucket.
            let nb = buckets.len() - delb.len() + newb.len();
            let nc = clients.len() - removes.len() + adds.len();
            if nb == 0 && nc > 0 {
                newb.insert(next_bucket);
                next_bucket += 1;
            }
            let bound = lb.recourse_bound(
                adds.len() as u64,
                removes.len() as u64,
                newb.len() as u64,
                delb.len() as u64,
            );
            let r = lb.update(&adds, &removes, &newb, &delb).unwrap();
            lb.check_invariants()
                .unwrap_or_else(|e| panic!("step {step}: {e}"));
            assert!(r.size() <= bound, "step {step}: recourse {} > {bound}", r.size());
            assert!(adds.is_subset(&r.assigned));
            assert!(removes.is_subset(&r.unassigned));
            assert_eq!(
                r.old_bucket.keys().copied().collect::<BTreeSet<_>>(),
                r.unassigned
            );
            for i in &removes {
                clients.remove(i);
            }
            clients.extend(adds.iter());
            for e in &delb {
                buckets.remove(e);
            }
            buckets.extend(newb.iter());
            assert_eq!(lb.clients().collect::<BTreeSet<_>>(), clients);
            assert_eq!(lb.buckets().collect::<BTreeSet<_>>(), buckets);
        }
    }
}
