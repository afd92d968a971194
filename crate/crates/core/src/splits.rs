//! Site-level cross-validation schedules.
//!
//! Sites (not pixels) are the unit of assignment, so no site's pixels ever
//! leak between train and evaluation. The schedule is a rotating block
//! design: a seeded permutation splits sites into n_folds equal blocks;
//! fold i tests on block i, validates on block i+1 (mod n_folds), and
//! trains on the rest. Hence every site appears in exactly one test set
//! and exactly one validation set across folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, label, rng_from};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSets {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSchedule {
    folds: Vec<FoldSets>,
}

impl SplitSchedule {
    pub fn from_folds(folds: Vec<FoldSets>) -> SplitSchedule {
        SplitSchedule { folds }
    }

    pub fn folds(&self) -> &[FoldSets] {
        &self.folds
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn fold(&self, i: usize) -> Result<&FoldSets> {
        self.folds
            .get(i)
            .ok_or_else(|| Error::parameter(format!("fold {i} out of range ({} folds)", self.folds.len())))
    }

    /// All distinct site ids mentioned anywhere in the schedule, sorted.
    pub fn site_universe(&self) -> Vec<String> {
        let mut all = BTreeSet::new();
        for f in &self.folds {
            for s in f.train.iter().chain(&f.val).chain(&f.test) {
                all.insert(s.clone());
            }
        }
        all.into_iter().collect()
    }

    /// Serialized form: {"0": {train, val, test}, "1": ...}.
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<String, &FoldSets> = self
            .folds
            .iter()
            .enumerate()
            .map(|(i, f)| (i.to_string(), f))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(json: &str) -> Result<SplitSchedule> {
        let map: BTreeMap<String, FoldSets> = serde_json::from_str(json)?;
        let mut folds = vec![None; map.len()];
        for (k, v) in map {
            let i: usize = k
                .parse()
                .map_err(|_| Error::format(format!("fold key {k:?} is not an index")))?;
            if i >= folds.len() {
                return Err(Error::format(format!(
                    "fold keys must be contiguous from 0, got {i} among {} folds",
                    folds.len()
                )));
            }
            folds[i] = Some(v);
        }
        Ok(SplitSchedule {
            folds: folds.into_iter().map(|f| f.unwrap()).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SplitSchedule> {
        SplitSchedule::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A drawn subset of one fold's training sites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleTrial {
    pub trial: usize,
    pub fold: usize,
    pub k: usize,
    /// Chosen site ids, sorted.
    pub sites: Vec<String>,
    /// The derived seed the draw used; recorded for audit.
    pub seed: u64,
}

/// Builds a schedule for `site_ids` under the rotating block construction.
/// `sizes` (train, val, test) is redundant with n_folds but passed
/// explicitly so misconfigurations fail loudly instead of silently
/// reshaping the experiment.
pub fn generate_schedule(
    site_ids: &[String],
    n_folds: usize,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<SplitSchedule> {
    let n = site_ids.len();
    if n_folds < 3 {
        return Err(Error::parameter(
            "need at least 3 folds so every fold has a nonempty train set",
        ));
    }
    if n == 0 || n % n_folds != 0 {
        return Err(Error::parameter(format!(
            "{n} sites cannot be divided into {n_folds} equal blocks"
        )));
    }
    let block = n / n_folds;
    let expect = (n - 2 * block, block, block);
    if sizes != expect {
        return Err(Error::parameter(format!(
            "sizes {sizes:?} inconsistent with {n} sites in {n_folds} folds; expected {expect:?}"
        )));
    }
    {
        let mut set = BTreeSet::new();
        for id in site_ids {
            if !set.insert(id) {
                return Err(Error::parameter(format!("duplicate site id {id:?}")));
            }
        }
    }

    // canonical order first, so the schedule depends only on the id set
    let mut ids: Vec<String> = site_ids.to_vec();
    ids.sort();
    let mut rng = rng_from(derive_seed(seed, &[label("schedule")]));
    // Fisher-Yates; not SliceRandom::shuffle, to keep the byte stream
    // under this crate's control
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }

    let blocks: Vec<&[String]> = ids.chunks(block).collect();
    let mut folds = Vec::with_capacity(n_folds);
    for i in 0..n_folds {
        let test_b = i;
        let val_b = (i + 1) % n_folds;
        let mut train = Vec::with_capacity(n - 2 * block);
        for (b, chunk) in blocks.iter().enumerate() {
            if b != test_b && b != val_b {
                train.extend(chunk.iter().cloned());
            }
        }
        let mut val: Vec<String> = blocks[val_b].to_vec();
        let mut test: Vec<String> = blocks[test_b].to_vec();
        train.sort();
        val.sort();
        test.sort();
        folds.push(FoldSets { train, val, test });
    }
    Ok(SplitSchedule { folds })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub fold: Option<usize>,
    pub site: Option<String>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rule)?;
        if let Some(fold) = self.fold {
            write!(f, " [fold {fold}]")?;
        }
        if let Some(site) = &self.site {
            write!(f, " [site {site}]")?;
        }
        Ok(())
    }
}

fn violation(fold: Option<usize>, site: Option<&str>, rule: impl Into<String>) -> Violation {
    Violation {
        fold,
        site: site.map(str::to_string),
        rule: rule.into(),
    }
}

/// Checks every schedule invariant and reports all breaches. Never errors:
/// a broken schedule is data, not a fault.
pub fn validate_schedule(schedule: &SplitSchedule) -> Vec<Violation> {
    let mut out = Vec::new();
    let universe = schedule.site_universe();
    let n = universe.len();
    let k = schedule.n_folds();
    if k == 0 {
        out.push(violation(None, None, "schedule has no folds"));
        return out;
    }
    let block_ok = n % k == 0;
    if !block_ok {
        out.push(violation(
            None,
            None,
            format!("{n} sites not divisible into {k} folds"),
        ));
    }
    let block = if block_ok { n / k } else { 0 };

    for (i, f) in schedule.folds().iter().enumerate() {
        // within-fold duplicates and cross-set overlaps
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (set_name, set) in [("train", &f.train), ("val", &f.val), ("test", &f.test)] {
            for s in set {
                if let Some(prev) = seen.insert(s, set_name) {
                    out.push(violation(
                        Some(i),
                        Some(s),
                        format!("site appears in both {prev} and {set_name}"),
                    ));
                }
            }
        }
        // coverage of the universe
        if seen.len() != n {
            for missing in universe.iter().filter(|u| !seen.contains_key(u.as_str())) {
                out.push(violation(Some(i), Some(missing), "site missing from fold"));
            }
        }
        if block_ok {
            if f.test.len() != block {
                out.push(violation(
                    Some(i),
                    None,
                    format!("test set has {} sites, expected {block}", f.test.len()),
                ));
            }
            if f.val.len() != block {
                out.push(violation(
                    Some(i),
                    None,
                    format!("val set has {} sites, expected {block}", f.val.len()),
                ));
            }
        }
    }

    // across folds: exactly one test membership and one val membership
    for (role, pick) in [
        ("test", &|f: &FoldSets| f.test.clone() as Vec<String>),
        ("val", &|f: &FoldSets| f.val.clone()),
    ] as [(&str, &dyn Fn(&FoldSets) -> Vec<String>); 2]
    {
        let mut count: BTreeMap<String, usize> = BTreeMap::new();
        for f in schedule.folds() {
            for s in pick(f) {
                *count.entry(s).or_insert(0) += 1;
            }
        }
        for site in &universe {
            match count.get(site).copied().unwrap_or(0) {
                1 => {}
                0 => out.push(violation(
                    None,
                    Some(site),
                    format!("site never appears in a {role} set"),
                )),
                c => out.push(violation(
                    None,
                    Some(site),
                    format!("site appears in {c} {role} sets, expected 1"),
                )),
            }
        }
    }
    out
}

/// Draws `n_trials` subsets of size `k` from the fold's training sites,
/// uniformly without replacement. The stream is keyed on
/// (seed, fold, k, trial) alone, so every model condition trained on
/// (fold, k, trial) sees the identical subset.
pub fn subsample_train_sites(
    schedule: &SplitSchedule,
    fold: usize,
    k: usize,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<SubsampleTrial>> {
    let f = schedule.fold(fold)?;
    let mut pool: Vec<String> = f.train.clone();
    pool.sort();
    if k == 0 {
        return Err(Error::parameter("subset size k must be at least 1"));
    }
    if k > pool.len() {
        return Err(Error::parameter(format!(
            "k = {k} exceeds the fold's {} training sites",
            pool.len()
        )));
    }
    let mut trials = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let trial_seed = derive_seed(
            seed,
            &[label("subsample"), fold as u64, k as u64, trial as u64],
        );
        let mut rng = rng_from(trial_seed);
        let mut ids = pool.clone();
        // partial Fisher-Yates: first k entries are the draw
        for i in 0..k {
            let j = i + rng.gen_range(0..ids.len() - i);
            ids.swap(i, j);
        }
        let mut sites: Vec<String> = ids[..k].to_vec();
        sites.sort();
        trials.push(SubsampleTrial {
            trial,
            fold,
            k,
            sites,
            seed: trial_seed,
        });
    }
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("site_{i:02}")).collect()
    }

    #[test]
    fn schedule_24_sites_4_folds_is_valid() {
        let s = generate_schedule(&ids(24), 4, (12, 6, 6), 0).unwrap();
        assert_eq!(s.n_folds(), 4);
        for f in s.folds() {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (12, 6, 6));
        }
        assert!(validate_schedule(&s).is_empty());
    }

    #[test]
    fn schedule_8_sites_4_folds() {
        let s = generate_schedule(&ids(8), 4, (4, 2, 2), 3).unwrap();
        assert!(validate_schedule(&s).is_empty());
    }

    #[test]
    fn schedule_rejects_indivisible_and_bad_sizes() {
        match generate_schedule(&ids(10), 4, (6, 2, 2), 0) {
            Err(Error::Parameter(_)) => {}
            other => panic!("expected parameter error, got {other:?}"),
        }
        assert!(generate_schedule(&ids(24), 4, (12, 7, 5), 0).is_err());
        assert!(generate_schedule(&ids(24), 2, (0, 12, 12), 0).is_err());
        let mut dup = ids(24);
        dup[1] = dup[0].clone();
        assert!(generate_schedule(&dup, 4, (12, 6, 6), 0).is_err());
    }

    #[test]
    fn schedule_is_seed_deterministic_and_seed_sensitive() {
        let a = generate_schedule(&ids(24), 4, (12, 6, 6), 7).unwrap();
        let b = generate_schedule(&ids(24), 4, (12, 6, 6), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_schedule(&ids(24), 4, (12, 6, 6), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn schedule_ignores_input_order() {
        let mut shuffled = ids(24);
        shuffled.reverse();
        let a = generate_schedule(&ids(24), 4, (12, 6, 6), 5).unwrap();
        let b = generate_schedule(&shuffled, 4, (12, 6, 6), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validator_catches_duplicate_test_membership() {
        let mut s = generate_schedule(&ids(8), 4, (4, 2, 2), 0).unwrap();
        // plant: site from fold 1's test also into fold 2's test (replacing one)
        let stolen = s.folds[1].test[0].clone();
        let displaced = s.folds[2].test[0].clone();
        s.folds[2].test[0] = stolen.clone();
        let v = validate_schedule(&s);
        assert!(!v.is_empty());
        assert!(
            v.iter()
                .any(|x| x.site.as_deref() == Some(stolen.as_str()) && x.rule.contains("2 test")),
            "expected duplicate-test violation, got {v:?}"
        );
        assert!(v
            .iter()
            .any(|x| x.site.as_deref() == Some(displaced.as_str())));
    }

    #[test]
    fn validator_catches_train_val_overlap() {
        let mut s = generate_schedule(&ids(8), 4, (4, 2, 2), 0).unwrap();
        let leaked = s.folds[2].train[0].clone();
        s.folds[2].val[0] = leaked.clone();
        let v = validate_schedule(&s);
        assert!(v
            .iter()
            .any(|x| x.fold == Some(2)
                && x.site.as_deref() == Some(leaked.as_str())
                && x.rule.contains("both train and val")));
    }

    #[test]
    fn validator_accepts_generated_schedules_across_seeds() {
        for seed in 0..20 {
            let s = generate_schedule(&ids(24), 4, (12, 6, 6), seed).unwrap();
            assert!(validate_schedule(&s).is_empty(), "seed {seed}");
        }
    }

    #[test]
    fn json_roundtrip() {
        let s = generate_schedule(&ids(24), 4, (12, 6, 6), 1).unwrap();
        let json = s.to_json().unwrap();
        let back = SplitSchedule::from_json(&json).unwrap();
        assert_eq!(s, back);
        assert!(SplitSchedule::from_json("{\"0\": {\"train\":[],\"val\":[],\"test\":[]}, \"2\": {\"train\":[],\"val\":[],\"test\":[]}}").is_err());
    }

    #[test]
    fn subsample_full_k_returns_whole_pool() {
        let s = generate_schedule(&ids(24), 4, (12, 6, 6), 0).unwrap();
        let trials = subsample_train_sites(&s, 1, 12, 10, 0).unwrap();
        assert_eq!(trials.len(), 10);
        let mut pool = s.fold(1).unwrap().train.clone();
        pool.sort();
        for t in &trials {
            assert_eq!(t.sites, pool);
        }
    }

    #[test]
    fn subsample_is_deterministic_and_within_pool() {
        let s = generate_schedule(&ids(24), 4, (12, 6, 6), 0).unwrap();
        let a = subsample_train_sites(&s, 2, 3, 10, 7).unwrap();
        let b = subsample_train_sites(&s, 2, 3, 10, 7).unwrap();
        assert_eq!(a, b);
        let f = s.fold(2).unwrap();
        for t in &a {
            assert_eq!(t.sites.len(), 3);
            for site in &t.sites {
                assert!(f.train.contains(site));
                assert!(!f.val.contains(site));
                assert!(!f.test.contains(site));
            }
        }
        // distinct sites within a subset
        for t in subsample_train_sites(&s, 0, 6, 10, 0).unwrap() {
            let set: BTreeSet<_> = t.sites.iter().collect();
            assert_eq!(set.len(), 6);
        }
    }

    #[test]
    fn subsample_rejects_oversized_k() {
        let s = generate_schedule(&ids(24), 4, (12, 6, 6), 0).unwrap();
        assert!(subsample_train_sites(&s, 0, 13, 10, 0).is_err());
        assert!(subsample_train_sites(&s, 0, 0, 10, 0).is_err());
        assert!(subsample_train_sites(&s, 9, 3, 10, 0).is_err());
    }
}
