use std::collections::BTreeSet;

use proptest::prelude::*;
use taemu::greedy::*;

/// Reachability by repeated edge-list scans over a pruned copy.
pub fn oracle_reachable(g: &Icfg, implemented: &BTreeSet<String>, universe: &BTreeSet<String>) -> u32 {
    let alive: Vec<bool> = g
        .blocks
        .iter()
        .map(|b| !b.calls.iter().any(|c| universe.contains(c) && !implemented.contains(c)))
        .collect();
    if !alive[g.root] {
        return 0;
    }
    let mut reached = vec![false; g.blocks.len()];
    reached[g.root] = true;
    loop {
        let mut changed = false;
        for &(s, d) in &g.edges {
            if reached[s] && alive[d] && !reached[d] {
                reached[d] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (0..g.blocks.len()).filter(|&i| reached[i] && !g.blocks[i].synthetic).count() as u32
}

pub const NAMES: [&str; 10] = ["ut_a", "ut_b", "ut_c", "ut_d", "ut_e", "ut_f", "ut_g", "ut_h", "TEE_Malloc", "memcpy"];

/// Random ICFG text: blocks, per-block call masks, edges and entries.
pub fn icfg_text() -> impl Strategy<Value = String> {
    (1usize..=40, 0usize..=8, 0.0f64..0.3).prop_flat_map(|(n, apis, density)| {
        let calls = proptest::collection::vec(proptest::collection::vec(0..apis.max(1) + 2, 0..3), n);
        let edges = proptest::collection::vec((0..n, 0..n, 0.0f64..1.0), 0..n * 3);
        let entries = proptest::collection::vec(0..n, 1..4);
        (Just(apis), Just(density), calls, edges, entries)
    })
    .prop_map(|(apis, density, calls, edges, entries)| {
        let mut t = String::from("TA rand\n");
        let mut seen = BTreeSet::new();
        for e in entries {
            if seen.insert(e) {
                t += &format!("ENTRY b{e} TA_InvokeCommandEntryPoint\n");
            }
        }
        for (i, cs) in calls.iter().enumerate() {
            let names: Vec<&str> = cs
                .iter()
                .map(|&c| if c < apis { NAMES[c] } else { NAMES[8 + c % 2] })
                .collect();
            if names.is_empty() {
                t += &format!("BLOCK b{i}\n");
            } else {
                t += &format!("BLOCK b{i} CALLS {}\n", names.join(","));
            }
        }
        for (s, d, p) in edges {
            if p < density * 3.0 {
                t += &format!("EDGE b{s} b{d}\n");
            }
        }
        t
    })
}

/// Checks every greedy step against an exhaustive argmax over the oracle.
pub fn check_greedy(g: &Icfg) -> Result<(), TestCaseError> {
    let before = g.clone();
    let u = ApiUniverse::of(g).tee;
    let r = greedy_rank(g, &u);
    prop_assert_eq!(g, &before);
    prop_assert_eq!(r.steps.len(), u.len());
    let mut implemented = BTreeSet::new();
    let mut current = oracle_reachable(g, &implemented, &u);
    prop_assert_eq!(r.baseline, current);
    for step in &r.steps {
        let mut best: Option<(String, u32)> = None;
        for a in u.difference(&implemented) {
            let mut with = implemented.clone();
            with.insert(a.clone());
            let v = oracle_reachable(g, &with, &u);
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((a.clone(), v));
            }
        }
        let (api, v) = best.unwrap();
        prop_assert_eq!(&step.api, &api);
        prop_assert_eq!(step.gain, v - current);
        prop_assert_eq!(step.cumulative, v);
        prop_assert!(v >= current);
        implemented.insert(api);
        current = v;
    }
    prop_assert_eq!(current, oracle_reachable(g, &u, &u));
    Ok(())
}

/// Checks reachability for `pick`-selected implemented sets and the full set.
pub fn check_reachability(g: &Icfg, pick: &[bool]) -> Result<(), TestCaseError> {
    let u = ApiUniverse::of(g).tee;
    let implemented: BTreeSet<String> = u.iter().zip(pick).filter(|(_, p)| **p).map(|(a, _)| a.clone()).collect();
    prop_assert_eq!(reachable_blocks(g, &implemented, &u), oracle_reachable(g, &implemented, &u));
    prop_assert_eq!(reachable_blocks(g, &u, &u), oracle_reachable(g, &u, &u));
    Ok(())
}
