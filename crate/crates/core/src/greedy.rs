//! Ranking of TEE-specific APIs by how many ICFG blocks implementing them
//! makes reachable.
//!
//! A block that calls an unimplemented TEE-specific API is treated as a
//! dead end: it and its edges are dropped before counting what the root
//! still reaches. Every evaluation prunes a fresh view of the pristine
//! graph. Synthetic roots are never counted.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::taelf::Entrypoint;
use crate::vtee::registry::{classify, ApiCategory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IcfgError {
    #[error("icfg line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("icfg line {line}: edge references undeclared block `{block}`")]
    DanglingEdge { line: usize, block: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: String,
    pub ta: String,
    pub calls: Vec<String>,
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryBlock {
    pub ta: String,
    pub entrypoint: String,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Icfg {
    pub root: usize,
    pub blocks: Vec<Block>,
    pub edges: Vec<(usize, usize)>,
    pub entries: Vec<EntryBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeLevel {
    Tee,
    Global,
}

fn synthetic(name: &str) -> Block {
    Block {
        id: name.to_string(),
        ta: String::new(),
        calls: Vec::new(),
        synthetic: true,
    }
}

impl Icfg {
    /// Blocks that count towards reachability.
    pub fn countable(&self) -> usize {
        self.blocks.iter().filter(|b| !b.synthetic).count()
    }

    pub fn block_index(&self, ta: &str, id: &str) -> Option<usize> {
        self.blocks.iter().position(|b| !b.synthetic && b.ta == ta && b.id == id)
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.blocks.len()];
        for &(s, d) in &self.edges {
            adj[s].push(d);
        }
        adj
    }

    /// Every API name called anywhere in the graph.
    pub fn apis(&self) -> BTreeSet<String> {
        self.blocks.iter().flat_map(|b| b.calls.iter().cloned()).collect()
    }

    /// Appends `other`, returning the index offset of its blocks.
    fn absorb(&mut self, other: &Icfg) -> usize {
        let off = self.blocks.len();
        self.blocks.extend(other.blocks.iter().cloned());
        self.edges.extend(other.edges.iter().map(|(s, d)| (s + off, d + off)));
        self.entries.extend(other.entries.iter().map(|e| EntryBlock {
            block: e.block + off,
            ..e.clone()
        }));
        off
    }
}

/// API names split by category. Only `tee` takes part in ranking.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApiUniverse {
    pub gp: BTreeSet<String>,
    pub libc: BTreeSet<String>,
    pub tee: BTreeSet<String>,
}

impl ApiUniverse {
    pub fn of(g: &Icfg) -> ApiUniverse {
        let mut u = ApiUniverse::default();
        for name in g.apis() {
            match classify(&name) {
                ApiCategory::Gp => u.gp.insert(name),
                ApiCategory::Libc => u.libc.insert(name),
                ApiCategory::TeeSpecific => u.tee.insert(name),
            };
        }
        u
    }
}

/// Parses an ICFG file into one graph per `TA` section. Each graph's root
/// is synthetic and has an edge to every `ENTRY` block.
pub fn parse_icfg(text: &str) -> Result<Vec<Icfg>, IcfgError> {
    struct Section {
        ta: String,
        ids: BTreeMap<String, usize>,
        blocks: Vec<Block>,
        edges: Vec<(usize, String, String)>,
        entries: Vec<(usize, String, String)>,
    }

    fn finish(s: Section) -> Result<Icfg, IcfgError> {
        let mut blocks = vec![synthetic(&format!("{}:root", s.ta))];
        blocks.extend(s.blocks);
        let find = |line: usize, id: &str| {
            s.ids
                .get(id)
                .map(|i| i + 1)
                .ok_or_else(|| IcfgError::DanglingEdge {
                    line,
                    block: id.to_string(),
                })
        };
        let mut edges = Vec::new();
        for (line, a, b) in &s.edges {
            edges.push((find(*line, a)?, find(*line, b)?));
        }
        let mut entries = Vec::new();
        for (line, block, ep) in &s.entries {
            let b = find(*line, block)?;
            edges.push((0, b));
            entries.push(EntryBlock {
                ta: s.ta.clone(),
                entrypoint: ep.clone(),
                block: b,
            });
        }
        Ok(Icfg {
            root: 0,
            blocks,
            edges,
            entries,
        })
    }

    let mut out = Vec::new();
    let mut cur: Option<Section> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| IcfgError::Parse { line, msg };
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let words: Vec<&str> = l.split_whitespace().collect();
        if words[0] == "TA" {
            let [_, id] = words[..] else {
                return Err(err("expected `TA <id>`".into()));
            };
            if let Some(s) = cur.take() {
                out.push(finish(s)?);
            }
            cur = Some(Section {
                ta: id.to_string(),
                ids: BTreeMap::new(),
                blocks: Vec::new(),
                edges: Vec::new(),
                entries: Vec::new(),
            });
            continue;
        }
        let Some(s) = cur.as_mut() else {
            return Err(err("expected `TA <id>` before other lines".into()));
        };
        match words[..] {
            ["BLOCK", id, ref rest @ ..] => {
                let calls = match rest {
                    [] => Vec::new(),
                    ["CALLS", list] => list.split(',').filter(|c| !c.is_empty()).map(String::from).collect(),
                    _ => return Err(err("expected `BLOCK <id> [CALLS a,b,c]`".into())),
                };
                if s.ids.insert(id.to_string(), s.blocks.len()).is_some() {
                    return Err(err(format!("duplicate block `{id}`")));
                }
                s.blocks.push(Block {
                    id: id.to_string(),
                    ta: s.ta.clone(),
                    calls,
                    synthetic: false,
                });
            }
            ["EDGE", a, b] => s.edges.push((line, a.to_string(), b.to_string())),
            ["ENTRY", block, ep] => {
                if Entrypoint::from_name(ep).is_none() {
                    return Err(err(format!("unknown entrypoint `{ep}`")));
                }
                s.entries.push((line, block.to_string(), ep.to_string()));
            }
            _ => return Err(err(format!("unrecognised line `{l}`"))),
        }
    }
    if let Some(s) = cur {
        out.push(finish(s)?);
    }
    Ok(out)
}

/// Combines graphs under a fresh synthetic root. At TEE level the root
/// links to every entry block and the per-TA roots are dropped; at global
/// level it links to each input's root.
pub fn merge(graphs: &[Icfg], level: MergeLevel) -> Icfg {
    let name = match level {
        MergeLevel::Tee => "tee:root",
        MergeLevel::Global => "global:root",
    };
    let mut g = Icfg {
        root: 0,
        blocks: vec![synthetic(name)],
        edges: Vec::new(),
        entries: Vec::new(),
    };
    for part in graphs {
        match level {
            MergeLevel::Global => {
                let off = g.absorb(part);
                g.edges.push((0, part.root + off));
            }
            MergeLevel::Tee => {
                // Copy without the part's root; its edges are replaced by ours.
                let keep: Vec<usize> = (0..part.blocks.len()).filter(|&i| i != part.root).collect();
                let mut map = vec![usize::MAX; part.blocks.len()];
                for (n, &i) in keep.iter().enumerate() {
                    map[i] = g.blocks.len() + n;
                }
                g.blocks.extend(keep.iter().map(|&i| part.blocks[i].clone()));
                g.edges.extend(
                    part.edges
                        .iter()
                        .filter(|(s, d)| *s != part.root && *d != part.root)
                        .map(|&(s, d)| (map[s], map[d])),
                );
                for e in &part.entries {
                    g.edges.push((0, map[e.block]));
                    g.entries.push(EntryBlock {
                        block: map[e.block],
                        ..e.clone()
                    });
                }
            }
        }
    }
    g
}

/// Countable blocks reachable from the root once every block calling an
/// API in `universe` but not in `implemented` is removed.
pub fn reachable_blocks(g: &Icfg, implemented: &BTreeSet<String>, universe: &BTreeSet<String>) -> u32 {
    reachable_with(g, &g.adjacency(), implemented, universe)
}

fn reachable_with(g: &Icfg, adj: &[Vec<usize>], implemented: &BTreeSet<String>, universe: &BTreeSet<String>) -> u32 {
    let blocked = |b: usize| {
        g.blocks[b]
            .calls
            .iter()
            .any(|c| universe.contains(c) && !implemented.contains(c))
    };
    if blocked(g.root) {
        return 0;
    }
    let mut seen = vec![false; g.blocks.len()];
    let mut queue = VecDeque::from([g.root]);
    seen[g.root] = true;
    let mut count = 0;
    while let Some(b) = queue.pop_front() {
        if !g.blocks[b].synthetic {
            count += 1;
        }
        for &n in &adj[b] {
            if !seen[n] && !blocked(n) {
                seen[n] = true;
                queue.push_back(n);
            }
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankStep {
    pub api: String,
    pub gain: u32,
    pub cumulative: u32,
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyResult {
    pub steps: Vec<RankStep>,
    /// Reachable with no TEE-specific API implemented.
    pub baseline: u32,
    /// Countable blocks in the graph.
    pub total: u32,
    /// Number of APIs after which coverage first reaches 90%.
    pub threshold_index_90: Option<usize>,
}

impl GreedyResult {
    pub fn baseline_pct(&self) -> f64 {
        fraction(self.baseline, self.total)
    }
}

fn fraction(n: u32, total: u32) -> f64 {
    if total == 0 {
        0.0
    } else {
        n as f64 / total as f64
    }
}

pub fn greedy_rank(g: &Icfg, universe: &BTreeSet<String>) -> GreedyResult {
    let adj = g.adjacency();
    let total = g.countable() as u32;
    let mut implemented = BTreeSet::new();
    let baseline = reachable_with(g, &adj, &implemented, universe);
    let mut current = baseline;
    let mut steps = Vec::new();

    while implemented.len() < universe.len() {
        let candidates: Vec<&String> = universe.difference(&implemented).collect();
        let scores: Vec<u32> = candidates
            .par_iter()
            .map(|a| {
                let mut with = implemented.clone();
                with.insert((*a).clone());
                reachable_with(g, &adj, &with, universe)
            })
            .collect();
        // Candidates are in name order, so the first maximum wins ties.
        let (best, &score) = scores
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &u32)>, (i, s)| match acc {
                Some((_, m)) if m >= s => acc,
                _ => Some((i, s)),
            })
            .expect("at least one candidate");
        let api = candidates[best].clone();
        implemented.insert(api.clone());
        steps.push(RankStep {
            api,
            gain: score - current,
            cumulative: score,
            pct: fraction(score, total),
        });
        current = score;
    }

    let threshold_index_90 = if fraction(baseline, total) >= 0.9 {
        Some(0)
    } else {
        steps.iter().position(|s| s.pct >= 0.9).map(|i| i + 1)
    };
    GreedyResult {
        steps,
        baseline,
        total,
        threshold_index_90,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Curve,
}

pub fn emit_report(r: &GreedyResult, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("rank,api,gain,cumulative,pct\n");
            for (i, s) in r.steps.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{:.6}", i + 1, s.api, s.gain, s.cumulative, s.pct);
            }
        }
        ReportFormat::Curve => {
            out.push_str("implemented,pct\n");
            let _ = writeln!(out, "0,{:.6}", r.baseline_pct());
            for (i, s) in r.steps.iter().enumerate() {
                let _ = writeln!(out, "{},{:.6}", i + 1, s.pct);
            }
        }
    }
    out
}
