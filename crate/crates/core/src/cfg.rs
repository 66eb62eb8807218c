//! Control-flow analyses: dominators, post-dominators, loops, reducibility
//! and control dependence.
//!
//! Every analysis is a snapshot of one [`Function`]; any mutation of the
//! function invalidates it and callers recompute.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write;

use thiserror::Error;

use crate::ir::{BlockId, Function, Terminator};

/// Dense view of a function's CFG in layout order.
#[derive(Clone, Debug)]
pub struct Cfg {
    pub ids: Vec<BlockId>,
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
    index: HashMap<BlockId, usize>,
}

impl Cfg {
    pub fn new(f: &Function) -> Self {
        let ids: Vec<BlockId> = f.blocks.iter().map(|b| b.id).collect();
        let index: HashMap<BlockId, usize> =
            ids.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        let mut succs = vec![Vec::new(); ids.len()];
        let mut preds = vec![Vec::new(); ids.len()];
        for (i, b) in f.blocks.iter().enumerate() {
            for s in b.successors() {
                let j = index[&s];
                if !succs[i].contains(&j) {
                    succs[i].push(j);
                    preds[j].push(i);
                }
            }
        }
        Cfg {
            ids,
            succs,
            preds,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn idx(&self, b: BlockId) -> usize {
        self.index[&b]
    }

    pub fn id(&self, i: usize) -> BlockId {
        self.ids[i]
    }

    /// Blocks reachable from the entry.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        if self.is_empty() {
            return seen;
        }
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &s in &self.succs[n] {
                if !seen[s] {
                    seen[s] = true;
                    stack.push(s);
                }
            }
        }
        seen
    }

    /// Reverse postorder from the entry over reachable blocks.
    pub fn rpo(&self) -> Vec<usize> {
        rpo_of(&self.succs, 0)
    }
}

fn rpo_of(succs: &[Vec<usize>], root: usize) -> Vec<usize> {
    let n = succs.len();
    let mut post = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
    seen[root] = true;
    while let Some(top) = stack.last_mut() {
        let (node, i) = *top;
        if i < succs[node].len() {
            top.1 += 1;
            let s = succs[node][i];
            if !seen[s] {
                seen[s] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(node);
            stack.pop();
        }
    }
    post.reverse();
    post
}

/// Iterative dominators (Cooper, Harvey, Kennedy) over an arbitrary graph.
fn iterative_idom(succs: &[Vec<usize>], preds: &[Vec<usize>], root: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let order = rpo_of(succs, root);
    let mut rpo_num = vec![usize::MAX; succs.len()];
    for (i, n) in order.iter().enumerate() {
        rpo_num[*n] = i;
    }
    let mut idom: Vec<Option<usize>> = vec![None; succs.len()];
    idom[root] = Some(root);
    let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
        while a != b {
            while rpo_num[a] > rpo_num[b] {
                a = idom[a].unwrap();
            }
            while rpo_num[b] > rpo_num[a] {
                b = idom[b].unwrap();
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for &n in order.iter().skip(1) {
            let mut new: Option<usize> = None;
            for &p in &preds[n] {
                if idom[p].is_none() {
                    continue;
                }
                new = Some(match new {
                    None => p,
                    Some(cur) => intersect(&idom, p, cur),
                });
            }
            if new.is_some() && idom[n] != new {
                idom[n] = new;
                changed = true;
            }
        }
    }
    (idom, rpo_num)
}

/// Dominator tree over the blocks reachable from the entry.
#[derive(Clone, Debug)]
pub struct DomTree {
    cfg: Cfg,
    idom: Vec<Option<usize>>,
    rpo_num: Vec<usize>,
}

pub fn compute_dom_tree(f: &Function) -> DomTree {
    let cfg = Cfg::new(f);
    let (idom, rpo_num) = iterative_idom(&cfg.succs, &cfg.preds, 0);
    DomTree { cfg, idom, rpo_num }
}

impl DomTree {
    pub fn cfg(&self) -> &Cfg {
        &self.cfg
    }

    pub fn is_reachable(&self, b: BlockId) -> bool {
        self.idom[self.cfg.idx(b)].is_some()
    }

    /// Immediate dominator; the entry maps to itself. `None` if unreachable.
    pub fn idom(&self, b: BlockId) -> Option<BlockId> {
        self.idom[self.cfg.idx(b)].map(|i| self.cfg.id(i))
    }

    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        let (a, mut b) = (self.cfg.idx(a), self.cfg.idx(b));
        if self.idom[b].is_none() || self.idom[a].is_none() {
            return false;
        }
        loop {
            if a == b {
                return true;
            }
            let up = self.idom[b].unwrap();
            if up == b {
                return false;
            }
            b = up;
        }
    }

    pub fn rpo_number(&self, b: BlockId) -> usize {
        self.rpo_num[self.cfg.idx(b)]
    }

    /// Reachable blocks in reverse postorder.
    pub fn rpo(&self) -> Vec<BlockId> {
        let mut v: Vec<usize> = (0..self.cfg.len())
            .filter(|&i| self.idom[i].is_some())
            .collect();
        v.sort_by_key(|&i| self.rpo_num[i]);
        v.into_iter().map(|i| self.cfg.id(i)).collect()
    }

    pub fn children(&self, b: BlockId) -> Vec<BlockId> {
        let bi = self.cfg.idx(b);
        let mut out: Vec<usize> = (0..self.cfg.len())
            .filter(|&i| i != bi && self.idom[i] == Some(bi))
            .collect();
        out.sort_by_key(|&i| self.rpo_num[i]);
        out.into_iter().map(|i| self.cfg.id(i)).collect()
    }

    /// Dominance frontier of every reachable block.
    pub fn frontiers(&self) -> HashMap<BlockId, HashSet<BlockId>> {
        let mut df: HashMap<BlockId, HashSet<BlockId>> = HashMap::new();
        for n in 0..self.cfg.len() {
            if self.idom[n].is_none() || self.cfg.preds[n].len() < 2 {
                continue;
            }
            let Some(nidom) = self.idom[n] else { continue };
            for &p in &self.cfg.preds[n] {
                if self.idom[p].is_none() {
                    continue;
                }
                let mut runner = p;
                while runner != nidom {
                    df.entry(self.cfg.id(runner)).or_default().insert(self.cfg.id(n));
                    let up = self.idom[runner].unwrap();
                    if up == runner {
                        break;
                    }
                    runner = up;
                }
            }
        }
        df
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CfgError {
    #[error("function @{func} has {count} exit blocks; post-dominance needs exactly one")]
    MultipleExits { func: String, count: usize },
}

/// Post-dominator tree. Built either on a single-exit function or with a
/// virtual exit joining every `ret` block.
#[derive(Clone, Debug)]
pub struct PostDomTree {
    cfg: Cfg,
    /// Index `cfg.len()` is the virtual exit when present.
    ipdom: Vec<Option<usize>>,
    virtual_exit: bool,
    exit: usize,
}

pub fn compute_postdom_tree(f: &Function) -> Result<PostDomTree, CfgError> {
    let exits: Vec<&crate::ir::Block> = f
        .blocks
        .iter()
        .filter(|b| matches!(b.term, Terminator::Ret(_)))
        .collect();
    if exits.len() != 1 {
        return Err(CfgError::MultipleExits {
            func: f.name.clone(),
            count: exits.len(),
        });
    }
    Ok(PostDomTree::build(f, false))
}

impl PostDomTree {
    /// Post-dominance on any function: every `ret` block feeds a virtual exit.
    pub fn with_virtual_exit(f: &Function) -> Self {
        PostDomTree::build(f, true)
    }

    fn build(f: &Function, virtual_exit: bool) -> Self {
        let cfg = Cfg::new(f);
        let n = cfg.len();
        let rets: Vec<usize> = (0..n)
            .filter(|&i| matches!(f.blocks[i].term, Terminator::Ret(_)))
            .collect();
        // Reverse graph: successors are CFG predecessors.
        let mut rsucc: Vec<Vec<usize>> = cfg.preds.clone();
        let mut rpred: Vec<Vec<usize>> = cfg.succs.clone();
        let root = if virtual_exit {
            rsucc.push(rets.clone());
            rpred.push(Vec::new());
            for &r in &rets {
                rpred[r].push(n);
            }
            n
        } else {
            rets[0]
        };
        let (ipdom, _) = iterative_idom(&rsucc, &rpred, root);
        PostDomTree {
            cfg,
            ipdom,
            virtual_exit,
            exit: root,
        }
    }

    pub fn cfg(&self) -> &Cfg {
        &self.cfg
    }

    /// The unique exit block, or `None` under a virtual exit.
    pub fn exit(&self) -> Option<BlockId> {
        (!self.virtual_exit).then(|| self.cfg.id(self.exit))
    }

    /// Immediate post-dominator. The exit maps to itself; blocks whose only
    /// post-dominator is the virtual exit (or that cannot reach an exit)
    /// map to `None`.
    pub fn ipdom(&self, b: BlockId) -> Option<BlockId> {
        let i = self.cfg.idx(b);
        match self.ipdom[i] {
            Some(p) if p < self.cfg.len() => Some(self.cfg.id(p)),
            _ => None,
        }
    }

    pub fn post_dominates(&self, a: BlockId, b: BlockId) -> bool {
        let (a, mut b) = (self.cfg.idx(a), self.cfg.idx(b));
        if self.ipdom[b].is_none() {
            return false;
        }
        loop {
            if a == b {
                return true;
            }
            match self.ipdom[b] {
                Some(up) if up != b => b = up,
                _ => return false,
            }
        }
    }

    fn parent(&self, i: usize) -> Option<usize> {
        match self.ipdom[i] {
            Some(p) if p != i => Some(p),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Loop {
    pub header: BlockId,
    pub latches: BTreeSet<BlockId>,
    pub body: HashSet<BlockId>,
    pub preheader: Option<BlockId>,
    /// Blocks outside the loop targeted by an edge from inside.
    pub exits: BTreeSet<BlockId>,
    pub parent: Option<usize>,
    pub depth: usize,
}

impl Loop {
    pub fn contains(&self, b: BlockId) -> bool {
        self.body.contains(&b)
    }

    /// Blocks inside the loop with an edge leaving it.
    pub fn exiting_blocks(&self, f: &Function) -> Vec<BlockId> {
        f.blocks
            .iter()
            .filter(|b| self.body.contains(&b.id))
            .filter(|b| b.successors().iter().any(|s| !self.body.contains(s)))
            .map(|b| b.id)
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoopForest {
    pub loops: Vec<Loop>,
}

impl LoopForest {
    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    pub fn header_of(&self, header: BlockId) -> Option<&Loop> {
        self.loops.iter().find(|l| l.header == header)
    }

    /// The innermost loop containing `b`.
    pub fn innermost(&self, b: BlockId) -> Option<&Loop> {
        self.loops
            .iter()
            .filter(|l| l.contains(b))
            .max_by_key(|l| l.depth)
    }

    pub fn is_header(&self, b: BlockId) -> bool {
        self.loops.iter().any(|l| l.header == b)
    }

    pub fn is_preheader(&self, b: BlockId) -> bool {
        self.loops.iter().any(|l| l.preheader == Some(b))
    }

    pub fn is_latch(&self, b: BlockId) -> bool {
        self.loops.iter().any(|l| l.latches.contains(&b))
    }

    /// Loops ordered innermost first.
    pub fn innermost_first(&self) -> Vec<&Loop> {
        let mut v: Vec<&Loop> = self.loops.iter().collect();
        v.sort_by(|a, b| b.depth.cmp(&a.depth).then(a.header.cmp(&b.header)));
        v
    }
}

pub fn build_loop_forest(f: &Function, d: &DomTree) -> LoopForest {
    let cfg = d.cfg();
    let mut by_header: HashMap<usize, (BTreeSet<usize>, HashSet<usize>)> = HashMap::new();
    for n in 0..cfg.len() {
        if !d.is_reachable(cfg.id(n)) {
            continue;
        }
        for &m in &cfg.succs[n] {
            if d.dominates(cfg.id(m), cfg.id(n)) {
                let entry = by_header.entry(m).or_default();
                entry.0.insert(n);
                entry.1.insert(m);
                let mut stack = vec![n];
                while let Some(x) = stack.pop() {
                    if entry.1.insert(x) || (x == n && n != m) {
                        for &p in &cfg.preds[x] {
                            if !entry.1.contains(&p) && d.is_reachable(cfg.id(p)) {
                                stack.push(p);
                            }
                        }
                    }
                }
            }
        }
    }
    let mut headers: Vec<usize> = by_header.keys().copied().collect();
    headers.sort_by_key(|h| d.rpo_number(cfg.id(*h)));
    let mut loops: Vec<Loop> = headers
        .iter()
        .map(|h| {
            let (latches, body) = &by_header[h];
            let body_ids: HashSet<BlockId> = body.iter().map(|i| cfg.id(*i)).collect();
            let outside: Vec<usize> = cfg.preds[*h]
                .iter()
                .copied()
                .filter(|p| !body.contains(p))
                .collect();
            let preheader = match outside.as_slice() {
                [p] if cfg.succs[*p].len() == 1 => Some(cfg.id(*p)),
                _ => None,
            };
            let mut exits = BTreeSet::new();
            for &b in body {
                for &s in &cfg.succs[b] {
                    if !body.contains(&s) {
                        exits.insert(cfg.id(s));
                    }
                }
            }
            Loop {
                header: cfg.id(*h),
                latches: latches.iter().map(|i| cfg.id(*i)).collect(),
                body: body_ids,
                preheader,
                exits,
                parent: None,
                depth: 1,
            }
        })
        .collect();
    // Parent = smallest strictly enclosing loop.
    for i in 0..loops.len() {
        let mut best: Option<usize> = None;
        for j in 0..loops.len() {
            if i == j || !loops[j].body.contains(&loops[i].header) {
                continue;
            }
            if loops[j].body.len() <= loops[i].body.len() && loops[j].header == loops[i].header {
                continue;
            }
            if best.map_or(true, |b| loops[j].body.len() < loops[b].body.len()) {
                best = Some(j);
            }
        }
        loops[i].parent = best;
    }
    for i in 0..loops.len() {
        let mut depth = 1;
        let mut p = loops[i].parent;
        while let Some(j) = p {
            depth += 1;
            p = loops[j].parent;
        }
        loops[i].depth = depth;
    }
    let _ = f;
    LoopForest { loops }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reducibility {
    Reducible,
    /// Retreating edges whose target does not dominate their source.
    Irreducible(Vec<(BlockId, BlockId)>),
}

impl Reducibility {
    pub fn is_reducible(&self) -> bool {
        matches!(self, Reducibility::Reducible)
    }
}

pub fn check_reducible(f: &Function, d: &DomTree) -> Reducibility {
    check_reducible_ordered(f, d, |_, succs| succs.to_vec())
}

/// Reducibility check with a caller-chosen successor visiting order.
pub fn check_reducible_ordered(
    f: &Function,
    d: &DomTree,
    mut order: impl FnMut(usize, &[usize]) -> Vec<usize>,
) -> Reducibility {
    let cfg = Cfg::new(f);
    if cfg.is_empty() {
        return Reducibility::Reducible;
    }
    let n = cfg.len();
    let mut on_stack = vec![false; n];
    let mut seen = vec![false; n];
    let mut witness = Vec::new();
    let mut stack: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    seen[0] = true;
    on_stack[0] = true;
    stack.push((0, order(0, &cfg.succs[0]), 0));
    while let Some(top) = stack.last_mut() {
        let (node, ref succs, i) = *top;
        if i < succs.len() {
            let s = succs[i];
            top.2 += 1;
            if on_stack[s] {
                if !d.dominates(cfg.id(s), cfg.id(node)) {
                    witness.push((cfg.id(node), cfg.id(s)));
                }
            } else if !seen[s] {
                seen[s] = true;
                on_stack[s] = true;
                let so = order(s, &cfg.succs[s]);
                stack.push((s, so, 0));
            }
        } else {
            on_stack[node] = false;
            stack.pop();
        }
    }
    if witness.is_empty() {
        Reducibility::Reducible
    } else {
        Reducibility::Irreducible(witness)
    }
}

/// Blocks reachable from `from` (inclusive) without entering `stop`.
pub fn reachable_avoiding(f: &Function, from: BlockId, stop: Option<BlockId>) -> HashSet<BlockId> {
    let mut seen = HashSet::new();
    let mut stack = vec![from];
    while let Some(b) = stack.pop() {
        if Some(b) == stop || !seen.insert(b) {
            continue;
        }
        stack.extend(f.block(b).successors());
    }
    seen
}

pub fn is_reachable(f: &Function, from: BlockId, to: BlockId) -> bool {
    f.block(from)
        .successors()
        .into_iter()
        .any(|s| reachable_avoiding(f, s, None).contains(&to))
}

/// Control dependence: `controlled[a]` holds blocks whose execution is
/// decided by `a`'s terminator.
#[derive(Clone, Debug, Default)]
pub struct ControlDependenceGraph {
    controlled: HashMap<BlockId, BTreeSet<BlockId>>,
    controllers: HashMap<BlockId, BTreeSet<BlockId>>,
}

pub fn build_cdg(f: &Function, pd: &PostDomTree) -> ControlDependenceGraph {
    let cfg = pd.cfg();
    let mut g = ControlDependenceGraph::default();
    for b in &f.blocks {
        g.controlled.entry(b.id).or_default();
        g.controllers.entry(b.id).or_default();
    }
    for a in 0..cfg.len() {
        if cfg.succs[a].len() < 2 {
            continue;
        }
        let stop = pd.parent(a);
        for &s in &cfg.succs[a] {
            let mut runner = Some(s);
            while let Some(r) = runner {
                if Some(r) == stop || r >= cfg.len() {
                    break;
                }
                g.controlled.entry(cfg.id(a)).or_default().insert(cfg.id(r));
                g.controllers.entry(cfg.id(r)).or_default().insert(cfg.id(a));
                runner = pd.parent(r);
            }
        }
    }
    g
}

impl ControlDependenceGraph {
    pub fn controlled_by(&self, a: BlockId) -> impl Iterator<Item = BlockId> + '_ {
        self.controlled.get(&a).into_iter().flatten().copied()
    }

    pub fn controllers_of(&self, b: BlockId) -> impl Iterator<Item = BlockId> + '_ {
        self.controllers.get(&b).into_iter().flatten().copied()
    }

    pub fn pred_count(&self, b: BlockId) -> usize {
        self.controllers.get(&b).map_or(0, |s| s.len())
    }

    /// A leaf controls no other block.
    pub fn is_leaf(&self, b: BlockId) -> bool {
        self.controlled.get(&b).map_or(true, |s| s.is_empty())
    }

    /// All transitive controllers of `b`.
    pub fn ancestors(&self, b: BlockId) -> HashSet<BlockId> {
        let mut seen = HashSet::new();
        let mut stack: Vec<BlockId> = self.controllers_of(b).collect();
        while let Some(x) = stack.pop() {
            if seen.insert(x) {
                stack.extend(self.controllers_of(x));
            }
        }
        seen
    }

    /// Longest chain of control dependence ending at any block.
    pub fn depth(&self) -> usize {
        fn go(
            g: &ControlDependenceGraph,
            b: BlockId,
            memo: &mut HashMap<BlockId, usize>,
            visiting: &mut HashSet<BlockId>,
        ) -> usize {
            if let Some(d) = memo.get(&b) {
                return *d;
            }
            if !visiting.insert(b) {
                return 0;
            }
            let d = g
                .controllers_of(b)
                .filter(|c| *c != b)
                .map(|c| go(g, c, memo, visiting) + 1)
                .max()
                .unwrap_or(0);
            visiting.remove(&b);
            memo.insert(b, d);
            d
        }
        let mut memo = HashMap::new();
        let keys: Vec<BlockId> = self.controllers.keys().copied().collect();
        keys.into_iter()
            .map(|b| go(self, b, &mut memo, &mut HashSet::new()))
            .max()
            .unwrap_or(0)
    }
}

/// Deterministic text tables for `analyze --dump`, sorted by block label.
pub fn dump_dom(f: &Function) -> String {
    let d = compute_dom_tree(f);
    let mut rows: Vec<(String, String)> = f
        .blocks
        .iter()
        .map(|b| {
            let i = d.idom(b.id).map_or("-".to_string(), |x| f.label(x).to_string());
            (b.label.clone(), i)
        })
        .collect();
    rows.sort();
    table(&f.name, "idom", rows)
}

pub fn dump_postdom(f: &Function) -> Result<String, CfgError> {
    let pd = compute_postdom_tree(f)?;
    let mut rows: Vec<(String, String)> = f
        .blocks
        .iter()
        .map(|b| {
            let i = pd.ipdom(b.id).map_or("-".to_string(), |x| f.label(x).to_string());
            (b.label.clone(), i)
        })
        .collect();
    rows.sort();
    Ok(table(&f.name, "ipdom", rows))
}

pub fn dump_loops(f: &Function) -> String {
    let d = compute_dom_tree(f);
    let lf = build_loop_forest(f, &d);
    let labels = |set: &mut dyn Iterator<Item = BlockId>| {
        let mut v: Vec<String> = set.map(|b| f.label(b).to_string()).collect();
        v.sort();
        v.join(",")
    };
    let mut rows: Vec<(String, String)> = lf
        .loops
        .iter()
        .map(|l| {
            let desc = format!(
                "depth={} latches={} body={} preheader={} exits={}",
                l.depth,
                labels(&mut l.latches.iter().copied()),
                labels(&mut l.body.iter().copied()),
                l.preheader.map_or("-".to_string(), |p| f.label(p).to_string()),
                labels(&mut l.exits.iter().copied()),
            );
            (f.label(l.header).to_string(), desc)
        })
        .collect();
    rows.sort();
    table(&f.name, "loop", rows)
}

pub fn dump_cdg(f: &Function) -> Result<String, CfgError> {
    let pd = compute_postdom_tree(f)?;
    let g = build_cdg(f, &pd);
    let mut rows: Vec<(String, String)> = f
        .blocks
        .iter()
        .map(|b| {
            let mut v: Vec<String> = g.controlled_by(b.id).map(|x| f.label(x).to_string()).collect();
            v.sort();
            (b.label.clone(), v.join(","))
        })
        .collect();
    rows.sort();
    Ok(table(&f.name, "controls", rows))
}

fn table(func: &str, col: &str, rows: Vec<(String, String)>) -> String {
    let mut out = format!("@{func}\n");
    for (k, v) in rows {
        let _ = writeln!(out, "  {k}: {col} {v}");
    }
    out
}
