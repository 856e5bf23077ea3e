use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SearchError;
use crate::graph::{validate, ComputeGraph, OpKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationKind {
    SubgraphSwap,
    ChannelPrune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Shrinks a coupled channel group to three quarters, rounded down to a
    /// multiple of 8.
    ChannelPrune,
    /// Replaces a ReLU, ReLU6 or h-swish node by the identity.
    ActivationRemoval,
    /// Removes a squeeze-and-excitation branch and its gating multiply.
    SeRemoval,
    /// Kernel 7 to 5 or 5 to 3 on a convolution.
    KernelShrink,
    /// Removes the body of a residual block, keeping its identity skip.
    BlockDeletion,
}

impl Rule {
    pub const ALL: [Rule; 5] =
        [Rule::ChannelPrune, Rule::ActivationRemoval, Rule::SeRemoval, Rule::KernelShrink, Rule::BlockDeletion];

    pub fn kind(self) -> MutationKind {
        match self {
            Rule::ChannelPrune => MutationKind::ChannelPrune,
            _ => MutationKind::SubgraphSwap,
        }
    }
}

/// One edit. `locus` lists the affected node ids with the anchor first;
/// `payload` is the new channel count or kernel size and 0 otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mutation {
    pub rule: Rule,
    pub locus: Vec<u32>,
    pub payload: u32,
}

impl Mutation {
    pub fn kind(&self) -> MutationKind {
        self.rule.kind()
    }
}

fn is_producer(op: OpKind) -> bool {
    matches!(op, OpKind::Conv | OpKind::Deconv | OpKind::Linear)
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Sets of nodes whose output channel counts must change together, keyed by
/// the smallest member id. Groups touching the input, the output or a concat
/// are left out, as is any group without a producing node.
pub fn channel_groups(cg: &ComputeGraph) -> Vec<Vec<u32>> {
    let index = cg.index_of();
    let mut dsu = Dsu((0..cg.nodes.len()).collect());
    let mut locked = vec![false; cg.nodes.len()];
    for &(s, d) in &cg.edges {
        let (si, di) = (index[&s], index[&d]);
        match cg.nodes[di].op {
            OpKind::Concat => locked[si] = true,
            op if is_producer(op) => {}
            _ => dsu.union(si, di),
        }
    }
    for (i, n) in cg.nodes.iter().enumerate() {
        if matches!(n.op, OpKind::Input | OpKind::Output | OpKind::Concat) {
            locked[i] = true;
        }
    }
    let mut groups: BTreeMap<usize, (Vec<u32>, bool, bool)> = BTreeMap::new();
    for (i, n) in cg.nodes.iter().enumerate() {
        let r = dsu.find(i);
        let g = groups.entry(r).or_default();
        g.0.push(n.id);
        g.1 |= locked[i];
        g.2 |= is_producer(n.op);
    }
    let mut out: Vec<Vec<u32>> = groups
        .into_values()
        .filter(|(_, locked, producer)| !locked && *producer)
        .map(|(mut ids, _, _)| {
            ids.sort_unstable();
            ids
        })
        .collect();
    out.sort();
    out
}

fn pruned_channels(c: u32) -> u32 {
    let t = c * 3 / 4;
    if t >= 8 {
        t / 8 * 8
    } else {
        t.max(1)
    }
}

fn preds_map(cg: &ComputeGraph) -> HashMap<u32, Vec<u32>> {
    let mut m: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(s, d) in &cg.edges {
        m.entry(d).or_default().push(s);
    }
    m
}

fn succs_map(cg: &ComputeGraph) -> HashMap<u32, Vec<u32>> {
    let mut m: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(s, d) in &cg.edges {
        m.entry(s).or_default().push(d);
    }
    m
}

fn se_branch(cg: &ComputeGraph, mul: u32, preds: &HashMap<u32, Vec<u32>>, succs: &HashMap<u32, Vec<u32>>) -> Option<Vec<u32>> {
    let ps = preds.get(&mul)?;
    if ps.len() != 2 {
        return None;
    }
    let gate_idx = ps.iter().position(|&p| cg.node(p).is_some_and(|n| n.out_shape.h == 1 && n.out_shape.w == 1))?;
    let (gate, main) = (ps[gate_idx], ps[1 - gate_idx]);
    let mut branch = Vec::new();
    let mut v = gate;
    loop {
        let n = cg.node(v)?;
        if succs.get(&v).map_or(0, Vec::len) != 1 || preds.get(&v).map_or(0, Vec::len) != 1 {
            return None;
        }
        branch.push(v);
        let p = preds[&v][0];
        if n.op == OpKind::GlobalPool {
            return (p == main).then_some(branch);
        }
        if p == main {
            return None;
        }
        v = p;
    }
}

fn residual_branch(
    cg: &ComputeGraph,
    add: u32,
    preds: &HashMap<u32, Vec<u32>>,
    succs: &HashMap<u32, Vec<u32>>,
) -> Option<Vec<u32>> {
    let ps = preds.get(&add)?;
    if ps.len() != 2 || ps[0] == ps[1] {
        return None;
    }
    let bn = |id: u32| cg.node(id).is_some_and(|n| n.op == OpKind::BatchNorm);
    let (skip, tail) = match (bn(ps[0]), bn(ps[1])) {
        (false, true) => (ps[0], ps[1]),
        (true, false) => (ps[1], ps[0]),
        _ => return None,
    };
    // ancestors of the tail, stopping at the skip source
    let mut branch = BTreeSet::new();
    let mut stack = vec![tail];
    while let Some(v) = stack.pop() {
        if v == skip || !branch.insert(v) {
            continue;
        }
        let vp = preds.get(&v)?;
        if vp.is_empty() {
            return None;
        }
        stack.extend(vp.iter().copied());
    }
    for &v in &branch {
        if !preds[&v].iter().all(|p| *p == skip || branch.contains(p)) {
            return None;
        }
        if !succs.get(&v).map_or(&[][..], Vec::as_slice).iter().all(|s| *s == add || branch.contains(s)) {
            return None;
        }
    }
    Some(branch.into_iter().collect())
}

/// Every applicable mutation of `rule`, in a deterministic order.
pub fn candidates(cg: &ComputeGraph, rule: Rule) -> Vec<Mutation> {
    let preds = preds_map(cg);
    let succs = succs_map(cg);
    let mut out = Vec::new();
    match rule {
        Rule::ChannelPrune => {
            for g in channel_groups(cg) {
                let c = cg.node(g[0]).expect("group member").out_shape.c;
                let to = pruned_channels(c);
                if to < c {
                    out.push(Mutation { rule, locus: g, payload: to });
                }
            }
        }
        Rule::ActivationRemoval => {
            for n in &cg.nodes {
                if matches!(n.op, OpKind::Relu | OpKind::Relu6 | OpKind::Hswish) {
                    out.push(Mutation { rule, locus: vec![n.id], payload: 0 });
                }
            }
        }
        Rule::SeRemoval => {
            for n in cg.nodes.iter().filter(|n| n.op == OpKind::Mul) {
                if let Some(branch) = se_branch(cg, n.id, &preds, &succs) {
                    let mut locus = vec![n.id];
                    locus.extend(branch);
                    out.push(Mutation { rule, locus, payload: 0 });
                }
            }
        }
        Rule::KernelShrink => {
            for n in &cg.nodes {
                if matches!(n.op, OpKind::Conv | OpKind::DepthwiseConv)
                    && n.weight_shape.len() == 4
                    && n.weight_shape[0] == n.weight_shape[1]
                    && matches!(n.weight_shape[0], 5 | 7)
                {
                    out.push(Mutation { rule, locus: vec![n.id], payload: n.weight_shape[0] - 2 });
                }
            }
        }
        Rule::BlockDeletion => {
            for n in cg.nodes.iter().filter(|n| n.op == OpKind::Add) {
                if let Some(branch) = residual_branch(cg, n.id, &preds, &succs) {
                    let mut locus = vec![n.id];
                    locus.extend(branch);
                    out.push(Mutation { rule, locus, payload: 0 });
                }
            }
        }
    }
    out
}

/// Removes `removed` and reconnects the successors of `anchor` to `source`.
fn splice(cg: &mut ComputeGraph, removed: &HashSet<u32>, anchor: u32, source: u32) {
    cg.nodes.retain(|n| !removed.contains(&n.id));
    cg.edges = cg
        .edges
        .iter()
        .filter_map(|&(s, d)| match (removed.contains(&s), removed.contains(&d)) {
            (false, false) => Some((s, d)),
            (true, false) if s == anchor => Some((source, d)),
            _ => None,
        })
        .collect();
}

fn bad(m: &Mutation, why: &str) -> SearchError {
    SearchError::BadMutation(format!("{:?} at {:?}: {why}", m.rule, m.locus))
}

/// Applies `m`; the result is validated.
pub fn apply(cg: &ComputeGraph, m: &Mutation) -> Result<ComputeGraph, SearchError> {
    let mut out = cg.clone();
    let &anchor = m.locus.first().ok_or_else(|| bad(m, "empty locus"))?;
    if cg.node(anchor).is_none() {
        return Err(bad(m, "unknown anchor node"));
    }
    let locus: HashSet<u32> = m.locus.iter().copied().collect();
    let outside_pred = |id: u32| -> Result<u32, SearchError> {
        let ps: Vec<u32> = cg.predecessors(id).into_iter().filter(|p| !locus.contains(p)).collect();
        match ps.as_slice() {
            [p] => Ok(*p),
            _ => Err(bad(m, "anchor must have exactly one input outside the locus")),
        }
    };
    match m.rule {
        Rule::ChannelPrune => {
            let c = m.payload;
            if c == 0 {
                return Err(bad(m, "channel count must be positive"));
            }
            for n in out.nodes.iter_mut().filter(|n| locus.contains(&n.id)) {
                n.out_shape.c = c;
                match n.op {
                    OpKind::Conv | OpKind::Deconv => n.weight_shape[3] = c,
                    OpKind::Linear => n.weight_shape[1] = c,
                    OpKind::DepthwiseConv => {
                        n.in_shape.c = c;
                        n.weight_shape[2] = c;
                    }
                    OpKind::BatchNorm => {
                        n.in_shape.c = c;
                        n.weight_shape[0] = c;
                    }
                    _ => n.in_shape.c = c,
                }
            }
            // consumers reading a group member, which may be members themselves
            let consumers: BTreeSet<u32> = cg.edges.iter().filter(|(s, _)| locus.contains(s)).map(|e| e.1).collect();
            for id in consumers {
                let n = out.node_mut(id).expect("edge endpoint");
                match n.op {
                    OpKind::Conv | OpKind::Deconv => n.weight_shape[2] = c,
                    OpKind::Linear => n.weight_shape[0] = c,
                    _ if locus.contains(&id) => continue,
                    _ => return Err(bad(m, "group is not closed under channel coupling")),
                }
                n.in_shape.c = c;
            }
        }
        Rule::ActivationRemoval | Rule::SeRemoval | Rule::BlockDeletion => {
            let source = outside_pred(anchor)?;
            splice(&mut out, &locus, anchor, source);
            if m.rule == Rule::BlockDeletion {
                out.meta.block_count = out.meta.block_count.saturating_sub(1).max(1);
            }
        }
        Rule::KernelShrink => {
            let n = out.node_mut(anchor).expect("checked");
            if n.weight_shape.len() != 4 || m.payload == 0 || m.payload >= n.weight_shape[0] {
                return Err(bad(m, "kernel must shrink"));
            }
            n.weight_shape[0] = m.payload;
            n.weight_shape[1] = m.payload;
        }
    }
    let v = validate(&out);
    if !v.is_empty() {
        return Err(SearchError::Graph(crate::error::GraphError::Invalid(v)));
    }
    Ok(out)
}

/// Applies one random applicable mutation: a rule is drawn uniformly among
/// those with candidates, then a candidate uniformly within the rule.
pub fn mutate(cg: &ComputeGraph, rng: &mut impl Rng, rules: &[Rule]) -> Result<(ComputeGraph, Mutation), SearchError> {
    if rules.is_empty() {
        return Err(SearchError::NoMutation);
    }
    let mut pools: Vec<Vec<Mutation>> = rules.iter().map(|&r| candidates(cg, r)).filter(|c| !c.is_empty()).collect();
    if pools.is_empty() {
        return Err(SearchError::NoMutation);
    }
    let i = rng.random_range(0..pools.len());
    let pool = pools.swap_remove(i);
    let m = pool[rng.random_range(0..pool.len())].clone();
    let next = apply(cg, &m)?;
    Ok((next, m))
}

/// Applies `history` in order starting from `cg0`.
pub fn replay(cg0: &ComputeGraph, history: &[Mutation]) -> Result<ComputeGraph, SearchError> {
    history.iter().try_fold(cg0.clone(), |cg, m| apply(&cg, m))
}
