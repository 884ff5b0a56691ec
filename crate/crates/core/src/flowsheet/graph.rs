//! Graph algorithms on the unit multigraph: strongly connected components,
//! simple-cycle enumeration, tear selection and topological ordering.
//!
//! Nodes are unit indices; every edge carries a label (the stream index).
//! One stream with several consumers contributes several edges sharing a
//! label, and tearing a stream removes all of them.

use std::collections::BTreeSet;

/// Directed edge `from → to` carrying `label`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub label: usize,
}

/// Upper bound on enumerated simple cycles before giving up.
pub const MAX_CYCLES: usize = 100_000;

/// Candidate-stream count below which the greedy tear set is checked
/// against an exhaustive search.
pub const EXHAUSTIVE_LIMIT: usize = 24;

fn adjacency(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (i, e) in edges.iter().enumerate() {
        adj[e.from].push(i);
    }
    adj
}

/// Tarjan's algorithm. Components are returned with members sorted, in
/// order of their smallest member.
pub fn strongly_connected_components(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    struct State<'a> {
        adj: &'a [Vec<usize>],
        edges: &'a [Edge],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }

    fn visit(s: &mut State, v: usize) {
        s.index[v] = Some(s.next);
        s.low[v] = s.next;
        s.next += 1;
        s.stack.push(v);
        s.on_stack[v] = true;
        for &ei in &s.adj[v] {
            let w = s.edges[ei].to;
            match s.index[w] {
                None => {
                    visit(s, w);
                    s.low[v] = s.low[v].min(s.low[w]);
                }
                Some(iw) if s.on_stack[w] => s.low[v] = s.low[v].min(iw),
                _ => {}
            }
        }
        if Some(s.low[v]) == s.index[v] {
            let mut comp = Vec::new();
            while let Some(w) = s.stack.pop() {
                s.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            comp.sort_unstable();
            s.out.push(comp);
        }
    }

    let adj = adjacency(n, edges);
    let mut s = State {
        adj: &adj,
        edges,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if s.index[v].is_none() {
            visit(&mut s, v);
        }
    }
    let mut out = s.out;
    out.sort_by_key(|c| c[0]);
    out
}

/// A simple cycle as the node sequence it visits and the edge labels it uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cycle {
    pub nodes: Vec<usize>,
    pub labels: BTreeSet<usize>,
}

/// Enumerates every simple cycle (as an edge sequence, so parallel edges give
/// distinct cycles). Returns `None` past [`MAX_CYCLES`].
pub fn simple_cycles(n: usize, edges: &[Edge]) -> Option<Vec<Cycle>> {
    let adj = adjacency(n, edges);
    let mut out = Vec::new();
    let mut on_path = vec![false; n];
    let mut nodes = Vec::new();
    let mut path_edges = Vec::new();

    // Cycles are rooted at their smallest node and only visit larger ones.
    #[allow(clippy::too_many_arguments)]
    fn dfs(
        root: usize,
        v: usize,
        adj: &[Vec<usize>],
        edges: &[Edge],
        on_path: &mut [bool],
        nodes: &mut Vec<usize>,
        path_edges: &mut Vec<usize>,
        out: &mut Vec<Cycle>,
    ) -> bool {
        for &ei in &adj[v] {
            let w = edges[ei].to;
            if w == root {
                path_edges.push(ei);
                out.push(Cycle {
                    nodes: nodes.clone(),
                    labels: path_edges.iter().map(|&e| edges[e].label).collect(),
                });
                path_edges.pop();
                if out.len() > MAX_CYCLES {
                    return false;
                }
            } else if w > root && !on_path[w] {
                on_path[w] = true;
                nodes.push(w);
                path_edges.push(ei);
                let ok = dfs(root, w, adj, edges, on_path, nodes, path_edges, out);
                path_edges.pop();
                nodes.pop();
                on_path[w] = false;
                if !ok {
                    return false;
                }
            }
        }
        true
    }

    for root in 0..n {
        on_path[root] = true;
        nodes.push(root);
        let ok = dfs(root, root, &adj, edges, &mut on_path, &mut nodes, &mut path_edges, &mut out);
        nodes.pop();
        on_path[root] = false;
        if !ok {
            return None;
        }
    }
    Some(out)
}

/// First cycle left intact by cutting `cut`, if any.
pub fn remaining_cycle(n: usize, edges: &[Edge], cut: &BTreeSet<usize>) -> Option<Vec<usize>> {
    let kept: Vec<Edge> = edges.iter().copied().filter(|e| !cut.contains(&e.label)).collect();
    if topological_order(n, &kept).is_some() {
        return None;
    }
    // Any non-trivial SCC (or self-loop) holds a cycle; walk it.
    let sccs = strongly_connected_components(n, &kept);
    let comp = sccs.into_iter().find(|c| {
        c.len() > 1 || kept.iter().any(|e| e.from == c[0] && e.to == c[0])
    })?;
    let inside: BTreeSet<usize> = comp.iter().copied().collect();
    let start = comp[0];
    let mut path = vec![start];
    let mut seen = BTreeSet::from([start]);
    let mut v = start;
    loop {
        let e = kept
            .iter()
            .filter(|e| e.from == v && inside.contains(&e.to))
            .min_by_key(|e| (e.to != start, e.to))?;
        if e.to == start || seen.contains(&e.to) {
            let from = path.iter().position(|&u| u == e.to).unwrap_or(0);
            return Some(path[from..].to_vec());
        }
        v = e.to;
        seen.insert(v);
        path.push(v);
    }
}

/// Kahn's algorithm, ties broken by smallest node index. `None` if cyclic.
pub fn topological_order(n: usize, edges: &[Edge]) -> Option<Vec<usize>> {
    let mut indegree = vec![0usize; n];
    for e in edges {
        indegree[e.to] += 1;
    }
    let adj = adjacency(n, edges);
    let mut ready: BTreeSet<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &ei in &adj[v] {
            let w = edges[ei].to;
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.insert(w);
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Greedy tear selection: repeatedly cut the label lying on the most
/// remaining cycles, ties going to the label whose name sorts first. When
/// few labels are involved, a smaller cut found by exhaustive search (first
/// in lexicographic name order) replaces the greedy one.
pub fn select_tears(cycles: &[Cycle], names: &[String]) -> BTreeSet<usize> {
    let mut remaining: Vec<&Cycle> = cycles.iter().collect();
    let mut cut = BTreeSet::new();
    while !remaining.is_empty() {
        let mut counts = std::collections::BTreeMap::<usize, usize>::new();
        for c in &remaining {
            for &l in &c.labels {
                *counts.entry(l).or_default() += 1;
            }
        }
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| names[*b.0].cmp(&names[*a.0])))
            .map(|(&l, _)| l)
            .expect("cycles have labels");
        cut.insert(best);
        remaining.retain(|c| !c.labels.contains(&best));
    }

    let mut candidates: Vec<usize> = cycles.iter().flat_map(|c| c.labels.iter().copied()).collect();
    candidates.sort_by(|a, b| names[*a].cmp(&names[*b]));
    candidates.dedup();
    if candidates.len() <= EXHAUSTIVE_LIMIT {
        for size in 1..cut.len() {
            if let Some(found) = first_hitting_set(cycles, &candidates, size) {
                return found;
            }
        }
    }
    cut
}

/// First `size`-subset of `candidates` (in combination order) meeting every cycle.
pub fn first_hitting_set(cycles: &[Cycle], candidates: &[usize], size: usize) -> Option<BTreeSet<usize>> {
    let n = candidates.len();
    if size > n {
        return None;
    }
    let mut idx: Vec<usize> = (0..size).collect();
    loop {
        let set: BTreeSet<usize> = idx.iter().map(|&i| candidates[i]).collect();
        if cycles.iter().all(|c| !c.labels.is_disjoint(&set)) {
            return Some(set);
        }
        // advance to the next combination
        let mut i = size;
        loop {
            if i == 0 {
                return None;
            }
            i -= 1;
            if idx[i] != i + n - size {
                break;
            }
            if i == 0 {
                return None;
            }
        }
        idx[i] += 1;
        for j in i + 1..size {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
