//! Exact s/t max-flow and minimum cut on pixel-grid graphs.
//!
//! Dinic's algorithm with explicit source and sink nodes. Node ids are the
//! caller's (GrabCut passes row-major pixel indices), so the cut partition
//! maps straight back onto a mask. After the flow converges the partition is
//! read off by a residual-graph search from the source, which makes the
//! duality post-condition hold by construction.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaxflowError {
    #[error("node index {index} out of range for {nodes} nodes")]
    BadNodeIndex { index: u32, nodes: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(u32),
    #[error("capacity {0} is negative or not finite")]
    BadCapacity(f64),
}

fn check_cap(c: f64) -> Result<(), MaxflowError> {
    if c < 0.0 || !c.is_finite() {
        return Err(MaxflowError::BadCapacity(c));
    }
    Ok(())
}

/// s/t network over `node_count` non-terminal nodes.
///
/// Every node has capacities from the source and to the sink; pairwise edges
/// carry independent capacities in each direction.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    node_count: usize,
    terminal_caps: Vec<(f64, f64)>,
    edges: Vec<(u32, u32, f64, f64)>,
}

impl FlowNetwork {
    pub fn new(node_count: usize) -> Self {
        Self {
            node_count,
            terminal_caps: vec![(0.0, 0.0); node_count],
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn terminal_caps(&self) -> &[(f64, f64)] {
        &self.terminal_caps
    }

    pub fn edges(&self) -> &[(u32, u32, f64, f64)] {
        &self.edges
    }

    fn check_node(&self, i: u32) -> Result<(), MaxflowError> {
        if (i as usize) >= self.node_count {
            return Err(MaxflowError::BadNodeIndex {
                index: i,
                nodes: self.node_count,
            });
        }
        Ok(())
    }

    /// Sets a node's capacity from the source and to the sink.
    pub fn set_terminal(
        &mut self,
        node: u32,
        from_source: f64,
        to_sink: f64,
    ) -> Result<(), MaxflowError> {
        self.check_node(node)?;
        check_cap(from_source)?;
        check_cap(to_sink)?;
        self.terminal_caps[node as usize] = (from_source, to_sink);
        Ok(())
    }

    /// Adds a pairwise edge with capacity `cap_uv` for u→v and `cap_vu` for v→u.
    pub fn add_edge(
        &mut self,
        u: u32,
        v: u32,
        cap_uv: f64,
        cap_vu: f64,
    ) -> Result<(), MaxflowError> {
        self.check_node(u)?;
        self.check_node(v)?;
        if u == v {
            return Err(MaxflowError::SelfLoop(u));
        }
        check_cap(cap_uv)?;
        check_cap(cap_vu)?;
        self.edges.push((u, v, cap_uv, cap_vu));
        Ok(())
    }

    fn validate(&self) -> Result<(), MaxflowError> {
        for &(s, t) in &self.terminal_caps {
            check_cap(s)?;
            check_cap(t)?;
        }
        for &(u, v, cuv, cvu) in &self.edges {
            self.check_node(u)?;
            self.check_node(v)?;
            if u == v {
                return Err(MaxflowError::SelfLoop(u));
            }
            check_cap(cuv)?;
            check_cap(cvu)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Sink,
}

/// Outcome of a solve: the flow value and a minimum cut partition.
#[derive(Debug, Clone)]
pub struct CutResult {
    pub max_flow_value: f64,
    pub side: Vec<Side>,
}

struct Dinic {
    // arc i and i^1 are a residual pair
    to: Vec<u32>,
    cap: Vec<f64>,
    adj: Vec<Vec<u32>>,
}

impl Dinic {
    fn new(nodes: usize) -> Self {
        Self {
            to: Vec::new(),
            cap: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    fn add_pair(&mut self, u: usize, v: usize, cap_uv: f64, cap_vu: f64) {
        let id = self.to.len() as u32;
        self.to.push(v as u32);
        self.cap.push(cap_uv);
        self.to.push(u as u32);
        self.cap.push(cap_vu);
        self.adj[u].push(id);
        self.adj[v].push(id + 1);
    }

    fn bfs_levels(&self, s: usize, t: usize) -> Option<Vec<i32>> {
        let mut level = vec![-1i32; self.adj.len()];
        level[s] = 0;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &a in &self.adj[u] {
                let v = self.to[a as usize] as usize;
                if self.cap[a as usize] > 0.0 && level[v] < 0 {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (level[t] >= 0).then_some(level)
    }

    /// Sends one blocking flow through the level graph, iteratively.
    fn blocking_flow(&mut self, s: usize, t: usize, level: &[i32]) -> f64 {
        let mut it = vec![0usize; self.adj.len()];
        let mut total = 0.0;
        let mut path: Vec<u32> = Vec::new();
        let mut u = s;
        loop {
            if u == t {
                let mut bottleneck = f64::INFINITY;
                for &a in &path {
                    bottleneck = bottleneck.min(self.cap[a as usize]);
                }
                total += bottleneck;
                // the minimum saturates at least one arc exactly
                let mut first_saturated = path.len();
                for (i, &a) in path.iter().enumerate() {
                    self.cap[a as usize] -= bottleneck;
                    self.cap[(a ^ 1) as usize] += bottleneck;
                    if self.cap[a as usize] <= 0.0 && first_saturated == path.len() {
                        first_saturated = i;
                    }
                }
                // back up to the tail of the first saturated arc
                path.truncate(first_saturated);
                u = path.last().map_or(s, |&a| self.to[a as usize] as usize);
                continue;
            }
            let mut advanced = false;
            while it[u] < self.adj[u].len() {
                let a = self.adj[u][it[u]];
                let v = self.to[a as usize] as usize;
                if self.cap[a as usize] > 0.0 && level[v] == level[u] + 1 {
                    path.push(a);
                    u = v;
                    advanced = true;
                    break;
                }
                it[u] += 1;
            }
            if advanced {
                continue;
            }
            if u == s {
                break;
            }
            // dead end: drop the node from this phase and retreat
            let a = path.pop().expect("non-source dead end has an inbound arc");
            let tail = self.to[(a ^ 1) as usize] as usize;
            it[tail] += 1;
            u = tail;
        }
        total
    }

    fn reachable_from(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        seen[s] = true;
        let mut queue = std::collections::VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &a in &self.adj[u] {
                let v = self.to[a as usize] as usize;
                if self.cap[a as usize] > 0.0 && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }
}

/// Computes the maximum s→t flow and a minimum cut.
///
/// Nodes reachable from the source in the final residual graph are
/// source-side; everything else, including nodes with no residual connection
/// at all, is sink-side.
pub fn max_flow(net: &FlowNetwork) -> Result<CutResult, MaxflowError> {
    net.validate()?;
    let n = net.node_count;
    let s = n;
    let t = n + 1;
    let mut g = Dinic::new(n + 2);
    for (i, &(src, snk)) in net.terminal_caps.iter().enumerate() {
        if src > 0.0 {
            g.add_pair(s, i, src, 0.0);
        }
        if snk > 0.0 {
            g.add_pair(i, t, snk, 0.0);
        }
    }
    for &(u, v, cuv, cvu) in &net.edges {
        if cuv > 0.0 || cvu > 0.0 {
            g.add_pair(u as usize, v as usize, cuv, cvu);
        }
    }

    let mut flow = 0.0;
    while let Some(level) = g.bfs_levels(s, t) {
        let pushed = g.blocking_flow(s, t, &level);
        if pushed <= 0.0 {
            break;
        }
        flow += pushed;
    }

    let reach = g.reachable_from(s);
    let side = (0..n)
        .map(|i| if reach[i] { Side::Source } else { Side::Sink })
        .collect();
    Ok(CutResult {
        max_flow_value: flow,
        side,
    })
}

/// Capacity of the cut induced by `result.side`: terminal capacities crossing
/// the partition plus pairwise capacities from source-side to sink-side.
pub fn verify_cut(net: &FlowNetwork, result: &CutResult) -> f64 {
    assert_eq!(
        result.side.len(),
        net.node_count,
        "partition must cover every node"
    );
    let mut total = 0.0;
    for (i, &(src, snk)) in net.terminal_caps.iter().enumerate() {
        match result.side[i] {
            Side::Sink => total += src,
            Side::Source => total += snk,
        }
    }
    for &(u, v, cuv, cvu) in &net.edges {
        let (su, sv) = (result.side[u as usize], result.side[v as usize]);
        if su == Side::Source && sv == Side::Sink {
            total += cuv;
        } else if sv == Side::Source && su == Side::Sink {
            total += cvu;
        }
    }
    total
}
