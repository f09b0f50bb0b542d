//! Power-network topology and the linear algebra every dispatch layer
//! shares: the bus/branch incidence matrix, reactance-weighted cycle
//! constraints, a deterministic spanning tree, and the fundamental-flow
//! basis that parameterizes all flows consistent with the DC voltage law.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network is not connected")]
    DisconnectedNetwork,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
}

/// A transmission line. Flow is positive in the `from` -> `to` direction.
/// `capacity: None` means the line is unbounded; finite capacities bound
/// the flow magnitude in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
    pub capacity: Option<f64>,
}

/// Bus/branch graph of the grid. Buses are dense indices `0..n`.
#[derive(Debug, Clone)]
pub struct Network {
    n: usize,
    branches: Vec<Branch>,
}

impl Network {
    /// Validates bus indices, susceptances, capacities, and connectivity.
    /// Parallel branches are allowed; self-loops are not.
    pub fn new(n: usize, branches: Vec<Branch>) -> Result<Self, NetworkError> {
        if n == 0 {
            return Err(NetworkError::InvalidNetwork("no buses".into()));
        }
        for (i, b) in branches.iter().enumerate() {
            if b.from >= n || b.to >= n {
                return Err(NetworkError::InvalidNetwork(format!(
                    "branch {i} references bus outside 0..{n}"
                )));
            }
            if b.from == b.to {
                return Err(NetworkError::InvalidNetwork(format!(
                    "branch {i} is a self-loop at bus {}",
                    b.from
                )));
            }
            if !(b.susceptance > 0.0) || !b.susceptance.is_finite() {
                return Err(NetworkError::InvalidNetwork(format!(
                    "branch {i} has non-positive susceptance {}",
                    b.susceptance
                )));
            }
            if let Some(c) = b.capacity {
                if !(c >= 0.0) || !c.is_finite() {
                    return Err(NetworkError::InvalidNetwork(format!(
                        "branch {i} has invalid capacity {c}"
                    )));
                }
            }
        }
        let net = Network { n, branches };
        if !net.is_connected() {
            return Err(NetworkError::DisconnectedNetwork);
        }
        Ok(net)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// n x m signed incidence matrix: +1 at the from-bus, -1 at the to-bus
    /// of each branch, so `incidence * f` is the net outflow per bus.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut inc = DMatrix::zeros(self.n, self.branches.len());
        for (j, b) in self.branches.iter().enumerate() {
            inc[(b.from, j)] = 1.0;
            inc[(b.to, j)] = -1.0;
        }
        inc
    }

    fn is_connected(&self) -> bool {
        if self.n == 1 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for b in &self.branches {
                let v = if b.from == u {
                    b.to
                } else if b.to == u {
                    b.from
                } else {
                    continue;
                };
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.n
    }
}

/// Incidence, cycle, and fundamental-flow machinery for one network.
///
/// `flow_basis` (R, m x (n-1)) sends the tree-branch flows to a full,
/// voltage-law-consistent branch flow vector; `cycle_matrix` (K) holds the
/// reactance-weighted cycle constraints with `K * flow_basis = 0`;
/// `injection_map` (A = incidence * R) sends fundamental flows to net bus
/// injections. Rows of `flow_basis` at `tree_branches` form the identity,
/// so fundamental coordinate j is literally the flow on tree branch j.
#[derive(Debug, Clone)]
pub struct FlowStructure {
    pub incidence: DMatrix<f64>,
    pub cycle_matrix: DMatrix<f64>,
    pub tree_branches: Vec<usize>,
    pub flow_basis: DMatrix<f64>,
    pub injection_map: DMatrix<f64>,
}

/// Builds the flow structure with a spanning tree discovered by BFS from
/// `tree_root`, scanning branches in ascending index order (deterministic).
pub fn build_flow_structure(net: &Network, tree_root: usize) -> Result<FlowStructure, NetworkError> {
    build_with_tree(net, tree_root, None)
}

/// Like `build_flow_structure`, but forces `branch` to be tree branch 0,
/// so its flow is fundamental coordinate 0. Used when a congested branch
/// must be pinned as the leading fundamental flow.
pub fn build_flow_structure_with_leading_branch(
    net: &Network,
    branch: usize,
) -> Result<FlowStructure, NetworkError> {
    if branch >= net.m() {
        return Err(NetworkError::DimensionMismatch {
            expected: net.m(),
            got: branch,
        });
    }
    build_with_tree(net, net.branches()[branch].from, Some(branch))
}

fn build_with_tree(
    net: &Network,
    tree_root: usize,
    forced_first: Option<usize>,
) -> Result<FlowStructure, NetworkError> {
    let n = net.n();
    let m = net.m();
    if tree_root >= n {
        return Err(NetworkError::DimensionMismatch {
            expected: n,
            got: tree_root,
        });
    }

    // BFS spanning tree; branch indices scanned ascending for determinism.
    let mut in_tree = vec![false; n];
    let mut tree_branches: Vec<usize> = Vec::with_capacity(n.saturating_sub(1));
    // parent[v] = (branch index, sign) with sign +1 if the branch points
    // parent -> v, -1 if it points v -> parent.
    let mut parent: Vec<Option<(usize, usize, f64)>> = vec![None; n];
    let mut queue = std::collections::VecDeque::new();
    in_tree[tree_root] = true;
    queue.push_back(tree_root);

    if let Some(first) = forced_first {
        let b = &net.branches()[first];
        let (u, v) = (b.from, b.to);
        debug_assert!(in_tree[u]);
        in_tree[v] = true;
        parent[v] = Some((first, u, 1.0));
        tree_branches.push(first);
        queue.push_back(v);
    }

    while let Some(u) = queue.pop_front() {
        for (j, b) in net.branches().iter().enumerate() {
            let (v, sign) = if b.from == u {
                (b.to, 1.0)
            } else if b.to == u {
                (b.from, -1.0)
            } else {
                continue;
            };
            if !in_tree[v] {
                in_tree[v] = true;
                parent[v] = Some((j, u, sign));
                tree_branches.push(j);
                queue.push_back(v);
            }
        }
    }
    if tree_branches.len() != n - 1 {
        return Err(NetworkError::DisconnectedNetwork);
    }

    // Column j of the flow basis: put unit flow on tree branch j, derive
    // the implied bus potentials over the tree, then evaluate every branch
    // flow from the potentials. Tree rows reproduce the identity exactly.
    let branches = net.branches();
    let mut flow_basis = DMatrix::zeros(m, n - 1);
    // Bus order from root outward lets potentials be filled in one pass.
    let mut bus_order: Vec<usize> = Vec::with_capacity(n);
    bus_order.push(tree_root);
    {
        let mut added = vec![false; n];
        added[tree_root] = true;
        while bus_order.len() < n {
            for v in 0..n {
                if added[v] {
                    continue;
                }
                if let Some((_, p, _)) = parent[v] {
                    if added[p] {
                        added[v] = true;
                        bus_order.push(v);
                    }
                }
            }
        }
    }
    for (col, &tb) in tree_branches.iter().enumerate() {
        let mut theta = vec![0.0f64; n];
        for &v in bus_order.iter().skip(1) {
            let (bj, p, sign) = parent[v].unwrap();
            // Flow on tree branch bj is 1 only when bj is the active one.
            let f = if bj == tb { 1.0 } else { 0.0 };
            // f (parent->v oriented) = susceptance * (theta_parent - theta_v)
            theta[v] = theta[p] - sign * f / branches[bj].susceptance;
        }
        for (bj, b) in branches.iter().enumerate() {
            flow_basis[(bj, col)] = b.susceptance * (theta[b.from] - theta[b.to]);
        }
        // Snap the tree rows to exact 0/1 to keep the identity block clean.
        for &tb2 in &tree_branches {
            flow_basis[(tb2, col)] = if tb2 == tb { 1.0 } else { 0.0 };
        }
    }

    // One cycle row per chord: the chord plus its tree path, weighted by
    // reactance (1/susceptance) so K f = 0 is the DC voltage law.
    let chords: Vec<usize> = (0..m).filter(|j| !tree_branches.contains(j)).collect();
    let mut cycle_matrix = DMatrix::zeros(chords.len(), m);
    for (row, &cj) in chords.iter().enumerate() {
        let b = &branches[cj];
        cycle_matrix[(row, cj)] = 1.0 / b.susceptance;
        // Tree path from b.to back to b.from: walk both endpoints to the
        // root, then cancel the common suffix.
        let path_to_root = |mut v: usize| {
            let mut path: Vec<(usize, f64)> = Vec::new();
            while let Some((bj, p, sign)) = parent[v] {
                // Traversing v -> parent goes against the stored sign.
                path.push((bj, -sign));
                v = p;
            }
            path
        };
        let mut from_path = path_to_root(b.from);
        let mut to_path = path_to_root(b.to);
        // Remove shared tail (edges above the lowest common ancestor).
        while let (Some(&a), Some(&c)) = (from_path.last(), to_path.last()) {
            if a.0 == c.0 {
                from_path.pop();
                to_path.pop();
            } else {
                break;
            }
        }
        // Loop orientation: chord (from -> to), then tree path to -> from.
        for (bj, dir) in to_path {
            cycle_matrix[(row, bj)] += dir / branches[bj].susceptance;
        }
        for (bj, dir) in from_path {
            cycle_matrix[(row, bj)] -= dir / branches[bj].susceptance;
        }
    }

    let incidence = net.incidence();
    let injection_map = &incidence * &flow_basis;
    Ok(FlowStructure {
        incidence,
        cycle_matrix,
        tree_branches,
        flow_basis,
        injection_map,
    })
}

/// Net bus injections produced by the fundamental flows `f_tilde`;
/// the result always sums to zero.
pub fn injections_from_fundamental(
    fs: &FlowStructure,
    f_tilde: &DVector<f64>,
) -> Result<DVector<f64>, NetworkError> {
    if f_tilde.len() != fs.injection_map.ncols() {
        return Err(NetworkError::DimensionMismatch {
            expected: fs.injection_map.ncols(),
            got: f_tilde.len(),
        });
    }
    Ok(&fs.injection_map * f_tilde)
}
