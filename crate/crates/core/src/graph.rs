//! Bubble diagrams: typed rooms plus required adjacencies.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use bubblegan_autograd::Tensor;

pub const NUM_ROOM_TYPES: usize = 10;
pub const NOISE_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum RoomType {
    LivingRoom,
    Kitchen,
    Bedroom,
    Bathroom,
    Closet,
    Balcony,
    Corridor,
    DiningRoom,
    LaundryRoom,
    Unknown,
}

impl RoomType {
    pub const ALL: [RoomType; NUM_ROOM_TYPES] = [
        RoomType::LivingRoom,
        RoomType::Kitchen,
        RoomType::Bedroom,
        RoomType::Bathroom,
        RoomType::Closet,
        RoomType::Balcony,
        RoomType::Corridor,
        RoomType::DiningRoom,
        RoomType::LaundryRoom,
        RoomType::Unknown,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RoomType::LivingRoom => "living room",
            RoomType::Kitchen => "kitchen",
            RoomType::Bedroom => "bedroom",
            RoomType::Bathroom => "bathroom",
            RoomType::Closet => "closet",
            RoomType::Balcony => "balcony",
            RoomType::Corridor => "corridor",
            RoomType::DiningRoom => "dining room",
            RoomType::LaundryRoom => "laundry room",
            RoomType::Unknown => "unknown",
        }
    }
}

impl fmt::Display for RoomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<usize> for RoomType {
    type Error = String;

    fn try_from(id: usize) -> Result<Self, Self::Error> {
        Self::from_id(id).ok_or_else(|| format!("room type id {id} out of range"))
    }
}

impl From<RoomType> for usize {
    fn from(t: RoomType) -> usize {
        t.id()
    }
}

pub fn one_hot(room_type: RoomType) -> [f64; NUM_ROOM_TYPES] {
    let mut v = [0.0; NUM_ROOM_TYPES];
    v[room_type.id()] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("self-loop on room {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) references a room that does not exist")]
    IndexOutOfRange(usize, usize),
    #[error("a bubble diagram needs at least one room")]
    EmptyGraph,
}

/// Labeled undirected graph of rooms. Edges are stored once as `(min, max)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BubbleDiagram {
    room_types: Vec<RoomType>,
    edges: BTreeSet<(usize, usize)>,
}

impl BubbleDiagram {
    /// Builds a validated diagram; edge order and orientation do not matter.
    pub fn new(
        room_types: Vec<RoomType>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let m = room_types.len();
        if m == 0 {
            return Err(GraphError::EmptyGraph);
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if i >= m || j >= m {
                return Err(GraphError::IndexOutOfRange(i, j));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self { room_types, edges: set })
    }

    pub fn num_rooms(&self) -> usize {
        self.room_types.len()
    }

    pub fn room_types(&self) -> &[RoomType] {
        &self.room_types
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Edges in canonical (sorted) order.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn neighbors(&self, r: usize) -> Vec<usize> {
        (0..self.num_rooms())
            .filter(|&s| s != r && self.has_edge(r, s))
            .collect()
    }

    /// Rooms other than `r` that are not connected to it.
    pub fn non_neighbors(&self, r: usize) -> Vec<usize> {
        (0..self.num_rooms())
            .filter(|&s| s != r && !self.has_edge(r, s))
            .collect()
    }

    pub fn degree(&self, r: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == r || b == r).count()
    }

    /// Row-major `M×M` 0/1 adjacency, zero diagonal.
    pub fn adjacency_matrix(&self) -> Vec<f64> {
        let m = self.num_rooms();
        let mut a = vec![0.0; m * m];
        for &(i, j) in &self.edges {
            a[i * m + j] = 1.0;
            a[j * m + i] = 1.0;
        }
        a
    }

    /// Row-major `M×M` 0/1 indicator of distinct, unconnected pairs.
    pub fn non_adjacency_matrix(&self) -> Vec<f64> {
        let m = self.num_rooms();
        let a = self.adjacency_matrix();
        (0..m * m)
            .map(|k| if k / m != k % m && a[k] == 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    /// Multi-hot vector of the room types present.
    pub fn type_presence(&self) -> [f64; NUM_ROOM_TYPES] {
        let mut v = [0.0; NUM_ROOM_TYPES];
        for t in &self.room_types {
            v[t.id()] = 1.0;
        }
        v
    }

    /// Re-validate the invariants (useful after deserialization).
    pub fn validate(&self) -> Result<(), GraphError> {
        Self::new(self.room_types.clone(), self.edges.iter().copied()).map(|_| ())
    }

    /// Relabel rooms: room `k` of the result is room `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.num_rooms());
        let mut inverse = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let types = perm.iter().map(|&p| self.room_types[p]).collect();
        let edges = self.edges.iter().map(|&(i, j)| (inverse[i], inverse[j]));
        Self::new(types, edges).expect("permutation preserves validity")
    }
}

/// Validate raw parts without building a diagram.
pub fn validate(room_types: &[RoomType], edges: &[(usize, usize)]) -> Result<(), GraphError> {
    BubbleDiagram::new(room_types.to_vec(), edges.iter().copied()).map(|_| ())
}

/// 128-d standard-normal noise followed by the 10-d one-hot room type.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInput(pub Vec<f64>);

impl NodeInput {
    pub fn noise(&self) -> &[f64] {
        &self.0[..self.0.len() - NUM_ROOM_TYPES]
    }

    pub fn type_part(&self) -> &[f64] {
        &self.0[self.0.len() - NUM_ROOM_TYPES..]
    }
}

pub fn build_node_input(room_type: RoomType, rng: &mut impl Rng) -> NodeInput {
    build_node_input_with_dim(room_type, NOISE_DIM, rng)
}

pub fn build_node_input_with_dim(room_type: RoomType, noise_dim: usize, rng: &mut impl Rng) -> NodeInput {
    let mut v: Vec<f64> = (0..noise_dim).map(|_| rng.sample(StandardNormal)).collect();
    v.extend_from_slice(&one_hot(room_type));
    NodeInput(v)
}

/// All-pairs shortest path lengths; `-1` marks unreachable pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightedAdjacency {
    size: usize,
    entries: Vec<i64>,
}

impl WeightedAdjacency {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.entries[i * self.size + j]
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&v| v as f64).collect()
    }
}

/// Breadth-first search from every room.
pub fn shortest_path_matrix(diagram: &BubbleDiagram) -> WeightedAdjacency {
    let m = diagram.num_rooms();
    let adj: Vec<Vec<usize>> = (0..m).map(|r| diagram.neighbors(r)).collect();
    let mut entries = vec![-1i64; m * m];
    let mut queue = VecDeque::new();
    for src in 0..m {
        let row = &mut entries[src * m..(src + 1) * m];
        row[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if row[v] < 0 {
                    row[v] = row[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    WeightedAdjacency { size: m, entries }
}

/// Unlabeled undirected structure that attention and graph convolution run
/// over: a diagram, an induced subgraph of one, or a line graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    adj: Vec<bool>,
}

impl Topology {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adj = vec![false; n * n];
        for (i, j) in edges {
            assert!(i < n && j < n && i != j, "bad edge ({i}, {j}) for {n} nodes");
            adj[i * n + j] = true;
            adj[j * n + i] = true;
        }
        Self { n, adj }
    }

    pub fn from_diagram(d: &BubbleDiagram) -> Self {
        Self::from_edges(d.num_rooms(), d.edges().iter().copied())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn degree(&self, r: usize) -> usize {
        self.adj[r * self.n..(r + 1) * self.n].iter().filter(|&&b| b).count()
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().filter(|&&b| b).count() / 2
    }

    /// Subgraph on `keep`, renumbered in the given order.
    pub fn induced(&self, keep: &[usize]) -> Self {
        let k = keep.len();
        let mut adj = vec![false; k * k];
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                adj[a * k + b] = self.connected(i, j);
            }
        }
        Self { n: k, adj }
    }

    /// Row-major membership of `N(r)`.
    pub fn connected_mask(&self) -> Vec<bool> {
        self.adj.clone()
    }

    /// Row-major membership of the non-neighbors of `r` (excluding `r`).
    pub fn non_connected_mask(&self) -> Vec<bool> {
        (0..self.n * self.n)
            .map(|k| k / self.n != k % self.n && !self.adj[k])
            .collect()
    }

    fn mask_tensor(&self, mask: &[bool], self_loops: bool) -> Tensor {
        let n = self.n;
        let data = (0..n * n)
            .map(|k| if mask[k] || (self_loops && k / n == k % n) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(data, &[n, n])
    }

    pub fn adjacency(&self) -> Tensor {
        self.mask_tensor(&self.adj, false)
    }

    pub fn complement(&self) -> Tensor {
        self.mask_tensor(&self.non_connected_mask(), false)
    }

    /// `A + I`.
    pub fn adjacency_with_self_loops(&self) -> Tensor {
        self.mask_tensor(&self.adj, true)
    }
}
