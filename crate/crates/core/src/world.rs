//! Synthetic navigation worlds.
//!
//! A world is a connected graph of nodes grouped into labelled rooms, with
//! one target object placed in a goal room (and possibly in distractor
//! rooms). Edge lengths are Euclidean distances snapped to a fixed binary
//! grid, so every path length is an exact multiple of [`DIST_EPS`] and
//! per-step progress deltas telescope to the episode goal progress without
//! rounding slack.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world parameters: {0}")]
    InvalidParams(String),
    #[error("node {0} not in world")]
    NodeNotFound(usize),
    #[error("node {0} unreachable; world invariant broken")]
    Unreachable(usize),
}

pub type WorldResult<T> = Result<T, WorldError>;

/// Distance quantum in meters: a power of two, so grid distances and their
/// differences are exact in f64.
pub const DIST_EPS: f64 = 1.0 / (1 << 20) as f64;

/// Room label words, reused cyclically when a world has more rooms.
pub const ROOM_LABELS: [&str; 12] = [
    "kitchen", "hallway", "bedroom", "bathroom", "office", "library", "garage", "balcony",
    "studio", "pantry", "lounge", "attic",
];

/// Compass direction words indexed by heading.
pub const DIRECTION_WORDS: [&str; 4] = ["east", "north", "west", "south"];

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RoomId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldNode {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
    pub room: RoomId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub id: RoomId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub nodes: Vec<WorldNode>,
    /// Undirected edges as node-id pairs, stored once with lhs < rhs.
    pub edges: Vec<(NodeId, NodeId)>,
    pub rooms: Vec<Room>,
    pub target_object: String,
    pub goal_room: RoomId,
    /// Rooms that also contain the target object but are not the goal.
    pub distractor_rooms: Vec<RoomId>,
    /// Observation feature dimension.
    pub d_img: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldParams {
    pub num_rooms: usize,
    pub nodes_per_room: usize,
    pub object_vocab: Vec<String>,
    pub d_img: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            num_rooms: 6,
            nodes_per_room: 2,
            object_vocab: vec![
                "lamp".into(),
                "plant".into(),
                "vase".into(),
                "clock".into(),
            ],
            d_img: 64,
        }
    }
}

/// Navigator state: a node plus one of four compass headings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub node: NodeId,
    pub heading: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Forward,
    Left,
    Right,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::Left, Action::Right, Action::Stop];

    pub fn index(self) -> usize {
        match self {
            Action::Forward => 0,
            Action::Left => 1,
            Action::Right => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn word(self) -> &'static str {
        match self {
            Action::Forward => "forward",
            Action::Left => "left",
            Action::Right => "right",
            Action::Stop => "stop",
        }
    }
}

/// Deterministic pseudo-visual features in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f32>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl World {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> WorldResult<&WorldNode> {
        self.nodes.get(id.0).ok_or(WorldError::NodeNotFound(id.0))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.nodes.len()
    }

    /// Canonical goal node: the smallest node id inside the goal room.
    pub fn goal_node(&self) -> NodeId {
        self.nodes
            .iter()
            .find(|n| n.room == self.goal_room)
            .map(|n| n.id)
            .expect("goal room has nodes")
    }

    pub fn room_label(&self, room: RoomId) -> &str {
        &self.rooms[room.0].label
    }

    /// Quantized edge length in grid units.
    fn edge_units(&self, a: NodeId, b: NodeId) -> u64 {
        let na = &self.nodes[a.0];
        let nb = &self.nodes[b.0];
        let d = ((na.x - nb.x).powi(2) + (na.y - nb.y).powi(2)).sqrt();
        ((d / DIST_EPS).round() as u64).max(1)
    }

    /// Neighbors with the compass bucket of the direction toward each,
    /// sorted by node id.
    pub fn neighbors(&self, id: NodeId) -> Vec<(NodeId, u8)> {
        let mut out: Vec<(NodeId, u8)> = self
            .edges
            .iter()
            .filter_map(|(a, b)| {
                if *a == id {
                    Some(*b)
                } else if *b == id {
                    Some(*a)
                } else {
                    None
                }
            })
            .map(|n| (n, self.direction_bucket(id, n)))
            .collect();
        out.sort();
        out
    }

    /// Quantize the angle from `from` to `to` into 4 compass sectors:
    /// 0 = east, 1 = north, 2 = west, 3 = south.
    pub fn direction_bucket(&self, from: NodeId, to: NodeId) -> u8 {
        let a = &self.nodes[from.0];
        let b = &self.nodes[to.0];
        let angle = (b.y - a.y).atan2(b.x - a.x);
        let quarter = angle / std::f64::consts::FRAC_PI_2;
        (quarter.round().rem_euclid(4.0)) as u8 % 4
    }
}

/// Generate a world: rooms on a jittered grid, nodes clustered per room, a
/// spanning set of inter-room edges plus a few random extras.
pub fn generate_world(seed: u64, params: &WorldParams) -> WorldResult<World> {
    if params.num_rooms < 2 {
        return Err(WorldError::InvalidParams(format!(
            "num_rooms must be >= 2, got {}",
            params.num_rooms
        )));
    }
    if params.nodes_per_room < 1 {
        return Err(WorldError::InvalidParams(
            "nodes_per_room must be >= 1".into(),
        ));
    }
    if params.object_vocab.is_empty() {
        return Err(WorldError::InvalidParams("object_vocab is empty".into()));
    }
    if params.d_img == 0 {
        return Err(WorldError::InvalidParams("d_img must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
    let r = params.num_rooms;
    let npr = params.nodes_per_room;
    let grid_w = (r as f64).sqrt().ceil() as usize;
    const SPACING: f64 = 8.0;

    let mut nodes = Vec::with_capacity(r * npr);
    let mut rooms = Vec::with_capacity(r);
    for room_idx in 0..r {
        let gx = (room_idx % grid_w) as f64;
        let gy = (room_idx / grid_w) as f64;
        let cx = gx * SPACING + rng.random_range(-1.0..1.0);
        let cy = gy * SPACING + rng.random_range(-1.0..1.0);
        rooms.push(Room {
            id: RoomId(room_idx),
            // Rotate by seed so different worlds use different label sets.
            label: ROOM_LABELS[(room_idx + seed as usize) % ROOM_LABELS.len()].to_string(),
        });
        for j in 0..npr {
            let (x, y) = if j == 0 {
                (cx, cy)
            } else {
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let rad = rng.random_range(1.0..2.5);
                (cx + ang.cos() * rad, cy + ang.sin() * rad)
            };
            nodes.push(WorldNode {
                id: NodeId(room_idx * npr + j),
                x,
                y,
                room: RoomId(room_idx),
            });
        }
    }

    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    let push_edge = |edges: &mut Vec<(NodeId, NodeId)>, a: NodeId, b: NodeId| {
        if a == b {
            return;
        }
        let e = if a < b { (a, b) } else { (b, a) };
        if !edges.contains(&e) {
            edges.push(e);
        }
    };
    // Star within each room.
    for room_idx in 0..r {
        let hub = NodeId(room_idx * npr);
        for j in 1..npr {
            push_edge(&mut edges, hub, NodeId(room_idx * npr + j));
        }
    }
    // Grid-adjacent rooms joined through their mutually closest nodes.
    let closest_pair = |nodes: &[WorldNode], ra: usize, rb: usize| {
        let mut best = (NodeId(ra * npr), NodeId(rb * npr));
        let mut best_d = f64::INFINITY;
        for i in 0..npr {
            for j in 0..npr {
                let a = &nodes[ra * npr + i];
                let b = &nodes[rb * npr + j];
                let d = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
                if d < best_d {
                    best_d = d;
                    best = (a.id, b.id);
                }
            }
        }
        best
    };
    for room_idx in 0..r {
        let gx = room_idx % grid_w;
        if gx + 1 < grid_w && room_idx + 1 < r {
            let (a, b) = closest_pair(&nodes, room_idx, room_idx + 1);
            push_edge(&mut edges, a, b);
        }
        if room_idx + grid_w < r {
            let (a, b) = closest_pair(&nodes, room_idx, room_idx + grid_w);
            push_edge(&mut edges, a, b);
        }
    }
    // A few seed-dependent shortcuts.
    let extras = rng.random_range(0..=r / 2);
    for _ in 0..extras {
        let a = NodeId(rng.random_range(0..nodes.len()));
        let b = NodeId(rng.random_range(0..nodes.len()));
        if nodes[a.0].room != nodes[b.0].room {
            push_edge(&mut edges, a, b);
        }
    }

    let target_object = params.object_vocab[rng.random_range(0..params.object_vocab.len())].clone();
    let extra_containing = rng.random_range(0..=2.min(r - 1));
    let mut containing: Vec<RoomId> = Vec::new();
    while containing.len() < 1 + extra_containing {
        let candidate = RoomId(rng.random_range(0..r));
        if !containing.contains(&candidate) {
            containing.push(candidate);
        }
    }
    let goal_room = containing[rng.random_range(0..containing.len())];
    let mut distractor_rooms: Vec<RoomId> =
        containing.into_iter().filter(|c| *c != goal_room).collect();
    distractor_rooms.sort();

    let world = World {
        seed,
        nodes,
        edges,
        rooms,
        target_object,
        goal_room,
        distractor_rooms,
        d_img: params.d_img,
    };
    debug_assert!(world_connected(&world));
    Ok(world)
}

fn world_connected(w: &World) -> bool {
    let n = w.num_nodes();
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for (nb, _) in w.neighbors(NodeId(i)) {
            if !seen[nb.0] {
                seen[nb.0] = true;
                stack.push(nb.0);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Apply one action. Total and deterministic: turning rotates the heading,
/// `Forward` moves to a neighbor in the faced compass bucket when one
/// exists (smallest node id wins) and is a no-op otherwise.
pub fn step(world: &World, pose: Pose, action: Action) -> Pose {
    match action {
        Action::Stop => pose,
        Action::Left => Pose {
            node: pose.node,
            heading: (pose.heading + 1) % 4,
        },
        Action::Right => Pose {
            node: pose.node,
            heading: (pose.heading + 3) % 4,
        },
        Action::Forward => {
            let target = world
                .neighbors(pose.node)
                .into_iter()
                .find(|(_, bucket)| *bucket == pose.heading)
                .map(|(n, _)| n);
            match target {
                Some(node) => Pose {
                    node,
                    heading: pose.heading,
                },
                None => pose,
            }
        }
    }
}

/// Dijkstra distances from `from` in grid units, with ties expanded in
/// node-id order.
fn dijkstra(world: &World, from: NodeId) -> Vec<(u64, Option<NodeId>)> {
    let n = world.num_nodes();
    let mut dist: Vec<u64> = vec![u64::MAX; n];
    let mut parent: Vec<Option<NodeId>> = vec![None; n];
    let mut heap: BinaryHeap<std::cmp::Reverse<(u64, usize)>> = BinaryHeap::new();
    dist[from.0] = 0;
    heap.push(std::cmp::Reverse((0, from.0)));
    while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for (v, _) in world.neighbors(NodeId(u)) {
            let nd = d + world.edge_units(NodeId(u), v);
            if nd < dist[v.0] {
                dist[v.0] = nd;
                parent[v.0] = Some(NodeId(u));
                heap.push(std::cmp::Reverse((nd, v.0)));
            }
        }
    }
    dist.into_iter().zip(parent).collect()
}

/// Minimal-length node sequence from `from` toward `to`, excluding `from`.
/// `horizon` truncates to the first steps; `None` returns the full path.
pub fn shortest_path(
    world: &World,
    from: NodeId,
    to: NodeId,
    horizon: Option<usize>,
) -> WorldResult<Vec<NodeId>> {
    if !world.contains(from) {
        return Err(WorldError::NodeNotFound(from.0));
    }
    if !world.contains(to) {
        return Err(WorldError::NodeNotFound(to.0));
    }
    if from == to {
        return Ok(Vec::new());
    }
    let table = dijkstra(world, from);
    if table[to.0].0 == u64::MAX {
        return Err(WorldError::Unreachable(to.0));
    }
    let mut path = Vec::new();
    let mut cur = to;
    while cur != from {
        path.push(cur);
        cur = table[cur.0].1.expect("parent chain reaches source");
    }
    path.reverse();
    if let Some(h) = horizon {
        path.truncate(h);
    }
    Ok(path)
}

/// Shortest-path distance in meters (an exact multiple of [`DIST_EPS`]).
pub fn distance(world: &World, from: NodeId, to: NodeId) -> WorldResult<f64> {
    Ok(distance_units(world, from, to)? as f64 * DIST_EPS)
}

pub(crate) fn distance_units(world: &World, from: NodeId, to: NodeId) -> WorldResult<u64> {
    if !world.contains(from) {
        return Err(WorldError::NodeNotFound(from.0));
    }
    if !world.contains(to) {
        return Err(WorldError::NodeNotFound(to.0));
    }
    if from == to {
        return Ok(0);
    }
    let table = dijkstra(world, from);
    match table[to.0].0 {
        u64::MAX => Err(WorldError::Unreachable(to.0)),
        d => Ok(d),
    }
}

/// Distance reduction toward the goal between two positions, in meters.
/// May be negative when the agent moved away.
pub fn goal_progress(world: &World, start: NodeId, end: NodeId, goal: NodeId) -> WorldResult<f64> {
    let ds = distance_units(world, start, goal)? as i64;
    let de = distance_units(world, end, goal)? as i64;
    Ok((ds - de) as f64 * DIST_EPS)
}

/// Deterministic pseudo-features for a pose, expanded from seeded hashes
/// and bounded to [-1, 1].
///
/// The expansion is keyed in three blocks, mirroring what a visual
/// embedding carries across houses: a block keyed on the heading alone
/// (views facing the same compass direction share structure), a block
/// keyed on the room label alone (kitchens look like kitchens anywhere),
/// and the remainder keyed on the full (world seed, node, heading) triple,
/// which is unique noise like unfamiliar scene detail.
pub fn observation(world: &World, pose: Pose) -> Observation {
    let unit = |h: u64| ((h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as f32;
    let d = world.d_img;
    let heading_block = (d / 4).min(8);
    let label_block = (d / 4).min(16);
    let label = world.room_label(world.nodes[pose.node.0].room);
    let label_key = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |acc, b| {
            (acc ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
    let base = splitmix64(
        world
            .seed
            .wrapping_mul(0x1000_0000_1b3)
            .wrapping_add((pose.node.0 as u64) << 8)
            .wrapping_add(pose.heading as u64),
    );
    let features = (0..d)
        .map(|i| {
            if i < heading_block {
                unit(splitmix64(
                    0x5ead_0000u64 + pose.heading as u64 * 131 + i as u64,
                ))
            } else if i < heading_block + label_block {
                unit(splitmix64(label_key.wrapping_add(i as u64)))
            } else {
                unit(splitmix64(base.wrapping_add(i as u64)))
            }
        })
        .collect();
    Observation { features }
}

/// Next action a shortest-path teacher takes from `pose` toward `goal`:
/// `Stop` at the goal, otherwise turn toward (or advance along) the first
/// planner step.
pub fn teacher_action(world: &World, pose: Pose, goal: NodeId) -> WorldResult<Action> {
    if pose.node == goal {
        return Ok(Action::Stop);
    }
    let path = shortest_path(world, pose.node, goal, Some(1))?;
    let next = path[0];
    let want = world.direction_bucket(pose.node, next);
    let delta = (4 + want as i8 - pose.heading as i8) % 4;
    Ok(match delta {
        0 => Action::Forward,
        1 => Action::Left,
        _ => Action::Right,
    })
}

/// Hand-built 3-node line a-b-c with unit edges along +x. Test fixture.
#[cfg(test)]
pub(crate) fn line_world() -> World {
    World {
        seed: 0,
        nodes: vec![
            WorldNode { id: NodeId(0), x: 0.0, y: 0.0, room: RoomId(0) },
            WorldNode { id: NodeId(1), x: 1.0, y: 0.0, room: RoomId(0) },
            WorldNode { id: NodeId(2), x: 2.0, y: 0.0, room: RoomId(1) },
        ],
        edges: vec![(NodeId(0), NodeId(1)), (NodeId(1), NodeId(2))],
        rooms: vec![
            Room { id: RoomId(0), label: "hallway".into() },
            Room { id: RoomId(1), label: "kitchen".into() },
        ],
        target_object: "lamp".into(),
        goal_room: RoomId(1),
        distractor_rooms: vec![],
        d_img: 8,
    }
}
