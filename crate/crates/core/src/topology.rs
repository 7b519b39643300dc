//! Node placement, hop-depth layering, routing tree, and layer-sized buffers.

use std::collections::VecDeque;
use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{NodeId, ScenarioConfig};

pub const SINK_ID: NodeId = 0;

/// Whole-layout attempts for [`Placement::Uniform`].
pub const UNIFORM_RETRIES: u32 = 200;
/// Candidate draws per node for [`Placement::Incremental`].
pub const INCREMENTAL_RETRIES: u32 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error(
        "no connected placement of {nodes} nodes with range {range_m} m in {area_m2} m² after {attempts} attempts"
    )]
    ConnectivityUnachievable { nodes: u32, range_m: f64, area_m2: f64, attempts: u32 },
    #[error("buffer selection names node {0}, which does not exist")]
    UnknownNodeId(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    /// Every node uniform in the square; the whole layout is redrawn until connected.
    Uniform,
    /// Nodes are added one at a time; each is drawn uniformly in the square and
    /// redrawn until it lands within range of a node already placed.
    #[default]
    Incremental,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BufferMode {
    None,
    #[default]
    Eq1,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum BufferSelection {
    #[default]
    AllInnerLayers,
    ExplicitList(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferPolicy {
    pub mode: BufferMode,
    pub proportionality_k: u32,
    pub selection: BufferSelection,
}

impl Default for BufferPolicy {
    fn default() -> Self {
        BufferPolicy { mode: BufferMode::Eq1, proportionality_k: 1, selection: BufferSelection::AllInnerLayers }
    }
}

impl BufferPolicy {
    pub fn disabled() -> Self {
        BufferPolicy { mode: BufferMode::None, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub position: (f64, f64),
    pub layer_n: u32,
    pub parent_id: Option<NodeId>,
    pub buffer_capacity_packets: u32,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<NodeState>,
    pub sink_id: NodeId,
    pub comm_range_m: f64,
    /// Sorted neighbour lists, indexed by node id.
    pub adjacency: Vec<Vec<NodeId>>,
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

impl Topology {
    /// Builds a topology from explicit positions; node 0 is the sink.
    ///
    /// Layers and parents are left unassigned; call [`assign_layers`].
    pub fn from_positions(positions: &[(f64, f64)], comm_range_m: f64, energy_j: f64) -> Topology {
        let nodes: Vec<NodeState> = positions
            .iter()
            .enumerate()
            .map(|(i, &position)| NodeState {
                id: i as NodeId,
                position,
                layer_n: 0,
                parent_id: None,
                buffer_capacity_packets: 0,
                energy_j,
            })
            .collect();
        let n = nodes.len();
        let mut adjacency = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if distance(positions[i], positions[j]) <= comm_range_m {
                    adjacency[i].push(j as NodeId);
                    adjacency[j].push(i as NodeId);
                }
            }
        }
        Topology { nodes, sink_id: SINK_ID, comm_range_m, adjacency }
    }

    pub fn node(&self, id: NodeId) -> &NodeState {
        &self.nodes[id as usize]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Hop distance from the sink for every node, `None` if unreachable.
    pub fn hop_depths(&self) -> Vec<Option<u32>> {
        let mut depth = vec![None; self.nodes.len()];
        let mut queue = VecDeque::new();
        depth[self.sink_id as usize] = Some(0);
        queue.push_back(self.sink_id);
        while let Some(u) = queue.pop_front() {
            let d = depth[u as usize].unwrap();
            for &v in &self.adjacency[u as usize] {
                if depth[v as usize].is_none() {
                    depth[v as usize] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        depth
    }

    pub fn is_connected(&self) -> bool {
        self.hop_depths().iter().all(Option::is_some)
    }

    /// Deepest node, lowest id on ties. `None` for a sink-only network.
    pub fn deepest_node(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.id != self.sink_id)
            .max_by(|a, b| a.layer_n.cmp(&b.layer_n).then(b.id.cmp(&a.id)))
            .map(|n| n.id)
    }

    /// Nodes from `id` to the sink, both ends included.
    pub fn route_to_sink(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.node(cur).parent_id {
            path.push(p);
            cur = p;
        }
        path
    }

    pub fn max_layer(&self) -> u32 {
        self.nodes.iter().map(|n| n.layer_n).max().unwrap_or(0)
    }

    /// Writes `node_id,x,y,layer_n,parent_id,buffer_capacity_packets`, sorted by id.
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node_id", "x", "y", "layer_n", "parent_id", "buffer_capacity_packets"])?;
        for n in &self.nodes {
            w.write_record([
                n.id.to_string(),
                format!("{:.3}", n.position.0),
                format!("{:.3}", n.position.1),
                n.layer_n.to_string(),
                n.parent_id.map(|p| p.to_string()).unwrap_or_default(),
                n.buffer_capacity_packets.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn place_uniform(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Option<Vec<(f64, f64)>> {
    let side = config.side_m();
    let center = (side / 2.0, side / 2.0);
    for _ in 0..UNIFORM_RETRIES {
        let mut pos = Vec::with_capacity(config.node_count as usize);
        pos.push(center);
        for _ in 1..config.node_count {
            pos.push((rng.gen_range(0.0..side), rng.gen_range(0.0..side)));
        }
        let topo = Topology::from_positions(&pos, config.comm_range_m, config.node_energy_j);
        if topo.is_connected() {
            return Some(pos);
        }
    }
    None
}

fn place_incremental(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Option<Vec<(f64, f64)>> {
    let side = config.side_m();
    let range = config.comm_range_m;
    let mut pos = Vec::with_capacity(config.node_count as usize);
    pos.push((side / 2.0, side / 2.0));
    for _ in 1..config.node_count {
        let mut placed = false;
        for _ in 0..INCREMENTAL_RETRIES {
            let c = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            if pos.iter().any(|&p| distance(p, c) <= range) {
                pos.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(pos)
}

/// Places the sink at the centre and the remaining nodes at seeded random
/// positions, then layers the result. Same seed, same layout.
pub fn generate(config: &ScenarioConfig) -> Result<Topology, TopologyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let (positions, attempts) = match config.placement {
        Placement::Uniform => (place_uniform(config, &mut rng), UNIFORM_RETRIES),
        Placement::Incremental => (place_incremental(config, &mut rng), INCREMENTAL_RETRIES),
    };
    let positions = positions.ok_or(TopologyError::ConnectivityUnachievable {
        nodes: config.node_count,
        range_m: config.comm_range_m,
        area_m2: config.area_m2,
        attempts,
    })?;
    let topo = Topology::from_positions(&positions, config.comm_range_m, config.node_energy_j);
    Ok(assign_layers(topo))
}

/// Layer = BFS hop depth from the sink; parent = lowest-id neighbour one layer closer.
pub fn assign_layers(mut topology: Topology) -> Topology {
    let depths = topology.hop_depths();
    for i in 0..topology.nodes.len() {
        let Some(d) = depths[i] else { continue };
        let parent = if d == 0 {
            None
        } else {
            topology.adjacency[i].iter().copied().filter(|&v| depths[v as usize] == Some(d - 1)).min()
        };
        let node = &mut topology.nodes[i];
        node.layer_n = d;
        node.parent_id = parent;
    }
    topology
}

/// Buffer capacity in packets for a node in layer `n`.
///
/// `k * (4 - n)` for layers 1..=3 and a single packet from layer 4 outward.
/// The sink (layer 0) and a disabled policy get no relay buffer.
pub fn buffer_size_packets(n: u32, policy: &BufferPolicy) -> u32 {
    if policy.mode == BufferMode::None || n == 0 {
        return 0;
    }
    if n < 4 {
        policy.proportionality_k * (4 - n)
    } else {
        1
    }
}

pub fn buffer_size_bytes(n: u32, policy: &BufferPolicy, packet_size_bytes: u32) -> u64 {
    buffer_size_packets(n, policy) as u64 * packet_size_bytes as u64
}

pub fn place_buffers(mut topology: Topology, policy: &BufferPolicy) -> Result<Topology, TopologyError> {
    if let BufferSelection::ExplicitList(ids) = &policy.selection {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= topology.nodes.len()) {
            return Err(TopologyError::UnknownNodeId(bad));
        }
    }
    for node in topology.nodes.iter_mut() {
        let selected = match &policy.selection {
            BufferSelection::AllInnerLayers => node.layer_n >= 1,
            BufferSelection::ExplicitList(ids) => ids.contains(&node.id),
        };
        node.buffer_capacity_packets = if selected { buffer_size_packets(node.layer_n, policy) } else { 0 };
    }
    Ok(topology)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eq1() -> BufferPolicy {
        BufferPolicy::default()
    }

    fn chain() -> Topology {
        // sink - A - B, 40 m links, 50 m range
        assign_layers(Topology::from_positions(&[(0.0, 0.0), (40.0, 0.0), (80.0, 0.0)], 50.0, 100.0))
    }

    #[test]
    fn eq1_sizes() {
        let p = eq1();
        assert_eq!(buffer_size_packets(1, &p), 3);
        assert_eq!(buffer_size_bytes(1, &p, 512), 1536);
        assert_eq!(buffer_size_packets(2, &p), 2);
        assert_eq!(buffer_size_packets(3, &p), 1);
        assert_eq!(buffer_size_packets(4, &p), 1);
        assert_eq!(buffer_size_packets(5, &p), 1);
        assert_eq!(buffer_size_packets(40, &p), 1);
    }

    #[test]
    fn layer_four_keeps_one_packet() {
        // k*(4-n) would give 0 at n = 4; the outer-layer size of 1 applies instead
        let p = eq1();
        assert_eq!(buffer_size_packets(4, &p), 1);
        assert!(buffer_size_packets(3, &p) >= buffer_size_packets(4, &p));
        assert!(buffer_size_packets(4, &p) >= buffer_size_packets(5, &p));
    }

    #[test]
    fn k_scales_inner_layers_only() {
        let p = BufferPolicy { proportionality_k: 3, ..eq1() };
        assert_eq!(buffer_size_packets(1, &p), 9);
        assert_eq!(buffer_size_packets(3, &p), 3);
        assert_eq!(buffer_size_packets(7, &p), 1);
    }

    #[test]
    fn chain_layers() {
        let t = chain();
        let layers: Vec<u32> = t.nodes.iter().map(|n| n.layer_n).collect();
        assert_eq!(layers, vec![0, 1, 2]);
        assert_eq!(t.node(2).parent_id, Some(1));
        assert_eq!(t.node(1).parent_id, Some(0));
        assert_eq!(t.node(0).parent_id, None);
    }

    #[test]
    fn star_is_one_layer() {
        let mut pos = vec![(0.0, 0.0)];
        for i in 0..5 {
            let a = i as f64 * std::f64::consts::TAU / 5.0;
            pos.push((30.0 * a.cos(), 30.0 * a.sin()));
        }
        let t = assign_layers(Topology::from_positions(&pos, 50.0, 1.0));
        assert!(t.nodes[1..].iter().all(|n| n.layer_n == 1 && n.parent_id == Some(0)));
    }

    #[test]
    fn parent_tie_goes_to_lowest_id() {
        // node 8 is two hops out and reaches the sink through either 3 or 7
        let mut pos: Vec<(f64, f64)> = (0..9).map(|i| (1_000.0 + 200.0 * i as f64, 1_000.0)).collect();
        pos[0] = (0.0, 0.0);
        pos[3] = (30.0, 30.0);
        pos[7] = (30.0, -30.0);
        pos[8] = (60.0, 0.0);
        let t = assign_layers(Topology::from_positions(&pos, 50.0, 1.0));
        assert_eq!(t.node(3).layer_n, 1);
        assert_eq!(t.node(7).layer_n, 1);
        assert_eq!(t.node(8).layer_n, 2);
        assert_eq!(t.node(8).parent_id, Some(3));
    }

    #[test]
    fn two_node_network() {
        let cfg = ScenarioConfig { node_count: 2, area_m2: 900.0, comm_range_m: 50.0, ..Default::default() };
        let t = generate(&cfg).unwrap();
        assert_eq!(t.edge_count(), 1);
        assert_eq!(t.node(1).layer_n, 1);
        assert_eq!(t.node(1).parent_id, Some(SINK_ID));
    }

    #[test]
    fn table1_defaults_are_connected_and_reproducible() {
        let cfg = ScenarioConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.is_connected());
        let side = cfg.side_m();
        assert_eq!(a.node(SINK_ID).position, (side / 2.0, side / 2.0));
        for n in &a.nodes[1..] {
            let p = a.node(n.parent_id.unwrap());
            assert!(distance(n.position, p.position) <= 50.0);
            assert_eq!(n.layer_n, p.layer_n + 1);
            assert!(n.position.0 >= 0.0 && n.position.0 <= side);
        }
    }

    #[test]
    fn uniform_placement_reports_unreachable_density() {
        let cfg = ScenarioConfig { placement: Placement::Uniform, ..Default::default() };
        assert!(matches!(generate(&cfg), Err(TopologyError::ConnectivityUnachievable { .. })));
    }

    #[test]
    fn uniform_placement_in_dense_field() {
        let cfg =
            ScenarioConfig { placement: Placement::Uniform, area_m2: 10_000.0, node_count: 30, ..Default::default() };
        let t = generate(&cfg).unwrap();
        assert!(t.is_connected());
    }

    #[test]
    fn all_inner_layers_on_chain() {
        let t = place_buffers(chain(), &eq1()).unwrap();
        let caps: Vec<u32> = t.nodes.iter().map(|n| n.buffer_capacity_packets).collect();
        assert_eq!(caps, vec![0, 3, 2]);
    }

    #[test]
    fn disabled_policy_clears_buffers() {
        let t = place_buffers(chain(), &eq1()).unwrap();
        let t = place_buffers(t, &BufferPolicy::disabled()).unwrap();
        assert!(t.nodes.iter().all(|n| n.buffer_capacity_packets == 0));
    }

    #[test]
    fn explicit_list_selects_only_listed_nodes() {
        let p = BufferPolicy { selection: BufferSelection::ExplicitList(vec![1]), ..eq1() };
        let t = place_buffers(chain(), &p).unwrap();
        let caps: Vec<u32> = t.nodes.iter().map(|n| n.buffer_capacity_packets).collect();
        assert_eq!(caps, vec![0, 3, 0]);
        let p = BufferPolicy { selection: BufferSelection::ExplicitList(vec![1, 9]), ..eq1() };
        assert_eq!(place_buffers(chain(), &p), Err(TopologyError::UnknownNodeId(9)));
    }

    #[test]
    fn csv_rows_sorted_by_id() {
        let t = place_buffers(chain(), &eq1()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "node_id,x,y,layer_n,parent_id,buffer_capacity_packets");
        assert_eq!(lines[1], "0,0.000,0.000,0,,0");
        assert_eq!(lines[3], "2,80.000,0.000,2,1,2");
    }

    /// Bellman-Ford style relaxation over the edge list; independent of BFS.
    fn brute_force_depths(t: &Topology) -> Vec<Option<u32>> {
        let n = t.len();
        let mut d: Vec<Option<u32>> = vec![None; n];
        d[0] = Some(0);
        for _ in 0..n {
            for u in 0..n {
                for v in 0..n {
                    if u != v && distance(t.nodes[u].position, t.nodes[v].position) <= t.comm_range_m {
                        if let Some(du) = d[u] {
                            if d[v].is_none_or(|dv| du + 1 < dv) {
                                d[v] = Some(du + 1);
                            }
                        }
                    }
                }
            }
        }
        d
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn layers_match_brute_force(seed in any::<u64>(), n in 2u32..40) {
            let cfg = ScenarioConfig { rng_seed: seed, node_count: n, area_m2: 40_000.0, ..Default::default() };
            let t = generate(&cfg).unwrap();
            let oracle = brute_force_depths(&t);
            for node in &t.nodes {
                prop_assert_eq!(Some(node.layer_n), oracle[node.id as usize]);
                if let Some(p) = node.parent_id {
                    prop_assert_eq!(t.node(p).layer_n + 1, node.layer_n);
                    prop_assert!(distance(node.position, t.node(p).position) <= cfg.comm_range_m);
                }
            }
        }

        #[test]
        fn buffer_size_positive_and_non_increasing(n in 1u32..1000, k in 1u32..50) {
            let p = BufferPolicy { proportionality_k: k, ..BufferPolicy::default() };
            prop_assert!(buffer_size_packets(n, &p) >= 1);
            prop_assert!(buffer_size_packets(n + 1, &p) <= buffer_size_packets(n, &p));
        }
    }
}
