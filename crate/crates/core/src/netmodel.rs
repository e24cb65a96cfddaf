//! Topology, link timing and the per-mode message flows.
//!
//! Links are store-and-forward: a hop costs serialization plus propagation
//! plus a fixed per-hop processing delay, and multi-hop paths sum their hops.
//! There is no queueing or contention model.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::model::{
    LinkClass, LinkSpec, Message, Modality, ModalitySet, Mode, ModeVariant, Node, NodeId, NodeKind,
};

pub const CLOUD_UPLINK_BPS: f64 = 50e6;
pub const CLOUD_UPLINK_PROPAGATION_S: f64 = 5e-3;
pub const EDGE_LOCAL_BPS: f64 = 1e9;
pub const EDGE_LOCAL_PROPAGATION_S: f64 = 0.5e-3;
pub const PEER_D2D_BPS: f64 = 1e9;
pub const PEER_D2D_PROPAGATION_S: f64 = 0.1e-3;
pub const PER_HOP_PROCESSING_S: f64 = 1e-3;

/// Reference size of an aggregated four-modality feature upload.
pub const GFM_FEATURE_PAYLOAD_BYTES: u64 = 2_000_000;
/// Frame size for directives and peer alerts.
pub const TEXT_FRAME_BYTES: u64 = 2_048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("link {0}-{1} is down")]
    LinkDown(NodeId, NodeId),
    #[error("no {mode} route from {src} to {dst}")]
    NoRoute { src: NodeId, dst: NodeId, mode: Mode },
    #[error("{variant} has no feasible flow: {reason}")]
    NoFlow { variant: ModeVariant, reason: String },
    #[error("empty path")]
    EmptyPath,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("topology needs exactly one cloud node, found {0}")]
    CloudCount(usize),
    #[error("topology needs at least one edge node")]
    NoEdge,
    #[error("topology needs at least two terminals, found {0}")]
    TooFewTerminals(usize),
    #[error("node {0}: sensors must be non-empty exactly for terminals")]
    Sensors(NodeId),
    #[error("link {0}-{1} references an unknown node")]
    UnknownEndpoint(NodeId, NodeId),
    #[error("link {0}-{1} has invalid bandwidth or delay")]
    InvalidLink(NodeId, NodeId),
    #[error("link {a}-{b} of class {class} joins {ka} and {kb}")]
    ClassMismatch {
        a: NodeId,
        b: NodeId,
        class: LinkClass,
        ka: NodeKind,
        kb: NodeKind,
    },
    #[error("terminal {0} has no edge-local link")]
    TerminalWithoutEdge(NodeId),
    #[error("edge {0} has no cloud uplink")]
    EdgeWithoutUplink(NodeId),
}

/// Serialization plus propagation plus processing for one hop.
pub fn transmit_latency(payload_bytes: u64, link: &LinkSpec) -> Result<f64, NetError> {
    if !link.up {
        return Err(NetError::LinkDown(link.endpoints.0, link.endpoints.1));
    }
    Ok(payload_bytes as f64 * 8.0 / link.bandwidth_bits_per_s
        + link.propagation_s
        + link.per_hop_processing_s)
}

/// Store-and-forward latency of `msg` over `path`.
pub fn path_latency(msg: &Message, path: &[LinkSpec]) -> Result<f64, NetError> {
    if path.is_empty() {
        return Err(NetError::EmptyPath);
    }
    path.iter()
        .map(|l| transmit_latency(msg.payload_bytes, l))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Node>,
    links: Vec<LinkSpec>,
}

impl Topology {
    pub fn new(nodes: Vec<Node>, links: Vec<LinkSpec>) -> Result<Self, TopologyError> {
        let mut map = BTreeMap::new();
        for n in nodes {
            let id = n.id;
            let is_terminal = n.kind == NodeKind::Terminal;
            if is_terminal == n.sensors.is_empty() {
                return Err(TopologyError::Sensors(id));
            }
            if map.insert(id, n).is_some() {
                return Err(TopologyError::DuplicateNode(id));
            }
        }
        let count = |k: NodeKind| map.values().filter(|n| n.kind == k).count();
        if count(NodeKind::Cloud) != 1 {
            return Err(TopologyError::CloudCount(count(NodeKind::Cloud)));
        }
        if count(NodeKind::Edge) == 0 {
            return Err(TopologyError::NoEdge);
        }
        if count(NodeKind::Terminal) < 2 {
            return Err(TopologyError::TooFewTerminals(count(NodeKind::Terminal)));
        }
        for l in &links {
            let (a, b) = l.endpoints;
            let (Some(na), Some(nb)) = (map.get(&a), map.get(&b)) else {
                return Err(TopologyError::UnknownEndpoint(a, b));
            };
            if !l.is_valid() || a == b {
                return Err(TopologyError::InvalidLink(a, b));
            }
            let kinds = [na.kind, nb.kind];
            let ok = match l.class {
                LinkClass::CloudUplink => {
                    kinds.contains(&NodeKind::Edge) && kinds.contains(&NodeKind::Cloud)
                }
                LinkClass::EdgeLocal => {
                    kinds.contains(&NodeKind::Edge) && kinds.contains(&NodeKind::Terminal)
                }
                LinkClass::PeerD2D => kinds == [NodeKind::Terminal, NodeKind::Terminal],
            };
            if !ok {
                return Err(TopologyError::ClassMismatch {
                    a,
                    b,
                    class: l.class,
                    ka: na.kind,
                    kb: nb.kind,
                });
            }
        }
        let topo = Topology { nodes: map, links };
        for n in topo.nodes.values() {
            let has = |class| topo.links.iter().any(|l| l.class == class && l.touches(n.id));
            match n.kind {
                NodeKind::Terminal if !has(LinkClass::EdgeLocal) => {
                    return Err(TopologyError::TerminalWithoutEdge(n.id))
                }
                NodeKind::Edge if !has(LinkClass::CloudUplink) => {
                    return Err(TopologyError::EdgeWithoutUplink(n.id))
                }
                _ => {}
            }
        }
        Ok(topo)
    }

    /// One cloud (0), one edge (1) and three sensing terminals on a
    /// full D2D mesh: a radar unit {P,M} (2), a camera unit {P,I} (3) and a
    /// LiDAR unit {P,C} (4).
    pub fn default_cet() -> Self {
        use Modality::*;
        let p = ModalitySet::EMPTY.with(RfPower);
        let nodes = vec![
            Node::infrastructure(0, NodeKind::Cloud),
            Node::infrastructure(1, NodeKind::Edge),
            Node::terminal(2, p.with(MmWave), [0.0, 0.0]),
            Node::terminal(3, p.with(Image), [12.0, 34.0]),
            Node::terminal(4, p.with(PointCloud), [-20.0, 8.0]),
        ];
        let mut links = vec![LinkSpec::new(
            NodeId(1),
            NodeId(0),
            LinkClass::CloudUplink,
            CLOUD_UPLINK_BPS,
            CLOUD_UPLINK_PROPAGATION_S,
            PER_HOP_PROCESSING_S,
        )];
        for t in 2..=4 {
            links.push(LinkSpec::new(
                NodeId(t),
                NodeId(1),
                LinkClass::EdgeLocal,
                EDGE_LOCAL_BPS,
                EDGE_LOCAL_PROPAGATION_S,
                PER_HOP_PROCESSING_S,
            ));
        }
        for (a, b) in [(2, 3), (2, 4), (3, 4)] {
            links.push(LinkSpec::new(
                NodeId(a),
                NodeId(b),
                LinkClass::PeerD2D,
                PEER_D2D_BPS,
                PEER_D2D_PROPAGATION_S,
                PER_HOP_PROCESSING_S,
            ));
        }
        Topology::new(nodes, links).expect("default topology is valid")
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn kind(&self, id: NodeId) -> Option<NodeKind> {
        self.nodes.get(&id).map(|n| n.kind)
    }

    pub fn cloud(&self) -> NodeId {
        self.nodes
            .values()
            .find(|n| n.kind == NodeKind::Cloud)
            .map(|n| n.id)
            .expect("validated topology has a cloud")
    }

    pub fn terminals(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Terminal)
    }

    pub fn sensors(&self, id: NodeId) -> ModalitySet {
        self.nodes.get(&id).map(|n| n.sensors).unwrap_or_default()
    }

    pub fn link(&self, a: NodeId, b: NodeId, class: LinkClass) -> Option<&LinkSpec> {
        self.links.iter().find(|l| l.class == class && l.connects(a, b))
    }

    /// Sets the availability flag on every `class` link between `a` and `b`.
    /// Returns false if no such link exists.
    pub fn set_link_up(&mut self, a: NodeId, b: NodeId, class: LinkClass, up: bool) -> bool {
        let mut found = false;
        for l in self.links.iter_mut().filter(|l| l.class == class && l.connects(a, b)) {
            l.up = up;
            found = true;
        }
        found
    }

    pub fn set_class_up(&mut self, class: LinkClass, up: bool) {
        for l in self.links.iter_mut().filter(|l| l.class == class) {
            l.up = up;
        }
    }

    /// Neighbours of `n` over up links of `class`, ascending by id.
    pub fn neighbours(&self, n: NodeId, class: LinkClass) -> Vec<NodeId> {
        let set: BTreeSet<NodeId> = self
            .links
            .iter()
            .filter(|l| l.up && l.class == class)
            .filter_map(|l| l.other(n))
            .collect();
        set.into_iter().collect()
    }

    /// Edge serving terminal `t` (lowest-id edge with an up local link).
    pub fn serving_edge(&self, t: NodeId) -> Option<NodeId> {
        self.neighbours(t, LinkClass::EdgeLocal).into_iter().next()
    }

    pub fn cloud_reachable(&self, t: NodeId) -> bool {
        route(t, self.cloud(), Mode::Gfm, self).is_ok()
    }
}

fn mode_constraints(mode: Mode) -> (&'static [LinkClass], usize) {
    match mode {
        Mode::Gfm => (&[LinkClass::EdgeLocal, LinkClass::CloudUplink], 2),
        Mode::Crm => (&[LinkClass::EdgeLocal], 2),
        Mode::Pim => (&[LinkClass::PeerD2D], 1),
    }
}

/// Shortest path from `src` to `dst` using only the link classes and hop
/// budget allowed for `mode`. Ties resolve towards lower node ids.
pub fn route(src: NodeId, dst: NodeId, mode: Mode, topo: &Topology) -> Result<Vec<LinkSpec>, NetError> {
    let no_route = || NetError::NoRoute { src, dst, mode };
    if src == dst || topo.node(src).is_none() || topo.node(dst).is_none() {
        return Err(no_route());
    }
    let (classes, max_hops) = mode_constraints(mode);
    let mut prev: BTreeMap<NodeId, (NodeId, usize)> = BTreeMap::new();
    let mut depth: BTreeMap<NodeId, usize> = BTreeMap::from([(src, 0)]);
    let mut queue = VecDeque::from([src]);
    while let Some(n) = queue.pop_front() {
        let d = depth[&n];
        if n == dst {
            break;
        }
        if d == max_hops {
            continue;
        }
        let mut next: Vec<(NodeId, usize)> = topo
            .links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.up && classes.contains(&l.class))
            .filter_map(|(i, l)| l.other(n).map(|m| (m, i)))
            .collect();
        next.sort();
        for (m, i) in next {
            if depth.contains_key(&m) {
                continue;
            }
            // Only the endpoints may be non-relaying nodes; terminals never
            // forward on behalf of others.
            if m != dst && topo.kind(m) == Some(NodeKind::Terminal) {
                continue;
            }
            depth.insert(m, d + 1);
            prev.insert(m, (n, i));
            queue.push_back(m);
        }
    }
    if !depth.contains_key(&dst) {
        return Err(no_route());
    }
    let mut path = Vec::new();
    let mut at = dst;
    while at != src {
        let (p, i) = prev[&at];
        path.push(topo.links[i].clone());
        at = p;
    }
    path.reverse();
    Ok(path)
}

/// Message sizes used when planning flows.
#[derive(Debug, Clone, PartialEq)]
pub struct Payloads {
    /// Encoded feature size per modality, indexed by `Modality as usize`.
    pub feature_bytes: [u64; 4],
    pub directive_bytes: u64,
    pub alert_bytes: u64,
}

impl Payloads {
    pub fn feature(&self, m: Modality) -> u64 {
        self.feature_bytes[m as usize]
    }
}

/// One feature upload leg: a terminal sending one modality's feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub modality: Modality,
    pub source: NodeId,
    pub bytes: u64,
    pub path: Vec<LinkSpec>,
}

impl Upload {
    /// The relay node at the end of the first hop.
    pub fn first_hop_dst(&self) -> NodeId {
        self.path[0]
            .other(self.source)
            .expect("first hop starts at the source")
    }
}

/// Who talks to whom for one round of a given variant.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowPlan {
    /// Terminals upload to their edge; each edge bundles what it received
    /// and forwards the bundle over its cloud uplink.
    Gfm { uploads: Vec<Upload>, cloud: NodeId },
    /// Cue terminals upload to the edge; the edge sends one directive to the
    /// RF target.
    Crm {
        uploads: Vec<Upload>,
        edge: NodeId,
        target: NodeId,
        directive_link: LinkSpec,
    },
    /// The anchor and its one-hop peers exchange alerts.
    Pim {
        anchor: NodeId,
        peers: Vec<(NodeId, LinkSpec)>,
        borrowed: ModalitySet,
    },
}

impl FlowPlan {
    /// Transmission latency of the flow, excluding inference.
    pub fn transmission_s(&self, payloads: &Payloads) -> Result<f64, NetError> {
        match self {
            FlowPlan::Gfm { uploads, .. } => {
                let mut per_edge: BTreeMap<NodeId, (f64, u64, &LinkSpec)> = BTreeMap::new();
                for u in uploads {
                    let hop = transmit_latency(u.bytes, &u.path[0])?;
                    let entry = per_edge
                        .entry(u.first_hop_dst())
                        .or_insert((0.0, 0, &u.path[1]));
                    entry.0 = entry.0.max(hop);
                    entry.1 += u.bytes;
                }
                let mut worst = 0.0f64;
                for (arrival, bytes, uplink) in per_edge.values() {
                    worst = worst.max(arrival + transmit_latency(*bytes, uplink)?);
                }
                Ok(worst)
            }
            FlowPlan::Crm {
                uploads,
                directive_link,
                ..
            } => {
                let mut arrival = 0.0f64;
                for u in uploads {
                    arrival = arrival.max(transmit_latency(u.bytes, &u.path[0])?);
                }
                Ok(arrival + transmit_latency(payloads.directive_bytes, directive_link)?)
            }
            FlowPlan::Pim { peers, .. } => {
                let mut worst = 0.0f64;
                for (_, link) in peers {
                    worst = worst.max(transmit_latency(payloads.alert_bytes, link)?);
                }
                Ok(worst)
            }
        }
    }

    pub fn bytes_tx(&self, payloads: &Payloads) -> u64 {
        match self {
            FlowPlan::Gfm { uploads, .. } => uploads
                .iter()
                .map(|u| u.bytes * u.path.len() as u64)
                .sum(),
            FlowPlan::Crm { uploads, .. } => {
                uploads.iter().map(|u| u.bytes).sum::<u64>() + payloads.directive_bytes
            }
            // Alerts flow both ways on every peer link.
            FlowPlan::Pim { peers, .. } => 2 * peers.len() as u64 * payloads.alert_bytes,
        }
    }
}

/// Chooses the participants and paths for one round of `variant`.
///
/// `anchor` is the terminal on whose behalf the round runs (the RF target in
/// CRM, the local processor in PIM); `None` picks the lowest-id terminal that
/// works.
pub fn plan_flow(
    variant: ModeVariant,
    topo: &Topology,
    anchor: Option<NodeId>,
    payloads: &Payloads,
) -> Result<FlowPlan, NetError> {
    let fail = |reason: String| NetError::NoFlow { variant, reason };
    let needed = variant.modalities();
    match variant.mode() {
        Mode::Gfm => {
            let cloud = topo.cloud();
            let mut uploads = Vec::new();
            for m in needed.iter() {
                let mut candidates: Vec<NodeId> = topo
                    .terminals()
                    .filter(|n| n.sensors.contains(m))
                    .map(|n| n.id)
                    .collect();
                if let Some(a) = anchor.filter(|a| candidates.contains(a)) {
                    candidates.retain(|c| *c != a);
                    candidates.insert(0, a);
                }
                let found = candidates
                    .into_iter()
                    .find_map(|t| route(t, cloud, Mode::Gfm, topo).ok().map(|p| (t, p)));
                let (source, path) =
                    found.ok_or_else(|| fail(format!("no terminal can upload {m} to the cloud")))?;
                uploads.push(Upload {
                    modality: m,
                    source,
                    bytes: payloads.feature(m),
                    path,
                });
            }
            Ok(FlowPlan::Gfm { uploads, cloud })
        }
        Mode::Crm => {
            let rf_capable = |t: NodeId| {
                topo.sensors(t).contains(Modality::RfPower) && topo.serving_edge(t).is_some()
            };
            let target = match anchor {
                Some(a) if rf_capable(a) => a,
                Some(a) => {
                    let edge = topo
                        .serving_edge(a)
                        .ok_or_else(|| fail(format!("terminal {a} has no edge link")))?;
                    topo.neighbours(edge, LinkClass::EdgeLocal)
                        .into_iter()
                        .find(|t| rf_capable(*t))
                        .ok_or_else(|| fail("no RF terminal at the anchor's edge".into()))?
                }
                None => topo
                    .terminals()
                    .map(|n| n.id)
                    .find(|t| rf_capable(*t))
                    .ok_or_else(|| fail("no RF terminal reaches an edge".into()))?,
            };
            let edge = topo.serving_edge(target).expect("rf_capable checked");
            let directive_link = topo
                .link(edge, target, LinkClass::EdgeLocal)
                .cloned()
                .expect("serving edge link exists");
            let at_edge = topo.neighbours(edge, LinkClass::EdgeLocal);
            let mut uploads = Vec::new();
            for m in needed.without(Modality::RfPower).iter() {
                let holders: Vec<NodeId> = at_edge
                    .iter()
                    .copied()
                    .filter(|t| topo.sensors(*t).contains(m))
                    .collect();
                let source = holders
                    .iter()
                    .copied()
                    .find(|t| *t != target)
                    .or_else(|| holders.first().copied())
                    .ok_or_else(|| fail(format!("no terminal at edge {edge} senses {m}")))?;
                let path = route(source, edge, Mode::Crm, topo)?;
                uploads.push(Upload {
                    modality: m,
                    source,
                    bytes: payloads.feature(m),
                    path,
                });
            }
            Ok(FlowPlan::Crm {
                uploads,
                edge,
                target,
                directive_link,
            })
        }
        Mode::Pim => {
            let try_anchor = |a: NodeId| -> Option<FlowPlan> {
                if topo.kind(a) != Some(NodeKind::Terminal) {
                    return None;
                }
                let peers: Vec<(NodeId, LinkSpec)> = topo
                    .neighbours(a, LinkClass::PeerD2D)
                    .into_iter()
                    .filter_map(|p| topo.link(a, p, LinkClass::PeerD2D).map(|l| (p, l.clone())))
                    .collect();
                if peers.is_empty() {
                    return None;
                }
                let local = topo.sensors(a);
                let reachable = peers
                    .iter()
                    .fold(local, |acc, (p, _)| acc.union(topo.sensors(*p)));
                needed.is_subset(reachable).then(|| FlowPlan::Pim {
                    anchor: a,
                    peers,
                    borrowed: needed
                        .iter()
                        .filter(|m| !local.contains(*m))
                        .collect(),
                })
            };
            match anchor {
                Some(a) => try_anchor(a)
                    .ok_or_else(|| fail(format!("terminal {a} lacks peers covering {needed}"))),
                None => {
                    let ids: Vec<NodeId> = topo.terminals().map(|n| n.id).collect();
                    // Prefer a terminal holding every modality on board.
                    ids.iter()
                        .filter(|t| needed.is_subset(topo.sensors(**t)))
                        .chain(ids.iter())
                        .find_map(|t| try_anchor(*t))
                        .ok_or_else(|| fail("no terminal with peers covers the modality set".into()))
                }
            }
        }
    }
}
