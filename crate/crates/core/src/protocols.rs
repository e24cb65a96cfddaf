//! The three operation modes as event-driven rounds.
//!
//! * GFM: terminals upload features to their edge, the edge bundles them to
//!   the cloud, and the cloud verifies watermarks and fuses.
//! * CRM: cue terminals upload to the edge, the edge translates the cue into
//!   a beam directive for the RF terminal, which verifies and obeys it.
//! * PIM: the anchor terminal and its one-hop peers process locally and
//!   swap alerts; the anchor checks each alert against its own observation
//!   and keeps a reputation score per peer.
//!
//! Every node is driven by an [`Agent`] whose reasoner is a fixed rule table
//! from percepts to tools, so runs are reproducible.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    compute_cost, sensing_accuracy, effective_accuracy, CalibrationError, CalibrationTable,
    LatencyBreakdown,
};
use crate::engine::{Engine, EventKind, RngStream, Trace};
use crate::model::{
    LinkSpec, Message, MessageKind, Modality, Mode, ModeVariant, NodeId, NodeKind, Scenario,
};
use crate::netmodel::{plan_flow, transmit_latency, FlowPlan, NetError, Payloads, Topology, TEXT_FRAME_BYTES};
use crate::semantics::{
    encode, inject_attack, verify_watermark, AttackKind, AttackSpec, CodecSet, SemanticFeature,
    SemanticsError,
};

pub const MEMORY_CAPACITY: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("{variant} infeasible: {reason}")]
    ModeInfeasible { variant: ModeVariant, reason: String },
    #[error("feature from {0} failed its integrity check")]
    UntrustedFeature(NodeId),
    #[error("knowledge base has no zone for terminal {0}")]
    UnknownZone(NodeId),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Percept {
    SensorFrame,
    UploadsBuffered,
    CuesReady,
    BundleReceived,
    DirectiveReceived,
    InferenceDone,
    AlertReceived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tool {
    Encode,
    Transmit,
    AdjustBeam,
    RaiseAlert,
    VerifyDirective,
    Translate,
    Fuse,
    CheckConsistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Invoke(Tool),
    NoOp,
}

/// Percept to tool lookup; anything not in the table is a no-op.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reasoner {
    rules: BTreeMap<Percept, Tool>,
}

impl Reasoner {
    pub fn new(rules: impl IntoIterator<Item = (Percept, Tool)>) -> Self {
        Reasoner {
            rules: rules.into_iter().collect(),
        }
    }

    pub fn decide(&self, percept: Percept) -> Action {
        self.rules
            .get(&percept)
            .map_or(Action::NoOp, |t| Action::Invoke(*t))
    }
}

/// Static facts, e.g. `zone.3 = 12.0,34.0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    facts: BTreeMap<String, String>,
}

impl KnowledgeBase {
    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.facts.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.facts.get(key).map(String::as_str)
    }

    pub fn zone(&self, terminal: NodeId) -> Option<(f64, f64)> {
        let raw = self.get(&format!("zone.{terminal}"))?;
        let (x, y) = raw.split_once(',')?;
        Some((x.trim().parse().ok()?, y.trim().parse().ok()?))
    }

    /// Zone facts for every terminal that declares one, plus `self`.
    pub fn from_topology(topo: &Topology, own: NodeId) -> Self {
        let mut kb = KnowledgeBase::default();
        kb.insert("self", own.to_string());
        for n in topo.terminals() {
            if let Some([x, y]) = n.zone {
                kb.insert(format!("zone.{}", n.id), format!("{x:?},{y:?}"));
            }
        }
        kb
    }
}

/// Bounded FIFO of timestamped observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    capacity: usize,
    entries: VecDeque<(f64, String)>,
}

impl Memory {
    pub fn new(capacity: usize) -> Self {
        Memory {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn record(&mut self, time_s: f64, observation: impl Into<String>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((time_s, observation.into()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, String)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub node: NodeId,
    pub knowledge: KnowledgeBase,
    pub memory: Memory,
    pub reasoner: Reasoner,
    pub tools: BTreeSet<Tool>,
}

impl Agent {
    pub fn terminal(node: NodeId, knowledge: KnowledgeBase) -> Self {
        use Percept::*;
        use Tool::*;
        Agent {
            node,
            knowledge,
            memory: Memory::new(MEMORY_CAPACITY),
            reasoner: Reasoner::new([
                (SensorFrame, Encode),
                (DirectiveReceived, VerifyDirective),
                (InferenceDone, RaiseAlert),
                (AlertReceived, CheckConsistency),
            ]),
            tools: [Encode, Transmit, AdjustBeam, RaiseAlert, VerifyDirective, CheckConsistency]
                .into_iter()
                .collect(),
        }
    }

    pub fn edge_relay(node: NodeId, knowledge: KnowledgeBase) -> Self {
        Agent {
            node,
            knowledge,
            memory: Memory::new(MEMORY_CAPACITY),
            reasoner: Reasoner::new([
                (Percept::UploadsBuffered, Tool::Transmit),
                (Percept::CuesReady, Tool::Translate),
            ]),
            tools: [Tool::Transmit, Tool::Translate].into_iter().collect(),
        }
    }

    pub fn cloud_fusion(node: NodeId, knowledge: KnowledgeBase) -> Self {
        Agent {
            node,
            knowledge,
            memory: Memory::new(MEMORY_CAPACITY),
            reasoner: Reasoner::new([(Percept::BundleReceived, Tool::Fuse)]),
            tools: [Tool::Fuse].into_iter().collect(),
        }
    }

    pub fn for_node(topo: &Topology, node: NodeId) -> Self {
        let kb = KnowledgeBase::from_topology(topo, node);
        match topo.kind(node) {
            Some(NodeKind::Cloud) => Agent::cloud_fusion(node, kb),
            Some(NodeKind::Edge) => Agent::edge_relay(node, kb),
            _ => Agent::terminal(node, kb),
        }
    }

    /// Logs the percept and returns the reasoner's choice, downgraded to a
    /// no-op if the agent lacks the tool.
    pub fn perceive(&mut self, time_s: f64, percept: Percept, note: &str) -> Action {
        self.memory.record(time_s, format!("{percept:?} {note}"));
        match self.reasoner.decide(percept) {
            Action::Invoke(t) if self.tools.contains(&t) => Action::Invoke(t),
            _ => Action::NoOp,
        }
    }
}

fn parse_kv<'a>(body: &'a str, header: &str) -> Result<BTreeMap<&'a str, &'a str>, String> {
    let mut parts = body.split('|');
    if parts.next() != Some(header) {
        return Err(format!("expected `{header}` header in `{body}`"));
    }
    let mut map = BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| format!("bad field `{p}`"))?;
        if map.insert(k, v).is_some() {
            return Err(format!("duplicate field `{k}`"));
        }
    }
    Ok(map)
}

fn take<'a>(map: &BTreeMap<&'a str, &'a str>, key: &str) -> Result<&'a str, String> {
    map.get(key).copied().ok_or_else(|| format!("missing `{key}`"))
}

fn parse_coord(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad coordinate `{s}`"))?;
    if !v.is_finite() {
        return Err(format!("non-finite coordinate `{s}`"));
    }
    Ok(v)
}

/// Beam-steering command relayed by an edge node.
#[derive(Debug, Clone, PartialEq)]
pub struct Directive {
    pub issuer: NodeId,
    pub target_modality: Modality,
    pub action: String,
    pub coords: (f64, f64),
    pub signature_valid: bool,
}

impl Directive {
    const HEADER: &'static str = "DIR v1";

    /// `DIR v1|issuer=<id>|mod=<tag>|action=<text>|x=<real>|y=<real>|sig=<0|1>`
    pub fn to_wire(&self) -> String {
        format!(
            "{}|issuer={}|mod={}|action={}|x={:?}|y={:?}|sig={}",
            Self::HEADER,
            self.issuer,
            self.target_modality,
            self.action,
            self.coords.0,
            self.coords.1,
            u8::from(self.signature_valid)
        )
    }

    pub fn parse(wire: &str) -> Result<Self, String> {
        let map = parse_kv(wire, Self::HEADER)?;
        if map.len() != 6 {
            return Err(format!("expected 6 fields, found {}", map.len()));
        }
        let signature_valid = match take(&map, "sig")? {
            "1" => true,
            "0" => false,
            other => return Err(format!("bad sig `{other}`")),
        };
        Ok(Directive {
            issuer: take(&map, "issuer")?
                .parse()
                .map_err(|_| "bad issuer".to_string())?,
            target_modality: take(&map, "mod")?.parse().map_err(|e| format!("{e}"))?,
            action: take(&map, "action")?.to_string(),
            coords: (parse_coord(take(&map, "x")?)?, parse_coord(take(&map, "y")?)?),
            signature_valid,
        })
    }
}

/// High-level detection a terminal shares with its peers.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerAlert {
    pub from: NodeId,
    pub object: String,
    pub coords: (f64, f64),
}

impl PeerAlert {
    const HEADER: &'static str = "ALERT v1";
    pub const PHANTOM: &'static str = "phantom";

    pub fn to_wire(&self) -> String {
        format!(
            "{}|from={}|obj={}|x={:?}|y={:?}",
            Self::HEADER,
            self.from,
            self.object,
            self.coords.0,
            self.coords.1
        )
    }

    pub fn parse(wire: &str) -> Result<Self, String> {
        let map = parse_kv(wire, Self::HEADER)?;
        Ok(PeerAlert {
            from: take(&map, "from")?.parse().map_err(|_| "bad from".to_string())?,
            object: take(&map, "obj")?.to_string(),
            coords: (parse_coord(take(&map, "x")?)?, parse_coord(take(&map, "y")?)?),
        })
    }
}

/// What a terminal itself sees of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub object: String,
    pub coords: (f64, f64),
}

impl Observation {
    /// Position agreement, in metres, for an alert to count as consistent.
    pub const TOLERANCE_M: f64 = 1.0;

    pub fn agrees_with(&self, alert: &PeerAlert) -> bool {
        alert.object == self.object
            && (alert.coords.0 - self.coords.0).abs() <= Self::TOLERANCE_M
            && (alert.coords.1 - self.coords.1).abs() <= Self::TOLERANCE_M
    }
}

/// Turns an accepted cue feature into a focus directive aimed at the zone
/// the knowledge base records for the feature's origin.
pub fn crm_translate(feature: &SemanticFeature, knowledge: &KnowledgeBase) -> Result<Directive, ProtocolError> {
    if !feature.watermark_valid {
        return Err(ProtocolError::UntrustedFeature(feature.origin));
    }
    let coords = knowledge
        .zone(feature.origin)
        .ok_or(ProtocolError::UnknownZone(feature.origin))?;
    let issuer = knowledge
        .get("self")
        .and_then(|s| s.parse().ok())
        .unwrap_or(NodeId(0));
    let target_modality = knowledge
        .get("steer")
        .and_then(|s| s.parse().ok())
        .unwrap_or(Modality::RfPower);
    Ok(Directive {
        issuer,
        target_modality,
        action: "focus".into(),
        coords,
        signature_valid: true,
    })
}

/// Physics-style plausibility check of a peer alert against the local view.
/// Consistent alerts always pass; inconsistent ones are caught with
/// probability `detection_prob`.
pub fn pim_consistency_check<R: Rng + ?Sized>(
    alert: &PeerAlert,
    local: &Observation,
    detection_prob: f64,
    rng: &mut R,
) -> bool {
    if local.agrees_with(alert) {
        return true;
    }
    !rng.random_bool(detection_prob.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReputationState {
    pub weights: BTreeMap<NodeId, f64>,
    pub decay: f64,
    pub reward: f64,
    pub ignore_below: f64,
}

impl ReputationState {
    pub fn new(decay: f64, reward: f64, ignore_below: f64) -> Self {
        ReputationState {
            weights: BTreeMap::new(),
            decay,
            reward,
            ignore_below,
        }
    }

    /// Unknown peers start fully trusted.
    pub fn weight(&self, peer: NodeId) -> f64 {
        self.weights.get(&peer).copied().unwrap_or(1.0)
    }

    pub fn trusted(&self, peer: NodeId) -> bool {
        self.weight(peer) >= self.ignore_below
    }

    pub fn update(&mut self, peer: NodeId, corroborated: bool) {
        let w = self.weight(peer);
        let next = if corroborated {
            (w + self.reward * (1.0 - w)).min(1.0)
        } else {
            w * self.decay
        };
        self.weights.insert(peer, next.clamp(0.0, 1.0));
    }
}

impl Default for ReputationState {
    fn default() -> Self {
        ReputationState::new(0.8, 0.2, 0.5)
    }
}

pub fn reputation_update(state: &ReputationState, peer: NodeId, corroborated: bool) -> ReputationState {
    let mut next = state.clone();
    next.update(peer, corroborated);
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub enabled: bool,
    pub watermark_detection_prob: f64,
    pub directive_verify_prob: f64,
    pub consistency_detection_prob: f64,
    pub reputation: bool,
    pub reputation_decay: f64,
    pub reputation_reward: f64,
    pub reputation_ignore_below: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            enabled: true,
            watermark_detection_prob: 0.9,
            directive_verify_prob: 1.0,
            consistency_detection_prob: 0.8,
            reputation: true,
            reputation_decay: 0.8,
            reputation_reward: 0.2,
            reputation_ignore_below: 0.5,
        }
    }
}

impl DefenseConfig {
    pub fn disabled() -> Self {
        DefenseConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("watermark_detection_prob", self.watermark_detection_prob),
            ("directive_verify_prob", self.directive_verify_prob),
            ("consistency_detection_prob", self.consistency_detection_prob),
            ("reputation_ignore_below", self.reputation_ignore_below),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, p) in [
            ("reputation_decay", self.reputation_decay),
            ("reputation_reward", self.reputation_reward),
        ] {
            if !(p > 0.0 && p < 1.0) {
                return Err(format!("{name} must lie in (0, 1), got {p}"));
            }
        }
        Ok(())
    }

    pub fn new_reputation(&self) -> ReputationState {
        ReputationState::new(
            self.reputation_decay,
            self.reputation_reward,
            self.reputation_ignore_below,
        )
    }
}

/// Everything a round needs besides its random stream.
#[derive(Debug, Clone)]
pub struct RoundContext<'a> {
    pub topo: &'a Topology,
    pub table: &'a CalibrationTable,
    pub codecs: &'a CodecSet,
    pub payloads: Payloads,
    pub attacks: &'a [AttackSpec],
    pub defenses: DefenseConfig,
    pub scenario: Scenario,
    pub snr_db: f64,
    /// Terminal the round runs for; `None` lets the planner choose.
    pub anchor: Option<NodeId>,
    /// Logged as a `Decision` event at t=0 (e.g. the controller's ranking).
    pub decision_note: Option<String>,
}

impl<'a> RoundContext<'a> {
    pub fn new(
        topo: &'a Topology,
        table: &'a CalibrationTable,
        codecs: &'a CodecSet,
        scenario: Scenario,
        snr_db: f64,
    ) -> Self {
        RoundContext {
            topo,
            table,
            codecs,
            payloads: payloads_for(codecs, TEXT_FRAME_BYTES, TEXT_FRAME_BYTES),
            attacks: &[],
            defenses: DefenseConfig::default(),
            scenario,
            snr_db,
            anchor: None,
            decision_note: None,
        }
    }

    pub fn attack(&self, kind: AttackKind) -> Option<&AttackSpec> {
        self.attacks.iter().find(|a| a.kind == kind)
    }

    fn plan(&self, variant: ModeVariant) -> Result<FlowPlan, ProtocolError> {
        plan_flow(variant, self.topo, self.anchor, &self.payloads).map_err(|e| infeasible(variant, e))
    }
}

pub fn payloads_for(codecs: &CodecSet, directive_bytes: u64, alert_bytes: u64) -> Payloads {
    Payloads {
        feature_bytes: codecs.encoded_bytes(),
        directive_bytes,
        alert_bytes,
    }
}

fn infeasible(variant: ModeVariant, reason: impl fmt::Display) -> ProtocolError {
    ProtocolError::ModeInfeasible {
        variant,
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub variant: ModeVariant,
    /// Success probability of the round's beam prediction.
    pub accuracy: f64,
    /// The attack-free model accuracy for the same point.
    pub clean_accuracy: f64,
    pub latency: LatencyBreakdown,
    pub bytes_tx: u64,
    pub attacks_hit: u32,
    pub defenses_hit: u32,
    /// Set when CRM fell back to a PIM-level result.
    pub fallback: Option<ModeVariant>,
    pub trace: Trace,
}

/// Per-point state carried from one round to the next.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Session {
    pub reputation: ReputationState,
}

impl Session {
    pub fn new(defenses: &DefenseConfig) -> Self {
        Session {
            reputation: defenses.new_reputation(),
        }
    }
}

pub fn run_round(
    variant: ModeVariant,
    ctx: &RoundContext<'_>,
    session: &mut Session,
    rng: &RngStream,
) -> Result<RoundResult, ProtocolError> {
    match variant.mode() {
        Mode::Gfm => run_gfm_round(ctx, rng),
        Mode::Crm => run_crm_round(variant, ctx, rng),
        Mode::Pim => run_pim_round(variant, ctx, &mut session.reputation, rng),
    }
}

#[derive(Default)]
enum Step {
    #[default]
    None,
    Feature(Message),
    Bundle(Vec<SemanticFeature>),
    Directive { msg: Message, corrupted: bool },
    LocalDone,
    Alert { msg: Message, falsified: bool },
    Fused,
}

fn hop_detail(msg: &Message, link: &LinkSpec, extra: &str) -> String {
    let mut d = format!(
        "msg={}|src={}|dst={}|link={}|bytes={}",
        msg.kind, msg.src, msg.dst, link.class, msg.payload_bytes
    );
    if let Some(f) = &msg.feature {
        d.push_str(&format!("|mod={}", f.modality));
    }
    if !extra.is_empty() {
        d.push('|');
        d.push_str(extra);
    }
    d
}

/// Shared bookkeeping for one round's event loop.
struct RoundState {
    agents: BTreeMap<NodeId, Agent>,
    bytes_tx: u64,
    attacks_hit: u32,
    defenses_hit: u32,
    failure: Option<ProtocolError>,
    finished_at: Option<f64>,
    accuracy: Option<f64>,
    fallback: Option<ModeVariant>,
}

impl RoundState {
    fn new(topo: &Topology) -> Self {
        RoundState {
            agents: topo.nodes().map(|n| (n.id, Agent::for_node(topo, n.id))).collect(),
            bytes_tx: 0,
            attacks_hit: 0,
            defenses_hit: 0,
            failure: None,
            finished_at: None,
            accuracy: None,
            fallback: None,
        }
    }

    fn perceive(&mut self, node: NodeId, t: f64, p: Percept, note: &str) -> Action {
        self.agents
            .get_mut(&node)
            .map_or(Action::NoOp, |a| a.perceive(t, p, note))
    }

    fn fail(&mut self, e: ProtocolError) {
        if self.failure.is_none() {
            self.failure = Some(e);
        }
    }

    /// Schedules a transmission of `msg` over `link`, starting now.
    fn send(&mut self, eng: &mut Engine<Step>, msg: Message, link: &LinkSpec, step: Step, extra: &str) {
        let now = eng.now();
        let latency = match transmit_latency(msg.payload_bytes, link) {
            Ok(l) => l,
            Err(e) => return self.fail(infeasible_net(e)),
        };
        self.bytes_tx += msg.payload_bytes;
        let detail = hop_detail(&msg, link, extra);
        let _ = eng.schedule(now, EventKind::TransmitStart, msg.src, detail.clone());
        let _ = eng.schedule_with(now + latency, EventKind::Delivered, msg.dst, detail, step);
    }

    fn finish(self, variant: ModeVariant, clean: f64, inference_s: f64, trace: Trace) -> Result<RoundResult, ProtocolError> {
        if let Some(e) = self.failure {
            return Err(e);
        }
        let (Some(total_s), Some(accuracy)) = (self.finished_at, self.accuracy) else {
            return Err(infeasible(variant, "round stalled before a decision"));
        };
        Ok(RoundResult {
            variant,
            accuracy,
            clean_accuracy: clean,
            latency: LatencyBreakdown {
                inference_s,
                transmission_s: total_s - inference_s,
                total_s,
            },
            bytes_tx: self.bytes_tx,
            attacks_hit: self.attacks_hit,
            defenses_hit: self.defenses_hit,
            fallback: self.fallback,
            trace,
        })
    }
}

fn infeasible_net(e: NetError) -> ProtocolError {
    match e {
        NetError::NoFlow { variant, reason } => ProtocolError::ModeInfeasible { variant, reason },
        other => ProtocolError::ModeInfeasible {
            variant: ModeVariant::Gfm,
            reason: other.to_string(),
        },
    }
}

fn note_decision(eng: &mut Engine<Step>, ctx: &RoundContext<'_>, node: NodeId) {
    if let Some(note) = &ctx.decision_note {
        let _ = eng.schedule(0.0, EventKind::Decision, node, note.clone());
    }
}

/// Global fusion: every modality goes up to the cloud.
pub fn run_gfm_round(ctx: &RoundContext<'_>, rng: &RngStream) -> Result<RoundResult, ProtocolError> {
    let variant = ModeVariant::Gfm;
    let FlowPlan::Gfm { uploads, cloud } = ctx.plan(variant)? else {
        unreachable!("GFM plan");
    };
    let cost = compute_cost(variant, ctx.table)?;
    let clean = sensing_accuracy(variant, ctx.scenario, ctx.snr_db, ctx.table)?;
    let chance = ctx.table.chance();
    let mut attack_rng = rng.child("attack");
    let mut defense_rng = rng.child("defense");

    let mut st = RoundState::new(ctx.topo);
    let mut eng: Engine<Step> = Engine::new(rng.seed());
    note_decision(&mut eng, ctx, cloud);

    // Edge -> (expected uploads, uplink, buffered features).
    let mut edges: BTreeMap<NodeId, (usize, LinkSpec, Vec<SemanticFeature>)> = BTreeMap::new();
    for u in &uploads {
        let e = edges
            .entry(u.first_hop_dst())
            .or_insert_with(|| (0, u.path[1].clone(), Vec::new()));
        e.0 += 1;
    }

    for u in &uploads {
        if st.perceive(u.source, 0.0, Percept::SensorFrame, &u.modality.to_string())
            != Action::Invoke(Tool::Encode)
        {
            st.fail(infeasible(variant, format!("terminal {} declined to encode", u.source)));
            continue;
        }
        let feature = encode(u.modality, ctx.codecs.get(u.modality), u.source)?;
        let mut msg = Message::feature_upload(u.source, u.first_hop_dst(), feature);
        if let Some(attack) = ctx.attack(AttackKind::SemanticTamper).filter(|a| a.targets(u.modality)) {
            let out = inject_attack(msg, attack, &mut attack_rng)?;
            msg = out.value;
            if out.hit {
                st.attacks_hit += 1;
                let _ = eng.schedule(
                    0.0,
                    EventKind::AttackInjected,
                    u.source,
                    format!("attack=SemanticTamper|mod={}", u.modality),
                );
            }
        }
        let step = Step::Feature(msg.clone());
        st.send(&mut eng, msg, &u.path[0], step, "");
    }

    let defenses = &ctx.defenses;
    let table = ctx.table;
    let codecs = ctx.codecs;
    let scenario = ctx.scenario;
    eng.run_with(|eng, ev, step| {
        let now = eng.now();
        match step {
            Step::Feature(msg) => {
                let edge = ev.node;
                let Some(entry) = edges.get_mut(&edge) else { return };
                entry.2.push(msg.feature.expect("feature upload"));
                if entry.2.len() < entry.0 {
                    return;
                }
                if st.perceive(edge, now, Percept::UploadsBuffered, "") != Action::Invoke(Tool::Transmit) {
                    return st.fail(infeasible(variant, format!("edge {edge} declined to forward")));
                }
                let bundle = std::mem::take(&mut entry.2);
                let bytes: u64 = bundle.iter().map(|f| f.payload_bytes).sum();
                let uplink = entry.1.clone();
                let msg = Message {
                    kind: MessageKind::FeatureUpload,
                    payload_bytes: bytes,
                    src: edge,
                    dst: cloud,
                    feature: None,
                    body: None,
                };
                let extra = format!("features={}", bundle.len());
                st.send(eng, msg, &uplink, Step::Bundle(bundle), &extra);
            }
            Step::Bundle(features) => {
                if st.perceive(cloud, now, Percept::BundleReceived, "") != Action::Invoke(Tool::Fuse) {
                    return st.fail(infeasible(variant, "cloud declined to fuse"));
                }
                let mut factors = Vec::with_capacity(features.len());
                for f in &features {
                    let accepted = !defenses.enabled
                        || verify_watermark(f, defenses.watermark_detection_prob, &mut defense_rng);
                    if accepted {
                        factors.push(f.fidelity / codecs.get(f.modality).base_fidelity);
                    } else {
                        st.defenses_hit += 1;
                        let _ = eng.schedule(
                            now,
                            EventKind::DefenseTriggered,
                            cloud,
                            format!("defense=watermark|mod={}|from={}", f.modality, f.origin),
                        );
                        match table.removal_factor(variant, f.modality, scenario) {
                            Ok(r) => factors.push(r),
                            Err(e) => return st.fail(e.into()),
                        }
                    }
                }
                st.accuracy = Some(effective_accuracy(clean, factors, chance));
                let _ = eng.schedule_with(
                    now + cost.inference_s(),
                    EventKind::ComputeDone,
                    cloud,
                    format!("task=fusion|variant={variant}"),
                    Step::Fused,
                );
            }
            Step::Fused => {
                st.finished_at = Some(now);
                let acc = st.accuracy.unwrap_or(chance);
                let _ = eng.schedule(now, EventKind::Decision, cloud, format!("variant={variant}|accuracy={acc:?}"));
            }
            _ => {}
        }
    });
    let trace = eng.into_trace();
    st.finish(variant, clean, cost.inference_s(), trace)
}

/// Best clean accuracy among the PIM variants contained in `v`.
fn best_contained_pim(v: ModeVariant, ctx: &RoundContext<'_>) -> Result<(ModeVariant, f64), ProtocolError> {
    let mut best: Option<(ModeVariant, f64)> = None;
    for p in ModeVariant::of_mode(Mode::Pim).filter(|p| p.modalities().is_subset(v.modalities())) {
        let acc = sensing_accuracy(p, ctx.scenario, ctx.snr_db, ctx.table)?;
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((p, acc));
        }
    }
    best.ok_or_else(|| infeasible(v, "no contained PIM variant"))
}

/// Cooperative relay: sense-and-guide through one edge node.
pub fn run_crm_round(variant: ModeVariant, ctx: &RoundContext<'_>, rng: &RngStream) -> Result<RoundResult, ProtocolError> {
    if variant.mode() != Mode::Crm {
        return Err(infeasible(variant, "not a CRM variant"));
    }
    let FlowPlan::Crm { uploads, edge, target, directive_link } = ctx.plan(variant)? else {
        unreachable!("CRM plan");
    };
    let cost = compute_cost(variant, ctx.table)?;
    let clean = sensing_accuracy(variant, ctx.scenario, ctx.snr_db, ctx.table)?;
    let chance = ctx.table.chance();
    let (fallback_variant, fallback_acc) = best_contained_pim(variant, ctx)?;
    let mut attack_rng = rng.child("attack");
    let mut defense_rng = rng.child("defense");

    let mut st = RoundState::new(ctx.topo);
    let steer = if ctx.topo.sensors(target).contains(Modality::MmWave) && variant.modalities().contains(Modality::MmWave) {
        Modality::MmWave
    } else {
        Modality::RfPower
    };
    if let Some(a) = st.agents.get_mut(&edge) {
        a.knowledge.insert("steer", steer.to_string());
    }
    let mut eng: Engine<Step> = Engine::new(rng.seed());
    note_decision(&mut eng, ctx, target);

    for u in &uploads {
        if st.perceive(u.source, 0.0, Percept::SensorFrame, &u.modality.to_string())
            != Action::Invoke(Tool::Encode)
        {
            st.fail(infeasible(variant, format!("terminal {} declined to encode", u.source)));
            continue;
        }
        let feature = encode(u.modality, ctx.codecs.get(u.modality), u.source)?;
        let msg = Message::feature_upload(u.source, edge, feature);
        st.send(&mut eng, msg.clone(), &u.path[0], Step::Feature(msg), "");
    }

    let expected = uploads.len();
    let mut cues: Vec<SemanticFeature> = Vec::new();
    let relay = ctx.attack(AttackKind::MaliciousRelay).cloned();
    let defenses = &ctx.defenses;
    let directive_bytes = ctx.payloads.directive_bytes;
    eng.run_with(|eng, ev, step| {
        let now = eng.now();
        match step {
            Step::Feature(msg) => {
                cues.push(msg.feature.expect("feature upload"));
                if cues.len() < expected {
                    return;
                }
                if st.perceive(edge, now, Percept::CuesReady, "") != Action::Invoke(Tool::Translate) {
                    return st.fail(infeasible(variant, format!("edge {edge} declined to translate")));
                }
                cues.sort_by_key(|f| f.modality);
                let kb = &st.agents[&edge].knowledge;
                let directive = match crm_translate(&cues[0], kb) {
                    Ok(d) => d,
                    Err(e) => return st.fail(e),
                };
                let mut msg = match Message::text(MessageKind::Directive, edge, target, directive.to_wire(), directive_bytes) {
                    Ok(m) => m,
                    Err(e) => return st.fail(infeasible(variant, e)),
                };
                let mut corrupted = false;
                if let Some(attack) = &relay {
                    match inject_attack(msg, attack, &mut attack_rng) {
                        Ok(out) => {
                            msg = out.value;
                            corrupted = out.hit;
                        }
                        Err(e) => return st.fail(e.into()),
                    }
                    if corrupted {
                        st.attacks_hit += 1;
                        let _ = eng.schedule(now, EventKind::AttackInjected, edge, "attack=MaliciousRelay");
                    }
                }
                st.send(eng, msg.clone(), &directive_link, Step::Directive { msg, corrupted }, "");
            }
            Step::Directive { msg, corrupted } => {
                let body = msg.body.as_deref().unwrap_or_default();
                if st.perceive(target, now, Percept::DirectiveReceived, body) != Action::Invoke(Tool::VerifyDirective) {
                    return st.fail(infeasible(variant, format!("terminal {target} ignored the directive")));
                }
                let directive = match Directive::parse(body) {
                    Ok(d) => d,
                    Err(e) => return st.fail(SemanticsError::MalformedBody(e).into()),
                };
                let rejected = defenses.enabled
                    && !directive.signature_valid
                    && defense_rng.random_bool(defenses.directive_verify_prob);
                if rejected {
                    st.defenses_hit += 1;
                    st.fallback = Some(fallback_variant);
                    st.accuracy = Some(fallback_acc.min(clean));
                    let _ = eng.schedule(
                        now,
                        EventKind::DefenseTriggered,
                        target,
                        format!("defense=directive-signature|fallback={fallback_variant}"),
                    );
                } else {
                    let factor = match (&relay, corrupted) {
                        (Some(a), true) => a.severity,
                        _ => 1.0,
                    };
                    st.accuracy = Some(effective_accuracy(clean, [factor], chance));
                    if let Some(a) = st.agents.get_mut(&target) {
                        a.memory.record(now, format!("AdjustBeam x={:?} y={:?}", directive.coords.0, directive.coords.1));
                    }
                }
                let _ = eng.schedule_with(
                    now + cost.inference_s(),
                    EventKind::ComputeDone,
                    target,
                    format!("task=beam-fusion|variant={variant}"),
                    Step::Fused,
                );
            }
            Step::Fused => {
                st.finished_at = Some(now);
                let acc = st.accuracy.unwrap_or(chance);
                let _ = eng.schedule(now, EventKind::Decision, ev.node, format!("variant={variant}|accuracy={acc:?}"));
            }
            _ => {}
        }
    });
    let trace = eng.into_trace();
    st.finish(variant, clean, cost.inference_s(), trace)
}

/// Peer interaction: local processing plus one-hop alert exchange.
pub fn run_pim_round(
    variant: ModeVariant,
    ctx: &RoundContext<'_>,
    reputation: &mut ReputationState,
    rng: &RngStream,
) -> Result<RoundResult, ProtocolError> {
    if variant.mode() != Mode::Pim {
        return Err(infeasible(variant, "not a PIM variant"));
    }
    let FlowPlan::Pim { anchor, peers, .. } = ctx.plan(variant)? else {
        unreachable!("PIM plan");
    };
    let cost = compute_cost(variant, ctx.table)?;
    let clean = sensing_accuracy(variant, ctx.scenario, ctx.snr_db, ctx.table)?;
    let chance = ctx.table.chance();
    let mut attack_rng = rng.child("attack");
    let mut defense_rng = rng.child("defense");

    let zone = ctx
        .topo
        .node(anchor)
        .and_then(|n| n.zone)
        .map_or((0.0, 0.0), |[x, y]| (x, y));
    let scene = Observation {
        object: "vehicle".into(),
        coords: zone,
    };

    let mut st = RoundState::new(ctx.topo);
    let mut eng: Engine<Step> = Engine::new(rng.seed());
    note_decision(&mut eng, ctx, anchor);
    for n in std::iter::once(anchor).chain(peers.iter().map(|(p, _)| *p)) {
        let _ = eng.schedule_with(
            cost.inference_s(),
            EventKind::ComputeDone,
            n,
            format!("task=local-inference|variant={variant}"),
            Step::LocalDone,
        );
    }

    let links: BTreeMap<NodeId, LinkSpec> = peers.iter().cloned().collect();
    let mislead = ctx.attack(AttackKind::CrossModalMislead).cloned();
    let defenses = &ctx.defenses;
    let alert_bytes = ctx.payloads.alert_bytes;
    let mut received = 0usize;
    let mut factors: Vec<f64> = Vec::new();
    eng.run_with(|eng, ev, step| {
        let now = eng.now();
        match step {
            Step::LocalDone => {
                let me = ev.node;
                if st.perceive(me, now, Percept::InferenceDone, "") != Action::Invoke(Tool::RaiseAlert) {
                    return st.fail(infeasible(variant, format!("terminal {me} declined to alert")));
                }
                let alert = PeerAlert {
                    from: me,
                    object: scene.object.clone(),
                    coords: scene.coords,
                }
                .to_wire();
                let dests: Vec<NodeId> = if me == anchor {
                    links.keys().copied().collect()
                } else {
                    vec![anchor]
                };
                for dst in dests {
                    let link = &links[if me == anchor { &dst } else { &me }];
                    let mut msg = match Message::text(MessageKind::PeerAlert, me, dst, alert.clone(), alert_bytes) {
                        Ok(m) => m,
                        Err(e) => return st.fail(infeasible(variant, e)),
                    };
                    let mut falsified = false;
                    if let (Some(attack), true) = (&mislead, dst == anchor) {
                        match inject_attack(msg, attack, &mut attack_rng) {
                            Ok(out) => {
                                msg = out.value;
                                falsified = out.hit;
                            }
                            Err(e) => return st.fail(e.into()),
                        }
                        if falsified {
                            st.attacks_hit += 1;
                            let _ = eng.schedule(now, EventKind::AttackInjected, me, "attack=CrossModalMislead");
                        }
                    }
                    st.send(eng, msg.clone(), link, Step::Alert { msg, falsified }, "");
                }
            }
            Step::Alert { msg, falsified } => {
                let me = ev.node;
                let body = msg.body.as_deref().unwrap_or_default();
                if me != anchor {
                    // Peers just log what the anchor reports.
                    if let Some(a) = st.agents.get_mut(&me) {
                        a.memory.record(now, body.to_string());
                    }
                    return;
                }
                if st.perceive(me, now, Percept::AlertReceived, body) != Action::Invoke(Tool::CheckConsistency) {
                    return st.fail(infeasible(variant, "anchor declined to check alerts"));
                }
                let alert = match PeerAlert::parse(body) {
                    Ok(a) => a,
                    Err(e) => return st.fail(SemanticsError::MalformedBody(e).into()),
                };
                let peer = msg.src;
                let accepted = if defenses.enabled {
                    let consistent = pim_consistency_check(&alert, &scene, defenses.consistency_detection_prob, &mut defense_rng);
                    let trusted = !defenses.reputation || reputation.trusted(peer);
                    if defenses.reputation {
                        reputation.update(peer, consistent);
                    }
                    if !consistent {
                        st.defenses_hit += 1;
                        let _ = eng.schedule(now, EventKind::DefenseTriggered, me, format!("defense=consistency|peer={peer}"));
                    } else if !trusted {
                        st.defenses_hit += 1;
                        let _ = eng.schedule(now, EventKind::DefenseTriggered, me, format!("defense=reputation|peer={peer}"));
                    }
                    consistent && trusted
                } else {
                    true
                };
                if accepted && falsified {
                    factors.push(mislead.as_ref().map_or(1.0, |a| a.severity));
                }
                received += 1;
                if received == links.len() {
                    st.finished_at = Some(now);
                    let acc = effective_accuracy(clean, factors.iter().copied(), chance);
                    st.accuracy = Some(acc);
                    let _ = eng.schedule(now, EventKind::Decision, me, format!("variant={variant}|accuracy={acc:?}"));
                }
            }
            _ => {}
        }
    });
    let trace = eng.into_trace();
    st.finish(variant, clean, cost.inference_s(), trace)
}
