//! Domain types shared across the simulator: sensing modalities, the seven
//! fusion variants, topology nodes and links, and wire messages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::semantics::SemanticFeature;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unknown modality tag `{0}`")]
    Modality(String),
    #[error("`{0}` is not one of the seven mode variants")]
    Variant(String),
    #[error("unknown mode `{0}`")]
    Mode(String),
    #[error("unknown node kind `{0}`")]
    NodeKind(String),
    #[error("unknown link class `{0}`")]
    LinkClass(String),
    #[error("unknown scenario `{0}`")]
    Scenario(String),
    #[error("unknown message kind `{0}`")]
    MessageKind(String),
}

/// A sensing modality. The derived order (P < I < C < M) is the canonical
/// order used for every serialized modality set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    RfPower,
    Image,
    PointCloud,
    MmWave,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::RfPower,
        Modality::Image,
        Modality::PointCloud,
        Modality::MmWave,
    ];

    pub fn tag(self) -> char {
        match self {
            Modality::RfPower => 'P',
            Modality::Image => 'I',
            Modality::PointCloud => 'C',
            Modality::MmWave => 'M',
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl FromStr for Modality {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "P" => Ok(Modality::RfPower),
            "I" => Ok(Modality::Image),
            "C" => Ok(Modality::PointCloud),
            "M" => Ok(Modality::MmWave),
            other => Err(ParseError::Modality(other.to_string())),
        }
    }
}

/// Ordered set of modalities, iterated in canonical P<I<C<M order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const FULL: ModalitySet = ModalitySet(0b1111);

    pub fn insert(&mut self, m: Modality) {
        self.0 |= m.bit();
    }

    pub fn with(mut self, m: Modality) -> Self {
        self.insert(m);
        self
    }

    pub fn without(self, m: Modality) -> Self {
        ModalitySet(self.0 & !m.bit())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn union(self, other: ModalitySet) -> Self {
        ModalitySet(self.0 | other.0)
    }

    pub fn is_subset(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl FromIterator<Modality> for ModalitySet {
    fn from_iter<T: IntoIterator<Item = Modality>>(iter: T) -> Self {
        let mut set = ModalitySet::EMPTY;
        for m in iter {
            set.insert(m);
        }
        set
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{self}}}")
    }
}

/// `P+I+C` style; the empty set prints as an empty string.
impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<String> = self.iter().map(|m| m.to_string()).collect();
        write!(f, "{}", tags.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Ok(ModalitySet::EMPTY);
        }
        s.split('+').map(str::parse).collect()
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let tags: Vec<String> = self.iter().map(|m| m.to_string()).collect();
        tags.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let tags = Vec::<String>::deserialize(deserializer)?;
        tags.iter()
            .map(|t| t.parse::<Modality>())
            .collect::<Result<ModalitySet, _>>()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Gfm,
    Crm,
    Pim,
}

impl Mode {
    /// Table-1 communication load: High / Moderate / Low.
    pub fn communication_load_rank(self) -> u8 {
        match self {
            Mode::Gfm => 3,
            Mode::Crm => 2,
            Mode::Pim => 1,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Gfm => "GFM",
            Mode::Crm => "CRM",
            Mode::Pim => "PIM",
        })
    }
}

impl FromStr for Mode {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GFM" => Ok(Mode::Gfm),
            "CRM" => Ok(Mode::Crm),
            "PIM" => Ok(Mode::Pim),
            other => Err(ParseError::Mode(other.to_string())),
        }
    }
}

/// One of the seven benchmarked fusion configurations. Illegal
/// mode/modality combinations cannot be represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModeVariant {
    Gfm,
    CrmPic,
    CrmPim,
    CrmPcm,
    PimPi,
    PimPc,
    PimPm,
}

impl ModeVariant {
    /// Canonical order; also the last-resort tie-break in mode selection.
    pub const ALL: [ModeVariant; 7] = [
        ModeVariant::Gfm,
        ModeVariant::CrmPic,
        ModeVariant::CrmPim,
        ModeVariant::CrmPcm,
        ModeVariant::PimPi,
        ModeVariant::PimPc,
        ModeVariant::PimPm,
    ];

    pub fn mode(self) -> Mode {
        match self {
            ModeVariant::Gfm => Mode::Gfm,
            ModeVariant::CrmPic | ModeVariant::CrmPim | ModeVariant::CrmPcm => Mode::Crm,
            ModeVariant::PimPi | ModeVariant::PimPc | ModeVariant::PimPm => Mode::Pim,
        }
    }

    pub fn modalities(self) -> ModalitySet {
        use Modality::*;
        let base = ModalitySet::EMPTY.with(RfPower);
        match self {
            ModeVariant::Gfm => ModalitySet::FULL,
            ModeVariant::CrmPic => base.with(Image).with(PointCloud),
            ModeVariant::CrmPim => base.with(Image).with(MmWave),
            ModeVariant::CrmPcm => base.with(PointCloud).with(MmWave),
            ModeVariant::PimPi => base.with(Image),
            ModeVariant::PimPc => base.with(PointCloud),
            ModeVariant::PimPm => base.with(MmWave),
        }
    }

    pub fn communication_load_rank(self) -> u8 {
        self.mode().communication_load_rank()
    }

    /// Builds a variant from a mode and modality set, if the pair is one of
    /// the seven legal configurations.
    pub fn from_parts(mode: Mode, modalities: ModalitySet) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.mode() == mode && v.modalities() == modalities)
    }

    pub fn of_mode(mode: Mode) -> impl Iterator<Item = ModeVariant> {
        Self::ALL.into_iter().filter(move |v| v.mode() == mode)
    }
}

/// Shorthand for [`ModeVariant::modalities`].
pub fn variant_modalities(v: ModeVariant) -> ModalitySet {
    v.modalities()
}

/// Shorthand for [`ModeVariant::communication_load_rank`].
pub fn communication_load_rank(v: ModeVariant) -> u8 {
    v.communication_load_rank()
}

impl fmt::Display for ModeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode() {
            Mode::Gfm => write!(f, "GFM"),
            mode => write!(f, "{mode}({})", self.modalities()),
        }
    }
}

impl FromStr for ModeVariant {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseError::Variant(s.to_string());
        if s == "GFM" {
            return Ok(ModeVariant::Gfm);
        }
        let (mode, rest) = s.split_once('(').ok_or_else(err)?;
        let set = rest.strip_suffix(')').ok_or_else(err)?;
        let mode: Mode = mode.parse().map_err(|_| err())?;
        if mode == Mode::Gfm {
            return Err(err());
        }
        let set: ModalitySet = set.parse().map_err(|_| err())?;
        // Reject non-canonical spellings such as "PIM(I+P)".
        if set.to_string() != rest.trim_end_matches(')') {
            return Err(err());
        }
        ModeVariant::from_parts(mode, set).ok_or_else(err)
    }
}

macro_rules! serde_via_str {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_str!(Modality);
serde_via_str!(Mode);
serde_via_str!(ModeVariant);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(NodeId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Terminal,
    Edge,
    Cloud,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for NodeKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Terminal" => Ok(NodeKind::Terminal),
            "Edge" => Ok(NodeKind::Edge),
            "Cloud" => Ok(NodeKind::Cloud),
            other => Err(ParseError::NodeKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default)]
    pub sensors: ModalitySet,
    /// Zone coordinates published in the relay knowledge base.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<[f64; 2]>,
}

impl Node {
    pub fn terminal(id: u32, sensors: ModalitySet, zone: [f64; 2]) -> Self {
        Node {
            id: NodeId(id),
            kind: NodeKind::Terminal,
            sensors,
            zone: Some(zone),
        }
    }

    pub fn infrastructure(id: u32, kind: NodeKind) -> Self {
        Node {
            id: NodeId(id),
            kind,
            sensors: ModalitySet::EMPTY,
            zone: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkClass {
    CloudUplink,
    EdgeLocal,
    PeerD2D,
}

impl fmt::Display for LinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for LinkClass {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CloudUplink" => Ok(LinkClass::CloudUplink),
            "EdgeLocal" => Ok(LinkClass::EdgeLocal),
            "PeerD2D" => Ok(LinkClass::PeerD2D),
            other => Err(ParseError::LinkClass(other.to_string())),
        }
    }
}

/// Undirected point-to-point link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub endpoints: (NodeId, NodeId),
    pub class: LinkClass,
    pub bandwidth_bits_per_s: f64,
    pub propagation_s: f64,
    pub per_hop_processing_s: f64,
    #[serde(default = "default_true")]
    pub up: bool,
}

fn default_true() -> bool {
    true
}

impl LinkSpec {
    pub fn new(a: NodeId, b: NodeId, class: LinkClass, bandwidth: f64, prop: f64, proc: f64) -> Self {
        LinkSpec {
            endpoints: (a, b),
            class,
            bandwidth_bits_per_s: bandwidth,
            propagation_s: prop,
            per_hop_processing_s: proc,
            up: true,
        }
    }

    pub fn connects(&self, a: NodeId, b: NodeId) -> bool {
        self.endpoints == (a, b) || self.endpoints == (b, a)
    }

    pub fn touches(&self, n: NodeId) -> bool {
        self.endpoints.0 == n || self.endpoints.1 == n
    }

    pub fn other(&self, n: NodeId) -> Option<NodeId> {
        match self.endpoints {
            (a, b) if a == n => Some(b),
            (a, b) if b == n => Some(a),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.bandwidth_bits_per_s > 0.0
            && self.bandwidth_bits_per_s.is_finite()
            && self.propagation_s >= 0.0
            && self.propagation_s.is_finite()
            && self.per_hop_processing_s >= 0.0
            && self.per_hop_processing_s.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    /// Scenario 31, daytime street.
    Daytime,
    /// Scenario 33, nighttime street.
    Nighttime,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::Daytime, Scenario::Nighttime];

    pub fn dataset_id(self) -> u32 {
        match self {
            Scenario::Daytime => 31,
            Scenario::Nighttime => 33,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Scenario {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Daytime" | "31" => Ok(Scenario::Daytime),
            "Nighttime" | "33" => Ok(Scenario::Nighttime),
            other => Err(ParseError::Scenario(other.to_string())),
        }
    }
}

serde_via_str!(Scenario);

pub const DEFAULT_NUM_BEAMS: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub snr_db: f64,
    pub seed: u64,
    #[serde(default = "default_beams")]
    pub num_beams: u32,
}

fn default_beams() -> u32 {
    DEFAULT_NUM_BEAMS
}

impl ScenarioConfig {
    pub fn is_valid(&self) -> bool {
        self.num_beams >= 2 && self.snr_db.is_finite() && (-10.0..=30.0).contains(&self.snr_db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    FeatureUpload,
    Directive,
    PeerAlert,
    Ack,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for MessageKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FeatureUpload" => Ok(MessageKind::FeatureUpload),
            "Directive" => Ok(MessageKind::Directive),
            "PeerAlert" => Ok(MessageKind::PeerAlert),
            "Ack" => Ok(MessageKind::Ack),
            other => Err(ParseError::MessageKind(other.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("feature upload without a feature")]
    MissingFeature,
    #[error("{0} message without a body")]
    MissingBody(MessageKind),
    #[error("frame of {frame} bytes cannot hold a {body}-byte body")]
    FrameTooSmall { frame: u64, body: u64 },
}

/// A message on the wire. Text bodies travel in a fixed-size frame, so
/// `payload_bytes` is the frame size rather than the body length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub payload_bytes: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub feature: Option<SemanticFeature>,
    pub body: Option<String>,
}

impl Message {
    pub fn feature_upload(src: NodeId, dst: NodeId, feature: SemanticFeature) -> Self {
        Message {
            kind: MessageKind::FeatureUpload,
            payload_bytes: feature.payload_bytes,
            src,
            dst,
            feature: Some(feature),
            body: None,
        }
    }

    pub fn text(
        kind: MessageKind,
        src: NodeId,
        dst: NodeId,
        body: String,
        frame_bytes: u64,
    ) -> Result<Self, MessageError> {
        let body_len = body.len() as u64;
        if body_len > frame_bytes {
            return Err(MessageError::FrameTooSmall {
                frame: frame_bytes,
                body: body_len,
            });
        }
        Ok(Message {
            kind,
            payload_bytes: frame_bytes,
            src,
            dst,
            feature: None,
            body: Some(body),
        })
    }

    pub fn validate(&self) -> Result<(), MessageError> {
        match self.kind {
            MessageKind::FeatureUpload => match &self.feature {
                Some(f) if f.payload_bytes == self.payload_bytes => Ok(()),
                Some(f) => Err(MessageError::FrameTooSmall {
                    frame: self.payload_bytes,
                    body: f.payload_bytes,
                }),
                None => Err(MessageError::MissingFeature),
            },
            MessageKind::Directive | MessageKind::PeerAlert => match &self.body {
                Some(b) if b.len() as u64 <= self.payload_bytes => Ok(()),
                Some(b) => Err(MessageError::FrameTooSmall {
                    frame: self.payload_bytes,
                    body: b.len() as u64,
                }),
                None => Err(MessageError::MissingBody(self.kind)),
            },
            MessageKind::Ack => Ok(()),
        }
    }
}
