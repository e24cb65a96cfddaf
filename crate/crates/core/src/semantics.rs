//! Sensor preprocessing, semantic encoding and attacks on semantic payloads.
//!
//! Features are modelled by their encoded size and a scalar fidelity in
//! `[0, 1]`; there are no latent vectors. Tampering scales fidelity down and
//! breaks the fragile watermark.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Message, MessageKind, Modality, NodeId};
use crate::protocols::{Directive, PeerAlert};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticsError {
    #[error("sequence is empty")]
    Empty,
    #[error("sequence has no finite entry")]
    AllMissing,
    #[error("{count} points exceed target count {target}")]
    TooManyPoints { count: usize, target: usize },
    #[error("IQ sequence is all zero")]
    AllZero,
    #[error("codec for {codec} used to encode {requested}")]
    ModalityMismatch { codec: Modality, requested: Modality },
    #[error("{attack:?} cannot target {target}")]
    IncompatibleAttack { attack: AttackKind, target: String },
    #[error("invalid codec: {0}")]
    InvalidCodec(String),
    #[error("invalid attack: {0}")]
    InvalidAttack(String),
    #[error("malformed message body: {0}")]
    MalformedBody(String),
}

/// Mean-imputes missing (NaN or infinite) entries, then rescales to `[0, 1]`.
/// A constant sequence maps to all zeros.
pub fn minmax_normalize(seq: &[f64]) -> Result<Vec<f64>, SemanticsError> {
    if seq.is_empty() {
        return Err(SemanticsError::Empty);
    }
    let finite: Vec<f64> = seq.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        return Err(SemanticsError::AllMissing);
    }
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let filled: Vec<f64> = seq
        .iter()
        .map(|x| if x.is_finite() { *x } else { mean })
        .collect();
    let lo = filled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = filled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range == 0.0 {
        return Ok(vec![0.0; seq.len()]);
    }
    Ok(filled.iter().map(|x| ((x - lo) / range).clamp(0.0, 1.0)).collect())
}

/// Centers a point cloud, scales it so the farthest point has norm 1, and
/// zero-pads to `target_count`. A cloud of identical points has nothing to
/// scale and comes back as all zeros.
pub fn unit_sphere_pad(
    points: &[[f64; 3]],
    target_count: usize,
) -> Result<Vec<[f64; 3]>, SemanticsError> {
    if points.is_empty() {
        return Err(SemanticsError::Empty);
    }
    if points.len() > target_count {
        return Err(SemanticsError::TooManyPoints {
            count: points.len(),
            target: target_count,
        });
    }
    let n = points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in points {
        for k in 0..3 {
            centroid[k] += p[k] / n;
        }
    }
    let centered: Vec<[f64; 3]> = points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_norm = centered.iter().map(|p| norm3(*p)).fold(0.0, f64::max);
    let mut out: Vec<[f64; 3]> = if max_norm == 0.0 {
        vec![[0.0; 3]; points.len()]
    } else {
        centered
            .iter()
            .map(|p| [p[0] / max_norm, p[1] / max_norm, p[2] / max_norm])
            .collect()
    };
    out.resize(target_count, [0.0; 3]);
    Ok(out)
}

fn norm3(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Scales an IQ sequence so its largest magnitude is 1.
pub fn normalize_iq(iq: &[Complex64]) -> Result<Vec<Complex64>, SemanticsError> {
    if iq.is_empty() {
        return Err(SemanticsError::Empty);
    }
    let peak = iq.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(SemanticsError::AllZero);
    }
    Ok(iq.iter().map(|z| z / peak).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticFeature {
    pub modality: Modality,
    pub payload_bytes: u64,
    pub fidelity: f64,
    pub origin: NodeId,
    pub tampered: bool,
    pub watermark_valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub modality: Modality,
    pub raw_bytes: u64,
    pub compression_ratio: f64,
    pub base_fidelity: f64,
}

impl CodecSpec {
    pub fn validate(&self) -> Result<(), SemanticsError> {
        if self.raw_bytes == 0 {
            return Err(SemanticsError::InvalidCodec(format!(
                "{}: raw_bytes must be positive",
                self.modality
            )));
        }
        if !(self.compression_ratio > 0.0 && self.compression_ratio <= 1.0) {
            return Err(SemanticsError::InvalidCodec(format!(
                "{}: compression_ratio must lie in (0, 1]",
                self.modality
            )));
        }
        if !(self.base_fidelity > 0.0 && self.base_fidelity <= 1.0) {
            return Err(SemanticsError::InvalidCodec(format!(
                "{}: base_fidelity must lie in (0, 1]",
                self.modality
            )));
        }
        Ok(())
    }

    pub fn encoded_bytes(&self) -> u64 {
        ((self.raw_bytes as f64 * self.compression_ratio).ceil() as u64).max(1)
    }
}

/// One codec per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecSet {
    codecs: [CodecSpec; 4],
}

impl CodecSet {
    /// Raw sizes are picked so the four encoded features sum to 2 MB:
    /// RF 200 kB, image 400 kB, point cloud 600 kB, mmWave 800 kB.
    pub fn defaults() -> Self {
        let c = |modality, raw_bytes, compression_ratio| CodecSpec {
            modality,
            raw_bytes,
            compression_ratio,
            base_fidelity: 0.95,
        };
        CodecSet {
            codecs: [
                c(Modality::RfPower, 400_000, 0.50),
                c(Modality::Image, 8_000_000, 0.05),
                c(Modality::PointCloud, 6_000_000, 0.10),
                c(Modality::MmWave, 4_000_000, 0.20),
            ],
        }
    }

    /// Replaces the codec for `spec.modality`.
    pub fn with(mut self, spec: CodecSpec) -> Result<Self, SemanticsError> {
        spec.validate()?;
        let i = spec.modality as usize;
        self.codecs[i] = spec;
        Ok(self)
    }

    pub fn get(&self, m: Modality) -> &CodecSpec {
        &self.codecs[m as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = &CodecSpec> {
        self.codecs.iter()
    }

    pub fn encoded_bytes(&self) -> [u64; 4] {
        Modality::ALL.map(|m| self.get(m).encoded_bytes())
    }
}

pub fn encode(
    modality: Modality,
    codec: &CodecSpec,
    origin: NodeId,
) -> Result<SemanticFeature, SemanticsError> {
    if codec.modality != modality {
        return Err(SemanticsError::ModalityMismatch {
            codec: codec.modality,
            requested: modality,
        });
    }
    codec.validate()?;
    Ok(SemanticFeature {
        modality,
        payload_bytes: codec.encoded_bytes(),
        fidelity: codec.base_fidelity,
        origin,
        tampered: false,
        watermark_valid: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    SemanticTamper,
    MaliciousRelay,
    CrossModalMislead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub probability: f64,
    /// Fidelity multiplier applied when the attack lands.
    pub severity: f64,
    /// Restrict feature tampering to one modality. `None` hits every upload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, probability: f64, severity: f64) -> Self {
        AttackSpec { kind, probability, severity, modality: None }
    }

    pub fn on_modality(mut self, modality: Modality) -> Self {
        self.modality = Some(modality);
        self
    }

    pub fn targets(&self, modality: Modality) -> bool {
        self.modality.is_none_or(|m| m == modality)
    }

    pub fn validate(&self) -> Result<(), SemanticsError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(SemanticsError::InvalidAttack(format!(
                "{:?}: probability must lie in [0, 1]",
                self.kind
            )));
        }
        if !(self.severity > 0.0 && self.severity <= 1.0) {
            return Err(SemanticsError::InvalidAttack(format!(
                "{:?}: severity must lie in (0, 1]",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Result of an attack attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct Injected<T> {
    pub value: T,
    pub hit: bool,
}

/// Anything an [`AttackSpec`] can be aimed at.
pub trait AttackTarget: Sized {
    fn describe(&self) -> String;
    fn accepts(&self, kind: AttackKind) -> bool;
    /// Applies a landed attack. Only called when `accepts` holds.
    fn corrupt<R: Rng + ?Sized>(self, attack: &AttackSpec, rng: &mut R) -> Result<Self, SemanticsError>;
}

impl AttackTarget for SemanticFeature {
    fn describe(&self) -> String {
        format!("feature({})", self.modality)
    }

    fn accepts(&self, kind: AttackKind) -> bool {
        kind == AttackKind::SemanticTamper
    }

    fn corrupt<R: Rng + ?Sized>(mut self, attack: &AttackSpec, _rng: &mut R) -> Result<Self, SemanticsError> {
        self.fidelity *= attack.severity;
        self.tampered = true;
        self.watermark_valid = false;
        Ok(self)
    }
}

impl AttackTarget for Message {
    fn describe(&self) -> String {
        format!("{} message", self.kind)
    }

    fn accepts(&self, kind: AttackKind) -> bool {
        match kind {
            AttackKind::SemanticTamper => {
                self.kind == MessageKind::FeatureUpload && self.feature.is_some()
            }
            AttackKind::MaliciousRelay => self.kind == MessageKind::Directive,
            AttackKind::CrossModalMislead => self.kind == MessageKind::PeerAlert,
        }
    }

    fn corrupt<R: Rng + ?Sized>(mut self, attack: &AttackSpec, rng: &mut R) -> Result<Self, SemanticsError> {
        match attack.kind {
            AttackKind::SemanticTamper => {
                let f = self.feature.take().expect("accepts() checked the feature");
                self.feature = Some(f.corrupt(attack, rng)?);
            }
            AttackKind::MaliciousRelay => {
                let body = self.body.as_deref().unwrap_or_default();
                let mut d = Directive::parse(body).map_err(SemanticsError::MalformedBody)?;
                // Steer the beam somewhere useless and drop the signature.
                d.coords = (
                    d.coords.0 + rng.random_range(50.0..150.0),
                    d.coords.1 - rng.random_range(50.0..150.0),
                );
                d.signature_valid = false;
                self.body = Some(d.to_wire());
            }
            AttackKind::CrossModalMislead => {
                let body = self.body.as_deref().unwrap_or_default();
                let mut a = PeerAlert::parse(body).map_err(SemanticsError::MalformedBody)?;
                a.object = PeerAlert::PHANTOM.to_string();
                a.coords = (
                    a.coords.0 + rng.random_range(10.0..40.0),
                    a.coords.1 + rng.random_range(10.0..40.0),
                );
                self.body = Some(a.to_wire());
            }
        }
        Ok(self)
    }
}

/// Lands `attack` on `target` with probability `attack.probability`.
pub fn inject_attack<T: AttackTarget, R: Rng + ?Sized>(
    target: T,
    attack: &AttackSpec,
    rng: &mut R,
) -> Result<Injected<T>, SemanticsError> {
    attack.validate()?;
    if !target.accepts(attack.kind) {
        return Err(SemanticsError::IncompatibleAttack {
            attack: attack.kind,
            target: target.describe(),
        });
    }
    if rng.random_bool(attack.probability) {
        Ok(Injected {
            value: target.corrupt(attack, rng)?,
            hit: true,
        })
    } else {
        Ok(Injected {
            value: target,
            hit: false,
        })
    }
}

/// Fragile-watermark check. Intact features always pass; a broken watermark
/// is caught with probability `detection_prob`.
pub fn verify_watermark<R: Rng + ?Sized>(f: &SemanticFeature, detection_prob: f64, rng: &mut R) -> bool {
    if f.watermark_valid {
        return true;
    }
    !rng.random_bool(detection_prob.clamp(0.0, 1.0))
}
