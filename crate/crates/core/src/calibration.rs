//! Analytic stand-ins for the neural models: a per-variant compute-cost table
//! and a logistic accuracy-versus-SNR curve per (variant, scenario).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Spanned;

use crate::model::{Mode, Modality, ModeVariant, NodeId, Scenario};
use crate::netmodel::{plan_flow, NetError, Payloads, Topology};

/// The published accuracy operating point every calibration must reproduce.
pub const ANCHOR_VARIANT: ModeVariant = ModeVariant::Gfm;
pub const ANCHOR_SCENARIO: Scenario = Scenario::Daytime;
pub const ANCHOR_SNR_DB: f64 = 25.0;
pub const ANCHOR_ACCURACY: f64 = 0.769;
pub const ANCHOR_TOLERANCE: f64 = 0.001;

/// Allowed night-time gap between CRM(P+I+M) and GFM peaks.
pub const NIGHT_CRM_GAP: f64 = 0.05;

pub const DEFAULT_NAME: &str = "table2_fig4_default";
const DEFAULT_TEXT: &str = include_str!("../data/table2_fig4_default.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}: cannot read: {message}")]
    Io { origin: String, message: String },
    #[error("MissingVariant: no {section} entry for {variant}")]
    MissingVariant { variant: ModeVariant, section: String },
    #[error("constraint `{constraint}` violated{}: {detail}", line_suffix(*.line))]
    Violation {
        constraint: &'static str,
        line: Option<usize>,
        detail: String,
    },
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComputeCost {
    pub flops_g: f64,
    pub memory_mb: f64,
    /// Kept in milliseconds so table values stay bit-exact.
    pub inference_ms: f64,
}

impl ComputeCost {
    pub fn inference_s(&self) -> f64 {
        self.inference_ms / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityParams {
    pub peak: BTreeMap<(ModeVariant, Scenario), f64>,
    pub num_beams: u32,
    pub midpoint_db: f64,
    pub slope_db: f64,
}

impl QualityParams {
    pub fn chance(&self) -> f64 {
        1.0 / self.num_beams as f64
    }

    fn curve(&self, peak: f64, snr_db: f64) -> f64 {
        let c = self.chance();
        c + (peak - c) * logistic((snr_db - self.midpoint_db) / self.slope_db)
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Peak accuracy that makes the curve pass through `(snr_db, accuracy)`.
pub fn solve_peak(accuracy: f64, snr_db: f64, num_beams: u32, midpoint_db: f64, slope_db: f64) -> f64 {
    let c = 1.0 / num_beams as f64;
    c + (accuracy - c) / logistic((snr_db - midpoint_db) / slope_db)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSource {
    pub origin: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    costs: BTreeMap<ModeVariant, ComputeCost>,
    quality: QualityParams,
    source: CalibrationSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintCheck {
    pub name: &'static str,
    pub passed: bool,
    pub line: Option<usize>,
    pub detail: String,
}

impl fmt::Display for ConstraintCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}", self.name)?;
        if let Some(l) = self.line {
            write!(f, " (line {l})")?;
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

/// Outcome of checking a calibration file against every table invariant.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub checks: Vec<ConstraintCheck>,
    /// Present only when every check passed.
    pub table: Option<CalibrationTable>,
    /// First failure as an error value, for callers that stop there.
    pub first_error: Option<CalibrationError>,
}

impl CalibrationReport {
    pub fn passed(&self) -> bool {
        self.first_error.is_none()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    costs: BTreeMap<String, Spanned<RawCost>>,
    quality: RawQuality,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    flops_g: f64,
    memory_mb: f64,
    inference_ms: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuality {
    num_beams: Spanned<u32>,
    midpoint_db: f64,
    slope_db: Spanned<f64>,
    anchor: Option<RawAnchor>,
    #[serde(default)]
    peak: BTreeMap<String, BTreeMap<String, Spanned<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnchor {
    variant: String,
    scenario: String,
    snr_db: f64,
    accuracy: f64,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Collects check outcomes and remembers the first failure.
struct Checker {
    checks: Vec<ConstraintCheck>,
    first_error: Option<CalibrationError>,
}

impl Checker {
    fn record(&mut self, name: &'static str, line: Option<usize>, failure: Option<String>, pass_detail: String) {
        let passed = failure.is_none();
        if let (Some(detail), None) = (&failure, &self.first_error) {
            self.first_error = Some(CalibrationError::Violation {
                constraint: name,
                line,
                detail: detail.clone(),
            });
        }
        self.checks.push(ConstraintCheck {
            name,
            passed,
            line: if passed { None } else { line },
            detail: failure.unwrap_or(pass_detail),
        });
    }

    fn missing(&mut self, variant: ModeVariant, section: String) {
        if self.first_error.is_none() {
            self.first_error = Some(CalibrationError::MissingVariant {
                variant,
                section: section.clone(),
            });
        }
        self.checks.push(ConstraintCheck {
            name: "variants-present",
            passed: false,
            line: None,
            detail: format!("MissingVariant: no {section} entry for {variant}"),
        });
    }
}

impl CalibrationTable {
    /// The shipped default table.
    pub fn builtin() -> Self {
        Self::from_toml_str(DEFAULT_TEXT, &format!("builtin:{DEFAULT_NAME}"))
            .expect("shipped calibration is valid")
    }

    pub fn builtin_text() -> &'static str {
        DEFAULT_TEXT
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibrationError::Io {
            origin: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, CalibrationError> {
        let report = Self::inspect(text, origin)?;
        match report.first_error {
            Some(e) => Err(e),
            None => Ok(report.table.expect("passing report carries a table")),
        }
    }

    /// Parses `text` and runs every constraint, returning the full report.
    /// Only syntax and schema problems are returned as `Err`.
    pub fn inspect(text: &str, origin: &str) -> Result<CalibrationReport, CalibrationError> {
        let parse_err = |message: String| CalibrationError::Parse {
            origin: origin.to_string(),
            message,
        };
        let raw: RawFile = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let mut ck = Checker {
            checks: Vec::new(),
            first_error: None,
        };

        let mut costs = BTreeMap::new();
        let mut cost_lines = BTreeMap::new();
        for (name, cost) in &raw.costs {
            let line = line_of(text, cost.span().start);
            let variant: ModeVariant = name
                .parse()
                .map_err(|e| parse_err(format!("line {line}: {e}")))?;
            let c = cost.get_ref();
            costs.insert(
                variant,
                ComputeCost {
                    flops_g: c.flops_g,
                    memory_mb: c.memory_mb,
                    inference_ms: c.inference_ms,
                },
            );
            cost_lines.insert(variant, line);
        }

        let mut peak = BTreeMap::new();
        let mut peak_lines = BTreeMap::new();
        for (scenario_name, entries) in &raw.quality.peak {
            let scenario: Scenario = scenario_name
                .parse()
                .map_err(|e| parse_err(format!("[quality.peak.{scenario_name}]: {e}")))?;
            for (name, value) in entries {
                let line = line_of(text, value.span().start);
                let variant: ModeVariant = name
                    .parse()
                    .map_err(|e| parse_err(format!("line {line}: {e}")))?;
                peak.insert((variant, scenario), *value.get_ref());
                peak_lines.insert((variant, scenario), line);
            }
        }

        let num_beams = *raw.quality.num_beams.get_ref();
        let slope_db = *raw.quality.slope_db.get_ref();
        let midpoint_db = raw.quality.midpoint_db;
        let params_ok = num_beams >= 2 && slope_db > 0.0 && slope_db.is_finite() && midpoint_db.is_finite();
        ck.record(
            "quality-parameters",
            Some(if num_beams < 2 {
                line_of(text, raw.quality.num_beams.span().start)
            } else {
                line_of(text, raw.quality.slope_db.span().start)
            }),
            (!params_ok).then(|| {
                format!("need num_beams >= 2 and slope_db > 0, got {num_beams} and {slope_db}")
            }),
            format!("num_beams={num_beams} midpoint_db={midpoint_db} slope_db={slope_db}"),
        );

        if let (Some(anchor), true) = (&raw.quality.anchor, params_ok) {
            let variant: ModeVariant = anchor.variant.parse().map_err(|e| parse_err(format!("[quality.anchor]: {e}")))?;
            let scenario: Scenario = anchor.scenario.parse().map_err(|e| parse_err(format!("[quality.anchor]: {e}")))?;
            peak.entry((variant, scenario)).or_insert_with(|| {
                solve_peak(anchor.accuracy, anchor.snr_db, num_beams, midpoint_db, slope_db)
            });
        }

        let mut all_present = true;
        for v in ModeVariant::ALL {
            if !costs.contains_key(&v) {
                ck.missing(v, "[costs]".into());
                all_present = false;
            }
        }
        for s in Scenario::ALL {
            for v in ModeVariant::ALL {
                if !peak.contains_key(&(v, s)) {
                    ck.missing(v, format!("[quality.peak.{s}]"));
                    all_present = false;
                }
            }
        }
        if all_present {
            ck.record("variants-present", None, None, "7 variants x 2 scenarios".into());
        }

        let bad_cost = costs.iter().find(|(_, c)| {
            ![c.flops_g, c.memory_mb, c.inference_ms]
                .iter()
                .all(|x| x.is_finite() && *x > 0.0)
        });
        ck.record(
            "cost-positive",
            bad_cost.map(|(v, _)| cost_lines[v]),
            bad_cost.map(|(v, c)| format!("{v} has non-positive cost {c:?}")),
            "all costs finite and positive".into(),
        );

        let quality = QualityParams {
            peak,
            num_beams,
            midpoint_db,
            slope_db,
        };
        let line = |key: &(ModeVariant, Scenario)| peak_lines.get(key).copied();

        if all_present && params_ok {
            let bad = quality.peak.iter().find(|(_, a)| !(**a > 0.0 && **a < 1.0));
            ck.record(
                "peak-range",
                bad.and_then(|(k, _)| line(k)),
                bad.map(|((v, s), a)| format!("{v}/{s} peak {a} outside (0, 1)")),
                "all peaks in (0, 1)".into(),
            );

            let c = quality.chance();
            let bad = quality.peak.iter().find(|(_, a)| **a <= c);
            ck.record(
                "chance-below-peaks",
                bad.and_then(|(k, _)| line(k)),
                bad.map(|((v, s), a)| format!("{v}/{s} peak {a} not above chance {c}")),
                format!("chance {c} below every peak"),
            );

            let mut violation = None;
            'outer: for s in Scenario::ALL {
                for small in ModeVariant::ALL {
                    for big in ModeVariant::ALL {
                        let strict = small != big && small.modalities().is_subset(big.modalities());
                        if strict && quality.peak[&(small, s)] > quality.peak[&(big, s)] {
                            violation = Some((small, big, s));
                            break 'outer;
                        }
                    }
                }
            }
            ck.record(
                "subset-monotonicity",
                violation.and_then(|(small, _, s)| line(&(small, s))),
                violation.map(|(small, big, s)| {
                    format!(
                        "{small} peak {} exceeds {big} peak {} in {s}",
                        quality.peak[&(small, s)],
                        quality.peak[&(big, s)]
                    )
                }),
                "every variant at or above each variant it contains".into(),
            );

            let night = quality.peak[&(ModeVariant::PimPi, Scenario::Nighttime)];
            let day = quality.peak[&(ModeVariant::PimPi, Scenario::Daytime)];
            ck.record(
                "nighttime-vision-penalty",
                line(&(ModeVariant::PimPi, Scenario::Nighttime)),
                (night >= day).then(|| format!("PIM(P+I) night peak {night} not below day peak {day}")),
                format!("PIM(P+I) night {night} < day {day}"),
            );

            let crm = quality.peak[&(ModeVariant::CrmPim, Scenario::Nighttime)];
            let gfm = quality.peak[&(ModeVariant::Gfm, Scenario::Nighttime)];
            ck.record(
                "crm-approaches-gfm-at-night",
                line(&(ModeVariant::CrmPim, Scenario::Nighttime)),
                (crm < gfm - NIGHT_CRM_GAP)
                    .then(|| format!("CRM(P+I+M) night peak {crm} more than {NIGHT_CRM_GAP} below GFM {gfm}")),
                format!("CRM(P+I+M) {crm} within {NIGHT_CRM_GAP} of GFM {gfm}"),
            );

            let acc = quality.curve(quality.peak[&(ANCHOR_VARIANT, ANCHOR_SCENARIO)], ANCHOR_SNR_DB);
            ck.record(
                "anchor-reproduction",
                line(&(ANCHOR_VARIANT, ANCHOR_SCENARIO)),
                ((acc - ANCHOR_ACCURACY).abs() > ANCHOR_TOLERANCE).then(|| {
                    format!("{ANCHOR_VARIANT}/{ANCHOR_SCENARIO} at {ANCHOR_SNR_DB} dB gives {acc:.4}, expected {ANCHOR_ACCURACY}±{ANCHOR_TOLERANCE}")
                }),
                format!("{ANCHOR_VARIANT}/{ANCHOR_SCENARIO} at {ANCHOR_SNR_DB} dB = {acc:.6}"),
            );
        }

        let table = ck.first_error.is_none().then(|| CalibrationTable {
            costs,
            quality,
            source: CalibrationSource {
                origin: origin.to_string(),
                sha256: hex::encode(Sha256::digest(text.as_bytes())),
            },
        });
        Ok(CalibrationReport {
            checks: ck.checks,
            table,
            first_error: ck.first_error,
        })
    }

    pub fn quality(&self) -> &QualityParams {
        &self.quality
    }

    pub fn source(&self) -> &CalibrationSource {
        &self.source
    }

    pub fn chance(&self) -> f64 {
        self.quality.chance()
    }

    pub fn peak(&self, v: ModeVariant, s: Scenario) -> Result<f64, CalibrationError> {
        self.quality
            .peak
            .get(&(v, s))
            .copied()
            .ok_or_else(|| CalibrationError::MissingVariant {
                variant: v,
                section: format!("[quality.peak.{s}]"),
            })
    }

    /// Fraction of the above-chance margin kept when modality `m` drops out
    /// of a `v` fusion. Uses the legal variant `v` minus `m` when one exists;
    /// otherwise the harshest legal single-modality removal, or 0 if there is
    /// none.
    pub fn removal_factor(&self, v: ModeVariant, m: Modality, s: Scenario) -> Result<f64, CalibrationError> {
        let c = self.chance();
        let margin_v = self.peak(v, s)? - c;
        let ratio = |u: ModeVariant| -> Result<f64, CalibrationError> {
            Ok(((self.peak(u, s)? - c) / margin_v).clamp(0.0, 1.0))
        };
        let sub = |m: Modality| {
            let rest = v.modalities().without(m);
            [Mode::Crm, Mode::Pim]
                .into_iter()
                .find_map(|mode| ModeVariant::from_parts(mode, rest))
        };
        if let Some(u) = sub(m) {
            return ratio(u);
        }
        let mut worst: Option<f64> = None;
        for other in v.modalities().iter().filter(|o| *o != m) {
            if let Some(u) = sub(other) {
                let r = ratio(u)?;
                worst = Some(worst.map_or(r, |w: f64| w.min(r)));
            }
        }
        Ok(worst.unwrap_or(0.0))
    }
}

pub fn compute_cost(v: ModeVariant, table: &CalibrationTable) -> Result<ComputeCost, CalibrationError> {
    table
        .costs
        .get(&v)
        .copied()
        .ok_or_else(|| CalibrationError::MissingVariant {
            variant: v,
            section: "[costs]".into(),
        })
}

/// Clean beam-prediction accuracy of `v` in scenario `s` at `snr_db`.
pub fn sensing_accuracy(
    v: ModeVariant,
    s: Scenario,
    snr_db: f64,
    table: &CalibrationTable,
) -> Result<f64, CalibrationError> {
    Ok(table.quality.curve(table.peak(v, s)?, snr_db))
}

/// Scales the above-chance margin of `base` by the product of `fidelities`.
pub fn effective_accuracy<I>(base: f64, fidelities: I, chance: f64) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let product: f64 = fidelities.into_iter().map(|f| f.clamp(0.0, 1.0)).product();
    chance + (base - chance) * product
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyBreakdown {
    pub inference_s: f64,
    pub transmission_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatencyError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// Inference plus the transmission time of the variant's characteristic
/// message flow, planned for the lowest-id workable terminal.
pub fn total_latency(
    v: ModeVariant,
    topo: &Topology,
    table: &CalibrationTable,
    payloads: &Payloads,
) -> Result<LatencyBreakdown, LatencyError> {
    total_latency_for(v, topo, table, payloads, None)
}

/// As [`total_latency`], with the flow planned on behalf of `anchor`.
pub fn total_latency_for(
    v: ModeVariant,
    topo: &Topology,
    table: &CalibrationTable,
    payloads: &Payloads,
    anchor: Option<NodeId>,
) -> Result<LatencyBreakdown, LatencyError> {
    let inference_s = compute_cost(v, table)?.inference_s();
    let plan = plan_flow(v, topo, anchor, payloads)?;
    let transmission_s = plan.transmission_s(payloads)?;
    Ok(LatencyBreakdown {
        inference_s,
        transmission_s,
        total_s: inference_s + transmission_s,
    })
}
