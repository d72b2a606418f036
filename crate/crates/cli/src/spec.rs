//! Experiment spec files: parsing, parameter paths and validation.

use std::path::Path;

use prism_core::acquisition::{sample_count, EngineMode};
use prism_core::extraction::{ReconstructionOptions, Variant};
use prism_core::floquet::{FloquetError, ProtocolConfig};
use prism_core::metrics::{SyntheticSuppression, Window};
use prism_core::scenario::FieldScenario;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const SPEC_SCHEMA: &str = "prism-forge/experiment/1";
const SCHEMA_PREFIX: &str = "prism-forge/experiment/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema: String,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub scenario: FieldScenario,
    #[serde(default)]
    pub mode: EngineMode,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default)]
    pub analysis: Analysis,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default = "yes")]
    pub record: bool,
    #[serde(default = "yes")]
    pub extraction: bool,
    #[serde(default = "yes")]
    pub metrics: bool,
    #[serde(default = "yes")]
    pub spectrum: bool,
    /// Engine truth, one row per sample.
    #[serde(default)]
    pub trajectory: bool,
    /// Grid size for the stability map.
    #[serde(default)]
    pub stability_map: Option<usize>,
    #[serde(default)]
    pub suppression_curve: Option<SuppressionRequest>,
    #[serde(default)]
    pub plot_script: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            record: true,
            extraction: true,
            metrics: true,
            spectrum: true,
            trajectory: false,
            stability_map: None,
            suppression_curve: None,
            plot_script: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuppressionRequest {
    pub oracle: SyntheticSuppression,
    pub f_min: f64,
    pub f_max: f64,
    pub step: f64,
}

impl Default for SuppressionRequest {
    fn default() -> Self {
        SuppressionRequest {
            oracle: SyntheticSuppression::default(),
            f_min: 0.0,
            f_max: 1200.0,
            step: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analysis {
    pub variant: Variant,
    /// Odd window, in record samples, for the normalized variant's baseline.
    pub baseline_window: usize,
    pub metrics: MetricsOptions,
    pub reconstruction: Option<ReconstructionOptions>,
}

impl Default for Analysis {
    fn default() -> Self {
        Analysis {
            variant: Variant::Plain,
            baseline_window: 201,
            metrics: MetricsOptions::default(),
            reconstruction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTone {
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsOptions {
    /// Frequency read out as the response; defaults to a sine target's frequency.
    pub test_frequency: Option<f64>,
    /// Extra frequencies excluded from the noise floor.
    pub mask_frequencies: Vec<f64>,
    pub mask_half_width: usize,
    /// Known tone used to convert to field units; defaults to a sine target.
    pub calibration: Option<CalibrationTone>,
    pub window: Window,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            test_frequency: None,
            mask_frequencies: Vec::new(),
            mask_half_width: 2,
            calibration: None,
            window: Window::Rectangular,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Rad,
    Deg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Order {
    #[default]
    Given,
    /// Seed defaults to the scenario's.
    Shuffled {
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linspace {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// Dotted path into the spec, e.g. `protocol.flip_angle`.
    pub parameter: String,
    #[serde(default)]
    pub values: Vec<f64>,
    #[serde(default)]
    pub linspace: Option<Linspace>,
    #[serde(default)]
    pub unit: Option<Unit>,
    #[serde(default)]
    pub order: Order,
}

impl Sweep {
    /// Values as written in the spec, before unit conversion.
    pub fn raw_values(&self) -> Vec<f64> {
        let mut out = self.values.clone();
        if let Some(l) = self.linspace {
            match l.count {
                0 => {}
                1 => out.push(l.start),
                n => out.extend(
                    (0..n).map(|k| l.start + (l.stop - l.start) * k as f64 / (n - 1) as f64),
                ),
            }
        }
        out
    }

    pub fn si_values(&self) -> Vec<f64> {
        let raw = self.raw_values();
        match self.unit {
            Some(Unit::Deg) => raw.iter().map(|v| v.to_radians()).collect(),
            _ => raw,
        }
    }

    /// Indices into `si_values` in execution order.
    pub fn execution_order(&self, default_seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.raw_values().len()).collect();
        if let Order::Shuffled { seed } = self.order {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.unwrap_or(default_seed));
            idx.shuffle(&mut rng);
        }
        idx
    }
}

fn parse_error(e: &serde_json::Error, path: &Path) -> CliError {
    CliError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| parse_error(&e, path))?;
        match value.get("schema").and_then(Value::as_str) {
            Some(SPEC_SCHEMA) => {}
            Some(s) if s.starts_with(SCHEMA_PREFIX) => {
                return Err(CliError::Schema(format!(
                    "unsupported schema version {s:?}; this build reads {SPEC_SCHEMA}"
                )))
            }
            Some(s) => return Err(CliError::Schema(format!("unknown schema {s:?}"))),
            None => return Err(CliError::Schema("missing \"schema\" field".into())),
        }
        serde_json::from_str(text).map_err(|e| parse_error(&e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Copy with `path` set to `value`; the path must already exist.
    pub fn with_parameter(&self, path: &str, value: f64) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("spec serializes");
        let slot = lookup_mut(&mut tree, path)?;
        if slot.is_object() || slot.is_array() {
            return Err(CliError::Path(format!("{path} is not a scalar")));
        }
        *slot = serde_json::json!(value);
        serde_json::from_value(tree).map_err(|e| CliError::Path(format!("{path}: {e}")))
    }

    /// Every sweep point, in value order; a missing or empty sweep is one point.
    pub fn points(&self) -> Result<Vec<Self>> {
        let base = ExperimentSpec {
            sweep: None,
            ..self.clone()
        };
        match &self.sweep {
            Some(s) if !s.raw_values().is_empty() => s
                .si_values()
                .into_iter()
                .map(|v| base.with_parameter(&s.parameter, v))
                .collect(),
            _ => Ok(vec![base]),
        }
    }
}

fn lookup_mut<'a>(tree: &'a mut Value, path: &str) -> Result<&'a mut Value> {
    let mut node = tree;
    for key in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(key),
            Value::Array(items) => key
                .parse::<usize>()
                .ok()
                .and_then(move |i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| {
            CliError::Path(format!(
                "parameter path {path:?} does not exist (at {key:?})"
            ))
        })?;
    }
    Ok(node)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.errors.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }
}

fn check_point(spec: &ExperimentSpec, label: &str, report: &mut ValidationReport) {
    let at = |f: &str| {
        if label.is_empty() {
            f.to_string()
        } else {
            format!("{label}: {f}")
        }
    };
    for v in spec.protocol.violations() {
        match v {
            FloquetError::InvalidConfig { field, reason } => {
                report.error(at(&format!("protocol.{field}")), reason)
            }
            other => report.error(at("protocol"), other.to_string()),
        }
    }
    if let Err(e) = spec.scenario.validate() {
        report.error(at("scenario"), e.to_string());
    }
    if let Err(e) = spec.mode.validate() {
        report.error(at("mode"), e.to_string());
    }
    if spec.protocol.violations().is_empty() && spec.scenario.validate().is_ok() {
        let n = sample_count(&spec.protocol, &spec.scenario);
        if n < 8 {
            report.error(
                at("scenario.duration"),
                format!("yields {n} samples; at least 8 needed"),
            );
        }
        if let Some(r) = &spec.analysis.reconstruction {
            if r.calibration_end >= n {
                report.error(
                    at("analysis.reconstruction.calibration_end"),
                    format!("beyond the {n}-sample record"),
                );
            }
        }
    }
}

/// Schema and invariant checks without running anything.
pub fn validate(spec: &ExperimentSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    if spec.schema != SPEC_SCHEMA {
        report.error("schema", format!("expected {SPEC_SCHEMA}"));
    }
    check_point(spec, "", &mut report);

    let a = &spec.analysis;
    if a.variant == Variant::Normalized
        && (a.baseline_window < 3 || a.baseline_window.is_multiple_of(2))
    {
        report.error("analysis.baseline_window", "must be odd and at least 3");
    }
    for (name, f) in a
        .metrics
        .test_frequency
        .iter()
        .map(|f| ("analysis.metrics.test_frequency", *f))
        .chain(
            a.metrics
                .mask_frequencies
                .iter()
                .map(|f| ("analysis.metrics.mask_frequencies", *f)),
        )
    {
        if !(f.is_finite() && f >= 0.0) {
            report.error(name, "must be a non-negative frequency");
        }
    }
    if let Some(c) = &a.metrics.calibration {
        if !(c.frequency.is_finite()
            && c.frequency > 0.0
            && c.amplitude.is_finite()
            && c.amplitude != 0.0)
        {
            report.error(
                "analysis.metrics.calibration",
                "needs a positive frequency and a non-zero amplitude",
            );
        }
    }
    if let Some(r) = &a.reconstruction {
        if r.envelope_window == 0 || r.baseline_window == 0 {
            report.error("analysis.reconstruction", "windows must be positive");
        }
    }
    if spec.outputs.stability_map == Some(0) {
        report.error("outputs.stability_map", "needs at least one grid point");
    }
    if let Some(s) = &spec.outputs.suppression_curve {
        let o = &s.oracle;
        if !(s.step > 0.0 && s.f_min >= 0.0 && s.f_max >= s.f_min && s.f_max.is_finite()) {
            report.error(
                "outputs.suppression_curve",
                "needs 0 <= f_min <= f_max and a positive step",
            );
        }
        if !(o.record_rate > 0.0 && o.duration > 0.0 && o.f_signal > 0.0) {
            report.error(
                "outputs.suppression_curve.oracle",
                "rate, duration and signal frequency must be positive",
            );
        } else if s.f_max >= 0.25 * o.record_rate {
            report.error(
                "outputs.suppression_curve.f_max",
                "must stay below a quarter of the record rate",
            );
        }
    }

    if let Some(sw) = &spec.sweep {
        let values = sw.raw_values();
        if values.iter().any(|v| !v.is_finite()) {
            report.error("sweep.values", "must be finite");
        }
        if let Some(l) = sw.linspace {
            if l.count == 0 {
                report.error("sweep.linspace.count", "must be positive");
            }
        }
        let base = ExperimentSpec {
            sweep: None,
            ..spec.clone()
        };
        for (i, v) in sw.si_values().iter().enumerate() {
            match base.with_parameter(&sw.parameter, *v) {
                Ok(point) => check_point(&point, &format!("sweep point {i}"), &mut report),
                Err(e) => {
                    report.error("sweep.parameter", e.to_string());
                    break;
                }
            }
        }
    }

    if spec.protocol.has_unflagged_period_mismatch() {
        report.warnings.push(format!(
            "orbit period {:.6e} s is not matched to two pulse cycles ({:.6e} s) and no frequency offset is set",
            spec.protocol.orbit_period(),
            spec.protocol.cycle_period()
        ));
    }
    report.warnings.extend(spec.scenario.warnings());
    report
}
