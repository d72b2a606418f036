//! Declarative description of everything the sensor sees: target field,
//! bias, detector-side backgrounds, vibration, decay and readout noise.
//!
//! Fields are in tesla, frequencies in Hz, times in seconds. Backgrounds are
//! complex baseband phasors added at the detector; they never act on spins.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotor::Vec3;

/// Vacuum permeability, T m / A.
pub const MU0: f64 = 4e-7 * PI;
/// 13C gyromagnetic ratio as an angular rate, rad / (s T).
pub const GAMMA_13C: f64 = 2.0 * PI * 10.7084e6;
/// Half-width of the resonator pass band used for in-band checks, Hz.
pub const DEFAULT_HALF_BAND: f64 = 13.2e3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("time {t} s outside [0, {duration}] s")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("invalid scenario field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("table lookup at {0} outside the table range")]
    OutsideTable(f64),
    #[error("coil radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("reading waveform CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("waveform CSV line {line}: {reason}")]
    CsvContent { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Instantaneous frequency law with a closed-form phase integral.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrequencyLaw {
    Constant(f64),
    /// Triangle between `center - deviation` and `center + deviation`,
    /// `rate` full periods per second, starting at the low end.
    Triangle {
        center: f64,
        deviation: f64,
        rate: f64,
    },
    /// Linear ramp from `start` to `end` over `period`, repeating.
    Sawtooth {
        start: f64,
        end: f64,
        period: f64,
    },
}

/// Unit triangle wave with period 1: -1 at 0, +1 at 1/2.
fn triangle(u: f64) -> f64 {
    let x = u - u.floor();
    if x < 0.5 {
        -1.0 + 4.0 * x
    } else {
        3.0 - 4.0 * x
    }
}

/// Integral of [`triangle`] from 0 to `u`; zero over each full period.
fn triangle_integral(u: f64) -> f64 {
    let x = u - u.floor();
    if x < 0.5 {
        -x + 2.0 * x * x
    } else {
        3.0 * (x - 0.5) - 2.0 * (x * x - 0.25)
    }
}

impl FrequencyLaw {
    pub fn frequency(&self, t: f64) -> f64 {
        match *self {
            FrequencyLaw::Constant(f) => f,
            FrequencyLaw::Triangle {
                center,
                deviation,
                rate,
            } => center + deviation * triangle(rate * t),
            FrequencyLaw::Sawtooth { start, end, period } => {
                let u = t / period;
                start + (end - start) * (u - u.floor())
            }
        }
    }

    /// Accumulated phase in cycles since `t = 0`.
    pub fn cycles(&self, t: f64) -> f64 {
        match *self {
            FrequencyLaw::Constant(f) => f * t,
            FrequencyLaw::Triangle {
                center,
                deviation,
                rate,
            } => {
                if rate == 0.0 {
                    (center - deviation) * t
                } else {
                    center * t + deviation * triangle_integral(rate * t) / rate
                }
            }
            FrequencyLaw::Sawtooth { start, end, period } => {
                let u = t / period;
                let k = u.floor();
                let x = u - k;
                start * t + (end - start) * period * 0.5 * (k + x * x)
            }
        }
    }
}

fn interpolate(points: &[[f64; 2]], x: f64) -> Result<f64> {
    let (first, last) = match (points.first(), points.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(invalid("table", "empty table")),
    };
    if x < first[0] || x > last[0] || !x.is_finite() {
        return Err(ScenarioError::OutsideTable(x));
    }
    let i = points.partition_point(|p| p[0] <= x);
    if i == 0 {
        return Ok(first[1]);
    }
    if i >= points.len() {
        return Ok(last[1]);
    }
    let (a, b) = (points[i - 1], points[i]);
    if x == a[0] {
        return Ok(a[1]);
    }
    Ok(a[1] + (b[1] - a[1]) * (x - a[0]) / (b[0] - a[0]))
}

fn check_table(field: &str, points: &[[f64; 2]]) -> Result<()> {
    if points.is_empty() {
        return Err(invalid(field, "table is empty"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(field, "table has non-finite entries"));
    }
    if points.windows(2).any(|w| !(w[1][0] > w[0][0])) {
        return Err(invalid(field, "table times must be strictly increasing"));
    }
    Ok(())
}

/// Time-dependent scalar channel. Amplitudes in tesla for field channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Waveform {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `+amplitude` on the first half of each period, edges inclusive on the rising side.
    Square {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Sine whose frequency follows a triangle between `center -/+ deviation`.
    TriangleChirp {
        amplitude: f64,
        center_frequency: f64,
        deviation: f64,
        rate: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Sine swept linearly from `f_start` to `f_end` every `period` seconds.
    Swish {
        amplitude: f64,
        f_start: f64,
        f_end: f64,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
    /// `(time, value)` nodes, linearly interpolated.
    Table {
        points: Vec<[f64; 2]>,
    },
}

impl Waveform {
    pub fn validate(&self, field: &str) -> Result<()> {
        let finite = |vals: &[f64]| {
            if vals.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(invalid(field, "parameters must be finite"))
            }
        };
        match self {
            Waveform::Zero => Ok(()),
            Waveform::Constant { value } => finite(&[*value]),
            Waveform::Sine {
                amplitude,
                frequency,
                phase,
            }
            | Waveform::Square {
                amplitude,
                frequency,
                phase,
            } => {
                finite(&[*amplitude, *frequency, *phase])?;
                if *frequency < 0.0 {
                    return Err(invalid(field, "frequency must be non-negative"));
                }
                Ok(())
            }
            Waveform::TriangleChirp {
                amplitude,
                center_frequency,
                deviation,
                rate,
                phase,
            } => {
                finite(&[*amplitude, *center_frequency, *deviation, *rate, *phase])?;
                if *rate <= 0.0 {
                    return Err(invalid(field, "chirp rate must be positive"));
                }
                Ok(())
            }
            Waveform::Swish {
                amplitude,
                f_start,
                f_end,
                period,
                phase,
            } => {
                finite(&[*amplitude, *f_start, *f_end, *period, *phase])?;
                if *period <= 0.0 {
                    return Err(invalid(field, "sweep period must be positive"));
                }
                Ok(())
            }
            Waveform::Table { points } => check_table(field, points),
        }
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        Ok(match self {
            Waveform::Zero => 0.0,
            Waveform::Constant { value } => *value,
            Waveform::Sine {
                amplitude,
                frequency,
                phase,
            } => amplitude * (2.0 * PI * frequency * t + phase).sin(),
            Waveform::Square {
                amplitude,
                frequency,
                phase,
            } => {
                let u = frequency * t + phase / (2.0 * PI);
                if u - u.floor() < 0.5 {
                    *amplitude
                } else {
                    -amplitude
                }
            }
            Waveform::TriangleChirp {
                amplitude,
                center_frequency,
                deviation,
                rate,
                phase,
            } => {
                let law = FrequencyLaw::Triangle {
                    center: *center_frequency,
                    deviation: *deviation,
                    rate: *rate,
                };
                amplitude * (2.0 * PI * law.cycles(t) + phase).sin()
            }
            Waveform::Swish {
                amplitude,
                f_start,
                f_end,
                period,
                phase,
            } => {
                let law = FrequencyLaw::Sawtooth {
                    start: *f_start,
                    end: *f_end,
                    period: *period,
                };
                amplitude * (2.0 * PI * law.cycles(t) + phase).sin()
            }
            Waveform::Table { points } => interpolate(points, t)?,
        })
    }
}

/// Reads a `time_s,value` CSV (header required, strictly increasing time) into a table waveform.
pub fn load_waveform_csv(path: &Path) -> Result<Waveform> {
    let mut reader = csv::Reader::from_path(path)?;
    parse_waveform_csv(&mut reader)
}

pub fn parse_waveform_csv<R: std::io::Read>(reader: &mut csv::Reader<R>) -> Result<Waveform> {
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "time_s" || &headers[1] != "value" {
        return Err(ScenarioError::CsvContent {
            line: 1,
            reason: "header must be `time_s,value`".into(),
        });
    }
    let mut points = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| ScenarioError::CsvContent {
                    line,
                    reason: format!("`{s}`: {e}"),
                })
        };
        if row.len() != 2 {
            return Err(ScenarioError::CsvContent {
                line,
                reason: "expected two columns".into(),
            });
        }
        let (t, v) = (parse(&row[0])?, parse(&row[1])?);
        if let Some(prev) = points.last().map(|p: &[f64; 2]| p[0]) {
            if !(t > prev) {
                return Err(ScenarioError::CsvContent {
                    line,
                    reason: "time must be strictly increasing".into(),
                });
            }
        }
        points.push([t, v]);
    }
    let w = Waveform::Table { points };
    w.validate("target")?;
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum Modulation {
    #[default]
    None,
    /// Offset swings by `+/- deviation` around the carrier offset, `rate` periods per second.
    TriangularFm { deviation: f64, rate: f64 },
    /// Offset ramps from the carrier offset up by `span` every `period` seconds.
    Sweep { span: f64, period: f64 },
}

/// RF contamination near the carrier, added to the detected I/Q.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundSpec {
    /// Offset from the Larmor frequency, Hz.
    pub carrier_offset: f64,
    /// In detected-signal units.
    pub amplitude: f64,
    pub phase: f64,
    pub modulation: Modulation,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        BackgroundSpec {
            carrier_offset: 0.0,
            amplitude: 0.0,
            phase: 0.0,
            modulation: Modulation::None,
        }
    }
}

impl BackgroundSpec {
    pub fn law(&self) -> FrequencyLaw {
        match self.modulation {
            Modulation::None => FrequencyLaw::Constant(self.carrier_offset),
            Modulation::TriangularFm { deviation, rate } => FrequencyLaw::Triangle {
                center: self.carrier_offset,
                deviation,
                rate,
            },
            Modulation::Sweep { span, period } => FrequencyLaw::Sawtooth {
                start: self.carrier_offset,
                end: self.carrier_offset + span,
                period,
            },
        }
    }

    pub fn instantaneous_offset(&self, t: f64) -> f64 {
        self.law().frequency(t)
    }

    /// Largest offset magnitude the modulation reaches.
    pub fn max_offset(&self) -> f64 {
        let c = self.carrier_offset;
        match self.modulation {
            Modulation::None => c.abs(),
            Modulation::TriangularFm { deviation, .. } => {
                (c - deviation).abs().max((c + deviation).abs())
            }
            Modulation::Sweep { span, .. } => c.abs().max((c + span).abs()),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let vals = [self.carrier_offset, self.amplitude, self.phase];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(invalid(field, "parameters must be finite"));
        }
        match self.modulation {
            Modulation::None => {}
            Modulation::TriangularFm { deviation, rate } => {
                if !(deviation.is_finite() && rate.is_finite() && rate > 0.0) {
                    return Err(invalid(field, "FM rate must be positive"));
                }
            }
            Modulation::Sweep { span, period } => {
                if !(span.is_finite() && period.is_finite() && period > 0.0) {
                    return Err(invalid(field, "sweep period must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Baseband phasor of a background before resonator filtering.
pub fn background_signal(b: &BackgroundSpec, t: f64) -> Complex64 {
    Complex64::from_polar(b.amplitude, 2.0 * PI * b.law().cycles(t) + b.phase)
}

/// Circular coil of `turns` loops spaced `pitch` apart, centred on `z = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Coil {
    pub radius: f64,
    pub turns: u32,
    pub pitch: f64,
    pub current: f64,
}

impl Default for Coil {
    fn default() -> Self {
        Coil {
            radius: 10e-3,
            turns: 1,
            pitch: 0.0,
            current: 1.0,
        }
    }
}

/// On-axis Biot-Savart field of a coil, tesla.
pub fn coil_field_on_axis(coil: &Coil, z: f64) -> Result<f64> {
    let r = coil.radius;
    if !(r > 0.0 && r.is_finite()) {
        return Err(ScenarioError::BadRadius(r));
    }
    let n = coil.turns.max(1);
    let r2 = r * r;
    let mut b = 0.0;
    for k in 0..n {
        let zk = (k as f64 - 0.5 * (n - 1) as f64) * coil.pitch;
        let d = z - zk;
        b += MU0 * coil.current * r2 / (2.0 * (r2 + d * d).powf(1.5));
    }
    Ok(b)
}

/// Mean on-axis field over a sample of `thickness` centred at `z`, split into `segments` slices.
pub fn coil_field_averaged(coil: &Coil, z: f64, thickness: f64, segments: usize) -> Result<f64> {
    let n = segments.max(1);
    let mut acc = 0.0;
    for i in 0..n {
        let zi = z - 0.5 * thickness + (i as f64 + 0.5) * thickness / n as f64;
        acc += coil_field_on_axis(coil, zi)?;
    }
    Ok(acc / n as f64)
}

/// Relative value of a quantity against axial position, 1 at `z = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Flat,
    OnAxisLoop {
        radius: f64,
    },
    /// `(z, value)` nodes; normalised by the interpolated value at `z = 0`.
    Table {
        points: Vec<[f64; 2]>,
    },
}

impl Profile {
    fn domain(&self) -> Option<(f64, f64)> {
        match self {
            Profile::Table { points } => Some((points[0][0], points[points.len() - 1][0])),
            _ => None,
        }
    }

    /// Profile value at `z`; out-of-domain positions are clamped with a warning.
    pub fn value(&self, z: f64) -> Result<f64> {
        match self {
            Profile::Flat => Ok(1.0),
            Profile::OnAxisLoop { radius } => {
                let coil = Coil {
                    radius: *radius,
                    ..Coil::default()
                };
                Ok(coil_field_on_axis(&coil, z)? / coil_field_on_axis(&coil, 0.0)?)
            }
            Profile::Table { points } => {
                let (lo, hi) = self.domain().unwrap_or((z, z));
                let zc = z.clamp(lo, hi);
                if zc != z {
                    log::warn!("position {z} m outside profile table [{lo}, {hi}]; clamped");
                }
                Ok(interpolate(points, zc)? / interpolate(points, 0.0)?)
            }
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match self {
            Profile::Flat => Ok(()),
            Profile::OnAxisLoop { radius } => {
                if *radius > 0.0 && radius.is_finite() {
                    Ok(())
                } else {
                    Err(invalid(field, "loop radius must be positive"))
                }
            }
            Profile::Table { points } => {
                check_table(field, points)?;
                if points.iter().any(|p| p[1] <= 0.0) {
                    return Err(invalid(field, "profile values must be positive"));
                }
                if !(points[0][0] <= 0.0 && points[points.len() - 1][0] >= 0.0) {
                    return Err(invalid(field, "profile table must cover z = 0"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VibrationSpec {
    /// Axial displacement in metres.
    pub trajectory: Waveform,
    /// Declared maximum `|z|`.
    pub travel: f64,
    /// Coil that produces the target field.
    pub coil: Coil,
    /// Relative Rabi rate, also used as the detection coupling.
    pub b1_profile: Profile,
}

impl Default for VibrationSpec {
    fn default() -> Self {
        VibrationSpec {
            trajectory: Waveform::Zero,
            travel: 2e-3,
            coil: Coil::default(),
            b1_profile: Profile::Flat,
        }
    }
}

/// `exp(-sqrt(R_p t)) exp(-R_d t)`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecaySpec {
    pub r_p: f64,
    pub r_d: f64,
}

impl DecaySpec {
    pub fn factor(&self, t: f64) -> f64 {
        (-(self.r_p * t).sqrt()).exp() * (-self.r_d * t).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResonatorModel {
    /// `None` disables the Lorentzian envelope.
    pub quality_factor: Option<f64>,
    pub carrier_frequency: f64,
    pub half_band: f64,
}

impl Default for ResonatorModel {
    fn default() -> Self {
        ResonatorModel {
            quality_factor: None,
            carrier_frequency: 75e6,
            half_band: DEFAULT_HALF_BAND,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldScenario {
    pub duration: f64,
    pub target: Waveform,
    pub bias: Waveform,
    pub backgrounds: Vec<BackgroundSpec>,
    pub vibration: Option<VibrationSpec>,
    pub decay: DecaySpec,
    /// Gaussian sigma per sample on each of I and Q.
    pub noise_sigma: f64,
    pub magnetization0: f64,
    pub rng_seed: u64,
    /// Angular rate per tesla.
    pub gyromagnetic_ratio: f64,
    pub resonator: ResonatorModel,
    /// Starting direction of the magnetization; spin-lock along x when absent.
    pub initial_direction: Option<[f64; 3]>,
}

impl Default for FieldScenario {
    fn default() -> Self {
        FieldScenario {
            duration: 1.0,
            target: Waveform::Zero,
            bias: Waveform::Zero,
            backgrounds: Vec::new(),
            vibration: None,
            decay: DecaySpec::default(),
            noise_sigma: 0.0,
            magnetization0: 1.0,
            rng_seed: 0,
            gyromagnetic_ratio: GAMMA_13C,
            resonator: ResonatorModel::default(),
            initial_direction: None,
        }
    }
}

/// Fields and scale factors in effect at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveParams {
    pub flip_scale: f64,
    /// Detection coupling efficiency.
    pub coupling: f64,
    pub bias_total: f64,
    pub target_value: f64,
    pub decay_factor: f64,
    pub displacement: f64,
}

impl FieldScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid("duration", "must be positive"));
        }
        self.target.validate("target")?;
        self.bias.validate("bias")?;
        for (i, b) in self.backgrounds.iter().enumerate() {
            b.validate(&format!("backgrounds[{i}]"))?;
        }
        if let Some(v) = &self.vibration {
            v.trajectory.validate("vibration.trajectory")?;
            v.b1_profile.validate("vibration.b1_profile")?;
            if !(v.travel.is_finite() && v.travel >= 0.0) {
                return Err(invalid("vibration.travel", "must be non-negative"));
            }
            if !(v.coil.radius > 0.0 && v.coil.radius.is_finite()) {
                return Err(invalid("vibration.coil.radius", "must be positive"));
            }
        }
        if !(self.decay.r_p >= 0.0 && self.decay.r_d >= 0.0) {
            return Err(invalid("decay", "rates must be non-negative"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma", "must be non-negative"));
        }
        if !(self.magnetization0 > 0.0 && self.magnetization0.is_finite()) {
            return Err(invalid("magnetization0", "must be positive"));
        }
        if !(self.gyromagnetic_ratio.is_finite() && self.gyromagnetic_ratio != 0.0) {
            return Err(invalid("gyromagnetic_ratio", "must be finite and nonzero"));
        }
        if let Some(q) = self.resonator.quality_factor {
            if !(q > 0.0 && q.is_finite()) {
                return Err(invalid("resonator.quality_factor", "must be positive"));
            }
        }
        if let Some(d) = self.initial_direction {
            let v = Vec3::from_array(d);
            if !v.is_finite() || v.norm() == 0.0 {
                return Err(invalid("initial_direction", "must be a nonzero vector"));
            }
        }
        Ok(())
    }

    /// Human-readable notes that do not block a run.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        for (i, b) in self.backgrounds.iter().enumerate() {
            if b.max_offset() > self.resonator.half_band {
                w.push(format!(
                    "backgrounds[{i}] reaches {:.1} Hz offset, outside the {:.1} Hz resonator half-band",
                    b.max_offset(),
                    self.resonator.half_band
                ));
            }
        }
        w
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(ScenarioError::TimeOutOfRange {
                t,
                duration: self.duration,
            });
        }
        Ok(())
    }

    pub fn initial_direction(&self) -> Vec3 {
        self.initial_direction
            .and_then(|d| Vec3::from_array(d).normalized().ok())
            .unwrap_or(Vec3::X)
    }
}

/// Unscaled target field at `t`.
pub fn sample_target(s: &FieldScenario, t: f64) -> Result<f64> {
    s.check_time(t)?;
    s.target.value(t)
}

pub fn effective_params_at(s: &FieldScenario, t: f64) -> Result<EffectiveParams> {
    s.check_time(t)?;
    let mut p = EffectiveParams {
        flip_scale: 1.0,
        coupling: 1.0,
        bias_total: s.bias.value(t)?,
        target_value: s.target.value(t)?,
        decay_factor: s.decay.factor(t),
        displacement: 0.0,
    };
    if let Some(v) = &s.vibration {
        let mut z = v.trajectory.value(t)?;
        if z.abs() > v.travel {
            log::warn!(
                "displacement {z} m exceeds declared travel {} m; clamped",
                v.travel
            );
            z = z.clamp(-v.travel, v.travel);
        }
        let b1 = v.b1_profile.value(z)?;
        p.flip_scale = b1;
        p.coupling = b1;
        p.target_value *= coil_field_on_axis(&v.coil, z)? / coil_field_on_axis(&v.coil, 0.0)?;
        p.displacement = z;
    }
    Ok(p)
}

/// Independent Gaussian noise per readout channel, keyed by seed.
pub struct NoiseStream {
    rng: ChaCha8Rng,
    sigma: f64,
}

pub const CHANNEL_I: u64 = 0;
pub const CHANNEL_Q: u64 = 1;

impl NoiseStream {
    pub fn new(seed: u64, channel: u64, sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(channel);
        NoiseStream { rng, sigma }
    }

    pub fn next_sample(&mut self) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.sigma * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scenario_with(target: Waveform) -> FieldScenario {
        FieldScenario {
            target,
            ..FieldScenario::default()
        }
    }

    #[test]
    fn sine_starts_at_zero() {
        let s = scenario_with(Waveform::Sine {
            amplitude: 16.5e-6,
            frequency: 20.0,
            phase: 0.0,
        });
        assert_eq!(sample_target(&s, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(sample_target(&s, 0.0125).unwrap(), 16.5e-6, epsilon = 1e-18);
    }

    #[test]
    fn square_flips_every_half_period() {
        let s = scenario_with(Waveform::Square {
            amplitude: 16.5e-6,
            frequency: 10.0,
            phase: 0.0,
        });
        let v = |t: f64| sample_target(&s, t).unwrap();
        assert_eq!(v(0.0), 16.5e-6);
        assert_eq!(v(0.049), 16.5e-6);
        assert_eq!(v(0.051), -16.5e-6);
        assert_eq!(v(0.101), 16.5e-6);
        assert_abs_diff_eq!(v(0.01) - v(0.06), 33e-6, epsilon = 1e-18);
    }

    #[test]
    fn out_of_range_time_is_error() {
        let s = FieldScenario::default();
        assert!(matches!(
            sample_target(&s, 1.5),
            Err(ScenarioError::TimeOutOfRange { .. })
        ));
        assert!(sample_target(&s, -1e-9).is_err());
    }

    #[test]
    fn table_interpolates_linearly() {
        let w = Waveform::Table {
            points: vec![[0.0, 1.0], [1.0, 3.0], [2.0, -1.0]],
        };
        assert_eq!(w.value(1.0).unwrap(), 3.0);
        assert_abs_diff_eq!(w.value(0.25).unwrap(), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.value(1.5).unwrap(), 1.0, epsilon = 1e-15);
        assert!(w.value(2.5).is_err());
        let bad = Waveform::Table {
            points: vec![[0.0, 1.0], [0.0, 2.0]],
        };
        assert!(bad.validate("target").is_err());
    }

    #[test]
    fn csv_ingestion() {
        let text = "time_s,value\n0,0\n0.5,1e-6\n1.0,0\n";
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let w = parse_waveform_csv(&mut r).unwrap();
        assert_abs_diff_eq!(w.value(0.25).unwrap(), 0.5e-6, epsilon = 1e-18);
        let bad = "time_s,value\n0,0\n0,1\n";
        let mut r = csv::Reader::from_reader(bad.as_bytes());
        match parse_waveform_csv(&mut r) {
            Err(ScenarioError::CsvContent { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_background_is_constant_phasor() {
        let b = BackgroundSpec {
            amplitude: 2.5,
            ..BackgroundSpec::default()
        };
        assert_eq!(background_signal(&b, 0.7), Complex64::new(2.5, 0.0));
    }

    #[test]
    fn triangular_fm_reverses_every_fifth_second() {
        let b = BackgroundSpec {
            carrier_offset: 0.0,
            amplitude: 1.0,
            phase: 0.0,
            modulation: Modulation::TriangularFm {
                deviation: 400.0,
                rate: 2.5,
            },
        };
        assert_abs_diff_eq!(b.instantaneous_offset(0.0), -400.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b.instantaneous_offset(0.1), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b.instantaneous_offset(0.2), 400.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b.instantaneous_offset(0.3), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b.instantaneous_offset(0.4), -400.0, epsilon = 1e-9);
        // Phase derivative matches the instantaneous offset.
        let law = b.law();
        for t in [0.03, 0.17, 0.26, 0.39] {
            let h = 1e-6;
            let d = (law.cycles(t + h) - law.cycles(t - h)) / (2.0 * h);
            assert_abs_diff_eq!(d, law.frequency(t), epsilon = 1e-5);
        }
    }

    #[test]
    fn swish_ramps_up_to_span() {
        let b = BackgroundSpec {
            carrier_offset: 0.0,
            amplitude: 1.0,
            phase: 0.0,
            modulation: Modulation::Sweep {
                span: 250.0,
                period: 1.0,
            },
        };
        assert_abs_diff_eq!(b.instantaneous_offset(0.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.instantaneous_offset(0.5), 125.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b.instantaneous_offset(0.999), 249.75, epsilon = 1e-9);
        let law = b.law();
        for t in [0.2, 0.7, 1.3] {
            let h = 1e-6;
            let d = (law.cycles(t + h) - law.cycles(t - h)) / (2.0 * h);
            assert_abs_diff_eq!(d, law.frequency(t), epsilon = 1e-5);
        }
    }

    #[test]
    fn coil_closed_forms() {
        let coil = Coil {
            radius: 0.01,
            turns: 1,
            pitch: 0.0,
            current: 1.0,
        };
        assert_abs_diff_eq!(
            coil_field_on_axis(&coil, 0.0).unwrap(),
            MU0 / (2.0 * 0.01),
            epsilon = 1e-18
        );
        let b0 = coil_field_on_axis(&coil, 0.0).unwrap();
        assert_abs_diff_eq!(
            coil_field_on_axis(&coil, 0.01).unwrap(),
            b0 / 2f64.powf(1.5),
            epsilon = 1e-18
        );
        let bad = Coil {
            radius: 0.0,
            ..coil
        };
        assert!(matches!(
            coil_field_on_axis(&bad, 0.0),
            Err(ScenarioError::BadRadius(_))
        ));
    }

    #[test]
    fn thick_sample_average_close_to_midpoint() {
        let coil = Coil {
            radius: 10e-3,
            turns: 2,
            pitch: 1e-3,
            current: 1.0,
        };
        let thickness = 2.1e-3;
        // Oracle: fine segmentation converges to the exact average.
        let fine = coil_field_averaged(&coil, 0.0, thickness, 20_000).unwrap();
        let coarse = coil_field_averaged(&coil, 0.0, thickness, 8).unwrap();
        let mid = coil_field_on_axis(&coil, 0.0).unwrap();
        assert!(((fine - mid) / mid).abs() < 0.01);
        assert!(((coarse - fine) / fine).abs() < 1e-4);
    }

    #[test]
    fn decay_examples() {
        let d = DecaySpec {
            r_p: 0.0,
            r_d: 1.0 / 56.0,
        };
        assert_abs_diff_eq!(d.factor(56.0), (-1.0f64).exp(), epsilon = 1e-15);
        let d = DecaySpec { r_p: 0.3, r_d: 0.0 };
        assert_abs_diff_eq!(d.factor(1.0 / 0.3), (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn lifetime_toggle_ratio() {
        let on = DecaySpec {
            r_p: 0.0,
            r_d: 1.0 / 98.0,
        };
        let off = DecaySpec {
            r_p: 0.0,
            r_d: 1.0 / 56.0,
        };
        // Times where each decays to 1/e.
        let t_on = 1.0 / on.r_d;
        let t_off = 1.0 / off.r_d;
        assert_abs_diff_eq!(on.factor(t_on), off.factor(t_off), epsilon = 1e-15);
        assert_abs_diff_eq!(t_on / t_off, 1.75, epsilon = 1e-12);
    }

    #[test]
    fn no_vibration_means_unit_scales() {
        let s = FieldScenario::default();
        for t in [0.0, 0.3, 1.0] {
            let p = effective_params_at(&s, t).unwrap();
            assert_eq!(p.flip_scale, 1.0);
            assert_eq!(p.coupling, 1.0);
        }
    }

    #[test]
    fn vibration_scales_and_clamps() {
        let s = FieldScenario {
            target: Waveform::Constant { value: 1e-6 },
            vibration: Some(VibrationSpec {
                trajectory: Waveform::Sine {
                    amplitude: 3e-3,
                    frequency: 5.0,
                    phase: 0.0,
                },
                travel: 2e-3,
                coil: Coil {
                    radius: 5e-3,
                    ..Coil::default()
                },
                b1_profile: Profile::OnAxisLoop { radius: 8e-3 },
            }),
            ..FieldScenario::default()
        };
        let p = effective_params_at(&s, 0.05).unwrap();
        assert_eq!(p.displacement, 2e-3);
        assert!(p.flip_scale < 1.0 && p.target_value < 1e-6);
        let p0 = effective_params_at(&s, 0.0).unwrap();
        assert_abs_diff_eq!(p0.flip_scale, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn noise_is_seeded_and_channel_separated() {
        let draw = |seed, ch| {
            let mut n = NoiseStream::new(seed, ch, 1.0);
            (0..5).map(|_| n.next_sample()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3, CHANNEL_I), draw(3, CHANNEL_I));
        assert_ne!(draw(3, CHANNEL_I), draw(3, CHANNEL_Q));
        assert_ne!(draw(3, CHANNEL_I), draw(4, CHANNEL_I));
    }

    #[test]
    fn out_of_band_background_warns() {
        let s = FieldScenario {
            backgrounds: vec![BackgroundSpec {
                carrier_offset: 20e3,
                amplitude: 1.0,
                ..BackgroundSpec::default()
            }],
            ..FieldScenario::default()
        };
        assert_eq!(s.warnings().len(), 1);
    }

    #[test]
    fn background_rms_matches_spectral_rms() {
        // Parseval on a sampled background over an integer number of periods.
        let b = BackgroundSpec {
            carrier_offset: 37.0,
            amplitude: 0.8,
            ..BackgroundSpec::default()
        };
        let fs = 1000.0;
        let n = 1000;
        let xs: Vec<Complex64> = (0..n)
            .map(|i| background_signal(&b, i as f64 / fs))
            .collect();
        let time_ms: f64 = xs.iter().map(|x| x.norm_sqr()).sum::<f64>() / n as f64;
        let mut buf = xs.clone();
        rustfft::FftPlanner::new()
            .plan_fft_forward(n)
            .process(&mut buf);
        let freq_ms: f64 = buf.iter().map(|x| x.norm_sqr()).sum::<f64>() / (n * n) as f64;
        assert!(((time_ms - freq_ms) / time_ms).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn periodic_generators_have_zero_mean(
            f in 1.0f64..50.0,
            periods in 1usize..5,
            amp in 0.1f64..10.0,
            square in proptest::bool::ANY,
        ) {
            // 64 samples per period, phase chosen so no sample sits on an edge.
            let w = if square {
                Waveform::Square { amplitude: amp, frequency: f, phase: 0.01 }
            } else {
                Waveform::Sine { amplitude: amp, frequency: f, phase: 0.3 }
            };
            let n = 64 * periods;
            let mean: f64 = (0..n)
                .map(|i| w.value(i as f64 / (64.0 * f)).unwrap())
                .sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-12 * amp.max(1.0));
        }

        #[test]
        fn coil_profile_even_and_decreasing(z in 1e-5f64..0.05, dz in 1e-5f64..0.01) {
            let coil = Coil { radius: 0.01, turns: 2, pitch: 1e-3, current: 1.0 };
            let b = |z| coil_field_on_axis(&coil, z).unwrap();
            prop_assert!((b(z) - b(-z)).abs() <= 1e-12 * b(0.0));
            prop_assert!(b(z + dz) < b(z));
        }

        #[test]
        fn sampling_is_deterministic(t in 0.0f64..1.0) {
            let s = scenario_with(Waveform::TriangleChirp {
                amplitude: 1e-6, center_frequency: 40.0, deviation: 10.0, rate: 2.0, phase: 0.0,
            });
            prop_assert_eq!(
                sample_target(&s, t).unwrap().to_bits(),
                sample_target(&s, t).unwrap().to_bits()
            );
        }
    }
}
