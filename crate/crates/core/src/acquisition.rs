//! The engine: advances the magnetization one pulse at a time and produces
//! the sampled record plus the simulated truth.
//!
//! Each record sample follows one pulse. Tag 0 marks samples after pulse 2
//! (frame I axis), tag 1 samples after pulse 1 (frame II axis); the record
//! starts with tag 1. Time stamps are the acquisition-window midpoints in the
//! spacing that follows the pulse, and `(mx, my)` are taken in the
//! frame-aligned convention (azimuth accumulated in the spacing rotated out).

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::floquet::{
    build_cycle_at, signed_axis, CycleInputs, CycleRotations, FloquetError, ProtocolConfig,
};
use crate::rotor::{Rotation3, Vec3};
use crate::scenario::{
    background_signal, effective_params_at, FieldScenario, NoiseStream, ResonatorModel,
    ScenarioError, CHANNEL_I, CHANNEL_Q,
};

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error(transparent)]
    Floquet(#[from] FloquetError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("duration covers {cycles} cycles; at least 4 are needed")]
    TooShort { cycles: usize },
    #[error("invalid engine mode: {0}")]
    InvalidMode(String),
    #[error("state became non-finite at sample {sample} (t = {t} s, state {state:?})")]
    NonFinite { sample: usize, t: f64, state: Vec3 },
    #[error("empty averaging window")]
    EmptyWindow,
    #[error("record CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("record format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AcquisitionError>;

pub const DEFAULT_N_EQ: f64 = 25.0;

fn default_n_eq() -> f64 {
    DEFAULT_N_EQ
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum EngineMode {
    /// State pinned to the instantaneous prethermal axis.
    #[default]
    Geometric,
    /// Exact propagation, then the part transverse to the frame axis shrinks
    /// by `exp(-1/n_eq)` per pulse.
    Dynamic {
        #[serde(default = "default_n_eq")]
        n_eq: f64,
    },
}

impl EngineMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            EngineMode::Geometric => Ok(()),
            EngineMode::Dynamic { n_eq } if *n_eq > 0.0 && n_eq.is_finite() => Ok(()),
            EngineMode::Dynamic { n_eq } => Err(AcquisitionError::InvalidMode(format!(
                "n_eq must be positive, got {n_eq}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub schema: String,
    pub protocol: ProtocolConfig,
    pub scenario_digest: String,
    pub mode: EngineMode,
    pub sample_rate: f64,
    pub samples: usize,
}

pub const RECORD_SCHEMA: &str = "prism-forge/record/1";

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionRecord {
    pub times: Vec<f64>,
    pub mx: Vec<f64>,
    pub my: Vec<f64>,
    pub frame: Vec<u8>,
    /// Present for engine output; absent when loaded from a bare CSV.
    pub meta: Option<RecordMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTrace {
    pub times: Vec<f64>,
    /// Magnetization after each pulse, including decay.
    pub states: Vec<Vec3>,
    pub frame: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct RecordRow {
    time_s: f64,
    mx: f64,
    my: f64,
    frame: u8,
}

impl AcquisitionRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sample interval taken from the time stamps.
    pub fn sample_interval(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        Some((self.times[self.times.len() - 1] - self.times[0]) / (self.times.len() - 1) as f64)
    }

    pub fn sample_rate(&self) -> Option<f64> {
        self.meta
            .as_ref()
            .map(|m| m.sample_rate)
            .or_else(|| self.sample_interval().map(|dt| 1.0 / dt))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for i in 0..self.len() {
            wr.serialize(RecordRow {
                time_s: self.times[i],
                mx: self.mx[i],
                my: self.my[i],
                frame: self.frame[i],
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let expect = ["time_s", "mx", "my", "frame"];
        if headers.iter().collect::<Vec<_>>() != expect {
            return Err(AcquisitionError::Format(
                "header must be `time_s,mx,my,frame`".into(),
            ));
        }
        let mut rec = AcquisitionRecord {
            times: vec![],
            mx: vec![],
            my: vec![],
            frame: vec![],
            meta: None,
        };
        for row in rd.deserialize() {
            let row: RecordRow = row?;
            if let Some(&prev) = rec.times.last() {
                if !(row.time_s > prev) {
                    return Err(AcquisitionError::Format(format!(
                        "time not increasing at row {}",
                        rec.len() + 2
                    )));
                }
            }
            if row.frame > 1 {
                return Err(AcquisitionError::Format(format!(
                    "frame tag {} at row {}",
                    row.frame,
                    rec.len() + 2
                )));
            }
            rec.times.push(row.time_s);
            rec.mx.push(row.mx);
            rec.my.push(row.my);
            rec.frame.push(row.frame);
        }
        Ok(rec)
    }

    pub fn write_sidecar<W: Write>(&self, w: W) -> Result<()> {
        let meta = self
            .meta
            .as_ref()
            .ok_or_else(|| AcquisitionError::Format("record has no metadata".into()))?;
        serde_json::to_writer_pretty(w, meta)?;
        Ok(())
    }
}

/// Hex SHA-256 of the scenario's canonical JSON.
pub fn scenario_digest(s: &FieldScenario) -> String {
    let json = serde_json::to_vec(s).expect("scenario serializes");
    hex::encode(Sha256::digest(&json))
}

/// Arithmetic mean of complex baseband samples.
pub fn window_average(iq: &[Complex64]) -> Result<Complex64> {
    if iq.is_empty() {
        return Err(AcquisitionError::EmptyWindow);
    }
    let sum: Complex64 = iq.iter().sum();
    Ok(sum / iq.len() as f64)
}

/// Signed `sin(x)/x`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Amplitude response of the tuned circuit at `f_offset` from the carrier.
pub fn lorentzian(f_offset: f64, q: &ResonatorModel) -> f64 {
    match q.quality_factor {
        Some(qf) => {
            let half_width = q.carrier_frequency / (2.0 * qf);
            1.0 / (1.0 + (f_offset / half_width).powi(2)).sqrt()
        }
        None => 1.0,
    }
}

/// `|sinc(pi f t_acq)|` times the Lorentzian envelope.
pub fn resonator_gain(f_offset: f64, t_acq: f64, q: &ResonatorModel) -> f64 {
    sinc(PI * f_offset * t_acq).abs() * lorentzian(f_offset, q)
}

/// Reuses the previous cycle when its inputs repeat (phase-locked drive, static fields).
struct CycleCache {
    key: Option<(u64, u64, f64)>,
    value: Option<CycleRotations>,
}

impl CycleCache {
    fn get(&mut self, cfg: &ProtocolConfig, inp: &CycleInputs) -> Result<CycleRotations> {
        let phase = cfg.drive_phase(inp.start_time).rem_euclid(2.0 * PI);
        let k = (inp.extra_z.to_bits(), inp.flip_scale.to_bits(), phase);
        if let (Some(prev), Some(v)) = (self.key, self.value) {
            let dphi = (prev.2 - phase).abs();
            let dphi = dphi.min(2.0 * PI - dphi);
            // Offsets move the drive phase; only identical geometry is reused.
            let offset_active = cfg
                .frequency_offset
                .as_ref()
                .is_some_and(|o| o.duration.is_none_or(|d| inp.start_time < d));
            if prev.0 == k.0 && prev.1 == k.1 && dphi < 1e-12 && !offset_active {
                return Ok(v);
            }
        }
        let v = build_cycle_at(cfg, inp)?;
        self.key = Some(k);
        self.value = Some(v);
        Ok(v)
    }
}

/// Number of record samples that fit in the scenario duration.
pub fn sample_count(cfg: &ProtocolConfig, s: &FieldScenario) -> usize {
    let usable = s.duration - cfg.acquisition_offset - cfg.acquisition_length;
    if usable <= 0.0 {
        return 0;
    }
    (usable / cfg.half_period() + 1e-9).floor() as usize
}

pub fn run(
    cfg: &ProtocolConfig,
    s: &FieldScenario,
    mode: &EngineMode,
) -> Result<(AcquisitionRecord, TrajectoryTrace)> {
    cfg.validate()?;
    s.validate()?;
    mode.validate()?;
    let n = sample_count(cfg, s);
    if n < 8 {
        return Err(AcquisitionError::TooShort { cycles: n / 2 });
    }
    let half = cfg.half_period();
    let t_acq = cfg.acquisition_length;
    let relax = match mode {
        EngineMode::Dynamic { n_eq } => (-1.0 / n_eq).exp(),
        EngineMode::Geometric => 0.0,
    };
    let mut noise_i = NoiseStream::new(s.rng_seed, CHANNEL_I, s.noise_sigma);
    let mut noise_q = NoiseStream::new(s.rng_seed, CHANNEL_Q, s.noise_sigma);
    let mut cache = CycleCache {
        key: None,
        value: None,
    };

    let mut rec = AcquisitionRecord {
        times: Vec::with_capacity(n),
        mx: Vec::with_capacity(n),
        my: Vec::with_capacity(n),
        frame: Vec::with_capacity(n),
        meta: Some(RecordMeta {
            schema: RECORD_SCHEMA.to_string(),
            protocol: cfg.clone(),
            scenario_digest: scenario_digest(s),
            mode: mode.clone(),
            sample_rate: 1.0 / half,
            samples: n,
        }),
    };
    let mut trace = TrajectoryTrace {
        times: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
        frame: Vec::with_capacity(n),
    };

    let mut state = s.initial_direction().scale(s.magnetization0);
    let mut pinned_norm = None;
    for h in 0..n {
        let t_start = h as f64 * half;
        let after_pulse1 = h % 2 == 0;
        let cycle_start = if after_pulse1 {
            t_start
        } else {
            t_start - half
        };
        let field = effective_params_at(s, t_start + 0.5 * half)?;
        let inputs = CycleInputs {
            start_time: cycle_start,
            extra_z: s.gyromagnetic_ratio * (field.bias_total + field.target_value),
            flip_scale: field.flip_scale,
        };
        let cycle = cache.get(cfg, &inputs)?;
        let (step, frame_rot, tag): (Rotation3, Rotation3, u8) = if after_pulse1 {
            (cycle.half1, cycle.r_frame2, 1)
        } else {
            (cycle.half2, cycle.r_frame1, 0)
        };
        let axis = signed_axis(&frame_rot)?;
        let moved = step.apply(state);
        state = match mode {
            EngineMode::Geometric => {
                let norm = *pinned_norm.get_or_insert_with(|| moved.dot(axis).abs());
                let sign = if moved.dot(axis) < 0.0 { -1.0 } else { 1.0 };
                axis.scale(sign * norm)
            }
            EngineMode::Dynamic { .. } => {
                let along = moved.dot(axis);
                let parallel = axis.scale(along);
                parallel + (moved - parallel).scale(relax)
            }
        };

        let t_sample = (h + 1) as f64 * half + cfg.acquisition_offset + 0.5 * t_acq;
        if !state.is_finite() {
            return Err(AcquisitionError::NonFinite {
                sample: h,
                t: t_sample,
                state,
            });
        }
        let readout = effective_params_at(s, t_sample)?;
        let physical = state.scale(readout.decay_factor);
        let mut iq = Complex64::new(physical.x, physical.y) * readout.coupling;
        for b in &s.backgrounds {
            let f = b.instantaneous_offset(t_sample);
            let gain = sinc(PI * f * t_acq) * lorentzian(f, &s.resonator);
            iq += background_signal(b, t_sample) * gain;
        }
        iq += Complex64::new(noise_i.next_sample(), noise_q.next_sample());

        rec.times.push(t_sample);
        rec.mx.push(iq.re);
        rec.my.push(iq.im);
        rec.frame.push(tag);
        trace.times.push(t_sample);
        trace.states.push(physical);
        trace.frame.push(tag);
    }
    Ok((rec, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::floquet::{prethermal_axes, transient_series, TransientParams};
    use crate::scenario::{BackgroundSpec, DecaySpec, Waveform};
    use approx::assert_abs_diff_eq;

    fn quiet(duration: f64) -> FieldScenario {
        FieldScenario {
            duration,
            ..FieldScenario::default()
        }
    }

    #[test]
    fn zero_drive_gives_flat_plateau() {
        let cfg = ProtocolConfig {
            orbit_amplitude: 0.0,
            ..ProtocolConfig::reference()
        };
        let (rec, _) = run(&cfg, &quiet(0.05), &EngineMode::Geometric).unwrap();
        for (&mx, &my) in rec.mx.iter().zip(&rec.my) {
            assert_abs_diff_eq!(mx, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(my, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn record_time_grid_and_tags() {
        let cfg = ProtocolConfig::reference();
        let (rec, _) = run(&cfg, &quiet(0.02), &EngineMode::Geometric).unwrap();
        assert_eq!(rec.len(), 99);
        assert_abs_diff_eq!(rec.times[0], 200e-6 + 12e-6 + 38e-6, epsilon = 1e-15);
        for w in rec.times.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], 200e-6, epsilon = 1e-12);
        }
        assert_eq!(rec.frame[0], 1);
        assert!(rec.frame.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn locked_drive_gives_two_plateaus() {
        let cfg = ProtocolConfig::reference();
        let ax = prethermal_axes(&cfg).unwrap();
        let (rec, trace) = run(&cfg, &quiet(0.05), &EngineMode::Geometric).unwrap();
        let norm = ax.n1.x;
        for i in 0..rec.len() {
            assert_abs_diff_eq!(rec.mx[i], norm * ax.n1.x, epsilon = 1e-9);
            let z = trace.states[i].z;
            let expect = if rec.frame[i] == 0 { ax.n1.z } else { ax.n2.z } * norm;
            assert_abs_diff_eq!(z, expect, epsilon = 1e-9);
        }
        assert!(trace.states[0].z * trace.states[1].z < 0.0);
    }

    #[test]
    fn geometric_norm_conserved_over_million_cycles() {
        let cfg = ProtocolConfig::reference();
        let s = quiet(2e6 * 200e-6 + 1e-4);
        let (_, trace) = run(&cfg, &s, &EngineMode::Geometric).unwrap();
        assert!(trace.states.len() >= 2_000_000);
        let n0 = trace.states[0].norm();
        let worst = trace
            .states
            .iter()
            .map(|v| (v.norm() - n0).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "norm drift {worst}");
    }

    #[test]
    fn dynamic_converges_to_geometric() {
        let cfg = ProtocolConfig::reference();
        let s = quiet(0.5);
        let (_, dyn_t) = run(&cfg, &s, &EngineMode::Dynamic { n_eq: 25.0 }).unwrap();
        let (_, geo_t) = run(&cfg, &s, &EngineMode::Geometric).unwrap();
        let last = dyn_t.states.len() - 1;
        assert!((dyn_t.states[last] - geo_t.states[last]).norm() < 1e-6);
    }

    #[test]
    fn dynamic_transient_matches_model() {
        let theta = 170f64.to_radians();
        let cfg = ProtocolConfig {
            orbit_amplitude: 0.0,
            flip_angle: theta,
            ..ProtocolConfig::reference()
        };
        let tilt = 0.2f64;
        let s = FieldScenario {
            duration: 0.1,
            initial_direction: Some([tilt.cos(), 0.0, tilt.sin()]),
            ..FieldScenario::default()
        };
        let n_eq = 25.0;
        let (_, trace) = run(&cfg, &s, &EngineMode::Dynamic { n_eq }).unwrap();
        let model = transient_series(
            &TransientParams {
                epsilon: theta - PI,
                n_eq,
                g0: Complex64::new(0.0, tilt.sin()),
                g_eq: Complex64::new(0.0, 0.0),
                magnetization_norm: 1.0,
            },
            200,
        )
        .unwrap();
        let count = (5.0 * n_eq) as usize;
        let mut err = 0.0;
        let mut scale = 0.0;
        for h in 0..count {
            let st = trace.states[h];
            let g = Complex64::new(st.y, st.z);
            err += (g - model.g[h + 1]).norm_sqr();
            scale += model.g[h + 1].norm_sqr();
        }
        assert!((err / scale).sqrt() < 0.02);
    }

    #[test]
    fn decay_applies_to_record() {
        let cfg = ProtocolConfig {
            orbit_amplitude: 0.0,
            ..ProtocolConfig::reference()
        };
        let s = FieldScenario {
            decay: DecaySpec { r_p: 0.0, r_d: 2.0 },
            ..quiet(0.5)
        };
        let (rec, trace) = run(&cfg, &s, &EngineMode::Geometric).unwrap();
        let i = rec.len() - 1;
        assert_abs_diff_eq!(rec.mx[i], (-2.0 * rec.times[i]).exp(), epsilon = 1e-12);
        for (k, st) in trace.states.iter().enumerate() {
            assert!(st.norm() <= s.magnetization0 * s.decay.factor(trace.times[k]) + 1e-12);
        }
    }

    #[test]
    fn background_at_null_cancels() {
        let cfg = ProtocolConfig {
            orbit_amplitude: 0.0,
            ..ProtocolConfig::reference()
        };
        let s = FieldScenario {
            backgrounds: vec![BackgroundSpec {
                carrier_offset: 1.0 / cfg.acquisition_length,
                amplitude: 5.0,
                ..BackgroundSpec::default()
            }],
            ..quiet(0.01)
        };
        let (rec, _) = run(&cfg, &s, &EngineMode::Geometric).unwrap();
        for (&mx, &my) in rec.mx.iter().zip(&rec.my) {
            assert_abs_diff_eq!(mx, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(my, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_protocol_is_error() {
        let cfg = ProtocolConfig {
            orbit_amplitude: 0.0,
            flip_angle: PI,
            ..ProtocolConfig::reference()
        };
        assert!(matches!(
            run(&cfg, &quiet(0.01), &EngineMode::Geometric),
            Err(AcquisitionError::Floquet(FloquetError::Degenerate))
        ));
    }

    #[test]
    fn too_short_is_error() {
        let cfg = ProtocolConfig::reference();
        assert!(matches!(
            run(&cfg, &quiet(1e-3), &EngineMode::Geometric),
            Err(AcquisitionError::TooShort { .. })
        ));
    }

    #[test]
    fn non_finite_field_is_reported() {
        let cfg = ProtocolConfig::reference();
        let s = FieldScenario {
            target: Waveform::Constant { value: 1e300 },
            ..quiet(0.01)
        };
        assert!(run(&cfg, &s, &EngineMode::Dynamic { n_eq: 25.0 }).is_err());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = ProtocolConfig::reference();
        let s = FieldScenario {
            noise_sigma: 0.01,
            rng_seed: 42,
            target: Waveform::Sine {
                amplitude: 2e-6,
                frequency: 20.0,
                phase: 0.0,
            },
            ..quiet(0.05)
        };
        let a = run(&cfg, &s, &EngineMode::Geometric).unwrap().0;
        let b = run(&cfg, &s, &EngineMode::Geometric).unwrap().0;
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let c = run(
            &cfg,
            &FieldScenario { rng_seed: 43, ..s },
            &EngineMode::Geometric,
        )
        .unwrap()
        .0;
        assert_ne!(a.mx, c.mx);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = ProtocolConfig::reference();
        let (rec, _) = run(&cfg, &quiet(0.01), &EngineMode::Geometric).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"time_s,mx,my,frame\n"));
        let back = AcquisitionRecord::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.times, rec.times);
        assert_eq!(back.mx, rec.mx);
        assert_eq!(back.frame, rec.frame);
        let mut side = Vec::new();
        rec.write_sidecar(&mut side).unwrap();
        let meta: RecordMeta = serde_json::from_slice(&side).unwrap();
        assert_eq!(meta.scenario_digest.len(), 64);
    }

    #[test]
    fn window_average_examples() {
        let a = Complex64::new(0.3, -1.2);
        assert_eq!(window_average(&[a; 7]).unwrap(), a);
        assert!(matches!(
            window_average(&[]),
            Err(AcquisitionError::EmptyWindow)
        ));
        let t_acq = 76e-6;
        let m = 10_000;
        let tone = |f: f64| -> Vec<Complex64> {
            (0..m)
                .map(|j| {
                    let t = (j as f64 + 0.5) * t_acq / m as f64;
                    Complex64::from_polar(1.0, 2.0 * PI * f * t)
                })
                .collect()
        };
        assert!(window_average(&tone(1.0 / t_acq)).unwrap().norm() < 1e-12);
        let half = window_average(&tone(0.5 / t_acq)).unwrap().norm();
        assert_abs_diff_eq!(half, 2.0 / PI, epsilon = 1e-8);
        assert_abs_diff_eq!(
            resonator_gain(0.5 / t_acq, t_acq, &ResonatorModel::default()),
            2.0 / PI,
            epsilon = 1e-15
        );
    }

    #[test]
    fn resonator_nulls_and_envelope() {
        let q = ResonatorModel::default();
        let t_acq = 76e-6;
        assert_eq!(resonator_gain(0.0, t_acq, &q), 1.0);
        for k in 1..=3 {
            assert!(resonator_gain(k as f64 / t_acq, t_acq, &q) < 1e-12);
        }
        let q77 = ResonatorModel {
            quality_factor: Some(77.0),
            ..ResonatorModel::default()
        };
        let hw = q77.carrier_frequency / (2.0 * 77.0);
        assert_abs_diff_eq!(lorentzian(hw, &q77), 1.0 / 2f64.sqrt(), epsilon = 1e-15);
    }
}
