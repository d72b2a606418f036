//! Pulse-cycle propagators, prethermal axes and the transient model.
//!
//! One cycle is, in local time from its start: spacing a `[0, tau_s]`, pulse 1,
//! spacing b, pulse 2. Period `T = 2 (tau_p + tau_s)`. Frame I is sampled
//! after pulse 2 and sees `P2 P1`; frame II is sampled after pulse 1 and sees
//! `P1 P2`, where `P1 = pulse1 R_a` and `P2 = pulse2 R_b`.
//!
//! The orbit drive is an oscillating z field
//! `w_z(t) = A cos(2 pi f_orb (t - tau_s / 2) + orbit_phase)`, so with
//! `orbit_phase = 0` and a matched period its crest sits in the middle of
//! spacing a and the two spacing phases cancel exactly.
//!
//! Elevations are `atan2(n_z, n_x)` of axes signed with `n_x > 0`. With
//! `eps = pi - theta` the frame I elevation follows `-atan(Phi_a / eps)` for
//! short pulses; the frame II axis is the half turn of the frame I axis about x.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotor::{geodesic_distance, invariant_axis, Rotation3, RotorError, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FloquetError {
    #[error("invalid protocol field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("cycle propagator is the identity; no prethermal axis")]
    Degenerate,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Rotor(#[from] RotorError),
}

pub type Result<T> = std::result::Result<T, FloquetError>;

pub const DEFAULT_SEGMENTS: usize = 8;
pub const MIN_SEGMENTS: usize = 8;

/// Orbit-drive frequency offset used to sweep the axes during calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyOffset {
    /// Offset in Hz added to the matched orbit frequency.
    pub hz: f64,
    /// Seconds from the start of the run during which the offset applies;
    /// the drive phase freezes afterwards. `None` keeps it for the whole run.
    #[serde(default)]
    pub duration: Option<f64>,
}

/// Pulse protocol. Times in seconds, angles in radians, rates in rad/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub pulse_duration: f64,
    pub spacing: f64,
    pub flip_angle: f64,
    /// Static offset from resonance.
    pub detuning: f64,
    /// Peak orbit-drive rate.
    pub orbit_amplitude: f64,
    pub orbit_phase: f64,
    /// Drive period; `None` means matched to the cycle, `2 (tau_p + tau_s)`.
    pub orbit_period: Option<f64>,
    pub frequency_offset: Option<FrequencyOffset>,
    pub segments_per_pulse: usize,
    /// Start of the acquisition window, measured from the end of a pulse.
    pub acquisition_offset: f64,
    pub acquisition_length: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig::reference()
    }
}

impl ProtocolConfig {
    /// 100 us pulses and spacings, 166 deg flips, 18 deg per 100 us orbit drive.
    pub fn reference() -> Self {
        ProtocolConfig {
            pulse_duration: 100e-6,
            spacing: 100e-6,
            flip_angle: 166f64.to_radians(),
            detuning: 0.0,
            orbit_amplitude: 18f64.to_radians() / 100e-6,
            orbit_phase: 0.0,
            orbit_period: None,
            frequency_offset: None,
            segments_per_pulse: DEFAULT_SEGMENTS,
            acquisition_offset: 12e-6,
            acquisition_length: 76e-6,
        }
    }

    /// One pulse plus one spacing; also the record sample interval.
    pub fn half_period(&self) -> f64 {
        self.pulse_duration + self.spacing
    }

    pub fn cycle_period(&self) -> f64 {
        2.0 * self.half_period()
    }

    pub fn record_rate(&self) -> f64 {
        1.0 / self.half_period()
    }

    pub fn orbit_period(&self) -> f64 {
        self.orbit_period.unwrap_or_else(|| self.cycle_period())
    }

    /// Rabi rate that turns the nominal flip angle in one pulse.
    pub fn rabi_rate(&self) -> f64 {
        self.flip_angle / self.pulse_duration
    }

    /// `pi - theta`.
    pub fn epsilon(&self) -> f64 {
        PI - self.flip_angle
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Every failed check, in field order.
    pub fn violations(&self) -> Vec<FloquetError> {
        let mut out = Vec::new();
        let mut bad = |field: &'static str, reason: &str| {
            out.push(FloquetError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        let finite = [
            ("pulse_duration", self.pulse_duration),
            ("spacing", self.spacing),
            ("flip_angle", self.flip_angle),
            ("detuning", self.detuning),
            ("orbit_amplitude", self.orbit_amplitude),
            ("orbit_phase", self.orbit_phase),
            ("acquisition_offset", self.acquisition_offset),
            ("acquisition_length", self.acquisition_length),
        ];
        for (field, v) in finite {
            if !v.is_finite() {
                bad(field, "must be finite");
            }
        }
        if self.pulse_duration <= 0.0 {
            bad("pulse_duration", "must be positive");
        }
        if self.spacing <= 0.0 {
            bad("spacing", "must be positive");
        }
        if self.flip_angle <= 0.0 {
            bad("flip_angle", "must be positive");
        }
        if self.segments_per_pulse < MIN_SEGMENTS {
            bad("segments_per_pulse", "must be at least 8");
        }
        if self.acquisition_offset < 0.0 {
            bad("acquisition_offset", "must be non-negative");
        }
        if self.acquisition_length <= 0.0 {
            bad("acquisition_length", "must be positive");
        }
        if self.acquisition_offset + self.acquisition_length > self.spacing * (1.0 + 1e-12) {
            bad(
                "acquisition_length",
                "acquisition window does not fit in the spacing",
            );
        }
        if let Some(p) = self.orbit_period {
            if !(p.is_finite() && p > 0.0) {
                bad("orbit_period", "must be positive");
            }
        }
        if let Some(off) = &self.frequency_offset {
            if !off.hz.is_finite() {
                bad("frequency_offset", "must be finite");
            }
            if let Some(d) = off.duration {
                if !(d.is_finite() && d >= 0.0) {
                    bad("frequency_offset", "duration must be non-negative");
                }
            }
        }
        out
    }

    /// True when an explicit orbit period differs from the matched one
    /// without a frequency offset to explain it.
    pub fn has_unflagged_period_mismatch(&self) -> bool {
        match self.orbit_period {
            Some(p) if self.frequency_offset.is_none() => {
                ((p - self.cycle_period()) / self.cycle_period()).abs() > 1e-9
            }
            _ => false,
        }
    }

    /// Drive phase at absolute time `t`.
    pub fn drive_phase(&self, t: f64) -> f64 {
        let base = 2.0 * PI * (t - 0.5 * self.spacing) / self.orbit_period() + self.orbit_phase;
        match &self.frequency_offset {
            Some(off) => {
                let active = match off.duration {
                    Some(d) => t.min(d),
                    None => t,
                };
                base + 2.0 * PI * off.hz * active
            }
            None => base,
        }
    }

    /// `integral of w_z over [t0, t1]`, exact for a linear drive phase.
    pub fn drive_integral(&self, t0: f64, t1: f64) -> f64 {
        let dt = t1 - t0;
        if self.orbit_amplitude == 0.0 || dt == 0.0 {
            return 0.0;
        }
        let p0 = self.drive_phase(t0);
        let p1 = self.drive_phase(t1);
        let half = 0.5 * (p1 - p0);
        let sinc = if half.abs() < 1e-8 {
            1.0 - half * half / 6.0
        } else {
            half.sin() / half
        };
        self.orbit_amplitude * dt * (0.5 * (p0 + p1)).cos() * sinc
    }
}

/// Slowly varying fields seen by one cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleInputs {
    /// Absolute start time of the cycle (start of spacing a).
    pub start_time: f64,
    /// Additional z rate, e.g. gamma times bias plus target field.
    pub extra_z: f64,
    /// Multiplier on the Rabi rate (B1 inhomogeneity, vibration).
    pub flip_scale: f64,
}

impl Default for CycleInputs {
    fn default() -> Self {
        CycleInputs {
            start_time: 0.0,
            extra_z: 0.0,
            flip_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleRotations {
    /// `P2 P1`: propagator between consecutive frame I samples.
    pub r_frame1: Rotation3,
    /// `P1 P2`: propagator between consecutive frame II samples.
    pub r_frame2: Rotation3,
    /// Spacing a then pulse 1.
    pub half1: Rotation3,
    /// Spacing b then pulse 2.
    pub half2: Rotation3,
    /// Accumulated z phase over spacing a.
    pub phi_a: f64,
    /// Accumulated z phase over spacing b.
    pub phi_b: f64,
}

fn pulse_rotation(cfg: &ProtocolConfig, inp: &CycleInputs, t_start: f64) -> Result<Rotation3> {
    let n = cfg.segments_per_pulse;
    let dt = cfg.pulse_duration / n as f64;
    let rabi = cfg.rabi_rate() * inp.flip_scale;
    let static_z = cfg.detuning + inp.extra_z;
    let mut acc = Rotation3::IDENTITY;
    for k in 0..n {
        let t0 = t_start + k as f64 * dt;
        let mean_z = cfg.drive_integral(t0, t0 + dt) / dt + static_z;
        let seg = Rotation3::from_rotation_vector(Vec3::new(rabi * dt, 0.0, mean_z * dt))?;
        acc = seg * acc;
    }
    Ok(acc)
}

/// Cycle propagators starting at `t = 0` with a constant extra z rate.
pub fn build_cycle(cfg: &ProtocolConfig, extra_z: f64) -> Result<CycleRotations> {
    build_cycle_at(
        cfg,
        &CycleInputs {
            extra_z,
            ..CycleInputs::default()
        },
    )
}

pub fn build_cycle_at(cfg: &ProtocolConfig, inp: &CycleInputs) -> Result<CycleRotations> {
    cfg.validate()?;
    if !(inp.start_time.is_finite() && inp.extra_z.is_finite() && inp.flip_scale.is_finite()) {
        return Err(FloquetError::InvalidInput("non-finite cycle inputs".into()));
    }
    let (tp, ts) = (cfg.pulse_duration, cfg.spacing);
    let t0 = inp.start_time;
    let static_z = cfg.detuning + inp.extra_z;
    let phi_a = cfg.drive_integral(t0, t0 + ts) + static_z * ts;
    let phi_b = cfg.drive_integral(t0 + ts + tp, t0 + 2.0 * ts + tp) + static_z * ts;
    let pulse1 = pulse_rotation(cfg, inp, t0 + ts)?;
    let pulse2 = pulse_rotation(cfg, inp, t0 + 2.0 * ts + tp)?;
    let half1 = pulse1 * Rotation3::about_z(phi_a);
    let half2 = pulse2 * Rotation3::about_z(phi_b);
    Ok(CycleRotations {
        r_frame1: half2 * half1,
        r_frame2: half1 * half2,
        half1,
        half2,
        phi_a,
        phi_b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrethermalAxes {
    pub n1: Vec3,
    pub n2: Vec3,
    pub elevation1: f64,
    pub elevation2: f64,
    pub inter_vector_angle: f64,
}

/// Invariant axis signed so that `x > 0`.
pub fn signed_axis(r: &Rotation3) -> Result<Vec3> {
    let n = invariant_axis(r).map_err(|e| match e {
        RotorError::AxisUndefined(_) => FloquetError::Degenerate,
        other => FloquetError::Rotor(other),
    })?;
    Ok(if n.x < 0.0 { -n } else { n })
}

pub fn elevation(n: Vec3) -> f64 {
    n.z.atan2(n.x)
}

pub fn axes_of(c: &CycleRotations) -> Result<PrethermalAxes> {
    let n1 = signed_axis(&c.r_frame1)?;
    let n2 = signed_axis(&c.r_frame2)?;
    Ok(PrethermalAxes {
        n1,
        n2,
        elevation1: elevation(n1),
        elevation2: elevation(n2),
        inter_vector_angle: geodesic_distance(n1, n2)?,
    })
}

/// Axes of the unperturbed protocol at `t = 0`.
pub fn prethermal_axes(cfg: &ProtocolConfig) -> Result<PrethermalAxes> {
    axes_of(&build_cycle(cfg, 0.0)?)
}

/// Short-pulse elevation law for frame I, `atan(Phi_a / (theta - pi))`.
pub fn delta_pulse_elevation(phi_a: f64, flip_angle: f64) -> f64 {
    (phi_a / (flip_angle - PI)).atan()
}

/// Exact frame I elevation for instantaneous pulses with `Phi_b = -Phi_a`.
pub fn delta_pulse_elevation_exact(phi_a: f64, flip_angle: f64) -> f64 {
    // The cycle is the square of X(-eps) Z(Phi); its quaternion vector part
    // gives the axis.
    let eps = PI - flip_angle;
    let (se, ce) = (0.5 * eps).sin_cos();
    let (sp, cp) = (0.5 * phi_a).sin_cos();
    let v = Vec3::new(-se * cp, se * sp, ce * sp);
    let v = if v.x < 0.0 { -v } else { v };
    elevation(v)
}

/// Tilt of the effective spin-lock field, `atan(detuning / rabi)`.
pub fn spin_lock_tilt(delta_omega: f64, rabi: f64) -> Result<f64> {
    if !(rabi > 0.0 && rabi.is_finite()) {
        return Err(FloquetError::InvalidInput(format!(
            "rabi rate must be positive, got {rabi}"
        )));
    }
    if !delta_omega.is_finite() {
        return Err(FloquetError::InvalidInput("non-finite detuning".into()));
    }
    Ok((delta_omega / rabi).atan())
}

/// `sin(phi) dphi/dB` on a strictly increasing bias grid.
///
/// Interior points use centred differences, the ends one-sided ones.
pub fn response_function(bias: &[f64], elevation: &[f64]) -> Result<Vec<f64>> {
    let n = bias.len();
    if n != elevation.len() {
        return Err(FloquetError::InvalidInput(
            "bias and elevation lengths differ".into(),
        ));
    }
    if n < 3 {
        return Err(FloquetError::InvalidInput(
            "need at least 3 grid points".into(),
        ));
    }
    if bias.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FloquetError::InvalidInput(
            "bias grid must be strictly increasing".into(),
        ));
    }
    let slope = |i: usize, j: usize| (elevation[j] - elevation[i]) / (bias[j] - bias[i]);
    Ok((0..n)
        .map(|i| {
            let d = if i == 0 {
                slope(0, 1)
            } else if i == n - 1 {
                slope(n - 2, n - 1)
            } else {
                slope(i - 1, i + 1)
            };
            elevation[i].sin() * d
        })
        .collect())
}

/// Phenomenological transient after a perturbation of the prethermal state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientParams {
    /// Signed over-rotation per pulse, `theta - pi`.
    pub epsilon: f64,
    /// Relaxation constant in pulses.
    pub n_eq: f64,
    /// Initial transverse amplitude `I_y + i I_z`.
    pub g0: Complex64,
    /// Transverse amplitude the transient relaxes to.
    pub g_eq: Complex64,
    /// `|M(0)|`, conserved by the model.
    pub magnetization_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransientSeries {
    pub g: Vec<Complex64>,
    pub mx: Vec<f64>,
    /// Pulses where `|g| > |M(0)|` forced `M_x` to zero.
    pub clamped: usize,
}

/// `g(n) = (-1)^n (g_eq + (g0 - g_eq) exp((i eps - 1/n_eq) n))`,
/// `M_x(n) = sqrt(|M(0)|^2 - |g(n)|^2)`.
pub fn transient_series(p: &TransientParams, n_max: usize) -> Result<TransientSeries> {
    if !(p.n_eq > 0.0 && p.n_eq.is_finite()) {
        return Err(FloquetError::InvalidInput(format!(
            "n_eq must be positive, got {}",
            p.n_eq
        )));
    }
    if !p.epsilon.is_finite() || !p.magnetization_norm.is_finite() {
        return Err(FloquetError::InvalidInput(
            "non-finite transient parameters".into(),
        ));
    }
    let rate = Complex64::new(-1.0 / p.n_eq, p.epsilon);
    let m0_sq = p.magnetization_norm * p.magnetization_norm;
    let mut g = Vec::with_capacity(n_max + 1);
    let mut mx = Vec::with_capacity(n_max + 1);
    let mut clamped = 0;
    for n in 0..=n_max {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        let gn = (p.g_eq + (p.g0 - p.g_eq) * (rate * n as f64).exp()) * sign;
        let rest = m0_sq - gn.norm_sqr();
        if rest < 0.0 {
            clamped += 1;
        }
        g.push(gn);
        mx.push(rest.max(0.0).sqrt());
    }
    if clamped > 0 {
        log::warn!("transient amplitude exceeded |M(0)| on {clamped} pulses; M_x clamped to 0");
    }
    Ok(TransientSeries { g, mx, clamped })
}

/// Precession frequency of the transient in Hz, `|eps| / (2 pi tau)`.
pub fn transient_frequency(epsilon: f64, pulse_interval: f64) -> f64 {
    epsilon.abs() / (2.0 * PI * pulse_interval)
}

/// Quasi-uniform points on the unit sphere (Fibonacci lattice).
pub fn fibonacci_sphere(count: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

pub const DEFAULT_MAP_POINTS: usize = 10_000;

/// One-cycle displacement of every grid point under each frame propagator.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityMap {
    pub points: Vec<Vec3>,
    pub frame1: Vec<f64>,
    pub frame2: Vec<f64>,
}

impl StabilityMap {
    pub fn frame(&self, k: usize) -> &[f64] {
        if k == 1 {
            &self.frame1
        } else {
            &self.frame2
        }
    }

    /// Grid point with the smallest displacement among those with `z` of the given sign.
    pub fn min_in_hemisphere(&self, k: usize, upper: bool) -> Option<(Vec3, f64)> {
        self.points
            .iter()
            .zip(self.frame(k))
            .filter(|(p, _)| (p.z >= 0.0) == upper)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(p, d)| (*p, *d))
    }

    /// Fraction of the sphere displaced by less than `threshold` rad per cycle.
    pub fn fraction_below(&self, k: usize, threshold: f64) -> f64 {
        let d = self.frame(k);
        d.iter().filter(|v| **v < threshold).count() as f64 / d.len() as f64
    }
}

pub fn stability_map(cfg: &ProtocolConfig, grid: &[Vec3]) -> Result<StabilityMap> {
    if grid.is_empty() {
        return Err(FloquetError::InvalidInput("empty grid".into()));
    }
    let cycle = build_cycle(cfg, 0.0)?;
    let mut frame1 = Vec::with_capacity(grid.len());
    let mut frame2 = Vec::with_capacity(grid.len());
    for (i, p) in grid.iter().enumerate() {
        if !p.is_finite() || (p.norm() - 1.0).abs() > 1e-9 {
            return Err(FloquetError::InvalidInput(format!(
                "grid point {i} is not a unit vector"
            )));
        }
        frame1.push(geodesic_distance(*p, cycle.r_frame1.apply(*p))?);
        frame2.push(geodesic_distance(*p, cycle.r_frame2.apply(*p))?);
    }
    Ok(StabilityMap {
        points: grid.to_vec(),
        frame1,
        frame2,
    })
}
