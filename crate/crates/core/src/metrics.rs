//! Spectra and figures of merit.
//!
//! Amplitude spectra use `2 |X_i| / L` on every one-sided bin, DC and Nyquist
//! included, so a unit sine on a bin reads 1 and a constant `c` reads `2c` in
//! the DC bin. With that scaling white noise of per-sample sigma has an RMS
//! bin magnitude of `2 sigma / sqrt(L)`, and `RMS / sqrt(df)` gives
//! `2 sigma / sqrt(f_s)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::AcquisitionRecord;
use crate::extraction::{differential, ExtractionError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("series has {0} samples; at least {1} needed")]
    TooShort(usize, usize),
    #[error("sample rate must be positive and finite")]
    BadRate,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("signal and background bins are closer than 3 bins ({0} Hz apart)")]
    Overlap(f64),
    #[error("frequency {0} Hz outside the spectrum")]
    OutOfBand(f64),
    #[error("signal absent from the reference spectrum")]
    NoSignal,
    #[error("only {0} unmasked bins; at least 16 needed")]
    TooFewBins(usize),
    #[error("no spectral peak above the floor")]
    NoPeak,
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Rectangular,
    /// Hann taper with coherent-gain correction, so on-bin tones keep their amplitude.
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub df: f64,
    /// Number of time samples `L`.
    pub len: usize,
    pub sample_rate: f64,
}

impl Spectrum {
    pub fn nearest_bin(&self, f: f64) -> Result<usize> {
        let k = (f / self.df).round();
        if !(k >= 0.0 && (k as usize) < self.magnitudes.len()) {
            return Err(MetricsError::OutOfBand(f));
        }
        Ok(k as usize)
    }

    pub fn magnitude_at(&self, f: f64) -> Result<f64> {
        Ok(self.magnitudes[self.nearest_bin(f)?])
    }

    /// Time-domain energy `sum x^2` recovered from the magnitudes.
    pub fn energy(&self) -> f64 {
        let n = self.magnitudes.len();
        let has_nyquist = self.len.is_multiple_of(2);
        let mut acc = 0.0;
        for (k, m) in self.magnitudes.iter().enumerate() {
            let w = if k == 0 || (has_nyquist && k == n - 1) {
                0.5
            } else {
                1.0
            };
            acc += w * m * m;
        }
        0.5 * self.len as f64 * acc
    }
}

fn check_series(x: &[f64], fs: f64, min: usize) -> Result<()> {
    if x.len() < min {
        return Err(MetricsError::TooShort(x.len(), min));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(MetricsError::BadRate);
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    Ok(())
}

fn fft_magnitudes(x: &[f64], padded_len: usize) -> Vec<f64> {
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    buf.resize(padded_len, Complex64::new(0.0, 0.0));
    FftPlanner::new()
        .plan_fft_forward(padded_len)
        .process(&mut buf);
    buf[..padded_len / 2 + 1].iter().map(|c| c.norm()).collect()
}

pub fn amplitude_spectrum(series: &[f64], fs: f64) -> Result<Spectrum> {
    amplitude_spectrum_windowed(series, fs, Window::Rectangular)
}

pub fn amplitude_spectrum_windowed(series: &[f64], fs: f64, window: Window) -> Result<Spectrum> {
    check_series(series, fs, 8)?;
    let l = series.len();
    let (data, gain) = match window {
        Window::Rectangular => (series.to_vec(), 1.0),
        Window::Hann => {
            let w: Vec<f64> = (0..l)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / l as f64).cos())
                .collect();
            let g = w.iter().sum::<f64>() / l as f64;
            (series.iter().zip(&w).map(|(x, w)| x * w).collect(), g)
        }
    };
    let mags = fft_magnitudes(&data, l);
    let df = fs / l as f64;
    Ok(Spectrum {
        freqs: (0..mags.len()).map(|k| k as f64 * df).collect(),
        magnitudes: mags.iter().map(|m| 2.0 * m / (l as f64 * gain)).collect(),
        df,
        len: l,
        sample_rate: fs,
    })
}

/// `(bg_before / bg_after) * (sig_after / sig_before)` at the nearest bins.
pub fn suppression_factor(
    before: &Spectrum,
    after: &Spectrum,
    f_signal: f64,
    f_bg: f64,
) -> Result<f64> {
    let df = before.df.max(after.df);
    if (f_signal - f_bg).abs() < 3.0 * df {
        return Err(MetricsError::Overlap((f_signal - f_bg).abs()));
    }
    let sig_before = before.magnitude_at(f_signal)?;
    let sig_after = after.magnitude_at(f_signal)?;
    let bg_before = before.magnitude_at(f_bg)?;
    let bg_after = after.magnitude_at(f_bg)?;
    if sig_before == 0.0 {
        return Err(MetricsError::NoSignal);
    }
    if bg_after == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((bg_before / bg_after) * (sig_after / sig_before))
}

/// Leading-order relative residual of linear interpolation across `delta`.
pub fn interpolation_bound(f: f64, delta: f64) -> f64 {
    (2.0 * PI * f * delta).powi(2) / 8.0
}

/// Exact suppression of the differential for sinusoids on a record of step `dt`:
/// signal gain `1 + cos(w_s dt)` over common-mode residual `1 - cos(w_b dt)`.
pub fn closed_form_suppression(f_signal: f64, f_bg: f64, dt: f64) -> f64 {
    let gain = 1.0 + (2.0 * PI * f_signal * dt).cos();
    let residual = 1.0 - (2.0 * PI * f_bg * dt).cos();
    if residual == 0.0 {
        f64::INFINITY
    } else {
        gain / residual
    }
}

/// Same, with the residual replaced by its quadratic bound for `delta = 2 dt`.
pub fn quadratic_bound_suppression(f_signal: f64, f_bg: f64, dt: f64) -> f64 {
    (1.0 + (2.0 * PI * f_signal * dt).cos()) / interpolation_bound(f_bg, 2.0 * dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionCurve {
    pub bg_freqs: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Noise-free reference record: a background tone plus a signal whose sign
/// flips every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSuppression {
    /// Raw record rate, Hz.
    pub record_rate: f64,
    /// Span of the differential series, seconds; the record holds
    /// `duration * record_rate + 1` samples.
    pub duration: f64,
    pub f_signal: f64,
    pub signal_amplitude: f64,
    pub background_amplitude: f64,
    pub background_phase: f64,
}

impl Default for SyntheticSuppression {
    fn default() -> Self {
        SyntheticSuppression {
            record_rate: 5000.0,
            duration: 1.0,
            f_signal: 10.0,
            signal_amplitude: 1.0,
            background_amplitude: 1.0,
            background_phase: 0.0,
        }
    }
}

impl SyntheticSuppression {
    pub fn samples(&self) -> usize {
        (self.duration * self.record_rate).round() as usize + 1
    }

    pub fn record(&self, f_bg: f64) -> Vec<f64> {
        let dt = 1.0 / self.record_rate;
        (0..self.samples())
            .map(|n| {
                let t = n as f64 * dt;
                let flip = if n % 2 == 1 { 1.0 } else { -1.0 };
                self.background_amplitude * (2.0 * PI * f_bg * t + self.background_phase).cos()
                    + flip * self.signal_amplitude * (2.0 * PI * self.f_signal * t).sin()
            })
            .collect()
    }

    /// Suppression factor at one background frequency: a single frame before,
    /// the differential after, both on the same grid.
    pub fn eta(&self, f_bg: f64) -> Result<f64> {
        let x = self.record(f_bg);
        let frame: Vec<f64> = x
            .iter()
            .skip(1)
            .step_by(2)
            .take((x.len() - 1) / 2)
            .copied()
            .collect();
        let diff = crate::extraction::differential_series(&x);
        let rate = 0.5 * self.record_rate;
        let before = amplitude_spectrum(&frame, rate)?;
        let after = amplitude_spectrum(&diff, rate)?;
        suppression_factor(&before, &after, self.f_signal, f_bg)
    }

    /// Evaluates every background frequency resolvable from the signal, in parallel.
    pub fn sweep(&self, bg_freqs: &[f64]) -> Result<SuppressionCurve> {
        let df = 0.5 * self.record_rate / ((self.samples() - 1) / 2) as f64;
        let kept: Vec<f64> = bg_freqs
            .iter()
            .copied()
            .filter(|f| (f - self.f_signal).abs() >= 3.0 * df)
            .collect();
        let eta = kept
            .par_iter()
            .map(|f| self.eta(*f))
            .collect::<Result<Vec<_>>>()?;
        Ok(SuppressionCurve {
            bg_freqs: kept,
            eta,
        })
    }
}

/// `start, start + step, ..` up to and including `stop`.
pub fn frequency_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| start + k as f64 * step).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Field units per root hertz (after calibration).
    pub sensitivity: f64,
    pub masked_bins: Vec<usize>,
    /// RMS of the unmasked magnitudes, in field units.
    pub rms_floor: f64,
    pub df: f64,
    pub unmasked: usize,
}

/// DC plus `half_width` bins around each listed frequency.
pub fn mask_around(spec: &Spectrum, freqs: &[f64], half_width: usize) -> Vec<usize> {
    let mut bins = vec![0];
    for f in freqs {
        if let Ok(k) = spec.nearest_bin(*f) {
            let lo = k.saturating_sub(half_width);
            let hi = (k + half_width).min(spec.magnitudes.len() - 1);
            bins.extend(lo..=hi);
        }
    }
    bins.sort_unstable();
    bins.dedup();
    bins
}

/// Spectrum units to field units from a tone of known amplitude.
pub fn field_calibration(spec: &Spectrum, f_tone: f64, known_amplitude: f64) -> Result<f64> {
    let m = spec.magnitude_at(f_tone)?;
    if m == 0.0 {
        return Err(MetricsError::NoSignal);
    }
    Ok(known_amplitude / m)
}

/// `S = RMS(unmasked magnitudes) / sqrt(df)`, scaled by `calibration`.
pub fn sensitivity(spec: &Spectrum, mask: &[usize], calibration: f64) -> Result<SensitivityReport> {
    let mut masked = vec![false; spec.magnitudes.len()];
    for &k in mask {
        if k < masked.len() {
            masked[k] = true;
        }
    }
    let vals: Vec<f64> = spec
        .magnitudes
        .iter()
        .zip(&masked)
        .filter(|(_, m)| !**m)
        .map(|(v, _)| *v)
        .collect();
    if vals.len() < 16 {
        return Err(MetricsError::TooFewBins(vals.len()));
    }
    let rms =
        (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt() * calibration.abs();
    let mut masked_bins: Vec<usize> = mask.iter().copied().filter(|k| *k < masked.len()).collect();
    masked_bins.sort_unstable();
    masked_bins.dedup();
    Ok(SensitivityReport {
        sensitivity: rms / spec.df.sqrt(),
        masked_bins,
        rms_floor: rms,
        df: spec.df,
        unmasked: vals.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientFit {
    pub freq: f64,
    /// Approximate one-sigma error from the peak-to-floor ratio.
    pub stderr: f64,
}

pub const FIT_ZERO_PAD: usize = 8;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Frequency of the dominant oscillation in the first `window` seconds of `series`.
pub fn transient_fit(series: &[f64], sample_rate: f64, window: f64) -> Result<TransientFit> {
    if !(sample_rate > 0.0 && sample_rate.is_finite()) {
        return Err(MetricsError::BadRate);
    }
    let n = ((window * sample_rate).round() as usize).min(series.len());
    check_series(&series[..n], sample_rate, 8)?;
    let x = &series[..n];
    let mean = x.iter().sum::<f64>() / n as f64;
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let centred: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let padded = n * FIT_ZERO_PAD;
    let mags = fft_magnitudes(&centred, padded);
    // Skip the DC lobe.
    let start = FIT_ZERO_PAD.min(mags.len() - 1);
    let k = (start..mags.len())
        .max_by(|a, b| mags[*a].total_cmp(&mags[*b]))
        .ok_or(MetricsError::NoPeak)?;
    let peak = mags[k];
    let floor = median(mags.clone());
    if peak <= 1e-9 * scale.max(f64::MIN_POSITIVE) * n as f64 || peak <= 3.0 * floor {
        return Err(MetricsError::NoPeak);
    }
    let delta = if k > 0 && k + 1 < mags.len() {
        let (a, b, c) = (mags[k - 1], mags[k], mags[k + 1]);
        let den = a - 2.0 * b + c;
        if den != 0.0 {
            (0.5 * (a - c) / den).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    } else {
        0.0
    };
    let freq = (k as f64 + delta) * sample_rate / padded as f64;
    let amplitude = 2.0 * peak / n as f64;
    let raw = fft_magnitudes(&centred, n);
    let sigma =
        median(raw.iter().map(|m| 2.0 * m / n as f64).collect()) * (n as f64).sqrt() / 1.665;
    let nf = n as f64;
    let stderr = if amplitude > 0.0 {
        sample_rate / (2.0 * PI)
            * (12.0 * sigma * sigma / (amplitude * amplitude * nf * (nf * nf - 1.0))).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(TransientFit { freq, stderr })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseReport {
    pub frequency: f64,
    pub amplitude: f64,
    /// Median magnitude of nearby bins, excluding the peak neighbourhood.
    pub floor: f64,
    /// Peak below three times the floor.
    pub weak: bool,
}

/// Nearest-bin amplitude at `f_test` with the surrounding floor.
pub fn response_at(spec: &Spectrum, f_test: f64) -> Result<ResponseReport> {
    let k = spec.nearest_bin(f_test)?;
    let amplitude = spec.magnitudes[k];
    let lo = k.saturating_sub(10);
    let hi = (k + 10).min(spec.magnitudes.len() - 1);
    let near: Vec<f64> = (lo..=hi)
        .filter(|j| j.abs_diff(k) > 2 && *j > 0)
        .map(|j| spec.magnitudes[j])
        .collect();
    let floor = median(near);
    let weak = amplitude < 3.0 * floor;
    if weak {
        log::warn!(
            "response at {f_test} Hz ({amplitude:.3e}) is below 3x the local floor ({floor:.3e})"
        );
    }
    Ok(ResponseReport {
        frequency: spec.freqs[k],
        amplitude,
        floor,
        weak,
    })
}

/// Amplitude of the differential-signal peak at `f_test`.
pub fn measured_response(rec: &AcquisitionRecord, f_test: f64) -> Result<ResponseReport> {
    let d = differential(rec)?;
    let spec = amplitude_spectrum(&d.values, d.sample_rate)?;
    response_at(&spec, f_test)
}

/// Amplitude of the peak at `f_test` in one frame's `M_x` series.
pub fn frame_response(rec: &AcquisitionRecord, f_test: f64, tag: u8) -> Result<ResponseReport> {
    let series: Vec<f64> = rec
        .mx
        .iter()
        .zip(&rec.frame)
        .filter(|(_, t)| **t == tag)
        .map(|(v, _)| *v)
        .collect();
    let rate = 0.5 * rec.sample_rate().ok_or(MetricsError::BadRate)?;
    let spec = amplitude_spectrum(&series, rate)?;
    response_at(&spec, f_test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn tone(n: usize, fs: f64, f: f64, a: f64) -> Vec<f64> {
        (0..n)
            .map(|i| a * (2.0 * PI * f * i as f64 / fs).sin())
            .collect()
    }

    #[test]
    fn on_bin_sine_reads_its_amplitude() {
        let s = amplitude_spectrum(&tone(1000, 1000.0, 50.0, 1.0), 1000.0).unwrap();
        assert_abs_diff_eq!(s.magnitude_at(50.0).unwrap(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.df, 1.0, epsilon = 1e-15);
        assert_eq!(s.freqs.len(), 501);
    }

    #[test]
    fn constant_lands_in_dc() {
        let s = amplitude_spectrum(&[0.7; 64], 100.0).unwrap();
        assert_abs_diff_eq!(s.magnitudes[0], 1.4, epsilon = 1e-12);
        assert!(s.magnitudes[1..].iter().all(|m| *m <= 1e-12));
        assert!(matches!(
            amplitude_spectrum(&[], 1.0),
            Err(MetricsError::TooShort(0, 8))
        ));
    }

    #[test]
    fn hann_keeps_on_bin_amplitude() {
        let s = amplitude_spectrum_windowed(&tone(1024, 1024.0, 64.0, 2.0), 1024.0, Window::Hann)
            .unwrap();
        assert_abs_diff_eq!(s.magnitude_at(64.0).unwrap(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn white_noise_bin_statistics_match_monte_carlo() {
        // Expected magnitude of 2|X|/L for Gaussian noise: Rayleigh mean sqrt(pi/4) * 2 sigma / sqrt(L).
        let (l, sigma, trials) = (256usize, 0.5, 2000usize);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..trials {
            let x: Vec<f64> = (0..l).map(|_| normal.sample(&mut rng)).collect();
            let s = amplitude_spectrum(&x, 1.0).unwrap();
            for m in &s.magnitudes[1..l / 2] {
                sum += m;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let expect = 2.0 * sigma / (l as f64).sqrt() * (PI / 4.0).sqrt();
        assert!(
            ((mean - expect) / expect).abs() < 0.01,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn identical_spectra_give_unit_eta() {
        let x: Vec<f64> = tone(2000, 2000.0, 10.0, 1.0)
            .iter()
            .zip(tone(2000, 2000.0, 300.0, 2.0))
            .map(|(a, b)| a + b)
            .collect();
        let s = amplitude_spectrum(&x, 2000.0).unwrap();
        assert_abs_diff_eq!(
            suppression_factor(&s, &s, 10.0, 300.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert!(matches!(
            suppression_factor(&s, &s, 10.0, 11.0),
            Err(MetricsError::Overlap(_))
        ));
    }

    #[test]
    fn synthetic_eta_at_twenty_hertz() {
        let syn = SyntheticSuppression::default();
        let eta = syn.eta(20.0).unwrap();
        let exact = closed_form_suppression(10.0, 20.0, 1.0 / 5000.0);
        assert!(eta > 1e3);
        assert!(((eta - exact) / exact).abs() < 0.01, "eta {eta} vs {exact}");
    }

    #[test]
    fn synthetic_eta_rolls_off_quadratically() {
        let syn = SyntheticSuppression::default();
        let e1 = syn.eta(400.0).unwrap();
        let e2 = syn.eta(800.0).unwrap();
        let dt = 1.0 / 5000.0;
        assert!(((e1 - closed_form_suppression(10.0, 400.0, dt)) / e1).abs() < 0.01);
        // Close to 4x for a doubling, less the higher-order cosine terms.
        assert!((e1 / e2 - 4.0).abs() < 0.4);
    }

    #[test]
    fn sweep_skips_overlapping_bins() {
        let syn = SyntheticSuppression::default();
        let curve = syn.sweep(&[5.0, 9.0, 10.0, 12.5, 13.0, 200.0]).unwrap();
        assert_eq!(curve.bg_freqs, vec![5.0, 13.0, 200.0]);
        assert!(curve.eta.iter().all(|e| *e > 0.0));
    }

    #[test]
    fn noiseless_sensitivity_is_zero() {
        let s = amplitude_spectrum(&tone(1000, 1000.0, 50.0, 1.0), 1000.0).unwrap();
        let mask = mask_around(&s, &[50.0], 2);
        let r = sensitivity(&s, &mask, 1.0).unwrap();
        assert!(r.sensitivity < 1e-12);
        let all: Vec<usize> = (0..s.magnitudes.len()).collect();
        assert!(matches!(
            sensitivity(&s, &all, 1.0),
            Err(MetricsError::TooFewBins(0))
        ));
    }

    #[test]
    fn white_noise_sensitivity_formula() {
        let fs = 5000.0;
        let sigma = 1e-9;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, sigma).unwrap();
        let x: Vec<f64> = (0..5000).map(|_| normal.sample(&mut rng)).collect();
        let s = amplitude_spectrum(&x, fs).unwrap();
        let r = sensitivity(&s, &[0], 1.0).unwrap();
        let expect = 2.0 * sigma / fs.sqrt();
        assert!(((r.sensitivity - expect) / expect).abs() < 0.1);
    }

    #[test]
    fn calibration_from_known_tone() {
        let s = amplitude_spectrum(&tone(1000, 1000.0, 50.0, 0.2), 1000.0).unwrap();
        assert_abs_diff_eq!(
            field_calibration(&s, 50.0, 1.8e-6).unwrap(),
            9e-6,
            epsilon = 1e-15
        );
    }

    #[test]
    fn fit_finds_short_tone() {
        let fs = 5000.0;
        let f = 138.9;
        let x: Vec<f64> = (0..60)
            .map(|i| (2.0 * PI * f * i as f64 / fs + 0.4).cos())
            .collect();
        let fit = transient_fit(&x, fs, 0.012).unwrap();
        let bin = fs / 60.0;
        assert!((fit.freq - f).abs() < bin / 4.0, "fit {} vs {f}", fit.freq);
    }

    #[test]
    fn fit_rejects_flat_input() {
        assert_eq!(
            transient_fit(&[0.4; 100], 5000.0, 0.02),
            Err(MetricsError::NoPeak)
        );
        assert!(transient_fit(&[0.4; 5], 5000.0, 0.02).is_err());
    }

    proptest! {
        #[test]
        fn parseval_holds(x in proptest::collection::vec(-5.0f64..5.0, 8..300)) {
            let s = amplitude_spectrum(&x, 1.0).unwrap();
            let e: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((s.energy() - e).abs() <= 1e-9 * e.max(1e-12));
        }

        #[test]
        fn eta_is_scale_invariant(c in 0.01f64..100.0, f_bg in 40.0f64..1000.0) {
            let syn = SyntheticSuppression { duration: 0.2, ..SyntheticSuppression::default() };
            let x = syn.record(f_bg);
            let frame: Vec<f64> = x.iter().skip(1).step_by(2).take((x.len() - 1) / 2).copied().collect();
            let diff = crate::extraction::differential_series(&x);
            let scaled = |v: &[f64]| v.iter().map(|a| a * c).collect::<Vec<_>>();
            let b = amplitude_spectrum(&frame, 2500.0).unwrap();
            let a = amplitude_spectrum(&diff, 2500.0).unwrap();
            let bs = amplitude_spectrum(&scaled(&frame), 2500.0).unwrap();
            let as_ = amplitude_spectrum(&scaled(&diff), 2500.0).unwrap();
            let e1 = suppression_factor(&b, &a, 10.0, f_bg).unwrap();
            let e2 = suppression_factor(&bs, &as_, 10.0, f_bg).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-9 * e1);
        }

        #[test]
        fn sensitivity_ignores_masked_signal(a in 0.0f64..100.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let noise: Vec<f64> = (0..512).map(|_| normal.sample(&mut rng)).collect();
            let with = |amp: f64| {
                let x: Vec<f64> = noise.iter().zip(tone(512, 512.0, 64.0, amp)).map(|(n, s)| n + s).collect();
                let s = amplitude_spectrum(&x, 512.0).unwrap();
                let mask = mask_around(&s, &[64.0], 0);
                sensitivity(&s, &mask, 1.0).unwrap().sensitivity
            };
            prop_assert!((with(a) - with(0.0)).abs() <= 1e-9 * with(0.0));
        }
    }
}
