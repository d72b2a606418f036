//! Signal recovery from the alternating record.
//!
//! The plain differential works on the even grid:
//! `d_2n = M_2n - (M_2n-1 + M_2n+1) / 2`, with samples counted from 1, so the
//! even grid holds the 0-based odd indices (frame tag 0). Content common to
//! both frames cancels up to the linear-interpolation error, while the
//! imprint that flips sign between frames doubles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::AcquisitionRecord;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractionError {
    #[error("record needs at least {need} samples, has {have}")]
    TooShort { need: usize, have: usize },
    #[error("frame tags missing or not alternating at sample {0}")]
    MissingTags(usize),
    #[error("baseline window must be odd and >= 3, got {0}")]
    BadWindow(usize),
    #[error("baseline crosses zero at differential sample {0}")]
    BaselineZero(usize),
    #[error("no envelope maxima in the calibration interval of frame {0}")]
    NoMaxima(u8),
    #[error("calibration end {end} outside the record of {len} samples")]
    BadCalibration { end: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, ExtractionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Plain,
    Normalized,
    Extended,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    /// Even sample minus interpolated odd neighbours.
    #[default]
    EvenMinusOdd,
    OddMinusEven,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DifferentialOptions {
    pub parity: Parity,
    /// Halve the output, the convention that reports the mean imprint.
    pub half_scale: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifferentialSignal {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub variant: Variant,
    /// Samples per second of `values`.
    pub sample_rate: f64,
}

fn check_record(rec: &AcquisitionRecord, need: usize) -> Result<()> {
    let n = rec.len();
    if n < need {
        return Err(ExtractionError::TooShort { need, have: n });
    }
    if rec.frame.len() != n || rec.mx.len() != n {
        return Err(ExtractionError::MissingTags(rec.frame.len().min(n)));
    }
    if let Some(i) = rec
        .frame
        .windows(2)
        .position(|w| w[0] == w[1] || w[0] > 1 || w[1] > 1)
    {
        return Err(ExtractionError::MissingTags(i + 1));
    }
    Ok(())
}

fn record_rate(rec: &AcquisitionRecord) -> f64 {
    rec.sample_rate().unwrap_or(f64::NAN)
}

/// `d_2n` centred on 0-based indices `1, 3, 5, ..`; length `(len - 1) / 2`.
pub fn differential_series(m: &[f64]) -> Vec<f64> {
    (0..)
        .map(|k| 2 * k + 1)
        .take_while(|&i| i + 1 < m.len())
        .map(|i| m[i] - 0.5 * (m[i - 1] + m[i + 1]))
        .collect()
}

pub fn differential(rec: &AcquisitionRecord) -> Result<DifferentialSignal> {
    differential_with(rec, &DifferentialOptions::default())
}

pub fn differential_with(
    rec: &AcquisitionRecord,
    opts: &DifferentialOptions,
) -> Result<DifferentialSignal> {
    check_record(rec, 3)?;
    let scale = match (opts.parity, opts.half_scale) {
        (Parity::EvenMinusOdd, false) => 1.0,
        (Parity::EvenMinusOdd, true) => 0.5,
        (Parity::OddMinusEven, false) => -1.0,
        (Parity::OddMinusEven, true) => -0.5,
    };
    let values = differential_series(&rec.mx)
        .into_iter()
        .map(|v| v * scale)
        .collect::<Vec<_>>();
    let times = (0..values.len()).map(|k| rec.times[2 * k + 1]).collect();
    Ok(DifferentialSignal {
        times,
        values,
        variant: Variant::Plain,
        sample_rate: 0.5 * record_rate(rec),
    })
}

/// Centred moving average; the window shrinks symmetrically at the ends.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix[prefix.len() - 1] + v);
    }
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let (lo, hi) = (i - h, i + h + 1);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Mean over a fixed-length window slid inward at the ends, so edge values
/// average as many samples as interior ones.
fn edge_clamped_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let w = window.clamp(1, n.max(1));
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix[prefix.len() - 1] + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(w / 2).min(n - w);
            (prefix[lo + w] - prefix[lo]) / w as f64
        })
        .collect()
}

/// Least-squares `a + b u + c u^2` over `(u, y)` pairs; `None` if singular.
fn fit_quadratic(us: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let mut s = [0.0f64; 5];
    let mut t = [0.0f64; 3];
    for (&u, &y) in us.iter().zip(ys) {
        let mut p = 1.0;
        for (k, sk) in s.iter_mut().enumerate() {
            *sk += p;
            if k < 3 {
                t[k] += p * y;
            }
            p *= u;
        }
    }
    // Normal equations, solved by Cramer's rule.
    let m = [[s[0], s[1], s[2]], [s[1], s[2], s[3]], [s[2], s[3], s[4]]];
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(&m);
    if d.abs() < 1e-12 * s[0].powi(3).max(1.0) || !d.is_finite() {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for row in 0..3 {
            mc[row][col] = t[row];
        }
        *o = det3(&mc) / d;
    }
    Some((out[0], out[1], out[2]))
}

/// Local quadratic regression evaluated at each sample (Savitzky-Golay style).
pub fn local_quadratic(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = (window / 2).max(1);
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let us: Vec<f64> = (lo..hi).map(|j| j as f64 - i as f64).collect();
            match fit_quadratic(&us, &x[lo..hi]) {
                Some((a, _, _)) => a,
                None => x[i],
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Smoother {
    #[default]
    MovingAverage,
    LocalQuadratic,
}

impl Smoother {
    pub fn apply(self, x: &[f64], window: usize) -> Vec<f64> {
        match self {
            Smoother::MovingAverage => moving_average(x, window),
            Smoother::LocalQuadratic => local_quadratic(x, window),
        }
    }
}

/// Differential divided by a smoothed common-mode baseline.
pub fn normalized_differential(
    rec: &AcquisitionRecord,
    baseline_window: usize,
) -> Result<DifferentialSignal> {
    if baseline_window < 3 || baseline_window.is_multiple_of(2) {
        return Err(ExtractionError::BadWindow(baseline_window));
    }
    let plain = differential(rec)?;
    let m = &rec.mx;
    let common: Vec<f64> = (0..plain.values.len())
        .map(|k| {
            let i = 2 * k + 1;
            0.5 * (m[i] + 0.5 * (m[i - 1] + m[i + 1]))
        })
        .collect();
    let baseline = moving_average(&common, baseline_window);
    let sign = baseline[0].signum();
    if let Some(k) = baseline
        .iter()
        .position(|b| *b == 0.0 || b.signum() != sign || !b.is_finite())
    {
        return Err(ExtractionError::BaselineZero(k));
    }
    let values = plain
        .values
        .iter()
        .zip(&baseline)
        .map(|(d, b)| d / b)
        .collect();
    Ok(DifferentialSignal {
        values,
        variant: Variant::Normalized,
        ..plain
    })
}

/// Differential at the full record rate: every sample minus its interpolated
/// neighbours, signed as the plain differential (frame 0 minus frame 1).
/// Output covers samples `1 ..= len - 2`.
pub fn extended_extraction(rec: &AcquisitionRecord) -> Result<DifferentialSignal> {
    check_record(rec, 4)?;
    let m = &rec.mx;
    let values = (1..m.len() - 1)
        .map(|i| {
            let d = m[i] - 0.5 * (m[i - 1] + m[i + 1]);
            if i % 2 == 1 {
                d
            } else {
                -d
            }
        })
        .collect();
    Ok(DifferentialSignal {
        times: rec.times[1..rec.len() - 1].to_vec(),
        values,
        variant: Variant::Extended,
        sample_rate: record_rate(rec),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionOptions {
    /// First record index after the calibration rotation stops.
    pub calibration_end: usize,
    /// Envelope smoothing window in per-frame samples.
    pub envelope_window: usize,
    /// Sensing-interval baseline window in record samples.
    pub baseline_window: usize,
    pub smoother: Smoother,
    /// Sign of frame 0 `M_z` at the first sample after calibration.
    pub frame0_positive: bool,
    /// Minimum peak prominence as a fraction of the envelope range.
    pub prominence: f64,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        ReconstructionOptions {
            calibration_end: 0,
            envelope_window: 100,
            baseline_window: 2000,
            smoother: Smoother::MovingAverage,
            frame0_positive: true,
            prominence: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction3D {
    pub times: Vec<f64>,
    pub mx: Vec<f64>,
    pub my: Vec<f64>,
    pub mz: Vec<f64>,
    pub norm: Vec<f64>,
    /// Frame-averaged `|M_xy|` baseline; NaN inside the calibration interval.
    pub baseline: Vec<f64>,
    pub frame: Vec<u8>,
    /// Record indices of the envelope maxima used for the norm.
    pub maxima: Vec<usize>,
    /// Samples where `|M_xy|` exceeded the norm estimate.
    pub clamped: usize,
}

/// Indices of local maxima whose topographic prominence reaches `min_prominence`.
pub fn prominent_maxima(x: &[f64], min_prominence: f64) -> Vec<usize> {
    let n = x.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if x[i] > x[i - 1] {
            // Walk across a flat top.
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] {
                let peak = (i + j) / 2;
                let h = x[i];
                let mut left_min = h;
                let mut k = i;
                while k > 0 {
                    k -= 1;
                    if x[k] > h {
                        break;
                    }
                    left_min = left_min.min(x[k]);
                }
                let mut right_min = h;
                let mut k = j;
                while k + 1 < n {
                    k += 1;
                    if x[k] > h {
                        break;
                    }
                    right_min = right_min.min(x[k]);
                }
                if h - left_min.max(right_min) >= min_prominence {
                    out.push(peak);
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Vertex of a quadratic fitted to `y` around `center`; falls back to the sample.
fn refine_peak(y: &[f64], center: usize, half: usize) -> (f64, f64) {
    let lo = center.saturating_sub(half);
    let hi = (center + half + 1).min(y.len());
    let us: Vec<f64> = (lo..hi).map(|j| j as f64 - center as f64).collect();
    if let Some((a, b, c)) = fit_quadratic(&us, &y[lo..hi]) {
        if c < 0.0 {
            let u = -b / (2.0 * c);
            if u.abs() <= half as f64 {
                return (center as f64 + u, a - b * b / (4.0 * c));
            }
        }
    }
    (center as f64, y[center])
}

fn interp_norm(knots: &[(f64, f64)], j: f64) -> f64 {
    match knots.iter().position(|k| k.0 >= j) {
        None => knots[knots.len() - 1].1,
        Some(0) => knots[0].1,
        Some(p) => {
            let (a, b) = (knots[p - 1], knots[p]);
            a.1 + (b.1 - a.1) * (j - a.0) / (b.0 - a.0)
        }
    }
}

/// Recovers signed `M_z` from the transverse record using envelope maxima of
/// a calibration rotation, where each frame axis crosses the xy-plane.
pub fn reconstruct_3d(
    rec: &AcquisitionRecord,
    opts: &ReconstructionOptions,
) -> Result<Reconstruction3D> {
    check_record(rec, 8)?;
    let n = rec.len();
    let cal_end = opts.calibration_end;
    if cal_end > n || cal_end < 4 {
        return Err(ExtractionError::BadCalibration {
            end: cal_end,
            len: n,
        });
    }
    let env: Vec<f64> = rec
        .mx
        .iter()
        .zip(&rec.my)
        .map(|(x, y)| x.hypot(*y))
        .collect();
    let mut norm = vec![0.0; n];
    let mut sign = vec![0.0; n];
    let mut maxima = Vec::new();
    let mut end_norm = [0.0f64; 2];
    let half = (opts.envelope_window / 2).max(1);

    for f in 0..2u8 {
        let idx: Vec<usize> = (0..n).filter(|&i| rec.frame[i] == f).collect();
        let k = idx.partition_point(|&i| i < cal_end);
        let cal: Vec<f64> = idx[..k].iter().map(|&i| env[i]).collect();
        if cal.len() < 3 {
            return Err(ExtractionError::NoMaxima(f));
        }
        let smooth = opts.smoother.apply(&cal, opts.envelope_window);
        let (lo, hi) = smooth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(*v), b.max(*v))
            });
        let range = hi - lo;
        let knots: Vec<(f64, f64)> = if range <= 1e-9 * hi.abs() {
            // Flat envelope: the axes never leave the plane they sit in.
            vec![(0.0, cal.iter().sum::<f64>() / cal.len() as f64)]
        } else {
            let peaks = prominent_maxima(&smooth, opts.prominence * range);
            if peaks.is_empty() {
                return Err(ExtractionError::NoMaxima(f));
            }
            peaks
                .iter()
                .map(|&p| {
                    maxima.push(idx[p]);
                    refine_peak(&cal, p, half)
                })
                .collect()
        };
        let s0 = if (f == 0) == opts.frame0_positive {
            1.0
        } else {
            -1.0
        };
        for (j, &i) in idx[..k].iter().enumerate() {
            norm[i] = interp_norm(&knots, j as f64);
            let later = if knots.len() == 1 && range <= 1e-9 * hi.abs() {
                0
            } else {
                knots.iter().filter(|kn| kn.0 > j as f64).count()
            };
            sign[i] = if later % 2 == 0 { s0 } else { -s0 };
        }
        end_norm[f as usize] = knots[knots.len() - 1].1;
        for &i in &idx[k..] {
            sign[i] = s0;
        }
    }
    maxima.sort_unstable();

    let mut baseline = vec![f64::NAN; n];
    if cal_end < n {
        let b = edge_clamped_average(&env[cal_end..], opts.baseline_window);
        let b0 = b[0];
        for (off, v) in b.iter().enumerate() {
            let i = cal_end + off;
            baseline[i] = *v;
            norm[i] = end_norm[rec.frame[i] as usize] * v / b0;
        }
    }

    let mut clamped = 0;
    let mz = (0..n)
        .map(|i| {
            let rest = norm[i] * norm[i] - env[i] * env[i];
            if rest < 0.0 {
                if rest < -1e-12 * norm[i] * norm[i] {
                    clamped += 1;
                }
                0.0
            } else {
                sign[i] * rest.sqrt()
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("norm estimate below |M_xy| on {clamped} samples; M_z set to 0 there");
    }
    Ok(Reconstruction3D {
        times: rec.times.clone(),
        mx: rec.mx.clone(),
        my: rec.my.clone(),
        mz,
        norm,
        baseline,
        frame: rec.frame.clone(),
        maxima,
        clamped,
    })
}
