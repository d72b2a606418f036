//! Experiment execution and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};

use prism_core::acquisition::{self, AcquisitionRecord, TrajectoryTrace};
use prism_core::extraction::{
    differential, extended_extraction, normalized_differential, reconstruct_3d, DifferentialSignal,
    Reconstruction3D, Variant,
};
use prism_core::floquet::{
    fibonacci_sphere, prethermal_axes, stability_map, PrethermalAxes, ProtocolConfig, StabilityMap,
};
use prism_core::metrics::{
    amplitude_spectrum_windowed, closed_form_suppression, field_calibration, frequency_grid,
    mask_around, quadratic_bound_suppression, response_at, sensitivity, ResponseReport,
    SensitivityReport, Spectrum, SuppressionCurve, SyntheticSuppression, Window,
};
use prism_core::scenario::{load_waveform_csv, FieldScenario, Waveform};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::spec::{validate, ExperimentSpec, MetricsOptions, SuppressionRequest, Unit};

pub const METRICS_SCHEMA: &str = "prism-forge/metrics/1";
pub const INDEX_SCHEMA: &str = "prism-forge/sweep-index/1";
pub const THREADS_ENV: &str = "PRISM_FORGE_THREADS";

/// Command-line overrides applied on top of a spec file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub target_csv: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut ExperimentSpec) -> Result<()> {
        if let Some(seed) = self.seed {
            spec.scenario.rng_seed = seed;
        }
        if let Some(path) = &self.target_csv {
            spec.scenario.target = load_waveform_csv(path).map_err(|e| CliError::Input {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Worker pool sized by the flag, then the environment, then rayon's default.
pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match threads {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                CliError::Invalid(format!("{THREADS_ENV}={v:?} is not a thread count"))
            })?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Invalid(format!("thread pool: {e}")))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes through a temporary file so readers never see a partial file.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    write_json(&tmp, value)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_record(path: &Path) -> Result<AcquisitionRecord> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    AcquisitionRecord::read_csv(f).map_err(|e| CliError::Input {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn extract(
    rec: &AcquisitionRecord,
    variant: Variant,
    baseline_window: usize,
) -> Result<DifferentialSignal> {
    Ok(match variant {
        Variant::Plain => differential(rec)?,
        Variant::Normalized => normalized_differential(rec, baseline_window)?,
        Variant::Extended => extended_extraction(rec)?,
    })
}

#[derive(Serialize)]
struct ValueRow {
    time_s: f64,
    value: f64,
}

pub fn write_extraction(path: &Path, d: &DifferentialSignal) -> Result<()> {
    write_rows(
        path,
        d.times.iter().zip(&d.values).map(|(t, v)| ValueRow {
            time_s: *t,
            value: *v,
        }),
    )
}

#[derive(Serialize)]
struct ReconstructionRow {
    time_s: f64,
    mx: f64,
    my: f64,
    mz: f64,
    norm: f64,
    frame: u8,
}

pub fn write_reconstruction(path: &Path, r: &Reconstruction3D) -> Result<()> {
    write_rows(
        path,
        (0..r.times.len()).map(|i| ReconstructionRow {
            time_s: r.times[i],
            mx: r.mx[i],
            my: r.my[i],
            mz: r.mz[i],
            norm: r.norm[i],
            frame: r.frame[i],
        }),
    )
}

pub fn write_trajectory(path: &Path, t: &TrajectoryTrace) -> Result<()> {
    write_rows(
        path,
        (0..t.times.len()).map(|i| ReconstructionRow {
            time_s: t.times[i],
            mx: t.states[i].x,
            my: t.states[i].y,
            mz: t.states[i].z,
            norm: t.states[i].norm(),
            frame: t.frame[i],
        }),
    )
}

#[derive(Serialize)]
struct SpectrumRow {
    freq_hz: f64,
    magnitude: f64,
}

pub fn write_spectrum(path: &Path, s: &Spectrum) -> Result<()> {
    write_rows(
        path,
        s.freqs.iter().zip(&s.magnitudes).map(|(f, m)| SpectrumRow {
            freq_hz: *f,
            magnitude: *m,
        }),
    )
}

#[derive(Serialize)]
struct MapRow {
    x: f64,
    y: f64,
    z: f64,
    displacement_frame1: f64,
    displacement_frame2: f64,
}

pub fn write_stability_map(path: &Path, m: &StabilityMap) -> Result<()> {
    write_rows(
        path,
        m.points.iter().enumerate().map(|(i, p)| MapRow {
            x: p.x,
            y: p.y,
            z: p.z,
            displacement_frame1: m.frame1[i],
            displacement_frame2: m.frame2[i],
        }),
    )
}

#[derive(Serialize)]
struct CurveRow {
    bg_freq_hz: f64,
    eta: f64,
    closed_form: f64,
    quadratic_bound: f64,
}

pub fn suppression_curve(req: &SuppressionRequest) -> Result<SuppressionCurve> {
    Ok(req
        .oracle
        .sweep(&frequency_grid(req.f_min, req.f_max, req.step))?)
}

pub fn write_suppression_curve(
    path: &Path,
    oracle: &SyntheticSuppression,
    c: &SuppressionCurve,
) -> Result<()> {
    let dt = 1.0 / oracle.record_rate;
    write_rows(
        path,
        c.bg_freqs.iter().zip(&c.eta).map(|(f, e)| CurveRow {
            bg_freq_hz: *f,
            eta: *e,
            closed_form: closed_form_suppression(oracle.f_signal, *f, dt),
            quadratic_bound: quadratic_bound_suppression(oracle.f_signal, *f, dt),
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema: &'static str,
    pub samples: usize,
    pub record_rate: f64,
    pub differential_rate: f64,
    pub variant: Variant,
    pub window: Window,
    pub df: f64,
    pub prethermal_axes: Option<PrethermalAxes>,
    pub response: Option<ResponseReport>,
    /// Field units per spectrum unit; absent when no calibration tone is known.
    pub calibration: Option<f64>,
    pub sensitivity: Option<SensitivityReport>,
    pub warnings: Vec<String>,
}

fn target_sine(s: Option<&FieldScenario>) -> Option<(f64, f64)> {
    match s.map(|s| &s.target) {
        Some(Waveform::Sine {
            amplitude,
            frequency,
            ..
        }) if *amplitude != 0.0 => Some((*frequency, *amplitude)),
        _ => None,
    }
}

/// Spectrum of the extracted series plus the figures read from it.
pub fn compute_metrics(
    rec: &AcquisitionRecord,
    d: &DifferentialSignal,
    opts: &MetricsOptions,
    protocol: Option<&ProtocolConfig>,
    scenario: Option<&FieldScenario>,
) -> Result<(MetricsReport, Spectrum)> {
    let spec = amplitude_spectrum_windowed(&d.values, d.sample_rate, opts.window)?;
    let mut warnings = scenario.map(|s| s.warnings()).unwrap_or_default();
    let sine = target_sine(scenario);
    let test = opts.test_frequency.or(sine.map(|s| s.0));
    let response = match test {
        Some(f) => Some(response_at(&spec, f)?),
        None => None,
    };
    if response.is_some_and(|r| r.weak) {
        warnings.push(format!(
            "response at {} Hz is below 3x the local floor",
            test.unwrap_or_default()
        ));
    }
    let tone = opts
        .calibration
        .as_ref()
        .map(|c| (c.frequency, c.amplitude))
        .or(sine);
    let calibration = match tone {
        Some((f, a)) => match field_calibration(&spec, f, a.abs()) {
            Ok(c) => Some(c),
            Err(e) => {
                warnings.push(format!("calibration tone at {f} Hz unusable: {e}"));
                None
            }
        },
        None => None,
    };
    let mut masked: Vec<f64> = opts.mask_frequencies.clone();
    masked.extend(test);
    masked.extend(tone.map(|t| t.0));
    let mask = mask_around(&spec, &masked, opts.mask_half_width);
    let sensitivity = match sensitivity(&spec, &mask, calibration.unwrap_or(1.0)) {
        Ok(r) => Some(r),
        Err(e) => {
            warnings.push(format!("sensitivity not computed: {e}"));
            None
        }
    };
    let axes = match protocol {
        Some(p) => match prethermal_axes(p) {
            Ok(a) => Some(a),
            Err(e) => {
                warnings.push(format!("prethermal axes undefined: {e}"));
                None
            }
        },
        None => None,
    };
    let report = MetricsReport {
        schema: METRICS_SCHEMA,
        samples: rec.len(),
        record_rate: rec.sample_rate().unwrap_or(f64::NAN),
        differential_rate: d.sample_rate,
        variant: d.variant,
        window: opts.window,
        df: spec.df,
        prethermal_axes: axes,
        response,
        calibration,
        sensitivity,
        warnings,
    };
    Ok((report, spec))
}

/// Headline numbers for one run, used in sweep summaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PointSummary {
    pub samples: usize,
    pub response_amplitude: Option<f64>,
    pub response_floor: Option<f64>,
    pub weak: Option<bool>,
    pub sensitivity: Option<f64>,
    pub elevation1_deg: Option<f64>,
    pub elevation2_deg: Option<f64>,
}

/// One engine run and all requested artifacts under `out`.
pub fn run_single(spec: &ExperimentSpec, out: &Path) -> Result<PointSummary> {
    let report = validate(spec);
    if !report.is_valid() {
        let msgs: Vec<String> = report
            .errors
            .iter()
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect();
        return Err(CliError::Invalid(msgs.join("; ")));
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let (rec, trace) = acquisition::run(&spec.protocol, &spec.scenario, &spec.mode)?;
    let o = &spec.outputs;
    if o.record {
        rec.write_csv(create(&out.join("record.csv"))?)?;
        rec.write_sidecar(create(&out.join("record.json"))?)?;
    }
    if o.trajectory {
        write_trajectory(&out.join("trajectory.csv"), &trace)?;
    }
    let a = &spec.analysis;
    let d = extract(&rec, a.variant, a.baseline_window)?;
    if o.extraction {
        write_extraction(&out.join("extraction.csv"), &d)?;
    }
    if let Some(r) = &a.reconstruction {
        write_reconstruction(&out.join("reconstruction.csv"), &reconstruct_3d(&rec, r)?)?;
    }
    let (metrics, spectrum) = compute_metrics(
        &rec,
        &d,
        &a.metrics,
        Some(&spec.protocol),
        Some(&spec.scenario),
    )?;
    if o.metrics {
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    if o.spectrum {
        write_spectrum(&out.join("spectrum.csv"), &spectrum)?;
    }
    if let Some(n) = o.stability_map {
        write_stability_map(
            &out.join("stability_map.csv"),
            &stability_map(&spec.protocol, &fibonacci_sphere(n))?,
        )?;
    }
    if let Some(req) = &o.suppression_curve {
        write_suppression_curve(
            &out.join("suppression_curve.csv"),
            &req.oracle,
            &suppression_curve(req)?,
        )?;
    }
    if o.plot_script {
        fs::write(out.join("plot.py"), plot_script(spec)).map_err(|e| CliError::io(out, e))?;
    }
    Ok(PointSummary {
        samples: rec.len(),
        response_amplitude: metrics.response.map(|r| r.amplitude),
        response_floor: metrics.response.map(|r| r.floor),
        weak: metrics.response.map(|r| r.weak),
        sensitivity: metrics.sensitivity.map(|s| s.sensitivity),
        elevation1_deg: metrics.prethermal_axes.map(|p| p.elevation1.to_degrees()),
        elevation2_deg: metrics.prethermal_axes.map(|p| p.elevation2.to_degrees()),
    })
}

/// Matplotlib script for whichever data files the spec produces.
pub fn plot_script(spec: &ExperimentSpec) -> String {
    let o = &spec.outputs;
    let mut s = String::from(
        "import csv\nimport matplotlib.pyplot as plt\n\n\ndef cols(name):\n    with open(name) as f:\n        rows = list(csv.DictReader(f))\n    return {k: [float(r[k]) for r in rows] for k in rows[0]}\n\n\n",
    );
    let mut panels = Vec::new();
    if o.record {
        panels.push("r = cols('record.csv')\nax.plot(r['time_s'], r['mx'], lw=0.5)\nax.set_xlabel('time (s)')\nax.set_ylabel('Mx')");
    }
    if o.extraction {
        panels.push("d = cols('extraction.csv')\nax.plot(d['time_s'], d['value'], lw=0.5)\nax.set_xlabel('time (s)')\nax.set_ylabel('differential')");
    }
    if o.spectrum {
        panels.push("p = cols('spectrum.csv')\nax.semilogy(p['freq_hz'][1:], p['magnitude'][1:], lw=0.5)\nax.set_xlabel('frequency (Hz)')");
    }
    if o.suppression_curve.is_some() {
        panels.push("c = cols('suppression_curve.csv')\nax.semilogy(c['bg_freq_hz'], c['eta'], label='extracted')\nax.semilogy(c['bg_freq_hz'], c['quadratic_bound'], '--', label='bound')\nax.set_xlabel('background (Hz)')\nax.legend()");
    }
    s.push_str(&format!(
        "fig, axes = plt.subplots({}, 1, figsize=(7, {}), squeeze=False)\n",
        panels.len().max(1),
        3 * panels.len().max(1)
    ));
    for (i, p) in panels.iter().enumerate() {
        s.push_str(&format!("ax = axes[{i}][0]\n{p}\n"));
    }
    s.push_str("fig.tight_layout()\nfig.savefig('plot.png', dpi=150)\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexEntry {
    pub index: usize,
    pub value: f64,
    pub value_si: f64,
    pub dir: String,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepIndex {
    pub schema: &'static str,
    pub parameter: String,
    pub unit: Option<Unit>,
    pub execution_order: Vec<usize>,
    pub points: Vec<IndexEntry>,
}

#[derive(Serialize)]
struct SummaryRow {
    index: usize,
    value: f64,
    value_si: f64,
    status: String,
    samples: usize,
    response_amplitude: Option<f64>,
    response_floor: Option<f64>,
    weak: Option<bool>,
    sensitivity: Option<f64>,
    elevation1_deg: Option<f64>,
    elevation2_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Single(PointSummary),
    Sweep(SweepIndex),
}

/// Runs the spec, fanning sweep points out over `pool`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out: &Path,
    pool: &rayon::ThreadPool,
) -> Result<Outcome> {
    let sweep = match &spec.sweep {
        Some(s) if !s.raw_values().is_empty() => s,
        _ => {
            let base = ExperimentSpec {
                sweep: None,
                ..spec.clone()
            };
            return pool.install(|| run_single(&base, out)).map(Outcome::Single);
        }
    };
    let points = spec.points()?;
    let raw = sweep.raw_values();
    let si = sweep.si_values();
    let order = sweep.execution_order(spec.scenario.rng_seed);
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let dir_of = |i: usize| format!("point_{i:04}");
    let mut results: Vec<(usize, Result<PointSummary>)> = pool.install(|| {
        order
            .par_iter()
            .map(|&i| (i, run_single(&points[i], &out.join(dir_of(i)))))
            .collect()
    });
    results.sort_by_key(|r| r.0);

    let mut entries = Vec::with_capacity(results.len());
    let mut rows = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (i, r) in results {
        let (status, error, summary) = match r {
            Ok(s) => ("ok".to_string(), None, s),
            Err(e) => {
                failed += 1;
                log::error!("sweep point {i}: {e}");
                (
                    "error".to_string(),
                    Some(e.to_string()),
                    PointSummary::default(),
                )
            }
        };
        rows.push(SummaryRow {
            index: i,
            value: raw[i],
            value_si: si[i],
            status: status.clone(),
            samples: summary.samples,
            response_amplitude: summary.response_amplitude,
            response_floor: summary.response_floor,
            weak: summary.weak,
            sensitivity: summary.sensitivity,
            elevation1_deg: summary.elevation1_deg,
            elevation2_deg: summary.elevation2_deg,
        });
        entries.push(IndexEntry {
            index: i,
            value: raw[i],
            value_si: si[i],
            dir: dir_of(i),
            status,
            error,
        });
    }
    write_rows(&out.join("sweep_summary.csv"), rows)?;
    let index = SweepIndex {
        schema: INDEX_SCHEMA,
        parameter: sweep.parameter.clone(),
        unit: sweep.unit,
        execution_order: order,
        points: entries,
    };
    write_json_atomic(&out.join("index.json"), &index)?;
    if failed > 0 {
        return Err(CliError::SweepFailures(failed));
    }
    Ok(Outcome::Sweep(index))
}
