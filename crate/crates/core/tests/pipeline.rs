use prism_core::acquisition::{run, AcquisitionRecord, EngineMode};
use prism_core::extraction::{differential, normalized_differential};
use prism_core::floquet::ProtocolConfig;
use prism_core::metrics::{amplitude_spectrum, frame_response, measured_response};
use prism_core::scenario::{FieldScenario, Waveform};

fn sine_record(f: f64, amp: f64, duration: f64) -> AcquisitionRecord {
    let s = FieldScenario {
        duration,
        target: Waveform::Sine {
            amplitude: amp,
            frequency: f,
            phase: 0.0,
        },
        ..FieldScenario::default()
    };
    run(&ProtocolConfig::reference(), &s, &EngineMode::Geometric)
        .expect("engine run")
        .0
}

#[test]
fn engine_to_spectrum_finds_the_test_tone() {
    let rec = sine_record(20.0, 1.8e-6, 0.5);
    let d = differential(&rec).unwrap();
    let spec = amplitude_spectrum(&d.values, d.sample_rate).unwrap();
    let peak = spec.magnitudes[1..]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| spec.freqs[i + 1])
        .unwrap();
    assert!((peak - 20.0).abs() <= spec.df, "peak at {peak} Hz");
}

#[test]
fn response_scales_linearly_with_small_fields() {
    let r1 = measured_response(&sine_record(20.0, 0.5e-6, 0.5), 20.0)
        .unwrap()
        .amplitude;
    let r2 = measured_response(&sine_record(20.0, 1.0e-6, 0.5), 20.0)
        .unwrap()
        .amplitude;
    assert!(r1 > 0.0);
    assert!((r2 / r1 - 2.0).abs() < 0.02, "ratio {}", r2 / r1);
}

#[test]
fn per_frame_response_is_flat_across_the_band() {
    // 1000 samples, so each frame holds 500 points and every tone sits on a 5 Hz bin.
    let amps: Vec<f64> = [5.0, 50.0, 200.0, 500.0, 1000.0]
        .iter()
        .map(|&f| {
            let rec = sine_record(f, 0.2e-6, 0.2001);
            assert_eq!(rec.len(), 1000);
            frame_response(&rec, f, 0).unwrap().amplitude
        })
        .collect();
    let lo = amps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = amps.iter().cloned().fold(0.0, f64::max);
    assert!(hi / lo < 1.2, "per-frame amplitudes {amps:?}");
}

#[test]
fn normalized_variant_keeps_length_and_tone() {
    let rec = sine_record(20.0, 1.0e-6, 0.3);
    let plain = differential(&rec).unwrap();
    let norm = normalized_differential(&rec, 201).unwrap();
    assert_eq!(plain.values.len(), norm.values.len());
    let a = measured_response(&rec, 20.0).unwrap().amplitude;
    let spec = amplitude_spectrum(&norm.values, norm.sample_rate).unwrap();
    let b = spec.magnitude_at(20.0).unwrap();
    assert!(a > 0.0 && b > 0.0);
}

#[test]
fn record_csv_round_trips() {
    let rec = sine_record(20.0, 1.0e-6, 0.05);
    let mut buf = Vec::new();
    rec.write_csv(&mut buf).unwrap();
    let back = AcquisitionRecord::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), rec.len());
    assert_eq!(back.frame, rec.frame);
    for (a, b) in back.mx.iter().zip(&rec.mx) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
