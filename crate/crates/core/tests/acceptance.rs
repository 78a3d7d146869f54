//! Acceptance criteria, one line each.
//!
//! Exits non-zero on failure only when `VQMARK_ACCEPTANCE_STRICT=1`; otherwise
//! failures are reported and the run still succeeds, so unattained criteria stay
//! visible in the regular test log.

#[path = "support/gradcheck.rs"]
mod gradcheck;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vqmark::attack::{AttackSimulator, DistortionKind, DistortionParams, DistortionSpec};
use vqmark::audio::{istft, stft, StftConfig, Waveform, DEFAULT_SAMPLE_RATE};
use vqmark::codec::{capacity, embed_ids, read_parities, WatermarkPlan};
use vqmark::eval::desk::{run_desk, DeskOptions, DeskReport};
use vqmark::stats::{expected_count, null_false_positive_rate, p_value, z_statistic, DEFAULT_Z_THRESHOLD};
use vqmark::train::{TrainConfig, TrainLog};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    /// Runs `f` and checks it against `budget`, when there is one.
    fn run(&mut self, name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        self.record(name, budget, o, start.elapsed());
    }

    fn record(&mut self, name: &'static str, budget: Option<Duration>, o: Outcome, took: Duration) {
        let in_time = budget.is_none_or(|b| took < b);
        let pass = o.pass && in_time;
        let timing = match budget {
            Some(b) => format!(" [{took:.3?}, budget {b:?}]"),
            None => String::new(),
        };
        println!("{} {name}: {}{timing}", if pass { "PASS" } else { "FAIL" }, o.detail);
        if !pass {
            self.failed.push(name);
        }
    }
}

fn relative(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

fn noise_clip(rng: &mut ChaCha8Rng, seconds: f64) -> Waveform {
    let n = (seconds * DEFAULT_SAMPLE_RATE as f64) as usize;
    // Uniform on ±[0.01, 0.5] keeps every sample nonzero.
    let samples = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.01..0.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Waveform::new(samples, DEFAULT_SAMPLE_RATE).unwrap()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn z_exactness() -> Outcome {
    let c = expected_count(0.95, 0.10, 0.10, 200);
    let z = z_statistic(37, 200, 0.10).unwrap();
    outcome(c == 37.0 && (z - 4.01).abs() <= 0.01, format!("expected count {c}, z {z:.4}"))
}

fn p_values() -> Outcome {
    let (a, b) = (p_value(4.01), p_value(4.07));
    let ok = relative(a, 3.0e-5) <= 0.2 && relative(b, 2.3e-5) <= 0.2;
    outcome(ok, format!("p(4.01) = {a:.3e}, p(4.07) = {b:.3e}"))
}

fn capacity_check() -> Outcome {
    let frames = StftConfig::default().frames(DEFAULT_SAMPLE_RATE as usize);
    let cap = capacity(frames);
    let full = WatermarkPlan::random(vec![1; 150], frames, 0).is_ok();
    let over = WatermarkPlan::random(vec![1; 151], frames, 0).is_err();
    let one = WatermarkPlan::random(vec![0], frames, 0).is_ok();
    let empty = WatermarkPlan::random(vec![], frames, 0).is_err();
    outcome(
        frames == 300 && cap == 150 && full && over && one && empty,
        format!("T = {frames}, capacity {cap}, 150 bits ok {full}, 151 rejected {over}, 1 bit ok {one}"),
    )
}

fn oracle_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let vocab = 1024;
    let mut errors = 0usize;
    let mut sent = 0usize;
    for _ in 0..1000 {
        let frames = rng.gen_range(2..=600);
        let l = rng.gen_range(1..=capacity(frames));
        let bits: Vec<u8> = (0..l).map(|_| rng.gen_range(0..2)).collect();
        let plan = WatermarkPlan::random(bits.clone(), frames, rng.gen()).unwrap();
        let ids: Vec<usize> = (0..frames).map(|_| rng.gen_range(0..vocab)).collect();
        let mut sub = ChaCha8Rng::seed_from_u64(rng.gen());
        let (marked, _) = embed_ids(&ids, &plan, |_, parity| Ok(2 * sub.gen_range(0..vocab / 2) + parity as usize)).unwrap();
        let read = read_parities(&marked, &plan.positions);
        errors += bits.iter().zip(&read).filter(|(a, b)| a != b).count();
        sent += l;
        // Frames outside the plan keep their tokens.
        let outside = (0..frames).filter(|t| !plan.positions.contains(t)).all(|t| marked[t] == ids[t]);
        if !outside {
            return outcome(false, "a token outside the plan changed");
        }
    }
    outcome(errors == 0, format!("{errors} errors over {sent} bits in 1000 cases"))
}

fn null_calibration(measured_beta: f64, effective_beta: f64) -> Outcome {
    let trials = 100_000;
    let at_effective =
        null_false_positive_rate(300, measured_beta, effective_beta, DEFAULT_Z_THRESHOLD, trials, 11).unwrap();
    let at_measured = if measured_beta > 0.0 {
        null_false_positive_rate(300, measured_beta, measured_beta, DEFAULT_Z_THRESHOLD, trials, 12).unwrap()
    } else {
        0.0
    };
    outcome(
        at_effective <= 1e-3,
        format!(
            "FPR {at_effective:.2e} with counts ~ Binomial(300, {measured_beta:.5}) tested at β = {effective_beta:.3}; \
             testing at the raw measured β gives {at_measured:.2e}"
        ),
    )
}

fn distortion_suite() -> Vec<(&'static str, Outcome, Duration)> {
    let sim = AttackSimulator::without_codec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clip = noise_clip(&mut rng, 1.0);
    let x = clip.samples();
    let mut out = Vec::new();
    // Each case is timed on its own; the clip is shared setup.
    let mut timed = |name, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        out.push((name, o, t.elapsed()));
    };

    timed("AS is 0.9x bit-exact", &mut || {
        let spec = DistortionSpec { kind: DistortionKind::AS, params: DistortionParams::Amplitude { gain: 0.9 }, seed: 0 };
        let y = sim.apply(&clip, &spec).unwrap();
        let exact = x.iter().zip(y.samples()).all(|(a, b)| (0.9 * a).to_bits() == b.to_bits());
        outcome(exact, format!("{} samples compared", x.len()))
    });
    timed("QTZ has at most 256 values", &mut || {
        let spec = DistortionSpec { kind: DistortionKind::QTZ, params: DistortionParams::Quantize { levels: 256 }, seed: 0 };
        let y = sim.apply(&clip, &spec).unwrap();
        let distinct: BTreeSet<u64> = y.samples().iter().map(|v| v.to_bits()).collect();
        outcome(distinct.len() <= 256, format!("{} distinct values", distinct.len()))
    });
    timed("SS zeroes round(0.001 N) samples", &mut || {
        let spec = DistortionSpec {
            kind: DistortionKind::SS,
            params: DistortionParams::SampleSuppression { fraction: 0.001 },
            seed: 9,
        };
        let y = sim.apply(&clip, &spec).unwrap();
        let zeros = y.samples().iter().filter(|&&v| v == 0.0).count();
        let want = (0.001 * x.len() as f64).round() as usize;
        outcome(zeros == want, format!("{zeros} zeros, want {want}"))
    });
    timed("GN SNR within 0.5 dB", &mut || {
        let mut worst = 0.0f64;
        for (i, target) in [20.0, 25.0, 30.0, 35.0, 40.0].into_iter().enumerate() {
            let spec = DistortionSpec {
                kind: DistortionKind::GN,
                params: DistortionParams::GaussianNoise { snr_db: target },
                seed: i as u64,
            };
            let y = sim.apply(&clip, &spec).unwrap();
            let noise: Vec<f64> = x.iter().zip(y.samples()).map(|(a, b)| b - a).collect();
            let measured = 10.0 * (power(x) / power(&noise)).log10();
            worst = worst.max((measured - target).abs());
        }
        outcome(worst <= 0.5, format!("worst deviation {worst:.3} dB over 5 targets"))
    });
    out
}

fn stft_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let cfg = StftConfig::default();
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let seconds = rng.gen_range(0.25..1.5);
        let clip = noise_clip(&mut rng, seconds);
        let y = istft(&stft(&clip, &cfg).unwrap(), clip.sample_rate()).unwrap();
        let x = clip.samples();
        if y.len() != x.len() {
            return outcome(false, format!("length {} after resynthesis of {}", y.len(), x.len()));
        }
        let err: Vec<f64> = x.iter().zip(y.samples()).map(|(a, b)| a - b).collect();
        let snr = 10.0 * (power(x) / power(&err).max(f64::MIN_POSITIVE)).log10();
        worst = worst.min(snr);
    }
    outcome(worst > 40.0, format!("worst SNR {worst:.1} dB over 100 clips"))
}

fn gradients() -> Outcome {
    let results = gradcheck::all();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(worst < 1e-3, detail.join(", "))
}

fn desk(report: &DeskReport) -> Vec<(&'static str, Outcome)> {
    let snrs: Vec<f64> = report.best_of_n_snr.iter().map(|p| p.1).collect();
    let monotone = snrs.windows(2).all(|w| w[1] >= w[0]);
    vec![
        (
            "desk (a) no-distortion BER < 5% at ratio 0.1",
            outcome(
                report.ber_manipulator < 0.05,
                format!(
                    "end-to-end BER {:.4} (random substitution {:.4}, at known positions {:.4})",
                    report.ber_manipulator, report.ber_random, report.ber_known_positions
                ),
            ),
        ),
        (
            "desk (b) manipulator spectral distance < random",
            outcome(
                report.spectral_distance_manipulator < report.spectral_distance_random,
                format!(
                    "{:.5} vs {:.5}",
                    report.spectral_distance_manipulator, report.spectral_distance_random
                ),
            ),
        ),
        (
            "desk (c) best-of-n SNR non-decreasing",
            outcome(
                monotone,
                report.best_of_n_snr.iter().map(|(n, s)| format!("n={n}: {s:.2} dB")).collect::<Vec<_>>().join(", "),
            ),
        ),
    ]
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    let ms = Duration::from_millis(1);
    let sec = Duration::from_secs(1);

    suite.run("z-test exactness", Some(ms), z_exactness);
    suite.run("p-values", None, p_values);
    suite.run("capacity", None, capacity_check);
    suite.run("oracle roundtrip", Some(10 * sec), oracle_roundtrip);
    for (name, o, took) in distortion_suite() {
        suite.record(name, Some(sec), o, took);
    }
    suite.run("STFT fidelity", Some(30 * sec), stft_fidelity);
    suite.run("gradient checks", Some(120 * sec), gradients);

    let cfg = TrainConfig::smoke();
    let sim = AttackSimulator::default();
    let opts = DeskOptions::default();
    let start = Instant::now();
    let first = run_desk(&cfg, &sim, &opts, &mut TrainLog::memory());
    let took = start.elapsed();
    match first {
        Ok((_, report)) => {
            let detail = format!(
                "two-stage run with calibration and measurement; manipulator masked-token accuracy {:.3} \
                 (most-frequent-token baseline {:.3})",
                report.masked_accuracy, report.mode_baseline
            );
            suite.record("desk total time", Some(30 * 60 * sec), outcome(true, detail), took);
            for (name, o) in desk(&report) {
                suite.record(name, None, o, took);
            }
            let c = &report.calibration;
            suite.run("null calibration", Some(60 * sec), || null_calibration(c.beta, c.effective_beta()));
            let second = run_desk(&cfg, &sim, &opts, &mut TrainLog::memory());
            suite.run("determinism", None, || match second {
                Ok((_, again)) => outcome(
                    again == report,
                    format!(
                        "second run report {}; parameter digests {} vs {}",
                        if again == report { "identical" } else { "differs" },
                        &report.param_digest[..16],
                        &again.param_digest[..16]
                    ),
                ),
                Err(e) => outcome(false, format!("second run failed: {e}")),
            });
        }
        Err(e) => {
            for name in ["desk total time", "desk (a)", "desk (b)", "desk (c)", "null calibration", "determinism"] {
                suite.run(name, None, || outcome(false, format!("desk run failed: {e}")));
            }
        }
    }

    println!("{} criteria failed", suite.failed.len());
    if !suite.failed.is_empty() && std::env::var("VQMARK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
