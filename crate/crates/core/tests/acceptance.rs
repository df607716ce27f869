//! One pass/fail line per acceptance criterion. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use residual_audit::evalharness::{auroc, ood_transfer_corpus, stress_eval};
use residual_audit::fieldsim::{check_constraints, fp_field_agreement, FieldElement, Verdict, MODULUS, U256};
use residual_audit::monitor::{calibrate_threshold, fit_covariance, mahalanobis, Metric};
use residual_audit::projector::fit_ridge;
use residual_audit::quantizer::{QuantConfig, QuantizedRule, ThresholdMode};
use residual_audit::records::stratified_split;
use residual_audit::synthgen::{generate, logspace, mc_oracle, SynthConfig};
use residual_audit::{calibrate, ActivationRecord, CalibrationConfig, ConditionLabel, Error, MonitorModel};

/// Timing criteria share one core; run the criteria one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: String) {
    println!("ACCEPTANCE {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn fit_on_split(records: &[ActivationRecord], fraction: f64, seed: u64) -> (MonitorModel, Vec<&ActivationRecord>) {
    let split = stratified_split(records, fraction, seed).unwrap();
    let (calib, eval) = split.partition(records).unwrap();
    let model = calibrate(&calib, &CalibrationConfig::default()).unwrap().model;
    (model, eval)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[test]
fn quantization_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let records = generate(&SynthConfig::default()).unwrap();
    let (model, _) = fit_on_split(&records, 0.1, 0);
    let all: Vec<&ActivationRecord> = records.iter().collect();
    let rates: Vec<f64> = [8, 16, 32]
        .iter()
        .map(|&k| {
            let cfg = QuantConfig::for_model(&model, k).unwrap();
            fp_field_agreement(&model, &all, &cfg).unwrap().agreement_rate
        })
        .collect();
    let elapsed = start.elapsed();
    let pass = records.len() == 2000
        && rates[1] >= 0.99
        && rates[2] == 1.0
        && rates[0] < rates[1]
        && elapsed < Duration::from_secs(60);
    verdict(
        "quantization_fidelity",
        pass,
        format!(
            "n={} agreement k8={:.4} k16={:.4} k32={:.4} runtime={:.2?} (need k16>=0.99, k32=1, k8<k16, <60s)",
            records.len(),
            rates[0],
            rates[1],
            rates[2],
            elapsed
        ),
    );
}

fn soundness_run(model: &MonitorModel, states: &[DVector<f64>], n: usize, seed: u64) -> (usize, usize, usize, usize) {
    let cfg = QuantConfig::for_model(model, 16).unwrap();
    let mode = ThresholdMode::Safe {
        calib_bound: model.stats.max_residual_inf,
    };
    let rule = QuantizedRule::new(model, &cfg, mode).unwrap();
    let chol = model.covariance.sigma().cholesky().unwrap();
    let l = chol.l();
    let d = model.hidden_dim();
    let tau = model.tau_star;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut above, mut passes, mut false_clears, mut gated) = (0, 0, 0, 0);
    for _ in 0..n {
        let v_doc = &states[rng.random_range(0..states.len())];
        let z = DVector::from_fn(d, |_, _| gaussian(&mut rng));
        let w = &l * z;
        let target = tau * rng.random_range(0.9..1.1);
        let scale = target / model.covariance.quad_form(w.as_slice()).sqrt();
        let v_act: Vec<f64> = v_doc.iter().zip(w.iter()).map(|(a, b)| a + scale * b).collect();
        let fp = mahalanobis(&model.covariance, &v_act, v_doc.as_slice()).unwrap();
        let passed = match rule.witness(&v_act, v_doc.as_slice()) {
            Ok(wit) => {
                let r = check_constraints(&wit).unwrap();
                gated += usize::from(r.verdict == Verdict::RangeViolation);
                r.verdict == Verdict::Pass
            }
            Err(Error::Range(_)) => {
                gated += 1;
                false
            }
            Err(e) => panic!("{e}"),
        };
        above += usize::from(fp > tau);
        passes += usize::from(passed);
        false_clears += usize::from(passed && fp > tau);
    }
    (above, passes, false_clears, gated)
}

#[test]
fn safety_margin_soundness() {
    let _g = serial();
    let n = 100_000;
    let mut details = Vec::new();
    let mut pass = true;
    for (d, m, n_seeds) in [(4, 2, 200), (64, 16, 500)] {
        let cfg = SynthConfig {
            n_seeds,
            seed: 21,
            ..SynthConfig::with_dims(d, m)
        };
        let records = generate(&cfg).unwrap();
        let (model, eval) = fit_on_split(&records, 0.5, 21);
        let states: Vec<DVector<f64>> = eval.iter().map(|r| model.states(r).unwrap().1).collect();
        let (above, passes, false_clears, gated) = soundness_run(&model, &states, n, d as u64);
        pass &= false_clears == 0 && above > 0 && passes > 0;
        details.push(format!(
            "d={d}: samples={n} fp_above_tau={above} quant_pass={passes} range_gated={gated} false_clears={false_clears}"
        ));
    }
    verdict("safety_margin_soundness", pass, format!("{} (need 0 false clears)", details.join("; ")));
}

#[test]
fn anisotropy_advantage() {
    let _g = serial();
    let cfg = SynthConfig {
        n_seeds: 10_000,
        seed: 0,
        shift_contradicted: 0.016,
        ..SynthConfig::with_dims(16, 8)
    };
    let records = generate(&cfg).unwrap();
    let (model, eval) = fit_on_split(&records, 0.5, 0);
    let pair: Vec<&&ActivationRecord> = eval
        .iter()
        .filter(|r| matches!(r.condition, ConditionLabel::Faithful | ConditionLabel::Contradicted))
        .collect();
    let score = |metric: Metric| -> f64 {
        let s: Vec<(f64, bool)> = pair
            .iter()
            .map(|r| (model.distance(r, metric).unwrap(), !r.condition.is_faithful()))
            .collect();
        auroc(&s).unwrap()
    };
    let (maha, eucl) = (score(Metric::Mahalanobis), score(Metric::Euclidean));
    let oracle = &mc_oracle(&cfg, 200_000).unwrap().pairs["F/C"];
    let pass = maha - eucl >= 0.05
        && (maha - oracle.mahalanobis).abs() <= 0.02
        && (eucl - oracle.euclidean).abs() <= 0.02;
    verdict(
        "anisotropy_advantage",
        pass,
        format!(
            "F/C mahalanobis={maha:.4} (oracle {:.4}) euclidean={eucl:.4} (oracle {:.4}) gap={:.4} (need gap>=0.05, each within 0.02)",
            oracle.mahalanobis,
            oracle.euclidean,
            maha - eucl
        ),
    );
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, bool)> {
    let mut s: Vec<(f64, bool)> = (0..n)
        .map(|_| ((rng.random_range(0..12) as f64) * 0.25, rng.random_bool(0.4)))
        .collect();
    s[0].1 = true;
    s[1].1 = false;
    s
}

fn pairwise_auroc(s: &[(f64, bool)]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for p in s.iter().filter(|x| x.1) {
        for q in s.iter().filter(|x| !x.1) {
            twice += if p.0 > q.0 {
                2
            } else if p.0 == q.0 {
                1
            } else {
                0
            };
            pairs += 1;
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Every midpoint between distinct scores plus both infinities, each scored
/// by direct counting; ties keep the smallest threshold.
fn exhaustive_youden(s: &[(f64, bool)]) -> f64 {
    let pos = s.iter().filter(|x| x.1).count() as i128;
    let neg = s.len() as i128 - pos;
    let mut distinct: Vec<f64> = s.iter().map(|x| x.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(f64::INFINITY);
    let mut best = (i128::MIN, f64::NAN);
    for &t in &candidates {
        let tp = s.iter().filter(|x| x.1 && x.0 > t).count() as i128;
        let fp = s.iter().filter(|x| !x.1 && x.0 > t).count() as i128;
        let j = tp * neg - fp * pos;
        if j > best.0 {
            best = (j, t);
        }
    }
    best.1
}

fn ridge_oracle(xs: &[Vec<f64>], ys: &[Vec<f64>], lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
    let (n, m, d) = (xs.len(), xs[0].len(), ys[0].len());
    let z = DMatrix::from_fn(n, m + 1, |i, j| if j < m { xs[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, d, |i, j| ys[i][j]);
    let mut g = z.transpose() * &z;
    for i in 0..m {
        g[(i, i)] += lambda;
    }
    let b = g.lu().solve(&(z.transpose() * y)).unwrap();
    let w = b.rows(0, m).transpose();
    let bias = b.row(m).transpose();
    (w, bias)
}

fn to_biguint(v: &U256) -> BigUint {
    let bytes: Vec<u8> = v.0.iter().flat_map(|l| l.to_le_bytes()).collect();
    BigUint::from_bytes_le(&bytes)
}

fn from_biguint(v: &BigUint) -> U256 {
    let mut limbs = [0u64; 4];
    for (i, d) in v.to_u64_digits().into_iter().enumerate() {
        limbs[i] = d;
    }
    U256(limbs)
}

#[test]
fn oracle_equivalences() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let auroc_ok = (0..100).all(|_| {
        let s = random_scores(&mut rng, 30);
        auroc(&s).unwrap() == pairwise_auroc(&s)
    });

    let youden_ok = (0..100).all(|_| {
        let s = random_scores(&mut rng, 20);
        calibrate_threshold(&s).unwrap().tau.total_cmp(&exhaustive_youden(&s)).is_eq()
    });

    let mut ridge_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(10..60);
        let m = rng.random_range(2..10);
        let d = rng.random_range(1..6);
        let lambda = rng.random_range(0.01..10.0);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| 3.0 * gaussian(&mut rng) + 1.0).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| gaussian(&mut rng) - 0.5).collect()).collect();
        let pairs: Vec<(&[f64], &[f64])> = xs.iter().zip(&ys).map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
        let fit = fit_ridge(&pairs, lambda).unwrap();
        let (w, b) = ridge_oracle(&xs, &ys, lambda);
        ridge_err = ridge_err
            .max((&fit.weights - &w).norm() / w.norm())
            .max((&fit.bias - &b).norm() / b.norm());
    }
    let ridge_ok = ridge_err <= 1e-8;

    let p = to_biguint(&MODULUS);
    let field_ok = (0..1000).all(|_| {
        let mut draw = || {
            let limbs: [u64; 4] = std::array::from_fn(|_| rng.random());
            to_biguint(&U256(limbs)) % &p
        };
        let (a, b) = (draw(), draw());
        let prod = FieldElement::from_u256(from_biguint(&a)) * FieldElement::from_u256(from_biguint(&b));
        to_biguint(&prod.to_u256()) == (&a * &b) % &p
    });

    verdict(
        "oracle_equivalences",
        auroc_ok && youden_ok && ridge_ok && field_ok,
        format!(
            "auroc 100x30 exact={auroc_ok} youden 100x20 exact={youden_ok} ridge 20 max_rel_err={ridge_err:.2e} (<=1e-8) field 1000 mults exact={field_ok}"
        ),
    );
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| gaussian(rng)).qr().q()
}

#[test]
fn covariance_quality() {
    let _g = serial();
    let d = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let spectrum = logspace(1.0, 1e-3, d);
    let (mut wins, mut spd) = (0, true);
    let trials = 100;
    for _ in 0..trials {
        let q = random_rotation(&mut rng, d);
        let sigma = &q * DMatrix::from_diagonal(&DVector::from_vec(spectrum.clone())) * q.transpose();
        let l = sigma.clone().cholesky().unwrap().l();
        for n in [2 * d, d / 2] {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (&l * DVector::from_fn(d, |_, _| gaussian(&mut rng))).as_slice().to_vec())
                .collect();
            let fit = fit_covariance(&rows).unwrap();
            let lw = fit.sigma();
            spd &= fit.lambda_min() > 0.0 && lw.clone().cholesky().is_some();
            if n == 2 * d {
                let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
                let mean = x.row_mean();
                let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
                let empirical = centered.transpose() * &centered / n as f64;
                wins += usize::from((&lw - &sigma).norm() < (&empirical - &sigma).norm());
            }
        }
    }
    verdict(
        "covariance_quality",
        wins >= 90 && spd,
        format!("LW beats empirical in {wins}/{trials} at d=32 n=64; all estimates SPD (n=64 and n=16): {spd} (need >=90)"),
    );
}

#[test]
fn stress_ordering() {
    let _g = serial();
    let mut pass = true;
    let mut details = Vec::new();
    for seed in 0..3 {
        let records = generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let (model, eval) = fit_on_split(&records, 0.1, seed);
        let r = stress_eval(&model, &eval).unwrap();
        let (c, rm, p) = (r.pairwise["F/C"], r.pairwise["F/RM"], r.pairwise["F/P"]);
        pass &= c >= rm && rm >= p;
        details.push(format!("seed {seed}: F/C={c:.3} F/RM={rm:.3} F/P={p:.3}"));
    }
    verdict("stress_ordering", pass, format!("{} (need F/C>=F/RM>=F/P)", details.join("; ")));
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

#[test]
fn latency() {
    let _g = serial();
    let cfg = SynthConfig {
        n_seeds: 25,
        seed: 5,
        ..SynthConfig::with_dims(4096, 384)
    };
    let records = generate(&cfg).unwrap();
    let refs: Vec<&ActivationRecord> = records.iter().collect();
    let model = calibrate(&refs, &CalibrationConfig::default()).unwrap().model;
    let faithful: Vec<&ActivationRecord> = records.iter().filter(|r| r.condition.is_faithful()).collect();

    for r in faithful.iter().take(5) {
        std::hint::black_box(model.audit(r).unwrap());
    }
    let audit_times: Vec<Duration> = (0..201)
        .map(|i| {
            let r = faithful[i % faithful.len()];
            let t = Instant::now();
            std::hint::black_box(model.audit(r).unwrap());
            t.elapsed()
        })
        .collect();

    let qcfg = QuantConfig::for_model(&model, 16).unwrap();
    let rule = QuantizedRule::new(&model, &qcfg, ThresholdMode::Exact).unwrap();
    let states: Vec<(Vec<f64>, DVector<f64>)> = faithful.iter().map(|r| model.states(r).unwrap()).collect();
    let check_times: Vec<Duration> = (0..21)
        .map(|i| {
            let (a, b) = &states[i % states.len()];
            let t = Instant::now();
            let w = rule.witness(a, b.as_slice()).unwrap();
            std::hint::black_box(check_constraints(&w).unwrap());
            t.elapsed()
        })
        .collect();
    let (audit_med, check_med) = (median(audit_times), median(check_times));
    verdict(
        "latency",
        audit_med < Duration::from_millis(5) && check_med < Duration::from_millis(50),
        format!("d=4096 audit median={audit_med:.2?} (<5ms) quantized check k=16 median={check_med:.2?} (<50ms)"),
    );
}

fn cli(dir: &Path, args: &[&str]) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_residual-audit"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.success()
}

#[test]
fn manifest_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let steps: [&[&str]; 4] = [
        &["synth", "--out", "corpus.jsonl", "--d", "16", "--m", "8", "--n-seeds", "150", "--seed", "9"],
        &["calibrate", "--corpus", "corpus.jsonl", "--out", "model.json", "--split-fraction", "0.2", "--seed", "9"],
        &["audit", "--model", "model.json", "--corpus", "corpus.jsonl", "--out", "scores.jsonl"],
        &[
            "eval", "--model", "model.json", "--corpus", "corpus.jsonl", "--calib", "model.json.calib.json", "--out",
            "report.json", "--csv", "report.csv", "--n-resamples", "50", "--quant-k", "8", "--quant-k", "16",
            "--quant-k", "32",
        ],
    ];
    let mut ok = steps.iter().all(|s| cli(d, s));
    let manifests = [
        "corpus.jsonl.manifest.json",
        "model.json.manifest.json",
        "scores.jsonl.manifest.json",
        "report.json.manifest.json",
    ];
    for m in manifests {
        ok &= cli(d, &["replay", "--manifest", m, "--output-dir", "replayed"]);
    }
    let outputs = [
        "corpus.jsonl",
        "model.json",
        "model.json.calib.json",
        "scores.jsonl",
        "report.json",
        "report.csv",
    ];
    let identical = outputs
        .iter()
        .filter(|f| std::fs::read(d.join(f)).ok() == std::fs::read(d.join("replayed").join(f)).ok())
        .count();
    ok &= identical == outputs.len();
    verdict(
        "manifest_determinism",
        ok,
        format!("{} manifests replayed, {identical}/{} outputs byte-identical", manifests.len(), outputs.len()),
    );
}

#[test]
fn ood_direction() {
    let _g = serial();
    let mut held = 0;
    let mut details = Vec::new();
    for s in 0..5u64 {
        let a = generate(&SynthConfig {
            seed: s,
            ..SynthConfig::default()
        })
        .unwrap();
        let b = generate(&SynthConfig {
            seed: 1000 + s,
            eigen_spectrum: logspace(1e-3, 1e-5, 64),
            ..SynthConfig::default()
        })
        .unwrap();
        let (model_a, _) = fit_on_split(&a, 0.1, s);
        let r = ood_transfer_corpus(&model_a, &b, 0.1, s, &CalibrationConfig::default()).unwrap();
        held += usize::from(r.ood_auroc <= r.in_domain_auroc);
        details.push(format!("{:.3}->{:.3}", r.in_domain_auroc, r.ood_auroc));
    }
    verdict(
        "ood_direction",
        held >= 4,
        format!("ood<=in-domain in {held}/5 runs [{}] (need >=4)", details.join(", ")),
    );
}
