//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use conftraj::conformal::{calibrate, calibrate_values, mondrian_calibrate, score_dataset, Calibration, Radius};
use conftraj::data::{standardize, Dataset};
use conftraj::evaluation::{
    baseline_bands, coverage_and_width, grid_bands, visit_bands, width_over_band_times,
};
use conftraj::predictors::{GpHyper, GpModel, Model, PredictorConfig, PredictorKind};
use conftraj::risk::{
    classify_metrics, labels_from_truth, risk_pipeline, threshold_free, youden_threshold, HighRiskRule,
    Label, RiskConfig,
};
use conftraj::synth::{generate, GroupSpec, SynthConfig, TruthMap};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHA: f64 = 0.1;
const N_CALIB: usize = 500;
const N_TEST: usize = 500;
const N_TRAIN: usize = 80;
const REPS: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

/// Standardized train/calibration/test blocks cut from one i.i.d. cohort by
/// subject index.
struct Blocks {
    train: Dataset,
    calib: Dataset,
    test: Dataset,
    truth: TruthMap,
}

fn blocks(cfg: &SynthConfig, n_train: usize, n_calib: usize, n_test: usize) -> Blocks {
    let cfg = SynthConfig {
        n_subjects: n_train + n_calib + n_test,
        ..cfg.clone()
    };
    let (ds, truth) = generate(&cfg).unwrap();
    let idx = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    let (train, stats) = standardize(&ds.subset(&idx(0, n_train)), None).unwrap();
    let (calib, _) = standardize(&ds.subset(&idx(n_train, n_train + n_calib)), Some(stats)).unwrap();
    let (test, _) = standardize(&ds.subset(&idx(n_train + n_calib, cfg.n_subjects)), Some(stats)).unwrap();
    Blocks {
        train,
        calib,
        test,
        truth,
    }
}

fn predictor(kind: PredictorKind, std_scale: f64) -> PredictorConfig {
    PredictorConfig {
        std_scale,
        ..PredictorConfig::of_kind(kind)
    }
}

/// Mean over repetitions of conformal and Gaussian-baseline coverage, per alpha.
struct CoverageRun {
    conformal: Vec<f64>,
    baseline: Vec<f64>,
}

fn coverage_run(kind: PredictorKind, std_scale: f64, alphas: &[f64], reps: usize) -> CoverageRun {
    let mut conformal = vec![0.0; alphas.len()];
    let mut baseline = vec![0.0; alphas.len()];
    let pcfg = predictor(kind, std_scale);
    for rep in 0..reps {
        let seed = 10_000 + rep as u64;
        let b = blocks(
            &SynthConfig {
                seed,
                ..SynthConfig::default()
            },
            N_TRAIN,
            N_CALIB,
            N_TEST,
        );
        let model = Model::fit(&b.train, &pcfg, seed).unwrap();
        let scores = score_dataset(&model, &b.calib).unwrap();
        assert_eq!(scores.len(), N_CALIB);
        for (k, &alpha) in alphas.iter().enumerate() {
            let cal = Calibration::Population(calibrate(&scores, alpha).unwrap());
            let bands = visit_bands(&model, &b.test, &cal, true).unwrap();
            conformal[k] += coverage_and_width(&bands, &b.test, None).unwrap().mean_coverage;
            let base = baseline_bands(&model, &b.test, alpha).unwrap();
            baseline[k] += coverage_and_width(&base, &b.test, None).unwrap().mean_coverage;
        }
    }
    conformal.iter_mut().for_each(|c| *c /= reps as f64);
    baseline.iter_mut().for_each(|c| *c /= reps as f64);
    CoverageRun { conformal, baseline }
}

fn upper_tolerance(alpha: f64) -> f64 {
    1.0 - alpha + 1.0 / (N_CALIB as f64 + 1.0) + 0.02
}

fn within_marginal_band(cov: f64, alpha: f64) -> bool {
    cov >= 1.0 - alpha - 0.02 && cov <= upper_tolerance(alpha)
}

const ALPHAS: [f64; 3] = [0.1, 0.05, 0.01];

fn criterion_1_and_2() -> (Outcome, Outcome) {
    let start = Instant::now();
    let gp = coverage_run(PredictorKind::Gp, 1.0, &ALPHAS, REPS);
    let gp_secs = start.elapsed().as_secs_f64();
    let c1 = Outcome {
        pass: within_marginal_band(gp.conformal[0], ALPHA),
        detail: format!(
            "GP mean coverage {:.4} over {REPS} reps, required [{:.4}, {:.4}], {gp_secs:.0}s",
            gp.conformal[0],
            1.0 - ALPHA - 0.02,
            upper_tolerance(ALPHA)
        ),
    };

    let mut pass = within_marginal_band(gp.conformal[1], 0.05) && within_marginal_band(gp.conformal[2], 0.01);
    let mut detail = format!(
        "GP alpha 0.05: {:.4}, alpha 0.01: {:.4}",
        gp.conformal[1], gp.conformal[2]
    );
    for kind in [PredictorKind::Quantile, PredictorKind::Bootstrap] {
        let run = coverage_run(kind, 1.0, &ALPHAS, REPS);
        for (k, &alpha) in ALPHAS.iter().enumerate() {
            pass &= run.conformal[k] >= 1.0 - alpha - 0.02;
            detail.push_str(&format!("; {kind} alpha {alpha}: {:.4}", run.conformal[k]));
        }
    }
    (c1, Outcome { pass, detail })
}

fn criterion_3() -> Outcome {
    let run = coverage_run(PredictorKind::Bootstrap, 0.3, &[ALPHA], REPS);
    let (conf, base) = (run.conformal[0], run.baseline[0]);
    Outcome {
        pass: base < 1.0 - ALPHA - 0.05 && within_marginal_band(conf, ALPHA),
        detail: format!("overconfident bootstrap: baseline {base:.4} (< 0.85 required), conformal {conf:.4}"),
    }
}

fn criterion_4() -> Outcome {
    let mut site = GroupSpec::new("site", &["A", "B", "C"], &[1.0 / 3.0; 3]);
    site.noise_scale = Some(vec![1.0, 2.0, 3.0]);
    let cfg = SynthConfig {
        seed: 4,
        group_spec: vec![site],
        ..SynthConfig::default()
    };
    let b = blocks(&cfg, 150, 3000, 900);
    let model = Model::fit(&b.train, &predictor(PredictorKind::Gp, 1.0), 4).unwrap();
    let scores = score_dataset(&model, &b.calib).unwrap();
    let pop = Calibration::Population(calibrate(&scores, ALPHA).unwrap());
    let grp = Calibration::Grouped(mondrian_calibrate(&b.calib, &scores, "site", ALPHA).unwrap());
    let per_group = |cal: &Calibration| {
        let bands = visit_bands(&model, &b.test, cal, false).unwrap();
        coverage_and_width(&bands, &b.test, Some("site")).unwrap().per_group.unwrap()
    };
    let p = per_group(&pop);
    let g = per_group(&grp);
    let noisy = &p["C"];
    let mut pass = noisy.coverage <= 1.0 - ALPHA - 0.03;
    let mut detail = format!("population coverage in noisiest group {:.4}", noisy.coverage);
    for (name, st) in &g {
        let se = (ALPHA * (1.0 - ALPHA) / st.n as f64).sqrt();
        let floor = 1.0 - ALPHA - 3.0 * se;
        pass &= st.n >= 150 && st.coverage >= floor;
        detail.push_str(&format!("; Mondrian {name}: {:.4} (n {}, floor {:.4})", st.coverage, st.n, floor));
    }
    Outcome { pass, detail }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=200usize);
        let k = rng.random_range(1..=50u64);
        let alpha = k as f64 / 100.0;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        // rank = ceil((n + 1)(100 - k) / 100) in exact integer arithmetic
        let rank = ((n as u64 + 1) * (100 - k)).div_ceil(100) as usize;
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected = if rank <= n { Radius::Finite(sorted[rank - 1]) } else { Radius::Infinite };
        let got = calibrate_values(&scores, alpha).unwrap();
        if got.radius != expected || got.rank != rank {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{mismatches} mismatches in 1000 random score sets"),
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=50usize);
        let d = rng.random_range(1..=4usize);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hyper = GpHyper {
            signal_variance: rng.random_range(0.5..2.0),
            lengthscale: rng.random_range(0.5..3.0),
            noise_variance: rng.random_range(0.01..0.5),
        };
        let m = GpModel::with_hyper(&rows, &y, hyper, false).unwrap();
        let kern = |a: &[f64], b: &[f64]| {
            let s: f64 = a.iter().zip(b).map(|(x, z)| (x - z).powi(2)).sum();
            hyper.signal_variance * (-s / (2.0 * hyper.lengthscale.powi(2))).exp()
        };
        let ybar = y.iter().sum::<f64>() / n as f64;
        let k = DMatrix::from_fn(n, n, |i, j| {
            kern(&rows[i], &rows[j]) + if i == j { hyper.noise_variance + m.jitter } else { 0.0 }
        });
        let kinv = k.try_inverse().unwrap();
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
        for _ in 0..5 {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ks = DVector::from_iterator(n, rows.iter().map(|r| kern(&q, r)));
            let mean = ybar + ks.dot(&(&kinv * &yc));
            let var = hyper.signal_variance - ks.dot(&(&kinv * &ks)) + hyper.noise_variance;
            let p = m.predict_row(&q).unwrap();
            worst = worst.max((p.mean - mean).abs()).max((p.std * p.std - var).abs());
        }
    }

    // noiseless interpolation on well-separated points
    let mut interp = 0.0f64;
    for inst in 0..20 {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 1.5, (inst % 3) as f64]).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hyper = GpHyper {
            signal_variance: 1.0,
            lengthscale: 1.0,
            noise_variance: 0.0,
        };
        let m = GpModel::with_hyper(&rows, &y, hyper, false).unwrap();
        for (r, &t) in rows.iter().zip(&y) {
            interp = interp.max((m.predict_row(r).unwrap().mean - t).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-8 && interp <= 1e-6,
        detail: format!("max oracle deviation {worst:.2e} (<= 1e-8), interpolation error {interp:.2e} (<= 1e-6)"),
    }
}

fn risk_cohort(seed: u64) -> SynthConfig {
    let mut cfg = SynthConfig {
        seed,
        progressor_frac: 0.35,
        ..SynthConfig::default()
    };
    for g in &mut cfg.group_spec {
        g.progressor_frac = None;
    }
    cfg
}

fn criterion_7() -> Outcome {
    let b = blocks(&risk_cohort(7), 300, 300, 400);
    let model = Model::fit(&b.train, &predictor(PredictorKind::Gp, 1.0), 7).unwrap();
    let cal = Calibration::Population(calibrate(&score_dataset(&model, &b.calib).unwrap(), ALPHA).unwrap());
    let cfg = RiskConfig {
        bootstrap_b: 50,
        ..RiskConfig::default()
    };
    let out = risk_pipeline(&b.test, &labels_from_truth(&b.truth), &model, &cal, &cfg).unwrap();
    let finite: Vec<_> = out.records.iter().filter(|r| r.rocb.is_some()).collect();
    let dominated = finite.iter().all(|r| r.rocb.unwrap() <= r.roc_hat);
    let roc: Vec<f64> = finite.iter().map(|r| r.roc_hat).collect();
    let bound: Vec<f64> = finite.iter().map(|r| r.rocb.unwrap()).collect();
    let labels: Vec<Label> = finite.iter().map(|r| r.label).collect();
    let mut superset = true;
    let mut recall_ok = true;
    let rule = HighRiskRule::AtOrBelow;
    for &tau in roc.iter().chain(&bound) {
        for i in 0..roc.len() {
            if rule.flags(roc[i], tau) && !rule.flags(bound[i], tau) {
                superset = false;
            }
        }
        let r1 = classify_metrics(&roc, &labels, tau, rule).unwrap().recall;
        let r2 = classify_metrics(&bound, &labels, tau, rule).unwrap().recall;
        recall_ok &= r2 >= r1;
    }
    Outcome {
        pass: !finite.is_empty() && dominated && superset && recall_ok,
        detail: format!(
            "{} finite-band subjects: bound <= rate {dominated}, flagged superset {superset}, recall dominance {recall_ok}",
            finite.len()
        ),
    }
}

fn criterion_8() -> Outcome {
    let seeds = 20;
    let mut delta = 0.0;
    let mut rows = Vec::new();
    for s in 0..seeds {
        let seed = 800 + s as u64;
        let b = blocks(&risk_cohort(seed), 400, 400, 400);
        let model = Model::fit(&b.train, &predictor(PredictorKind::Bootstrap, 0.3), seed).unwrap();
        let cal = Calibration::Population(calibrate(&score_dataset(&model, &b.calib).unwrap(), ALPHA).unwrap());
        let cfg = RiskConfig {
            bootstrap_b: 200,
            seed,
            ..RiskConfig::default()
        };
        let out = risk_pipeline(&b.test, &labels_from_truth(&b.truth), &model, &cal, &cfg).unwrap();
        delta += out.rocb.metrics.recall - out.roc_hat.metrics.recall;
        rows.push(format!("{:.3}/{:.3}", out.roc_hat.metrics.recall, out.rocb.metrics.recall));
    }
    delta /= seeds as f64;
    Outcome {
        pass: delta >= 0.05,
        detail: format!("mean recall gain {delta:.4} (>= 0.05 required); per seed rate/bound {}", rows.join(" ")),
    }
}

fn brute_youden(scores: &[f64], labels: &[Label]) -> (f64, i64) {
    let p = labels.iter().filter(|&&l| l == Label::Progressor).count() as i64;
    let n = labels.len() as i64 - p;
    let mut cands: Vec<f64> = scores.to_vec();
    cands.push(f64::NEG_INFINITY);
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    let mut best = (f64::NEG_INFINITY, i64::MIN);
    for &tau in &cands {
        let mut tp = 0;
        let mut fp = 0;
        for (s, l) in scores.iter().zip(labels) {
            if *s <= tau {
                match l {
                    Label::Progressor => tp += 1,
                    Label::Stable => fp += 1,
                }
            }
        }
        let j = tp * n - fp * p;
        // ascending candidates: strict improvement keeps the smallest tau
        if j > best.1 {
            best = (tau, j);
        }
    }
    best
}

fn pairwise_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (sp, lp) in scores.iter().zip(labels) {
        for (sn, ln) in scores.iter().zip(labels) {
            if *lp == Label::Progressor && *ln == Label::Stable {
                den += 1.0;
                // lower score is riskier
                if sp < sn {
                    num += 1.0;
                } else if sp == sn {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut youden_bad = 0;
    let mut auc_err = 0.0f64;
    let mut done = 0;
    while done < 500 {
        let n = rng.random_range(2..=60usize);
        let levels = rng.random_range(2..=20u32);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 4.0 - 1.0).collect();
        let labels: Vec<Label> = (0..n)
            .map(|_| if rng.random_bool(0.4) { Label::Progressor } else { Label::Stable })
            .collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        done += 1;
        let p = labels.iter().filter(|&&l| l == Label::Progressor).count() as f64;
        let (tau, j) = brute_youden(&scores, &labels);
        let y = youden_threshold(&scores, &labels, HighRiskRule::AtOrBelow).unwrap();
        if y.tau != tau || (y.j - j as f64 / (p * (n as f64 - p))).abs() > 1e-12 {
            youden_bad += 1;
        }
        let a = threshold_free(&scores, &labels, HighRiskRule::AtOrBelow).unwrap();
        auc_err = auc_err.max((a.roc_auc - pairwise_auc(&scores, &labels)).abs());
    }
    Outcome {
        pass: youden_bad == 0 && auc_err <= 1e-12,
        detail: format!("{youden_bad} Youden mismatches in 500 instances, max AUC deviation {auc_err:.1e}"),
    }
}

const PIPELINE_CONFIG: &str = r#"{
  "synth": {"n_subjects": 260},
  "predictor": {"kind": "gp", "gp": {"max_train_rows": 300}},
  "evaluation": {"n_splits": 2, "sweep_fracs": [0.05, 0.2]},
  "risk": {"bootstrap_B": 100}
}"#;

fn run_pipelines(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::write(dir.join("config.json"), PIPELINE_CONFIG).unwrap();
    let steps: [&[&str]; 7] = [
        &["generate"],
        &["fit", "--data", "out/cohort.csv"],
        &["calibrate", "--data", "out/cohort.csv", "--group-by", "diagnosis"],
        &["evaluate", "--jobs", "2"],
        &["sweep"],
        &["stratify", "--group-by", "diagnosis"],
        &["risk", "--direction", "decreasing"],
    ];
    let mut files = BTreeMap::new();
    for step in steps {
        let status = Command::new(env!("CARGO_BIN_EXE_conftraj"))
            .current_dir(dir)
            .args(step)
            .args(["--config", "config.json", "--out", "out", "--seed", "3"])
            .status()
            .unwrap();
        assert!(status.success(), "conftraj {step:?} failed");
        for entry in std::fs::read_dir(dir.join("out")).unwrap() {
            let path = entry.unwrap().path();
            let name = format!("{}:{}", step[0], path.file_name().unwrap().to_string_lossy());
            files.insert(name, std::fs::read(&path).unwrap());
        }
    }
    files
}

fn criterion_10() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run_pipelines(a.path());
    let fb = run_pipelines(b.path());
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    Outcome {
        pass: fa.len() == fb.len() && differing.is_empty() && fa.len() > 10,
        detail: format!("{} artifacts compared across 7 subcommands, {} differ {differing:?}", fa.len(), differing.len()),
    }
}

fn criterion_11() -> Outcome {
    let b = blocks(&SynthConfig { seed: 11, ..SynthConfig::default() }, 300, 500, 200);
    let model = Model::fit(&b.train, &predictor(PredictorKind::Gp, 1.0), 11).unwrap();
    let cal = Calibration::Population(calibrate(&score_dataset(&model, &b.calib).unwrap(), ALPHA).unwrap());
    let bands = grid_bands(&model, &b.test, &cal, conftraj::conformal::DEFAULT_T_MAX, true).unwrap();
    let w = width_over_band_times(&bands, 12).unwrap();
    let (first, last) = (*w.values().next().unwrap(), *w.values().last().unwrap());
    let curve: Vec<String> = w.iter().map(|(k, v)| format!("{k}:{v:.3}")).collect();
    Outcome {
        pass: last > first,
        detail: format!("first-year width {first:.4}, last-year width {last:.4}; {}", curve.join(" ")),
    }
}

/// `ACCEPTANCE_ONLY=3,8` restricts the run to the listed criteria.
fn selected(k: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|x| x.trim().parse() == Ok(k)),
        Err(_) => true,
    }
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    if selected(1) || selected(2) {
        let (c1, c2) = criterion_1_and_2();
        results.push((1, c1));
        results.push((2, c2));
    }
    let rest: [(usize, fn() -> Outcome); 9] = [
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    for (k, f) in rest {
        if selected(k) {
            let start = Instant::now();
            let mut o = f();
            o.detail.push_str(&format!(" [{:.1}s]", start.elapsed().as_secs_f64()));
            results.push((k, o));
        }
    }
    let mut failed = Vec::new();
    for (k, o) in &results {
        println!("criterion {k:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(*k);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
