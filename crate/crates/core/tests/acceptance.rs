//! Acceptance suite A1–A10. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line; the process exits non-zero
//! if any criterion fails.

use ambiglab::acquisition::{entropy_score, least_confidence, margin_score, select_batch, AcqFn, AcquisitionScore};
use ambiglab::al_loop::{prepare, run_prepared, ExperimentConfig, ExperimentReport};
use ambiglab::analysis::{label_efficiency, mean, mismatched_upsampling_ratio, dose_response, LabelEfficiency, LearningCurve};
use ambiglab::cli::{cmd_run, run_probes};
use ambiglab::config::{default_probe_train, preset, ConfigFile, ProbeSection, ProbeStage};
use ambiglab::datagen::LabeledExample;
use ambiglab::model::{gradient_check, train_to_convergence, Layer, ModelParams, ProbVector, StopReason, TrainConfig};
use ambiglab::pretrain::Provenance;
use ambiglab::rng::SeedStream;
use rand::Rng;
use rand_distr::StandardNormal;
use std::cmp::Ordering;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Seeds used by every multi-seed criterion; fixed after calibration.
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

// A1 -------------------------------------------------------------------------

fn rank(scores: &[f64]) -> Vec<u64> {
    let s: Vec<AcquisitionScore> = scores
        .iter()
        .enumerate()
        .map(|(i, &score)| AcquisitionScore { example_id: i as u64, score })
        .collect();
    select_batch(&s, s.len()).unwrap()
}

fn a1() -> Outcome {
    let mut rng = SeedStream::new(2024).child("a1").rng();
    let mut ps: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
    // exact ties, and the extremes
    for i in 0..50 {
        ps[900 + i] = ps[i];
    }
    ps[0] = 0.5;
    ps[1] = 0.0;
    ps[2] = 1.0;
    let vecs: Vec<ProbVector> = ps.iter().map(|&p| ProbVector::new(vec![p, 1.0 - p]).unwrap()).collect();
    let lc = rank(&vecs.iter().map(least_confidence).collect::<Vec<_>>());
    let en = rank(&vecs.iter().map(entropy_score).collect::<Vec<_>>());
    let mg = rank(&vecs.iter().map(|p| margin_score(p).unwrap()).collect::<Vec<_>>());
    outcome(lc == en && en == mg, format!("1000 binary vectors, rankings identical: {}", lc == en && en == mg))
}

// A2 -------------------------------------------------------------------------

fn a2() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut rng = SeedStream::new(case).child("a2").rng();
        let input = rng.random_range(2..9);
        let classes = rng.random_range(2..6);
        let depth = rng.random_range(0..4);
        let mut dims = vec![input];
        dims.extend((0..depth).map(|_| rng.random_range(2..11)));
        dims.push(classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let scale = 1.0 / (cols as f64).sqrt();
                let weights = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                let bias = (0..rows).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
                Layer::new(rows, cols, weights, bias).unwrap()
            })
            .collect();
        let params = ModelParams::new(layers).unwrap();
        let n = rng.random_range(1..9);
        let batch: Vec<LabeledExample> = (0..n)
            .map(|i| LabeledExample {
                id: i,
                features: (0..input).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                label: rng.random_range(0..classes),
                attributes: Default::default(),
            })
            .collect();
        worst = worst.max(gradient_check(&params, &batch, 1e-5).unwrap());
    }
    outcome(worst <= 1e-4, format!("20 random nets, max relative error {worst:.3e} (bound 1e-4)"))
}

// A3 -------------------------------------------------------------------------

fn blobs(seed: u64, n: usize) -> Vec<LabeledExample> {
    let mut rng = SeedStream::new(seed).child("blobs").rng();
    (0..n)
        .map(|i| {
            let y = (i % 2) as usize;
            let c = if y == 0 { -2.0 } else { 2.0 };
            LabeledExample {
                id: i as u64,
                features: vec![c + 0.3 * rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)],
                label: y,
                attributes: Default::default(),
            }
        })
        .collect()
}

fn linear_model(w: Vec<f64>, b: Vec<f64>) -> ModelParams {
    ModelParams::new(vec![Layer::new(2, 2, w, b).unwrap()]).unwrap()
}

fn a3() -> Outcome {
    let mut problems = Vec::new();
    let mut threshold_runs = 0;
    let mut max_step_runs = 0;
    for seed in 0..12u64 {
        let data = blobs(seed, 40);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 8,
            max_steps: [50, 200, 5000][seed as usize % 3],
            ..TrainConfig::default()
        }
        .with_stream(SeedStream::new(seed).child("a3"));
        let (_, t) = train_to_convergence(linear_model(vec![0.0; 4], vec![0.0; 2]), &data, &cfg).unwrap();
        let below = t.final_loss <= 0.001 * t.initial_loss;
        match t.stopped_by {
            StopReason::Threshold => threshold_runs += 1,
            StopReason::MaxSteps => {
                max_step_runs += 1;
                if t.steps_taken != cfg.max_steps {
                    problems.push(format!("seed {seed}: max_steps stop after {} steps", t.steps_taken));
                }
            }
            StopReason::Degenerate => problems.push(format!("seed {seed}: unexpected degenerate stop")),
        }
        if below != (t.stopped_by == StopReason::Threshold) {
            problems.push(format!("seed {seed}: threshold contract broken ({t:?})"));
        }
    }
    if threshold_runs == 0 || max_step_runs == 0 {
        problems.push(format!("runs did not cover both stops ({threshold_runs} threshold, {max_step_runs} max_steps)"));
    }

    let data = blobs(99, 20);
    let frozen = TrainConfig {
        learning_rate: 0.0,
        batch_size: 4,
        max_steps: 37,
        ..TrainConfig::default()
    };
    let (_, t) = train_to_convergence(linear_model(vec![0.1, 0.0, 0.0, 0.1], vec![0.0; 2]), &data, &frozen).unwrap();
    if t.stopped_by != StopReason::MaxSteps || t.steps_taken != 37 {
        problems.push(format!("lr=0 run: {t:?}"));
    }

    // Huge logits for the right class drive the loss under 1e-12.
    let certain: Vec<LabeledExample> = (0..4)
        .map(|i| LabeledExample {
            id: i,
            features: vec![0.0, 0.0],
            label: 0,
            attributes: Default::default(),
        })
        .collect();
    let (_, t) = train_to_convergence(linear_model(vec![0.0; 4], vec![100.0, -100.0]), &certain, &frozen).unwrap();
    if t.stopped_by != StopReason::Degenerate || t.steps_taken != 0 {
        problems.push(format!("zero-loss run: {t:?}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{threshold_runs} threshold stops and {max_step_runs} max_steps stops obey the contract; lr=0 and zero-loss runs correct")
        } else {
            problems.join("; ")
        },
    )
}

// A4 -------------------------------------------------------------------------

fn a4() -> Outcome {
    let mut mismatches = 0;
    for case in 0..1000u64 {
        let mut rng = SeedStream::new(case).child("a4").rng();
        let n = rng.random_range(0..60usize);
        let levels = rng.random_range(1..8);
        let scores: Vec<AcquisitionScore> = (0..n)
            .map(|i| AcquisitionScore {
                example_id: i as u64 * 7 % 1009,
                score: rng.random_range(0..levels) as f64 / levels as f64,
            })
            .collect();
        let k = rng.random_range(0..n + 5);
        let mut brute = scores.clone();
        brute.sort_by(|a, b| match b.score.partial_cmp(&a.score).unwrap() {
            Ordering::Equal => a.example_id.cmp(&b.example_id),
            o => o,
        });
        let expect: Vec<u64> = brute.iter().take(k).map(|s| s.example_id).collect();
        if select_batch(&scores, k).unwrap() != expect {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 score sets with ties, {mismatches} mismatches"))
}

// A5 -------------------------------------------------------------------------

/// Standard error of the upsampling ratio when `n` of `total` items are drawn
/// without replacement from a pool containing `hits` items of interest.
fn hypergeometric_ratio_se(total: usize, hits: usize, n: usize) -> f64 {
    let (big_n, k, n) = (total as f64, hits as f64, n as f64);
    let p = k / big_n;
    let var = n * p * (1.0 - p) * (big_n - n) / (big_n - 1.0);
    var.sqrt() / n / p
}

fn a5() -> Outcome {
    let base = preset("waterbirds_like").unwrap().experiment;
    let mut ratios = Vec::new();
    let mut se = Vec::new();
    for &seed in &SEEDS {
        let cfg = ExperimentConfig {
            acq_fn: AcqFn::Random,
            master_seed: seed,
            ..base.clone()
        };
        let report = run_prepared(&prepare(&cfg).unwrap(), &cfg).unwrap();
        let frac = report.pool_mismatched_fraction.unwrap();
        let hits = (frac * report.pool_size as f64).round() as usize;
        se.push(hypergeometric_ratio_se(report.pool_size, hits, report.log.len()));
        ratios.push(mismatched_upsampling_ratio(&report).unwrap());
    }
    let m = mean(&ratios);
    let se_mean = (se.iter().map(|s| s * s).sum::<f64>()).sqrt() / se.len() as f64;
    outcome(
        (m - 1.0).abs() <= 3.0 * se_mean,
        format!("mean ratio {m:.3} over 5 seeds, expectation 1.0, 3 SE = {:.3}; per seed {ratios:.3?}", 3.0 * se_mean),
    )
}

// A6 -------------------------------------------------------------------------

fn a6() -> Outcome {
    let base = preset("shapes_color_default").unwrap().experiment;
    let mut pre_ratio = Vec::new();
    let mut rand_bb_ratio = Vec::new();
    let mut acc_wins = 0;
    let mut ratio_wins = 0;
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let lc = ExperimentConfig {
            acq_fn: AcqFn::LeastConfidence,
            backbone: Provenance::Pretrained,
            master_seed: seed,
            ..base.clone()
        };
        let rnd = ExperimentConfig {
            acq_fn: AcqFn::Random,
            ..lc.clone()
        };
        let rb = ExperimentConfig {
            backbone: Provenance::Random,
            ..lc.clone()
        };
        let prepared = prepare(&lc).unwrap();
        let r_lc: ExperimentReport = run_prepared(&prepared, &lc).unwrap();
        let r_rnd = run_prepared(&prepared, &rnd).unwrap();
        let r_rb = run_prepared(&prepare(&rb).unwrap(), &rb).unwrap();
        let (a, b) = (mismatched_upsampling_ratio(&r_lc).unwrap(), mismatched_upsampling_ratio(&r_rb).unwrap());
        let (acc_lc, acc_rnd) = (r_lc.mean_accuracy_after_seed(), r_rnd.mean_accuracy_after_seed());
        acc_wins += usize::from(acc_lc > acc_rnd);
        ratio_wins += usize::from(b < a);
        pre_ratio.push(a);
        rand_bb_ratio.push(b);
        lines.push(format!("seed {seed}: ratio {a:.2} vs random backbone {b:.2}, acc {acc_lc:.3} vs random acq {acc_rnd:.3}"));
    }
    let m = mean(&pre_ratio);
    let pass = m >= 2.0 && acc_wins >= 4 && ratio_wins >= 4;
    outcome(
        pass,
        format!(
            "(i) mean ratio {m:.3} (need >= 2.0); (ii) accuracy above random in {acc_wins}/5; \
             (iii) random backbone lower in {ratio_wins}/5 [{}]",
            lines.join("; ")
        ),
    )
}

// A7 -------------------------------------------------------------------------

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn a7() -> Outcome {
    let cfg = preset("dose_response").unwrap();
    let (rows, _) = dose_response(&cfg.experiment, &[0.5, 0.75, 0.9, 0.95], &[1, 2, 3]).unwrap();
    let levels: Vec<f64> = rows.iter().map(|r| r.p_match).collect();
    let ratios: Vec<f64> = rows.iter().map(|r| r.mean_upsampling_ratio).collect();
    let rho = spearman(&levels, &ratios);
    outcome(rho == 1.0, format!("level means {ratios:.3?} at p_match {levels:?}, Spearman {rho}"))
}

// A8 -------------------------------------------------------------------------

fn a8() -> Outcome {
    let base = preset("shapes_color_default").unwrap();
    let mut wins = 0;
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let mut cfg: ConfigFile = base.clone();
        cfg.experiment.master_seed = seed;
        cfg.probe = Some(ProbeSection {
            provenances: vec![Provenance::Pretrained, Provenance::Random],
            attribute_sets: vec![vec!["color".into()]],
            stages: vec![ProbeStage::Initial],
            train: default_probe_train(),
        });
        let rows = run_probes(&cfg).unwrap();
        let acc = |p: Provenance| rows.iter().find(|r| r.provenance == p).unwrap().overall;
        let (a, b) = (acc(Provenance::Pretrained), acc(Provenance::Random));
        wins += usize::from(a > b);
        lines.push(format!("seed {seed}: {a:.3} vs {b:.3}"));
    }
    outcome(wins == 5, format!("pretrained color probe beats random in {wins}/5 [{}]", lines.join("; ")))
}

// A9 -------------------------------------------------------------------------

fn a9() -> Outcome {
    let curve = |p: &[(usize, f64)]| LearningCurve::new(p.to_vec()).unwrap();
    let reference = curve(&[(100, 0.60), (200, 0.70), (300, 0.75), (500, 0.80)]);
    let cases = [
        (curve(&[(50, 0.65), (100, 0.80), (500, 0.90)]), LabelEfficiency::Factor(5.0)),
        (reference.clone(), LabelEfficiency::Factor(1.0)),
        (curve(&[(100, 0.70), (200, 0.79), (500, 0.795)]), LabelEfficiency::NotReached),
        (curve(&[(100, 0.5), (200, 0.81)]), LabelEfficiency::Factor(2.5)),
    ];
    let got: Vec<LabelEfficiency> = cases.iter().map(|(t, _)| label_efficiency(t, &reference).unwrap()).collect();
    let ok = cases.iter().zip(&got).all(|((_, e), g)| e == g);
    outcome(ok, format!("factors {got:?}"))
}

// A10 ------------------------------------------------------------------------

fn a10() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let mut bodies = Vec::new();
    for (i, jobs) in [1usize, 4].into_iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        cmd_run("shapes_color_default", &out, None, jobs).unwrap();
        bodies.push((
            std::fs::read(out.join("metrics.csv")).unwrap(),
            std::fs::read(out.join("acquisitions.csv")).unwrap(),
        ));
    }
    let same = bodies[0] == bodies[1];
    outcome(same, format!("metrics.csv and acquisitions.csv identical across --jobs 1 and 4: {same}"))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("A1", Duration::from_secs(1), a1),
        ("A2", Duration::from_secs(10), a2),
        ("A3", Duration::from_secs(5), a3),
        ("A4", Duration::from_secs(1), a4),
        ("A5", Duration::from_secs(120), a5),
        ("A6", Duration::from_secs(300), a6),
        ("A7", Duration::from_secs(600), a7),
        ("A8", Duration::from_secs(120), a8),
        ("A9", Duration::from_secs(1), a9),
        ("A10", Duration::from_secs(120), a10),
    ];
    let mut failed = 0;
    for (id, budget, check) in criteria {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = o.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{id} {} ({:.1}s of {}s): {}{}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            o.detail,
            if in_time { "" } else { " [over time budget]" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
