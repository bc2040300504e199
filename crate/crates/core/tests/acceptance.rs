//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bdefs::de::{self, crossover, difference_vector, mutate, BitMask, DeConfig};
use bdefs::metrics::{aggregate_confusions, auc_ovr, ClassConfusion, MulticlassConfusion};
use bdefs::pipeline::synth::{FeatureSynth, ImageSynth};
use bdefs::pipeline::{run_pipeline, Method, PipelineConfig, SplitName};
use bdefs::svm::{train_binary, train_ovr, SvmParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn bits(n: u32, width: usize) -> BitMask {
    BitMask::new((0..width).map(|i| n >> (width - 1 - i) & 1 == 1).collect())
}

/// Published per-class counts for the selected deep features on all data.
fn c1_metric_fidelity() -> Outcome {
    let c = ClassConfusion::new(363.30, 727.00, 1.00, 0.70).unwrap();
    let got = [
        c.accuracy().unwrap(),
        c.sensitivity().unwrap(),
        c.specificity().unwrap(),
        c.geometric_mean().unwrap(),
    ];
    let want = [0.9984, 0.9981, 0.9986, 0.9984];
    let pass = got.iter().zip(want).all(|(&g, w)| within(g, w, 5e-4));
    outcome(
        pass,
        format!(
            "acc/sens/spec/gmean = {:.6}/{:.6}/{:.6}/{:.6}",
            got[0], got[1], got[2], got[3]
        ),
    )
}

/// Published test confusion matrix and its class-averaged counts.
fn c2_aggregation_fidelity() -> Outcome {
    let m = MulticlassConfusion::from_rows(&[
        vec![51.75, 0.0, 0.2],
        vec![0.15, 54.9, 0.1],
        vec![0.4, 0.55, 55.95],
    ])
    .unwrap();
    let covid = m.one_vs_rest(0).unwrap();
    let agg = aggregate_confusions(&m.one_vs_rest_all()).unwrap();
    let acc = agg.accuracy().unwrap();
    let counts_ok = within(agg.true_pos, 54.20, 5e-3)
        && within(agg.true_neg, 108.87, 5e-3)
        && within(agg.false_pos, 0.47, 5e-3)
        && within(agg.false_neg, 0.47, 5e-3);
    let covid_ok = within(covid.true_pos, 51.75, 1e-9)
        && within(covid.true_neg, 111.50, 1e-9)
        && within(covid.false_pos, 0.55, 1e-9)
        && within(covid.false_neg, 0.20, 1e-9);
    outcome(
        counts_ok && covid_ok && within(acc, 0.9943, 5e-4),
        format!(
            "TP {:.4} TN {:.4} FP {:.4} FN {:.4} accuracy {acc:.6}",
            agg.true_pos, agg.true_neg, agg.false_pos, agg.false_neg
        ),
    )
}

fn c3_operator_oracle() -> Outcome {
    let mut diff_bad = 0;
    let mut mut_bad = 0;
    for a in 0..8u32 {
        for b in 0..8u32 {
            let (ma, mb) = (bits(a, 3), bits(b, 3));
            let d = difference_vector(&ma, &mb).unwrap();
            let m = mutate(&ma, &mb).unwrap();
            for i in 0..3 {
                let (x, y) = (ma.get(i), mb.get(i));
                // Truth tables: diff is 0 on agreement, else a; mutant is 1
                // where diff is 1, else the donor bit.
                let want_d = match (x, y) {
                    (false, false) | (true, true) => false,
                    (true, false) => true,
                    (false, true) => false,
                };
                let want_m = match (x, y) {
                    (true, _) => true,
                    (false, donor) => donor,
                };
                diff_bad += usize::from(d.get(i) != want_d);
                mut_bad += usize::from(m.get(i) != want_m);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cr_bad = 0;
    for _ in 0..1000 {
        let d = rng.random_range(1..64);
        let mutant = BitMask::new((0..d).map(|_| rng.random()).collect());
        let current = BitMask::new((0..d).map(|_| rng.random()).collect());
        if crossover(&mutant, &current, 1.0, &mut rng).unwrap() != mutant {
            cr_bad += 1;
        }
    }
    outcome(
        diff_bad + mut_bad + cr_bad == 0,
        format!("difference mismatches {diff_bad}/64 pairs, mutate {mut_bad}/64, CR=1 crossover {cr_bad}/1000"),
    )
}

fn c4_de_optimisation() -> Outcome {
    let mut hits = 0;
    let mut monotone = true;
    for seed in 0..100 {
        let cfg = DeConfig {
            pop_size: 8,
            generations: 50,
            seed,
            ..Default::default()
        };
        let out = de::run(&cfg, 4, |m: &BitMask| {
            Ok::<_, std::convert::Infallible>((m.count_ones() as f64 - 2.0).abs())
        })
        .unwrap();
        hits += usize::from(out.best.fitness == 0.0);
        monotone &= out.history.best_fitness.windows(2).all(|w| w[1] <= w[0]);
    }
    outcome(
        hits >= 95 && monotone,
        format!("fitness 0 reached in {hits}/100 runs, best fitness non-increasing: {monotone}"),
    )
}

fn c5_gradient_checks() -> Outcome {
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    for seed in 0..5 {
        for (name, err) in common::gradcheck::all(seed) {
            count += 1;
            if err > worst.1 {
                worst = (format!("{name} (seed {seed})"), err);
            }
        }
    }
    outcome(
        worst.1 < common::gradcheck::TOLERANCE,
        format!(
            "{count} checks over 5 seeds, step {:e}, worst relative error {:.2e} at {}",
            common::gradcheck::STEP,
            worst.1,
            worst.0
        ),
    )
}

fn c6_auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..20u8)) / 4.0)
            .collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        positive[0] = true;
        positive[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| positive[i]) {
            for j in (0..n).filter(|&j| !positive[j]) {
                pairs += 1.0;
                wins += match scores[i].total_cmp(&scores[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        let rank = auc_ovr(&scores, &positive).unwrap();
        worst = worst.max((rank - wins / pairs).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("100 instances, max |rank - pairs| = {worst:.2e}"),
    )
}

fn c7_svm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Two blobs split by the band |x0| < 1, so the geometric margin is >= 1.
    let mut x = Array2::zeros((100, 2));
    let mut y = Vec::new();
    for i in 0..100 {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        x[[i, 0]] = sign * rng.random_range(1.0..4.0);
        x[[i, 1]] = rng.random_range(-3.0..3.0);
        y.push(sign);
    }
    let (model, trace) = train_binary(x.view(), &y, &SvmParams::default()).unwrap();
    let binary_correct = x
        .rows()
        .into_iter()
        .zip(&y)
        .filter(|(r, &t)| model.decision(*r) * t > 0.0)
        .count();
    let monotone = trace.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12);

    let labels: Vec<usize> = y.iter().map(|&t| usize::from(t > 0.0)).collect();
    let ovr = train_ovr(x.view(), &labels, &SvmParams::default()).unwrap();
    let ovr_correct = ovr
        .predict(x.view())
        .unwrap()
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    outcome(
        binary_correct == 100 && ovr_correct == 100 && monotone,
        format!(
            "binary {binary_correct}/100, one-vs-rest {ovr_correct}/100, {} epochs, objective non-increasing: {monotone}",
            trace.objective.len()
        ),
    )
}

fn c8_feature_pipeline() -> Outcome {
    let seeds = 20;
    let mut all_informative = 0;
    let mut gmean_ok = 0;
    let mut selected_total = 0;
    let (mut sel_sum, mut full_sum) = (0.0, 0.0);
    for seed in 0..seeds {
        let ds = FeatureSynth {
            samples: 200,
            dim: 20,
            informative: 5,
            classes: 6,
            seed,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let cfg = PipelineConfig {
            seed,
            runs: 1,
            ..Default::default()
        };
        let bundle = run_pipeline(&cfg, &ds).unwrap();
        let s = &bundle.summary;
        let Some(run) = s.runs.first() else {
            return outcome(false, format!("seed {seed}: run failed: {:?}", s.failures));
        };
        if run.mask.chars().take(5).all(|c| c == '1') {
            all_informative += 1;
        }
        selected_total += run.selected;
        let gmean = |m| {
            s.result(SplitName::Validation, m)
                .and_then(|r| r.metrics.aggregate.rates.gmean)
                .unwrap_or(0.0)
        };
        let (sel, full) = (gmean(Method::Selected), gmean(Method::Original));
        sel_sum += sel;
        full_sum += full;
        gmean_ok += usize::from(sel >= full - 0.01);
    }
    let n = seeds as f64;
    let mean_count = selected_total as f64 / n;
    let (sel_mean, full_mean) = (sel_sum / n, full_sum / n);
    outcome(
        all_informative as f64 >= 0.95 * n && sel_mean >= full_mean - 0.01 && mean_count < 20.0,
        format!(
            "all 5 informative kept in {all_informative}/{seeds} seeds; validation gmean selected {sel_mean:.4} vs full {full_mean:.4} (per seed ok {gmean_ok}/{seeds}); mean selected {mean_count:.2}"
        ),
    )
}

fn c9_image_pipeline() -> Outcome {
    let ds = ImageSynth {
        samples: 300,
        seed: 9,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let cfg = PipelineConfig {
        seed: 9,
        runs: 1,
        epochs: IMAGE_EPOCHS,
        ..Default::default()
    };
    let bundle = run_pipeline(&cfg, &ds).unwrap();
    let s = &bundle.summary;
    let Some(history) = bundle.train_histories.first().map(|(_, h)| h) else {
        return outcome(false, format!("extractor failed: {:?}", s.failures));
    };
    let val_acc = history.last().and_then(|r| r.val_acc).unwrap_or(0.0);
    let Some(run) = s.runs.first() else {
        return outcome(false, format!("run failed: {:?}", s.failures));
    };
    let gmean = |m| {
        s.result(SplitName::Test, m)
            .and_then(|r| r.metrics.aggregate.rates.gmean)
            .unwrap_or(0.0)
    };
    let (sel, full) = (gmean(Method::Selected), gmean(Method::Original));
    outcome(
        val_acc >= 0.90 && sel >= full - 0.01 && run.selected < s.feature_count,
        format!(
            "CNN validation accuracy {val_acc:.4} after {} epochs; test gmean selected {sel:.4} vs full {full:.4}; {} of {} features",
            history.epochs.len(),
            run.selected,
            s.feature_count
        ),
    )
}

const IMAGE_EPOCHS: usize = 30;

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn c10_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_bdefs");
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("features.csv");
    let status = Command::new(bin)
        .args(["synth", "--seed", "10", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    if !status.status.success() {
        return outcome(false, "synth failed");
    }
    let run = |out: &str| {
        Command::new(bin)
            .args([
                "run",
                "--seed",
                "10",
                "--runs",
                "2",
                "--generations",
                "30",
                "--features",
            ])
            .arg(&csv)
            .arg("--out")
            .arg(tmp.path().join(out))
            .output()
            .unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    if !(a.status.success() && b.status.success()) {
        return outcome(false, String::from_utf8_lossy(&a.stderr).into_owned());
    }
    let (ta, tb) = (
        read_tree(&tmp.path().join("a")),
        read_tree(&tmp.path().join("b")),
    );
    let identical = ta == tb;
    let verify = Command::new(bin)
        .arg("verify-report")
        .arg(tmp.path().join("a"))
        .output()
        .unwrap();
    let verdict = String::from_utf8_lossy(&verify.stdout).trim().to_string();
    outcome(
        identical && verify.status.success(),
        format!(
            "{} files byte-identical: {identical}; verify-report: {verdict}",
            ta.len()
        ),
    )
}

fn main() {
    type Criterion = (u8, &'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 10] = [
        (
            1,
            "metric fidelity",
            c1_metric_fidelity,
            Duration::from_secs(1),
        ),
        (
            2,
            "aggregation fidelity",
            c2_aggregation_fidelity,
            Duration::from_secs(1),
        ),
        (
            3,
            "DE operator oracle",
            c3_operator_oracle,
            Duration::from_secs(1),
        ),
        (
            4,
            "DE optimisation",
            c4_de_optimisation,
            Duration::from_secs(10),
        ),
        (
            5,
            "gradient checks",
            c5_gradient_checks,
            Duration::from_secs(60),
        ),
        (6, "AUC oracle", c6_auc_oracle, Duration::from_secs(5)),
        (7, "SVM correctness", c7_svm, Duration::from_secs(5)),
        (
            8,
            "synthetic feature pipeline",
            c8_feature_pipeline,
            Duration::from_secs(300),
        ),
        (
            9,
            "synthetic image pipeline",
            c9_image_pipeline,
            Duration::from_secs(900),
        ),
        (10, "determinism", c10_determinism, Duration::from_secs(60)),
    ];
    let filter: Vec<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, check, limit) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = o.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {id:>2} [{}] {name}: {} ({:.2}s, limit {}s{})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", too slow" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
