//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any gated criterion fails.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use boostret::dataset::{generate, Corpus, SynthConfig};
use boostret::eval::{
    encode_distractor, encode_split, evaluate, evaluate_with_distractors, per_query, run_from_embeddings,
    with_distractors, EvalReport,
};
use boostret::losses::{boosted_id, boosted_itc, boosted_sdm, weighted_cross_entropy, DEFAULT_SDM_EPS};
use boostret::mining::{mine, rank_of, SimilarityMatrix};
use boostret::report::{self, promotion_rate, AblationAxis, AblationSpec};
use boostret::trainer::{checkpoint, run, LossPreset, RunOutcome, TrainConfig, CHECKPOINT_DIR};
use common::*;
use ndarray::{array, Array2};
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    gated: bool,
    detail: String,
}

fn gate(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        gated: true,
        detail,
    }
}

/// Reference corpus at the given seed.
fn reference_data(seed: u64) -> Corpus {
    generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn reference_train(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-4,
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn reduction() -> Outcome {
    let mut ok = true;
    for seed in [1, 2] {
        let data = reference_data(seed);
        let base = reference_train(seed).with_preset(LossPreset::Clip);
        let mut unit = reference_train(seed).with_preset(LossPreset::ClipBoosted);
        unit.boost.exp_alpha = 1.0;
        let a = run(&base, &data, None).unwrap();
        let b = run(&unit, &data, None).unwrap();
        let bits = |o: &RunOutcome| {
            o.state
                .epoch_log
                .iter()
                .map(|e| e.loss.to_bits())
                .collect::<Vec<_>>()
        };
        ok &= bits(&a) == bits(&b) && a.test == b.test && !b.state.refreshes.is_empty();
    }
    gate(
        ok,
        "exp_alpha=1.0 vs disabled, 60 epochs, seeds 1-2, bitwise losses and metrics".into(),
    )
}

fn gradients() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..50 {
        let mut r = rng(10_000 + seed);
        let b = r.random_range(2..=8);
        let d = r.random_range(2..=16);
        let distinct = r.random_bool(0.3);
        let ids = labels(&mut r, b, distinct);
        let lab: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let w = weights(&mut r, b);
        let tau = [0.05, 0.1, 0.5, 1.0][r.random_range(0..4)];
        let mut img = unit_rows(&mut r, b, d);
        let mut txt = unit_rows(&mut r, b, d);
        let mut cls = normal(&mut r, *ids.iter().max().unwrap() as usize + 1, d);

        let out = boosted_itc(img.view(), txt.view(), &w, tau).unwrap();
        let t = txt.clone();
        worst[0] = worst[0].max(check_gradient(&mut img, out.grad_img.view(), |x| {
            boosted_itc(x.view(), t.view(), &w, tau).unwrap().value
        }));
        let i = img.clone();
        worst[0] = worst[0].max(check_gradient(&mut txt, out.grad_txt.view(), |x| {
            boosted_itc(i.view(), x.view(), &w, tau).unwrap().value
        }));

        let out = boosted_id(img.view(), txt.view(), &lab, &w, cls.view()).unwrap();
        let c = cls.clone();
        worst[1] = worst[1].max(check_gradient(&mut img, out.grad_img.view(), |x| {
            boosted_id(x.view(), t.view(), &lab, &w, c.view()).unwrap().value
        }));
        worst[1] = worst[1].max(check_gradient(&mut txt, out.grad_txt.view(), |x| {
            boosted_id(i.view(), x.view(), &lab, &w, c.view()).unwrap().value
        }));
        worst[1] = worst[1].max(check_gradient(
            &mut cls,
            out.grad_classifier.as_ref().unwrap().view(),
            |x| boosted_id(i.view(), t.view(), &lab, &w, x.view()).unwrap().value,
        ));

        let out = boosted_sdm(img.view(), txt.view(), &ids, &w, tau, DEFAULT_SDM_EPS).unwrap();
        worst[2] = worst[2].max(check_gradient(&mut img, out.grad_img.view(), |x| {
            boosted_sdm(x.view(), t.view(), &ids, &w, tau, DEFAULT_SDM_EPS)
                .unwrap()
                .value
        }));
        worst[2] = worst[2].max(check_gradient(&mut txt, out.grad_txt.view(), |x| {
            boosted_sdm(i.view(), x.view(), &ids, &w, tau, DEFAULT_SDM_EPS)
                .unwrap()
                .value
        }));
    }
    gate(
        worst.iter().all(|&e| e <= 1e-5),
        format!(
            "50 batches, h=1e-6, max rel err itc {:.1e} id {:.1e} sdm {:.1e} (limit 1e-5)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn mining_oracle() -> Outcome {
    let mut ok = true;
    let mut ties = 0;
    let mut mined = 0;
    for seed in 0..200 {
        let mut r = rng(20_000 + seed);
        let nq = r.random_range(1..=32);
        let ng = r.random_range(2..=32);
        let levels = r.random_range(1..=4);
        let values = quantized(&mut r, nq, ng, levels) / levels as f64;
        let n_ids = r.random_range(1..=6);
        let gids: Vec<u64> = (0..ng).map(|_| r.random_range(0..n_ids)).collect();
        let paired: Vec<usize> = (0..nq).map(|_| r.random_range(0..ng)).collect();
        let qids: Vec<u64> = paired.iter().map(|&g| gids[g]).collect();
        let k = r.random_range(2..=4);
        ties += values
            .rows()
            .into_iter()
            .filter(|row| row.iter().map(|v| v.to_bits()).collect::<BTreeSet<_>>().len() < row.len())
            .count();
        let sim = SimilarityMatrix::from_values(values.clone()).unwrap();
        let got: BTreeSet<_> = mine(&sim, &qids, &gids, &paired, k)
            .unwrap()
            .entries
            .iter()
            .map(|e| (e.query_index, e.paired_gallery_index, e.rank1_gallery_index))
            .collect();
        let want = oracle_mine(values.view(), &qids, &gids, &paired, k);
        mined += want.len();
        ok &= got == want;
        for q in 0..nq {
            for g in 0..ng {
                ok &= rank_of(&sim, q, g) == oracle_rank(values.row(q), g);
            }
        }
    }
    gate(
        ok,
        format!("200 instances (n <= 32), {mined} oracle entries, {ties} rows with ties, exact set equality"),
    )
}

fn metric_oracle() -> Outcome {
    let mut ok = true;
    for seed in 0..100 {
        let mut r = rng(30_000 + seed);
        let d = r.random_range(1..=6);
        let ng = r.random_range(1..=30);
        let nq = r.random_range(1..=20);
        let n_ids = r.random_range(1..=5);
        let gids: Vec<u64> = (0..ng).map(|_| r.random_range(0..n_ids)).collect();
        let qids: Vec<u64> = (0..nq).map(|_| gids[r.random_range(0..ng)]).collect();
        let q = quantized(&mut r, nq, d, 3);
        let g = quantized(&mut r, ng, d, 3);
        let run = run_from_embeddings(q.view(), qids.clone(), g.view(), gids.clone());
        let (want, aps) = oracle_metrics(naive_dot(q.view(), g.view()).view(), &qids, &gids);
        let got: Vec<f64> = per_query(&run)
            .unwrap()
            .iter()
            .map(|x| x.average_precision)
            .collect();
        ok &= evaluate(&run).unwrap() == want && got == aps;
    }
    // Relevant items at ranks 1 and 3 of a 3-item gallery.
    let hand = run_from_embeddings(
        array![[1.0]].view(),
        vec![7],
        array![[0.9], [0.8], [0.1]].view(),
        vec![7, 3, 7],
    );
    let ap = per_query(&hand).unwrap()[0].average_precision;
    let hand_ok = (ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15 && (ap - 0.8333).abs() < 1e-4;
    gate(
        ok && hand_ok,
        format!("100 instances exact; hand AP for ranks {{1,3}} of 3 = {ap:.4}"),
    )
}

fn hand_values() -> Outcome {
    // Scalar evaluation: each row has logits (1, 0) with the target on the 1.
    let per_row = (1.0f64 + (-1.0f64).exp()).ln();
    let itc_scalar = 0.5 * (1.6 + 1.0) * per_row;
    let id_scalar = (1.6 + 1.0) * per_row;

    let eye: Array2<f64> = Array2::eye(2);
    let w = [1.6, 1.0];
    let itc = boosted_itc(eye.view(), eye.view(), &w, 1.0).unwrap().value;
    let (id_img, _) = weighted_cross_entropy(eye.view(), &[0, 1], &w);
    let id_both = boosted_id(eye.view(), eye.view(), &[0, 1], &w, eye.view())
        .unwrap()
        .value;
    let ok = (itc - 0.40724).abs() <= 1e-5
        && (itc - itc_scalar).abs() <= 1e-12
        && (id_img - 0.81448).abs() <= 1e-5
        && (id_img - id_scalar).abs() <= 1e-12
        && (id_both - 2.0 * id_scalar).abs() <= 1e-12;
    gate(
        ok,
        format!("ITC {itc:.5} (scalar {itc_scalar:.5}), ID image side {id_img:.5} (scalar {id_scalar:.5})"),
    )
}

struct SeedRuns {
    baseline: f64,
    boosted: f64,
    promo_boosted: Option<f64>,
    promo_control: Option<f64>,
}

fn directional_runs() -> Vec<SeedRuns> {
    SEEDS
        .iter()
        .map(|&seed| {
            let data = reference_data(seed);
            let base = run(&reference_train(seed).with_preset(LossPreset::Clip), &data, None).unwrap();
            let boosted_cfg = reference_train(seed).with_preset(LossPreset::ClipBoosted);
            let boosted = run(&boosted_cfg, &data, None).unwrap();
            let mut control_cfg = boosted_cfg.clone();
            control_cfg.boost.exp_alpha = 1.0;
            let control = run(&control_cfg, &data, None).unwrap();
            SeedRuns {
                baseline: base.test.r1,
                boosted: boosted.test.r1,
                promo_boosted: promotion_rate(&boosted.state.refreshes),
                promo_control: promotion_rate(&control.state.refreshes),
            }
        })
        .collect()
}

fn directional(runs: &[SeedRuns]) -> Outcome {
    let n = runs.len() as f64;
    let base = runs.iter().map(|r| r.baseline).sum::<f64>() / n;
    let boost = runs.iter().map(|r| r.boosted).sum::<f64>() / n;
    let wins = runs.iter().filter(|r| r.boosted >= r.baseline).count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", 100.0 * r.baseline, 100.0 * r.boosted))
        .collect();
    gate(
        boost >= base && wins >= 4,
        format!(
            "mean R@1 baseline {:.2} boosted {:.2}, boosted wins or ties {wins}/5 [{}]",
            100.0 * base,
            100.0 * boost,
            per_seed.join(" ")
        ),
    )
}

fn promotion(runs: &[SeedRuns]) -> Outcome {
    let higher = runs
        .iter()
        .filter(|r| matches!((r.promo_boosted, r.promo_control), (Some(b), Some(c)) if b > c))
        .count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{:.3}/{:.3}",
                r.promo_control.unwrap_or(f64::NAN),
                r.promo_boosted.unwrap_or(f64::NAN)
            )
        })
        .collect();
    gate(
        2 * higher > runs.len(),
        format!(
            "promoted fraction higher under boosting on {higher}/5 seeds (control/boosted: {})",
            per_seed.join(" ")
        ),
    )
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let sweeps = [
        (AblationAxis::K, vec![2.0, 3.0, 4.0, 5.0]),
        (AblationAxis::ExpAlpha, vec![1.0, 1.2, 1.6, 2.0]),
    ];
    let mut rows = Vec::new();
    let mut complete = true;
    for (axis, values) in sweeps {
        let spec = AblationSpec {
            axis,
            values: values.clone(),
            seeds: SEEDS.to_vec(),
            base: reference_train(1).with_preset(LossPreset::ClipBoosted),
            data: reference_data(1).train.config().unwrap().clone(),
        };
        let out = dir.path().join(axis.name());
        let r = report::run_ablation(&spec, Some(&out)).unwrap();
        complete &= report::missing_cells(&r, axis, &values, &SEEDS).is_empty();
        complete &= report::series(&r, axis).iter().all(|p| p.n_seeds == SEEDS.len());
        rows.extend(r);
    }
    report::write_report(&[], &rows, dir.path()).unwrap();
    let md = std::fs::read_to_string(dir.path().join(report::REPORT_FILE)).unwrap();
    complete &= dir.path().join("series_k.csv").exists() && dir.path().join("series_exp_alpha.csv").exists();
    let drops = report::k_drop_by_seed(&rows);
    let observed = drops.values().filter(|v| **v == Some(true)).count();
    complete &= md.matches("observed").count() >= SEEDS.len();
    Outcome {
        pass: complete,
        gated: false,
        detail: format!(
            "k and exp_alpha sweeps complete for {} seeds; drop beyond k=2 observed on {observed}/{} seeds",
            SEEDS.len(),
            drops.len()
        ),
    }
}

fn distractors() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let primary = reference_data(11);
    let foreign = generate(&SynthConfig {
        seed: 12,
        confusion_rate: 0.1,
        name: Some("foreign".into()),
        ..SynthConfig::default()
    })
    .unwrap();
    let (pa, pb) = (dir.path().join("primary"), dir.path().join("foreign"));
    primary.save(&pa).unwrap();
    foreign.save(&pb).unwrap();
    let primary = Corpus::load(&pa).unwrap();
    let foreign = Corpus::load(&pb).unwrap();

    let run_dir = dir.path().join("run");
    let cfg = TrainConfig {
        epochs: 20,
        ..reference_train(11).with_preset(LossPreset::ClipBoosted)
    };
    run(&cfg, &primary, Some(&run_dir)).unwrap();
    let (params, _) = checkpoint::load_params(&run_dir.join(CHECKPOINT_DIR)).unwrap();

    let base = encode_split(&params, &primary.test).unwrap();
    let galleries = [
        encode_distractor(&params, &foreign.test).unwrap(),
        encode_distractor(&params, &foreign.train).unwrap(),
    ];
    let before = per_query(&base).unwrap();
    let after = per_query(&with_distractors(&base, &galleries).unwrap()).unwrap();
    let ap_ok = before
        .iter()
        .zip(&after)
        .all(|(b, a)| a.average_precision <= b.average_precision);
    let m0 = evaluate(&base).unwrap();
    let m1 = evaluate_with_distractors(&base, &galleries).unwrap();
    let empty_ok = evaluate_with_distractors(&base, &[]).unwrap() == m0;
    let report = EvalReport::new(m1, &base, galleries.iter().map(|g| g.source.clone()).collect());
    let json_ok = serde_json::to_string(&report).is_ok();
    gate(
        ap_ok && empty_ok && json_ok && m1.r1 <= m0.r1,
        format!(
            "{} queries, gallery {} -> {}; R@1 {:.2} -> {:.2}, mAP {:.2} -> {:.2}; no AP increased",
            before.len(),
            base.gallery.nrows(),
            base.gallery.nrows() + galleries.iter().map(|g| g.embeddings.nrows()).sum::<usize>(),
            100.0 * m0.r1,
            100.0 * m1.r1,
            100.0 * m0.map,
            100.0 * m1.map
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = false;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let tag = match (o.pass, o.gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (soft)",
        };
        println!(
            "[{tag}] {n} {name}: {} ({:.1}s)",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        failed |= o.gated && !o.pass;
    };
    report(1, "reduction", &mut reduction);
    report(2, "gradient suite", &mut gradients);
    report(3, "mining oracle", &mut mining_oracle);
    report(4, "metric oracle", &mut metric_oracle);
    report(5, "hand values", &mut hand_values);
    let mut runs = Vec::new();
    report(6, "directional boost", &mut || {
        runs = directional_runs();
        directional(&runs)
    });
    report(7, "promotion", &mut || promotion(&runs));
    report(8, "ablation harness", &mut ablation);
    report(9, "distractors", &mut distractors);
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
