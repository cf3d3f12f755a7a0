//! Acceptance suite. Prints one PASS/FAIL line per criterion; exits
//! nonzero on failure only when `ACCEPTANCE_STRICT=1`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpgnn::baselines::{dsatur, BRUTE_FORCE_LIMIT};
use mpgnn::bench::{per_graph_config, run_bench, BenchConfig, BenchReport, Variant};
use mpgnn::gnn::{Architecture, EdgeIndex, GnnModel};
use mpgnn::instance::{
    export_dimacs, generate_corpus, generate_planted, parse_coloring, parse_dimacs, parse_instance,
    write_coloring, write_corpus, write_instance, CorpusSpec, Instance,
};
use mpgnn::losses::{
    loss_balance_js, loss_entropy, loss_pairwise, LossConfig, LossContext, LossTerm,
};
use mpgnn::nn::{Checkpoint, Matrix, Tape};
use mpgnn::refine::{full_pipeline, sa_balance, PipelineConfig, SaConfig};
use mpgnn::rng::derive_seed;
use mpgnn::train::{TrainConfig, Trainer};
use mpgnn::verify::{connected_graphs, oracle_check, random_graph, random_suite, OracleReport};
use mpgnn::{balance_stats, conflict_count, Coloring, ConflictGraph, SoftAssignment};

const SEED: u64 = 42;
const EPOCHS: usize = 500;
const SOLVE_BUDGET_S: f64 = 600.0;
const TRAIN_BUDGET_S: f64 = 1800.0;

type Verdict = (bool, String);

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
}

fn corpus() -> Vec<(String, ConflictGraph)> {
    let (_, items) = generate_corpus(&CorpusSpec::default()).unwrap();
    items
        .into_iter()
        .map(|i| (i.name, i.instance.graph))
        .collect()
}

fn fresh_model() -> GnnModel {
    GnnModel::new(Architecture::new(3), derive_seed(SEED, "model-init", 0)).unwrap()
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: SEED,
        ..TrainConfig::default()
    }
}

fn train_on(graphs: &[ConflictGraph], epochs: usize) -> (GnnModel, f64) {
    let mut model = fresh_model();
    let start = Instant::now();
    pool(1).install(|| {
        Trainer::new(&mut model, LossConfig::default(), train_config(epochs))
            .unwrap()
            .run(graphs)
            .unwrap()
    });
    (model, start.elapsed().as_secs_f64())
}

fn aggregate(r: &BenchReport, v: Variant) -> &mpgnn::bench::Aggregate {
    r.aggregates.iter().find(|a| a.variant == v).unwrap()
}

fn no_timings() -> PipelineConfig {
    PipelineConfig {
        record_timings: false,
        ..PipelineConfig::default()
    }
}

fn pipeline_completeness(report: &BenchReport, seconds: f64) -> Verdict {
    let full = aggregate(report, Variant::FullSa);
    let inf = aggregate(report, Variant::Inference);
    let ok = full.solve_pct >= 99.0 && inf.solve_pct < full.solve_pct && seconds <= SOLVE_BUDGET_S;
    (
        ok,
        format!(
            "full pipeline {:.1}% vs inference-only {:.1}%, {seconds:.1}s on 4 threads",
            full.solve_pct, inf.solve_pct
        ),
    )
}

fn pass_trend(report: &BenchReport) -> Verdict {
    let at = |p| {
        report
            .sweep
            .iter()
            .find(|s| s.passes == p)
            .unwrap()
            .solve_pct
    };
    let (one, ten) = (at(1), at(10));
    (
        ten - one >= 10.0,
        format!("1 pass {one:.1}%, 10 passes {ten:.1}%"),
    )
}

fn balance_dominance(report: &BenchReport) -> Verdict {
    let sa = aggregate(report, Variant::FullSa).mean_max_spread;
    let plain = aggregate(report, Variant::Full).mean_max_spread;
    let ds = aggregate(report, Variant::Dsatur).mean_max_spread;
    (
        sa <= plain && sa <= ds,
        format!("mean max_spread: +SA {sa:.3}, no SA {plain:.3}, DSATUR {ds:.3}"),
    )
}

fn sa_safety() -> Verdict {
    let mut violations = 0;
    let mut improved = 0;
    for i in 0..1000u64 {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(SEED, "accept-sa", i));
        let n = r.gen_range(3..=80);
        let k = r.gen_range(2..=5).min(n);
        let density = r.gen_range(0.05..0.5);
        let (g, witness) = generate_planted(n, k, density, r.gen()).unwrap();
        let start = if i % 2 == 0 {
            witness
        } else {
            match dsatur(&g, k).unwrap() {
                d if d.conflicts_at_k == 0 => d.coloring,
                _ => witness,
            }
        };
        let before = balance_stats(&g, &start).unwrap().max_spread;
        let cfg = SaConfig {
            iterations: Some(r.gen_range(1..=4 * n)),
            seed: r.gen(),
            ..SaConfig::default()
        };
        let out = sa_balance(&g, &start, &cfg).unwrap();
        let after = balance_stats(&g, &out).unwrap().max_spread;
        if conflict_count(&g, &out).unwrap() != 0 || after > before {
            violations += 1;
        }
        improved += (after < before) as usize;
    }
    (
        violations == 0,
        format!("1000 inputs, {violations} violations, {improved} improved"),
    )
}

fn oracle_equivalence(model: &GnnModel) -> Verdict {
    const COUNTS: [usize; 7] = [1, 1, 2, 6, 21, 112, 853];
    let mut total = OracleReport::default();
    let mut counts_ok = true;
    let cfg = no_timings();
    for (n, &expect) in (1..=7).zip(&COUNTS) {
        let graphs = connected_graphs(n, 3);
        counts_ok &= graphs.len() == expect;
        total.merge(oracle_check(&graphs, &format!("connected{n}"), Some(model), &cfg).unwrap());
    }
    let random = random_suite(500, 10.min(BRUTE_FORCE_LIMIT), 3, SEED);
    total.merge(oracle_check(&random, "random", Some(model), &cfg).unwrap());
    let mut detail = format!(
        "{} graphs ({} colorable), {} verdict mismatches, {} bound violations, {} unsound",
        total.graphs,
        total.colorable,
        total.verdict_mismatches.len(),
        total.bound_violations.len(),
        total.unsound.len()
    );
    if !counts_ok {
        detail.push_str("; connected-graph counts differ from 1,1,2,6,21,112,853");
    }
    (counts_ok && total.passed(), detail)
}

fn small_arch() -> Architecture {
    Architecture {
        k: 3,
        d_embed: 6,
        attention_hidden: 5,
        update_hidden: 8,
        layers: mpgnn::gnn::LAYER_COUNT,
    }
}

fn relative_error(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4)
}

fn gradient_checks() -> Verdict {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut failed = 0usize;
    for i in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(SEED, "accept-fd", i));
        let n = r.gen_range(2..=6);
        let mut g = random_graph(n, r.gen_range(0.3..0.9), 3, r.gen());
        let anchored = r.gen_range(0..n);
        g = g.with_anchors([(anchored, r.gen_range(0..3))]).unwrap();
        let mut model = GnnModel::new(small_arch(), r.gen()).unwrap();
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            for x in model.params_mut().value_mut(id).data_mut() {
                *x += r.gen_range(-0.3..0.3);
            }
        }
        let ctx = LossContext::new(&g, 0.3);
        let f1 = {
            let mut m = Matrix::zeros(n, 3);
            for v in 0..n {
                let w: Vec<f64> = (0..3).map(|_| r.gen_range(0.05..1.0)).collect();
                let z: f64 = w.iter().sum();
                for c in 0..3 {
                    m[(v, c)] = w[c] / z;
                }
            }
            SoftAssignment::new(m).unwrap()
        };
        let edges = EdgeIndex::new(&g);
        let loss_at = |m: &GnnModel, t: LossTerm| {
            let out = m.model_forward(&g, &f1).unwrap();
            ctx.term(t, out.probs(), 1.0, None)
        };
        for t in LossTerm::ALL {
            // analytic gradient of the term with respect to its input rows
            let mut probe = model.clone();
            let mut tape = Tape::new();
            let x = tape.input(f1.probs().clone());
            let out = probe.forward_on_tape(&mut tape, &edges, x).unwrap();
            let p = tape.value(out).clone();
            let mut seed = Matrix::zeros(n, 3);
            ctx.term(t, &p, 1.0, Some(&mut seed));
            for v in 0..n {
                for c in 0..3 {
                    let (mut hi, mut lo) = (p.clone(), p.clone());
                    hi[(v, c)] += h;
                    lo[(v, c)] -= h;
                    let fd =
                        (ctx.term(t, &hi, 1.0, None) - ctx.term(t, &lo, 1.0, None)) / (2.0 * h);
                    let e = relative_error(seed[(v, c)], fd);
                    worst = worst.max(e);
                    checked += 1;
                    failed += (e >= 1e-4) as usize;
                }
            }
            // and through the whole network to every parameter
            probe.params_mut().zero_grads();
            tape.backward_with(out, seed, probe.params_mut()).unwrap();
            let ids: Vec<_> = probe.params().ids().collect();
            for id in ids {
                let (rows, cols) = probe.params().value(id).shape();
                for a in 0..rows {
                    for b in 0..cols {
                        let analytic = probe.params().grad(id)[(a, b)];
                        let mut m = model.clone();
                        m.params_mut().value_mut(id)[(a, b)] += h;
                        let up = loss_at(&m, t);
                        m.params_mut().value_mut(id)[(a, b)] -= 2.0 * h;
                        let down = loss_at(&m, t);
                        let e = relative_error(analytic, (up - down) / (2.0 * h));
                        worst = worst.max(e);
                        checked += 1;
                        failed += (e >= 1e-4) as usize;
                    }
                }
            }
        }
    }
    (
        failed == 0,
        format!("{checked} components over 50 instances and 7 terms, {failed} above 1e-4, worst {worst:.2e}"),
    )
}

fn loss_identities() -> Verdict {
    let mut bad = Vec::new();
    for i in 0..1000u64 {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(SEED, "accept-loss", i));
        let n = r.gen_range(1..=40);
        let k = r.gen_range(2..=5);
        let g = random_graph(n, r.gen_range(0.0..1.0), k, r.gen());
        let c = Coloring::new((0..n).map(|_| r.gen_range(0..k)).collect());
        let s = SoftAssignment::one_hot(&c, k);
        if loss_pairwise(&g, &s) != conflict_count(&g, &c).unwrap() as f64 {
            bad.push(format!("pairwise #{i}"));
        }
        if loss_entropy(&s).abs() > 1e-9 {
            bad.push(format!("one-hot entropy #{i}"));
        }
        let u = SoftAssignment::uniform(n, k);
        if (loss_entropy(&u) - (k as f64).ln()).abs() > 1e-9 {
            bad.push(format!("uniform entropy #{i}"));
        }
        // rows cycled through every rotation average to exactly uniform
        let row: Vec<f64> = {
            let w: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z).collect()
        };
        let reps = r.gen_range(1..=6);
        let mut m = Matrix::zeros(reps * k, k);
        for rep in 0..reps {
            for shift in 0..k {
                for col in 0..k {
                    m[(rep * k + shift, col)] = row[(col + shift) % k];
                }
            }
        }
        if loss_balance_js(&SoftAssignment::new(m).unwrap()).abs() > 1e-9 {
            bad.push(format!("balance_js #{i}"));
        }
    }
    let detail = if bad.is_empty() {
        "1000 pairs, all identities hold".to_string()
    } else {
        format!("{} failures, first: {}", bad.len(), bad[0])
    };
    (bad.is_empty(), detail)
}

fn files_identical(a: &std::path::Path, b: &std::path::Path) -> bool {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let count_b = std::fs::read_dir(b).unwrap().count();
    names.len() == count_b
        && names
            .iter()
            .all(|n| std::fs::read(a.join(n)).ok() == std::fs::read(b.join(n)).ok())
}

fn determinism_and_round_trips(graphs: &[(String, ConflictGraph)], model: &GnnModel) -> Verdict {
    let mut problems = Vec::new();

    let tmp = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let (manifest, items) = generate_corpus(&CorpusSpec::default()).unwrap();
        write_corpus(&tmp.path().join(sub), &manifest, &items).unwrap();
    }
    if !files_identical(&tmp.path().join("a"), &tmp.path().join("b")) {
        problems.push("corpus bytes differ".to_string());
    }

    let subset: Vec<ConflictGraph> = graphs.iter().take(20).map(|(_, g)| g.clone()).collect();
    let ck = || {
        let (m, _) = train_on(&subset, 3);
        serde_json::to_string(&m.to_checkpoint(serde_json::json!({}))).unwrap()
    };
    let first = ck();
    if first != ck() {
        problems.push("checkpoint bytes differ".into());
    }
    let restored: Checkpoint = serde_json::from_str(&first).unwrap();
    let back = GnnModel::from_checkpoint(&restored).unwrap();
    if serde_json::to_string(&back.to_checkpoint(serde_json::json!({}))).unwrap() != first {
        problems.push("checkpoint does not round-trip".into());
    }

    let reports = |threads: usize| -> String {
        pool(threads).install(|| {
            let cfg = BenchConfig {
                variants: vec![Variant::Dsatur, Variant::FullSa],
                pipeline: no_timings(),
                sweep_passes: vec![1],
                seed: SEED,
            };
            let bench = run_bench(&graphs[..30], &[("m".into(), model)], &cfg).unwrap();
            let solos: Vec<_> = graphs[..10]
                .iter()
                .enumerate()
                .map(|(i, (_, g))| {
                    full_pipeline(g, model, &per_graph_config(&no_timings(), SEED, i)).unwrap()
                })
                .collect();
            serde_json::to_string(&(bench, solos)).unwrap()
        })
    };
    let r4 = reports(4);
    if r4 != reports(4) || r4 != reports(1) {
        problems.push("reports differ between runs".into());
    }

    let mut io_failures = 0;
    for i in 0..1000u64 {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(SEED, "accept-io", i));
        let n = r.gen_range(1..=60);
        let k = r.gen_range(2..=6);
        let mut g = random_graph(n, r.gen_range(0.0..0.7), k, r.gen());
        let mut anchors = Vec::new();
        for v in 0..n {
            if r.gen_bool(0.1) {
                anchors.push((v, r.gen_range(0..k)));
            }
        }
        let dimacs_ok = parse_dimacs(&export_dimacs(&g), k).ok().as_ref() == Some(&g);
        g = g.with_anchors(anchors).unwrap();
        let inst = Instance {
            graph: g,
            planted_chromatic_number: r.gen_bool(0.5).then(|| r.gen_range(1..=k)),
        };
        let native_ok = parse_instance(&write_instance(&inst)).ok().as_ref() == Some(&inst);
        let c = Coloring::new((0..n).map(|_| r.gen_range(0..k)).collect());
        let coloring_ok = parse_coloring(&write_coloring(&c), n).ok().as_ref() == Some(&c);
        io_failures += !(dimacs_ok && native_ok && coloring_ok) as usize;
    }
    if io_failures > 0 {
        problems.push(format!(
            "{io_failures} of 1000 instances fail to round-trip"
        ));
    }

    let detail = if problems.is_empty() {
        "corpus, checkpoint and reports byte-identical; 1000 instances round-trip".to_string()
    } else {
        problems.join("; ")
    };
    (problems.is_empty(), detail)
}

fn report(id: usize, name: &str, (ok, detail): Verdict, failures: &mut usize) {
    println!(
        "{} [{id}] {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    *failures += !ok as usize;
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failures = 0;
    let epochs = std::env::var("ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(EPOCHS);
    let graphs = corpus();
    let plain: Vec<ConflictGraph> = graphs.iter().map(|(_, g)| g.clone()).collect();

    eprintln!(
        "training {epochs} epochs on {} graphs (single thread)...",
        plain.len()
    );
    let (model, train_s) = train_on(&plain, epochs);
    let models = [("model".to_string(), &model)];

    let start = Instant::now();
    let full = pool(4).install(|| {
        let cfg = BenchConfig {
            variants: vec![Variant::FullSa],
            pipeline: no_timings(),
            sweep_passes: Vec::new(),
            seed: SEED,
        };
        run_bench(&graphs, &models, &cfg).unwrap()
    });
    let solve_s = start.elapsed().as_secs_f64();
    let rest = pool(4).install(|| {
        let cfg = BenchConfig {
            variants: vec![Variant::Dsatur, Variant::Inference, Variant::Full],
            pipeline: no_timings(),
            sweep_passes: vec![1, 10],
            seed: SEED,
        };
        run_bench(&graphs, &models, &cfg).unwrap()
    });
    let mut bench = rest;
    bench.aggregates.extend(full.aggregates);

    report(
        1,
        "pipeline completeness",
        pipeline_completeness(&bench, solve_s),
        &mut failures,
    );
    report(2, "forward-pass trend", pass_trend(&bench), &mut failures);
    report(
        3,
        "balance dominance",
        balance_dominance(&bench),
        &mut failures,
    );
    report(4, "annealing safety", sa_safety(), &mut failures);
    report(
        5,
        "oracle equivalence",
        oracle_equivalence(&model),
        &mut failures,
    );
    report(6, "gradient correctness", gradient_checks(), &mut failures);
    report(7, "loss identities", loss_identities(), &mut failures);
    report(
        8,
        "determinism and round trips",
        determinism_and_round_trips(&graphs, &model),
        &mut failures,
    );
    report(
        9,
        "training tractability",
        (
            epochs == EPOCHS && train_s <= TRAIN_BUDGET_S,
            format!("{epochs} epochs in {train_s:.0}s on one thread"),
        ),
        &mut failures,
    );
    println!("{} of 9 criteria passed", 9 - failures);
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
