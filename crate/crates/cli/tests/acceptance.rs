//! Acceptance checks, one PASS/FAIL line per criterion. Training-based
//! criteria run at the desk configuration below; expect roughly 25 minutes
//! on one CPU core. This target reports rather than gates: a FAIL line stays
//! visible in the output, but the exit status is nonzero only when
//! `ACCEPTANCE_STRICT` is set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use update_cli::{cmd_curve, cmd_run, Config, RunOptions};
use update_core::dataset::{
    build_version_pair, default_updates, generate_toy_corpus, sample_splits, CurveCondition, GrammarConfig, Partition,
    Provenance, SplitSizes,
};
use update_core::eval::{aggregate, gap_closure, EvalReport, Score, Summary};
use update_core::model::{train, train_streams, HeadInit, MaskedExample, ParserConfig, ParserModel, TrainOptions, Vocab};
use update_core::parsetree::{delinearize, exact_match, linearize, parse_bracketed, serialize};
use update_core::strategies::Strategy;

/// Published averages per strategy: changed, unchanged, trivially unchanged (%).
const PUBLISHED_AVG: [(Strategy, [f64; 3]); 9] = [
    (Strategy::V1Only, [0.0, 71.7, 76.0]),
    (Strategy::V2Only, [53.8, 24.0, 77.6]),
    (Strategy::DirectMix, [3.1, 71.2, 75.4]),
    (Strategy::UpsampledMix, [3.4, 71.8, 76.4]),
    (Strategy::FineTune, [62.1, 39.6, 78.0]),
    (Strategy::MultiTask, [65.5, 65.5, 78.0]),
    (Strategy::SelectRemove, [51.4, 69.3, 76.3]),
    (Strategy::SelectIntentOnly, [68.3, 68.2, 78.0]),
    (Strategy::Oracle, [78.4, 70.0, 75.6]),
];

const SEEDS: [u64; 3] = [1, 2, 3];
const ORDERING_UPDATES: [&str; 2] = ["unsupported", "new_argument"];
const CURVE_UPDATES: [&str; 2] = ["unsupported", "related"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.desk = ParserConfig {
        model_dim: 32,
        encoder_ff_dim: 64,
        decoder_ff_dim: 64,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        batch_size: 32,
        train_steps: 1500,
        warmup_steps: 150,
        learning_rate: 3e-3,
        max_positions: 64,
        grad_clip: 1.0,
    };
    cfg.run.seeds = SEEDS.to_vec();
    cfg.curve.seeds = SEEDS.to_vec();
    cfg
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn arithmetic() -> Outcome {
    let reports: Vec<EvalReport> = PUBLISHED_AVG
        .iter()
        .map(|(s, acc)| EvalReport {
            update: "avg".into(),
            strategy: s.as_str().into(),
            seed: 1,
            scores: acc.map(|a| Score { numerator: (a * 10.0).round() as usize, denominator: 1000 }),
            predictions: BTreeMap::new(),
        })
        .collect();
    let summary = match aggregate(&reports) {
        Ok(s) => s,
        Err(e) => return outcome(false, e.to_string()),
    };
    let macro_of = |s: Strategy| 100.0 * summary.strategy(s.as_str()).unwrap().macro_average;
    let (v2, oracle, io) = (macro_of(Strategy::V2Only), macro_of(Strategy::Oracle), macro_of(Strategy::SelectIntentOnly));
    let gap = summary.gap_closures.iter().find(|g| g.method == "select_intent_only");
    let direct = gap_closure(51.8, 71.5, 74.7).unwrap_or(f64::NAN);
    let ok = (v2 - 51.8).abs() < 0.05
        && (oracle - 74.7).abs() < 0.05
        && (io - 71.5).abs() < 0.05
        && gap.is_some_and(|g| g.baseline == "v2_only" && (g.percent - 86.0).abs() <= 0.5)
        && (direct - 86.0).abs() <= 0.5;
    outcome(
        ok,
        format!(
            "macro v2_only {v2:.2}, oracle {oracle:.2}, select_intent_only {io:.2}; gap closure {:.2}% from the grid, {direct:.2}% from (51.8, 71.5, 74.7)",
            gap.map_or(f64::NAN, |g| g.percent)
        ),
    )
}

fn conflict_direction() -> Outcome {
    let mut cfg = desk_config();
    cfg.curve.updates = CURVE_UPDATES.iter().map(|s| s.to_string()).collect();
    let out = match cmd_curve(&cfg, &fresh_dir("curve")) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for size in out.table.sizes() {
        let c = 100.0 * out.table.average(size, CurveCondition::Conflicting).unwrap();
        let r = 100.0 * out.table.average(size, CurveCondition::OracleRemoved).unwrap();
        let gap = r - c;
        ok &= gap > 0.0 && (size != 25 || gap >= 10.0);
        parts.push(format!("size {size}: {c:.1} vs {r:.1} (gap {gap:+.1})"));
    }
    ok &= out.table.sizes() == [25, 50, 100, 200];
    outcome(
        ok,
        format!(
            "changed accuracy, conflicting vs removed, {} updates x {} seeds; {}; paper scale is not reproducible with a from-scratch encoder",
            CURVE_UPDATES.len(),
            SEEDS.len(),
            parts.join("; ")
        ),
    )
}

fn strategy_grid() -> Result<(Summary, Vec<f64>), String> {
    let mut cfg = desk_config();
    cfg.run.updates = ORDERING_UPDATES.iter().map(|s| s.to_string()).collect();
    let out = cmd_run(&cfg, &fresh_dir("grid"), &RunOptions::default()).map_err(|e| e.to_string())?;
    let mut clf = BTreeMap::new();
    for (key, cell) in &out.manifest.cells {
        if let Some(a) = cell.classifier_accuracy {
            // one classifier per (update, seed), shared by both selection strategies
            let mut it = key.split('/');
            let (u, _, seed) = (it.next().unwrap(), it.next(), it.next().unwrap());
            clf.insert(format!("{u}/{seed}"), a);
        }
    }
    Ok((out.summary, clf.into_values().collect()))
}

fn ordering(summary: &Summary) -> Outcome {
    let m = |s: Strategy, p: Partition| 100.0 * summary.strategy(s.as_str()).map_or(f64::NAN, |x| x.means[p as usize]);
    let changed = |s| m(s, Partition::Changed);
    let unchanged = |s| m(s, Partition::Unchanged);
    let dm = changed(Strategy::DirectMix);
    let mut ok = dm <= 15.0;
    let mut parts = vec![format!("direct_mix changed {dm:.1}")];
    for s in [Strategy::FineTune, Strategy::MultiTask, Strategy::SelectIntentOnly] {
        ok &= changed(s) - dm >= 25.0;
        parts.push(format!("{s} changed {:.1}", changed(s)));
    }
    let (io, rm) = (changed(Strategy::SelectIntentOnly), changed(Strategy::SelectRemove));
    ok &= io >= rm;
    parts.push(format!("select_remove changed {rm:.1}"));
    let v1 = unchanged(Strategy::V1Only);
    let mut far = Vec::new();
    for s in Strategy::ALL {
        if matches!(s, Strategy::V1Only | Strategy::V2Only | Strategy::FineTune) {
            continue;
        }
        if (unchanged(s) - v1).abs() > 10.0 || unchanged(s).is_nan() {
            far.push(format!("{s} {:.1}", unchanged(s)));
        }
    }
    ok &= far.is_empty();
    parts.push(format!(
        "unchanged v1_only {v1:.1}, others within 10: {}",
        if far.is_empty() { "yes".to_string() } else { far.join(", ") }
    ));
    outcome(ok, format!("{} ({} updates x {} seeds)", parts.join("; "), ORDERING_UPDATES.len(), SEEDS.len()))
}

fn classifier(acc: &[f64]) -> Outcome {
    let min = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
    outcome(
        acc.len() == ORDERING_UPDATES.len() * SEEDS.len() && min >= 0.9,
        format!("held-out accuracy over {} classifiers: mean {:.1}%, min {:.1}%", acc.len(), 100.0 * mean, 100.0 * min),
    )
}

/// Partition each standard update should assign, from the generating intent
/// and template alone.
fn generator_partition(update: &str, p: &Provenance, grammar: &GrammarConfig) -> Partition {
    let template = &grammar.intents.iter().find(|g| g.name == p.intent).unwrap().templates[p.template];
    let i = p.intent.as_str();
    let (changed, unchanged) = match update {
        "unsupported" => (i == "IN:GET_ESTIMATED_ARRIVAL", i == "IN:UNSUPPORTED_NAVIGATION"),
        "related_rename" => (i == "IN:GET_ESTIMATED_DEPARTURE", i == "IN:GET_ESTIMATED_ARRIVAL"),
        "new_argument" => {
            let affected = i == "IN:GET_DIRECTIONS" || i == "IN:GET_ESTIMATED_DURATION";
            (affected && template.contains("{SL:OBSTRUCTION}"), affected && !template.contains("{SL:OBSTRUCTION}"))
        }
        "related" => (i == "IN:GET_INFO_TRAFFIC", i == "IN:GET_INFO_ROAD_CONDITION"),
        _ => (i == "IN:GET_ESTIMATED_DURATION", i == "IN:GET_DISTANCE" || i == "IN:UNSUPPORTED_NAVIGATION"),
    };
    match (changed, unchanged) {
        (true, _) => Partition::Changed,
        (false, true) => Partition::Unchanged,
        _ => Partition::TriviallyUnchanged,
    }
}

fn properties() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let grammar = GrammarConfig { size: 10_000, ..GrammarConfig::default() };
    let corpus = generate_toy_corpus(&grammar, 7).unwrap();
    let trees = corpus.examples.len();
    check(
        "serialize/parse round trip",
        corpus.examples.iter().all(|e| {
            let t = e.v2_label.as_ref().unwrap();
            parse_bracketed(&serialize(t, &e.tokens), &e.tokens).ok().as_ref() == Some(t)
        }),
    );
    check(
        "linearize/delinearize round trip",
        corpus.examples.iter().all(|e| {
            let t = e.v2_label.as_ref().unwrap();
            delinearize(&linearize(t), &e.tokens).ok().as_ref() == Some(t)
        }),
    );

    let mut pairs = 0;
    let mut labelled = 0;
    for spec in default_updates() {
        let data = build_version_pair(&corpus.examples, &spec).unwrap();
        for (e, p) in data.examples.iter().zip(&corpus.provenance) {
            let (v1, v2) = (e.v1_label.as_ref().unwrap(), e.v2_label.as_ref().unwrap());
            let strings = serialize(v1, &e.tokens) == serialize(v2, &e.tokens);
            check("exact_match equals canonical-string equality", exact_match(v1, v2) == strings);
            check("partition matches generator oracle", e.partition == Some(generator_partition(&spec.name, p, &grammar)));
            pairs += 1;
            labelled += 1;
        }
        let a = sample_splits(&data, SplitSizes::default(), 3).unwrap();
        let b = sample_splits(&data, SplitSizes::default(), 3).unwrap();
        check("split determinism", a == b);
        let mut ids = BTreeSet::new();
        let sets = [&a.v1_train, &a.v2_train, &a.test_changed, &a.test_unchanged, &a.test_triv];
        let total: usize = sets.iter().map(|s| s.len()).sum();
        for s in sets {
            ids.extend(s.iter().map(|e| e.id.clone()));
        }
        check("split disjointness", ids.len() == total);
    }

    let (grad_ok, worst) = gradient_checks(&corpus.examples[..6]);
    check("masked gradients zero and central differences", grad_ok);
    check("multi-task head isolation", head_isolation(&corpus.examples[..8]));

    outcome(
        failures.is_empty(),
        format!(
            "{trees} toy trees round-tripped; {pairs} exact-match pairs; {labelled} partition labels vs generator; gradient worst relative error {worst:.1e}; {}",
            if failures.is_empty() { "no failures".to_string() } else { format!("failed: {}", failures.join(", ")) }
        ),
    )
}

fn small_model(data: &[MaskedExample]) -> ParserModel {
    let cfg = ParserConfig {
        model_dim: 8,
        encoder_ff_dim: 16,
        decoder_ff_dim: 16,
        encoder_layers: 1,
        batch_size: 4,
        train_steps: 10,
        warmup_steps: 2,
        learning_rate: 1e-2,
        max_positions: 64,
        grad_clip: 0.0,
        ..ParserConfig::default()
    };
    let examples: Vec<_> = data
        .iter()
        .map(|m| update_core::dataset::Example::with_v2(m.id.clone(), m.tokens.clone(), m.target.clone()))
        .collect();
    ParserModel::new(cfg, Vocab::from_examples(&examples), "main", 5).unwrap()
}

fn masked(examples: &[update_core::dataset::Example]) -> Vec<MaskedExample> {
    examples.iter().map(|e| MaskedExample::full(e.id.clone(), e.tokens.clone(), e.v2_label.clone().unwrap())).collect()
}

fn gradient_checks(examples: &[update_core::dataset::Example]) -> (bool, f64) {
    let data = masked(examples);
    let mut m = small_model(&data);
    let opts = TrainOptions { steps: 3, batch_size: 4, learning_rate: 1e-2, warmup_steps: 0, grad_clip: 0.0, seed: 1 };
    train(&mut m, &data, "main", &opts).unwrap();

    let mut batch = data.clone();
    batch[0] = MaskedExample::intent_only(batch[0].id.clone(), batch[0].tokens.clone(), batch[0].target.clone());
    let g = m.loss_and_gradients(&batch, "main").unwrap();
    let mask: Vec<bool> = batch.iter().flat_map(|e| e.loss_mask.iter().copied()).collect();
    let mut ok = g.logits.rows().into_iter().zip(&mask).all(|(row, &on)| on || row.iter().all(|&x| x == 0.0));

    let g = m.loss_and_gradients(&data[..2], "main").unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..m.params().len() {
        let (rows, cols) = m.params().value_at(i).dim();
        for idx in (0..rows * cols).step_by(((rows * cols) / 4).max(1)) {
            let (r, c) = (idx / cols, idx % cols);
            let orig = m.params().value_at(i)[[r, c]];
            m.params_mut().value_at_mut(i)[[r, c]] = orig + h;
            let lp = m.loss(&data[..2], "main").unwrap();
            m.params_mut().value_at_mut(i)[[r, c]] = orig - h;
            let lm = m.loss(&data[..2], "main").unwrap();
            m.params_mut().value_at_mut(i)[[r, c]] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.params[i].as_ref().map_or(0.0, |gm| gm[[r, c]]);
            let scale = numeric.abs().max(analytic.abs());
            if scale > 1e-6 {
                worst = worst.max((numeric - analytic).abs() / scale);
            } else {
                ok &= (numeric - analytic).abs() < 1e-8;
            }
        }
    }
    (ok && worst <= 1e-4, worst)
}

fn head_isolation(examples: &[update_core::dataset::Example]) -> bool {
    let data = masked(examples);
    let mut m = small_model(&data);
    m.add_head("v1", HeadInit::Fresh { seed: 2 }).unwrap();
    m.add_head("v2", HeadInit::Fresh { seed: 3 }).unwrap();
    let v2: Vec<_> = m.params().with_prefix("head.v2.").map(|(n, v)| (n.to_string(), v.clone())).collect();
    let opts = TrainOptions { steps: 3, batch_size: 4, learning_rate: 1e-2, warmup_steps: 0, grad_clip: 1.0, seed: 0 };
    train_streams(&mut m, &[(&data[..], "v1")], &opts).unwrap();
    v2.iter().all(|(n, v)| {
        let now = m.params().get(n).unwrap();
        now.iter().zip(v.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

fn tree_bytes(dir: &Path, sub: &str) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(dir.join(sub))
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().display().to_string(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let mut cfg = desk_config();
    cfg.run.updates = vec!["multiple_sources".into()];
    cfg.run.seeds = vec![4];
    cfg.run.strategies = vec![Strategy::DirectMix, Strategy::MultiTask, Strategy::SelectIntentOnly];
    let mut runs = Vec::new();
    for name in ["determinism-a", "determinism-b"] {
        let dir = fresh_dir(name);
        if let Err(e) = cmd_run(&cfg, &dir, &RunOptions::default()) {
            return outcome(false, e.to_string());
        }
        let mut files = tree_bytes(&dir, "reports");
        files.extend(tree_bytes(&dir, "predictions"));
        files.insert("summary.json".into(), std::fs::read(dir.join("summary.json")).unwrap());
        runs.push(files);
    }
    let same = runs[0] == runs[1];
    outcome(same && runs[0].len() == 7, format!("{} files compared across two full runs; identical: {same}", runs[0].len()))
}

fn main() -> ExitCode {
    let mut lines: Vec<(String, Outcome)> = Vec::new();
    let mut timed = |label: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        eprintln!("  [{label} finished in {:.0?}]", t.elapsed());
        lines.push((label.to_string(), o));
    };

    timed("1 arithmetic reproduction", &mut arithmetic);
    timed("2 conflict-effect direction", &mut conflict_direction);
    let grid = strategy_grid();
    match &grid {
        Ok((summary, acc)) => {
            let (s, a) = (summary.clone(), acc.clone());
            timed("3 strategy ordering", &mut || ordering(&s));
            timed("4 classifier quality", &mut || classifier(&a));
        }
        Err(e) => {
            let e = e.clone();
            timed("3 strategy ordering", &mut || outcome(false, e.clone()));
            timed("4 classifier quality", &mut || outcome(false, e.clone()));
        }
    }
    timed("5 property suites", &mut properties);
    timed("6 determinism", &mut determinism);

    println!();
    for (label, o) in &lines {
        println!("{} criterion {label}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("SKIP criterion 5 (optional) published-corpus proportions: the real TOP corpus is not bundled");
    let red: Vec<&str> = lines.iter().filter(|(_, o)| !o.pass).map(|(l, _)| l.as_str()).collect();
    println!("acceptance: {} of {} criteria pass", lines.len() - red.len(), lines.len());
    if !red.is_empty() {
        println!("red: {}", red.join("; "));
    }
    if red.is_empty() || std::env::var_os("ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
