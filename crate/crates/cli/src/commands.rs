use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use update_core::dataset::{
    build_version_pair, generate_toy_corpus, load_corpus, load_versioned, sample_curve_split, sample_splits, save_corpus,
    save_provenance, save_versioned, CurveCondition, DatasetError, UpdateSpec, VersionedDataset,
};
use update_core::eval::{
    aggregate, curve_cell, records_from_jsonl, records_to_jsonl, render_summary, render_update_table, report_records,
    reports_from_records, CurveRow, CurveTable, EvalError, Summary,
};
use update_core::strategies::{run_strategies, CellOutcome, Strategy};

use crate::config::{referenced_intents, Config};
use crate::manifest::{cell_key, now_unix, CellEntry, RunManifest};
use crate::pool::run_pool;
use crate::{io_err, plot, CliError};

const DATA_DIR: &str = "data";
const GENERATE_MANIFEST: &str = "generate_manifest.json";
const RUN_MANIFEST: &str = "run_manifest.json";
const CURVE_MANIFEST: &str = "curve_manifest.json";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn corpus_source(cfg: &Config) -> String {
    match &cfg.corpus.path {
        Some(p) => format!("file:{}", p.display()),
        None => format!("toy:seed={}", cfg.corpus.seed),
    }
}

fn versioned_path(out: &Path, update: &str) -> PathBuf {
    out.join(DATA_DIR).join(format!("{update}.tsv"))
}

/// Every intent an update names must exist in the grammar that generates
/// the corpus; otherwise its partitions would silently come out empty.
fn check_grammar_covers(cfg: &Config) -> Result<(), CliError> {
    cfg.corpus.grammar.validate()?;
    let known = cfg.corpus.grammar.intent_names();
    for spec in &cfg.updates {
        if let Some(missing) = referenced_intents(spec).into_iter().find(|i| !known.contains(i)) {
            return Err(DatasetError::DegenerateGrammar(format!(
                "update {} names intent {missing}, which the grammar does not define",
                spec.name
            ))
            .into());
        }
    }
    Ok(())
}

/// Builds (or loads) the corpus and writes one versioned dataset per update.
pub fn cmd_generate(cfg: &Config, out: &Path) -> Result<RunManifest, CliError> {
    let mut manifest = RunManifest::new("generate", cfg.experiment_hash(), corpus_source(cfg));
    manifest.updates = cfg.updates.clone();
    let corpus = match &cfg.corpus.path {
        Some(p) => load_corpus(p)?,
        None => {
            check_grammar_covers(cfg)?;
            let toy = generate_toy_corpus(&cfg.corpus.grammar, cfg.corpus.seed)?;
            let prov = out.join(DATA_DIR).join("provenance.tsv");
            std::fs::create_dir_all(out.join(DATA_DIR)).map_err(io_err(out))?;
            save_provenance(&toy.provenance, &prov)?;
            manifest.artifacts.insert(format!("{DATA_DIR}/provenance.tsv"));
            toy.examples
        }
    };
    std::fs::create_dir_all(out.join(DATA_DIR)).map_err(io_err(out))?;
    save_corpus(&corpus, out.join(DATA_DIR).join("corpus.tsv"))?;
    manifest.artifacts.insert(format!("{DATA_DIR}/corpus.tsv"));
    for spec in &cfg.updates {
        let data = build_version_pair(&corpus, spec)?;
        save_versioned(&data, versioned_path(out, &spec.name))?;
        manifest.artifacts.insert(format!("{DATA_DIR}/{}.tsv", spec.name));
    }
    write(&out.join("config.toml"), cfg.to_toml())?;
    manifest.artifacts.insert("config.toml".into());
    manifest.finished_unix = Some(now_unix());
    manifest.save(&out.join(GENERATE_MANIFEST))?;
    Ok(manifest)
}

/// Versioned data for `specs`, generating it first when any file is missing.
fn load_data(cfg: &Config, out: &Path, specs: &[&UpdateSpec]) -> Result<BTreeMap<String, VersionedDataset>, CliError> {
    let have = RunManifest::open(&out.join(GENERATE_MANIFEST), "generate", &cfg.experiment_hash(), &corpus_source(cfg))
        .map(|m| m.finished_unix.is_some())?;
    if !have || specs.iter().any(|s| !versioned_path(out, &s.name).exists()) {
        cmd_generate(cfg, out)?;
    }
    specs.iter().map(|s| Ok((s.name.clone(), load_versioned(versioned_path(out, &s.name), s)?))).collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop handing out work after this many (update, seed) units finish.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub summary: Summary,
    pub manifest: RunManifest,
}

struct Unit<'a> {
    spec: &'a UpdateSpec,
    seed: u64,
    strategies: Vec<Strategy>,
}

fn report_rel(update: &str, strategy: &str, seed: u64) -> String {
    format!("reports/{update}/{strategy}/seed-{seed}.jsonl")
}

fn predictions_rel(update: &str, strategy: &str, seed: u64) -> String {
    format!("predictions/{update}/{strategy}/seed-{seed}.json")
}

fn persist_cell(out: &Path, o: &CellOutcome) -> Result<CellEntry, CliError> {
    let r = &o.report;
    let report = report_rel(&r.update, &r.strategy, r.seed);
    let predictions = predictions_rel(&r.update, &r.strategy, r.seed);
    let preds = serde_json::to_string_pretty(&r.predictions).expect("predictions serialize");
    write(&out.join(&predictions), preds + "\n")?;
    // the report goes last: its presence marks the cell complete
    write(&out.join(&report), records_to_jsonl(&report_records(r))?)?;
    Ok(CellEntry { report, predictions: Some(predictions), classifier_accuracy: o.classifier_accuracy })
}

/// Runs the strategy × update × seed grid, skipping cells the manifest
/// already records, then writes the summary.
pub fn cmd_run(cfg: &Config, out: &Path, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let specs = cfg.run_updates();
    let datasets = load_data(cfg, out, &specs)?;
    let manifest_path = out.join(RUN_MANIFEST);
    let mut manifest = RunManifest::open(&manifest_path, "run", &cfg.experiment_hash(), &corpus_source(cfg))?;
    for s in &specs {
        if !manifest.updates.iter().any(|u| u.name == s.name) {
            manifest.updates.push((*s).clone());
        }
    }
    for s in &cfg.run.strategies {
        if !manifest.strategies.iter().any(|x| x == s.as_str()) {
            manifest.strategies.push(s.as_str().to_string());
        }
    }
    for s in &cfg.run.seeds {
        if !manifest.seeds.contains(s) {
            manifest.seeds.push(*s);
        }
    }
    manifest.finished_unix = None;

    let mut units = Vec::new();
    let mut skipped = Vec::new();
    let mut wanted = Vec::new();
    for spec in &specs {
        for &seed in &cfg.run.seeds {
            let mut todo = Vec::new();
            for &s in &cfg.run.strategies {
                let key = cell_key(&spec.name, s.as_str(), seed);
                if manifest.is_complete(&key, out) {
                    skipped.push(key.clone());
                } else {
                    todo.push(s);
                }
                wanted.push(key);
            }
            if !todo.is_empty() {
                units.push(Unit { spec, seed, strategies: todo });
            }
        }
    }
    manifest.save(&manifest_path)?;

    let model_cfg = cfg.model.active();
    let mut ran = Vec::new();
    let mut failures = Vec::new();
    let mut completed = 0usize;
    let mut persist_error = None;
    let work = |u: Unit| {
        let result = sample_splits(&datasets[&u.spec.name], cfg.splits, u.seed)
            .map_err(|e| e.to_string())
            .and_then(|b| run_strategies(&u.strategies, &b, model_cfg, &cfg.classifier, u.seed).map_err(|e| e.to_string()));
        (u.spec.name.clone(), u.seed, u.strategies, result)
    };
    run_pool(units, cfg.run.workers, work, |(update, seed, strategies, result)| {
        match result {
            Ok(outcomes) => {
                for o in &outcomes {
                    match persist_cell(out, o) {
                        Ok(entry) => {
                            let key = cell_key(&update, &o.report.strategy, seed);
                            if let Some(note) = &o.fallback {
                                manifest.fallback_notes.insert(format!("{update}/{}/{seed}: {note}", o.report.strategy));
                            }
                            manifest.cells.insert(key.clone(), entry);
                            ran.push(key);
                        }
                        Err(e) => persist_error = Some(e),
                    }
                }
            }
            Err(e) => {
                let names: Vec<&str> = strategies.iter().map(|s| s.as_str()).collect();
                failures.push(format!("{update} seed {seed} [{}]: {e}", names.join(",")));
            }
        }
        if let Err(e) = manifest.save(&manifest_path) {
            persist_error = Some(e);
        }
        completed += 1;
        persist_error.is_none() && opts.stop_after.is_none_or(|n| completed < n)
    });
    if let Some(e) = persist_error {
        return Err(e);
    }
    let missing: Vec<String> = wanted.iter().filter(|k| !manifest.is_complete(k, out)).cloned().collect();
    if !failures.is_empty() {
        return Err(CliError::Incomplete { failures, missing });
    }
    if !missing.is_empty() {
        return Err(CliError::Interrupted { completed });
    }

    let mut records = Vec::new();
    for key in &wanted {
        let rel = &manifest.cells[key].report;
        records.extend(records_from_jsonl(&read(&out.join(rel))?)?);
    }
    let summary = aggregate(&reports_from_records(&records)?)?;
    write_summary(out, &summary)?;
    for a in ["summary.txt", "summary.json", "update_table.txt"] {
        manifest.artifacts.insert(a.into());
    }
    manifest.finished_unix = Some(now_unix());
    manifest.save(&manifest_path)?;
    Ok(RunOutcome { ran, skipped, summary, manifest })
}

fn write_summary(out: &Path, summary: &Summary) -> Result<String, CliError> {
    let text = render_summary(summary);
    write(&out.join("summary.txt"), &text)?;
    write(&out.join("summary.json"), serde_json::to_string_pretty(summary).expect("summary serializes") + "\n")?;
    write(&out.join("update_table.txt"), render_update_table(summary))?;
    Ok(text)
}

/// Aggregates every report file under `out` and renders the summary table,
/// the per-update table and the gap-closure lines.
pub fn cmd_report(out: &Path) -> Result<String, CliError> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(out)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "jsonl"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut records = Vec::new();
    for f in &files {
        records.extend(records_from_jsonl(&read(f)?)?);
    }
    if records.is_empty() {
        return Err(CliError::NoReports(out.display().to_string()));
    }
    let summary = match aggregate(&reports_from_records(&records)?) {
        Err(EvalError::NoReports) => return Err(CliError::NoReports(out.display().to_string())),
        other => other?,
    };
    let text = write_summary(out, &summary)?;
    Ok(format!("{text}\n{}", render_update_table(&summary)))
}

#[derive(Debug, Clone)]
pub struct CurveOutcome {
    pub table: CurveTable,
    pub ran: usize,
    pub skipped: usize,
}

fn curve_rel(update: &str, condition: CurveCondition, size: usize, seed: u64) -> String {
    format!("curve/cells/{update}/{}/size-{size}-seed-{seed}.json", condition.as_str())
}

/// Conflict-effect sweep: direct-mix training with and without the stale
/// V1 examples, for each V2 size, update and seed.
pub fn cmd_curve(cfg: &Config, out: &Path) -> Result<CurveOutcome, CliError> {
    let specs = cfg.curve_updates();
    let datasets = load_data(cfg, out, &specs)?;
    let manifest_path = out.join(CURVE_MANIFEST);
    let mut manifest = RunManifest::open(&manifest_path, "curve", &cfg.experiment_hash(), &corpus_source(cfg))?;
    manifest.updates = specs.iter().map(|s| (*s).clone()).collect();
    manifest.strategies = vec![Strategy::DirectMix.as_str().to_string()];
    manifest.seeds = cfg.curve.seeds.clone();
    manifest.finished_unix = None;

    let max_size = *cfg.curve.sizes.iter().max().expect("validated non-empty");
    let mut todo = Vec::new();
    let mut all = Vec::new();
    for spec in &specs {
        for &size in &cfg.curve.sizes {
            for condition in CurveCondition::ALL {
                for &seed in &cfg.curve.seeds {
                    let rel = curve_rel(&spec.name, condition, size, seed);
                    if !manifest.is_complete(&rel, out) {
                        todo.push((spec.name.clone(), size, condition, seed, rel.clone()));
                    }
                    all.push((spec.name.clone(), size, condition, seed, rel));
                }
            }
        }
    }
    let skipped = all.len() - todo.len();
    let model_cfg = cfg.model.active();
    let work = |(update, size, condition, seed, rel): (String, usize, CurveCondition, u64, String)| {
        let acc = sample_curve_split(
            &datasets[&update],
            size,
            max_size,
            cfg.curve.conflicting,
            cfg.curve.test_per_partition,
            condition,
            seed,
        )
        .map_err(EvalError::from)
        .and_then(|b| curve_cell(&b, model_cfg, seed));
        (rel, acc)
    };
    let mut failures = Vec::new();
    let mut ran = 0;
    let mut persist_error = None;
    run_pool(todo, cfg.run.workers, work, |(rel, acc)| {
        match acc {
            Ok(acc) => match write(&out.join(&rel), format!("{}\n", serde_json::json!({ "changed_accuracy": acc }))) {
                Ok(()) => {
                    manifest.cells.insert(rel.clone(), CellEntry { report: rel, predictions: None, classifier_accuracy: None });
                    ran += 1;
                }
                Err(e) => persist_error = Some(e),
            },
            Err(e) => failures.push(format!("{rel}: {e}")),
        }
        if let Err(e) = manifest.save(&manifest_path) {
            persist_error = Some(e);
        }
        persist_error.is_none()
    });
    if let Some(e) = persist_error {
        return Err(e);
    }
    if !failures.is_empty() {
        let missing = all.iter().filter(|c| !manifest.is_complete(&c.4, out)).map(|c| c.4.clone()).collect();
        return Err(CliError::Incomplete { failures, missing });
    }

    let mut rows = Vec::new();
    for spec in &specs {
        for &size in &cfg.curve.sizes {
            for condition in CurveCondition::ALL {
                let mut per_seed = Vec::new();
                for &seed in &cfg.curve.seeds {
                    let path = out.join(curve_rel(&spec.name, condition, size, seed));
                    let v: serde_json::Value = serde_json::from_str(&read(&path)?)
                        .map_err(|source| CliError::Json { path: path.display().to_string(), source })?;
                    per_seed.push(v["changed_accuracy"].as_f64().unwrap_or(f64::NAN));
                }
                let changed_accuracy = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
                rows.push(CurveRow { update: spec.name.clone(), v2_size: size, condition, per_seed, changed_accuracy });
            }
        }
    }
    let table = CurveTable { rows };
    write(&out.join("curve/table.txt"), table.render())?;
    write(&out.join("curve/table.json"), serde_json::to_string_pretty(&table).expect("table serializes") + "\n")?;
    plot::curve_svg(&table, &out.join("curve/curve.svg"))?;
    for a in ["curve/table.txt", "curve/table.json", "curve/curve.svg"] {
        manifest.artifacts.insert(a.into());
    }
    manifest.finished_unix = Some(now_unix());
    manifest.save(&manifest_path)?;
    Ok(CurveOutcome { table, ran, skipped })
}
