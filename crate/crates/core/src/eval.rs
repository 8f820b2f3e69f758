//! Exact-match evaluation, aggregation over runs, and summary tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{CurveCondition, DatasetError, Partition, SplitBundle};
use crate::model::{ModelError, ParserConfig, ParserModel};
use crate::parsetree::{exact_match, serialize};
use crate::strategies::{build_training_plan, bundle_vocab, execute_plan, Strategy, StrategyError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("report grid is incomplete; missing cells: {}", .missing.join(", "))]
    IncompleteGrid { missing: Vec<String> },
    #[error("cell {0} is reported more than once")]
    DuplicateCell(String),
    #[error("no reports to aggregate")]
    NoReports,
    #[error("oracle ({oracle}) does not exceed the baseline ({baseline})")]
    DegenerateGap { baseline: f64, oracle: f64 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Score {
    pub numerator: usize,
    pub denominator: usize,
}

impl Score {
    pub fn accuracy(self) -> f64 {
        if self.denominator == 0 {
            0.0
        } else {
            self.numerator as f64 / self.denominator as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub tree: String,
    pub valid: bool,
}

/// Exact-match results of one (update, strategy, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub update: String,
    pub strategy: String,
    pub seed: u64,
    /// Indexed by `Partition as usize`.
    pub scores: [Score; 3],
    #[serde(default)]
    pub predictions: BTreeMap<String, PredictionRecord>,
}

impl EvalReport {
    pub fn score(&self, p: Partition) -> Score {
        self.scores[p as usize]
    }

    pub fn accuracy(&self, p: Partition) -> f64 {
        self.score(p).accuracy()
    }

    fn key(&self) -> (String, String, u64) {
        (self.strategy.clone(), self.update.clone(), self.seed)
    }
}

/// Scores `head` of `model` on the three test sets of `bundle` against V2
/// labels. Invalid decodes count as misses.
pub fn evaluate(
    model: &ParserModel,
    head: &str,
    bundle: &SplitBundle,
    update: &str,
    strategy: &str,
    seed: u64,
) -> Result<EvalReport, ModelError> {
    let mut scores = [Score::default(); 3];
    let mut predictions = BTreeMap::new();
    for p in Partition::ALL {
        let test = bundle.test_set(p);
        let queries: Vec<&[String]> = test.iter().map(|e| e.tokens.as_slice()).collect();
        let preds = model.predict_batch(&queries, head)?;
        let mut hits = 0;
        for (e, pred) in test.iter().zip(preds) {
            let gold = e.v2_label.as_ref();
            if pred.valid && gold.is_some_and(|g| exact_match(&pred.tree, g)) {
                hits += 1;
            }
            predictions.insert(e.id.clone(), PredictionRecord { tree: serialize(&pred.tree, &e.tokens), valid: pred.valid });
        }
        scores[p as usize] = Score { numerator: hits, denominator: test.len() };
    }
    Ok(EvalReport { update: update.into(), strategy: strategy.into(), seed, scores, predictions })
}

/// One line of the persisted report format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub update: String,
    pub strategy: String,
    pub seed: u64,
    pub partition: Partition,
    pub numerator: usize,
    pub denominator: usize,
}

pub fn report_records(report: &EvalReport) -> Vec<ReportRecord> {
    Partition::ALL
        .into_iter()
        .map(|p| ReportRecord {
            update: report.update.clone(),
            strategy: report.strategy.clone(),
            seed: report.seed,
            partition: p,
            numerator: report.score(p).numerator,
            denominator: report.score(p).denominator,
        })
        .collect()
}

/// Line-delimited JSON, one record per line.
pub fn records_to_jsonl(records: &[ReportRecord]) -> Result<String, EvalError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<ReportRecord>, EvalError> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Regroups records into reports; partitions without a record score 0/0.
pub fn reports_from_records(records: &[ReportRecord]) -> Result<Vec<EvalReport>, EvalError> {
    let mut cells: BTreeMap<(String, String, u64), [Option<Score>; 3]> = BTreeMap::new();
    for r in records {
        let slot = &mut cells.entry((r.strategy.clone(), r.update.clone(), r.seed)).or_default()[r.partition as usize];
        if slot.is_some() {
            return Err(EvalError::DuplicateCell(format!("{}/{}/{}/{}", r.update, r.strategy, r.seed, r.partition)));
        }
        *slot = Some(Score { numerator: r.numerator, denominator: r.denominator });
    }
    Ok(cells
        .into_iter()
        .map(|((strategy, update, seed), s)| EvalReport {
            update,
            strategy,
            seed,
            scores: s.map(Option::unwrap_or_default),
            predictions: BTreeMap::new(),
        })
        .collect())
}

/// Mean accuracies of one strategy, as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    /// Indexed by `Partition as usize`.
    pub means: [f64; 3],
    pub macro_average: f64,
    /// Per-update means over seeds.
    pub per_update: BTreeMap<String, [f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapClosure {
    pub method: String,
    pub baseline: String,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub updates: Vec<String>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategySummary>,
    pub gap_closures: Vec<GapClosure>,
}

impl Summary {
    pub fn strategy(&self, name: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == name)
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn strategy_order(name: &str) -> (usize, String) {
    let rank = Strategy::ALL.iter().position(|s| s.as_str() == name).unwrap_or(Strategy::ALL.len());
    (rank, name.to_string())
}

/// Averages a complete strategy × update × seed grid. Each strategy's mean is
/// the mean over updates of the per-update mean over seeds, summed in sorted
/// order so the result does not depend on report order.
pub fn aggregate(reports: &[EvalReport]) -> Result<Summary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let mut cells: BTreeMap<(String, String, u64), &EvalReport> = BTreeMap::new();
    for r in reports {
        let (s, u, seed) = r.key();
        if cells.insert(r.key(), r).is_some() {
            return Err(EvalError::DuplicateCell(format!("{u}/{s}/{seed}")));
        }
    }
    let strategies: BTreeSet<String> = reports.iter().map(|r| r.strategy.clone()).collect();
    let updates: BTreeSet<String> = reports.iter().map(|r| r.update.clone()).collect();
    let seeds: BTreeSet<u64> = reports.iter().map(|r| r.seed).collect();
    let mut missing = Vec::new();
    for s in &strategies {
        for u in &updates {
            for &seed in &seeds {
                if !cells.contains_key(&(s.clone(), u.clone(), seed)) {
                    missing.push(format!("{u}/{s}/{seed}"));
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::IncompleteGrid { missing });
    }

    let mut ordered: Vec<&String> = strategies.iter().collect();
    ordered.sort_by_key(|s| strategy_order(s));
    let mut summaries = Vec::new();
    for s in ordered {
        let mut per_update = BTreeMap::new();
        let mut means = [0.0; 3];
        for u in &updates {
            let mut m = [0.0; 3];
            for &seed in &seeds {
                let r = cells[&(s.clone(), u.clone(), seed)];
                for p in Partition::ALL {
                    m[p as usize] += r.accuracy(p);
                }
            }
            for (i, x) in m.iter_mut().enumerate() {
                *x /= seeds.len() as f64;
                means[i] += *x;
            }
            per_update.insert(u.clone(), m.map(round4));
        }
        let means = means.map(|x| x / updates.len() as f64);
        let macro_average = round4(means.iter().sum::<f64>() / 3.0);
        summaries.push(StrategySummary { strategy: s.clone(), means: means.map(round4), macro_average, per_update });
    }
    let gap_closures = summary_gaps(&summaries);
    Ok(Summary { updates: updates.into_iter().collect(), seeds: seeds.into_iter().collect(), strategies: summaries, gap_closures })
}

fn summary_gaps(summaries: &[StrategySummary]) -> Vec<GapClosure> {
    let find = |s: Strategy| summaries.iter().find(|x| x.strategy == s.as_str());
    let Some(oracle) = find(Strategy::Oracle) else { return Vec::new() };
    let best = Strategy::ALL
        .into_iter()
        .filter(|s| s.is_baseline())
        .filter_map(find)
        .fold(None::<&StrategySummary>, |best, s| match best {
            Some(b) if b.macro_average >= s.macro_average => Some(b),
            _ => Some(s),
        });
    let Some(best) = best else { return Vec::new() };
    Strategy::ALL
        .into_iter()
        .filter(|s| !s.is_baseline() && *s != Strategy::Oracle)
        .filter_map(find)
        .filter_map(|m| {
            gap_closure(best.macro_average, m.macro_average, oracle.macro_average).ok().map(|percent| GapClosure {
                method: m.strategy.clone(),
                baseline: best.strategy.clone(),
                percent,
            })
        })
        .collect()
}

/// Share of the baseline-to-oracle gap a method recovers, in percent.
pub fn gap_closure(baseline: f64, method: f64, oracle: f64) -> Result<f64, EvalError> {
    if oracle <= baseline {
        return Err(EvalError::DegenerateGap { baseline, oracle });
    }
    Ok(100.0 * (method - baseline) / (oracle - baseline))
}

const COLUMNS: [&str; 3] = ["changed", "unchanged", "triv_unchanged"];

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Strategy rows with the three partition means and their macro average,
/// followed by gap-closure lines.
pub fn render_summary(summary: &Summary) -> String {
    let width = summary.strategies.iter().map(|s| s.strategy.len()).max().unwrap_or(8).max(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:width$}  {:>8}  {:>9}  {:>14}  {:>7}", "strategy", COLUMNS[0], COLUMNS[1], COLUMNS[2], "average");
    for s in &summary.strategies {
        let _ = writeln!(
            out,
            "{:width$}  {:>8}  {:>9}  {:>14}  {:>7}",
            s.strategy,
            pct(s.means[0]),
            pct(s.means[1]),
            pct(s.means[2]),
            pct(s.macro_average)
        );
    }
    for g in &summary.gap_closures {
        let _ = writeln!(out, "gap closure {}: {:.1}% (baseline {})", g.method, g.percent, g.baseline);
    }
    out
}

/// Per-update breakdown: one block of three partition rows per update plus
/// an average block, one column per strategy.
pub fn render_update_table(summary: &Summary) -> String {
    let names: Vec<&str> = summary.strategies.iter().map(|s| s.strategy.as_str()).collect();
    let col = names.iter().map(|n| n.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:18}  {:14}", "update", "partition");
    for n in &names {
        let _ = write!(out, "  {n:>col$}");
    }
    out.push('\n');
    let mut block = |name: &str, values: &dyn Fn(&StrategySummary) -> [f64; 3]| {
        for (i, c) in COLUMNS.iter().enumerate() {
            let _ = write!(out, "{:18}  {:14}", if i == 0 { name } else { "" }, c);
            for s in &summary.strategies {
                let _ = write!(out, "  {:>col$}", pct(values(s)[i]));
            }
            out.push('\n');
        }
    };
    for u in &summary.updates {
        block(u, &|s: &StrategySummary| s.per_update[u]);
    }
    block("avg", &|s: &StrategySummary| s.means);
    out
}

/// Changed-partition accuracy of one sweep cell, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: String,
    pub v2_size: usize,
    pub condition: CurveCondition,
    pub per_seed: Vec<f64>,
    pub changed_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
}

impl CurveTable {
    pub fn sizes(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.v2_size).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn updates(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.update) {
                seen.push(r.update.clone());
            }
        }
        seen
    }

    /// Mean over updates for one (size, condition).
    pub fn average(&self, v2_size: usize, condition: CurveCondition) -> Option<f64> {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.v2_size == v2_size && r.condition == condition)
            .map(|r| r.changed_accuracy)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Rows per update and size with both conditions side by side, then the
    /// averages over updates.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:18}  {:>7}  {:>11}  {:>14}", "update", "v2_size", "conflicting", "oracle_removed");
        let cell = |x: Option<f64>| x.map_or("-".to_string(), pct);
        let lookup = |u: &str, size: usize, c: CurveCondition| {
            self.rows.iter().find(|r| r.update == u && r.v2_size == size && r.condition == c).map(|r| r.changed_accuracy)
        };
        for u in self.updates() {
            for size in self.sizes() {
                let _ = writeln!(
                    out,
                    "{:18}  {:>7}  {:>11}  {:>14}",
                    u,
                    size,
                    cell(lookup(&u, size, CurveCondition::Conflicting)),
                    cell(lookup(&u, size, CurveCondition::OracleRemoved))
                );
            }
        }
        for size in self.sizes() {
            let _ = writeln!(
                out,
                "{:18}  {:>7}  {:>11}  {:>14}",
                "average",
                size,
                cell(self.average(size, CurveCondition::Conflicting)),
                cell(self.average(size, CurveCondition::OracleRemoved))
            );
        }
        out
    }
}

/// Trains on the union of V1 and V2 data of each sweep split and records the
/// changed-partition accuracy; V1 either keeps the conflicting examples or
/// has them removed, depending on the condition.
pub fn conflict_curve(
    update: &str,
    bundle_factory: impl Fn(usize, CurveCondition, u64) -> Result<SplitBundle, DatasetError>,
    v2_sizes: &[usize],
    conditions: &[CurveCondition],
    seeds: &[u64],
    config: &ParserConfig,
) -> Result<Vec<CurveRow>, EvalError> {
    let mut rows = Vec::new();
    for &size in v2_sizes {
        for &condition in conditions {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                per_seed.push(curve_cell(&bundle_factory(size, condition, seed)?, config, seed)?);
            }
            let changed_accuracy = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
            rows.push(CurveRow { update: update.to_string(), v2_size: size, condition, per_seed, changed_accuracy });
        }
    }
    Ok(rows)
}

/// Changed-partition accuracy after direct-mix training on one sweep split.
pub fn curve_cell(bundle: &SplitBundle, config: &ParserConfig, seed: u64) -> Result<f64, EvalError> {
    let plan = build_training_plan(Strategy::DirectMix, bundle, config, None)?;
    let model = execute_plan(&plan, bundle_vocab(bundle), config, seed)?;
    let test = bundle.test_set(Partition::Changed);
    let queries: Vec<&[String]> = test.iter().map(|e| e.tokens.as_slice()).collect();
    let preds = model.predict_batch(&queries, &plan.eval_head).map_err(StrategyError::from)?;
    let hits = test
        .iter()
        .zip(&preds)
        .filter(|(e, p)| p.valid && e.v2_label.as_ref().is_some_and(|g| exact_match(&p.tree, g)))
        .count();
    Ok(Score { numerator: hits, denominator: test.len() }.accuracy())
}
