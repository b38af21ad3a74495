//! Span-level P/R/F1, ranking metrics, run aggregation and a taxonomy-aware
//! breakdown of linking errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linker::LinkPrediction;
use crate::taxonomy::Taxonomy;

/// Gold or predicted spans: doc id → set of `(start, end)` char offsets.
pub type DocSpans = BTreeMap<String, BTreeSet<(usize, usize)>>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Micro-averaged precision, recall and F1 over exact `(doc, start, end)`
/// matches. Precision is 0 without predictions, recall 0 without gold spans.
pub fn span_micro_prf(gold: &DocSpans, pred: &DocSpans) -> Prf {
    let count = |m: &DocSpans| m.values().map(BTreeSet::len).sum::<usize>();
    let (n_gold, n_pred) = (count(gold), count(pred));
    let tp: usize = pred
        .iter()
        .map(|(doc, spans)| gold.get(doc).map_or(0, |g| spans.intersection(g).count()))
        .sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (p, r) = (ratio(tp, n_pred), ratio(tp, n_gold));
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Prf {
        precision: p,
        recall: r,
        f1,
        true_positives: tp,
        predicted: n_pred,
        gold: n_gold,
    }
}

/// Mean reciprocal rank of 1-based ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Domain("MRR of an empty rank list".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Domain("ranks are 1-based".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of ranks at most `k`; 0 for an empty list.
pub fn precision_at_k_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Fraction of predictions whose gold concept ranks within the top `k`.
/// Predictions without a gold concept are skipped.
pub fn precision_at_k(predictions: &[LinkPrediction], k: usize) -> f64 {
    let ranks: Vec<usize> = predictions.iter().filter_map(|p| p.rank_of_gold).collect();
    precision_at_k_ranks(&ranks, k)
}

/// How a wrong top-1 concept relates to the gold one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Parent,
    Child,
    /// Shares a parent with the gold concept.
    Sibling,
    /// Ancestor or descendant further than one hop.
    Lineage,
    Unrelated,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 5] = [
        ErrorKind::Parent,
        ErrorKind::Child,
        ErrorKind::Sibling,
        ErrorKind::Lineage,
        ErrorKind::Unrelated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Parent => "parent",
            ErrorKind::Child => "child",
            ErrorKind::Sibling => "sibling",
            ErrorKind::Lineage => "ancestor/descendant",
            ErrorKind::Unrelated => "unrelated",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relation of `predicted` to `gold`; checked in the order of [`ErrorKind::ALL`].
pub fn classify_error(tax: &Taxonomy, gold: usize, predicted: usize) -> ErrorKind {
    let gold_parents = tax.parent_indices(gold);
    if gold_parents.contains(&predicted) {
        ErrorKind::Parent
    } else if tax.child_indices(gold).contains(&predicted) {
        ErrorKind::Child
    } else if tax.parent_indices(predicted).iter().any(|p| gold_parents.contains(p)) {
        ErrorKind::Sibling
    } else if tax.is_ancestor(predicted, gold) || tax.is_ancestor(gold, predicted) {
        ErrorKind::Lineage
    } else {
        ErrorKind::Unrelated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionReport {
    pub evaluated: usize,
    pub correct: usize,
    pub errors: BTreeMap<ErrorKind, usize>,
    /// Undirected hop distance of wrong top-1 concepts; `None` when disconnected.
    pub distances: BTreeMap<Option<usize>, usize>,
}

impl ConfusionReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("evaluated\t{}\ncorrect\t{}\n", self.evaluated, self.correct);
        for kind in ErrorKind::ALL {
            out.push_str(&format!("{kind}\t{}\n", self.errors.get(&kind).copied().unwrap_or(0)));
        }
        for (d, n) in &self.distances {
            let d = d.map_or("disconnected".to_string(), |d| format!("{d} hops"));
            out.push_str(&format!("distance {d}\t{n}\n"));
        }
        out
    }
}

/// Categorizes every wrong top-1 prediction against the taxonomy. Predictions
/// without a gold concept or with an unknown id are skipped.
pub fn confusion_report(predictions: &[LinkPrediction], tax: &Taxonomy) -> ConfusionReport {
    let mut report = ConfusionReport::default();
    for p in predictions {
        let gold = p.gold.as_deref().and_then(|g| tax.index_of(g));
        let top = p.ranked.first().and_then(|(id, _)| tax.index_of(id));
        let (Some(gold), Some(top)) = (gold, top) else {
            continue;
        };
        report.evaluated += 1;
        if gold == top {
            report.correct += 1;
            continue;
        }
        *report.errors.entry(classify_error(tax, gold, top)).or_default() += 1;
        *report.distances.entry(tax.hop_distance(gold, top)).or_default() += 1;
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    El,
    Mtl,
}

impl Task {
    /// Report columns, in display order.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Task::Ner => &["Pre", "Rec", "F1"],
            Task::El => &["MRR", "Pre@1", "Pre@30"],
            Task::Mtl => &["Pre", "Rec", "F1", "MRR", "Pre@30"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ner => "ner",
            Task::El => "el",
            Task::Mtl => "mtl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub n_runs: usize,
}

/// Mean and sample standard deviation.
pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::Domain("cannot summarize zero runs".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(MetricSummary { mean, std, n_runs: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub per_run: Vec<BTreeMap<String, f64>>,
    /// Evaluation set sizes of the last run (gold spans, mentions, ...).
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn single(task: Task, values: BTreeMap<String, f64>, counts: BTreeMap<String, usize>) -> Result<Self> {
        Self::aggregate(task, vec![values], counts)
    }

    /// Aggregates runs that each report exactly the task's columns.
    pub fn aggregate(
        task: Task,
        runs: Vec<BTreeMap<String, f64>>,
        counts: BTreeMap<String, usize>,
    ) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Domain("report over zero runs".into()));
        }
        let expected: BTreeSet<&str> = task.columns().iter().copied().collect();
        for run in &runs {
            let keys: BTreeSet<&str> = run.keys().map(String::as_str).collect();
            if keys != expected {
                return Err(Error::Domain(format!(
                    "{} report needs columns {:?}, got {:?}",
                    task.as_str(),
                    expected,
                    keys
                )));
            }
            if let Some((k, v)) = run.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("metric {k} = {v} outside [0, 1]")));
            }
        }
        let mut metrics = BTreeMap::new();
        for col in task.columns() {
            let values: Vec<f64> = runs.iter().map(|r| r[*col]).collect();
            metrics.insert(col.to_string(), summarize(&values)?);
        }
        Ok(Self {
            task,
            metrics,
            per_run: runs,
            counts,
        })
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        self.metrics.get(column).map(|m| m.mean)
    }

    /// Aligned text table, one column per metric, `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let cols = self.task.columns();
        let cells: Vec<String> = cols
            .iter()
            .map(|c| {
                let m = &self.metrics[*c];
                format!("{:.4} ± {:.4}", m.mean, m.std)
            })
            .collect();
        let widths: Vec<usize> = cols
            .iter()
            .zip(&cells)
            .map(|(c, v)| c.chars().count().max(v.chars().count()))
            .collect();
        let line = |items: &[String]| {
            items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let header: Vec<String> = cols.iter().map(|c| c.to_string()).collect();
        let runs = self.metrics.values().next().map_or(0, |m| m.n_runs);
        format!(
            "task {} ({} run{})\n{}\n{}\n",
            self.task.as_str(),
            runs,
            if runs == 1 { "" } else { "s" },
            line(&header),
            line(&cells)
        )
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("task={}\n", self.task.as_str());
        for col in self.task.columns() {
            let m = &self.metrics[*col];
            out.push_str(&format!("{col}.mean={}\n{col}.std={}\n{col}.n_runs={}\n", m.mean, m.std, m.n_runs));
        }
        for (k, v) in &self.counts {
            out.push_str(&format!("count.{k}={v}\n"));
        }
        out
    }

    /// Writes `<stem>.txt` (table) and `<stem>.kv` (key-value lines) in `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let table = dir.join(format!("{stem}.txt"));
        fs::write(&table, self.to_table()).map_err(|e| Error::io(&table, e))?;
        let kv = dir.join(format!("{stem}.kv"));
        fs::write(&kv, self.to_key_values()).map_err(|e| Error::io(&kv, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linker::MentionRef;
    use crate::taxonomy::ConceptNode;

    fn spans(items: &[(&str, usize, usize)]) -> DocSpans {
        let mut m = DocSpans::new();
        for (d, s, e) in items {
            m.entry(d.to_string()).or_default().insert((*s, *e));
        }
        m
    }

    #[test]
    fn identical_sets_score_one() {
        let g = spans(&[("1", 0, 3), ("2", 4, 9)]);
        let prf = span_micro_prf(&g, &g);
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let prf = span_micro_prf(&spans(&[("1", 0, 3)]), &DocSpans::new());
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
        let none = span_micro_prf(&DocSpans::new(), &DocSpans::new());
        assert_eq!(none.f1, 0.0);
    }

    #[test]
    fn hand_counted_half() {
        let a = ("1", 0, 4);
        let b = ("1", 10, 20);
        let c = ("2", 10, 20);
        let prf = span_micro_prf(&spans(&[a, b]), &spans(&[b, c]));
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn mrr_formula() {
        assert_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(mrr(&[1, 2, 4]).unwrap(), 7.0 / 12.0);
        assert_eq!(mrr(&[5]).unwrap(), 0.2);
        assert!(matches!(mrr(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn precision_at_k_counts() {
        assert_eq!(precision_at_k_ranks(&[1, 31], 30), 0.5);
        assert_eq!(precision_at_k_ranks(&[1, 1], 1), 1.0);
        assert_eq!(precision_at_k_ranks(&[1, 2, 1, 3], 1), 0.5);
    }

    fn node(id: &str, trees: &[&str]) -> ConceptNode {
        ConceptNode {
            unique_id: id.into(),
            heading: id.into(),
            tree_numbers: trees.iter().map(|t| t.to_string()).collect(),
            scope_note: String::new(),
            entry_terms: vec![],
        }
    }

    fn tax() -> Taxonomy {
        // A ─ B ─ D ─ F, A ─ C, E isolated
        Taxonomy::from_nodes(vec![
            node("A", &["C01"]),
            node("B", &["C01.100"]),
            node("C", &["C01.200"]),
            node("D", &["C01.100.300"]),
            node("E", &["C02"]),
            node("F", &["C01.100.300.400"]),
        ])
        .unwrap()
    }

    #[test]
    fn error_categories() {
        let t = tax();
        let i = |id: &str| t.index_of(id).unwrap();
        assert_eq!(classify_error(&t, i("B"), i("A")), ErrorKind::Parent);
        assert_eq!(classify_error(&t, i("B"), i("D")), ErrorKind::Child);
        assert_eq!(classify_error(&t, i("B"), i("C")), ErrorKind::Sibling);
        assert_eq!(classify_error(&t, i("F"), i("A")), ErrorKind::Lineage);
        assert_eq!(classify_error(&t, i("A"), i("F")), ErrorKind::Lineage);
        assert_eq!(classify_error(&t, i("A"), i("E")), ErrorKind::Unrelated);
        assert_eq!(classify_error(&t, i("D"), i("C")), ErrorKind::Unrelated);
    }

    fn prediction(gold: &str, top: &str) -> LinkPrediction {
        LinkPrediction {
            mention: MentionRef {
                doc_id: "1".into(),
                start: 0,
                end: 1,
            },
            ranked: vec![(top.into(), 0.9)],
            gold: Some(gold.into()),
            rank_of_gold: Some(if gold == top { 1 } else { 2 }),
        }
    }

    #[test]
    fn confusion_counts_and_distances() {
        let t = tax();
        let preds = [prediction("B", "B"), prediction("B", "D"), prediction("A", "E"), prediction("D", "C")];
        let r = confusion_report(&preds, &t);
        assert_eq!((r.evaluated, r.correct), (4, 1));
        assert_eq!(r.errors[&ErrorKind::Child], 1);
        assert_eq!(r.errors[&ErrorKind::Unrelated], 2);
        assert_eq!(r.distances[&None], 1);
        assert_eq!(r.distances[&Some(1)], 1);
        assert_eq!(r.distances[&Some(3)], 1);
        assert!(r.to_text().contains("child\t1"));
        assert_eq!(precision_at_k(&preds, 1), 0.25);
    }

    fn run(values: &[(&str, f64)]) -> BTreeMap<String, f64> {
        values.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn aggregation_matches_direct_computation() {
        let vals = [0.8, 0.9, 0.85, 0.7, 0.95];
        let runs: Vec<_> = vals.iter().map(|&v| run(&[("Pre", v), ("Rec", v), ("F1", v)])).collect();
        let r = EvalReport::aggregate(Task::Ner, runs, BTreeMap::new()).unwrap();
        let mean = vals.iter().sum::<f64>() / 5.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let m = r.metrics["F1"];
        assert!((m.mean - mean).abs() < 1e-12);
        assert!((m.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(m.n_runs, 5);
    }

    #[test]
    fn single_run_has_zero_std() {
        let r = EvalReport::single(
            Task::El,
            run(&[("MRR", 0.5), ("Pre@1", 0.25), ("Pre@30", 1.0)]),
            BTreeMap::new(),
        )
        .unwrap();
        assert!(r.metrics.values().all(|m| m.std == 0.0 && m.n_runs == 1));
        assert!(r.to_key_values().contains("MRR.mean=0.5\n"));
        let table = r.to_table();
        assert!(table.contains("Pre@30"));
        assert!(table.contains("0.2500 ± 0.0000"));
    }

    #[test]
    fn schema_and_range_are_enforced() {
        assert!(EvalReport::single(Task::Ner, run(&[("Pre", 0.5), ("F1", 0.5)]), BTreeMap::new()).is_err());
        assert!(EvalReport::single(
            Task::Ner,
            run(&[("Pre", 1.5), ("Rec", 0.5), ("F1", 0.5)]),
            BTreeMap::new()
        )
        .is_err());
        let cols: BTreeSet<&str> = Task::Mtl.columns().iter().copied().collect();
        assert_eq!(cols, BTreeSet::from(["Pre", "Rec", "F1", "MRR", "Pre@30"]));
    }
}
