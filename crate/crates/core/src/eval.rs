//! Completion metrics: exact match, edit similarity, identifier match.

use std::collections::HashMap;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexer;
use crate::pipeline::CompletionTask;

/// Character-level edit distance with unit costs.
pub fn levenshtein(x: &str, y: &str) -> usize {
    let a: Vec<char> = x.chars().collect();
    let b: Vec<char> = y.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = diag + usize::from(ca != cb);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(row[j + 1] + 1);
        }
    }
    row[b.len()]
}

/// `1 - lev(x, y) / max(|x|, |y|)` in characters; two empty strings score 1.
pub fn edit_similarity(x: &str, y: &str) -> f64 {
    let longest = x.chars().count().max(y.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(x, y) as f64 / longest as f64
}

fn normalize(s: &str) -> String {
    let s = s.replace("\r\n", "\n");
    match s.strip_suffix('\n') {
        Some(t) => t.to_string(),
        None => s,
    }
}

/// 1 when the strings agree after normalizing line endings and dropping one
/// trailing newline. Whitespace elsewhere counts.
pub fn exact_match(x: &str, y: &str) -> u8 {
    u8::from(normalize(x) == normalize(y))
}

pub fn extract_identifiers(code: &str) -> Vec<String> {
    lexer::identifiers(code)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentifierScores {
    pub id_em: u8,
    pub id_f1: f64,
}

/// Ordered identifier equality and multiset F1. Two empty identifier lists
/// match perfectly.
pub fn identifier_scores(generated: &str, ground_truth: &str) -> IdentifierScores {
    let g = extract_identifiers(generated);
    let t = extract_identifiers(ground_truth);
    let id_em = u8::from(g == t);
    if g.is_empty() && t.is_empty() {
        return IdentifierScores { id_em, id_f1: 1.0 };
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for id in &t {
        *counts.entry(id).or_default() += 1;
    }
    let mut common = 0usize;
    for id in &g {
        if let Some(c) = counts.get_mut(id.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return IdentifierScores { id_em, id_f1: 0.0 };
    }
    let precision = common as f64 / g.len() as f64;
    let recall = common as f64 / t.len() as f64;
    IdentifierScores { id_em, id_f1: 2.0 * precision * recall / (precision + recall) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub em: f64,
    pub es: f64,
    pub id_em: f64,
    pub id_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    /// Set when the task could not be run; all metrics are then 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl TaskMetrics {
    pub fn score(task_id: &str, generated: &str, ground_truth: &str) -> Self {
        let ids = identifier_scores(generated, ground_truth);
        TaskMetrics {
            task_id: task_id.to_string(),
            em: f64::from(exact_match(generated, ground_truth)),
            es: edit_similarity(generated, ground_truth),
            id_em: f64::from(ids.id_em),
            id_f1: ids.id_f1,
            generated: Some(generated.to_string()),
            failure: None,
        }
    }

    pub fn failed(task_id: &str, reason: String) -> Self {
        TaskMetrics {
            task_id: task_id.to_string(),
            em: 0.0,
            es: 0.0,
            id_em: 0.0,
            id_f1: 0.0,
            generated: None,
            failure: Some(reason),
        }
    }
}

/// Aggregates are means over tasks, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub em: f64,
    pub es: f64,
    pub id_em: f64,
    pub id_f1: f64,
    pub failed: usize,
    pub per_task: Vec<TaskMetrics>,
}

impl MetricsReport {
    pub fn from_tasks(per_task: Vec<TaskMetrics>) -> Self {
        let n = per_task.len().max(1) as f64;
        let mean = |f: fn(&TaskMetrics) -> f64| per_task.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            em: mean(|t| t.em),
            es: mean(|t| t.es),
            id_em: mean(|t| t.id_em),
            id_f1: mean(|t| t.id_f1),
            failed: per_task.iter().filter(|t| t.failure.is_some()).count(),
            per_task,
        }
    }

    /// `EM 50.00  ES 50.00  ID-EM ...` as percentages.
    pub fn summary_line(&self) -> String {
        format!(
            "EM {:.2}  ES {:.2}  ID-EM {:.2}  ID-F1 {:.2}  ({} tasks, {} failed)",
            self.em * 100.0,
            self.es * 100.0,
            self.id_em * 100.0,
            self.id_f1 * 100.0,
            self.per_task.len(),
            self.failed
        )
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("task {task_id} has no ground truth")]
    MissingGroundTruth { task_id: String },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scores `run` on every task. Failed runs score 0 and are flagged.
pub fn evaluate<F>(dataset: &[CompletionTask], run: F) -> Result<MetricsReport, EvalError>
where
    F: Fn(&CompletionTask) -> Result<String, String> + Sync,
{
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if let Some(t) = dataset.iter().find(|t| t.ground_truth.is_none()) {
        return Err(EvalError::MissingGroundTruth { task_id: t.task_id.clone() });
    }
    let per_task = dataset
        .par_iter()
        .map(|task| {
            let truth = task.ground_truth.as_deref().unwrap_or_default();
            match run(task) {
                Ok(generated) => TaskMetrics::score(&task.task_id, &generated, truth),
                Err(reason) => TaskMetrics::failed(&task.task_id, reason),
            }
        })
        .collect();
    Ok(MetricsReport::from_tasks(per_task))
}

/// Reads line-delimited task records, skipping blank lines.
pub fn load_tasks(reader: impl BufRead) -> Result<Vec<CompletionTask>, EvalError> {
    let mut tasks = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: CompletionTask = serde_json::from_str(&line)
            .map_err(|e| EvalError::Format { line: i + 1, message: e.to_string() })?;
        if task.prefix.is_empty() {
            return Err(EvalError::Format { line: i + 1, message: "empty prefix".into() });
        }
        tasks.push(task);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-table edit distance.
    fn dp(x: &str, y: &str) -> usize {
        let a: Vec<char> = x.chars().collect();
        let b: Vec<char> = y.chars().collect();
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in t.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            t[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = usize::from(a[i - 1] != b[j - 1]);
                t[i][j] = (t[i - 1][j] + 1).min(t[i][j - 1] + 1).min(t[i - 1][j - 1] + c);
            }
        }
        t[a.len()][b.len()]
    }

    fn task(id: &str, truth: &str) -> CompletionTask {
        CompletionTask {
            task_id: id.into(),
            repo_root: ".".into(),
            file_path: "m.py".into(),
            prefix: "x = ".into(),
            ground_truth: Some(truth.into()),
            cursor_line: 1,
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert!((edit_similarity("kitten", "sitting") - (1.0 - 3.0 / 7.0)).abs() < 1e-9);
        assert_eq!(edit_similarity("", ""), 1.0);
        assert_eq!(edit_similarity("", "abc"), 0.0);
        assert_eq!(levenshtein("héllo", "hello"), 1);
    }

    #[test]
    fn exact_match_rules() {
        assert_eq!(exact_match("a=1", "a=1"), 1);
        assert_eq!(exact_match("a=1", "a = 1"), 0);
        assert_eq!(exact_match("", ""), 1);
        assert_eq!(exact_match("a=1\r\n", "a=1"), 1);
        assert_eq!(exact_match("a=1\n\n", "a=1"), 0);
    }

    #[test]
    fn identifiers_and_scores() {
        assert_eq!(extract_identifiers("cfg = parse_config(path)"), vec!["cfg", "parse_config", "path"]);
        assert_eq!(extract_identifiers("x = 1 + 2"), vec!["x"]);
        assert!(extract_identifiers("# comment only").is_empty());
        let s = identifier_scores("a + b", "b + c");
        assert_eq!(s.id_em, 0);
        assert!((s.id_f1 - 0.5).abs() < 1e-12);
        assert_eq!(identifier_scores("", "1"), IdentifierScores { id_em: 1, id_f1: 1.0 });
        assert_eq!(identifier_scores("a", "").id_f1, 0.0);
        // multiset: gen [a, a], truth [a] -> p 1/2, r 1
        assert!((identifier_scores("a a", "a").id_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_means() {
        let data = vec![task("t1", "abc"), task("t2", "xyz")];
        let r = evaluate(&data, |t| Ok(if t.task_id == "t1" { "abc".into() } else { "".into() })).unwrap();
        assert!((r.em - 0.5).abs() < 1e-12);
        assert!((r.es - 0.5).abs() < 1e-12);
        assert!(r.summary_line().starts_with("EM 50.00  ES 50.00"));
        let r = evaluate(&data, |t| Err(format!("boom {}", t.task_id))).unwrap();
        assert_eq!(r.failed, 2);
        assert_eq!(r.es, 0.0);
        assert!(evaluate(&[], |_| Ok(String::new())).is_err());
    }

    #[test]
    fn task_loading() {
        let text = r#"{"task_id":"a","repo":"r","file":"m.py","prefix":"x = ","ground_truth":"1","cursor_line":1}

{"task_id":"b","repo":"r","file":"m.py","prefix":"y","cursor_line":1}
"#;
        let tasks = load_tasks(text.as_bytes()).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[1].ground_truth, None);
        assert!(load_tasks("{\"task_id\":1}".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn agrees_with_table(x in "[abc]{0,12}", y in "[abc]{0,12}") {
            prop_assert_eq!(levenshtein(&x, &y), dp(&x, &y));
        }

        #[test]
        fn metric_axioms(x in "[ab ]{0,8}", y in "[ab ]{0,8}", z in "[ab ]{0,8}") {
            prop_assert_eq!(levenshtein(&x, &y), levenshtein(&y, &x));
            prop_assert_eq!(levenshtein(&x, &y) == 0, x == y);
            prop_assert!(levenshtein(&x, &z) <= levenshtein(&x, &y) + levenshtein(&y, &z));
            let es = edit_similarity(&x, &y);
            prop_assert!((0.0..=1.0).contains(&es));
        }

        #[test]
        fn exact_match_implies_perfect_scores(x in "[a-z_ =().\n]{0,20}") {
            prop_assert_eq!(edit_similarity(&x, &x), 1.0);
            prop_assert_eq!(identifier_scores(&x, &x), IdentifierScores { id_em: 1, id_f1: 1.0 });
        }

        #[test]
        fn f1_symmetric(x in "[abc ]{0,12}", y in "[abc ]{0,12}") {
            let a = identifier_scores(&x, &y).id_f1;
            let b = identifier_scores(&y, &x).id_f1;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
