use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use coderag::config::RunConfig;
use coderag::dataflow;
use coderag::dense::{DenseIndex, DENSE_FILE};
use coderag::distill::{self, DistillConfig, DistillInput};
use coderag::eval::{self, MetricsReport};
use coderag::kb::{self, KbError, KnowledgeBase, KB_FILE, MANIFEST_FILE};
use coderag::pipeline::{self, Completion, CompletionTask, StageTimings};
use coderag::rerank::Snippet;
use coderag::retriever::{Indexes, RetrievalList, RetrievalPath};
use coderag::sparse::SparseIndex;
use rayon::prelude::*;
use serde::Serialize;

use crate::settings;
use crate::{BenchArgs, CompleteArgs, DistillArgs, EvaluateArgs, IndexArgs, IndexLocation};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(e: impl Display) -> Self {
        CliError { code: EXIT_USAGE, message: e.to_string() }
    }

    pub fn runtime(e: impl Display) -> Self {
        CliError { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

pub fn index(args: IndexArgs) -> Result<()> {
    let config = args.settings.resolve()?;
    let (kb, report) = kb::build_knowledge_base(&args.repo).map_err(|e| match e {
        KbError::EmptyRepository(_) | KbError::Io { .. } => CliError::usage(e),
        other => CliError::runtime(other),
    })?;
    for pe in &report.parse_errors {
        log::warn!("parse error: {pe}");
    }
    for (file, why) in &report.skipped {
        log::info!("skipped {file}: {why}");
    }
    let sparse = SparseIndex::build(&kb);
    let embedder = settings::embedder(&config);
    let dense = DenseIndex::build(&kb, embedder.as_ref()).map_err(CliError::runtime)?;

    create_dir(&args.out)?;
    kb.save(&args.out).map_err(CliError::runtime)?;
    sparse.save(&args.out).map_err(CliError::runtime)?;
    dense.save(&args.out).map_err(CliError::runtime)?;

    println!(
        "indexed {} of {} files ({} parse errors): {} items",
        report.files_indexed,
        report.files_seen,
        report.parse_errors.len(),
        kb.len()
    );
    for (kind, n) in kb.kind_counts() {
        println!("{:<16}{n}", kind.name());
    }
    Ok(())
}

/// Everything loaded from one index directory.
pub struct LoadedIndex {
    pub kb: KnowledgeBase,
    pub sparse: SparseIndex,
    pub dense: Option<DenseIndex>,
}

impl LoadedIndex {
    pub fn load(dir: &Path, need_dense: bool) -> Result<Self> {
        if !dir.join(KB_FILE).is_file() || !dir.join(MANIFEST_FILE).is_file() {
            return Err(CliError::usage(format!(
                "no index at {} (run `coderag index --repo <REPO> --out {}` first)",
                dir.display(),
                dir.display()
            )));
        }
        let kb = KnowledgeBase::load(dir).map_err(CliError::runtime)?;
        let sparse = SparseIndex::load(dir).map_err(CliError::runtime)?;
        let dense = if dir.join(DENSE_FILE).is_file() {
            Some(DenseIndex::load(dir).map_err(CliError::runtime)?)
        } else if need_dense {
            return Err(CliError::usage(format!(
                "{} has no {DENSE_FILE}; rebuild it with `coderag index` or drop the dense path",
                dir.display()
            )));
        } else {
            None
        };
        Ok(LoadedIndex { kb, sparse, dense })
    }

    pub fn indexes(&self) -> Indexes<'_> {
        Indexes { kb: &self.kb, sparse: &self.sparse, dense: self.dense.as_ref() }
    }
}

/// Index directories keyed by the task `repo` value they serve.
struct IndexSet {
    single: Option<LoadedIndex>,
    per_repo: HashMap<PathBuf, LoadedIndex>,
}

impl IndexSet {
    fn load(location: &IndexLocation, tasks: &[CompletionTask], config: &RunConfig) -> Result<Self> {
        let need_dense = config.paths.contains(RetrievalPath::Dense);
        match (&location.index, &location.index_root) {
            (Some(dir), _) => Ok(IndexSet { single: Some(LoadedIndex::load(dir, need_dense)?), per_repo: HashMap::new() }),
            (None, Some(root)) => {
                let mut per_repo = HashMap::new();
                for task in tasks {
                    if per_repo.contains_key(&task.repo_root) {
                        continue;
                    }
                    let name = task.repo_root.file_name().ok_or_else(|| {
                        CliError::usage(format!("task {}: repo path has no final component", task.task_id))
                    })?;
                    per_repo.insert(task.repo_root.clone(), LoadedIndex::load(&root.join(name), need_dense)?);
                }
                Ok(IndexSet { single: None, per_repo })
            }
            (None, None) => Err(CliError::usage("one of --index or --index-root is required")),
        }
    }

    fn for_task(&self, task: &CompletionTask) -> &LoadedIndex {
        self.single.as_ref().unwrap_or_else(|| &self.per_repo[&task.repo_root])
    }
}

fn read_tasks(path: &Path) -> Result<Vec<CompletionTask>> {
    let file = File::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let tasks = eval::load_tasks(BufReader::new(file)).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if tasks.is_empty() {
        return Err(CliError::usage(format!("{}: no tasks", path.display())));
    }
    Ok(tasks)
}

fn safe_name(task_id: &str) -> String {
    task_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

/// Writes the artifacts of one task under `dir/<task_id>/`.
fn dump_task(
    dir: &Path,
    task: &CompletionTask,
    completion: &Completion,
    loaded: &LoadedIndex,
    config: &RunConfig,
    dot: bool,
) -> Result<()> {
    let out = dir.join(safe_name(&task.task_id));
    create_dir(&out)?;
    let a = &completion.artifacts;
    write_file(&out.join("config.toml"), config.to_toml())?;
    write_file(&out.join("query.json"), to_json(&a.query))?;
    write_file(&out.join("retrieval_list.json"), to_json(&a.retrieval_list))?;
    write_file(&out.join("rerank_outcome.json"), to_json(&a.rerank_outcome))?;
    write_file(&out.join("prompt.json"), to_json(&a.prompt))?;
    write_file(&out.join("generated.txt"), &completion.generated)?;

    let prefix = coderag::query::normalize_newlines(&task.prefix).into_owned();
    let query_text = a.query.combined_text.as_str();
    let graph = dataflow::build_dataflow_graph(&prefix);
    if config.paths.contains(RetrievalPath::Sparse) {
        write_file(&out.join("path_sparse.json"), to_json(&loaded.sparse.retrieve(query_text, config.j)))?;
    }
    if config.paths.contains(RetrievalPath::Dense) {
        if let Some(dense) = &loaded.dense {
            let embedder = settings::embedder(config);
            let hits = dense.retrieve(query_text, embedder.as_ref(), config.j).map_err(CliError::runtime)?;
            write_file(&out.join("path_dense.json"), to_json(&hits))?;
        }
    }
    if config.paths.contains(RetrievalPath::Dataflow) {
        let hits = match &graph {
            Ok(g) => dataflow::dataflow_retrieve(g, &loaded.kb),
            Err(_) => Vec::new(),
        };
        let hits: Vec<(String, String)> = hits.into_iter().map(|(id, s)| (id.0, s.to_string())).collect();
        write_file(&out.join("path_dataflow.json"), to_json(&hits))?;
    }
    if dot {
        if let Ok(g) = &graph {
            write_file(&out.join("dataflow.dot"), g.to_dot())?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CompleteOutput<'a> {
    task_id: &'a str,
    generated: &'a str,
}

pub fn complete(args: CompleteArgs) -> Result<()> {
    let config = args.settings.resolve()?;
    let tasks = read_tasks(&args.task)?;
    let indexes = IndexSet::load(&args.location, &tasks, &config)?;
    let clients = settings::clients(&config);
    let pipeline_config = config.pipeline();

    let results: Vec<_> = tasks
        .par_iter()
        .map(|task| {
            let loaded = indexes.for_task(task);
            pipeline::complete(task, loaded.indexes(), &clients, &pipeline_config).map(|c| (task, loaded, c))
        })
        .collect();

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut failures = 0;
    for (task, result) in tasks.iter().zip(results) {
        match result {
            Ok((task, loaded, completion)) => {
                if let Some(dir) = &args.dump_dir {
                    dump_task(dir, task, &completion, loaded, &config, args.dot)?;
                }
                let line = CompleteOutput { task_id: &task.task_id, generated: &completion.generated };
                writeln!(out, "{}", serde_json::to_string(&line).expect("serializable")).map_err(CliError::runtime)?;
            }
            Err(e) => {
                failures += 1;
                eprintln!("task {}: {e}", task.task_id);
            }
        }
    }
    if failures > 0 {
        return Err(CliError::runtime(format!("{failures} of {} tasks failed", tasks.len())));
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let config = args.settings.resolve()?;
    let tasks = read_tasks(&args.dataset)?;
    let indexes = IndexSet::load(&args.location, &tasks, &config)?;
    let clients = settings::clients(&config);
    let pipeline_config = config.pipeline();

    let lists: std::sync::Mutex<BTreeMap<String, RetrievalList>> = Default::default();
    let dump_errors: std::sync::Mutex<Vec<String>> = Default::default();
    let report = eval::evaluate(&tasks, |task| {
        let loaded = indexes.for_task(task);
        let completion = pipeline::complete(task, loaded.indexes(), &clients, &pipeline_config).map_err(|e| e.to_string())?;
        if let Some(dir) = &args.dump_dir {
            if let Err(e) = dump_task(dir, task, &completion, loaded, &config, false) {
                dump_errors.lock().unwrap().push(e.message);
            }
        }
        lists.lock().unwrap().insert(task.task_id.clone(), completion.artifacts.retrieval_list.clone());
        Ok(completion.generated)
    })
    .map_err(CliError::usage)?;
    if let Some(e) = dump_errors.into_inner().unwrap().into_iter().next() {
        return Err(CliError::runtime(e));
    }
    for t in report.per_task.iter().filter(|t| t.failure.is_some()) {
        log::warn!("task {} failed: {}", t.task_id, t.failure.as_deref().unwrap_or_default());
    }

    if let Some(path) = &args.lists_out {
        let lists = lists.into_inner().unwrap();
        let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?);
        for task in &tasks {
            if let Some(list) = lists.get(&task.task_id) {
                let line = ListRecord { task_id: task.task_id.clone(), repo: Some(task.repo_root.clone()), list: list.clone() };
                serde_json::to_writer(&mut w, &line).map_err(CliError::runtime)?;
                w.write_all(b"\n").map_err(CliError::runtime)?;
            }
        }
        w.flush().map_err(CliError::runtime)?;
    }
    if let Some(path) = &args.report {
        write_report(path, &report, &config)?;
    }
    println!("{}", report.summary_line());
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a RunConfig,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

fn write_report(path: &Path, report: &MetricsReport, config: &RunConfig) -> Result<()> {
    write_file(path, to_json(&ReportFile { config, metrics: report }))
}

/// A line of `--lists-out` / `distill --in`.
#[derive(Debug, Serialize, serde::Deserialize)]
struct ListRecord {
    task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    repo: Option<PathBuf>,
    #[serde(flatten)]
    list: RetrievalList,
}

pub fn distill(args: DistillArgs) -> Result<()> {
    let mut config = args.settings.resolve()?;
    if let Some(sizes) = &args.sizes {
        config.distill_sizes = sizes.clone();
    }
    if args.shuffle_votes {
        config.shuffle_votes = true;
    }
    config.validate().map_err(CliError::usage)?;
    let loaded = LoadedIndex::load(&args.index, false)?;

    let file = File::open(&args.input).map_err(|e| CliError::usage(format!("{}: {e}", args.input.display())))?;
    let mut inputs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ListRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::usage(format!("{}:{}: {e}", args.input.display(), i + 1)))?;
        let mut candidates = Vec::with_capacity(rec.list.candidates.len());
        for c in &rec.list.candidates {
            let item = loaded.kb.get(&c.id).ok_or_else(|| {
                CliError::usage(format!("{}: item {} is not in the index", rec.task_id, c.id.as_str()))
            })?;
            candidates.push(Snippet { id: c.id.clone(), text: item.text.clone() });
        }
        inputs.push(DistillInput { query: rec.list.query.combined_text.clone(), candidates });
    }

    let picker = settings::picker(&config);
    let dc = DistillConfig { seed: config.seed, shuffle_votes: config.shuffle_votes };
    let (report, failure) = match distill::build_distillation_data(&inputs, picker.as_ref(), &config.distill_sizes, dc) {
        Ok(r) => (r, None),
        Err(e) => {
            let msg = e.to_string();
            (e.partial, Some(msg))
        }
    };
    let mut w = BufWriter::new(File::create(&args.out).map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?);
    distill::write_jsonl(&report.samples, &mut w).map_err(CliError::runtime)?;
    w.flush().map_err(CliError::runtime)?;
    println!(
        "{} samples from {} subsets over {} queries ({} draws skipped)",
        report.samples.len(),
        report.subsets,
        inputs.len(),
        report.skipped.len()
    );
    match failure {
        Some(msg) => Err(CliError::runtime(format!("{msg}; partial output written"))),
        None => Ok(()),
    }
}

fn mean_secs(xs: &[Option<Duration>]) -> Option<f64> {
    let got: Vec<f64> = xs.iter().flatten().map(Duration::as_secs_f64).collect();
    if got.is_empty() {
        None
    } else {
        Some(got.iter().sum::<f64>() / got.len() as f64)
    }
}

pub fn bench_timings(args: BenchArgs) -> Result<()> {
    let config = args.settings.resolve()?;
    let tasks = read_tasks(&args.dataset)?;
    let indexes = IndexSet::load(&args.location, &tasks, &config)?;
    let clients = settings::clients(&config);
    let pipeline_config = config.pipeline();

    // Sequential, so stages do not compete for cores.
    let mut timings: Vec<StageTimings> = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let loaded = indexes.for_task(task);
        match pipeline::complete(task, loaded.indexes(), &clients, &pipeline_config) {
            Ok(c) => timings.push(c.timings),
            Err(e) => log::warn!("task {}: {e}", task.task_id),
        }
    }
    if timings.is_empty() {
        return Err(CliError::runtime("every task failed"));
    }
    let reranked = !config.paths.is_empty();
    let rows: [(&str, Option<f64>); 5] = [
        ("query construction", mean_secs(&timings.iter().map(|t| Some(t.query)).collect::<Vec<_>>())),
        ("sparse retrieval", mean_secs(&timings.iter().map(|t| t.paths.sparse).collect::<Vec<_>>())),
        ("dense retrieval", mean_secs(&timings.iter().map(|t| t.paths.dense).collect::<Vec<_>>())),
        ("dataflow retrieval", mean_secs(&timings.iter().map(|t| t.paths.dataflow).collect::<Vec<_>>())),
        ("reranking", if reranked { mean_secs(&timings.iter().map(|t| Some(t.rerank)).collect::<Vec<_>>()) } else { None }),
    ];
    println!("{:<20} {:>12}", "stage", "mean seconds");
    for (name, v) in rows {
        match v {
            Some(s) => println!("{name:<20} {s:>12.6}"),
            None => println!("{name:<20} {:>12}", "skipped"),
        }
    }
    println!("({} of {} tasks timed)", timings.len(), tasks.len());
    Ok(())
}
