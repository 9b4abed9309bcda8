use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn coderag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coderag"))
        .args(args)
        .env_remove("CODERAG_LM_ENDPOINT")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_repo(dir: &Path) {
    fs::write(
        dir.join("a.py"),
        "LIMIT = 3\n\n\ndef load(path):\n    return open(path).read()\n\n\nclass Store:\n    size = 0\n\n    def put(self, x):\n        self.size += 1\n",
    )
    .unwrap();
    fs::write(dir.join("b.py"), "def save(data):\n    return data\n").unwrap();
}

fn index(repo: &Path, out: &Path) {
    let o = coderag(&["index", "--repo", repo.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn index_writes_all_files_and_counts_kinds() {
    let repo = tempfile::tempdir().unwrap();
    small_repo(repo.path());
    let out = tempfile::tempdir().unwrap();
    let o = coderag(&["index", "--repo", repo.path().to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for (kind, n) in [("Function", 2), ("GlobalVariable", 1), ("ClassVariable", 1), ("ClassFunction", 1)] {
        assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == [kind, &n.to_string()]), "{kind} {n} in {text}");
    }
    for f in ["kb.jsonl", "manifest.json", "sparse.idx", "dense.vec"] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn reindexing_is_byte_identical() {
    let repo = tempfile::tempdir().unwrap();
    small_repo(repo.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    index(repo.path(), a.path());
    index(repo.path(), b.path());
    for f in ["kb.jsonl", "manifest.json", "sparse.idx", "dense.vec"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_repository_is_a_usage_error() {
    let repo = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = coderag(&["index", "--repo", repo.path().to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no source files"), "{}", stderr(&o));
}

#[test]
fn missing_index_points_at_the_index_command() {
    let dir = tempfile::tempdir().unwrap();
    let task = fixtures().join("parse_conf_task.jsonl");
    let o = coderag(&["complete", "--task", task.to_str().unwrap(), "--index", dir.path().join("none").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("coderag index --repo"), "{}", stderr(&o));
}

#[test]
fn invalid_parameters_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let task = fixtures().join("parse_conf_task.jsonl");
    for bad in [["--u", "0"], ["--w", "1"], ["--paths", "bm25"]] {
        let mut args = vec!["complete", "--task", task.to_str().unwrap(), "--index", dir.path().to_str().unwrap()];
        args.extend(bad);
        let o = coderag(&args);
        assert_eq!(o.status.code(), Some(2), "{bad:?}: {}", stderr(&o));
    }
}

fn parse_conf_index() -> tempfile::TempDir {
    let out = tempfile::tempdir().unwrap();
    index(&fixtures().join("parse_conf_repo"), out.path());
    out
}

#[test]
fn complete_prints_completion_and_dumps_enabled_paths_only() {
    let idx = parse_conf_index();
    let dump = tempfile::tempdir().unwrap();
    let task = fixtures().join("parse_conf_task.jsonl");
    let o = coderag(&[
        "complete",
        "--task",
        task.to_str().unwrap(),
        "--index",
        idx.path().to_str().unwrap(),
        "--paths",
        "sparse,dataflow",
        "--dump-dir",
        dump.path().to_str().unwrap(),
        "--dot",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(line["task_id"], "parse_conf");
    assert_eq!(line["generated"], "ig");

    let d = dump.path().join("parse_conf");
    for f in ["config.toml", "query.json", "retrieval_list.json", "rerank_outcome.json", "prompt.json", "path_sparse.json", "path_dataflow.json", "dataflow.dot"] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    assert!(!d.join("path_dense.json").exists());
    let list: Value = serde_json::from_str(&fs::read_to_string(d.join("retrieval_list.json")).unwrap()).unwrap();
    for c in list["candidates"].as_array().unwrap() {
        assert!(c["path"] == "sparse" || c["path"] == "dataflow", "{c}");
    }
    let config = fs::read_to_string(d.join("config.toml")).unwrap();
    assert!(config.contains("paths = \"sparse,dataflow\""), "{config}");
    let prompt: Value = serde_json::from_str(&fs::read_to_string(d.join("prompt.json")).unwrap()).unwrap();
    assert!(prompt["text"].as_str().unwrap().contains("def parse_config(path):"));
}

#[test]
fn evaluate_then_distill() {
    let idx = parse_conf_index();
    let work = tempfile::tempdir().unwrap();
    let task = fixtures().join("parse_conf_task.jsonl");
    let report = work.path().join("report.json");
    let lists = work.path().join("lists.jsonl");
    let o = coderag(&[
        "evaluate",
        "--dataset",
        task.to_str().unwrap(),
        "--index",
        idx.path().to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--lists-out",
        lists.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("EM 0.00"), "{}", stdout(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["per_task"].as_array().unwrap().len(), 1);
    assert!(r["config"]["j"] == 15);

    let samples = work.path().join("samples.jsonl");
    let o = coderag(&[
        "distill",
        "--in",
        lists.to_str().unwrap(),
        "--index",
        idx.path().to_str().unwrap(),
        "--out",
        samples.to_str().unwrap(),
        "--seed",
        "7",
        "--sizes",
        "2,3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read_to_string(&samples).unwrap();
    for line in first.lines() {
        let s: Value = serde_json::from_str(line).unwrap();
        let chosen = &s["chosen_id"];
        let agree = s["votes"].as_array().unwrap().iter().filter(|v| *v == chosen).count();
        assert!(agree >= 4);
    }
    let again = work.path().join("again.jsonl");
    let o = coderag(&["distill", "--in", lists.to_str().unwrap(), "--index", idx.path().to_str().unwrap(), "--out", again.to_str().unwrap(), "--seed", "7", "--sizes", "2,3"]);
    assert!(o.status.success());
    assert_eq!(first, fs::read_to_string(&again).unwrap());
}

#[test]
fn bench_timings_marks_ablated_stages() {
    let idx = parse_conf_index();
    let task = fixtures().join("parse_conf_task.jsonl");
    let o = coderag(&["bench-timings", "--dataset", task.to_str().unwrap(), "--index", idx.path().to_str().unwrap(), "--paths", "sparse"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let row = |name: &str| text.lines().find(|l| l.starts_with(name)).unwrap_or_default().to_string();
    assert!(row("dense retrieval").ends_with("skipped"), "{text}");
    assert!(row("dataflow retrieval").ends_with("skipped"), "{text}");
    assert!(!row("sparse retrieval").ends_with("skipped"), "{text}");
    assert!(!row("reranking").ends_with("skipped"), "{text}");
    assert!(!row("query construction").is_empty());
}
