//! Repository code knowledge base.
//!
//! Every Python file of a repository is parsed with tree-sitter and four kinds
//! of elements are pulled out of the syntax tree: top-level functions,
//! module-level assignments, class-body assignments and methods. Nested
//! functions and classes stay inside the text of their enclosing item.
//!
//! The knowledge base persists as `kb.jsonl` (one item per line) plus
//! `manifest.json`.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tree_sitter::{Node, Parser, Tree};

use crate::lexer;

pub const KB_FILE: &str = "kb.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const SOURCE_EXTENSION: &str = "py";
pub const MAX_FILE_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl ItemId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ItemKind {
    Function,
    GlobalVariable,
    ClassVariable,
    ClassFunction,
}

impl ItemKind {
    pub const ALL: [ItemKind; 4] = [
        ItemKind::Function,
        ItemKind::GlobalVariable,
        ItemKind::ClassVariable,
        ItemKind::ClassFunction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ItemKind::Function => "Function",
            ItemKind::GlobalVariable => "GlobalVariable",
            ItemKind::ClassVariable => "ClassVariable",
            ItemKind::ClassFunction => "ClassFunction",
        }
    }

    /// Functions and methods carry a whole body; variables are line-level.
    pub fn is_callable(self) -> bool {
        matches!(self, ItemKind::Function | ItemKind::ClassFunction)
    }
}

impl fmt::Display for ItemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inclusive, 1-based line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

impl LineSpan {
    pub fn new(start: usize, end: usize) -> Self {
        LineSpan { start, end }
    }

    pub fn contains(&self, line: usize) -> bool {
        self.start <= line && line <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeKnowledgeItem {
    pub id: ItemId,
    pub kind: ItemKind,
    /// `name` for module-level items, `Class.name` for class members.
    /// Assignments binding several names join them with `,`.
    pub qualified_name: String,
    pub file_path: String,
    pub line_span: LineSpan,
    pub text: String,
    pub identifiers: Vec<String>,
}

impl CodeKnowledgeItem {
    /// The individual qualified names bound by this item.
    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.qualified_name.split(',')
    }
}

/// Stable id derived from the item's location and kind. `ordinal`
/// disambiguates several same-kind items on one span (`a = 1; b = 2`).
pub fn item_id(file_path: &str, span: LineSpan, kind: ItemKind, ordinal: usize) -> ItemId {
    let mut h = Sha256::new();
    h.update(file_path.as_bytes());
    h.update([0]);
    h.update(span.start.to_le_bytes());
    h.update(span.end.to_le_bytes());
    h.update(kind.name().as_bytes());
    h.update(ordinal.to_le_bytes());
    let digest = h.finalize();
    ItemId(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{file_path}: {diagnostic}")]
pub struct ParseError {
    pub file_path: String,
    pub diagnostic: String,
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("no source files under {0}")]
    EmptyRepository(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {file} at line {line}: {message}")]
    Format {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("invalid knowledge base: {0}")]
    Invariant(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KbError + '_ {
    move |source| KbError::Io { path: path.to_path_buf(), source }
}

/// A parsed file.
pub struct SyntaxTree {
    tree: Tree,
}

impl SyntaxTree {
    pub fn root(&self) -> Node<'_> {
        self.tree.root_node()
    }

    pub fn sexp(&self) -> String {
        self.tree.root_node().to_sexp()
    }
}

thread_local! {
    static PARSER: RefCell<Parser> = RefCell::new({
        let mut p = Parser::new();
        p.set_language(&tree_sitter_python::LANGUAGE.into())
            .expect("bundled python grammar matches tree-sitter ABI");
        p
    });
}

/// Parses Python source. Any error or missing node in the tree is reported as
/// a [`ParseError`] so the caller can skip the file.
pub fn parse_file(source: &str, file_path: &str) -> Result<SyntaxTree, ParseError> {
    let tree = PARSER
        .with(|p| p.borrow_mut().parse(source, None))
        .ok_or_else(|| ParseError {
            file_path: file_path.to_string(),
            diagnostic: "parser returned no tree".to_string(),
        })?;
    if tree.root_node().has_error() {
        let diagnostic = first_error(tree.root_node())
            .map(|n| {
                let p = n.start_position();
                if n.is_missing() {
                    format!("missing `{}` at line {}, column {}", n.kind(), p.row + 1, p.column + 1)
                } else {
                    format!("syntax error at line {}, column {}", p.row + 1, p.column + 1)
                }
            })
            .unwrap_or_else(|| "syntax error".to_string());
        return Err(ParseError { file_path: file_path.to_string(), diagnostic });
    }
    Ok(SyntaxTree { tree })
}

fn first_error(node: Node<'_>) -> Option<Node<'_>> {
    if node.is_error() || node.is_missing() {
        return Some(node);
    }
    let mut cursor = node.walk();
    let children: Vec<_> = node.children(&mut cursor).collect();
    children
        .into_iter()
        .filter(|c| c.has_error() || c.is_missing())
        .find_map(first_error)
}

fn node_span(node: Node<'_>) -> LineSpan {
    let start = node.start_position().row + 1;
    let end_pos = node.end_position();
    let end = if end_pos.column == 0 && end_pos.row + 1 > start {
        end_pos.row
    } else {
        end_pos.row + 1
    };
    LineSpan::new(start, end.max(start))
}

fn node_text<'s>(node: Node<'_>, source: &'s str) -> &'s str {
    &source[node.byte_range()]
}

/// Source lines `span.start..=span.end` joined with `\n`.
pub fn slice_lines(source: &str, span: LineSpan) -> String {
    source
        .split('\n')
        .skip(span.start.saturating_sub(1))
        .take(span.end + 1 - span.start)
        .collect::<Vec<_>>()
        .join("\n")
}

/// Names bound by an assignment's left side, following chained assignments
/// (`a = b = 1`). Attribute and subscript targets bind nothing.
fn assignment_targets(node: Node<'_>, source: &str, out: &mut Vec<String>) {
    if let Some(left) = node.child_by_field_name("left") {
        pattern_names(left, source, out);
    }
    if let Some(right) = node.child_by_field_name("right") {
        if right.kind() == "assignment" {
            assignment_targets(right, source, out);
        }
    }
}

fn pattern_names(node: Node<'_>, source: &str, out: &mut Vec<String>) {
    match node.kind() {
        "identifier" => out.push(node_text(node, source).to_string()),
        "pattern_list" | "tuple_pattern" | "list_pattern" | "list_splat_pattern" | "parenthesized_expression" => {
            let mut cursor = node.walk();
            for child in node.named_children(&mut cursor) {
                pattern_names(child, source, out);
            }
        }
        _ => {}
    }
}

/// Returns the definition node of a (possibly decorated) definition and the
/// node whose span covers the decorators.
fn unwrap_decorated(node: Node<'_>) -> Option<(Node<'_>, Node<'_>)> {
    match node.kind() {
        "function_definition" | "class_definition" => Some((node, node)),
        "decorated_definition" => node.child_by_field_name("definition").map(|d| (d, node)),
        _ => None,
    }
}

struct Extractor<'s> {
    source: &'s str,
    file_path: &'s str,
    items: Vec<CodeKnowledgeItem>,
    ordinals: HashMap<(LineSpan, ItemKind), usize>,
}

impl<'s> Extractor<'s> {
    fn push(&mut self, kind: ItemKind, qualified_name: String, span_node: Node<'_>) {
        let line_span = node_span(span_node);
        let ordinal = self.ordinals.entry((line_span, kind)).or_insert(0);
        let id = item_id(self.file_path, line_span, kind, *ordinal);
        *ordinal += 1;
        let text = slice_lines(self.source, line_span);
        let identifiers = lexer::distinct_identifiers(&text);
        self.items.push(CodeKnowledgeItem {
            id,
            kind,
            qualified_name,
            file_path: self.file_path.to_string(),
            line_span,
            text,
            identifiers,
        });
    }

    fn assignments<'t>(&mut self, stmt: Node<'t>) -> Vec<(Vec<String>, Node<'t>)> {
        let mut found = Vec::new();
        let mut cursor = stmt.walk();
        for child in stmt.named_children(&mut cursor) {
            if child.kind() == "assignment" {
                let mut names = Vec::new();
                assignment_targets(child, self.source, &mut names);
                if !names.is_empty() {
                    found.push((names, child));
                }
            }
        }
        found
    }

    fn module(&mut self, root: Node<'_>) {
        let mut cursor = root.walk();
        let children: Vec<_> = root.named_children(&mut cursor).collect();
        for child in children {
            if child.kind() == "expression_statement" {
                for (names, node) in self.assignments(child) {
                    self.push(ItemKind::GlobalVariable, names.join(","), node);
                }
                continue;
            }
            let Some((def, outer)) = unwrap_decorated(child) else { continue };
            let Some(name) = def.child_by_field_name("name") else { continue };
            let name = node_text(name, self.source).to_string();
            match def.kind() {
                "function_definition" => self.push(ItemKind::Function, name, outer),
                "class_definition" => self.class_body(&name, def),
                _ => {}
            }
        }
    }

    fn class_body(&mut self, class_name: &str, class: Node<'_>) {
        let Some(body) = class.child_by_field_name("body") else { return };
        let mut cursor = body.walk();
        let children: Vec<_> = body.named_children(&mut cursor).collect();
        for child in children {
            if child.kind() == "expression_statement" {
                for (names, node) in self.assignments(child) {
                    let qualified: Vec<String> =
                        names.iter().map(|n| format!("{class_name}.{n}")).collect();
                    self.push(ItemKind::ClassVariable, qualified.join(","), node);
                }
                continue;
            }
            let Some((def, outer)) = unwrap_decorated(child) else { continue };
            if def.kind() != "function_definition" {
                continue;
            }
            if let Some(name) = def.child_by_field_name("name") {
                let name = node_text(name, self.source);
                self.push(ItemKind::ClassFunction, format!("{class_name}.{name}"), outer);
            }
        }
    }
}

/// Extracts the knowledge items of one parsed file, in source order.
pub fn extract_items(tree: &SyntaxTree, source: &str, file_path: &str) -> Vec<CodeKnowledgeItem> {
    let mut ex = Extractor { source, file_path, items: Vec::new(), ordinals: HashMap::new() };
    ex.module(tree.root());
    ex.items.sort_by_key(|it| it.line_span);
    ex.items
}

/// Files skipped or rejected while building.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexReport {
    pub files_seen: usize,
    pub files_indexed: usize,
    pub parse_errors: Vec<ParseError>,
    /// (file_path, reason)
    pub skipped: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub repo_root: PathBuf,
    pub files: BTreeMap<String, String>,
    /// Unix seconds; honours `SOURCE_DATE_EPOCH`.
    pub built_at: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub items: Vec<CodeKnowledgeItem>,
    pub repo_root: PathBuf,
    /// file_path → sha256 of the file contents
    pub file_manifest: BTreeMap<String, String>,
    pub built_at: u64,
    by_id: HashMap<ItemId, usize>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
            && self.repo_root == other.repo_root
            && self.file_manifest == other.file_manifest
            && self.built_at == other.built_at
    }
}

fn build_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

enum FileOutcome {
    Indexed { hash: String, items: Vec<CodeKnowledgeItem> },
    Failed(ParseError),
    Skipped(String),
}

fn process_file(abs: &Path, rel: &str) -> Result<FileOutcome, KbError> {
    let meta = fs::metadata(abs).map_err(io_err(abs))?;
    if meta.len() > MAX_FILE_BYTES {
        log::warn!("skipping {rel}: {} bytes exceeds {MAX_FILE_BYTES}", meta.len());
        return Ok(FileOutcome::Skipped(format!("larger than {MAX_FILE_BYTES} bytes")));
    }
    let bytes = fs::read(abs).map_err(io_err(abs))?;
    let Ok(source) = std::str::from_utf8(&bytes) else {
        return Ok(FileOutcome::Failed(ParseError {
            file_path: rel.to_string(),
            diagnostic: "not valid UTF-8".to_string(),
        }));
    };
    match parse_file(source, rel) {
        Ok(tree) => Ok(FileOutcome::Indexed {
            hash: sha256_hex(&bytes),
            items: extract_items(&tree, source, rel),
        }),
        Err(e) => {
            log::warn!("skipping unparsable file {e}");
            Ok(FileOutcome::Failed(e))
        }
    }
}

fn source_files(root: &Path) -> Result<Vec<(PathBuf, String)>, KbError> {
    let walker = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| {
            e.depth() == 0 || {
                let name = e.file_name().to_string_lossy();
                !(e.file_type().is_dir() && (name.starts_with('.') || name == "__pycache__"))
            }
        });
    let mut files = Vec::new();
    for entry in walker {
        let entry = entry.map_err(|e| KbError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf()),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")),
        })?;
        if !entry.file_type().is_file()
            || entry.path().extension().and_then(|e| e.to_str()) != Some(SOURCE_EXTENSION)
        {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        files.push((entry.path().to_path_buf(), rel));
    }
    files.sort_by(|a, b| a.1.cmp(&b.1));
    Ok(files)
}

/// Parses every `.py` file under `repo_root` (in parallel) and collects the
/// knowledge items ordered by file path, then line span.
pub fn build_knowledge_base(repo_root: &Path) -> Result<(KnowledgeBase, IndexReport), KbError> {
    let files = source_files(repo_root)?;
    if files.is_empty() {
        return Err(KbError::EmptyRepository(repo_root.to_path_buf()));
    }
    let outcomes: Vec<Result<FileOutcome, KbError>> =
        files.par_iter().map(|(abs, rel)| process_file(abs, rel)).collect();

    let mut report = IndexReport { files_seen: files.len(), ..Default::default() };
    let mut items = Vec::new();
    let mut manifest = BTreeMap::new();
    for ((_, rel), outcome) in files.iter().zip(outcomes) {
        match outcome? {
            FileOutcome::Indexed { hash, items: file_items } => {
                report.files_indexed += 1;
                manifest.insert(rel.clone(), hash);
                items.extend(file_items);
            }
            FileOutcome::Failed(e) => report.parse_errors.push(e),
            FileOutcome::Skipped(reason) => report.skipped.push((rel.clone(), reason)),
        }
    }
    let kb = KnowledgeBase::new(items, repo_root.to_path_buf(), manifest, build_timestamp())?;
    Ok((kb, report))
}

impl KnowledgeBase {
    /// Assembles a knowledge base, checking id uniqueness and manifest
    /// coverage.
    pub fn new(
        items: Vec<CodeKnowledgeItem>,
        repo_root: PathBuf,
        file_manifest: BTreeMap<String, String>,
        built_at: u64,
    ) -> Result<Self, KbError> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if by_id.insert(item.id.clone(), i).is_some() {
                return Err(KbError::Invariant(format!("duplicate item id {}", item.id)));
            }
            if !file_manifest.contains_key(&item.file_path) {
                return Err(KbError::Invariant(format!(
                    "item {} references {} which is not in the manifest",
                    item.id, item.file_path
                )));
            }
            if item.line_span.start == 0 || item.line_span.start > item.line_span.end {
                return Err(KbError::Invariant(format!(
                    "item {} has invalid line span {:?}",
                    item.id, item.line_span
                )));
            }
        }
        Ok(KnowledgeBase { items, repo_root, file_manifest, built_at, by_id })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &ItemId) -> Option<&CodeKnowledgeItem> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: &ItemId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn kind_counts(&self) -> BTreeMap<ItemKind, usize> {
        let mut counts: BTreeMap<ItemKind, usize> = ItemKind::ALL.iter().map(|k| (*k, 0)).collect();
        for item in &self.items {
            *counts.entry(item.kind).or_default() += 1;
        }
        counts
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: MANIFEST_VERSION,
            repo_root: self.repo_root.clone(),
            files: self.file_manifest.clone(),
            built_at: self.built_at,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("items serialize"));
            out.push('\n');
        }
        out
    }

    pub fn manifest_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Decodes persisted text. Both inputs are untrusted.
    pub fn from_persisted(manifest_json: &str, kb_jsonl: &str) -> Result<Self, KbError> {
        let manifest: Manifest = serde_json::from_str(manifest_json).map_err(|e| KbError::Format {
            file: MANIFEST_FILE,
            line: e.line(),
            message: e.to_string(),
        })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(KbError::Format {
                file: MANIFEST_FILE,
                line: 1,
                message: format!("unsupported format_version {}", manifest.format_version),
            });
        }
        let mut items = Vec::new();
        for (i, line) in kb_jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: CodeKnowledgeItem = serde_json::from_str(line).map_err(|e| KbError::Format {
                file: KB_FILE,
                line: i + 1,
                message: e.to_string(),
            })?;
            items.push(item);
        }
        KnowledgeBase::new(items, manifest.repo_root, manifest.files, manifest.built_at)
    }

    pub fn save(&self, dir: &Path) -> Result<(), KbError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let kb_path = dir.join(KB_FILE);
        fs::write(&kb_path, self.to_jsonl()).map_err(io_err(&kb_path))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, self.manifest_json()).map_err(io_err(&manifest_path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, KbError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let kb_path = dir.join(KB_FILE);
        let jsonl = fs::read_to_string(&kb_path).map_err(io_err(&kb_path))?;
        Self::from_persisted(&manifest, &jsonl)
    }

    /// Ids of all items, in knowledge-base order.
    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.items.iter().map(|i| &i.id)
    }

    /// Distinct files that contributed items.
    pub fn files_with_items(&self) -> HashSet<&str> {
        self.items.iter().map(|i| i.file_path.as_str()).collect()
    }
}
