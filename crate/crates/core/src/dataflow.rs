//! Def-use analysis of the unfinished file and dependency lookup in the
//! knowledge base.
//!
//! The prefix is split into logical lines by the lexer (so an unfinished
//! trailing statement still yields names). Each statement contributes
//! definition, import-binding, use and attribute-use occurrences. A use is
//! linked to the nearest definition of the same name on an earlier line, in
//! its own scope or else at module level.
//!
//! Retrieval walks backward from the uses on the last line. Every name met on
//! the walk is collected, together with what its definition reveals: the
//! class of a constructor call or annotation, the receiver class of `self`,
//! and the symbol behind an import. Attribute chains resolve one level
//! (`x.attr` with `x = Foo()` gives `Foo.attr`).

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::kb::{ItemId, ItemKind, KnowledgeBase};
use crate::lexer::{self, LogicalLine, Token, TokenKind};

/// Maximum number of def edges followed from the last line.
pub const DEFAULT_WALK_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OccurrenceKind {
    Definition,
    Use,
    ImportBinding,
    AttributeUse,
}

/// What a definition says about the value it binds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueHint {
    /// `x = Foo(...)` or `x = pkg.Foo(...)`.
    Constructor(String),
    /// `x: Foo` or a parameter `x: Foo`.
    Annotation(String),
    /// First parameter of a method of class `Foo`.
    Receiver(String),
    /// `import a.b` binds `a` with `module = ["b"]`; `from m import S as T`
    /// binds `T` with `symbol = Some("S")`.
    Import { module: Vec<String>, symbol: Option<String> },
}

impl ValueHint {
    fn type_name(&self) -> Option<&str> {
        match self {
            ValueHint::Constructor(t) | ValueHint::Annotation(t) | ValueHint::Receiver(t) => Some(t),
            ValueHint::Import { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Occurrence {
    pub name: String,
    pub line: usize,
    pub kind: OccurrenceKind,
    pub scope: usize,
    /// Statement ordinal; uses in a definition's statement are what the
    /// definition depends on.
    pub stmt: usize,
    /// For uses: the attribute chain that follows (`a.b.c` gives `[b, c]`).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub attrs: Vec<String>,
    /// For uses: whether the name (or its chain) is called.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub called: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hint: Option<ValueHint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataflowGraph {
    pub nodes: Vec<Occurrence>,
    /// `(definition node, use node)`.
    pub edges: Vec<(usize, usize)>,
    /// Distinct names used by the final statement, in order of appearance.
    pub last_line_uses: Vec<String>,
    /// Use nodes of the final statement.
    pub last_line_nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataflowError {
    #[error("dataflow graph unavailable: {0}")]
    GraphUnavailable(String),
}

#[derive(Default)]
struct Builder {
    nodes: Vec<Occurrence>,
    stmt: usize,
    scope: usize,
}

impl Builder {
    fn add(&mut self, tok: &Token<'_>, kind: OccurrenceKind, hint: Option<ValueHint>) -> usize {
        self.nodes.push(Occurrence {
            name: tok.text.to_string(),
            line: tok.line,
            kind,
            scope: self.scope,
            stmt: self.stmt,
            attrs: Vec::new(),
            called: false,
            hint,
        });
        self.nodes.len() - 1
    }

    fn def(&mut self, tok: &Token<'_>, hint: Option<ValueHint>) {
        self.add(tok, OccurrenceKind::Definition, hint);
    }

    /// Records uses (and walrus / comprehension / lambda definitions) in an
    /// expression.
    fn expr(&mut self, toks: &[Token<'_>]) {
        let mut local: HashSet<&str> = HashSet::new();
        let mut depth = 0usize;
        let mut i = 0;
        let mut binder_until: Option<&str> = None;
        let first_node = self.nodes.len();
        while i < toks.len() {
            let t = &toks[i];
            match t.kind {
                TokenKind::Op => {
                    match t.text {
                        "(" | "[" | "{" => depth += 1,
                        ")" | "]" | "}" => depth = depth.saturating_sub(1),
                        _ => {}
                    }
                    if binder_until.is_some_and(|end| t.text == end) {
                        binder_until = None;
                    }
                    i += 1;
                    continue;
                }
                TokenKind::Name => {}
                _ => {
                    i += 1;
                    continue;
                }
            }
            if t.is_keyword("for") {
                binder_until = Some("in");
                i += 1;
                continue;
            }
            if t.is_keyword("lambda") {
                binder_until = Some(":");
                i += 1;
                continue;
            }
            if t.is_keyword("in") && binder_until == Some("in") {
                binder_until = None;
                i += 1;
                continue;
            }
            if !t.is_name() {
                i += 1;
                continue;
            }
            let prev_dot = i > 0 && toks[i - 1].is_op(".");
            if prev_dot {
                self.add(t, OccurrenceKind::AttributeUse, None);
                i += 1;
                continue;
            }
            let next = toks.get(i + 1);
            if binder_until.is_some() {
                local.insert(t.text);
                self.def(t, None);
                i += 1;
                continue;
            }
            if next.is_some_and(|n| n.is_op(":=")) {
                local.insert(t.text);
                self.def(t, None);
                i += 1;
                continue;
            }
            if depth > 0 && next.is_some_and(|n| n.is_op("=")) {
                // keyword argument
                i += 1;
                continue;
            }
            let node = self.add(t, OccurrenceKind::Use, None);
            let mut j = i + 1;
            let mut attrs = Vec::new();
            while j + 1 < toks.len() && toks[j].is_op(".") && toks[j + 1].kind == TokenKind::Name {
                attrs.push(toks[j + 1].text.to_string());
                j += 2;
            }
            self.nodes[node].called = toks.get(j).is_some_and(|n| n.is_op("("));
            self.nodes[node].attrs = attrs;
            i += 1;
        }
        // Names bound inside the expression are not dependencies of it.
        if !local.is_empty() {
            let mut k = first_node;
            while k < self.nodes.len() {
                let n = &self.nodes[k];
                if n.kind == OccurrenceKind::Use && local.contains(n.name.as_str()) {
                    self.nodes.remove(k);
                } else {
                    k += 1;
                }
            }
        }
    }

    /// Assignment targets: bare names are definitions, everything else
    /// (subscripts, attribute bases) is a use.
    fn targets(&mut self, toks: &[Token<'_>], hint: Option<ValueHint>) {
        // `true` for brackets that only group targets (`(a, b) = ...`),
        // `false` for subscripts and calls.
        let mut grouping: Vec<bool> = Vec::new();
        let mut bare: Vec<usize> = Vec::new();
        for (i, t) in toks.iter().enumerate() {
            let prev = i.checked_sub(1).map(|p| &toks[p]);
            if t.kind == TokenKind::Op {
                match t.text {
                    "(" | "[" | "{" => {
                        let applied = prev.is_some_and(|p| p.is_name() || p.is_op(")") || p.is_op("]"));
                        grouping.push(!applied);
                    }
                    ")" | "]" | "}" => {
                        grouping.pop();
                    }
                    _ => {}
                }
                continue;
            }
            if !t.is_name() {
                continue;
            }
            let next = toks.get(i + 1);
            let after_dot = prev.is_some_and(|p| p.is_op("."));
            let continues = next.is_some_and(|n| n.is_op(".") || n.is_op("[") || n.is_op("("));
            if !after_dot && !continues && grouping.iter().all(|&g| g) {
                bare.push(i);
            }
        }
        let single = bare.len() == 1;
        let mut k = 0;
        let mut rest: Vec<Token<'_>> = Vec::new();
        for (i, t) in toks.iter().enumerate() {
            if bare.get(k) == Some(&i) {
                k += 1;
                self.def(t, if single { hint.clone() } else { None });
            } else {
                rest.push(*t);
            }
        }
        self.expr(&rest);
    }
}

fn split_top(toks: &[Token<'_>], sep: &str) -> Vec<usize> {
    let mut depth = 0usize;
    let mut out = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        if t.kind != TokenKind::Op {
            continue;
        }
        match t.text {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => depth = depth.saturating_sub(1),
            s if s == sep && depth == 0 => out.push(i),
            _ => {}
        }
    }
    out
}

fn segments<'t, 'a>(toks: &'t [Token<'a>], sep: &str) -> Vec<&'t [Token<'a>]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in split_top(toks, sep) {
        out.push(&toks[start..i]);
        start = i + 1;
    }
    out.push(&toks[start..]);
    out
}

/// `a.b.C(` at the start of an expression gives `C`.
fn constructor_of(rhs: &[Token<'_>]) -> Option<String> {
    let mut i = 0;
    if rhs.first().is_some_and(|t| t.is_keyword("await")) {
        i = 1;
    }
    loop {
        let t = rhs.get(i)?;
        if !t.is_name() {
            return None;
        }
        match rhs.get(i + 1) {
            Some(n) if n.is_op(".") => i += 2,
            Some(n) if n.is_op("(") => return Some(t.text.to_string()),
            _ => return None,
        }
    }
}

/// Last segment of the leading dotted name of an annotation.
fn annotation_type(toks: &[Token<'_>]) -> Option<String> {
    let mut last = None;
    let mut i = 0;
    while let Some(t) = toks.get(i) {
        if t.kind != TokenKind::Name {
            break;
        }
        last = Some(t.text.to_string());
        if toks.get(i + 1).is_some_and(|n| n.is_op(".")) {
            i += 2;
        } else {
            break;
        }
    }
    last
}

const AUGMENTED: &[&str] = &["+=", "-=", "*=", "/=", "//=", "%=", "**=", ">>=", "<<=", "&=", "^=", "|=", "@="];

const COMPOUND: &[&str] = &[
    "if", "elif", "else", "while", "for", "with", "try", "except", "finally", "def", "class", "async",
];

struct Analyzer {
    b: Builder,
    /// (indent, class name for class blocks).
    blocks: Vec<(usize, Option<String>)>,
    next_scope: usize,
    open_scope: Option<usize>,
}

impl Analyzer {
    fn logical_line(&mut self, line: &LogicalLine<'_>) {
        while self.blocks.last().is_some_and(|(ind, _)| *ind >= line.indent) {
            self.blocks.pop();
        }
        let toks = &line.tokens[..];
        let first = toks.first().map(|t| t.text).unwrap_or("");
        let is_header = matches!(first, "def" | "class")
            || (first == "async" && toks.get(1).is_some_and(|t| t.is_keyword("def")));
        if line.indent == 0 {
            self.open_scope = None;
        }
        self.b.scope = self.open_scope.unwrap_or(0);
        if line.indent == 0 && is_header {
            self.next_scope += 1;
            self.open_scope = Some(self.next_scope);
        }
        for part in segments(toks, ";") {
            if !part.is_empty() {
                self.statement(part, line.indent);
            }
        }
    }

    fn statement(&mut self, toks: &[Token<'_>], indent: usize) {
        self.b.stmt += 1;
        let first = &toks[0];
        if first.kind == TokenKind::Name && COMPOUND.contains(&first.text) {
            self.compound(toks, indent);
            return;
        }
        if first.is_op("@") {
            self.b.expr(&toks[1..]);
            return;
        }
        match first.text {
            "import" if first.kind == TokenKind::Name => self.import(&toks[1..]),
            "from" if first.kind == TokenKind::Name => self.from_import(&toks[1..]),
            "global" | "nonlocal" | "pass" | "break" | "continue" if first.kind == TokenKind::Name => {}
            _ => self.simple(toks),
        }
    }

    fn simple(&mut self, toks: &[Token<'_>]) {
        let eqs = split_top(toks, "=");
        // annotated assignment: `target: T [= value]`
        let colon = split_top(toks, ":");
        if let Some(&c) = colon.first() {
            if eqs.first().map_or(true, |&e| c < e) && c > 0 {
                let ann_end = eqs.first().copied().unwrap_or(toks.len());
                let hint = annotation_type(&toks[c + 1..ann_end]).map(ValueHint::Annotation);
                self.b.expr(&toks[c + 1..ann_end]);
                if ann_end < toks.len() {
                    self.b.expr(&toks[ann_end + 1..]);
                }
                self.b.targets(&toks[..c], hint);
                return;
            }
        }
        if let Some(&last) = eqs.last() {
            let rhs = &toks[last + 1..];
            self.b.expr(rhs);
            let hint = constructor_of(rhs).map(ValueHint::Constructor);
            let mut start = 0;
            for &e in &eqs {
                self.b.targets(&toks[start..e], hint.clone());
                start = e + 1;
            }
            return;
        }
        let aug = toks
            .iter()
            .position(|t| t.kind == TokenKind::Op && AUGMENTED.contains(&t.text));
        if let Some(a) = aug {
            self.b.expr(&toks[a + 1..]);
            self.b.expr(&toks[..a]);
            self.b.targets(&toks[..a], None);
            return;
        }
        let skip = usize::from(
            toks[0].kind == TokenKind::Name
                && matches!(toks[0].text, "return" | "yield" | "assert" | "del" | "raise" | "await"),
        );
        self.b.expr(&toks[skip..]);
    }

    fn compound(&mut self, toks: &[Token<'_>], indent: usize) {
        let colons = split_top(toks, ":");
        let (head, tail) = match colons.first() {
            Some(&c) => (&toks[..c], &toks[c + 1..]),
            None => (toks, &toks[toks.len()..]),
        };
        let mut h = head;
        if h.first().is_some_and(|t| t.is_keyword("async")) {
            h = &h[1..];
        }
        match h.first().map(|t| t.text) {
            Some("def") => self.def_header(h, toks, indent),
            Some("class") => {
                if let Some(name) = h.get(1).filter(|t| t.is_name()) {
                    self.b.scope = self.enclosing_scope(indent);
                    self.b.def(name, None);
                    self.b.scope = self.open_scope.unwrap_or(0);
                    self.b.expr(&h[2..]);
                    self.blocks.push((indent, Some(name.text.to_string())));
                }
                return;
            }
            Some("for") => {
                let body = &h[1..];
                let in_at = body.iter().position(|t| t.is_keyword("in")).unwrap_or(body.len());
                if in_at < body.len() {
                    self.b.expr(&body[in_at + 1..]);
                }
                self.b.targets(&body[..in_at], None);
            }
            Some("with") => {
                for item in segments(&h[1..], ",") {
                    match item.iter().position(|t| t.is_keyword("as")) {
                        Some(a) => {
                            self.b.expr(&item[..a]);
                            let hint = constructor_of(&item[..a]).map(ValueHint::Constructor);
                            self.b.targets(&item[a + 1..], hint);
                        }
                        None => self.b.expr(item),
                    }
                }
            }
            Some("except") => match h.iter().position(|t| t.is_keyword("as")) {
                Some(a) => {
                    self.b.expr(&h[1..a]);
                    self.b.targets(&h[a + 1..], None);
                }
                None => self.b.expr(&h[1..]),
            },
            _ => self.b.expr(&h[1..]),
        }
        if !tail.is_empty() {
            self.statement(tail, indent + 1);
        }
    }

    fn enclosing_scope(&self, indent: usize) -> usize {
        if indent == 0 {
            0
        } else {
            self.open_scope.unwrap_or(0)
        }
    }

    fn def_header(&mut self, h: &[Token<'_>], whole: &[Token<'_>], indent: usize) {
        let Some(name) = h.get(1).filter(|t| t.is_name()) else {
            return;
        };
        let class = self.blocks.last().and_then(|(_, c)| c.clone());
        self.b.scope = self.enclosing_scope(indent);
        self.b.def(name, None);
        self.b.scope = self.open_scope.unwrap_or(0);
        self.blocks.push((indent, None));
        // parameters: between the first `(` and its match
        let Some(open) = h.iter().position(|t| t.is_op("(")) else {
            return;
        };
        let mut depth = 0usize;
        let mut close = h.len();
        for (i, t) in h.iter().enumerate().skip(open) {
            if t.is_op("(") || t.is_op("[") || t.is_op("{") {
                depth += 1;
            } else if t.is_op(")") || t.is_op("]") || t.is_op("}") {
                depth -= 1;
                if depth == 0 {
                    close = i;
                    break;
                }
            }
        }
        let params = &h[open + 1..close.min(h.len())];
        for (k, p) in segments(params, ",").into_iter().enumerate() {
            let p = match p.iter().position(|t| t.kind != TokenKind::Op || !matches!(t.text, "*" | "**" | "/")) {
                Some(s) => &p[s..],
                None => continue,
            };
            let Some(pname) = p.first().filter(|t| t.is_name()) else {
                continue;
            };
            let eq = split_top(p, "=").first().copied();
            let ann_end = eq.unwrap_or(p.len());
            let annotated = p.get(1).is_some_and(|t| t.is_op(":"));
            let hint = if annotated {
                self.b.expr(&p[2..ann_end]);
                annotation_type(&p[2..ann_end]).map(ValueHint::Annotation)
            } else if k == 0 {
                class.clone().map(ValueHint::Receiver)
            } else {
                None
            };
            if let Some(e) = eq {
                self.b.expr(&p[e + 1..]);
            }
            self.b.def(pname, hint);
        }
        // return annotation
        if let Some(arrow) = h.iter().position(|t| t.is_op("->")) {
            self.b.expr(&h[arrow + 1..]);
        }
        let _ = whole;
    }

    fn import(&mut self, toks: &[Token<'_>]) {
        for item in segments(toks, ",") {
            let as_at = item.iter().position(|t| t.is_keyword("as"));
            let path: Vec<&Token<'_>> = item[..as_at.unwrap_or(item.len())]
                .iter()
                .filter(|t| t.kind == TokenKind::Name)
                .collect();
            let Some(head) = path.first() else { continue };
            match as_at.and_then(|a| item.get(a + 1)) {
                Some(alias) if alias.is_name() => {
                    let hint = ValueHint::Import { module: Vec::new(), symbol: None };
                    self.b.add(alias, OccurrenceKind::ImportBinding, Some(hint));
                }
                _ => {
                    let module = path[1..].iter().map(|t| t.text.to_string()).collect();
                    let hint = ValueHint::Import { module, symbol: None };
                    self.b.add(head, OccurrenceKind::ImportBinding, Some(hint));
                }
            }
        }
    }

    fn from_import(&mut self, toks: &[Token<'_>]) {
        let Some(imp) = toks.iter().position(|t| t.is_keyword("import")) else {
            return;
        };
        let names: Vec<Token<'_>> = toks[imp + 1..]
            .iter()
            .filter(|t| !(t.is_op("(") || t.is_op(")")))
            .copied()
            .collect();
        for item in segments(&names, ",") {
            let Some(sym) = item.first().filter(|t| t.is_name()) else {
                continue;
            };
            let bound = match item.iter().position(|t| t.is_keyword("as")) {
                Some(a) => match item.get(a + 1) {
                    Some(t) if t.is_name() => t,
                    _ => continue,
                },
                None => sym,
            };
            let hint = ValueHint::Import { module: Vec::new(), symbol: Some(sym.text.to_string()) };
            self.b.add(bound, OccurrenceKind::ImportBinding, Some(hint));
        }
    }
}

/// Builds the graph of `prefix`, the file text up to and including the
/// cursor line.
pub fn build_dataflow_graph(prefix: &str) -> Result<DataflowGraph, DataflowError> {
    let lines = lexer::logical_lines(prefix);
    if lines.is_empty() {
        return Err(DataflowError::GraphUnavailable("prefix has no statements".into()));
    }
    let mut an = Analyzer { b: Builder::default(), blocks: Vec::new(), next_scope: 0, open_scope: None };
    let mut last_stmt_start = 0;
    for (k, line) in lines.iter().enumerate() {
        if k + 1 == lines.len() {
            last_stmt_start = an.b.stmt + 1;
        }
        an.logical_line(line);
    }
    let nodes = an.b.nodes;

    // Uses see definitions from strictly earlier lines.
    let mut visible: HashMap<(usize, &str), usize> = HashMap::new();
    let mut pending: Vec<usize> = Vec::new();
    let mut edges = Vec::new();
    for (i, n) in nodes.iter().enumerate() {
        pending.retain(|&d| {
            if nodes[d].line < n.line {
                visible.insert((nodes[d].scope, nodes[d].name.as_str()), d);
                false
            } else {
                true
            }
        });
        match n.kind {
            OccurrenceKind::Definition | OccurrenceKind::ImportBinding => pending.push(i),
            OccurrenceKind::Use => {
                let def = visible
                    .get(&(n.scope, n.name.as_str()))
                    .or_else(|| visible.get(&(0, n.name.as_str())));
                if let Some(&d) = def {
                    edges.push((d, i));
                }
            }
            OccurrenceKind::AttributeUse => {}
        }
    }

    let mut last_line_uses: Vec<String> = Vec::new();
    let mut last_line_nodes = Vec::new();
    for (i, n) in nodes.iter().enumerate() {
        if n.stmt >= last_stmt_start && n.kind == OccurrenceKind::Use {
            last_line_nodes.push(i);
            if !last_line_uses.contains(&n.name) {
                last_line_uses.push(n.name.clone());
            }
        }
    }
    Ok(DataflowGraph { nodes, edges, last_line_uses, last_line_nodes })
}

impl DataflowGraph {
    /// Definition node reaching each use node.
    fn reaching(&self) -> HashMap<usize, usize> {
        self.edges.iter().map(|&(d, u)| (u, d)).collect()
    }

    /// Names reachable from the last line through at most `depth` def edges,
    /// in walk order.
    pub fn collected_names(&self, depth: usize) -> Vec<String> {
        let reaching = self.reaching();
        let mut out: Vec<String> = Vec::new();
        let mut push = |name: String| {
            if !out.contains(&name) {
                out.push(name);
            }
        };
        let mut queue: VecDeque<(usize, usize)> = self.last_line_nodes.iter().map(|&n| (n, 0)).collect();
        let mut seen: HashSet<usize> = queue.iter().map(|&(n, _)| n).collect();
        let mut expanded: HashSet<usize> = HashSet::new();
        while let Some((u, level)) = queue.pop_front() {
            let node = &self.nodes[u];
            let attrs = &node.attrs;
            push(node.name.clone());
            let def = reaching.get(&u).copied().filter(|_| level < depth);
            let hint = def.and_then(|d| self.nodes[d].hint.as_ref());
            match hint {
                Some(ValueHint::Import { module, symbol: Some(sym) }) => {
                    let _ = module;
                    push(sym.clone());
                    match attrs.first() {
                        Some(a) => {
                            push(format!("{sym}.{a}"));
                            push(a.clone());
                        }
                        None if node.called => push(format!("{sym}.__init__")),
                        None => {}
                    }
                }
                Some(ValueHint::Import { module, symbol: None }) => {
                    let shared = module.iter().zip(attrs).take_while(|(m, a)| m == a).count();
                    if shared == module.len() {
                        if let Some(r) = attrs.get(shared) {
                            push(r.clone());
                            match attrs.get(shared + 1) {
                                Some(next) => push(format!("{r}.{next}")),
                                None if node.called => push(format!("{r}.__init__")),
                                None => {}
                            }
                        }
                    }
                }
                Some(h) => {
                    let t = h.type_name().expect("non-import hints name a type");
                    match attrs.first() {
                        Some(a) => push(format!("{t}.{a}")),
                        None => {
                            push(t.to_string());
                            push(format!("{t}.__init__"));
                        }
                    }
                }
                None if def.is_none() => match attrs.first() {
                    Some(a) => push(format!("{}.{a}", node.name)),
                    None if node.called => push(format!("{}.__init__", node.name)),
                    None => {}
                },
                None => {}
            }
            if let Some(d) = def {
                if expanded.insert(d) {
                    let stmt = self.nodes[d].stmt;
                    for (k, n) in self.nodes.iter().enumerate() {
                        if n.stmt == stmt && n.kind == OccurrenceKind::Use && seen.insert(k) {
                            queue.push_back((k, level + 1));
                        }
                    }
                }
            }
        }
        out
    }

    /// Graphviz rendering for debugging.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dataflow {\n  node [shape=box];\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let kind = match n.kind {
                OccurrenceKind::Definition => "def",
                OccurrenceKind::Use => "use",
                OccurrenceKind::ImportBinding => "import",
                OccurrenceKind::AttributeUse => "attr",
            };
            let mut label = format!("{}@{} {kind}", n.name, n.line);
            if let Some(t) = n.hint.as_ref().and_then(ValueHint::type_name) {
                let _ = write!(label, " : {t}");
            }
            let style = if self.last_line_nodes.contains(&i) { ", style=bold" } else { "" };
            let _ = writeln!(out, "  n{i} [label=\"{}\"{style}];", label.replace('"', "\\\""));
        }
        for (d, u) in &self.edges {
            let _ = writeln!(out, "  n{d} -> n{u};");
        }
        out.push_str("}\n");
        out
    }
}

fn kind_rank(kind: ItemKind) -> u8 {
    match kind {
        ItemKind::ClassFunction => 0,
        ItemKind::Function => 1,
        ItemKind::ClassVariable => 2,
        ItemKind::GlobalVariable => 3,
    }
}

/// The best knowledge item for a set of names: method over function over
/// class variable over global, then the shorter qualified name, then id.
pub fn best_match(names: &[String], kb: &KnowledgeBase) -> Option<ItemId> {
    let wanted: HashSet<&str> = names.iter().map(String::as_str).collect();
    kb.items
        .iter()
        .filter(|it| it.bound_names().any(|b| wanted.contains(b)))
        .min_by(|a, b| {
            kind_rank(a.kind)
                .cmp(&kind_rank(b.kind))
                .then(a.qualified_name.len().cmp(&b.qualified_name.len()))
                .then_with(|| a.id.cmp(&b.id))
        })
        .map(|it| it.id.clone())
}

/// The single dependency item for the last line, scored `+inf` (the score
/// only marks provenance).
pub fn dataflow_retrieve(graph: &DataflowGraph, kb: &KnowledgeBase) -> Vec<(ItemId, f64)> {
    dataflow_retrieve_with_depth(graph, kb, DEFAULT_WALK_DEPTH)
}

pub fn dataflow_retrieve_with_depth(graph: &DataflowGraph, kb: &KnowledgeBase, depth: usize) -> Vec<(ItemId, f64)> {
    let names = graph.collected_names(depth);
    best_match(&names, kb)
        .map(|id| vec![(id, f64::INFINITY)])
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{item_id, CodeKnowledgeItem, LineSpan};

    fn edges_by_line(g: &DataflowGraph) -> Vec<(String, usize, usize)> {
        g.edges
            .iter()
            .map(|&(d, u)| (g.nodes[d].name.clone(), g.nodes[d].line, g.nodes[u].line))
            .collect()
    }

    fn item(kind: ItemKind, qn: &str, line: usize) -> CodeKnowledgeItem {
        let span = LineSpan::new(line, line);
        CodeKnowledgeItem {
            id: item_id("lib.py", span, kind, 0),
            kind,
            qualified_name: qn.to_string(),
            file_path: "lib.py".into(),
            line_span: span,
            text: format!("# {qn}"),
            identifiers: Vec::new(),
        }
    }

    fn kb(items: Vec<CodeKnowledgeItem>) -> KnowledgeBase {
        let manifest = [("lib.py".to_string(), "0".repeat(64))].into_iter().collect();
        KnowledgeBase::new(items, ".".into(), manifest, 0).unwrap()
    }

    fn retrieved(prefix: &str, kb: &KnowledgeBase) -> Option<String> {
        let g = build_dataflow_graph(prefix).unwrap();
        dataflow_retrieve(&g, kb)
            .first()
            .map(|(id, _)| kb.get(id).unwrap().qualified_name.clone())
    }

    #[test]
    fn single_def_use_pair() {
        let g = build_dataflow_graph("a = Foo()\nb = a.").unwrap();
        assert_eq!(edges_by_line(&g), vec![("a".into(), 1, 2)]);
        assert_eq!(g.last_line_uses, vec!["a"]);
    }

    #[test]
    fn import_binding_reaches_call() {
        let g = build_dataflow_graph("from m import Foo\nx = Foo(").unwrap();
        assert_eq!(edges_by_line(&g), vec![("Foo".into(), 1, 2)]);
        assert_eq!(g.nodes[g.edges[0].0].kind, OccurrenceKind::ImportBinding);
        assert_eq!(g.last_line_uses, vec!["Foo"]);
    }

    #[test]
    fn nearest_definition_wins() {
        let g = build_dataflow_graph("a = 1\na = 2\nprint(a").unwrap();
        assert_eq!(edges_by_line(&g), vec![("a".into(), 2, 3)]);
        assert_eq!(g.last_line_uses, vec!["print", "a"]);
    }

    #[test]
    fn constructor_attribute_resolves_method() {
        let k = kb(vec![item(ItemKind::ClassFunction, "Foo.b", 1), item(ItemKind::ClassFunction, "Foo.__init__", 2)]);
        assert_eq!(retrieved("a = Foo()\na.b", &k).as_deref(), Some("Foo.b"));
    }

    #[test]
    fn empty_results() {
        let k = kb(vec![item(ItemKind::Function, "helper", 1)]);
        assert_eq!(retrieved("x = 1\n1 + 2", &k), None);
        assert_eq!(retrieved("value = compute(", &k), None);
        assert!(build_dataflow_graph("# only a comment\n").is_err());
    }

    #[test]
    fn scopes_are_separate() {
        let src = "def f():\n    a = Foo()\ndef g():\n    a.run(";
        let g = build_dataflow_graph(src).unwrap();
        assert!(g.edges.iter().all(|&(d, _)| g.nodes[d].name != "a"));
        let src = "a = Foo()\ndef g():\n    a.run(";
        let g = build_dataflow_graph(src).unwrap();
        assert_eq!(edges_by_line(&g), vec![("a".into(), 1, 3)]);
    }

    #[test]
    fn receiver_type_from_enclosing_class() {
        let src = "class Service:\n    def start(self):\n        self.connect(";
        let g = build_dataflow_graph(src).unwrap();
        assert!(g.collected_names(DEFAULT_WALK_DEPTH).contains(&"Service.connect".to_string()));
    }

    #[test]
    fn module_import_chain() {
        let g = build_dataflow_graph("import pkg.io\nrows = pkg.io.read_rows(").unwrap();
        let names = g.collected_names(DEFAULT_WALK_DEPTH);
        assert!(names.contains(&"read_rows".to_string()), "{names:?}");
    }

    #[test]
    fn depth_bound_limits_walk() {
        let src = "a = Foo()\nb = a\nc = b\nd = c\ne = d\nf = e\nf.go(";
        let g = build_dataflow_graph(src).unwrap();
        let k = kb(vec![item(ItemKind::ClassFunction, "Foo.__init__", 1)]);
        assert_eq!(dataflow_retrieve_with_depth(&g, &k, 6).len(), 1);
        assert!(dataflow_retrieve_with_depth(&g, &k, 4).is_empty());
    }

    #[test]
    fn dot_dump_lists_nodes_and_edges() {
        let dot = build_dataflow_graph("a = Foo()\na.b").unwrap().to_dot();
        assert!(dot.starts_with("digraph dataflow {"));
        assert!(dot.contains("a@1 def : Foo"));
        assert!(dot.contains("->"));
    }
}
