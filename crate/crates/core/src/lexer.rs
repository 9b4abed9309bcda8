//! A small, total Python lexer.
//!
//! The lexer never fails: bytes it cannot classify become [`TokenKind::Error`]
//! tokens and unterminated strings run to the end of their line (or the end of
//! input for triple-quoted strings). That makes it usable on incomplete code
//! such as the left context of a completion task.

/// Hard keywords of Python 3. Soft keywords (`match`, `case`, `type`, `_`) are
/// ordinary identifiers.
pub const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
    "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
    "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
    "try", "while", "with", "yield",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.binary_search(&word).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Name,
    Number,
    String,
    Comment,
    Op,
    /// End of a logical line.
    Newline,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    /// 1-based physical line of the first character.
    pub line: usize,
    /// Byte offset into the source.
    pub offset: usize,
}

impl Token<'_> {
    pub fn is_name(&self) -> bool {
        self.kind == TokenKind::Name && !is_keyword(self.text)
    }

    pub fn is_keyword(&self, kw: &str) -> bool {
        self.kind == TokenKind::Name && self.text == kw
    }

    pub fn is_op(&self, op: &str) -> bool {
        self.kind == TokenKind::Op && self.text == op
    }
}

const OPS3: &[&str] = &["**=", "//=", ">>=", "<<=", "..."];
const OPS2: &[&str] = &[
    "**", "//", "<<", ">>", "<=", ">=", "==", "!=", "->", "+=", "-=", "*=", "/=", "%=", "&=",
    "|=", "^=", "@=", ":=",
];
const OPS1: &str = "+-*/%@&|^~<>()[]{},:;.=";

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn peek_nth(&self, n: usize) -> Option<char> {
        self.rest().chars().nth(n)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
        }
        Some(c)
    }
}

fn is_name_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_name_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

/// Length in chars of a string prefix (`r`, `b`, `f`, `rb`, ...) immediately
/// followed by a quote, if `s` starts with one.
fn string_prefix_len(s: &str) -> Option<usize> {
    let mut n = 0;
    for c in s.chars() {
        match c {
            '\'' | '"' => return Some(n),
            'r' | 'R' | 'b' | 'B' | 'u' | 'U' | 'f' | 'F' if n < 2 => n += 1,
            _ => return None,
        }
    }
    None
}

/// Tokenizes `src`. Blank and comment-only lines do not produce
/// [`TokenKind::Newline`] tokens, and newlines inside brackets are ignored.
pub fn tokenize<'a>(src: &'a str) -> Vec<Token<'a>> {
    let mut cur = Cursor { src, pos: 0, line: 1 };
    let mut out = Vec::new();
    let mut depth: usize = 0;
    let mut line_has_code = false;

    while let Some(c) = cur.peek() {
        let start = cur.pos;
        let line = cur.line;
        let push = |out: &mut Vec<Token<'a>>, kind, end: usize| {
            out.push(Token { kind, text: &src[start..end], line, offset: start });
        };

        if c == '\n' {
            cur.bump();
            if depth == 0 && line_has_code {
                push(&mut out, TokenKind::Newline, start);
                line_has_code = false;
            }
            continue;
        }
        if c == ' ' || c == '\t' || c == '\r' || c == '\x0c' {
            cur.bump();
            continue;
        }
        if c == '\\' && matches!(cur.peek_nth(1), Some('\n') | Some('\r')) {
            cur.bump();
            if cur.peek() == Some('\r') {
                cur.bump();
            }
            if cur.peek() == Some('\n') {
                cur.bump();
            }
            continue;
        }
        if c == '#' {
            while let Some(ch) = cur.peek() {
                if ch == '\n' {
                    break;
                }
                cur.bump();
            }
            push(&mut out, TokenKind::Comment, cur.pos);
            continue;
        }

        line_has_code = true;

        if let Some(plen) = string_prefix_len(cur.rest()) {
            for _ in 0..plen {
                cur.bump();
            }
            lex_string(&mut cur);
            push(&mut out, TokenKind::String, cur.pos);
            continue;
        }
        if is_name_start(c) {
            while cur.peek().is_some_and(is_name_continue) {
                cur.bump();
            }
            push(&mut out, TokenKind::Name, cur.pos);
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && cur.peek_nth(1).is_some_and(|d| d.is_ascii_digit())) {
            lex_number(&mut cur);
            push(&mut out, TokenKind::Number, cur.pos);
            continue;
        }
        if let Some(op) = OPS3
            .iter()
            .chain(OPS2.iter())
            .find(|op| cur.rest().starts_with(**op))
        {
            cur.pos += op.len();
            push(&mut out, TokenKind::Op, cur.pos);
            continue;
        }
        if OPS1.contains(c) {
            cur.bump();
            match c {
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth = depth.saturating_sub(1),
                _ => {}
            }
            push(&mut out, TokenKind::Op, cur.pos);
            continue;
        }
        cur.bump();
        push(&mut out, TokenKind::Error, cur.pos);
    }
    if line_has_code {
        out.push(Token { kind: TokenKind::Newline, text: "", line: cur.line, offset: src.len() });
    }
    out
}

fn lex_string(cur: &mut Cursor<'_>) {
    let quote = match cur.bump() {
        Some(q) => q,
        None => return,
    };
    let triple = cur.peek() == Some(quote) && cur.peek_nth(1) == Some(quote);
    if triple {
        cur.bump();
        cur.bump();
    }
    while let Some(c) = cur.peek() {
        if c == '\\' {
            cur.bump();
            // An escaped newline is a continuation even in single-quoted strings.
            cur.bump();
            continue;
        }
        if c == '\n' && !triple {
            // Unterminated single-line string ends at the newline.
            return;
        }
        cur.bump();
        if c == quote {
            if !triple {
                return;
            }
            if cur.peek() == Some(quote) && cur.peek_nth(1) == Some(quote) {
                cur.bump();
                cur.bump();
                return;
            }
        }
    }
}

fn lex_number(cur: &mut Cursor<'_>) {
    let hex = cur.rest().starts_with("0x") || cur.rest().starts_with("0X");
    while let Some(c) = cur.peek() {
        if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
            cur.bump();
            if !hex && (c == 'e' || c == 'E') && matches!(cur.peek(), Some('+') | Some('-')) {
                cur.bump();
            }
        } else {
            break;
        }
    }
}

/// One logical line: the tokens between two `Newline` tokens, comments
/// removed.
#[derive(Debug, Clone)]
pub struct LogicalLine<'a> {
    /// Indentation width of the first physical line (tabs expand to 8).
    pub indent: usize,
    pub first_line: usize,
    pub last_line: usize,
    pub tokens: Vec<Token<'a>>,
}

pub fn logical_lines(src: &str) -> Vec<LogicalLine<'_>> {
    let line_starts: Vec<usize> = std::iter::once(0)
        .chain(src.match_indices('\n').map(|(i, _)| i + 1))
        .collect();
    let indent_of = |line: usize| -> usize {
        let start = line_starts.get(line - 1).copied().unwrap_or(src.len());
        let mut width = 0;
        for c in src[start..].chars() {
            match c {
                ' ' => width += 1,
                '\t' => width = (width / 8 + 1) * 8,
                '\x0c' => width = 0,
                _ => break,
            }
        }
        width
    };

    let mut lines = Vec::new();
    let mut current: Vec<Token<'_>> = Vec::new();
    for tok in tokenize(src) {
        match tok.kind {
            TokenKind::Comment => {}
            TokenKind::Newline => {
                if let (Some(first), Some(last)) = (current.first(), current.last()) {
                    lines.push(LogicalLine {
                        indent: indent_of(first.line),
                        first_line: first.line,
                        last_line: last.line,
                        tokens: std::mem::take(&mut current),
                    });
                }
            }
            _ => current.push(tok),
        }
    }
    lines
}

/// Identifier tokens of `code` in source order: name tokens that are not
/// keywords. String and number literals and comments are skipped.
pub fn identifiers(code: &str) -> Vec<String> {
    tokenize(code)
        .into_iter()
        .filter(Token::is_name)
        .map(|t| t.text.to_string())
        .collect()
}

/// Distinct identifiers of `code` in order of first appearance.
pub fn distinct_identifiers(code: &str) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    identifiers(code)
        .into_iter()
        .filter(|id| seen.insert(id.clone()))
        .collect()
}
