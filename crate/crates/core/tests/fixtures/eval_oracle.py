"""Regenerates the expected metric columns of eval_pairs.jsonl."""
import io
import json
import keyword
import sys
import tokenize
from collections import Counter


def lev(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[len(a)][len(b)]


def es(a, b):
    n = max(len(a), len(b))
    return 1.0 if n == 0 else 1.0 - lev(a, b) / n


def norm(s):
    s = s.replace("\r\n", "\n")
    return s[:-1] if s.endswith("\n") else s


def idents(code):
    out = []
    try:
        for tok in tokenize.generate_tokens(io.StringIO(code).readline):
            if tok.type == tokenize.NAME and not keyword.iskeyword(tok.string):
                out.append(tok.string)
    except (tokenize.TokenError, IndentationError):
        pass
    return out


def f1(g, t):
    if not g and not t:
        return 1.0
    common = sum((Counter(g) & Counter(t)).values())
    if common == 0:
        return 0.0
    p, r = common / len(g), common / len(t)
    return 2 * p * r / (p + r)


rows = [json.loads(line) for line in open(sys.argv[1])]
for row in rows:
    g, t = row["generated"], row["ground_truth"]
    row["em"] = int(norm(g) == norm(t))
    row["es"] = es(g, t)
    row["id_em"] = int(idents(g) == idents(t))
    row["id_f1"] = f1(idents(g), idents(t))
with open(sys.argv[1], "w") as fh:
    for row in rows:
        fh.write(json.dumps(row, ensure_ascii=False) + "\n")
