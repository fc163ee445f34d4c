"""Phone error rate and Table-shaped experiment reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import EmptyReference, LengthMismatch, ParseError

MISSING = "—"
CSV_FIELDS = ("model", "pretrain", "frozen", "budget", "corpus", "per", "n_ref_phones", "n_edits")


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance (substitution, insertion, deletion)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class PerScore:
    per: float
    n_ref_phones: int
    n_edits: int


def per(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> PerScore:
    """Corpus-level PER: total edits over total reference length. Not clamped at 1."""
    if len(refs) != len(hyps):
        raise LengthMismatch(f"{len(refs)} references vs {len(hyps)} hypotheses")
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise EmptyReference("references contain no phones")
    edits = sum(levenshtein(r, h) for r, h in zip(refs, hyps))
    return PerScore(edits / n_ref, n_ref, edits)


@dataclass(frozen=True)
class EvalResult:
    model_name: str
    pretrain_desc: str
    frozen: bool
    train_budget_desc: str
    corpus: str
    per: float
    n_ref_phones: int
    n_edits: int

    @classmethod
    def from_score(cls, score: PerScore, model_name, pretrain_desc, frozen, train_budget_desc, corpus):
        return cls(model_name, pretrain_desc, bool(frozen), train_budget_desc, corpus, score.per, score.n_ref_phones, score.n_edits)


# ---------------------------------------------------------------- CSV rows


def results_to_csv(results: Iterable[EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in results:
        w.writerow(
            [r.model_name, r.pretrain_desc, "yes" if r.frozen else "no", r.train_budget_desc,
             r.corpus, repr(float(r.per)), r.n_ref_phones, r.n_edits]
        )
    return buf.getvalue()


def results_from_csv(text: str) -> list[EvalResult]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_FIELDS:
        raise ParseError(1, f"expected header {','.join(CSV_FIELDS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_FIELDS):
            raise ParseError(lineno, f"expected {len(CSV_FIELDS)} fields, got {len(row)}")
        model, pretrain, frozen, budget, corpus, per_s, nref_s, nedit_s = row
        if frozen not in ("yes", "no"):
            raise ParseError(lineno, f"frozen must be yes/no, got {frozen!r}")
        try:
            value, nref, nedit = float(per_s), int(nref_s), int(nedit_s)
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
        if nref <= 0 or nedit < 0 or value < 0:
            raise ParseError(lineno, "per and n_edits must be >= 0, n_ref_phones > 0")
        out.append(EvalResult(model, pretrain, frozen == "yes", budget, corpus, value, nref, nedit))
    return out


# ---------------------------------------------------------------- report tables


def _frozen_cell(r: EvalResult) -> str:
    # a model without pre-training has no backbone to freeze
    if r.pretrain_desc.strip().lower() == "no":
        return "N/A"
    return "Yes" if r.frozen else "No"


def _grid(results, layout):
    if layout == "table1":
        head = ["Model", "Pre-train", "Frozen"]
        key = lambda r: (r.model_name, r.pretrain_desc, _frozen_cell(r))
    elif layout == "table2":
        head = ["Model", "Pre-train", "Frozen", "Transcribed data"]
        key = lambda r: (r.model_name, r.pretrain_desc, _frozen_cell(r), r.train_budget_desc)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    corpora, rows = [], {}
    for r in results:
        if r.corpus not in corpora:
            corpora.append(r.corpus)
        cells = rows.setdefault(key(r), {})
        cells.setdefault(r.corpus, r.per)
    body = [
        [*k, *(f"{cells[c]:.2f}" if c in cells else MISSING for c in corpora)]
        for k, cells in rows.items()
    ]
    return head + corpora, body


def render_report(results: Sequence[EvalResult], layout: str = "table1", fmt: str = "markdown") -> str:
    """Pivot results into a table: one column per corpus, PER at two decimals.

    ``table1`` keys rows by (model, pre-train, frozen); ``table2`` adds the
    transcribed-data budget.
    """
    head, body = _grid(results, layout)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        w.writerows(body)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown format {fmt!r}")
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in body]
    return "\n".join(lines) + "\n"
