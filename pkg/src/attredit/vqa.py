"""Attribute auditing with a visual question answering client."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

from .clients import image_key
from .exceptions import CoverageError, ParameterError
from .taxonomy import AttributeSpec, load_taxonomy, question_for

log = logging.getLogger(__name__)

POLICIES = ("failure", "exclude")
_LEADING = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)


class Verdict(str, Enum):
    YES = "yes"
    NO = "no"
    UNPARSEABLE = "unparseable"


def _contains(text: str, words) -> bool:
    return any(re.search(rf"\b{re.escape(w)}\b", text) for w in words)


def parse_verdict(raw_answer: Optional[str], attr: AttributeSpec, question: Optional[str] = None) -> Verdict:
    """Map a free-text answer to a verdict.

    A leading yes/no token decides. Otherwise, for open-ended questions with
    a keyword table, the answer is yes if it names one of the attribute's
    keywords and no if it names only competing ones.
    """
    text = (raw_answer or "").strip()
    m = _LEADING.match(text)
    if m:
        return Verdict.YES if m.group(1).lower() == "yes" else Verdict.NO
    q = question or attr.vqa_question
    table = load_taxonomy().open_questions.get(q)
    if not table or attr.id not in table:
        return Verdict.UNPARSEABLE
    low = text.lower()
    if _contains(low, table[attr.id]):
        return Verdict.YES
    if any(_contains(low, words) for key, words in table.items() if key != attr.id):
        return Verdict.NO
    return Verdict.UNPARSEABLE


@dataclass
class AuditRecord:
    image_id: str
    attribute_id: str
    question: str
    raw_answer: str
    verdict: Verdict
    expected: Optional[bool] = None
    client_id: str = ""
    failure: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AuditRecord":
        return cls(**{**d, "verdict": Verdict(d["verdict"])})


def audit_image(client, image, attr: AttributeSpec, image_id: str = "", *, question: Optional[str] = None,
                retries: int = 2, backoff: float = 0.5,
                sleep: Callable[[float], None] = time.sleep) -> AuditRecord:
    """Ask the attribute's question; client errors are retried, then logged."""
    q = question or question_for(attr)
    cid = getattr(client, "client_id", "")
    last_error = None
    for attempt in range(retries + 1):
        try:
            raw = client.answer(image, q)
        except Exception as exc:  # any client failure is retried
            last_error = f"{type(exc).__name__}: {exc}"
            if attempt < retries:
                sleep(backoff * 2 ** attempt)
            continue
        return AuditRecord(image_id, attr.id, q, raw, parse_verdict(raw, attr, q), client_id=cid)
    log.warning("VQA failed for %s/%s: %s", image_id, attr.id, last_error)
    return AuditRecord(image_id, attr.id, q, "", Verdict.UNPARSEABLE, client_id=cid, failure=last_error)


@dataclass(frozen=True)
class AttributeRate:
    attribute_id: str
    n_images: int
    n_success: int
    n_unparseable: int
    n_counted: int
    rate: Optional[float]


@dataclass
class SuccessReport:
    policy: str
    rows: dict = field(default_factory=dict)

    def rate(self, attribute_id: str) -> Optional[float]:
        return self.rows[attribute_id].rate

    def to_dict(self) -> dict:
        return {"policy": self.policy, "rows": {k: asdict(v) for k, v in self.rows.items()}}


def success_rate(records: Sequence[AuditRecord], policy: str = "failure") -> SuccessReport:
    """Percent of "yes" verdicts per attribute.

    ``policy="failure"`` counts unparseable answers as failed edits;
    ``"exclude"`` drops them from the denominator.
    """
    if policy not in POLICIES:
        raise ParameterError(f"policy must be one of {POLICIES}")
    if not records:
        raise ParameterError("no audit records")
    tallies: dict[str, list[int]] = {}
    for r in records:
        t = tallies.setdefault(r.attribute_id, [0, 0, 0])
        t[0] += 1
        t[1] += r.verdict is Verdict.YES
        t[2] += r.verdict is Verdict.UNPARSEABLE
    order = {a.id: i for i, a in enumerate(load_taxonomy())}
    rows = {}
    for aid in sorted(tallies, key=lambda k: (order.get(k, len(order)), k)):
        n, yes, unp = tallies[aid]
        counted = n - unp if policy == "exclude" else n
        rate = 100.0 * yes / counted if counted else None
        rows[aid] = AttributeRate(aid, n, yes, unp, counted, rate)
    return SuccessReport(policy, rows)


# -- benchmarking against annotations ----------------------------------------------

@dataclass
class AnnotatedSet:
    """Images with binary ground truth keyed by attribute id."""

    images: dict  # image_id -> image array
    labels: dict  # image_id -> {attribute_id: bool}

    def truth(self, image_id: str, attribute_id: str) -> bool:
        try:
            return self.labels[image_id][attribute_id]
        except KeyError:
            raise CoverageError(f"no annotation for {attribute_id!r} on image {image_id!r}") from None


def benchmark_question(attr: AttributeSpec) -> str:
    return attr.benchmark_question or question_for(attr)


def annotation_attributes() -> list[AttributeSpec]:
    return [a for a in load_taxonomy() if a.annotation_column]


def load_attribute_annotations(path, attributes: Optional[Sequence[AttributeSpec]] = None) -> dict:
    """Read CelebAMask-HQ style labels (values 1 / -1 or 1 / 0).

    Accepts a CSV whose first column is the image id, or the original text
    layout (count line, header line of 40 names, whitespace rows).
    """
    attributes = list(attributes or annotation_attributes())
    text = Path(path).read_text().splitlines()
    if text and "," in text[0]:
        rows = list(csv.reader(text))
        header, body = rows[0][1:], rows[1:]
    else:
        header, body = text[1].split(), [line.split() for line in text[2:] if line.strip()]
    idx = {name: i for i, name in enumerate(header)}
    labels = {}
    for row in body:
        image_id, values = Path(row[0]).stem, row[1:]
        entry = {}
        for a in attributes:
            if a.annotation_column not in idx:
                continue
            v = float(values[idx[a.annotation_column]]) > 0
            entry[a.id] = (not v) if a.annotation_negate else v
        labels[image_id] = entry
    return labels


@dataclass
class BenchmarkTable:
    client_id: str
    policy: str
    rows: dict  # attribute_id -> (n, n_correct, accuracy %)

    @property
    def mean_accuracy(self) -> float:
        accs = [r[2] for r in self.rows.values() if r[2] is not None]
        return sum(accs) / len(accs) if accs else math.nan


def benchmark_predictor(client, annotated: AnnotatedSet, attributes: Optional[Sequence] = None,
                        policy: str = "failure", records_out: Optional[list] = None) -> BenchmarkTable:
    """Per-attribute accuracy of ``client`` against the annotations."""
    if policy not in POLICIES:
        raise ParameterError(f"policy must be one of {POLICIES}")
    tax = load_taxonomy()
    attrs = [tax.get(a) if isinstance(a, str) else a for a in (attributes or annotation_attributes())]
    for a in attrs:
        if not a.annotation_column:
            raise CoverageError(f"attribute {a.id!r} has no annotation column")
    rows = {}
    for a in attrs:
        q = benchmark_question(a)
        n = correct = 0
        for image_id, image in annotated.images.items():
            truth = annotated.truth(image_id, a.id)
            rec = audit_image(client, image, a, image_id, question=q)
            rec.expected = truth
            if records_out is not None:
                records_out.append(rec)
            if rec.verdict is Verdict.UNPARSEABLE:
                if policy == "exclude":
                    continue
                n += 1
                continue
            predicted = (rec.verdict is Verdict.YES) != a.benchmark_negate
            n += 1
            correct += predicted == truth
        rows[a.id] = (n, correct, 100.0 * correct / n if n else None)
    return BenchmarkTable(getattr(client, "client_id", ""), policy, rows)


def stub_answers_from_annotations(annotated: AnnotatedSet, attributes: Optional[Sequence] = None,
                                  invert: bool = False) -> dict:
    """Answer strings that reproduce (or exactly contradict) the labels.

    Used to build echo and inverted stub clients. Open-ended questions are
    answered by naming the keywords of the attributes asserted true.
    """
    tax = load_taxonomy()
    attrs = [tax.get(a) if isinstance(a, str) else a for a in (attributes or annotation_attributes())]
    by_question: dict[str, list[AttributeSpec]] = {}
    for a in attrs:
        by_question.setdefault(benchmark_question(a), []).append(a)
    answers = {}
    for image_id, image in annotated.images.items():
        key = image_key(image)
        for q, group in by_question.items():
            table = tax.open_questions.get(q)
            if table is None:
                (a,) = group
                value = annotated.truth(image_id, a.id) != a.benchmark_negate
                answers[(key, q)] = "Yes." if value != invert else "No."
                continue
            named = [a for a in group if annotated.truth(image_id, a.id) != invert]
            answers[(key, q)] = " and ".join(table[a.id][0] for a in named) + "." if named else "No."
    return answers


def comparison_table(tables: Sequence[BenchmarkTable]) -> list[dict]:
    """Side-by-side accuracy rows, one column per client."""
    attr_ids = list(dict.fromkeys(a for t in tables for a in t.rows))
    tax = load_taxonomy()
    out = []
    for aid in attr_ids:
        row = {"attribute": tax.get(aid).display_name}
        for t in tables:
            acc = t.rows.get(aid, (0, 0, None))[2]
            row[t.client_id] = acc
        out.append(row)
    out.append({"attribute": "Mean", **{t.client_id: t.mean_accuracy for t in tables}})
    return out


# -- persistence ---------------------------------------------------------------------

def write_records(records: Sequence[AuditRecord], path, append: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_records(path) -> list[AuditRecord]:
    with Path(path).open() as fh:
        return [AuditRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
