"""Synthetic corpora, temporal splits, classification metrics and the
train/evaluate experiment driver."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import fasttext, gbdt, text_prep, triage
from .bundle import ModelBundle, TrainingConfig, train_bundle
from .errors import EmptyPartition, FileFormatError, LengthMismatch
from .fasttext import FtConfig
from .gateway import CHANNELS, Ticket
from .gbdt import GbdtConfig
from .tfidf import TfidfConfig, corpus_fingerprint
from .timeutil import format_rfc3339
from .triage import RESPONSE, NO_RESPONSE, Taxonomy

TASKS = ("gate", "user_type", "issue", "sub_issue")

# Published figures from proprietary production data; shown next to measured
# values for orientation only and never asserted.
PAPER_REFERENCE_F1 = {"gate": 0.8639, "user_type": 0.90, "issue": 0.7295, "sub_issue": 0.6223}


@dataclass(frozen=True)
class LabeledTicket:
    ticket: Ticket
    response_needed: bool
    user_type: str
    issue: str
    sub_issue: str

    @property
    def tokens(self) -> list[str]:
        return text_prep.ticket_tokens(self.ticket.subject, self.ticket.body)

    def to_dict(self) -> dict:
        return {**self.ticket.to_dict(), "labels": {
            "response_needed": self.response_needed, "user_type": self.user_type,
            "issue": self.issue, "sub_issue": self.sub_issue}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabeledTicket":
        lab = d["labels"]
        return cls(Ticket.from_dict(d), bool(lab["response_needed"]), str(lab["user_type"]),
                   str(lab["issue"]), str(lab["sub_issue"]))


def save_corpus(data: Sequence[LabeledTicket], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in data:
            fh.write(json.dumps(t.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def load_corpus(path) -> list[LabeledTicket]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(LabeledTicket.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise FileFormatError(path, line_no, str(exc)) from None
    return out


def taxonomy_from_corpus(data: Sequence[LabeledTicket]) -> Taxonomy:
    pairs: dict[str, set[str]] = {}
    for t in data:
        pairs.setdefault(t.issue, set()).add(t.sub_issue)
    return Taxonomy.from_dict({i: sorted(pairs[i]) for i in sorted(pairs)})


# -- temporal split ----------------------------------------------------------

def temporal_split(data: Sequence[LabeledTicket], cutoff: datetime):
    """Train on tickets created before ``cutoff``; test on the rest."""
    train = [t for t in data if t.ticket.created_at < cutoff]
    test = [t for t in data if t.ticket.created_at >= cutoff]
    if not train or not test:
        raise EmptyPartition(f"cutoff {format_rfc3339(cutoff)} leaves "
                             f"{len(train)} train / {len(test)} test tickets")
    return train, test


def quantile_cutoff(data: Sequence[LabeledTicket], fraction: float) -> datetime:
    """Creation time such that the earliest ``fraction`` of tickets fall before it."""
    times = sorted(t.ticket.created_at for t in data)
    k = min(max(int(round(fraction * len(times))), 1), len(times) - 1)
    return times[k]


# -- synthetic corpus --------------------------------------------------------

ISSUE_NAMES = ("payment", "package", "listing", "refund", "account access",
               "rent payment", "home interiors", "rental agreement", "lead quality",
               "verification", "visibility", "subscription")
SUB_ISSUE_NAMES = ("status enquiry", "need invoice copy", "cancellation", "wrong amount",
                   "not activated", "delay", "how to use", "escalation", "change request",
                   "duplicate charge")
USER_TYPES = ("owner", "broker", "developer", "service user", "tenant")
NAMES = ("Asha", "Rohan", "Meera", "Vikram", "Priya", "Arjun", "Neha", "Kabir", None)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "ch", "sh", "br", "pr", "tr", "st")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    n_tickets: int = 2000
    n_issues: int = 8
    sub_issues_per_issue: int = 3
    user_types: tuple[str, ...] = USER_TYPES
    vocab_per_class: int = 4
    words_per_label: int = 3
    background_vocab: int = 400
    background_words: tuple[int, int] = (6, 14)
    noise_rate: float = 0.1
    no_response_fraction: float = 0.4
    start: datetime = datetime(2023, 1, 1, tzinfo=timezone.utc)
    end: datetime = datetime(2023, 8, 1, tzinfo=timezone.utc)

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must be in [0, 1)")
        if not 0.0 <= self.no_response_fraction <= 1.0:
            raise ValueError("no_response_fraction must be in [0, 1]")
        if self.n_issues < 1 or self.sub_issues_per_issue < 1 or len(self.user_types) < 2:
            raise ValueError("need >= 1 issue, >= 1 sub-issue and >= 2 user types")
        if self.end <= self.start:
            raise ValueError("end must be after start")
        if not 1 <= self.words_per_label <= self.vocab_per_class:
            raise ValueError("words_per_label must be in [1, vocab_per_class]")


def synth_taxonomy(config: SynthConfig) -> Taxonomy:
    issues = [ISSUE_NAMES[i] if i < len(ISSUE_NAMES) else f"issue {i + 1}"
              for i in range(config.n_issues)]
    subs = [SUB_ISSUE_NAMES[j] if j < len(SUB_ISSUE_NAMES) else f"sub issue {j + 1}"
            for j in range(config.sub_issues_per_issue)]
    return Taxonomy.from_dict({i: list(subs) for i in issues})


class SyntheticVocabulary:
    """Disjoint signature word lists per class plus a shared background list."""

    def __init__(self, config: SynthConfig, taxonomy: Taxonomy):
        rng = random.Random(f"vocab:{config.seed}")
        seen: set[str] = set()

        def words(n):
            out = []
            while len(out) < n:
                w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS)
                            for _ in range(rng.randint(2, 3)))
                if w not in seen:
                    seen.add(w)
                    out.append(w)
            return out

        v = config.vocab_per_class
        self.gate = {RESPONSE: words(v), NO_RESPONSE: words(v)}
        self.user_type = {u: words(v) for u in config.user_types}
        self.issue = {i: words(v) for i in taxonomy.issues}
        self.sub_issue = {p: words(v) for p in taxonomy.pairs()}
        self.background = words(config.background_vocab)
        self.all_words = sorted(seen)

    def signatures(self, lt: "LabeledTicket | tuple") -> list[list[str]]:
        gate, user, issue, sub = lt
        return [self.gate[RESPONSE if gate else NO_RESPONSE], self.user_type[user],
                self.issue[issue], self.sub_issue[(issue, sub)]]


def _ticket_text(rng: random.Random, vocab: SyntheticVocabulary, labels, config: SynthConfig):
    words = []
    # distinct signature words per label keep the set of presence patterns
    # small, so the training split covers every pattern the test split can hold
    for sig in vocab.signatures(labels):
        for w in rng.sample(sig, config.words_per_label):
            words.append(rng.choice(vocab.all_words) if rng.random() < config.noise_rate else w)
    lo, hi = config.background_words
    words += [rng.choice(vocab.background) for _ in range(rng.randint(lo, hi))]
    rng.shuffle(words)
    cut = rng.randint(2, 4)
    return " ".join(words[:cut]).capitalize(), " ".join(words[cut:]) + "."


def make_ticket(ticket_id: int, labels: tuple[bool, str, str, str], created_at: datetime,
                rng: random.Random, vocab: SyntheticVocabulary,
                config: SynthConfig) -> LabeledTicket:
    """One synthetic ticket carrying the given (response_needed, user_type, issue, sub_issue)."""
    subject, body = _ticket_text(rng, vocab, labels, config)
    updated = created_at + timedelta(seconds=rng.randint(0, 7200))
    ticket = Ticket(id=ticket_id, subject=subject, body=body, created_at=created_at,
                    updated_at=updated, requester_name=rng.choice(NAMES),
                    channel=rng.choice(CHANNELS))
    return LabeledTicket(ticket, *labels)


def generate_corpus(config: SynthConfig | None = None) -> list[LabeledTicket]:
    """Seeded corpus; ids follow creation order."""
    config = config or SynthConfig()
    taxonomy = synth_taxonomy(config)
    vocab = SyntheticVocabulary(config, taxonomy)
    rng = random.Random(config.seed)
    span = int((config.end - config.start).total_seconds())
    rows = []
    for _ in range(config.n_tickets):
        created = config.start + timedelta(seconds=rng.randrange(span))
        issue = rng.choice(taxonomy.issues)
        labels = (rng.random() >= config.no_response_fraction,
                  rng.choice(config.user_types), issue,
                  rng.choice(taxonomy.sub_issues[issue]))
        rows.append((created, labels))
    rows.sort(key=lambda r: r[0])
    return [make_ticket(i + 1, labels, created, rng, vocab, config)
            for i, (created, labels) in enumerate(rows)]


def make_fixture(config: SynthConfig, n_tickets: int, n_no_response: int, seed: int = 0,
                 start: datetime | None = None) -> list[LabeledTicket]:
    """Noise-free tickets drawn from ``config``'s vocabulary with exactly
    ``n_no_response`` of them labeled as not needing a response.

    Ids run 1..n and tickets are a minute apart from ``start``.
    """
    if not 0 <= n_no_response <= n_tickets:
        raise ValueError("n_no_response must be in [0, n_tickets]")
    clean = replace(config, noise_rate=0.0)
    taxonomy = synth_taxonomy(clean)
    vocab = SyntheticVocabulary(clean, taxonomy)
    rng = random.Random(f"fixture:{seed}")
    quiet = set(rng.sample(range(n_tickets), n_no_response))
    start = start or clean.end
    out = []
    for i in range(n_tickets):
        issue = rng.choice(taxonomy.issues)
        labels = (i not in quiet, rng.choice(clean.user_types), issue,
                  rng.choice(taxonomy.sub_issues[issue]))
        out.append(make_ticket(i + 1, labels, start + timedelta(minutes=i), rng, vocab, clean))
    return out


def synth_templates(taxonomy: Taxonomy) -> list[triage.ResponseTemplate]:
    out = [triage.ResponseTemplate(
        f"tpl-{i:02d}-{j:02d}", issue, sub,
        f"Hi {{{{user_name}}}}, regarding ticket {{{{ticket_id}}}} about {issue} "
        f"({sub}): this has been resolved on our side. Reply to reopen.")
        for i, issue in enumerate(taxonomy.issues)
        for j, sub in enumerate(taxonomy.sub_issues[issue])]
    out.append(triage.ResponseTemplate(
        "tpl-default", "*", "*",
        "Hi {{user_name}}, thanks for contacting us about ticket {{ticket_id}}. "
        "No further action is needed; reply to reopen."))
    return out


# -- metrics -----------------------------------------------------------------

@dataclass
class TaskMetrics:
    labels: list[str]
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]
    macro_f1: float
    micro_f1: float
    confusion: list[list[int]]   # rows gold, columns predicted, in ``labels`` order

    def to_dict(self) -> dict:
        return {"labels": self.labels, "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "support": self.support, "macro_f1": self.macro_f1,
                "micro_f1": self.micro_f1, "confusion": self.confusion}


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def evaluate_task(predictions: Sequence, gold: Sequence) -> TaskMetrics:
    """Per-class precision/recall/F1 with 0/0 -> 0.

    Classes that appear in neither list are not enumerated, so they never
    enter the macro average.
    """
    if len(predictions) != len(gold):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(gold)} gold labels")
    labels = sorted({str(x) for x in gold} | {str(x) for x in predictions})
    index = {l: i for i, l in enumerate(labels)}
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, g in zip(predictions, gold):
        cm[index[str(g)], index[str(p)]] += 1
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    gold_tot = cm.sum(axis=1)
    prec = {l: _ratio(float(tp[i]), float(pred_tot[i])) for i, l in enumerate(labels)}
    rec = {l: _ratio(float(tp[i]), float(gold_tot[i])) for i, l in enumerate(labels)}
    f1 = {l: _ratio(2 * prec[l] * rec[l], prec[l] + rec[l]) for l in labels}
    macro = float(np.mean(list(f1.values()))) if labels else 0.0
    micro = _ratio(float(tp.sum()), float(cm.sum()))
    return TaskMetrics(labels, prec, rec, f1, {l: int(gold_tot[i]) for i, l in enumerate(labels)},
                       macro, micro, cm.tolist())


def evaluate(predictions: Mapping[str, Sequence], gold: Mapping[str, Sequence]) -> dict[str, TaskMetrics]:
    """Metrics per task. Sub-issue entries should be (issue, sub_issue) pairs,
    so a right sub-issue under a wrong issue is counted as wrong."""
    return {task: evaluate_task(predictions[task], gold[task]) for task in gold}


def pair_label(issue: str, sub_issue: str) -> str:
    return f"{issue} / {sub_issue}"


# -- experiment --------------------------------------------------------------

def benchmark_training_config(seed: int = 42) -> TrainingConfig:
    """The pinned configuration used by the synthetic benchmark."""
    trees = dict(n_rounds=30, learning_rate=0.3, max_depth=4, reg_lambda=1.0,
                 gamma=0.0, min_child_hessian=1.0)
    return TrainingConfig(
        tfidf=TfidfConfig(min_df=2, max_features=50_000, ngram_range=(1, 2), sublinear_tf=True),
        gate=GbdtConfig(objective=gbdt.BINARY, **trees),
        hierarchy=GbdtConfig(objective=gbdt.SOFTMAX, **trees),
        user_type=FtConfig(dim=32, buckets=2 ** 20, word_ngrams=2, char_ngrams=(3, 5),
                           epochs=10, lr0=0.5, seed=seed),
    )


def train_on(data: Sequence[LabeledTicket], taxonomy: Taxonomy,
             config: TrainingConfig | None = None) -> ModelBundle:
    docs = [t.tokens for t in data]
    return train_bundle(docs, [t.response_needed for t in data], [t.user_type for t in data],
                        [(t.issue, t.sub_issue) for t in data], taxonomy, config)


def predict_tasks(bundle: ModelBundle, data: Sequence[LabeledTicket],
                  threshold: float = 0.5) -> dict[str, list[str]]:
    docs = [t.tokens for t in data]
    X = bundle.tfidf.transform_many(docs)
    scores = gbdt.predict_proba_many(bundle.gate, X)[:, 1]
    gate = [RESPONSE if triage.gate_decision(s, threshold) else NO_RESPONSE for s in scores]
    users = [fasttext.predict(bundle.user_type, d)[0] for d in docs]
    hier = triage.classify_many(bundle.hierarchy, X)
    return {"gate": gate, "user_type": users,
            "issue": [h[0][0] for h in hier],
            "sub_issue": [pair_label(h[0][0], h[1][0]) for h in hier]}


def gold_tasks(data: Sequence[LabeledTicket]) -> dict[str, list[str]]:
    return {"gate": [RESPONSE if t.response_needed else NO_RESPONSE for t in data],
            "user_type": [t.user_type for t in data],
            "issue": [t.issue for t in data],
            "sub_issue": [pair_label(t.issue, t.sub_issue) for t in data]}


@dataclass
class ExperimentReport:
    n_train: int
    n_test: int
    cutoff: datetime
    metrics: dict[str, TaskMetrics]
    train_fingerprint: str
    test_fingerprint: str
    tfidf_fitted_on: str
    bundle: ModelBundle | None = field(default=None, repr=False)

    def table(self) -> str:
        lines = [
            f"train tickets: {self.n_train}   test tickets: {self.n_test}   "
            f"cutoff: {format_rfc3339(self.cutoff)}",
            f"tf-idf fitted on: {self.tfidf_fitted_on} (train split {self.train_fingerprint})",
            "",
            f"{'task':<10} {'macro-F1':>9} {'micro-F1':>9} {'classes':>8} "
            f"{'reference F1*':>14}",
        ]
        for task in TASKS:
            m = self.metrics[task]
            lines.append(f"{task:<10} {m.macro_f1:>9.4f} {m.micro_f1:>9.4f} "
                         f"{len(m.labels):>8d} {PAPER_REFERENCE_F1[task]:>14.4f}")
        lines += ["", "* reference F1 values were reported on proprietary production "
                      "data; they are not reproducible here and are shown for orientation only."]
        return "\n".join(lines) + "\n"

    def metric_lines(self) -> str:
        out = []
        for task in TASKS:
            m = self.metrics[task]
            out.append({"task": task, "scope": "summary", "macro_f1": m.macro_f1,
                        "micro_f1": m.micro_f1, "support": sum(m.support.values()),
                        "reference_f1": PAPER_REFERENCE_F1[task],
                        "reference_reproducible": False})
            for label in m.labels:
                out.append({"task": task, "scope": "class", "label": label,
                            "precision": m.precision[label], "recall": m.recall[label],
                            "f1": m.f1[label], "support": m.support[label]})
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in out)


def evaluate_bundle(bundle: ModelBundle, train: Sequence[LabeledTicket],
                    test: Sequence[LabeledTicket], cutoff: datetime,
                    threshold: float = 0.5, out_dir=None, figures: bool = True) -> ExperimentReport:
    """Score ``bundle`` on ``test`` and optionally write the report files.

    With ``out_dir`` the text table, a JSON-lines metrics file and (optionally)
    PNG figures are written there.
    """
    metrics = evaluate(predict_tasks(bundle, test, threshold), gold_tasks(test))
    report = ExperimentReport(len(train), len(test), cutoff, metrics,
                              corpus_fingerprint([t.tokens for t in train]),
                              corpus_fingerprint([t.tokens for t in test]),
                              bundle.tfidf.fingerprint, bundle)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.table(), encoding="utf-8")
        (out / "metrics.jsonl").write_text(report.metric_lines(), encoding="utf-8")
        if figures:
            from . import plots
            plots.write_report_figures(report, out)
    return report


def run_experiment(data: Sequence[LabeledTicket], cutoff: datetime,
                   config: TrainingConfig | None = None, taxonomy: Taxonomy | None = None,
                   threshold: float = 0.5, out_dir=None, figures: bool = True) -> ExperimentReport:
    """Temporal split, train all four models on the early part, score the late part."""
    train, test = temporal_split(data, cutoff)
    taxonomy = taxonomy or taxonomy_from_corpus(data)
    bundle = train_on(train, taxonomy, config or benchmark_training_config())
    if bundle.tfidf.fingerprint != corpus_fingerprint([t.tokens for t in train]):
        raise AssertionError("TF-IDF was not fitted on exactly the training split")
    return evaluate_bundle(bundle, train, test, cutoff, threshold, out_dir, figures)
