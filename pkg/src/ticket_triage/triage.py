"""Issue taxonomy, hierarchical issue/sub-issue models, response gating and
template replies.

A ticket flows through three independent inferences (gate, user type,
issue hierarchy) that share the normalized token stream. Tickets the gate
marks as not needing a human get a templated auto-reply, and everything else
is routed to an agent with the enrichment fields filled in.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import fasttext, gbdt, tfidf
from .errors import FileFormatError, NoTemplate, TaxonomyViolation
from .tfidf import SparseVector, TfidfConfig, TfidfModel
from .timeutil import format_rfc3339

TAXONOMY_HEADER = "taxonomy 1"
DEFAULT_KEY = ("*", "*")
PLACEHOLDERS = ("ticket_id", "user_name", "issue", "sub_issue")
_PLACEHOLDER = re.compile(r"\{\{\s*([^{}]*?)\s*\}\}")

RESPONSE = "response"
NO_RESPONSE = "no_response"

# custom field keys written back to the ticketing system
ML_RESPONSE_TYPE = "ml_response_type"
ML_CLASSIFIED_CATEGORY = "ml_classified_category"
ML_ISSUE = "ml_issue"
ML_SUB_ISSUE = "ml_sub_issue"


# -- taxonomy ----------------------------------------------------------------

@dataclass(frozen=True)
class Taxonomy:
    issues: tuple[str, ...]
    sub_issues: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        if len(set(self.issues)) != len(self.issues):
            raise ValueError("issue labels must be unique")
        if set(self.sub_issues) != set(self.issues):
            raise ValueError("sub_issues keys must match issues")
        for issue, subs in self.sub_issues.items():
            if not subs:
                raise ValueError(f"issue {issue!r} has no sub-issues")
            if len(set(subs)) != len(subs):
                raise ValueError(f"duplicate sub-issue under {issue!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[str]]) -> "Taxonomy":
        return cls(tuple(data), {k: tuple(v) for k, v in data.items()})

    def to_dict(self) -> dict[str, list[str]]:
        return {i: list(self.sub_issues[i]) for i in self.issues}

    def contains(self, issue: str, sub_issue: str) -> bool:
        return issue in self.sub_issues and sub_issue in self.sub_issues[issue]

    def issue_index(self, issue: str) -> int:
        return self.issues.index(issue)

    def pairs(self) -> list[tuple[str, str]]:
        return [(i, s) for i in self.issues for s in self.sub_issues[i]]

    def __eq__(self, other):
        if not isinstance(other, Taxonomy):
            return NotImplemented
        return self.to_dict() == other.to_dict() and self.issues == other.issues

    __hash__ = None


def dumps_taxonomy(tax: Taxonomy) -> str:
    lines = [TAXONOMY_HEADER]
    for issue in tax.issues:
        lines.append(issue)
        lines.extend(f"    {s}" for s in tax.sub_issues[issue])
    return "\n".join(lines) + "\n"


def loads_taxonomy(text: str, path: str = "<taxonomy>") -> Taxonomy:
    """Parse the indented taxonomy format.

    Unindented lines are issues and indented lines are sub-issues of the
    issue above them. Blank lines and ``#`` comments are ignored.
    """
    issues: dict[str, list[str]] = {}
    current = None
    seen_header = False
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if not seen_header:
            if stripped != TAXONOMY_HEADER:
                raise FileFormatError(path, line_no, f"expected header {TAXONOMY_HEADER!r}")
            seen_header = True
            continue
        if raw[:1].isspace():
            if current is None:
                raise FileFormatError(path, line_no, "sub-issue before any issue")
            if stripped in issues[current]:
                raise FileFormatError(path, line_no,
                                      f"duplicate sub-issue {stripped!r} under {current!r}")
            issues[current].append(stripped)
        else:
            if current is not None and not issues[current]:
                raise FileFormatError(path, line_no, f"issue {current!r} has no sub-issues")
            if stripped in issues:
                raise FileFormatError(path, line_no, f"duplicate issue {stripped!r}")
            issues[stripped] = []
            current = stripped
    if not seen_header:
        raise FileFormatError(path, 1, "empty taxonomy document")
    if current is None:
        raise FileFormatError(path, 1, "taxonomy lists no issues")
    if not issues[current]:
        raise FileFormatError(path, len(text.splitlines()),
                              f"issue {current!r} has no sub-issues")
    return Taxonomy.from_dict(issues)


def load_taxonomy(path) -> Taxonomy:
    return loads_taxonomy(Path(path).read_text(encoding="utf-8"), str(path))


# -- templates ---------------------------------------------------------------

@dataclass(frozen=True)
class ResponseTemplate:
    template_id: str
    issue: str
    sub_issue: str
    body: str

    @property
    def key(self) -> tuple[str, str]:
        return (self.issue, self.sub_issue)


def template_placeholders(body: str) -> list[str]:
    return _PLACEHOLDER.findall(body)


def loads_templates(text: str, taxonomy: Taxonomy | None = None,
                    path: str = "<templates>") -> dict[tuple[str, str], ResponseTemplate]:
    """Parse line-delimited JSON template records.

    Each record has ``template_id``, ``issue``, ``sub_issue`` and ``body``.
    ``issue == sub_issue == "*"`` declares the default template.
    """
    out: dict[tuple[str, str], ResponseTemplate] = {}
    ids: set[str] = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FileFormatError(path, line_no, f"invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise FileFormatError(path, line_no, "record must be an object")
        missing = [k for k in ("template_id", "issue", "sub_issue", "body")
                   if not isinstance(rec.get(k), str)]
        if missing:
            raise FileFormatError(path, line_no, f"missing or non-string field(s): {missing}")
        tpl = ResponseTemplate(rec["template_id"], rec["issue"], rec["sub_issue"], rec["body"])
        bad = [p for p in template_placeholders(tpl.body) if p not in PLACEHOLDERS]
        if bad:
            raise FileFormatError(path, line_no, f"unknown placeholder(s): {bad}")
        if tpl.template_id in ids:
            raise FileFormatError(path, line_no, f"duplicate template_id {tpl.template_id!r}")
        if tpl.key in out:
            raise FileFormatError(path, line_no, f"second template for {tpl.key}")
        if (taxonomy is not None and tpl.key != DEFAULT_KEY
                and not taxonomy.contains(*tpl.key)):
            raise FileFormatError(path, line_no, f"{tpl.key} is not in the taxonomy")
        ids.add(tpl.template_id)
        out[tpl.key] = tpl
    return out


def load_templates(path, taxonomy: Taxonomy | None = None):
    return loads_templates(Path(path).read_text(encoding="utf-8"), taxonomy, str(path))


def dumps_templates(templates) -> str:
    items = templates.values() if isinstance(templates, Mapping) else templates
    return "".join(json.dumps({"template_id": t.template_id, "issue": t.issue,
                               "sub_issue": t.sub_issue, "body": t.body},
                              ensure_ascii=False) + "\n" for t in items)


def render(body: str, values: Mapping[str, str]) -> str:
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], body)


def select_template(templates: Mapping[tuple[str, str], ResponseTemplate],
                    issue: str, sub_issue: str) -> ResponseTemplate:
    tpl = templates.get((issue, sub_issue)) or templates.get(DEFAULT_KEY)
    if tpl is None:
        raise NoTemplate(f"no template for ({issue!r}, {sub_issue!r}) and no default")
    return tpl


def select_and_render(templates, issue: str, sub_issue: str, ticket_id,
                      user_name: str | None = None) -> tuple[str, str]:
    """Pick the exact (issue, sub_issue) template, else the default, and fill it in.

    Returns ``(template_id, text)``. A missing requester name renders as "Customer".
    """
    tpl = select_template(templates, issue, sub_issue)
    text = render(tpl.body, {
        "ticket_id": str(ticket_id),
        "user_name": user_name or "Customer",
        "issue": issue,
        "sub_issue": sub_issue,
    })
    return tpl.template_id, text


class Responder(Protocol):
    def compose(self, issue: str, sub_issue: str, ticket_id, user_name: str | None,
                text: str) -> tuple[str, str]:
        """Return ``(template_id, reply_text)`` for an auto-closable ticket."""


class TemplateResponder:
    def __init__(self, templates: Mapping[tuple[str, str], ResponseTemplate]):
        self.templates = dict(templates)

    def compose(self, issue, sub_issue, ticket_id, user_name, text):
        return select_and_render(self.templates, issue, sub_issue, ticket_id, user_name)


class GenerativeResponder:
    """Placeholder for an LLM-backed responder; no client ships with this package.

    A subclass overrides ``compose`` to call its model with the ticket text
    and the predicted labels, returning an id such as ``"gen:<model>"``.
    """

    def compose(self, issue, sub_issue, ticket_id, user_name, text):
        raise NotImplementedError("no generative responder is configured")


# -- hierarchical issue model ------------------------------------------------

@dataclass(frozen=True)
class HierarchicalModel:
    issue_model: gbdt.GbdtModel
    sub_models: Mapping[str, gbdt.GbdtModel]
    tfidf: TfidfModel
    taxonomy: Taxonomy

    def __post_init__(self):
        if set(self.sub_models) != set(self.taxonomy.issues):
            raise TaxonomyViolation("sub-model keys must equal the taxonomy issues")
        for issue, m in self.sub_models.items():
            if m.n_classes != len(self.taxonomy.sub_issues[issue]):
                raise TaxonomyViolation(f"sub-model for {issue!r} has wrong class count")
        if self.issue_model.n_classes != len(self.taxonomy.issues):
            raise TaxonomyViolation("issue model class count != number of issues")


def train_hierarchical(docs: Sequence[Sequence[str]],
                       labels: Sequence[tuple[str, str]],
                       taxonomy: Taxonomy,
                       tfidf_config: TfidfConfig | None = None,
                       gbdt_config: gbdt.GbdtConfig | None = None,
                       tfidf_model: TfidfModel | None = None,
                       X=None) -> HierarchicalModel:
    """One issue-level model over all data, then one sub-issue model per issue
    trained only on that issue's examples.

    Issues whose examples carry a single sub-issue get a constant model.
    A pre-fitted ``tfidf_model`` (and optionally its matrix ``X``) may be
    passed to share the vocabulary with the response gate.
    """
    if len(docs) != len(labels):
        raise TaxonomyViolation(f"{len(docs)} documents but {len(labels)} label pairs")
    for issue, sub in labels:
        if not taxonomy.contains(issue, sub):
            raise TaxonomyViolation(f"label pair ({issue!r}, {sub!r}) not in taxonomy")
    present = {issue for issue, _ in labels}
    absent = [i for i in taxonomy.issues if i not in present]
    if absent:
        raise TaxonomyViolation(f"issues without training examples: {absent}")

    tf = tfidf_model or tfidf.fit(docs, tfidf_config)
    if X is None:
        X = tf.transform_many(docs)
    base = gbdt_config or gbdt.GbdtConfig()

    y_issue = np.array([taxonomy.issue_index(i) for i, _ in labels])
    issue_cfg = _softmax_config(base, len(taxonomy.issues))
    issue_model = gbdt.train(X, y_issue, issue_cfg, n_features=tf.n_features)

    sub_models = {}
    for issue in taxonomy.issues:
        subs = taxonomy.sub_issues[issue]
        rows = np.flatnonzero(y_issue == taxonomy.issue_index(issue))
        y_sub = np.array([subs.index(labels[r][1]) for r in rows])
        cfg = _softmax_config(base, len(subs))
        if np.unique(y_sub).size == 1:
            sub_models[issue] = gbdt.constant_model(len(subs), tf.n_features,
                                                    int(y_sub[0]), cfg)
        else:
            sub_models[issue] = gbdt.train(X[rows], y_sub, cfg, n_features=tf.n_features)
    return HierarchicalModel(issue_model, sub_models, tf, taxonomy)


def _softmax_config(base: gbdt.GbdtConfig, k: int) -> gbdt.GbdtConfig:
    return gbdt.GbdtConfig(
        n_rounds=base.n_rounds, learning_rate=base.learning_rate,
        max_depth=base.max_depth, reg_lambda=base.reg_lambda, gamma=base.gamma,
        min_child_hessian=base.min_child_hessian, objective=gbdt.SOFTMAX, n_classes=k)


def classify_vector(model: HierarchicalModel, v: SparseVector):
    """((issue, p_issue), (sub_issue, p_sub | issue)) for one TF-IDF vector."""
    p_issue = gbdt.predict_proba(model.issue_model, v)
    i = gbdt.argmax_smallest(p_issue)
    issue = model.taxonomy.issues[i]
    p_sub = gbdt.predict_proba(model.sub_models[issue], v)
    s = gbdt.argmax_smallest(p_sub)
    return (issue, float(p_issue[i])), (model.taxonomy.sub_issues[issue][s], float(p_sub[s]))


def classify(model: HierarchicalModel, tokens: Sequence[str]):
    return classify_vector(model, model.tfidf.transform(tokens))


def classify_many(model: HierarchicalModel, X) -> list[tuple[tuple[str, float], tuple[str, float]]]:
    """Batch form of :func:`classify_vector` over a CSR matrix."""
    P = gbdt.predict_proba_many(model.issue_model, X)
    idx = np.argmax(P, axis=1)
    out: list = [None] * X.shape[0]
    for i, issue in enumerate(model.taxonomy.issues):
        rows = np.flatnonzero(idx == i)
        if rows.size == 0:
            continue
        Ps = gbdt.predict_proba_many(model.sub_models[issue], X[rows])
        sidx = np.argmax(Ps, axis=1)
        subs = model.taxonomy.sub_issues[issue]
        for r, s, ps in zip(rows, sidx, Ps):
            out[r] = ((issue, float(P[r, i])), (subs[s], float(ps[s])))
    return out


# -- response gate -----------------------------------------------------------

def gate_decision(score: float, threshold: float = 0.5) -> bool:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    return score >= threshold


def gate_response(gate_model: gbdt.GbdtModel, tf: TfidfModel, tokens: Sequence[str],
                  threshold: float = 0.5) -> tuple[bool, float]:
    """(response_needed, P(response)); class 1 of the gate is "response needed"."""
    score = float(gbdt.predict_proba(gate_model, tf.transform(tokens))[1])
    return gate_decision(score, threshold), score


# -- full triage -------------------------------------------------------------

@dataclass(frozen=True)
class AutoReply:
    template_id: str
    rendered_text: str
    kind: str = "AutoReply"


@dataclass(frozen=True)
class RouteToAgent:
    kind: str = "RouteToAgent"


@dataclass(frozen=True)
class TriageResult:
    ticket_id: int | str
    response_needed: bool
    response_score: float
    user_type: tuple[str, float]
    issue: tuple[str, float]
    sub_issue: tuple[str, float]
    action: AutoReply | RouteToAgent
    model_versions: Mapping[str, str]
    decided_at: datetime

    def __post_init__(self):
        if isinstance(self.action, AutoReply) == self.response_needed:
            raise ValueError("AutoReply must coincide with response_needed == False")

    @property
    def joint_sub_issue_probability(self) -> float:
        return self.issue[1] * self.sub_issue[1]

    def ml_fields(self) -> dict[str, str]:
        return {
            ML_RESPONSE_TYPE: RESPONSE if self.response_needed else NO_RESPONSE,
            ML_CLASSIFIED_CATEGORY: self.user_type[0],
            ML_ISSUE: self.issue[0],
            ML_SUB_ISSUE: self.sub_issue[0],
        }

    def to_dict(self) -> dict:
        action = {"kind": self.action.kind}
        if isinstance(self.action, AutoReply):
            action.update(template_id=self.action.template_id,
                          rendered_text=self.action.rendered_text)
        return {
            "ticket_id": self.ticket_id,
            "response_needed": self.response_needed,
            "response_score": self.response_score,
            "user_type": {"label": self.user_type[0], "probability": self.user_type[1]},
            "issue": {"label": self.issue[0], "probability": self.issue[1]},
            "sub_issue": {"label": self.sub_issue[0], "probability": self.sub_issue[1],
                          "joint_probability": self.joint_sub_issue_probability},
            "action": action,
            "model_versions": dict(self.model_versions),
            "decided_at": format_rfc3339(self.decided_at),
        }


@dataclass
class Triager:
    """Runs all three inferences for one ticket and picks the action."""

    tfidf: TfidfModel
    gate: gbdt.GbdtModel
    user_type: fasttext.FastTextModel
    hierarchy: HierarchicalModel
    responder: Responder
    threshold: float = 0.5
    model_versions: Mapping[str, str] = field(default_factory=dict)

    def triage(self, ticket_id, tokens: Sequence[str], user_name: str | None = None,
               text: str = "", now: datetime | None = None) -> TriageResult:
        v = self.tfidf.transform(tokens)
        score = float(gbdt.predict_proba(self.gate, v)[1])
        needed = gate_decision(score, self.threshold)
        user = fasttext.predict(self.user_type, tokens)
        issue, sub = classify_vector(self.hierarchy, v)
        if needed:
            action = RouteToAgent()
        else:
            tid, reply = self.responder.compose(issue[0], sub[0], ticket_id, user_name, text)
            action = AutoReply(tid, reply)
        return TriageResult(ticket_id, needed, score, user, issue, sub, action,
                            dict(self.model_versions), now or datetime.now(timezone.utc))
