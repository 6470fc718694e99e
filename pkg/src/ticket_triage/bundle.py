"""Model bundle: the TF-IDF vocabulary, response gate, user-type model and
issue hierarchy shipped as one archive with a hashed manifest."""

from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import fasttext, gbdt, tfidf, triage
from .errors import (HashMismatch, IncompatibleVersions, IoFailure,
                     MissingComponent, ModelFormatError, TaxonomyMismatch,
                     TaxonomyViolation)
from .fasttext import FastTextModel, FtConfig
from .gbdt import GbdtConfig, GbdtModel
from .tfidf import TfidfConfig, TfidfModel
from .timeutil import format_rfc3339, utcnow
from .triage import HierarchicalModel, Taxonomy

BUNDLE_FORMAT = "triage-bundle"
BUNDLE_VERSION = 1
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class TrainingConfig:
    tfidf: TfidfConfig = field(default_factory=TfidfConfig)
    gate: GbdtConfig = field(default_factory=lambda: GbdtConfig(objective=gbdt.BINARY))
    hierarchy: GbdtConfig = field(default_factory=GbdtConfig)
    user_type: FtConfig = field(default_factory=FtConfig)


@dataclass(frozen=True)
class ModelBundle:
    manifest: Mapping
    tfidf: TfidfModel
    gate: GbdtModel
    user_type: FastTextModel
    hierarchy: HierarchicalModel

    @property
    def version(self) -> str:
        return self.manifest["bundle_version"]

    @property
    def taxonomy(self) -> Taxonomy:
        return self.hierarchy.taxonomy

    def model_versions(self) -> dict[str, str]:
        out = {name: c["version"] for name, c in self.manifest["components"].items()
               if not name.startswith("sub/")}
        out["bundle"] = self.version
        return out

    def triager(self, responder, threshold: float = 0.5) -> triage.Triager:
        return triage.Triager(self.tfidf, self.gate, self.user_type, self.hierarchy,
                              responder, threshold, self.model_versions())


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _components(tf: TfidfModel, gate: GbdtModel, ft: FastTextModel,
                hier: HierarchicalModel) -> dict[str, bytes]:
    comps = {
        "tfidf": tfidf.dumps(tf),
        "gate": gbdt.dumps(gate),
        "user_type": fasttext.dumps(ft),
        "taxonomy": triage.dumps_taxonomy(hier.taxonomy),
        "issue": gbdt.dumps(hier.issue_model),
    }
    for i, issue in enumerate(hier.taxonomy.issues):
        comps[f"sub/{i:03d}"] = gbdt.dumps(hier.sub_models[issue])
    return {k: v.encode("utf-8") for k, v in comps.items()}


def _config_fingerprint(obj) -> str:
    return _sha256(repr(obj).encode("utf-8"))[:16]


def make_bundle(tf: TfidfModel, gate: GbdtModel, ft: FastTextModel,
                hier: HierarchicalModel, training: TrainingConfig | None = None,
                created_at=None) -> ModelBundle:
    comps = _components(tf, gate, ft, hier)
    hashes = {name: _sha256(data) for name, data in comps.items()}
    bundle_version = _sha256("".join(f"{k}={hashes[k]}\n" for k in sorted(hashes))
                             .encode("ascii"))[:16]
    manifest = {
        "format": BUNDLE_FORMAT,
        "format_version": BUNDLE_VERSION,
        "bundle_version": bundle_version,
        "created_at": format_rfc3339(created_at or utcnow()),
        "components": {name: {"file": _filename(name), "sha256": h, "version": h[:12]}
                       for name, h in hashes.items()},
        "config_fingerprints": {} if training is None else {
            "tfidf": _config_fingerprint(training.tfidf),
            "gate": _config_fingerprint(training.gate),
            "hierarchy": _config_fingerprint(training.hierarchy),
            "user_type": _config_fingerprint(training.user_type),
        },
        "tfidf_fitted_on": tf.fingerprint,
    }
    return ModelBundle(manifest, tf, gate, ft, hier)


def _filename(name: str) -> str:
    ext = {"tfidf": ".txt", "user_type": ".ft", "taxonomy": ".txt"}.get(name, ".gbdt")
    return name + ext


def train_bundle(docs: Sequence[Sequence[str]], response_needed: Sequence[bool],
                 user_types: Sequence[str], issue_pairs: Sequence[tuple[str, str]],
                 taxonomy: Taxonomy, config: TrainingConfig | None = None) -> ModelBundle:
    """Fit the shared TF-IDF vocabulary and all three model families."""
    config = config or TrainingConfig()
    tf = tfidf.fit(docs, config.tfidf)
    X = tf.transform_many(docs)
    gate_cfg = config.gate
    if gate_cfg.objective != gbdt.BINARY:
        raise ValueError("the response gate needs the binary_logistic objective")
    gate = gbdt.train(X, np.asarray(response_needed, dtype=np.int64), gate_cfg,
                      n_features=tf.n_features)
    ft = fasttext.train(docs, list(user_types), config.user_type)
    hier = triage.train_hierarchical(docs, issue_pairs, taxonomy,
                                     gbdt_config=config.hierarchy, tfidf_model=tf, X=X)
    return make_bundle(tf, gate, ft, hier, config)


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write the bundle archive atomically (temp file, then rename)."""
    path = Path(path)
    comps = _components(bundle.tfidf, bundle.gate, bundle.user_type, bundle.hierarchy)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(comps):
            info = zipfile.ZipInfo(_filename(name), date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, comps[name])
        info = zipfile.ZipInfo(MANIFEST, date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(bundle.manifest, indent=2, sort_keys=True))
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(buf.getvalue())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"could not write bundle to {path}: {exc}") from exc
    finally:
        if tmp.exists():
            tmp.unlink()


def load_bundle(path, taxonomy: Taxonomy | None = None) -> ModelBundle:
    """Load and cross-validate a bundle; fails closed on any mismatch.

    When ``taxonomy`` is given (normally read from the deployment's taxonomy
    file) it must equal the taxonomy the hierarchy was trained on.
    """
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise MissingComponent(f"cannot open bundle {path}: {exc}") from exc
    with zf:
        names = set(zf.namelist())
        if MANIFEST not in names:
            raise MissingComponent("bundle has no manifest")
        try:
            manifest = json.loads(zf.read(MANIFEST))
        except ValueError as exc:
            raise IncompatibleVersions(f"unreadable manifest: {exc}") from exc
        if (manifest.get("format") != BUNDLE_FORMAT
                or manifest.get("format_version") != BUNDLE_VERSION):
            raise IncompatibleVersions(
                f"unsupported bundle format {manifest.get('format')!r} "
                f"v{manifest.get('format_version')!r}")
        comps = manifest.get("components", {})
        for required in ("tfidf", "gate", "user_type", "taxonomy", "issue"):
            if required not in comps:
                raise MissingComponent(f"manifest lists no {required!r} component")
        texts: dict[str, str] = {}
        for name, meta in comps.items():
            if meta["file"] not in names:
                raise MissingComponent(f"component file {meta['file']!r} missing")
            data = zf.read(meta["file"])
            if _sha256(data) != meta["sha256"]:
                raise HashMismatch(f"component {name!r} does not match its manifest hash")
            texts[name] = data.decode("utf-8")

    try:
        tf = tfidf.loads(texts["tfidf"])
        gate = gbdt.loads(texts["gate"])
        ft = fasttext.loads(texts["user_type"])
        tax = triage.loads_taxonomy(texts["taxonomy"], "bundle:taxonomy.txt")
        issue_model = gbdt.loads(texts["issue"])
        subs = {}
        for i, issue in enumerate(tax.issues):
            key = f"sub/{i:03d}"
            if key not in texts:
                raise MissingComponent(f"no sub-issue model for {issue!r}")
            subs[issue] = gbdt.loads(texts[key])
    except ModelFormatError as exc:
        raise IncompatibleVersions(str(exc)) from exc

    if gate.config.objective != gbdt.BINARY:
        raise IncompatibleVersions("gate model is not a binary classifier")
    for label, m in [("gate", gate), ("issue", issue_model), *subs.items()]:
        if m.feature_count != tf.n_features:
            raise IncompatibleVersions(
                f"{label} model expects {m.feature_count} features, "
                f"TF-IDF produces {tf.n_features}")
    try:
        hier = HierarchicalModel(issue_model, subs, tf, tax)
    except TaxonomyViolation as exc:
        raise TaxonomyMismatch(str(exc)) from exc
    if taxonomy is not None and taxonomy != tax:
        raise TaxonomyMismatch("deployment taxonomy differs from the bundle's hierarchy")
    return ModelBundle(manifest, tf, gate, ft, hier)
