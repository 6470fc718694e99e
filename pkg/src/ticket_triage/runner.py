"""Scheduled batch job: fetch, preprocess, infer, act, write back, log."""

from __future__ import annotations

import configparser
import json
import logging
import os
import re
import signal
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable

from . import text_prep, triage
from .bundle import ModelBundle
from .errors import GatewayError, GatewayUnavailable, IoFailure, TriageError
from .gateway import GatewayClient, GatewayConfig, Ticket
from .timeutil import EPOCH, format_rfc3339, parse_rfc3339, utcnow

logger = logging.getLogger(__name__)

ML_PROCESSED_AT = "ml_processed_at"
ML_BUNDLE_VERSION = "ml_bundle_version"
API_KEY_ENV = "TRIAGE_API_KEY"


@dataclass(frozen=True)
class RunnerConfig:
    gateway: GatewayConfig
    bundle_path: str = "bundle.zip"
    taxonomy_path: str | None = None
    template_path: str | None = None
    interval: float = 20 * 60.0          # seconds
    threshold: float = 0.5
    max_tickets_per_cycle: int = 5000
    log_path: str = "triage-log.jsonl"
    state_path: str | None = None        # high-water mark; defaults next to the log
    full_scan: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.max_tickets_per_cycle < 1:
            raise ValueError("max_tickets_per_cycle must be >= 1")

    @property
    def hwm_path(self) -> Path:
        if self.state_path:
            return Path(self.state_path)
        return Path(self.log_path).with_suffix(".hwm")


_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(ms|s|m|h)?\s*$")


def parse_duration(text: str) -> float:
    """'50ms', '90s', '20m', '1h' or a bare number of seconds."""
    m = _DURATION.match(str(text))
    if not m:
        raise ValueError(f"bad duration {text!r}")
    scale = {"ms": 1e-3, "s": 1.0, None: 1.0, "m": 60.0, "h": 3600.0}[m.group(2)]
    return float(m.group(1)) * scale


def load_runner_config(path=None, overrides: dict | None = None) -> RunnerConfig:
    """Read the INI-style config (``[runner]`` and ``[gateway]`` sections).

    ``overrides`` (from command-line flags) win over file values; the API key
    falls back to the ``TRIAGE_API_KEY`` environment variable.
    """
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    run = dict(cp["runner"]) if cp.has_section("runner") else {}
    gw = dict(cp["gateway"]) if cp.has_section("gateway") else {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        (gw if section == "gateway" else run)[name or section] = value

    api_key = gw.get("api_key") or os.environ.get(API_KEY_ENV, "")
    gateway = GatewayConfig(
        base_url=gw.get("base_url", "http://127.0.0.1:8080"),
        api_key=api_key,
        page_size=int(gw.get("page_size", 100)),
        request_timeout=float(gw.get("request_timeout", 10.0)),
        max_retries=int(gw.get("max_retries", 3)),
        backoff_base=float(gw.get("backoff_base", 0.5)),
    )
    return RunnerConfig(
        gateway=gateway,
        bundle_path=run.get("bundle_path", "bundle.zip"),
        taxonomy_path=run.get("taxonomy_path") or None,
        template_path=run.get("template_path") or None,
        interval=parse_duration(run.get("interval", "20m")),
        threshold=float(run.get("threshold", 0.5)),
        max_tickets_per_cycle=int(run.get("max_tickets_per_cycle", 5000)),
        log_path=run.get("log_path", "triage-log.jsonl"),
        state_path=run.get("state_path") or None,
        full_scan=str(run.get("full_scan", "false")).lower() in ("1", "true", "yes"),
        seed=int(run.get("seed", 0)),
    )


# -- persistence -------------------------------------------------------------

def read_high_water_mark(path) -> datetime | None:
    try:
        text = Path(path).read_text(encoding="utf-8").strip()
    except FileNotFoundError:
        return None
    return parse_rfc3339(text) if text else None


def write_high_water_mark(path, ts: datetime) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(format_rfc3339(ts) + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"could not write high-water mark {path}: {exc}") from exc


_log_lock = threading.Lock()


def append_log(records: dict | Iterable[dict], log_path) -> None:
    """Append one JSON record per line and flush."""
    if isinstance(records, dict):
        records = [records]
    lines = "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)
    try:
        with _log_lock, open(log_path, "a", encoding="utf-8") as fh:
            fh.write(lines)
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise IoFailure(f"could not append to {log_path}: {exc}") from exc


def read_log(log_path) -> list[dict]:
    with open(log_path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- one cycle ---------------------------------------------------------------

@dataclass
class CycleReport:
    cycle_id: str
    fetched: int = 0
    skipped: int = 0
    auto_replied: int = 0
    routed: int = 0
    errored: int = 0
    deferred: int = 0
    duration: float = 0.0
    high_water_mark: str | None = None
    gateway_error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.to_dict().items() if v is not None)


def _ticket_log(cycle_id, ticket: Ticket, result, fields_updated, replied, latency, error):
    return {
        "event": "ticket",
        "cycle_id": cycle_id,
        "ticket_id": ticket.id,
        "result": None if result is None else result.to_dict(),
        "fields_updated": fields_updated,
        "replied": replied,
        "latency_ms": {k: round(v * 1000, 3) for k, v in latency.items()},
        "error": error,
    }


def load_templates_for(config: RunnerConfig, bundle: ModelBundle):
    if config.template_path is None:
        return {triage.DEFAULT_KEY: DEFAULT_TEMPLATE}
    return triage.load_templates(config.template_path, bundle.taxonomy)


DEFAULT_TEMPLATE = triage.ResponseTemplate(
    "default", "*", "*",
    "Hi {{user_name}}, thank you for reaching out about ticket {{ticket_id}} "
    "({{issue}} / {{sub_issue}}). We have noted your message and are closing this "
    "ticket; reply here if you need anything else.")


def run_cycle(config: RunnerConfig, bundle: ModelBundle, now: datetime | None = None,
              client: GatewayClient | None = None, templates=None,
              stop_event: threading.Event | None = None) -> CycleReport:
    """Process every ticket updated since the persisted high-water mark.

    Tickets already carrying this bundle's processing marker are skipped. For
    the rest, the enrichment fields and the marker are written first, and an
    auto-reply (with auto-close) is posted only after that write succeeds.
    That ordering keeps replies at-most-once even if a later step fails.
    Per-ticket failures are logged and counted and never abort the cycle.
    """
    now = now or utcnow()
    started = time.monotonic()
    cycle_id = format_rfc3339(now)
    report = CycleReport(cycle_id)
    client = client or GatewayClient(config.gateway)
    if templates is None:
        templates = load_templates_for(config, bundle)
    triager = bundle.triager(triage.TemplateResponder(templates), config.threshold)

    old_hwm = read_high_water_mark(config.hwm_path)
    since = EPOCH if config.full_scan or old_hwm is None else old_hwm
    try:
        tickets = client.fetch_updated_since(since)
    except GatewayError as exc:
        report.gateway_error = str(exc)
        report.errored = 1
        report.high_water_mark = None if old_hwm is None else format_rfc3339(old_hwm)
        report.duration = time.monotonic() - started
        append_log({"event": "cycle", **report.to_dict()}, config.log_path)
        raise GatewayUnavailable(f"ticket fetch failed: {exc}", report) from exc

    report.fetched = len(tickets)
    pending: list[Ticket] = []
    for t in tickets:
        if (t.custom_fields.get(ML_BUNDLE_VERSION) == bundle.version
                and ML_PROCESSED_AT in t.custom_fields):
            report.skipped += 1
        else:
            pending.append(t)
    todo, overflow = pending[:config.max_tickets_per_cycle], pending[config.max_tickets_per_cycle:]

    records = []
    retry_from: list[datetime] = [t.updated_at for t in overflow]
    for t in todo:
        if stop_event is not None and stop_event.is_set():
            retry_from.append(t.updated_at)
            report.deferred += 1
            continue
        latency = {}
        result, fields_updated, replied, error = None, False, False, None
        try:
            t0 = time.monotonic()
            tokens = text_prep.ticket_tokens(t.subject, t.body)
            t1 = time.monotonic()
            latency["preprocess"] = t1 - t0
            result = triager.triage(t.id, tokens, t.requester_name,
                                    f"{t.subject}\n{t.body}", now)
            t2 = time.monotonic()
            latency["infer"] = t2 - t1
            fields = {**result.ml_fields(), ML_PROCESSED_AT: format_rfc3339(now),
                      ML_BUNDLE_VERSION: bundle.version}
            client.update_ticket_fields(t.id, fields)
            fields_updated = True
            if isinstance(result.action, triage.AutoReply):
                client.post_reply(t.id, result.action.rendered_text, auto_close=True)
                replied = True
                report.auto_replied += 1
            else:
                report.routed += 1
            latency["act"] = time.monotonic() - t2
        except (TriageError, ValueError) as exc:
            error = f"{type(exc).__name__}: {exc}"
            report.errored += 1
            if not fields_updated:
                retry_from.append(t.updated_at)
            logger.warning("ticket %s failed: %s", t.id, error)
        records.append(_ticket_log(cycle_id, t, result, fields_updated, replied, latency, error))

    report.deferred += len(overflow)
    if retry_from:
        new_hwm = min(retry_from)
    elif tickets:
        new_hwm = max(t.updated_at for t in tickets)
    else:
        new_hwm = old_hwm
    if new_hwm is not None and old_hwm is not None:
        new_hwm = max(new_hwm, old_hwm)
    if new_hwm is not None:
        write_high_water_mark(config.hwm_path, new_hwm)
        report.high_water_mark = format_rfc3339(new_hwm)

    report.duration = time.monotonic() - started
    records.sort(key=lambda r: r["ticket_id"])
    records.append({"event": "cycle", **report.to_dict()})
    append_log(records, config.log_path)
    return report


# -- scheduler ---------------------------------------------------------------

@dataclass
class Scheduler:
    """Fixed-interval loop with no overlapping cycles.

    Ticks are measured from cycle start. A cycle that runs past one or more
    ticks causes those ticks to be skipped, and each skip is logged.
    ``max_ticks`` counts executed and skipped ticks alike.
    """

    config: RunnerConfig
    cycle: Callable[[threading.Event], object]
    stop_event: threading.Event = field(default_factory=threading.Event)
    clock: Callable[[], float] = time.monotonic
    reports: list = field(default_factory=list)

    def run(self, max_ticks: int | None = None) -> int:
        interval = self.config.interval
        tick = 0
        while not self.stop_event.is_set() and (max_ticks is None or tick < max_ticks):
            start = self.clock()
            try:
                self.reports.append(self.cycle(self.stop_event))
            except GatewayUnavailable as exc:
                logger.error("cycle failed: %s", exc)
                self.reports.append(exc.report)
            except TriageError as exc:
                logger.error("cycle failed: %s", exc)
                append_log({"event": "cycle_error", "error": str(exc),
                            "at": format_rfc3339(utcnow())}, self.config.log_path)
            tick += 1
            next_tick = start + interval
            end = self.clock()
            while next_tick <= end and (max_ticks is None or tick < max_ticks):
                append_log({"event": "tick_skipped", "tick": tick,
                            "overrun_s": round(end - start, 6),
                            "at": format_rfc3339(utcnow())}, self.config.log_path)
                logger.warning("cycle overran the interval; skipping tick %d", tick)
                tick += 1
                next_tick += interval
            if max_ticks is not None and tick >= max_ticks:
                break
            self.stop_event.wait(max(0.0, next_tick - self.clock()))
        return 0


def run_forever(config: RunnerConfig, bundle: ModelBundle, max_ticks: int | None = None,
                stop_event: threading.Event | None = None, client: GatewayClient | None = None,
                install_signals: bool = True) -> int:
    """Run cycles every ``config.interval`` seconds until a termination signal.

    On SIGTERM or SIGINT the in-flight ticket finishes, that cycle's log is
    flushed, and the function returns 0.
    """
    client = client or GatewayClient(config.gateway)
    templates = load_templates_for(config, bundle)
    sched = Scheduler(config, lambda stop: run_cycle(config, bundle, client=client,
                                                     templates=templates, stop_event=stop))
    if stop_event is not None:
        sched.stop_event = stop_event
    previous = {}
    if install_signals and threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGTERM, signal.SIGINT):
            previous[sig] = signal.signal(sig, lambda *_: sched.stop_event.set())
    try:
        return sched.run(max_ticks)
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
