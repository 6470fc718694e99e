"""Command-line entry point: ``triage <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Results go to stdout,
diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import signal
import sys
import threading
from datetime import datetime
from pathlib import Path

from . import __version__, evaluation, text_prep, triage
from .bundle import load_bundle, save_bundle
from .errors import TriageError
from .gateway import GatewayClient, load_fixture, run_mock_server
from .runner import (load_runner_config, load_templates_for, parse_duration, run_cycle,
                     run_forever)
from .timeutil import parse_rfc3339

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    return cp


def _section(cp, name) -> dict:
    return dict(cp[name]) if cp.has_section(name) else {}


def _pick(flag, section: dict, key: str, default, cast=str):
    """Flag value if given, else config file value, else default."""
    if flag is not None:
        return flag
    if key in section:
        return cast(section[key])
    return default


def _cutoff(text: str, data) -> datetime:
    """``70%`` (creation-time quantile) or an RFC 3339 timestamp / date."""
    text = text.strip()
    if text.endswith("%"):
        return evaluation.quantile_cutoff(data, float(text[:-1]) / 100.0)
    if len(text) == 10:
        text += "T00:00:00Z"
    return parse_rfc3339(text)


def _training_config(cp, seed: int):
    base = evaluation.benchmark_training_config(seed)
    sec = _section(cp, "training")
    if not sec:
        return base
    from dataclasses import replace
    trees = {k: t(sec[k]) for k, t in (("n_rounds", int), ("learning_rate", float),
                                        ("max_depth", int), ("reg_lambda", float),
                                        ("gamma", float), ("min_child_hessian", float))
             if k in sec}
    ft = {k: t(sec[k]) for k, t in (("epochs", int), ("dim", int), ("lr0", float)) if k in sec}
    tf = {k: int(sec[k]) for k in ("min_df", "max_features") if k in sec}
    return replace(base, tfidf=replace(base.tfidf, **tf), gate=replace(base.gate, **trees),
                   hierarchy=replace(base.hierarchy, **trees),
                   user_type=replace(base.user_type, **ft))


# -- commands ----------------------------------------------------------------

def cmd_gen_corpus(args, cp) -> int:
    sec = _section(cp, "corpus")
    cfg = evaluation.SynthConfig(
        seed=args.seed if args.seed is not None else int(sec.get("seed", 42)),
        n_tickets=_pick(args.n_tickets, sec, "n_tickets", 2000, int),
        n_issues=_pick(args.n_issues, sec, "n_issues", 8, int),
        sub_issues_per_issue=_pick(args.sub_issues, sec, "sub_issues_per_issue", 3, int),
        noise_rate=_pick(args.noise, sec, "noise_rate", 0.1, float),
        no_response_fraction=_pick(args.no_response_fraction, sec, "no_response_fraction",
                                   0.4, float),
    )
    data = evaluation.generate_corpus(cfg)
    evaluation.save_corpus(data, args.out)
    taxonomy = evaluation.synth_taxonomy(cfg)
    if args.taxonomy_out:
        Path(args.taxonomy_out).write_text(triage.dumps_taxonomy(taxonomy), encoding="utf-8")
    if args.templates_out:
        Path(args.templates_out).write_text(
            triage.dumps_templates(evaluation.synth_templates(taxonomy)), encoding="utf-8")
    print(f"wrote {len(data)} tickets to {args.out}")
    return EXIT_OK


def cmd_train(args, cp) -> int:
    data = evaluation.load_corpus(args.corpus)
    train, _ = evaluation.temporal_split(data, _cutoff(args.cutoff, data))
    taxonomy = (triage.load_taxonomy(args.taxonomy) if args.taxonomy
                else evaluation.taxonomy_from_corpus(data))
    bundle = evaluation.train_on(train, taxonomy, _training_config(cp, args.seed or 42))
    save_bundle(bundle, args.out)
    print(f"bundle_version={bundle.version}")
    print(f"train_tickets={len(train)}")
    print(f"path={args.out}")
    return EXIT_OK


def cmd_evaluate(args, cp) -> int:
    data = evaluation.load_corpus(args.corpus)
    cutoff = _cutoff(args.cutoff, data)
    threshold = _pick(args.threshold, _section(cp, "runner"), "threshold", 0.5, float)
    if args.bundle:
        train, test = evaluation.temporal_split(data, cutoff)
        report = evaluation.evaluate_bundle(load_bundle(args.bundle), train, test, cutoff,
                                            threshold, args.out, not args.no_figures)
    else:
        report = evaluation.run_experiment(data, cutoff, _training_config(cp, args.seed or 42),
                                           threshold=threshold, out_dir=args.out,
                                           figures=not args.no_figures)
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_predict(args, cp) -> int:
    taxonomy = triage.load_taxonomy(args.taxonomy) if args.taxonomy else None
    bundle = load_bundle(args.bundle, taxonomy)
    threshold = _pick(args.threshold, _section(cp, "runner"), "threshold", 0.5, float)
    templates_path = args.templates or _section(cp, "runner").get("template_path")
    if templates_path:
        templates = triage.load_templates(templates_path, bundle.taxonomy)
    else:
        from .runner import DEFAULT_TEMPLATE
        templates = {triage.DEFAULT_KEY: DEFAULT_TEMPLATE}
    tokens = text_prep.ticket_tokens(args.subject or "", args.text)
    result = bundle.triager(triage.TemplateResponder(templates), threshold).triage(
        args.ticket_id, tokens, args.user_name, args.text)
    if args.json:
        print(json.dumps(result.to_dict(), sort_keys=True))
        return EXIT_OK
    d = result.to_dict()
    print(f"ticket_id={result.ticket_id}")
    print(f"action={result.action.kind}")
    for k, v in result.ml_fields().items():
        print(f"{k}={v}")
    print(f"response_score={result.response_score:.6f}")
    print(f"user_type_probability={result.user_type[1]:.6f}")
    print(f"issue_probability={result.issue[1]:.6f}")
    print(f"sub_issue_probability={result.sub_issue[1]:.6f}")
    if "template_id" in d["action"]:
        print(f"template_id={d['action']['template_id']}")
        print(f"reply={json.dumps(d['action']['rendered_text'])}")
    print(f"bundle_version={bundle.version}")
    return EXIT_OK


def cmd_run_batch(args, cp) -> int:
    overrides = {"bundle_path": args.bundle, "log_path": args.log, "state_path": args.state,
                 "template_path": args.templates, "taxonomy_path": args.taxonomy,
                 "interval": args.interval, "threshold": args.threshold,
                 "seed": args.seed, "gateway.base_url": args.base_url,
                 "gateway.api_key": args.api_key, "gateway.max_retries": args.max_retries}
    config = load_runner_config(args.config, {k: None if v is None else str(v)
                                              for k, v in overrides.items()})
    if not config.gateway.api_key:
        raise UsageError("no gateway api key (use --api-key, the config file or TRIAGE_API_KEY)")
    taxonomy = triage.load_taxonomy(config.taxonomy_path) if config.taxonomy_path else None
    bundle = load_bundle(config.bundle_path, taxonomy)
    client = GatewayClient(config.gateway)
    if args.once:
        report = run_cycle(config, bundle, client=client,
                           templates=load_templates_for(config, bundle))
        print(report.summary())
        return EXIT_OK
    return run_forever(config, bundle, max_ticks=args.max_ticks, client=client)


def cmd_mock_server(args, cp) -> int:
    sec = _section(cp, "mock")
    tickets = []
    if args.fixture:
        if str(args.fixture).endswith(".jsonl"):
            tickets = [t.ticket for t in evaluation.load_corpus(args.fixture)]
        else:
            tickets = load_fixture(args.fixture)
    server = run_mock_server(
        tickets, port=_pick(args.port, sec, "port", 8080, int),
        api_key=_pick(args.api_key, sec, "api_key", "test-key"),
        fault_rate=_pick(args.fault_rate, sec, "fault_rate", 0.0, float),
        seed=args.seed if args.seed is not None else int(sec.get("seed", 0)))
    print(f"mock gateway listening on {server.url} with {len(tickets)} tickets", flush=True)
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, lambda *_: stop.set())
    try:
        stop.wait(args.duration)
    finally:
        server.stop()
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="triage", description="Support ticket triage toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="INI config file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic labeled corpus")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--n-tickets", type=int, help="number of tickets (2000)")
    p.add_argument("--n-issues", type=int, help="number of issues (8)")
    p.add_argument("--sub-issues", type=int, help="sub-issues per issue (3)")
    p.add_argument("--noise", type=float, help="signature word noise rate (0.1)")
    p.add_argument("--no-response-fraction", type=float, help="share of no-response tickets (0.4)")
    p.add_argument("--taxonomy-out", help="also write the taxonomy file here")
    p.add_argument("--templates-out", help="also write response templates (JSONL) here")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", parents=[common], help="train a model bundle")
    p.add_argument("--corpus", required=True, help="labeled corpus JSONL")
    p.add_argument("--cutoff", default="70%", help="RFC 3339 time, date, or quantile like 70%%")
    p.add_argument("--out", required=True, help="bundle path to write")
    p.add_argument("--taxonomy", help="taxonomy file (default: derived from the corpus)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="print the evaluation report")
    p.add_argument("--corpus", required=True, help="labeled corpus JSONL")
    p.add_argument("--cutoff", default="70%", help="RFC 3339 time, date, or quantile like 70%%")
    p.add_argument("--bundle", help="evaluate this bundle (default: train one on the split)")
    p.add_argument("--out", help="directory for report.txt, metrics.jsonl and PNG figures")
    p.add_argument("--threshold", type=float, help="gate threshold (0.5)")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="triage one ticket text")
    p.add_argument("--bundle", required=True, help="model bundle")
    p.add_argument("--text", required=True, help="ticket body")
    p.add_argument("--subject", default="", help="ticket subject")
    p.add_argument("--ticket-id", default="0", help="ticket id used in the reply")
    p.add_argument("--user-name", default=None, help="requester name used in the reply")
    p.add_argument("--templates", help="response templates JSONL")
    p.add_argument("--taxonomy", help="taxonomy file to check the bundle against")
    p.add_argument("--threshold", type=float, help="gate threshold (0.5)")
    p.add_argument("--json", action="store_true", help="print the result as one JSON object")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("run-batch", parents=[common], help="run the scheduled batch job")
    p.add_argument("--bundle", help="model bundle (overrides runner.bundle_path)")
    p.add_argument("--once", action="store_true", help="run a single cycle and exit")
    p.add_argument("--max-ticks", type=int, default=None, help="stop after this many ticks")
    p.add_argument("--base-url", help="gateway base URL")
    p.add_argument("--api-key", help="gateway API key (prefer TRIAGE_API_KEY)")
    p.add_argument("--max-retries", type=int, help="gateway retries per request")
    p.add_argument("--interval", help="cycle interval such as 20m or 50ms")
    p.add_argument("--threshold", type=float, help="gate threshold")
    p.add_argument("--log", help="JSONL log path")
    p.add_argument("--state", help="high-water mark file")
    p.add_argument("--templates", help="response templates JSONL")
    p.add_argument("--taxonomy", help="taxonomy file")
    p.set_defaults(func=cmd_run_batch)

    p = sub.add_parser("mock-server", parents=[common], help="serve the mock ticketing API")
    p.add_argument("--fixture", help="tickets as JSON, or a labeled corpus JSONL")
    p.add_argument("--port", type=int, help="port (8080; 0 picks a free one)")
    p.add_argument("--api-key", help="accepted API key (test-key)")
    p.add_argument("--fault-rate", type=float, help="share of requests answered with 429")
    p.add_argument("--duration", type=float, default=None, help="stop after N seconds")
    p.set_defaults(func=cmd_mock_server)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run-batch" and args.interval is not None:
            try:
                parse_duration(args.interval)
            except ValueError as exc:
                raise UsageError(f"--interval: {exc}") from None
        cp = _read_config(args.config)
        return args.func(args, cp)
    except UsageError as exc:
        print(f"triage {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TriageError, OSError, ValueError, configparser.Error) as exc:
        print(f"triage {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
