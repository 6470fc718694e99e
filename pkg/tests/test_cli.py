import json
import subprocess
import sys

import pytest

from ticket_triage import evaluation as ev, runner
from ticket_triage.bundle import load_bundle
from ticket_triage.cli import main
from ticket_triage.gateway import run_mock_server

from conftest import SMALL_SYNTH

COMMANDS = ["gen-corpus", "train", "evaluate", "predict", "run-batch", "mock-server"]

FAST_INI = """[training]
n_rounds = 10
epochs = 5
dim = 16
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Corpus, taxonomy, templates and a trained bundle made through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    (d / "fast.ini").write_text(FAST_INI)
    assert main(["gen-corpus", "--seed", "7", "--n-tickets", "400", "--n-issues", "3",
                 "--sub-issues", "2", "--noise", "0", "--out", str(d / "corpus.jsonl"),
                 "--taxonomy-out", str(d / "tax.txt"),
                 "--templates-out", str(d / "tpl.jsonl")]) == 0
    assert main(["train", "--corpus", str(d / "corpus.jsonl"), "--cutoff", "70%",
                 "--config", str(d / "fast.ini"), "--taxonomy", str(d / "tax.txt"),
                 "--out", str(d / "bundle.zip")]) == 0
    return d


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_gen_corpus_matches_library(workdir):
    data = ev.load_corpus(workdir / "corpus.jsonl")
    assert data == ev.generate_corpus(SMALL_SYNTH)


def test_train_output(workdir, capsys):
    out = workdir / "again.zip"
    assert main(["train", "--corpus", str(workdir / "corpus.jsonl"), "--cutoff", "70%",
                 "--config", str(workdir / "fast.ini"), "--taxonomy", str(workdir / "tax.txt"),
                 "--out", str(out)]) == 0
    got = kv(capsys.readouterr().out)
    assert got["train_tickets"] == "280" and got["path"] == str(out)
    # same inputs, same content hash (only the manifest timestamp differs)
    version = load_bundle(out).version
    assert version == load_bundle(workdir / "bundle.zip").version == got["bundle_version"]


def test_predict_auto_reply(workdir, capsys):
    data = ev.load_corpus(workdir / "corpus.jsonl")
    quiet = next(t for t in data[300:] if not t.response_needed)
    assert main(["predict", "--bundle", str(workdir / "bundle.zip"),
                 "--subject", quiet.ticket.subject, "--text", quiet.ticket.body,
                 "--ticket-id", "77", "--user-name", "Asha",
                 "--templates", str(workdir / "tpl.jsonl")]) == 0
    got = kv(capsys.readouterr().out)
    assert got["action"] == "AutoReply"
    assert got["ml_response_type"] == "no_response"
    assert (got["ml_issue"], got["ml_sub_issue"]) == (quiet.issue, quiet.sub_issue)
    assert got["ml_classified_category"] in SMALL_SYNTH.user_types
    assert "Asha" in got["reply"] and "77" in got["reply"]


def test_predict_json_route(workdir, capsys):
    data = ev.load_corpus(workdir / "corpus.jsonl")
    loud = next(t for t in data[300:] if t.response_needed)
    assert main(["predict", "--bundle", str(workdir / "bundle.zip"), "--json",
                 "--text", f"{loud.ticket.subject} {loud.ticket.body}"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["action"] == {"kind": "RouteToAgent"} and d["response_needed"] is True


def test_evaluate_writes_report(workdir, tmp_path, capsys):
    assert main(["evaluate", "--corpus", str(workdir / "corpus.jsonl"),
                 "--bundle", str(workdir / "bundle.zip"), "--out", str(tmp_path),
                 "--no-figures"]) == 0
    out = capsys.readouterr().out
    assert out == (tmp_path / "report.txt").read_text()
    assert "sub_issue" in out
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert {r["task"] for r in rows if r["scope"] == "summary"} == set(ev.TASKS)


def test_run_batch_once(workdir, tmp_path, capsys):
    server = run_mock_server([t.ticket for t in ev.make_fixture(SMALL_SYNTH, 6, 2)])
    try:
        args = ["run-batch", "--once", "--bundle", str(workdir / "bundle.zip"),
                "--base-url", server.url, "--api-key", "test-key",
                "--templates", str(workdir / "tpl.jsonl"),
                "--log", str(tmp_path / "log.jsonl"), "--state", str(tmp_path / "hwm")]
        assert main(args) == 0
        first = capsys.readouterr().out
        assert "auto_replied=2" in first and "routed=4" in first and "errored=0" in first
        assert main(args) == 0
        assert "auto_replied=0" in capsys.readouterr().out
        assert len(server.requests_matching("POST", "/reply")) == 2
    finally:
        server.stop()
    assert runner.read_log(tmp_path / "log.jsonl")[-1]["event"] == "cycle"


def test_run_batch_needs_api_key(workdir, monkeypatch, capsys):
    monkeypatch.delenv("TRIAGE_API_KEY", raising=False)
    assert main(["run-batch", "--once", "--bundle", str(workdir / "bundle.zip"),
                 "--base-url", "http://127.0.0.1:9"]) == 1
    assert "api key" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train", "--corpus", "x.jsonl", "--out", "b.zip", "--bogus"],
    ["no-such-command"],
    [],
    ["run-batch", "--once", "--interval", "soon"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["predict", "--bundle", str(tmp_path / "missing.zip"), "--text", "hi"]) == 2
    assert "MissingComponent" in capsys.readouterr().err
    bad = tmp_path / "c.jsonl"
    bad.write_text("{oops\n")
    assert main(["train", "--corpus", str(bad), "--out", str(tmp_path / "b.zip")]) == 2


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_for_every_command(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "usage: triage " + cmd in capsys.readouterr().out


def test_installed_entry_point():
    r = subprocess.run([sys.executable, "-m", "ticket_triage.cli", "--help"],
                       capture_output=True, text=True, timeout=60)
    assert r.returncode == 0
    assert all(c in r.stdout for c in COMMANDS)


def test_mock_server_command_serves_fixture(tmp_path):
    fixture = tmp_path / "t.json"
    fixture.write_text(json.dumps([t.ticket.to_dict() for t in ev.make_fixture(SMALL_SYNTH, 3, 1)]))
    proc = subprocess.Popen([sys.executable, "-m", "ticket_triage.cli", "mock-server",
                             "--fixture", str(fixture), "--port", "0", "--duration", "20"],
                            stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert "with 3 tickets" in line
        import requests
        url = line.split(" on ")[1].split()[0]
        r = requests.get(url + "/api/v2/tickets", headers={"Authorization": "Bearer test-key"},
                         params={"updated_since": "2000-01-01T00:00:00Z"}, timeout=5)
        assert r.status_code == 200 and len(r.json()) == 3
    finally:
        proc.terminate()
        assert proc.wait(timeout=10) == 0
