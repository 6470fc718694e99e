import pytest

from ticket_triage import evaluation as ev


SMALL_SYNTH = ev.SynthConfig(seed=7, n_tickets=400, n_issues=3, sub_issues_per_issue=2,
                             noise_rate=0.0)


@pytest.fixture(scope="session")
def small_corpus():
    return ev.generate_corpus(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_taxonomy():
    return ev.synth_taxonomy(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_training_config():
    from dataclasses import replace
    cfg = ev.benchmark_training_config(seed=7)
    return replace(cfg, gate=replace(cfg.gate, n_rounds=10),
                   hierarchy=replace(cfg.hierarchy, n_rounds=10),
                   user_type=replace(cfg.user_type, epochs=5, dim=16))


@pytest.fixture(scope="session")
def small_bundle(small_corpus, small_taxonomy, small_training_config):
    return ev.train_on(small_corpus, small_taxonomy, small_training_config)
