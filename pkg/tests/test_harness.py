import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guardlab import samplers
from guardlab.errors import ConfigError
from guardlab.harness import experiments
from guardlab.harness.cli import EXIT_AUDIT, EXIT_BUDGET, EXIT_CONFIG, EXIT_OK, main
from guardlab.harness.config import (
    ExperimentConfig,
    SamplerSpec,
    TrainerSpec,
    dumps_config,
    load_config,
    loads_config,
    validate_config,
)
from guardlab.harness.scenarios import get_scenario, keyword_desk, sentiment_desk
from guardlab.seq_core import pack

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = """\
[experiment]
name = tiny
seed = 3
seeds = 1

[model]
scenario = keyword-desk

[trainer]
methods = dpg
budget = 400
cap_budget = 100

[sampler]
n_samples = 5
beta_multiples = 1.0, 64.0
imh_sweep = 1, 8
"""


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(experiments.OUTPUT_ROOT_ENV, str(tmp_path / "out"))
    return tmp_path / "out"


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


# Scenarios -------------------------------------------------------------------


def test_keyword_desk_partition_is_in_the_hard_regime(keyword_desk_fm):
    assert 0.005 <= keyword_desk_fm.Z <= 0.02
    assert keyword_desk_fm.Z == pytest.approx(0.005120367966460292, rel=1e-12)
    assert len(keyword_desk_fm.vocab) == 7 and keyword_desk_fm.max_len == 8


def test_sentiment_desk_is_prefix_conditioned():
    s = sentiment_desk()
    table = s.base.enumerate_support()
    prompt = s.vocab.ids(("the", "plot", "was", "awful"))
    assert all(y[:4] == prompt for y in table.sequences())
    assert 0 < table.probs[s.predicate.table_mask(table)].sum() < 0.5


def test_unknown_scenario():
    with pytest.raises(KeyError):
        get_scenario("nope")


# Config files ----------------------------------------------------------------


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.ini")), ids=lambda p: p.name)
def test_shipped_configs_roundtrip(path):
    cfg = load_config(path)
    validate_config(cfg)
    text = dumps_config(cfg)
    assert loads_config(text) == cfg
    assert dumps_config(loads_config(text)) == text


words = st.text(alphabet="abcdefgh", min_size=1, max_size=6)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(1e-6, 10, allow_nan=False), st.lists(words, max_size=4),
       st.lists(st.floats(1e-3, 1e6), min_size=1, max_size=5), st.booleans())
def test_config_roundtrip_is_bit_exact(seed, alpha, keyword, betas, wall):
    from guardlab.harness.config import ConstraintSpec, ExperimentSpec, MetricSpec

    cfg = ExperimentConfig(
        experiment=ExperimentSpec(seed=seed),
        trainer=TrainerSpec(alpha=alpha),
        constraint=ConstraintSpec(kind="contains", keyword=tuple(keyword)),
        sampler=SamplerSpec(beta_multiples=tuple(betas)),
        metrics=MetricSpec(wall_clock=wall),
    )
    assert loads_config(dumps_config(cfg)) == cfg


@pytest.mark.parametrize("text, line, fragment", [
    ("[experiment]\nname = x\n[bogus]\n", 3, "unknown section"),
    ("[trainer]\nbudget = 10\nbogus = 1\n", 3, "unknown key"),
    ("[trainer]\n\n# c\nbudget = ten\n", 4, "budget"),
    ("[trainer]\nbudget = 1\nbudget = 2\n", 3, "duplicate key"),
    ("budget = 1\n", 1, "outside any section"),
    ("[trainer\n", 1, "malformed"),
    ("[metrics]\nwall_clock = maybe\n", 2, "boolean"),
    ("[sampler]\nimh_sweep = 1,,2\n", 2, "empty list item"),
])
def test_parse_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        loads_config(text)
    assert info.value.line == line
    assert fragment in str(info.value)
    assert str(info.value).startswith(f"line {line}:")


@pytest.mark.parametrize("text, line", [
    ("[experiment]\nseeds = 0\n", 2),
    ("[trainer]\nbudget = 10\ncap_budget = 11\n", 3),
    ("[trainer]\n\nalpha = -1\n", 3),
    ("[trainer]\nmethods = sft, ppo\n", 2),
    ("[sampler]\nmethod = gibbs\n", 2),
    ("[constraint]\nkind = contains\n", 2),
    ("[model]\nscenario = custom\n", 1),  # missing key: the section header line
])
def test_validation_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        validate_config(loads_config(text))
    assert info.value.line == line


def test_missing_keyword_token_is_a_config_error():
    cfg = loads_config("[model]\nscenario = keyword-desk\n[constraint]\nkind = contains\nkeyword = fantastic\n")
    with pytest.raises(ConfigError) as info:
        experiments.setup(cfg)
    assert info.value.line == 5 and "fantastic" in str(info.value)


def test_custom_scenario_from_corpus(tmp_path):
    (tmp_path / "corpus.tsv").write_text("3\tx y\n1\ty\n2\tx x y\n")
    cfg = loads_config("[model]\nscenario = custom\nvocab = x, y\nmax_len = 4\ncorpus = corpus.tsv\n"
                       "[constraint]\nkind = avoids\nkeyword = y\n")
    s = experiments.setup(cfg, tmp_path)
    assert s.keyword == s.vocab.id("y")
    bad = loads_config("[model]\nscenario = custom\nvocab = x\ncorpus = corpus.tsv\n"
                       "[constraint]\nkind = avoids\nkeyword = x\n")
    with pytest.raises(ConfigError) as info:
        experiments.setup(bad, tmp_path)
    assert info.value.line == 4


# CLI -------------------------------------------------------------------------


def test_cli_validate_ok(tmp_path, capsys, out_root):
    assert main(["validate-config", str(write(tmp_path, TINY))]) == EXIT_OK
    out = capsys.readouterr().out
    assert "# ok: scenario keyword-desk" in out
    assert "[trainer]" in out


def test_cli_config_error_exit_code(tmp_path, capsys, out_root):
    path = write(tmp_path, TINY + "[bogus]\n")
    assert main(["enumerate", str(path)]) == EXIT_CONFIG
    assert f"line {TINY.count(chr(10)) + 1}: unknown section" in capsys.readouterr().err
    assert main(["enumerate", str(tmp_path / "missing.ini")]) == EXIT_CONFIG


def test_cli_budget_exit_code(tmp_path, capsys, out_root):
    path = write(tmp_path, TINY.replace("n_samples = 5", "n_samples = 5\nproposal = base\nmax_draws = 20"))
    assert main(["sample", str(path)]) == EXIT_BUDGET
    err = capsys.readouterr().err
    assert json.loads(err.splitlines()[0])["draws"] == 20


def test_cli_audit_exit_code(tmp_path, monkeypatch, out_root):
    def broken(proposal, b, n, rng, max_draws=None, seed=None):
        seqs, lengths, _ = proposal.sample_batch(n, rng)
        return seqs, lengths, samplers.SamplerReport(n, n, seed)

    monkeypatch.setattr(samplers, "guard_sample_batch", broken)
    path = write(tmp_path, TINY.replace("n_samples = 5", "n_samples = 200\nproposal = base"))
    assert main(["sample", str(path)]) == EXIT_AUDIT


def test_cli_runs_every_command(tmp_path, capsys, out_root):
    path = write(tmp_path, TINY)
    for cmd in experiments.COMMANDS:
        assert main([cmd, str(path)]) == EXIT_OK, cmd
    listed = capsys.readouterr().out.split()
    assert listed and all(Path(p).exists() for p in listed)
    assert (out_root / "tiny" / "tradeoff" / "config.ini").read_text() == dumps_config(loads_config(TINY))


# Experiment artifacts --------------------------------------------------------


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_zero_budget_curve_is_initial_point(tmp_path, out_root, keyword_desk_fm):
    cfg = loads_config(TINY.replace("budget = 400\ncap_budget = 100", "budget = 0\ncap_budget = 0")
                       .replace("methods = dpg", "methods = sft, dpg, warm_dpg"))
    csv_path, _ = experiments.run_learning_curve(cfg)
    rows = read_csv(csv_path)
    assert [r["method"] for r in rows] == ["sft", "dpg", "warm_dpg"]
    assert all(r["samples"] == "0" for r in rows)
    assert all(float(r["kl_exact"]) == pytest.approx(-keyword_desk_fm.log_z, abs=1e-12) for r in rows)
    assert list(rows[0]) == list(experiments.CURVE_HEADER)


def test_learning_curve_replay_is_byte_identical(tmp_path, monkeypatch):
    cfg = loads_config(TINY)
    blobs = []
    for run in ("a", "b"):
        monkeypatch.setenv(experiments.OUTPUT_ROOT_ENV, str(tmp_path / run))
        blobs.append([p.read_bytes() for p in experiments.run_learning_curve(cfg)])
    assert blobs[0] == blobs[1]


def test_methods_share_paired_seed_streams(keyword_desk_fm):
    cfg = loads_config(TINY.replace("cap_budget = 100", "cap_budget = 0").replace("methods = dpg",
                                                                                  "methods = dpg, warm_dpg"))
    s = experiments.setup(cfg)
    _, cold = experiments.train_method(s, "dpg", 0)
    _, warm = experiments.train_method(s, "warm_dpg", 0)
    assert cold.to_csv() == warm.to_csv()


def test_tradeoff_points_obey_theorem2(tmp_path, out_root):
    cfg = loads_config(TINY)
    s = experiments.setup(cfg)
    pts = experiments.tradeoff_points(s)
    by = {p["method"]: p for p in pts}
    assert (by["g~"]["x"], by["g~"]["y"]) == (0.0, 0.0)
    assert by["base"]["x"] == pytest.approx(-s.fm.log_z, abs=1e-12)
    assert by["base"]["y"] == 0.0
    for p in pts:
        assert p["x"] >= 0 and p["y"] >= 0
        if p["kl"] is not None:
            assert abs(p["x"] + p["y"] - p["kl"]) <= 1e-9
    rows = read_csv(experiments.run_tradeoff(cfg, s=s)[0])
    assert list(rows[0]) == list(experiments.TRADEOFF_HEADER)


def test_qrs_pareto_dominates_imh(keyword_desk, keyword_desk_fm):
    """At every IMH cost QRS can match, QRS has lower projected KL."""
    from guardlab.gold_model import FilteredModel
    from guardlab.metrics import position_projection, projected_kl

    cfg = loads_config("[model]\nscenario = keyword-desk\n")
    s = experiments.setup(cfg)
    cap = s.cap()
    ar_guard = FilteredModel(cap, s.predicate).Z
    proj = position_projection(s.keyword, 10)
    rows = [r for r in experiments.qrs_imh_sweep(s, cap) if r["sampler"] == "imh"]
    compared = 0
    for r in rows:
        n = int(r["param"])
        if 1 / n > ar_guard:
            continue  # cheaper than rejection sampling; QRS cannot spend less
        beta = samplers.qrs_beta_for_rate(cap, s.fm, 1 / n)
        table, ar = samplers.qrs_exact_dist(cap, s.fm, beta)
        assert ar >= 1 / n * (1 - 1e-9)
        assert projected_kl(s.fm.gold, table, proj, 10) < r["projected"]
        compared += 1
    assert compared >= 8


def test_heuristic_report(tmp_path, out_root):
    cfg = loads_config(TINY)
    report = json.loads(experiments.run_heuristic_comparison(cfg)[0].read_text())
    assert report["control"]["kl_g_avoidance"] <= 1e-12
    assert report["heuristics"]["enforce_at_end"] > report["guard"]["cap"]
    assert "dpg" in report["guard"]


def test_heuristics_need_a_keyword(tmp_path, out_root):
    cfg = loads_config("[model]\nscenario = sentiment-desk\n")
    with pytest.raises(ConfigError):
        experiments.run_heuristic_comparison(cfg)


def test_sample_artifacts(tmp_path, out_root):
    cfg = loads_config(TINY.replace("n_samples = 5", "n_samples = 30\nproposal = cap\nmethod = imh\nimh_steps = 4"))
    txt, rep = experiments.run_sample(cfg)
    lines = txt.read_text().splitlines()
    assert len(lines) == 30 and all("amazing" in line for line in lines)
    report = json.loads(rep.read_text())
    assert report["violations"] == 0 and set(report["self_bleu"]) == {"2", "3", "4", "5"}


def test_model_file_proposal(tmp_path, out_root):
    cfg = loads_config(TINY)
    paths = experiments.run_train(cfg)
    model_path = [p for p in paths if p.suffix == ".model"][0]
    text = TINY.replace("n_samples = 5", f"n_samples = 5\nproposal = {model_path}")
    s = experiments.setup(loads_config(text))
    model = experiments.resolve_proposal(s, str(model_path))
    seqs, lengths, _ = model.sample_batch(10, np.random.default_rng(0))
    assert np.all(np.isfinite(model.batch_logprob(seqs, lengths)))
    with pytest.raises(ConfigError):
        experiments.resolve_proposal(s, str(tmp_path / "missing.model"))


def test_imh_draw_samples_satisfy_constraint(keyword_desk):
    cfg = loads_config(TINY.replace("n_samples = 5", "method = imh"))
    s = experiments.setup(cfg)
    seqs, lengths, rep = experiments.draw_samples(s, "imh", s.cap(), 20, np.random.default_rng(0))
    assert samplers.audit(s.predicate, seqs, lengths) == 0
    assert rep["chains"] == 20
