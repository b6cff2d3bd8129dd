import csv
import json

import numpy as np
import pytest

from moelab.harness import cli, experiments
from moelab.harness.config import ConfigError, ExperimentConfig, load_config, parse_text
from moelab.harness.experiments import PairingError, _check_pairing, fp8_curve_error, trace_converges
from moelab.harness.report import RunReport, ema, emit_report, format_table, load_report, table_csv

TINY = ["--steps", "3", "--d", "16", "--n-h", "2", "--seq-len", "8", "--vocab", "16", "--batch", "2",
        "--record-every", "1", "--quiet"]


def test_parse_text_and_overrides(tmp_path):
    text = """
    # a comment
    kind = ablate-balance
    steps = 20   # trailing comment
    n-layers = 3
    fp8 = true
    lr = 1e-3
    """
    vals = parse_text(text)
    assert vals == {"kind": "ablate-balance", "steps": 20, "n_layers": 3, "fp8": True, "lr": 1e-3}
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    cfg = load_config(str(p), {"steps": "40", "seed": 9})
    assert (cfg.kind, cfg.steps, cfg.seed, cfg.n_layers, cfg.fp8) == ("ablate-balance", 40, 9, 3, True)


@pytest.mark.parametrize("text", [
    "steps = ten",
    "stepz = 3",
    "steps 3",
    "kind = bogus",
    "d = 0",
    "d = 30\nn_h = 4",
    "top_k = 9",
    "balance = both",
    "smoothing = 1.0",
    "costs = F=1,Q=2",
    "costs = B=2",
    "fp8 = maybe",
    "kind = grpo-demo\nepsilon = 0.2",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig(**parse_text(text))


def test_missing_config_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/exp.cfg")


def test_costs_parse():
    assert ExperimentConfig(costs="F=1, B=2,W=0.5,FB=2.5").parse_costs() == {"F": 1, "B": 2, "W": 0.5, "FB": 2.5}


def test_ema():
    assert ema([4.0] * 10) == [4.0] * 10
    assert ema([0.0, 10.0]) == pytest.approx([0.0, 1.0], rel=1e-15)
    np.testing.assert_allclose(ema([1.0, 2.0, 3.0], 0.5), [1.0, 1.5, 2.25])


def test_table_csv_and_format():
    rows = [{"step": 0, "loss": 1.5, "max_relative_load": 2.0}, {"step": 10, "loss": 0.25, "extra": [1, 2]}]
    text = table_csv(rows)
    parsed = list(csv.reader(text.splitlines()))
    assert parsed[0] == ["step", "loss", "max_relative_load", "extra"]
    assert parsed[2] == ["10", "0.25", "", "1 2"]
    lines = format_table(rows).splitlines()
    assert len(lines) == 3 and "max_relative_load" in lines[0]
    assert format_table([]) == ""


def test_report_round_trip(tmp_path):
    rep = RunReport("train-moe", {"seed": 1}, {"val_loss": 1.25}, {"curves": [{"step": 0, "loss": 2.0}]},
                    {"ok": True}, {"chart": "abc"})
    paths = emit_report(rep, str(tmp_path), wall_time=1.5)
    assert [p.split("/")[-1] for p in paths] == ["train-moe.json", "train-moe.curves.csv", "train-moe.timing.json"]
    back = load_report(paths[0])
    assert back.to_dict() == rep.to_dict() and back.passed
    assert json.loads((tmp_path / "train-moe.timing.json").read_text()) == {"wall_time_s": 1.5}
    rep.checks["bad"] = False
    assert not rep.passed


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(RunReport("train-moe", {}), str(blocker / "sub"))
    assert cli.main(["pipeline-compare", "--out", str(blocker / "sub"), "--quiet"]) == 2


def test_curve_csv_header_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train-moe", "--out", str(a)] + TINY) == 0
    assert cli.main(["run", "train-moe", "--out", str(b)] + TINY) == 0
    header = (a / "train-moe.curves.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["run", "step"] and {"step", "loss", "max_relative_load"} <= set(header)
    for name in ("train-moe.json", "train-moe.curves.csv", "train-moe.loads.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = list(csv.DictReader((a / "train-moe.curves.csv").read_text().splitlines()))
    assert [int(r["step"]) for r in rows] == [0, 1, 2]


def test_paired_step0_and_fingerprint(tmp_path):
    assert cli.main(["ablate-mtp", "--out", str(tmp_path)] + TINY) in (0, 3)
    rep = load_report(str(tmp_path / "ablate-mtp.json"))
    assert rep.checks["paired_step0_loss_bitwise"] and rep.checks["logits_identical_without_stack"]
    assert len(rep.summary["fingerprint"]) == 64


def test_pairing_mismatch_detected():
    class R:
        def __init__(self, fp):
            self.fingerprint = fp
    assert _check_pairing({"a": R("x"), "b": R("x")}) == "x"
    with pytest.raises(PairingError):
        _check_pairing({"a": R("x"), "b": R("y")})


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert cli.main(["pipeline-compare", "--pp", "4", "--costs", "F=1,B=2,W=0.5", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert cli.main(["grpo-demo", "--out", str(tmp_path), "--quiet"]) == 2
    assert cli.main(["grpo-demo", "--epsilon", "0.2", "--beta", "0.04", "--out", str(tmp_path), "--quiet"]) == 0
    assert cli.main(["train-moe", "--steps", "x", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-kind"])
    assert exc.value.code == 2

    def failing(cfg, progress=None):
        return RunReport(cfg.kind, cfg.echo(), checks={"forced": False})

    monkeypatch.setattr(cli, "run_experiment", failing)
    assert cli.main(["comm-report", "--out", str(tmp_path), "--quiet"]) == 3

    def unpaired(cfg, progress=None):
        raise PairingError("differs")

    monkeypatch.setattr(cli, "run_experiment", unpaired)
    assert cli.main(["ablate-balance", "--out", str(tmp_path), "--quiet"]) == 3


def test_pipeline_compare_report(tmp_path):
    cfg = load_config(None, {"kind": "pipeline-compare", "pp": 4, "costs": "F=1,B=2,W=0.5"})
    rep = experiments.run_experiment(cfg)
    bubbles = {r["method"]: (r["simulated_bubble"], r["analytic_bubble"]) for r in rep.tables["bubbles"]}
    assert bubbles == {"1F1B": (9.0, 9.0), "ZB1P": (6.0, 6.0), "DualPipe": (3.5, 3.5)}
    assert rep.passed


def test_comm_report(tmp_path):
    rep = experiments.run_experiment(load_config(None, {"kind": "comm-report", "tokens": 300}))
    assert rep.summary["experts_per_node"] == pytest.approx(3.2)
    assert rep.summary["max_experts_per_token"] == 13
    assert rep.passed


def test_trace_converges():
    assert trace_converges(np.array([3.0, 2.0, 1.5, 1.04, 1.02, 1.05]))
    assert not trace_converges(np.array([3.0, 3.2, 1.0]))
    assert not trace_converges(np.array([3.0, 1.0, 1.2]))
    assert not trace_converges(np.array([3.0, 2.0]))


def test_fp8_curve_error_math():
    class Run:
        def __init__(self, losses):
            self.records = [{"step": i, "loss": v} for i, v in enumerate(losses)]

    full = Run([2.0] * 100)
    e = fp8_curve_error(full, Run([2.0] * 60 + [2.02] * 40), coefficient=0.0, after=50)
    assert e["max_raw"] == pytest.approx(0.01) and e["max_smooth"] == pytest.approx(0.01)
    assert e["mean_raw"] == pytest.approx(0.01 * 40 / 49)
    e = fp8_curve_error(full, full)
    assert e["max_raw"] == 0.0 and e["max_smooth"] == 0.0
