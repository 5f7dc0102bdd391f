import json
import hashlib
from pathlib import Path

import numpy as np
import pytest

from margulislab.errors import ConfigError
from margulislab.labcli import (EXIT_BUDGET, EXIT_CONFIG, EXIT_NO_CONVERGENCE,
                                EXIT_OK, ExperimentConfig, dumps_toml, main)

GOLDEN = Path(__file__).resolve().parents[1] / "configs" / "golden"

FAST_DICHOTOMY = """
[map]
family = "timechange"
epsilon = 0.0
shape = "cos"

[run]
seed = 11

[margulis]
n_max = 20

[dichotomy]
exponent_samples = 400
hist_samples = 20000
coverage_n = 16
box_rungs = [[1, 16, 16, 8], [2, 16, 16, 8], [4, 16, 16, 8]]
"""


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _digests(out_dir):
    out = {}
    for p in sorted(Path(out_dir).rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            out[str(p.relative_to(out_dir))] = hashlib.sha256(
                p.read_bytes()).hexdigest()
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_golden_configs_parse():
    for path in GOLDEN.glob("*.toml"):
        cfg = ExperimentConfig.from_toml(path)
        assert cfg.map.family in ("timechange", "shear")


def test_config_roundtrip_lossless():
    cfg = ExperimentConfig.from_toml(GOLDEN / "timechange_e005.toml")
    text = dumps_toml(cfg.to_dict())
    back = ExperimentConfig.from_dict(
        __import__("tomli").loads(text))
    assert back.to_dict() == cfg.to_dict()
    assert back.config_hash() == cfg.config_hash()


def test_config_rejects_unknown_keys(tmp_path):
    bad = _write(tmp_path, '[map]\nfamily = "timechange"\nbogus = 1\n')
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml(bad)
    bad2 = _write(tmp_path, '[nosuch]\nx = 1\n', "b2.toml")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml(bad2)


def test_malformed_roof_exits_2_and_names_key(tmp_path, capsys):
    bad = _write(tmp_path, '[map]\nfamily = "timechange"\nepsilon = 1.5\n')
    code = main(["splitting", "--config", bad, "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "tau" in err and "epsilon" in err


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def test_splitting_run_and_determinism(tmp_path):
    cfg = str(GOLDEN / "shear_e005.toml")
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert main(["splitting", "--config", cfg, "--out", str(out1)]) == EXIT_OK
    assert main(["splitting", "--config", cfg, "--out", str(out2)]) == EXIT_OK
    d1, d2 = _digests(out1), _digests(out2)
    assert d1 == d2 and len(d1) >= 2
    man = json.loads((out1 / "manifest.json").read_text())
    assert {f["name"] for f in man["files"]} == set(d1)
    for entry in man["files"]:
        assert entry["sha256"] == d1[entry["name"]]
    rows = (out1 / "exponents.csv").read_text().strip().splitlines()
    assert rows[0].startswith("family,epsilon,exponent_kind")
    assert len(rows) == 4


def test_seed_changes_outputs_workers_do_not(tmp_path):
    cfg = str(GOLDEN / "shear_e005.toml")
    outs = [tmp_path / n for n in ("s1", "s2", "w2")]
    main(["splitting", "--config", cfg, "--out", str(outs[0]), "--seed", "1"])
    main(["splitting", "--config", cfg, "--out", str(outs[1]), "--seed", "2"])
    main(["splitting", "--config", cfg, "--out", str(outs[2]), "--seed", "1",
          "--workers", "2"])
    assert _digests(outs[0]) != _digests(outs[1])
    assert _digests(outs[0])["exponents.csv"] == _digests(outs[2])["exponents.csv"]


def test_env_override_seed(tmp_path, monkeypatch):
    cfg = str(GOLDEN / "shear_e005.toml")
    monkeypatch.setenv("MARGULISLAB_SEED", "99")
    main(["splitting", "--config", cfg, "--out", str(tmp_path / "env")])
    man = json.loads((tmp_path / "env" / "manifest.json").read_text())
    assert man["seed"] == 99


def test_holonomy_run(tmp_path):
    out = tmp_path / "hol"
    assert main(["holonomy", "--config", str(GOLDEN / "holonomy.toml"),
                 "--out", str(out)]) == EXIT_OK
    data = json.loads((out / "holonomy.json").read_text())
    assert data["alpha"] > 0
    assert data["r_squared"] >= 0.9
    assert data["exact_leaf_sup_deviation"] <= 1e-8
    assert (out / "holonomy_ladder.csv").exists()
    assert (out / "jacobian_field.csv").exists()


def test_dichotomy_run_eps0(tmp_path):
    cfgp = _write(tmp_path, FAST_DICHOTOMY)
    out = tmp_path / "dich"
    assert main(["dichotomy", "--config", cfgp, "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "dichotomy.json").read_text())
    assert report["verdict"] == "NonhyperbolicCase"
    assert abs(report["lambda_plus"]) <= 0.01
    assert report["config_hash"]
    assert report["seed"] == 11


def test_margulis_checkpoint_resume(tmp_path):
    cfgp = _write(tmp_path, """
[map]
family = "timechange"
epsilon = 0.0
shape = "cos"

[margulis]
n_max = 16
""")
    out = tmp_path / "m1"
    ck = tmp_path / "ckpt"
    assert main(["margulis", "--config", cfgp, "--out", str(out),
                 "--checkpoint", str(ck)]) == EXIT_OK
    assert (ck / "functional.json").exists()
    data = json.loads((out / "margulis.json").read_text())
    assert data["dilation_u"] == pytest.approx(2.618033988749895, rel=0.01)
    assert data["dilation_product_check"] == pytest.approx(1.0, abs=0.03)
    # resume at a deeper horizon from the checkpoint
    cfgp2 = _write(tmp_path, """
[map]
family = "timechange"
epsilon = 0.0
shape = "cos"

[margulis]
n_max = 24
""", "cfg2.toml")
    out2 = tmp_path / "m2"
    assert main(["margulis", "--config", cfgp2, "--out", str(out2),
                 "--checkpoint", str(ck)]) == EXIT_OK
    rows = (out2 / "dilation_series.csv").read_text().strip().splitlines()
    assert len(rows) == 25  # header + 24 ratios
    assert (out2 / "system_cu" / "system.json").exists()


def test_budget_exit_code(tmp_path):
    cfgp = _write(tmp_path, """
[map]
family = "timechange"
epsilon = 0.05
shape = "cos"

[margulis]
n_max = 24
budget = 400
""")
    code = main(["margulis", "--config", cfgp, "--out", str(tmp_path / "o")])
    assert code == EXIT_BUDGET


def test_no_convergence_exit_code(tmp_path, capsys):
    cfgp = _write(tmp_path, """
[map]
family = "timechange"
epsilon = 0.05
shape = "cos"

[margulis]
n_max = 10
tol = 1e-9
""")
    code = main(["margulis", "--config", cfgp, "--out", str(tmp_path / "o")])
    assert code == EXIT_NO_CONVERGENCE
    assert "margulis_iterate" in capsys.readouterr().err


def test_primary_runs_without_plotkit():
    # the laboratory never imports the plotting component
    import margulislab
    import margulislab.labcli, margulislab.mme  # noqa: F401
    src = Path(margulislab.__file__).parent
    for py in src.glob("*.py"):
        assert "plotkit" not in py.read_text()
