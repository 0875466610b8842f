import json
import subprocess
import sys

import numpy as np
import pytest

from pijepa.cli import main
from pijepa.config import DEFAULTS, load_config, resolve_config
from pijepa.datagen import PoolSizes, make_dataset
from pijepa.errors import ConfigError
from pijepa.modelio import load_model, save_fno, save_jepa, save_surrogate
from pijepa.numerics import Grid2D


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


def test_resolve_config_fills_defaults():
    cfg = resolve_config({})
    assert cfg == DEFAULTS
    cfg2 = resolve_config({"train": {"batch_size": 4}})
    assert cfg2["train"]["batch_size"] == 4
    assert cfg2["train"]["lr_head"] == DEFAULTS["train"]["lr_head"]


def test_resolve_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config key 'trainn'"):
        resolve_config({"trainn": {}})
    with pytest.raises(ConfigError, match="train.batchsize"):
        resolve_config({"train": {"batchsize": 4}})


def test_resolve_config_rejects_wrong_types():
    with pytest.raises(ConfigError, match="expected"):
        resolve_config({"train": {"batch_size": "many"}})
    with pytest.raises(ConfigError, match="expected"):
        resolve_config({"masking": {"uniform": 3}})


def test_load_config_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(str(p))


# ---------------------------------------------------------------------------
# Model checkpoint round trips
# ---------------------------------------------------------------------------


def _toy_jepa():
    from pijepa.fields import NormStats
    from pijepa.models import EncoderConfig, PredictorConfig, build_jepa

    enc = EncoderConfig(
        height=16, width=16, in_channels=2, patch=2, d_model=16,
        fourier_layers=1, fourier_hidden=8, modes=4, attn_layers=1, heads=2,
    )
    stats = NormStats(("p_w", "log_K"), np.zeros(2), np.ones(2))
    return build_jepa(enc, PredictorConfig(depth=1, heads=2, count=1), ("p_w", "log_K"), stats, 0)


def test_jepa_checkpoint_round_trip(tmp_path):
    import torch

    model = _toy_jepa()
    path = tmp_path / "j.pjck"
    save_jepa(str(path), model, "darcy1", step=7)
    back, meta = load_model(str(path))
    assert meta["kind"] == "jepa" and meta["step"] == 7
    for (ka, va), (kb, vb) in zip(
        model.state_dict().items(), back.state_dict().items()
    ):
        assert ka == kb
        assert torch.equal(va, vb)


def test_surrogate_and_fno_round_trip(tmp_path):
    import torch

    from pijepa.fields import NormStats
    from pijepa.models import FnoConfig, build_fno_surrogate, build_surrogate

    jepa = _toy_jepa()
    surro = build_surrogate(jepa, ("p_w",), 1)
    p1 = tmp_path / "s.pjck"
    save_surrogate(str(p1), surro, "darcy1")
    back, meta = load_model(str(p1))
    assert meta["kind"] == "surrogate"
    x = torch.randn(1, 2, 16, 16)
    assert torch.equal(surro(x), back(x))

    stats = NormStats(("p_w", "log_K"), np.zeros(2), np.ones(2))
    fno = build_fno_surrogate(
        FnoConfig(in_channels=2, out_channels=1, width=8, modes=4, layers=1),
        ("p_w", "log_K"),
        ("p_w",),
        stats,
        2,
    )
    p2 = tmp_path / "f.pjck"
    save_fno(str(p2), fno, "darcy1")
    back2, meta2 = load_model(str(p2))
    assert meta2["kind"] == "fno"
    assert torch.equal(fno(x), back2(x))


# ---------------------------------------------------------------------------
# Dataset builder
# ---------------------------------------------------------------------------


def test_make_dataset_pools_and_label_stripping():
    split = make_dataset("darcy1", Grid2D(16, 16), PoolSizes(4, 3, 2), base_seed=9)
    assert (split.n_u, split.n_l, len(split.test)) == (4, 3, 2)
    for t in split.unlabeled:  # parameter fields only
        assert np.array_equal(t.snapshots[0].data, t.snapshots[1].data)
        assert t.snapshots[0].channel("p_w").max() == 0.0
    for t in split.labeled:  # labels intact
        assert np.abs(t.snapshots[-1].channel("p_w")).max() > 0


def test_make_dataset_twophase_unlabeled_drops_final_state():
    split = make_dataset(
        "twophase", Grid2D(16, 16, dt=1e-3), PoolSizes(2, 1, 1), base_seed=3, t_steps=2
    )
    lab = split.labeled[0]
    unl = split.unlabeled[0]
    assert unl.substeps == 2
    assert len(unl.snapshots) == 1 + 2 * 2 - 1  # intermediates kept, final dropped
    assert len(lab.snapshots) == 3


# ---------------------------------------------------------------------------
# CLI end to end
# ---------------------------------------------------------------------------


def test_cli_gen_data_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.pjf", tmp_path / "b.pjf"
    args = ["gen-data", "--system", "darcy1", "--n", "4", "--grid", "16", "--seed", "7"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_full_pipeline(tmp_path):
    data = tmp_path / "d.pjf"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(
        json.dumps(
            {
                "grid": {"h": 16, "w": 16},
                "model": {"preset": "desk", "patch": 2, "d_model": 16,
                          "fourier_layers": 1, "fourier_hidden": 8, "modes": 4,
                          "attn_layers": 1, "heads": 2,
                          "predictor_depth": 1, "predictor_heads": 2},
                "train": {"batch_size": 4, "pretrain_epochs": 2, "finetune_epochs": 2},
            }
        )
    )
    assert main(
        ["gen-data", "--system", "darcy1", "--n", "12", "--grid", "16", "--seed", "1",
         "--out", str(data)]
    ) == 0

    ckpt = tmp_path / "pre.pjck"
    assert main(
        ["pretrain", "--config", str(cfg_path), "--data", str(data), "--out", str(ckpt)]
    ) == 0
    assert ckpt.exists()
    assert (tmp_path / "pre_losses.csv").exists()
    assert (tmp_path / "manifest.json").exists()
    assert (tmp_path / "resolved_config.json").exists()

    ft = tmp_path / "ft.pjck"
    assert main(
        ["finetune", "--config", str(cfg_path), "--init", str(ckpt),
         "--n-labeled", "2", "--data", str(data), "--out", str(ft)]
    ) == 0

    scratch = tmp_path / "scratch.pjck"
    assert main(
        ["finetune", "--config", str(cfg_path), "--init", "scratch",
         "--n-labeled", "2", "--data", str(data), "--out", str(scratch)]
    ) == 0

    out_csv = tmp_path / "eval.csv"
    assert main(["evaluate", "--model", str(ft), "--data", str(data),
                 "--out-csv", str(out_csv)]) == 0
    assert out_csv.exists()

    roll = tmp_path / "roll.pjf"
    assert main(
        ["rollout", "--model", str(ft), "--data", str(data), "--steps", "3",
         "--out", str(roll), "--config", str(cfg_path)]
    ) == 0
    from pijepa.pjf import load_dataset

    rolled = load_dataset(str(roll))
    assert len(rolled.test) == 1
    assert len(rolled.test[0].snapshots) == 4


def test_cli_evaluate_prints_one_for_zero_model(tmp_path, capsys):
    data = tmp_path / "d.pjf"
    main(["gen-data", "--system", "darcy1", "--n", "6", "--grid", "16", "--seed", "2",
          "--out", str(data)])
    # a surrogate with zeroed head bias-free output predicts ~0 fields
    import torch

    from pijepa.models import build_surrogate

    jepa = _toy_jepa()
    surro = build_surrogate(jepa, ("p_w",), 0)
    with torch.no_grad():
        for p in surro.head.parameters():
            p.zero_()
    ck = tmp_path / "zero.pjck"
    save_surrogate(str(ck), surro, "darcy1")
    code = main(["evaluate", "--model", str(ck), "--data", str(data)])
    assert code == 0
    out = capsys.readouterr().out.strip().splitlines()[-1]
    assert out == "1.000"


def test_cli_exit_codes(tmp_path):
    # usage error
    assert main(["gen-data", "--system", "darcy1"]) == 1
    # config/schema error
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"no_such_section": {}}))
    data = tmp_path / "d.pjf"
    main(["gen-data", "--system", "darcy1", "--n", "4", "--grid", "16", "--seed", "3",
          "--out", str(data)])
    assert main(["pretrain", "--config", str(bad_cfg), "--data", str(data),
                 "--out", str(tmp_path / "x.pjck")]) == 2
    # data format error
    garbage = tmp_path / "garbage.pjf"
    garbage.write_bytes(b"not a dataset")
    assert main(["pretrain", "--data", str(garbage), "--out", str(tmp_path / "y.pjck")]) == 3


def test_cli_console_script_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "pijepa.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout


def test_cli_sweep_command(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            {
                "grid": {"h": 16, "w": 16},
                "data": {"n_unlabeled": 6, "n_labeled": 4, "n_test": 2},
                "model": {"preset": "desk", "patch": 2, "d_model": 16,
                          "fourier_layers": 1, "fourier_hidden": 8, "modes": 4,
                          "attn_layers": 1, "heads": 2,
                          "predictor_depth": 1, "predictor_heads": 2},
                "train": {"batch_size": 4, "pretrain_epochs": 1, "finetune_epochs": 1},
                "sweep": {"methods": ["fno"], "n_labeled": [2, 4], "seeds": [0]},
            }
        )
    )
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "sweep.csv").exists()
    assert (out / "sweep.svg").exists()
    assert (out / "manifest.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == {"sweep.csv", "sweep.svg"}
    for entry in manifest["artifacts"].values():
        assert entry["crc32"].startswith("0x") and entry["bytes"] > 0


def test_cli_ablate_command(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            {
                "grid": {"h": 16, "w": 16},
                "data": {"n_unlabeled": 6, "n_labeled": 4, "n_test": 2},
                "model": {"preset": "desk", "patch": 2, "d_model": 16,
                          "fourier_layers": 1, "fourier_hidden": 8, "modes": 4,
                          "attn_layers": 1, "heads": 2,
                          "predictor_depth": 1, "predictor_heads": 2},
                "train": {"batch_size": 4, "pretrain_epochs": 1, "finetune_epochs": 1},
                "sweep": {"seeds": [0], "ablate_n_labeled": 2},
                "loss": {"ramp_steps": 1},
            }
        )
    )
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "ablation.csv").exists()
    assert (out / "ablation_summary.csv").exists()
    summary = (out / "ablation_summary.csv").read_text()
    for variant in ("full", "no_physics", "no_split", "no_vicreg", "uniform_mask"):
        assert variant in summary


def test_cli_prop1_command(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps({"theory": {"n_list": [16], "n": 16, "d": 4, "trials": 3}})
    )
    out = tmp_path / "prop1"
    assert main(["prop1", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "sample_complexity.csv").exists()
    assert (out / "sample_complexity.svg").exists()


def test_cli_grad_check_command(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gradcheck": {"max_coords": 1}}))
    assert main(["grad-check", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "worst over 16 combinations" in out
