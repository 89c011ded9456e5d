import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from lookupnet import checkpoint as ckpt
from lookupnet.cli import centred_mode, main
from lookupnet.config import ABLATIONS, ConfigError, RunConfig, ablation_config
from lookupnet.data import write_cifar10_file
from lookupnet.reparam import convert_network

from oracles import prepare_network

TOY = dict(arch="toy-cnn-lookup", data_source="synthetic-images", train_size=64, test_size=32, epochs=1,
           batch_size=32, n_f=9, n_w=9, lr=0.05)


def write_config(path, **overrides):
    path.write_text(yaml.safe_dump({**TOY, **overrides}))
    return str(path)


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- file format -------------------------------------------------------------

def test_encode_decode_round_trip(rng):
    arrays = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b": np.arange(5, dtype=np.uint8)}
    raw = ckpt.encode({"kind": "x"}, arrays)
    assert raw[0] == ckpt.FORMAT_VERSION
    header, back = ckpt.decode(raw)
    assert header["kind"] == "x"
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype
    assert ckpt.encode(header, back) == raw


def test_decode_rejects_truncated_payload():
    raw = ckpt.encode({"kind": "x"}, {"a": np.ones(10, dtype=np.float32)})
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(raw[:-4])


def test_training_checkpoint_byte_identical(tmp_path):
    net = prepare_network("toy-resnet-lookup", seed=1)
    path = tmp_path / "a.lkn"
    ckpt.save_checkpoint(path, net, step=7, input_shape=(3, 8, 8))
    loaded, header = ckpt.load_checkpoint(path)
    assert header["step"] == 7
    ckpt.save_checkpoint(tmp_path / "b.lkn", loaded, step=7, input_shape=(3, 8, 8))
    assert (tmp_path / "a.lkn").read_bytes() == (tmp_path / "b.lkn").read_bytes()


def test_converted_file_matches_in_memory_network(tmp_path):
    net = prepare_network("toy-resnet-lookup", seed=2)
    rnet = convert_network(net)
    ckpt.save_converted(tmp_path / "c.lkn", rnet)
    loaded = ckpt.load_converted(tmp_path / "c.lkn")
    x = np.random.default_rng(0).normal(size=(20, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(loaded.forward(x), rnet.forward(x))
    header, arrays = ckpt.read_file(tmp_path / "c.lkn")
    assert arrays["blocks.0.conv1.idx_w"].dtype == np.uint8
    assert arrays["blocks.0.conv1.tables"].dtype == np.float32
    ckpt.save_converted(tmp_path / "d.lkn", loaded)
    assert (tmp_path / "c.lkn").read_bytes() == (tmp_path / "d.lkn").read_bytes()


# -- configuration -----------------------------------------------------------

def test_unknown_config_key_named():
    with pytest.raises(ConfigError, match="'learning_rate'"):
        RunConfig.from_dict({"learning_rate": 0.1})


def test_every_ablation_row_is_a_config():
    assert set(ABLATIONS) == {"ours", "model1", "model2", "model3", "model4", "model5", "model6", "model7"}
    for name in ABLATIONS:
        cfg = ablation_config(name, data_source="synthetic-images")
        net = cfg.build(type("D", (), {"x_train": np.zeros((1, 3, 32, 32))})())
        assert net is not None
    assert ablation_config("model6").exponential_scales is False
    assert ablation_config("model4").n_f == 17


# -- command line -----------------------------------------------------------

def test_train_writes_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    code, out, _ = run_cli(capsys, "train", "--config", cfg, "--out", tmp_path / "run", "--f64-check")
    assert code == 0
    summary = json.loads(out)
    assert summary["epochs"] == 1
    run = tmp_path / "run"
    for name in ("checkpoint.lkn", "metrics.csv", "scales.csv", "config.yaml", "gradcheck.json"):
        assert (run / name).exists(), name
    assert len((run / "metrics.csv").read_text().strip().splitlines()) == 2
    assert max(json.loads((run / "gradcheck.json").read_text()).values()) <= 1e-4


def test_train_is_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    run_cli(capsys, "train", "--config", cfg, "--out", tmp_path / "a")
    run_cli(capsys, "train", "--config", cfg, "--out", tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/checkpoint.lkn").read_bytes() == (tmp_path / "b/checkpoint.lkn").read_bytes()


def test_model6_toggles_make_scale_sign_observable(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", **{**ABLATIONS["model6"], "n_f": 9, "n_w": 9})
    assert run_cli(capsys, "train", "--config", cfg, "--out", tmp_path / "m6")[0] == 0
    header = (tmp_path / "m6/scales.csv").read_text().splitlines()[0]
    assert "units.0.layer.s_w" in header


def test_reparam_eval_cost_inspect(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    run_cli(capsys, "train", "--config", cfg, "--out", tmp_path / "run")
    model = tmp_path / "run/checkpoint.lkn"

    code, out, _ = run_cli(capsys, "reparam", model, "--out", tmp_path / "conv")
    assert code == 0
    result = json.loads(out)
    assert result["converted_muls"] == 0 and result["max_abs_diff"] <= 1e-4
    report = json.loads((tmp_path / "conv/conversion_report.json").read_text())
    assert report["equivalence"]["index_mismatches"] == 0

    converted = tmp_path / "conv/converted.lkn"
    code, out, _ = run_cli(capsys, "eval", converted, "--config", cfg)
    conv_acc = json.loads(out)["test_acc"]
    code, out, _ = run_cli(capsys, "eval", model, "--config", cfg)
    assert json.loads(out)["test_acc"] == pytest.approx(conv_acc, abs=1 / 32 + 1e-9)

    code, _, err = run_cli(capsys, "reparam", converted, "--out", tmp_path / "again")
    assert code == 1 and "already converted" in err

    code, out, _ = run_cli(capsys, "cost", converted, "--out", tmp_path / "cost")
    assert code == 0 and (tmp_path / "cost/cost_layers.csv").exists()
    code, out, _ = run_cli(capsys, "cost", model)
    assert json.loads(out)["kind"] == "lookup"

    code, out, _ = run_cli(capsys, "inspect-table", model, "--out", tmp_path / "tab")
    info = json.loads(out)
    hist = (tmp_path / "tab/weight_histogram.csv").read_text().strip().splitlines()[1:]
    assert sum(int(line.split(",")[1]) for line in hist) == info["weights"] == 8 * 8 * 9
    assert len((tmp_path / "tab/table.csv").read_text().strip().splitlines()) == 10


def test_cost_reference_rows(capsys):
    code, out, _ = run_cli(capsys, "cost", "--arch", "resnet20-lookup", "--processor", "a7")
    row = json.loads(out)
    assert code == 0 and row["energy_mj"] == 13.6 and row["latency_cycles"] == 195e6
    _, out, _ = run_cli(capsys, "cost", "--arch", "resnet20-baseline", "--processor", "a15")
    row = json.loads(out)
    assert row["energy_mj"] == 124.2 and row["latency_cycles"] == 390e6
    _, out, _ = run_cli(capsys, "cost", "--ops", "0")
    assert json.loads(out)["energy_mj"] == 0


def test_inspect_uniform_table_is_a_ramp(tmp_path, capsys):
    net = prepare_network("toy-cnn-lookup", n_f=5, n_w=5)
    for _, layer in net.named_modules():
        if hasattr(layer, "table") and hasattr(layer.table, "feature_logits"):
            for p in (layer.table.feature_logits, layer.table.weight_logits_neg, layer.table.weight_logits_pos):
                p.data[:] = 0
    ckpt.save_checkpoint(tmp_path / "u.lkn", net, input_shape=(3, 8, 8))
    run_cli(capsys, "inspect-table", tmp_path / "u.lkn", "--layer", "units.0.layer", "--out", tmp_path)
    rows = (tmp_path / "subtables.csv").read_text().strip().splitlines()[1:]
    tf = [float(r.split(",")[1]) for r in rows]
    tw = [float(r.split(",")[2]) for r in rows]
    assert tf == [0, 0.25, 0.5, 0.75, 1.0] and tw == [-1, -0.5, 0, 0.5, 1]


def test_centred_mode_heuristic():
    assert centred_mode(np.array([1, 3, 9, 3, 1]), 2)
    assert not centred_mode(np.array([9, 3, 1, 0, 0, 0, 0, 0, 0]), 4)


def test_errors_are_single_json_lines(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("arch: toy-cnn-lookup\nlearning_rate: 0.1\n")
    proc = subprocess.run([sys.executable, "-m", "lookupnet.cli", "train", "--config", str(bad), "--out",
                           str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode != 0
    lines = proc.stderr.strip().splitlines()
    assert len(lines) == 1
    err = json.loads(lines[0])
    assert err["error"] == "ConfigError" and "learning_rate" in err["message"]


def test_cifar_format_pipeline_end_to_end(tmp_path, capsys, rng):
    # stand-in CIFAR-10 directory in the real binary layout
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar10_file(root / name, rng.integers(0, 256, size=(16, 3, 32, 32), dtype=np.uint8),
                           rng.integers(0, 10, 16))
    cfg = write_config(tmp_path / "c.yaml", data_source="cifar10-binary", data_path=str(tmp_path),
                       train_size=48, test_size=16)
    code, out, _ = run_cli(capsys, "train", "--config", cfg, "--out", tmp_path / "run")
    assert code == 0
    assert 0.0 <= json.loads(out)["test_acc"] <= 1.0
    code, out, _ = run_cli(capsys, "reparam", tmp_path / "run/checkpoint.lkn", "--out", tmp_path / "conv")
    assert code == 0 and json.loads(out)["converted_muls"] == 0
