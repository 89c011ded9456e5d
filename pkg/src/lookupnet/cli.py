"""Command line: train, eval, reparam, cost, inspect-table."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .cost import CostProfile, count_ops, estimate, table_memory
from .layer import LookupConv2d
from .models import lookup_layers, parse_arch
from .reparam import ReparamNetwork, conversion_report, convert_network, equivalence_report

log = logging.getLogger("lookupnet")

# published operation totals for the reference architectures (32x32 inputs)
REFERENCE_OPS = {"resnet20": 78e6, "vggsmall": 1152e6}


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        keys = list(rows[0])
        for row in rows[1:]:
            keys += [k for k in row if k not in keys]
        writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def _write_csv(path: Path, rows: list[dict]) -> None:
    ckpt.atomic_write(path, _csv_text(rows).encode())


def _write_json(path: Path, obj) -> None:
    ckpt.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .gradcheck import network_check
    from .train import train

    cfg = _load_config(args)
    out = Path(args.out)
    data = cfg.load_data()
    net = cfg.build(data)
    if args.f64_check:
        errors = network_check(net, data.x_train[:4], data.y_train[:4])
        worst = max(errors.values()) if errors else 0.0
        _write_json(out / "gradcheck.json", errors)
        if worst > 1e-4:
            raise FloatingPointError(f"64-bit gradient check failed: max relative error {worst:.3g}")
    result = train(net, data, cfg.train_config())
    shape = list(data.x_train.shape[1:])
    ckpt.save_checkpoint(out / "checkpoint.lkn", net, result.step, shape, {"config": cfg.to_dict()})
    _write_csv(out / "metrics.csv", result.metrics)
    _write_csv(out / "scales.csv", result.scale_history)
    cfg.dump(out / "config.yaml")
    final = result.metrics[-1] if result.metrics else {}
    _emit({"checkpoint": str(out / "checkpoint.lkn"), "epochs": len(result.metrics),
           "test_acc": final.get("test_acc"), "steps": result.step})
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    cfg = _load_config(args)
    data = cfg.load_data()
    model, header = ckpt.load_any(args.checkpoint)
    if isinstance(model, ReparamNetwork):
        preds = np.concatenate([model.predict(data.x_test[i:i + 256]) for i in range(0, len(data.y_test), 256)])
        acc = float((preds == data.y_test).mean()) if len(preds) else float("nan")
        result = {"kind": "converted", "test_acc": acc}
    else:
        loss, acc = evaluate(model, data.x_test, data.y_test)
        result = {"kind": "training", "test_loss": loss, "test_acc": acc}
    _emit(result)
    return 0


def cmd_reparam(args) -> int:
    model, header = ckpt.load_any(args.checkpoint)
    if isinstance(model, ReparamNetwork):
        convert_network(model)  # raises: already converted
    shape = header.get("input_shape")
    if not shape:
        raise ValueError("checkpoint does not record an input shape")
    rng = np.random.default_rng(args.seed or 0)
    x = rng.normal(size=(args.inputs, *shape)).astype(np.float32)
    from .reparam import training_eval_forward
    training_eval_forward(model, x[:1])  # resolves the head input size
    rnet = convert_network(model)
    check = equivalence_report(model, rnet, x)
    report = conversion_report(rnet, shape)
    report["equivalence"] = check
    out = Path(args.out)
    ckpt.save_converted(out / "converted.lkn", rnet)
    _write_json(out / "conversion_report.json", report)
    _write_csv(out / "conversion_layers.csv", report["layers"])
    _emit({"converted": str(out / "converted.lkn"), "converted_muls": report["converted_muls"],
           "max_abs_diff": check["max_abs_diff"], "index_mismatches": check["index_mismatches"],
           "shared_table_bytes": report["shared_table_bytes"], "fused_table_bytes": report["fused_table_bytes"]})
    return 0


def _profile_for(args) -> tuple[CostProfile, str, str]:
    """(profile, network kind, label) from a model file, an architecture name, or an explicit op total."""
    if args.ops is not None:
        return CostProfile.from_ops(args.ops), args.kind or "lookup", "custom"
    if args.model:
        model, header = ckpt.load_any(args.model)
        spec = header["network"]
        kind = args.kind or ("baseline" if spec.get("layer_kind") == "conv" else "lookup")
        if isinstance(model, ReparamNetwork):
            from .reparam import OpCounter
            counter = OpCounter()
            model.forward(np.zeros((1, *_input_shape(model)), dtype=np.float32), counter)
            profile = CostProfile([n for n in counter.per_layer if n not in ("stem", "boundary", "head")], [], [])
            profile.macs = [counter.per_layer[n]["lookup"] for n in profile.layers]
            profile.included = [True] * len(profile.layers)
            return profile, kind, spec.get("arch", "model")
        shape = header.get("input_shape") or [spec.get("in_channels", 3), 32, 32]
        return count_ops(model, shape), kind, spec.get("arch", "model")
    if args.arch:
        base, layer_kind = parse_arch(args.arch.replace("-baseline", "-conv"))
        kind = args.kind or ("baseline" if layer_kind == "conv" else "lookup")
        if not args.counted and base in REFERENCE_OPS:
            return CostProfile.from_ops(REFERENCE_OPS[base], base), kind, base
        from .models import build_network
        net = build_network(arch=f"{base}-{layer_kind}", input_shape=(3, 32, 32))
        return count_ops(net, (3, 32, 32)), kind, base
    raise ValueError("cost needs a model file, --arch or --ops")


def _input_shape(rnet: ReparamNetwork):
    shape = rnet.spec.get("input_shape")
    if shape:
        return shape
    c = rnet.spec.get("in_channels", 3)
    return (c,) if rnet.family == "mlp" else (c, 32, 32)


def cmd_cost(args) -> int:
    profile, kind, label = _profile_for(args)
    processor = args.processor
    summary = estimate(profile, kind, processor)
    row = {"model": label, "kind": kind, "processor": processor, "ops": summary["ops"],
           "energy_mj": round(summary["energy_mj"], 1), "latency_cycles": summary["latency_cycles"]}
    if args.out:
        out = Path(args.out)
        layers = []
        for name, macs, inc in zip(profile.layers, profile.macs, profile.included):
            est = estimate(macs if inc else 0, kind, processor)
            layers.append({"layer": name, "macs": macs, "included": inc, "energy_mj": est["energy_mj"],
                           "latency_cycles": est["latency_cycles"]})
        _write_csv(out / "cost_layers.csv", layers)
        _write_csv(out / "cost_summary.csv", [row])
    _emit(row)
    return 0


def cmd_inspect_table(args) -> int:
    model, header = ckpt.load_any(args.checkpoint)
    if isinstance(model, ReparamNetwork):
        raise ValueError("inspect-table needs a training checkpoint")
    layers = dict(lookup_layers(model))
    if not layers:
        raise ValueError("network has no lookup layers")
    name = args.layer or next(iter(layers))
    if name not in layers:
        raise KeyError(f"{name!r} is not a lookup layer; choose from {sorted(layers)}")
    layer: LookupConv2d = layers[name]
    tf = layer.table.feature_entries().astype(np.float64)
    tw = layer.table.weight_entries().astype(np.float64)
    hist = np.bincount(layer.weight_indices().ravel(), minlength=layer.n_w)
    out = Path(args.out)
    n = max(len(tf), len(tw))
    _write_csv(out / "subtables.csv", [{"index": i, "T_f": repr(float(tf[i])) if i < len(tf) else "",
                                        "T_w": repr(float(tw[i])) if i < len(tw) else ""} for i in range(n)])
    table = np.outer(tf, tw)
    _write_csv(out / "table.csv", [{"i": i, **{f"j{j}": repr(float(table[i, j])) for j in range(len(tw))}}
                                   for i in range(len(tf))])
    _write_csv(out / "weight_histogram.csv", [{"index": j, "count": int(c)} for j, c in enumerate(hist)])
    peak = int(np.argmax(hist))
    if not centred_mode(hist, layer.table.center):
        log.warning("weight-index histogram of %s is not unimodal around the centre (peak %d)", name, peak)
    _emit({"layer": name, "n_f": layer.n_f, "n_w": layer.n_w, "weights": int(hist.sum()), "peak_index": peak,
           "table_bytes": table_memory(1, layer.n_f, layer.n_w)["per_layer_bytes"]})
    return 0


def centred_mode(hist: np.ndarray, center: int, tolerance: int = 2) -> bool:
    """Whether the mode of the 3-bin smoothed histogram lies within ``tolerance`` bins of ``center``."""
    smooth = np.convolve(np.asarray(hist, dtype=np.float64), np.ones(3) / 3, mode="same")
    return abs(int(np.argmax(smooth)) - center) <= tolerance


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lookupnet", description="Lookup-table networks: train, convert, cost.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="." if not out_required else None, required=out_required)
        p.add_argument("--f64-check", action="store_true", help="64-bit finite-difference gradient check first")

    p = sub.add_parser("train", help="train a network from a config")
    common(p, out_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint or converted model")
    p.add_argument("checkpoint")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reparam", help="convert a trained checkpoint to the inference form")
    p.add_argument("checkpoint")
    p.add_argument("--inputs", type=int, default=100, help="random inputs for the equivalence check")
    common(p, out_required=True)
    p.set_defaults(func=cmd_reparam)

    p = sub.add_parser("cost", help="energy / latency estimate")
    p.add_argument("model", nargs="?", help="training checkpoint or converted model")
    p.add_argument("--arch", help="architecture name, e.g. resnet20-lookup or resnet20-baseline")
    p.add_argument("--ops", type=float, help="explicit operation total (2 x MACs)")
    p.add_argument("--kind", choices=["baseline", "lookup", "lookup-4bit", "adder", "bnn", "shift"])
    p.add_argument("--processor", choices=["a7", "a15"], default="a7")
    p.add_argument("--counted", action="store_true", help="use counted MACs instead of the published total")
    common(p)
    p.set_defaults(func=cmd_cost, out=None)

    p = sub.add_parser("inspect-table", help="dump a layer's sub-tables, table and weight-index histogram")
    p.add_argument("checkpoint")
    p.add_argument("--layer")
    common(p)
    p.set_defaults(func=cmd_inspect_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line report for any failure
        message = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
