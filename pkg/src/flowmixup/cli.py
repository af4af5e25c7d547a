"""Command-line entry point: generate, corrupt, train, eval, diagnose, compare.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import RunConfig
from .errors import ConfigError, FlowMixupError, NumericError, ParseError
from .metrics import (metrics_report, performance_ratio, r2_ratio, r_squared, spearman,
                      variance_of_indicator, kmeans)
from .network import NetworkPlan, build
from .seeding import stream
from .svg import line_chart
from .tensor import load_checkpoint, save_checkpoint
from .training import EpochRecord, PLATEAU_THRESHOLD, train

logger = logging.getLogger("flowmixup")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


# ------------------------------------------------------------------ helpers

def _sub_seed(seed, name):
    return int(stream(seed, name).integers(2 ** 31))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out_dir(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    return out


def load_data(cfg):
    if cfg.data.path:
        path = Path(cfg.data.path)
        if path.suffix == ".csv":
            g = cfg.data.generator_config()
            return D.load_csv(path, num_classes=g.num_classes)
        return D.load_dataset(path)
    g = cfg.data.generator_config()
    return D.generate_synthetic(
        g.num_samples, g.num_classes, g.correlation_matrix, _sub_seed(cfg.seed, "data"),
        length=g.length, channels=g.channels, marginals=g.marginals,
        noise=g.noise, crosstalk=g.crosstalk, signal=g.signal, require_positive=g.require_positive,
    )


def split_info(cfg, dataset):
    """Split ratios/seed: the one recorded by ``corrupt`` wins so the corrupted
    rows are exactly the training rows."""
    recorded = dataset.metadata.get("split")
    if recorded:
        return recorded["ratios"], recorded["seed"]
    return list(cfg.data.split), _sub_seed(cfg.seed, "split")


def prepare_splits(cfg, dataset):
    ratios, seed = split_info(cfg, dataset)
    tr_idx, va_idx, te_idx = D.split_indices(len(dataset), ratios, seed)
    spec = cfg.corruption_spec()
    train_ds = dataset.subset(np.sort(tr_idx))
    if spec.rate > 0 and not dataset.corrupted:
        train_ds = D.corrupt_labels(train_ds, spec, stream(cfg.seed, "corruption"))
    return train_ds, dataset.subset(np.sort(va_idx)), dataset.subset(np.sort(te_idx))


def summarize_dataset(ds):
    return {
        "samples": len(ds),
        "classes": ds.num_classes,
        "class_names": list(ds.class_names),
        "feature_shape": list(ds.feature_shape),
        "marginals": ds.marginals(),
        "independent_ratio": ds.independent_ratio(),
        "label_checksum": ds.label_checksum(),
    }


def save_model(weights, plan, class_names, path):
    save_checkpoint(weights, path)
    _write_json(str(path) + ".json", {"plan": plan.to_dict(), "class_names": list(class_names)})


def load_model(path):
    path = Path(path)
    side = Path(str(path) + ".json")
    if not side.exists():
        raise FileNotFoundError(f"checkpoint sidecar {side} not found")
    meta = json.loads(side.read_text())
    plan = NetworkPlan.from_dict(meta["plan"])
    net = build(plan, np.random.default_rng(0))
    net.set_weights(load_checkpoint(path))
    return net, meta.get("class_names")


def _subset(cfg, dataset, which):
    if which == "all":
        return dataset
    tr, va, te = prepare_splits(cfg, dataset)
    return {"train": tr, "valid": va, "test": te}[which]


# ------------------------------------------------------------------ commands

def cmd_generate(cfg):
    out = _out_dir(cfg)
    ds = load_data(cfg)
    path = out / "dataset.flxd"
    D.save_dataset(ds, path)
    summary = summarize_dataset(ds)
    _write_json(out / "summary.json", summary)
    _print_summary(summary)
    return path


def cmd_corrupt(cfg):
    if not cfg.data.path:
        raise ConfigError("corrupt needs data.path")
    out = _out_dir(cfg)
    ds = D.load_dataset(cfg.data.path)
    ratios, seed = split_info(cfg, ds)
    tr_idx, va_idx, te_idx = D.split_indices(len(ds), ratios, seed)
    tr_idx = np.sort(tr_idx)
    spec = cfg.corruption_spec()
    corrupted = D.corrupt_labels(ds.subset(tr_idx), spec, stream(cfg.seed, "corruption"))
    labels = ds.labels.copy()
    labels[tr_idx] = corrupted.labels
    mask = np.zeros(len(ds), bool)
    mask[tr_idx] = corrupted.corruption_mask
    meta = dict(corrupted.metadata)
    meta["split"] = {"ratios": list(ratios), "seed": int(seed)}
    result = D.Dataset(ds.features, labels, list(ds.class_names), meta, True, mask)
    path = out / "dataset.flxd"
    D.save_dataset(result, path)
    summary = summarize_dataset(result)
    summary["corruption"] = meta["corruption"]
    summary["touched_fraction_train"] = float(corrupted.corruption_mask.mean()) if len(tr_idx) else 0.0
    summary["untouched_checksums"] = {
        "valid": ds.subset(np.sort(va_idx)).label_checksum(),
        "test": ds.subset(np.sort(te_idx)).label_checksum(),
    }
    _write_json(out / "summary.json", summary)
    _print_summary(summary)
    print(f"touched fraction of training rows: {summary['touched_fraction_train']:.4f}")
    return path


def cmd_train(cfg):
    out = _out_dir(cfg)
    ds = load_data(cfg)
    tr, va, te = prepare_splits(cfg, ds)
    plan = cfg.network_plan(ds.feature_shape, ds.num_classes)
    net = build(plan, stream(cfg.seed, "init"))
    tcfg = cfg.train

    result = train(net, (tr.features, tr.labels), (va.features, va.labels), (te.features, te.labels), tcfg)

    _write_csv(out / "epochs.csv", EpochRecord.CSV_FIELDS, [r.csv_row() for r in result.records])
    _write_csv(out / "timing.csv", ("epoch", "wall_time"), [(r.epoch, r.wall_time) for r in result.records])
    paths = result.flow_paths[0] if result.flow_paths else [1]
    _write_csv(out / "flow_log.csv", ("mix_points", "op_flags", "flow_sizes"), [(
        " ".join(str(s) for s in plan.mix_points),
        " ".join(str(int(v)) for v in plan.op_flags().values()),
        " ".join(str(v) for v in paths),
    )])
    save_model(result.best_weights, plan, ds.class_names, out / "best.flxw")
    save_model(result.last_weights, plan, ds.class_names, out / "last.flxw")

    reports = {}
    for tag, weights in (("best", result.best_weights), ("last", result.last_weights)):
        net.set_weights(weights)
        reports[tag] = metrics_report(net.forward_eval(te.features), te.labels, ds.class_names, tcfg.threshold)
    _write_json(out / "metrics.json", reports["best"].to_dict())
    _write_json(out / "metrics_last.json", reports["last"].to_dict())
    _write_csv(out / "per_class.csv", ("class", "auc", "f1", "tp", "fp", "fn"), reports["best"].rows())

    best, last = result.best_record(), result.last_record()
    series = [r.test_indicator for r in result.records]
    summary = {
        "mode": plan.mode,
        "mix_points": list(plan.mix_points),
        "op_flags": {str(k): v for k, v in plan.op_flags().items()},
        "flow_sizes": paths,
        "indicator": tcfg.indicator,
        "epochs": len(result.records),
        "best_epoch": result.best_epoch,
        "best_test_indicator": best.test_indicator if best else None,
        "last_test_indicator": last.test_indicator if last else None,
        "best_minus_last": (best.test_indicator - last.test_indicator) if best else None,
        "var_indicator": variance_of_indicator(series) if series else None,
        "independent_ratio": tr.independent_ratio(),
        "corruption": {
            "rate": cfg.corruption_spec().rate, "scheme": cfg.corruption_spec().scheme,
            "already_corrupted_input": bool(ds.corrupted),
            "touched_fraction": float(tr.corruption_mask.mean()) if tr.corruption_mask is not None and len(tr) else 0.0,
        },
        "checksums": {"valid": va.label_checksum(), "test": te.label_checksum()},
        "defaults": {"plateau_threshold": PLATEAU_THRESHOLD, "plateau_patience": tcfg.plateau_patience,
                     "class_weights": tcfg.class_weights, "best_selected_on": "validation"},
    }
    _write_json(out / "summary.json", summary)
    print(f"trained {plan.mode} for {len(result.records)} epochs; flow sizes {' -> '.join(map(str, paths))}")
    if best:
        print(f"best epoch {result.best_epoch}: test {tcfg.indicator} {best.test_indicator:.4f}; "
              f"last {last.test_indicator:.4f}")
    return out


def cmd_eval(cfg):
    if not cfg.eval.checkpoint:
        raise ConfigError("eval needs eval.checkpoint")
    out = _out_dir(cfg)
    net, names = load_model(cfg.eval.checkpoint)
    ds = _subset(cfg, load_data(cfg), cfg.eval.subset)
    _check_compatible(net, ds)
    report = metrics_report(net.forward_eval(ds.features), ds.labels, names or ds.class_names, cfg.eval.threshold)
    _write_json(out / "metrics.json", report.to_dict())
    _write_csv(out / "per_class.csv", ("class", "auc", "f1", "tp", "fp", "fn"), report.rows())
    print(f"mean AUC {report.mean_auc:.4f}  Macro-F1 {report.macro_f1:.4f}")
    return report


def cmd_diagnose(cfg):
    dg = cfg.diagnose
    if not dg.checkpoints:
        raise ConfigError("diagnose needs diagnose.checkpoints (one or two paths)")
    if len(dg.checkpoints) > 2:
        raise ConfigError("diagnose compares at most two checkpoints")
    names = dg.names or (["without", "with"][:len(dg.checkpoints)] if len(dg.checkpoints) == 2 else ["model"])
    out = _out_dir(cfg)
    ds = _subset(cfg, load_data(cfg), dg.subset)
    x = ds.features[:dg.max_samples]
    all_stats = {}
    state_names = None
    for name, ckpt in zip(names, dg.checkpoints):
        net, _ = load_model(ckpt)
        _check_compatible(net, ds)
        states = net.hidden_states(x)
        state_names = [s for s, _ in states]
        k = min(dg.k, len(x))
        assignments = [kmeans(z, k, seed=_sub_seed(cfg.seed, "kmeans")) for _, z in states]
        all_stats[name] = r_squared([z for _, z in states], assignments, names=state_names)
    payload = {name: [s.to_dict() for s in stats] for name, stats in all_stats.items()}
    series = {name: [s.r2 for s in stats] for name, stats in all_stats.items()}
    if len(all_stats) == 2:
        a, b = (all_stats[n] for n in names)
        ratio = r2_ratio(a, b)
        payload["r2_ratio"] = ratio
        _write_csv(out / "r2.csv", ("state",) + tuple(f"r2_{n}" for n in names) + ("r2_ratio",),
                   [(s, x1.r2, x2.r2, r) for s, x1, x2, r in zip(state_names, a, b, ratio)])
        (out / "r2_ratio.svg").write_text(line_chart({"R2 ratio": ratio}, state_names, "R^2 ratio per state"))
    else:
        only = next(iter(all_stats.values()))
        _write_csv(out / "r2.csv", ("state", "r2"), [(s.state, s.r2) for s in only])
    (out / "r2.svg").write_text(line_chart(series, state_names, "R^2 per state"))
    _write_json(out / "cluster_stats.json", payload)
    for name, stats in all_stats.items():
        print(name + ": " + "  ".join(f"{s.state}={s.r2:.4f}" for s in stats))
    return payload


def cmd_compare(cfg):
    cc = cfg.compare
    if not (cc.run_a and cc.run_b):
        raise ConfigError("compare needs compare.run_a and compare.run_b")
    out = _out_dir(cfg)
    ma = json.loads((Path(cc.run_a) / "metrics.json").read_text())
    mb = json.loads((Path(cc.run_b) / "metrics.json").read_text())
    if len(ma[cc.metric]) != len(mb[cc.metric]):
        raise ConfigError(f"class-count mismatch: {len(ma[cc.metric])} vs {len(mb[cc.metric])}")
    a = np.array([np.nan if v is None else v for v in ma[cc.metric]], float)
    b = np.array([np.nan if v is None else v for v in mb[cc.metric]], float)
    ratio = performance_ratio(a, b, cc.exponent)
    summary_a = json.loads((Path(cc.run_a) / "summary.json").read_text())
    indep = np.array([np.nan if v is None else v for v in summary_a["independent_ratio"]], float)
    if len(indep) != len(ratio):
        raise ConfigError("independent ratio and performance vectors have different class counts")
    rho = spearman(ratio, indep)
    names = ma["class_names"]
    _write_csv(out / "ratios.csv", ("class", "performance_ratio", "independent_ratio"), zip(names, ratio, indep))
    _write_json(out / "compare.json", {
        "metric": cc.metric, "exponent": cc.exponent, "performance_ratio": ratio,
        "independent_ratio": indep, "spearman": rho, "spearman_defined": bool(np.isfinite(rho)),
    })
    (out / "ratios.svg").write_text(line_chart(
        {"Performance Ratio": ratio.tolist(), "Independent Ratio": indep.tolist()}, names, "per-class ratios"))
    print("Spearman: undefined (constant curve)" if not np.isfinite(rho) else f"Spearman: {rho:.4f}")
    return rho


def _check_compatible(net, ds):
    if tuple(ds.feature_shape) != net.plan.input_shape or ds.num_classes != net.plan.num_classes:
        raise ConfigError(
            f"checkpoint expects features {net.plan.input_shape} / {net.plan.num_classes} classes, "
            f"dataset has {tuple(ds.feature_shape)} / {ds.num_classes}"
        )


def _print_summary(summary):
    print(f"samples: {summary['samples']}  classes: {summary['classes']}")
    for name, m, ir in zip(summary["class_names"], summary["marginals"], summary["independent_ratio"]):
        print(f"  {name}: marginal {m:.3f}  independent ratio {ir:.3f}")


COMMANDS = {
    "generate": cmd_generate, "corrupt": cmd_corrupt, "train": cmd_train,
    "eval": cmd_eval, "diagnose": cmd_diagnose, "compare": cmd_compare,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="flowmixup", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int, help="override the top-level seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.out is not None:
            raw["out"] = args.out
        cfg = RunConfig.from_dict(raw)
        COMMANDS[args.command](cfg)
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FlowMixupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
