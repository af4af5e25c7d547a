"""Acceptance suite: one PASS/FAIL line per criterion.

Tolerances are pinned here and not tuned after the fact. Criterion 8 trains
3 seeds x 2 modes and takes several minutes on one CPU.
"""
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from flowmixup import tensor as T
from flowmixup.cli import main
from flowmixup.data import (CorruptionSpec, corrupt_labels, generate_synthetic, load_dataset, split,
                            split_indices)
from flowmixup.metrics import auc, cluster_stats, macro_f1, variance_of_indicator
from flowmixup.mixing import MixingModule, MixSpec, mixup_reference, sample_p
from flowmixup.network import BlockSpec, NetworkPlan, build
from flowmixup.seeding import stream
from flowmixup.training import TrainConfig, train, weighted_bce

GRAD_TOL = 1e-4
GRAD_BUDGET_S = 30.0
ALGEBRA_CASES = 1000
DEGRADED_CASES = 100
AUC_CASES, AUC_MAX_N = 500, 200
R2_TOL = VAR_TOL = 1e-12
SSI_CASES = 200
SSI_SLACK = 1e-12  # relative round-off allowance on SSI comparisons
BETA_DRAWS, BETA_MEAN_TOL, BETA_VAR_REL = 100_000, 0.01, 0.10
CORRUPT_N, CORRUPT_RATE, CORRUPT_TOL = 5000, 0.4, 0.02
TREND = dict(seeds=(0, 1, 2), num_samples=1500, length=64, widths=(16, 32, 32, 64, 64), lr=3e-3,
             epochs=30, rate=0.4, alpha=3.0, budget_s=15 * 60)


def report(number, ok, detail):
    line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    Path(__file__).with_name("acceptance_results.txt").open("a").write(line + "\n")
    print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module", autouse=True)
def _fresh_results():
    Path(__file__).with_name("acceptance_results.txt").write_text("")
    yield


def _toy_net(points, op, dense):
    rng = np.random.default_rng(11)
    if dense:
        blocks = [BlockSpec("dense", 5), BlockSpec("dense", 4), BlockSpec("dense", 4)]
        x = rng.normal(size=(5, 6))
        shape = (6,)
    else:
        blocks = [BlockSpec("conv1d", 3, 3, 2), BlockSpec("conv1d", 4), BlockSpec("conv1d", 4)]
        x = rng.normal(size=(5, 2, 10))
        shape = (2, 10)
    plan = NetworkPlan(shape, 3, blocks, mode="flow_mixup", mix_points=points, op_forward=op)
    net = build(plan, rng)
    y = (rng.random((5, 3)) < 0.5).astype(float)
    specs = {s: MixSpec(1.0, o, float(rng.uniform(0.2, 0.8)), rng.permutation(5)) for s, o in plan.op_flags().items()}
    weights = (np.array([1.5, 2.0, 3.0]), np.array([0.8, 1.1, 1.4]))

    def loss():
        out = net.forward_train(x, y, None, specs=specs)
        return weighted_bce(out.probabilities, out.labels, weights)

    return net, specs, loss


def test_criterion_01_gradient_check():
    start = time.perf_counter()
    worst = 0.0
    cases = 0
    for points, op, dense in itertools.product(([1], [1, 2]), (True, False), (False, True)):
        net, specs, loss = _toy_net(points, op, dense)
        worst = max(worst, T.finite_diff_check(loss, net.parameters, scales=net.gradient_scales(specs)).max_rel_error)
        cases += 1
    elapsed = time.perf_counter() - start
    report(1, worst < GRAD_TOL and elapsed < GRAD_BUDGET_S,
           f"{cases} toy nets (1 and 2 modules, Op true/false): max rel err {worst:.2e} < {GRAD_TOL:g}; "
           f"{elapsed:.1f}s < {GRAD_BUDGET_S:g}s")


def _adjoint_oracle(grad_out, p, perm, op):
    """Backward by explicit per-row accumulation, independent of the module code."""
    F = grad_out.shape[1] // 2 if op else grad_out.shape[1]
    g_orig, g_mix = (grad_out[:, :F], grad_out[:, F:]) if op else (None, grad_out)
    routed = np.zeros_like(g_mix)
    for i in range(len(perm)):
        routed[i] += p * g_mix[i]
    for i, j in enumerate(perm):
        routed[j] += (1.0 - p) * g_mix[i]
    return (g_orig + routed) / 2.0 if op else routed


def test_criterion_02_flow_algebra():
    rng = np.random.default_rng(2)
    failures = []
    for case in range(ALGEBRA_CASES):
        B, F, V = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        op = bool(rng.integers(2))
        spec = MixSpec(1.0, op, float(rng.random()), rng.permutation(B))
        z = rng.normal(size=(B, F, V))
        y = rng.random((B, F, 2))
        m = MixingModule(op_forward=op)
        out, labels = m.forward_arrays(z, y, spec)
        m(T.parameter(z, "z"), y, spec)
        g = rng.normal(size=out.shape)
        ok = out.shape[1] == (2 * F if op else F) and labels.shape[1] == out.shape[1]
        if op:
            ok &= out[:, :F].tobytes() == z.tobytes() and labels[:, :F].tobytes() == y.tobytes()
        ok &= m.backward_arrays(g).tobytes() == _adjoint_oracle(g, spec.p, spec.permutation, op).tobytes()
        if not ok:
            failures.append(case)
    # network-level flow law on random plans
    for case in range(100):
        n_blocks = int(rng.integers(1, 5))
        pts = sorted(rng.choice(n_blocks + 1, size=int(rng.integers(1, n_blocks + 2)), replace=False).tolist())
        plan = NetworkPlan((3,), 2, [BlockSpec("dense", 3)] * n_blocks, mode="flow_mixup", mix_points=pts,
                           op_forward=bool(rng.integers(2)))
        net = build(plan, rng)
        trace = net.forward_train(rng.normal(size=(4, 3)), np.zeros((4, 2)), rng).trace
        expected, F = [], 1
        for s in range(n_blocks + 1):
            F *= 2 if plan.op_flags().get(s, False) else 1
            expected.append(F)
        if trace.flow_sizes != expected:
            failures.append(("net", case))
    report(2, not failures, f"{ALGEBRA_CASES} module cases + 100 network plans: flow law, slot-0 bit identity, "
                            f"backward = (g' + M^T g_m)/2 bit-exact; {len(failures)} mismatches")


def test_criterion_03_degraded_equivalence():
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(DEGRADED_CASES):
        B, F = int(rng.integers(1, 8)), int(rng.integers(1, 3))
        spec = MixSpec(1.0, False, float(rng.random()), rng.permutation(B))
        z, y = rng.normal(size=(B, F, 4)), rng.random((B, F, 3))
        out, labels = MixingModule(op_forward=False).forward_arrays(z, y, spec)
        ref_z, ref_y = mixup_reference(z, y, spec.p, spec.permutation)
        bad += out.tobytes() != ref_z.tobytes() or labels.tobytes() != ref_y.tobytes()
    # whole network: Mixup at the input equals ERM on the directly mixed batch
    mixup = build(NetworkPlan.ecg_like((2, 12), 3, widths=(3, 3, 4, 4, 4), mode="mixup"), stream(0, "init"))
    erm = build(NetworkPlan.ecg_like((2, 12), 3, widths=(3, 3, 4, 4, 4), mode="erm"), stream(0, "init"))
    for _ in range(DEGRADED_CASES):
        x, y = rng.normal(size=(5, 2, 12)), (rng.random((5, 3)) < 0.5).astype(float)
        spec = MixSpec(3.0, False, float(rng.random()), rng.permutation(5))
        out = mixup.forward_train(x, y, None, specs={0: spec})
        xm, ym = mixup_reference(x, y, spec.p, spec.permutation)
        ref = erm.forward_train(xm, ym, None)
        bad += out.probabilities.data.tobytes() != ref.probabilities.data.tobytes()
        bad += out.labels.tobytes() != ref.labels.tobytes()
    report(3, bad == 0, f"{DEGRADED_CASES} module + {DEGRADED_CASES} network cases, Op=false vs direct mix: "
                        f"{bad} non-bit-exact")


def _brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_criterion_04_metric_oracles():
    rng = np.random.default_rng(4)
    auc_bad = 0
    for _ in range(AUC_CASES):
        n = int(rng.integers(2, AUC_MAX_N + 1))
        y = rng.integers(0, 2, n)
        y[rng.permutation(n)[:2]] = [0, 1]
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        auc_bad += auc(s, y) != _brute_auc(s, y)
    f1_bad = 0
    for n in range(1, 6):
        for pred in itertools.product([0, 1], repeat=n):
            for truth in itertools.product([0, 1], repeat=n):
                tp = sum(a and b for a, b in zip(pred, truth))
                fp = sum(a and not b for a, b in zip(pred, truth))
                fn = sum(b and not a for a, b in zip(pred, truth))
                want = 0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
                f1_bad += macro_f1(np.array(pred, float)[:, None], np.array(truth)[:, None])[0][0] != want
    pts = [0.0, 1.0, 10.0, 11.0]
    mean = sum(pts) / 4
    sst = sum((v - mean) ** 2 for v in pts)
    ssi = (0 - 0.5) ** 2 + (1 - 0.5) ** 2 + (10 - 10.5) ** 2 + (11 - 10.5) ** 2
    stats = cluster_stats(np.array(pts)[:, None], np.array([0, 0, 1, 1]))
    r2_err = max(abs(stats.sst - sst), abs(stats.ssi - ssi), abs(stats.r2 - (1 - ssi / sst)))
    var_err = 0.0
    for _ in range(200):
        s = rng.random(int(rng.integers(2, 40)))
        z = (s - s.min()) / (s.max() - s.min())
        var_err = max(var_err, abs(variance_of_indicator(s) - sum((v - z.mean()) ** 2 for v in z) / len(z)))
    ok = auc_bad == 0 and f1_bad == 0 and r2_err <= R2_TOL and var_err <= VAR_TOL
    report(4, ok, f"AUC {AUC_CASES} cases exact ({auc_bad} off); F1 exhaustive n<=5 ({f1_bad} off); "
                  f"R2 {{0,1,10,11}} = {stats.r2:.6f} (SST {stats.sst:g}, SSI {stats.ssi:g}) err {r2_err:.1e}; "
                  f"Var(I) err {var_err:.1e}")


def test_criterion_05_ssi_invariants():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(SSI_CASES):
        X = rng.normal(size=(int(rng.integers(3, 60)), int(rng.integers(1, 8)))) * rng.uniform(0.1, 10)
        coarse = rng.integers(0, int(rng.integers(1, 5)), len(X))
        fine = coarse * 3 + rng.integers(0, 3, len(X))
        a, b = cluster_stats(X, coarse), cluster_stats(X, fine)
        bad += not (0 <= a.ssi <= a.sst * (1 + SSI_SLACK))
        bad += not (b.ssi <= a.ssi * (1 + SSI_SLACK))
    report(5, bad == 0, f"{SSI_CASES} feature sets: 0 <= SSI <= SST and refinement never raises SSI; {bad} violations")


def test_criterion_06_beta_sampler():
    details, ok = [], True
    for alpha in (1.0, 3.0):
        rng = np.random.default_rng(6)
        d = np.array([sample_p(alpha, rng) for _ in range(BETA_DRAWS)])
        want = 1.0 / (4 * (2 * alpha + 1))
        good = abs(d.mean() - 0.5) <= BETA_MEAN_TOL and abs(d.var() - want) <= BETA_VAR_REL * want
        ok &= good
        details.append(f"alpha={alpha:g}: mean {d.mean():.4f}, var {d.var():.5f} vs {want:.5f}")
    report(6, ok, "; ".join(details))


def test_criterion_07_corruption(tmp_path):
    ds = generate_synthetic(CORRUPT_N, 12, seed=7, length=4)
    zero = corrupt_labels(ds, CorruptionSpec(0.0, seed=1))
    identity = zero.labels.tobytes() == ds.labels.tobytes() and not zero.corruption_mask.any()
    touched = corrupt_labels(ds, CorruptionSpec(CORRUPT_RATE, seed=1)).corruption_mask.mean()
    # end to end through the CLI: only training rows change
    cfg = {"seed": 3, "out": str(tmp_path / "g"), "data": {"generator": {"num_samples": 1000, "length": 4}}}
    (tmp_path / "g.json").write_text(json.dumps(cfg))
    main(["generate", "--config", str(tmp_path / "g.json")])
    src = load_dataset(tmp_path / "g" / "dataset.flxd")
    cfg = {"seed": 3, "out": str(tmp_path / "c"), "data": {"path": str(tmp_path / "g" / "dataset.flxd")},
           "corruption": {"rate": CORRUPT_RATE}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    main(["corrupt", "--config", str(tmp_path / "c.json")])
    out = load_dataset(tmp_path / "c" / "dataset.flxd")
    r, seed = out.metadata["split"]["ratios"], out.metadata["split"]["seed"]
    _, va, te = split_indices(len(src), r, seed)
    same = all(src.subset(np.sort(i)).label_checksum() == out.subset(np.sort(i)).label_checksum() for i in (va, te))
    ok = identity and abs(touched - CORRUPT_RATE) <= CORRUPT_TOL and same
    report(7, ok, f"r=0 identity {identity}; touched {touched:.4f} = {CORRUPT_RATE} +/- {CORRUPT_TOL} at n={CORRUPT_N}; "
                  f"valid/test checksums unchanged {same}")


def test_criterion_08_trend():
    cfg = TREND
    start = time.perf_counter()
    res = {"erm": [], "flow_mixup": []}
    for seed in cfg["seeds"]:
        ds = generate_synthetic(cfg["num_samples"], 12, seed=100 + seed, length=cfg["length"])
        tr, va, te = split(ds, seed=seed)
        tr = corrupt_labels(tr, CorruptionSpec(cfg["rate"], seed=seed))
        for mode in res:
            plan = NetworkPlan.ecg_like((2, cfg["length"]), 12, widths=cfg["widths"], mode=mode, alpha=cfg["alpha"])
            net = build(plan, stream(seed, "init"))
            r = train(net, (tr.features, tr.labels), (va.features, va.labels), (te.features, te.labels),
                      TrainConfig(epochs=cfg["epochs"], lr0=cfg["lr"], seed=seed))
            best, last = r.best_record().test_indicator, r.last_record().test_indicator
            peak = max(rec.test_indicator for rec in r.records)
            res[mode].append((best, best - last, peak - last))
            print(f"\n  seed {seed} {mode}: best {best:.4f} gap {best - last:+.4f} (test-max gap {peak - last:+.4f})")
    elapsed = time.perf_counter() - start
    erm, flow = np.array(res["erm"]), np.array(res["flow_mixup"])
    a = flow[:, 0].mean() >= erm[:, 0].mean()
    b = erm[:, 1].mean() >= flow[:, 1].mean()
    report(8, a and b and elapsed < cfg["budget_s"],
           f"(a) Macro-F1 flow {flow[:, 0].mean():.4f} vs erm {erm[:, 0].mean():.4f} [{'ok' if a else 'no'}]; "
           f"(b) gap erm {erm[:, 1].mean():+.4f} vs flow {flow[:, 1].mean():+.4f} [{'ok' if b else 'no'}]; "
           f"{elapsed / 60:.1f} min; informational test-max gap erm {erm[:, 2].mean():+.4f} flow {flow[:, 2].mean():+.4f}")


def _cli(tmp_path, command, name, **cfg):
    cfg.setdefault("seed", 9)
    cfg.setdefault("data", {"generator": {"num_samples": 200, "num_classes": 6, "length": 32}})
    cfg.setdefault("model", {"widths": [4, 4, 6, 6, 6]})
    cfg["out"] = str(tmp_path / name)
    (tmp_path / f"{name}.json").write_text(json.dumps(cfg))
    return main([command, "--config", str(tmp_path / f"{name}.json")])


def test_criterion_09_distribution_shift_probe(tmp_path):
    codes = [_cli(tmp_path, "train", "erm", regularizer={"mode": "erm"}, train={"epochs": 3}),
             _cli(tmp_path, "train", "flow", train={"epochs": 3})]
    ckpts = [str(tmp_path / "erm" / "best.flxw"), str(tmp_path / "flow" / "best.flxw")]
    codes.append(_cli(tmp_path, "diagnose", "diag", diagnose={"checkpoints": ckpts, "k": 5}))
    stats = json.loads((tmp_path / "diag" / "cluster_stats.json").read_text())
    n_states = 6  # five block inputs plus the output
    per_state = len(stats["without"]) == len(stats["with"]) == len(stats["r2_ratio"]) == n_states
    in_range = all(0.0 <= s["r2"] <= 1.0 for s in stats["without"] + stats["with"])
    files = all((tmp_path / "diag" / f).exists() for f in ("r2.csv", "r2.svg", "r2_ratio.svg"))
    ok = codes == [0, 0, 0] and per_state and in_range and files
    report(9, ok, f"diagnose on erm vs flow_mixup: {len(stats['with'])} states each, all R2 in [0,1] {in_range}, "
                  f"R2 ratio per state {per_state}, csv/svg written {files}")


def test_criterion_10_determinism(tmp_path):
    differing = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        root.mkdir()
        _cli(root, "generate", "gen")
        data = str(root / "gen" / "dataset.flxd")
        _cli(root, "corrupt", "cor", data={"path": data}, corruption={"rate": 0.4})
        cdata = {"path": str(root / "cor" / "dataset.flxd")}
        _cli(root, "train", "flow", data=cdata, train={"epochs": 2})
        _cli(root, "train", "erm", data=cdata, regularizer={"mode": "erm"}, train={"epochs": 2})
        _cli(root, "eval", "ev", data=cdata, eval={"checkpoint": str(root / "flow" / "best.flxw")})
        _cli(root, "diagnose", "dg", data=cdata,
             diagnose={"checkpoints": [str(root / "erm" / "best.flxw"), str(root / "flow" / "best.flxw")], "k": 4})
        _cli(root, "compare", "cmp", compare={"run_a": str(root / "erm"), "run_b": str(root / "flow")})
    # every file each command wrote; wall-clock timing is kept apart on purpose
    outputs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*/*")
                     if p.is_file() and p.name != "timing.csv")
    for rel in outputs:
        a, b = (tmp_path / "a" / rel).read_bytes(), (tmp_path / "b" / rel).read_bytes()
        if a.replace(str(tmp_path / "a").encode(), b"") != b.replace(str(tmp_path / "b").encode(), b""):
            differing.append(str(rel))
    report(10, not differing and len(outputs) > 20,
           f"generate/corrupt/train/eval/diagnose/compare rerun: {len(outputs)} output files compared "
           f"(timing.csv excluded), {len(differing)} differ {differing[:3]}")
