"""Acceptance gate: one test per release criterion, each emitting a PASS /
FAIL / SKIP line on the real stdout.

Criteria 8 and 9 need the Cora citation dataset, which is not bundled; when
its files are absent those tests SKIP (environment limitation, the loader
itself is exercised on synthetic text in the unit suite) and a synthetic
surrogate exercises the identical training paths so that criterion 11 still
has real runs to check.
"""

import itertools
import os
import time

import numpy as np
import pytest

from conftest import acceptance_line, cora_dir, fd_grad, rel_err
from lorap import graphs, kernels, layers as L, prompts as P, quant, theory, training
from lorap import cli

_RUNS = {"fp32": [], "int4_none": [], "int4_gpf_lorap": []}


def _check(num, name, ok, detail="", limit_s=None, elapsed=None):
    if limit_s is not None and elapsed is not None:
        detail = f"{detail}; {elapsed:.1f}s" if detail else f"{elapsed:.1f}s"
        ok = ok and elapsed < limit_s
    acceptance_line(num, name, "PASS" if ok else "FAIL", detail)
    assert ok, f"criterion {num} {name}: {detail}"


def test_criterion_01_post_aggregation_optimum():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_loss, worst_grad = 0.0, 0.0
    for i in range(200):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(1, 5))
        inst = theory.random_instance(n, d, seed=i)
        inst.p = theory.post_optimum(inst)
        worst_loss = max(worst_loss, theory.post_loss(inst))
        if i < 20:   # gradient checks on a subsample keep runtime < 5 s
            inst.p = rng.normal(size=(n, d))
            fd_post = theory.finite_diff(
                lambda p: theory.post_loss(
                    theory.OracleInstance(inst.a, inst.x, inst.eps_x, p)), inst.p)
            fd_pre = theory.finite_diff(
                lambda p: theory.pre_loss(
                    theory.OracleInstance(inst.a, inst.x, inst.eps_x, p)), inst.p)
            worst_grad = max(worst_grad,
                             rel_err(fd_post, theory.post_grad(inst)),
                             rel_err(fd_pre, theory.pre_grad(inst)))
    ok = worst_loss <= 1e-20 and worst_grad <= 1e-8
    _check(1, "post-aggregation optimum", ok,
           f"max loss {worst_loss:.1e}, max grad err {worst_grad:.1e}",
           limit_s=5.0, elapsed=time.perf_counter() - t0)


def test_criterion_02_targeted_bias_correction():
    t0 = time.perf_counter()
    a = theory.star_graph_operator(12)
    mc = theory.monte_carlo_bias(a, 4, scale=0.2, bias=0.05, node=0,
                                 samples=1000, seed=1)
    post_ok = abs(mc["post"]["mean"]) <= 3 * mc["post"]["stderr"]
    pre_off = abs(mc["pre"]["mean"]) > 5 * mc["pre"]["stderr"]
    _check(2, "targeted bias correction", post_ok and pre_off,
           f"post mean {mc['post']['mean']:.2e} (3se {3 * mc['post']['stderr']:.2e}), "
           f"pre mean {mc['pre']['mean']:.2e} (5se {5 * mc['pre']['stderr']:.2e})",
           limit_s=5.0, elapsed=time.perf_counter() - t0)


def test_criterion_03_low_rank_bound():
    ok = True
    worst = 0.0
    for i in range(100):
        inst = theory.random_instance(6, 4, seed=1000 + i, with_weights=True)
        e = theory.error_matrix(inst)
        for k in range(min(e.shape) + 1):
            res = theory.svd_bound(inst, k)
            if res["achieved"] > res["bound"] + 1e-9:
                ok = False
            worst = max(worst, abs(res["achieved"] - res["bound"]))
    # square full-rank weights make the correction space unconstrained
    eq_ok = worst <= 1e-6
    inst = theory.OracleInstance(
        a=np.eye(3), x=np.diag([3.0, 2.0, 1.0]), eps_x=np.zeros((3, 3)),
        p=np.zeros((3, 3)), w_fp=np.zeros((3, 3)), w_q=np.eye(3))
    res = theory.svd_bound(inst, 1)
    diag_ok = abs(res["achieved"] - np.sqrt(5.0)) <= 1e-12
    _check(3, "low-rank error bound", ok and eq_ok and diag_ok,
           f"max |achieved-bound| {worst:.1e}, diag case {res['achieved']:.12f}")


def test_criterion_04_gradient_gate(sbm_small):
    t0 = time.perf_counter()
    worst = 0.0
    for arch in ("gcn", "gin"):
        cfg = training.TrainConfig(arch=arch, hidden=4, prompt_mode="lorap",
                                   k=3, r=2)
        state = training.init_model(cfg, 6, 2)
        g = training._norm_graph(cfg, sbm_small.graph)
        mask = sbm_small.labels.mask("train")

        def loss():
            logits = training.model_forward(state, g, sbm_small.features,
                                            update=False)
            return training.cross_entropy(logits, sbm_small.labels.labels, mask)[0]

        logits, tapes, _, _ = training.model_forward(
            state, g, sbm_small.features, update=False, with_tapes=True)
        _, grad = training.cross_entropy(logits, sbm_small.labels.labels, mask)
        lg, pg, _ = L.model_backward(g, state.layers, tapes, grad, state.bank)
        if arch == "gcn":
            pairs = [(state.layers[l].weight, lg[l].d_weight) for l in range(2)]
            pairs += [(state.layers[1].bias, lg[1].d_bias)]
        else:
            pairs = [(state.layers[l].gin_mlp[j][0], lg[l].d_gin_mlp[j][0])
                     for l in range(2) for j in range(2)]
        pairs += [(state.bank.p_a[1], pg.d_p_a[1]),
                  (state.bank.p_b[1], pg.d_p_b[1]),
                  (state.bank.phi_weight, pg.d_phi_w),
                  (state.bank.phi_bias, pg.d_phi_b)]
        for arr, analytic in pairs:
            worst = max(worst, rel_err(fd_grad(loss, arr), analytic))
    # node-prompt paths
    for mode in ("gpf", "gpf_plus"):
        p = P.init_node_prompt(mode, 5, k=3, r=2, seed=2)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(8, 5))
        w = rng.normal(size=(8, 5))
        _, tape = P.gpf_apply(x, p, return_tape=True)
        g2 = P.gpf_backward(w, tape, p)
        fn = lambda: float((P.gpf_apply(x, p) * w).sum())
        worst = max(worst, rel_err(fd_grad(fn, x), g2.grad_x))
    # aggregation adjoints
    g3 = sbm_small.graph
    rng = np.random.default_rng(4)
    x = rng.normal(size=(g3.num_nodes, 3))
    w = rng.normal(size=(g3.num_nodes, 3))
    for mode in ("sum", "mean", "max"):
        _, tape = L.aggregate(g3, x, mode, return_tape=True)
        analytic = L.aggregate_backward(g3, w, mode, tape)
        fn = lambda m=mode: float((L.aggregate(g3, x, m) * w).sum())
        worst = max(worst, rel_err(fd_grad(fn, x), analytic))
    _check(4, "gradient gate", worst <= 1e-4, f"max rel err {worst:.1e}",
           limit_s=60.0, elapsed=time.perf_counter() - t0)


def test_criterion_05_quantizer_gate():
    ok = True
    for bits in (4, 8):
        p = quant.params_from_range(-3.0, 5.0, bits, signed=False)
        x = np.linspace(-3.0, 5.0, 100_000)
        if np.abs(quant.fake_quantize(x, p) - x).max() > p.scale / 2 + 1e-12:
            ok = False
    rng = np.random.default_rng(5)
    for i in range(10_000):
        bits = 4 if i % 2 else 8
        n = int(rng.integers(0, 40))
        arr = rng.integers(0, 1 << bits, size=n)
        if not np.array_equal(
                quant.unpack_codes(quant.pack_codes(arr, bits), bits, n), arr):
            ok = False
    _check(5, "quantizer gate", ok,
           "round-trip bound and packing bijection over 1e5 grid / 1e4 arrays")


def test_criterion_06_fused_bit_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    failures = 0
    for i in range(500):
        bits = 4 if i % 2 else 8
        n = int(rng.integers(10, 150))
        d = int(rng.integers(2, 24))
        k = int(rng.integers(2, 9))
        r = int(rng.integers(1, min(k, d) + 1))
        deg = int(rng.integers(1, 8))
        g = graphs.synth_uniform(n, deg, seed=i)
        if i % 5 == 0:   # weighted-edge path
            g = graphs.normalize_adjacency(g, "sym", add_self_loops=True)
        x = rng.uniform(-3, 3, size=(n, d))
        p_in = quant.calibrate(x, bits, signed=False)
        xq = quant.quantize(x, p_in)
        p_out = quant.calibrate(np.asarray(g.to_csr_matrix() @ x), bits,
                                signed=False)
        bank = P.init_prompt_bank(1, k, r, d, seed=i)
        ref = kernels.lorap_unfused(g, xq, bank, 0, p_out)
        for tile in (1, 64, n):
            plan = kernels.KernelPlan(bits, True, d, k, r, tile)
            out = kernels.lorap_fused(g, xq, bank, 0, p_out, plan)
            if out.data != ref.data:
                failures += 1
    _check(6, "fused kernel bit-exactness", failures == 0,
           f"{failures} mismatches over 500 instances x 3 tilings",
           limit_s=120.0, elapsed=time.perf_counter() - t0)


def test_criterion_07_kernel_performance():
    g = graphs.synth_uniform(100_000, 8, seed=7)
    rep = kernels.bench(g, d=128, k=20, r=2, bits=(8,), reps=30, warmup=5,
                        seed=7)
    int8_speedup = rep.row("int8_agg").speedup
    fused_ratio = (rep.row("int8_lorap_unfused").median_ns /
                   rep.row("int8_lorap_fused").median_ns)
    ok = int8_speedup >= 1.3 and fused_ratio >= 1.2
    _check(7, "kernel performance", ok,
           f"int8 vs fp32 {int8_speedup:.2f}x (need 1.3), "
           f"fused vs unfused {fused_ratio:.2f}x (need 1.2)")


def _load_cora():
    d = cora_dir()
    if d is None:
        return None
    with open(os.path.join(d, "cora.content")) as cf, \
            open(os.path.join(d, "cora.cites")) as gf:
        return graphs.load_content_cites(cf.read(), gf.read())


def _surrogate():
    return graphs.synth_sbm([60, 60, 60], 0.10, 0.02, 24, 1.6, seed=42)


def test_criterion_08_fp32_training():
    ds = _load_cora()
    if ds is None:
        ds = _surrogate()
        accs = []
        for seed in range(5):
            cfg = training.TrainConfig(epochs=120, patience=50, seed=seed)
            _, m = training.train(cfg, ds)
            _RUNS["fp32"].append(m)
            accs.append(m.test_acc)
        acceptance_line(8, "fp32 reference training", "SKIP",
                        "Cora files unavailable in this environment; synthetic "
                        f"surrogate 5-seed mean {np.mean(accs):.3f}")
        pytest.skip("Cora dataset files not present; surrogate runs recorded")
    accs = []
    for seed in range(5):
        cfg = training.TrainConfig(epochs=200, patience=50, seed=seed)
        _, m = training.train(cfg, ds)
        _RUNS["fp32"].append(m)
        accs.append(m.test_acc)
    mean = float(np.mean(accs))
    _check(8, "fp32 reference training", mean >= 0.75,
           f"5-seed mean test acc {mean:.3f} (need 0.75)")


def test_criterion_09_qat_prompt_improvement():
    ds = _load_cora()
    surrogate = ds is None
    if surrogate:
        ds = _surrogate()
    means = {}
    for mode in ("none", "gpf_lorap"):
        accs = []
        for seed in range(5):
            cfg = training.TrainConfig(framework="qat", bits_w=4, bits_a=4,
                                       prompt_mode=mode, k=10, r=2,
                                       epochs=120 if surrogate else 200,
                                       patience=50, seed=seed)
            _, m = training.train(cfg, ds)
            _RUNS[f"int4_{mode}"].append(m)
            accs.append(m.test_acc)
        means[mode] = float(np.mean(accs))
    gain = (means["gpf_lorap"] - means["none"]) * 100
    if surrogate:
        acceptance_line(9, "int4 prompt improvement", "SKIP",
                        "Cora files unavailable; surrogate gain "
                        f"{gain:+.1f} points ({means['none']:.3f} -> "
                        f"{means['gpf_lorap']:.3f})")
        pytest.skip("Cora dataset files not present; surrogate runs recorded")
    _check(9, "int4 prompt improvement", gain >= 2.0,
           f"gain {gain:+.1f} points ({means['none']:.3f} -> "
           f"{means['gpf_lorap']:.3f}, need +2.0)")


def test_criterion_10_parameter_accounting():
    bank = P.init_prompt_bank(5, 20, 2, 110)
    c = P.param_count(bank)
    exact = c["bases"] == 1300 and c["full_rank_bases"] == 11000
    # every valid grid cell at the in-scope dataset feature widths
    grid_ok = True
    for k, r, d in itertools.product((5, 10, 20, 40), (1, 2, 4, 8),
                                     (1433, 3703)):
        if r > min(k, d):
            continue
        if r * (k + d) >= k * d:
            grid_ok = False
    _check(10, "parameter accounting", exact and grid_ok,
           f"bases {c['bases']} vs full-rank {c['full_rank_bases']}; "
           "low-rank < full-rank on all valid grid cells")


def test_criterion_11_convergence_property():
    runs = [m for lst in _RUNS.values() for m in lst]
    assert runs, "criteria 8/9 recorded no training runs"
    bad = 0
    for m in runs:
        first = np.median(m.train_loss[:10])
        last = np.median(m.train_loss[-10:])
        if not last < first:
            bad += 1
    _check(11, "convergence property", bad == 0,
           f"{len(runs) - bad}/{len(runs)} runs with last-10 median loss "
           "below first-10 median")


def test_criterion_12_end_to_end_smoke(tmp_path):
    t0 = time.perf_counter()
    fast = ["--epochs", "5", "--hidden", "8", "--patience", "10"]
    rng = np.random.default_rng(12)
    content = tmp_path / "toy.content"
    cites = tmp_path / "toy.cites"
    content.write_text("\n".join(
        f"id{i} " + " ".join(str(v) for v in rng.integers(0, 2, 6)) +
        f" c{i % 2}" for i in range(40)) + "\n")
    cites.write_text("\n".join(
        f"id{i} id{(i * 3 + 1) % 40}" for i in range(80)) + "\n")
    cache = str(tmp_path / "toy.lrg")
    rcs = {}
    rcs["convert"] = cli.main(["convert", str(content), str(cites),
                               "--out", cache])
    out = str(tmp_path / "train")
    rcs["train"] = cli.main(["train", "--out", out, "--seed", "0"] + fast)
    rcs["eval"] = cli.main(["eval", "--model", os.path.join(out, "model.lmd"),
                            "--split", "test"])
    rcs["sweep"] = cli.main(["sweep", "--out", str(tmp_path / "sweep"),
                             "--k-grid", "2,4", "--r-grid", "1,2",
                             "--seeds", "0", "--framework", "qat",
                             "--prompt-mode", "lorap"] + fast)
    rcs["bench"] = cli.main(["bench", "--out", str(tmp_path / "bench"),
                             "--n", "2000", "--d", "16", "--k", "4",
                             "--r", "2", "--reps", "30", "--warmup", "3"])
    rcs["verify"] = cli.main(["verify"])
    bad = {k: v for k, v in rcs.items() if v != 0}
    _check(12, "end-to-end smoke", not bad,
           f"exit codes {rcs}", limit_s=60.0,
           elapsed=time.perf_counter() - t0)
