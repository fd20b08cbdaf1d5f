"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines alongside the pytest verdicts.
"""

import contextlib
import io
import json
import time

import numpy as np

from dacnet.cli import main as cli_main
from dacnet.dac import (
    aggregation_cost,
    attention_cost,
    attention_weights,
    conv_cost,
    dac_backward,
    dac_forward,
    init_dac_layer,
)
from dacnet.densenet3d import (
    DenseNetConfig,
    build_network,
    growth_rate,
    load_checkpoint,
    net_backward,
    net_forward,
    plan_network,
    save_checkpoint,
)
from dacnet.hsi_data import load_cube, save_cube, stratified_split, synth_cube
from dacnet.tensor_core import (
    BatchNormState,
    ConvKernel,
    batchnorm_backward,
    batchnorm_forward,
    conv3d_backward,
    conv3d_forward,
    cross_entropy_backward,
    cross_entropy_forward,
    fully_connected_backward,
    fully_connected_forward,
    softmax,
    softmax_backward,
)
from dacnet.train_eval import TrainConfig, audit, metrics_from_confusion, train

from conftest import fd_gradient, rel_err
from test_train_eval import brute_force_metrics, toy_patches

EPS = 1e-5
TINY_E2E = dict(stages=(1, 1), k0=2, growth_rates=(2, 4), num_kernels=2,
                num_classes=3, bands=8, patch_size=5, dropout=0.0)


def report(num, ok, text):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}")
    assert ok, f"criterion {num}: {text}"


def worst_fd(loss_fn, analytic, arr, picks, rng):
    if picks >= arr.size:
        idx = list(np.ndindex(arr.shape))
    else:
        chosen = rng.choice(arr.size, size=picks, replace=False)
        idx = [np.unravel_index(i, arr.shape) for i in chosen]
    fd = fd_gradient(loss_fn, arr, eps=EPS, indices=idx)
    got = np.array([analytic[i] for i in idx])
    return rel_err(got, fd).max()


def test_criterion_1_gradient_correctness():
    started = time.perf_counter()
    worst = {}

    def track(op, value):
        worst[op] = max(worst.get(op, 0.0), value)

    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        # conv3d: full-entry check on a small random shape
        x = rng.standard_normal((2, 2, 3, 4, 4))
        k = ConvKernel(rng.standard_normal((2, 2, 2, 2, 2)), rng.standard_normal(2))
        g = rng.standard_normal(conv3d_forward(x, k, pad=(1, 0, 1)).shape)

        def conv_loss():
            return float((g * conv3d_forward(x, k, pad=(1, 0, 1))).sum())

        gx, gw, gb = conv3d_backward(g, x, k, pad=(1, 0, 1))
        for analytic, arr in ((gx, x), (gw, k.weights), (gb, k.bias)):
            track("conv3d", worst_fd(conv_loss, analytic, arr, arr.size, rng))

        # batch-norm in training mode
        xb = rng.standard_normal((3, 2, 2, 3, 3))
        gamma = rng.standard_normal(2) + 1.5
        beta = rng.standard_normal(2)
        gbn = rng.standard_normal(xb.shape)
        state = BatchNormState.fresh(2)

        def bn_loss():
            y, _, _ = batchnorm_forward(xb, gamma, beta, state, True)
            return float((gbn * y).sum())

        _, _, cache = batchnorm_forward(xb, gamma, beta, state, True)
        dx, dgamma, dbeta = batchnorm_backward(gbn, cache)
        for analytic, arr in ((dx, xb), (dgamma, gamma), (dbeta, beta)):
            track("batchnorm", worst_fd(bn_loss, analytic, arr, arr.size, rng))

        # affine map
        xa = rng.standard_normal((3, 6))
        wa = rng.standard_normal((4, 6))
        ba = rng.standard_normal(4)
        ga = rng.standard_normal((3, 4))

        def fc_loss():
            return float((ga * fully_connected_forward(xa, wa, ba)[0]).sum())

        dxa, dwa, dba = fully_connected_backward(ga, xa, wa)
        for analytic, arr in ((dxa, xa), (dwa, wa), (dba, ba)):
            track("affine", worst_fd(fc_loss, analytic, arr, arr.size, rng))

        # softmax and cross-entropy
        xs = rng.standard_normal((3, 5))
        gs = rng.standard_normal((3, 5))

        def sm_loss():
            return float((gs * softmax(xs)).sum())

        track("softmax/xent", worst_fd(sm_loss, softmax_backward(gs, softmax(xs)),
                                       xs, xs.size, rng))
        logits = rng.standard_normal((4, 5))
        targets = rng.integers(0, 5, size=4)

        def ce_loss():
            return cross_entropy_forward(logits, targets)[0]

        _, ce_cache = cross_entropy_forward(logits, targets)
        track("softmax/xent", worst_fd(ce_loss, cross_entropy_backward(ce_cache),
                                       logits, logits.size, rng))

        # full dynamic attention layer
        layer = init_dac_layer(2, 2, (3, 3, 3), 2, rng, pad=(1, 1, 1))
        layer.fc2_w = rng.standard_normal(layer.fc2_w.shape) * 0.7
        layer.fc2_b = rng.standard_normal(layer.fc2_b.shape) * 0.3
        layer.biases = rng.standard_normal(layer.biases.shape) * 0.3
        xd = rng.standard_normal((2, 2, 3, 3, 3))
        gd = rng.standard_normal(dac_forward(xd, layer)[0].shape)

        def dac_loss():
            return float((gd * dac_forward(xd, layer)[0]).sum())

        _, cache = dac_forward(xd, layer)
        grads = dac_backward(gd, cache, layer)
        for analytic, arr in ((grads.dx, xd), (grads.dweights, layer.weights),
                              (grads.dbiases, layer.biases),
                              (grads.dfc1_w, layer.fc1_w), (grads.dfc2_w, layer.fc2_w),
                              (grads.dfc2_b, layer.fc2_b)):
            track("dac", worst_fd(dac_loss, analytic, arr, min(arr.size, 40), rng))

        # end-to-end tiny network on a 1 x 8 x 5 x 5 input
        net = build_network(DenseNetConfig(**TINY_E2E), seed=200 + trial)
        xe = rng.standard_normal((2, 1, 8, 5, 5))
        ye = rng.integers(0, 3, size=2)

        def net_loss():
            lg, _ = net_forward(net, xe, training=True)
            return cross_entropy_forward(lg, ye)[0]

        lg, tape = net_forward(net, xe, training=True)
        _, cec = cross_entropy_forward(lg, ye)
        grads_net, gxe = net_backward(net, tape, cross_entropy_backward(cec))
        params = net.params()
        names = list(params)
        for name in [names[i] for i in rng.choice(len(names), size=3, replace=False)]:
            track("network", worst_fd(net_loss, grads_net[name], params[name], 1, rng))
        track("network", worst_fd(net_loss, gxe, xe, 2, rng))

    elapsed = time.perf_counter() - started
    detail = ", ".join(f"{op} {err:.2e}" for op, err in sorted(worst.items()))
    report(1, max(worst.values()) < 1e-4 and elapsed < 120,
           f"max FD relative error per op [{detail}]; {elapsed:.1f}s (< 120s)")


def test_criterion_2_degenerate_dynamic_equivalence():
    exact = True
    for trial in range(50):
        rng = np.random.default_rng(300 + trial)
        layer = init_dac_layer(int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                               (3, 3, 3), 1, rng, pad=(1, 1, 1))
        layer.biases = rng.standard_normal(layer.biases.shape)
        x = rng.standard_normal((int(rng.integers(1, 4)), layer.c_in, 3, 4, 4))
        static = ConvKernel(layer.weights[0], layer.biases[0])
        y, cache = dac_forward(x, layer)
        y_ref = conv3d_forward(x, static, pad=(1, 1, 1))
        g = rng.standard_normal(y.shape)
        grads = dac_backward(g, cache, layer)
        gx, gw, gb = conv3d_backward(g, x, static, pad=(1, 1, 1))
        exact &= np.array_equal(y, y_ref)
        exact &= np.array_equal(grads.dx, gx)
        exact &= np.array_equal(grads.dweights[0], gw)
        exact &= np.array_equal(grads.dbiases[0], gb)
        exact &= not grads.dfc1_w.any() and not grads.dfc2_w.any()
    report(2, exact, "K=1 forward and backward bit-identical to static conv "
                     "on 50 random instances")


def test_criterion_3_attention_invariants_and_linearity():
    ok = True
    worst_sum = 0.0
    worst_lin = 0.0
    for trial in range(50):
        rng = np.random.default_rng(400 + trial)
        num_k = int(rng.integers(2, 6))
        c_in = int(rng.integers(1, 5))
        layer = init_dac_layer(c_in, int(rng.integers(1, 4)), (3, 3, 3), num_k,
                               rng, pad=(1, 1, 1))
        layer.fc2_w = rng.standard_normal(layer.fc2_w.shape)
        layer.fc2_b = rng.standard_normal(layer.fc2_b.shape)
        layer.biases = rng.standard_normal(layer.biases.shape)
        x = rng.standard_normal((2, c_in, 3, 4, 4)) * 3
        pi = attention_weights(x, layer)
        worst_sum = max(worst_sum, np.abs(pi.sum(axis=1) - 1.0).max())
        ok &= pi.min() >= 0.0 and pi.max() <= 1.0
        y, _ = dac_forward(x, layer)
        expect = np.zeros_like(y)
        for k in range(num_k):
            yk = conv3d_forward(x, ConvKernel(layer.weights[k], layer.biases[k]),
                                pad=(1, 1, 1))
            expect += pi[:, k, None, None, None, None] * yk
        worst_lin = max(worst_lin, rel_err(y, expect).max())
    report(3, ok and worst_sum < 1e-12 and worst_lin < 1e-10,
           f"simplex rows (worst sum dev {worst_sum:.1e} < 1e-12), aggregated conv "
           f"matches weighted kernel sum (worst rel err {worst_lin:.1e} < 1e-10)")


def test_criterion_4_cost_model_and_dominance():
    rng = np.random.default_rng(17)
    exact = True
    for _ in range(100):
        s, c_in, c_out, vol, k = (int(v) for v in rng.integers(1, 60, size=5))
        exact &= attention_cost(s, c_in, k) == s * c_in + (c_in * c_in) // 4 + (c_in * k) // 4
        exact &= aggregation_cost(c_in, c_out, vol, k) == k * c_in * c_out * vol + k * c_out
        exact &= conv_cost(s, c_in, c_out, vol) == s * c_in * c_out * vol
    started = time.perf_counter()
    rep = audit(DenseNetConfig())     # base layout, 200-band 17x17 input
    elapsed = time.perf_counter() - started
    dac_rows = [r for r in rep.rows if r.kind == "dac"]
    dominance = all(r.conv_madds > r.attention_madds + r.aggregation_madds
                    for r in dac_rows)
    report(4, exact and dominance and len(dac_rows) == 19 and elapsed < 5.0,
           f"cost formulas integer-exact on 100 tuples; conv cost dominates dynamic "
           f"overhead in all {len(dac_rows)} dynamic layers; audit {elapsed:.2f}s (< 5s)")


def test_criterion_5_growth_law_and_channel_closure():
    law = [growth_rate(m, 8) for m in (1, 2, 3)] == [8, 16, 32]
    closures = []
    for stages in ((4, 6, 8), (14, 14, 14)):
        cfg = DenseNetConfig(stages=stages, k0=8, growth_rates=(8, 16, 32),
                             num_kernels=1, num_classes=16, bands=16, patch_size=9,
                             dropout=0.0)
        full = DenseNetConfig(stages=stages, k0=8, growth_rates=(8, 16, 32),
                              num_kernels=4, num_classes=16, bands=200, patch_size=17)
        plan = plan_network(cfg)
        closures.append(plan.classifier_in == plan_network(full).classifier_in)
        net = build_network(cfg, seed=0)
        seen = {}
        x = np.random.default_rng(0).standard_normal((1, 1) + cfg.input_dims)
        net_forward(net, x, training=True,
                    probe=lambda name, arr: seen.setdefault(name, arr.shape[1]))
        closures.append(seen["head.bn"] == plan.classifier_in)
        for s in range(len(stages)):
            closures.append(seen[f"stage{s + 1}.block1.bn"] == plan.entries[s])
    report(5, law and all(closures),
           "growth rates 8/16/32 for stages 1..3; symbolic channel plan equals "
           "runtime channel counts for the base and large layouts")


def test_criterion_6_overfit_sanity(tmp_path):
    started = time.perf_counter()
    cube_path = tmp_path / "cube.hsc1"
    cfg_path = tmp_path / "tiny.json"
    out_dir = tmp_path / "run"
    assert cli_main(["synth", "--out", str(cube_path), "--height", "32",
                     "--width", "32", "--bands", "16", "--classes", "3",
                     "--noise", "0.0", "--seed", "11"]) == 0
    cfg_path.write_text(json.dumps({
        "stages": [2, 2], "k0": 2, "growth_rates": [2, 4], "num_kernels": 2,
        "patch_size": 9, "dropout": 0.1, "split_ratios": "5:1:4",
        "epochs": 30, "batch_size": 16, "lr_drop_epochs": [20], "seed": 3,
    }))
    assert cli_main(["train", "--config", str(cfg_path), "--data", str(cube_path),
                     "--out-dir", str(out_dir), "--no-figures"]) == 0
    oa = {}
    for part in ("train", "test"):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            rc = cli_main(["eval", "--checkpoint", str(out_dir / "checkpoint.dacn"),
                           "--data", str(cube_path), "--split", part,
                           "--out-dir", str(out_dir), "--no-figures", "--json"])
        assert rc == 0
        oa[part] = json.loads(buf.getvalue())["oa"]
    elapsed = time.perf_counter() - started
    # loss over any 10-epoch window after epoch 5 is non-increasing
    # (one violation tolerated: stochastic shuffling)
    loss = [json.loads(line)["train_loss"]
            for line in (out_dir / "epochs.jsonl").read_text().splitlines()]
    violations = sum(1 for e in range(15, len(loss)) if loss[e] > loss[e - 10])
    assert violations <= 1, f"loss rose over {violations} 10-epoch windows"
    report(6, oa["train"] >= 0.99 and oa["test"] >= 0.95 and elapsed < 600,
           f"30-epoch overfit on the noise-free synthetic cube: train OA "
           f"{oa['train']:.4f} (>= 0.99), test OA {oa['test']:.4f} (>= 0.95), "
           f"{elapsed:.0f}s (< 600s)")


def test_criterion_7_metrics_oracle():
    rng = np.random.default_rng(23)
    worst = 0.0
    for _ in range(200):
        c = int(rng.integers(2, 8))
        conf = rng.integers(0, 25, size=(c, c))
        conf[np.arange(c), np.arange(c)] += 1
        m = metrics_from_confusion(conf)
        oa, aa, kappa = brute_force_metrics(conf.tolist())
        worst = max(worst, abs(m.oa - oa), abs(m.aa - aa), abs(m.kappa - kappa))
    perfect = metrics_from_confusion(np.diag([3, 5, 2]))
    constant = metrics_from_confusion(np.array([[50, 0], [50, 0]]))
    hand = metrics_from_confusion(np.array([[2, 0], [1, 1]]))
    exact = (perfect.oa == perfect.aa == perfect.kappa == 1.0
             and constant.oa == 0.5 and constant.aa == 0.5 and constant.kappa == 0.0
             and hand.oa == 0.75 and hand.aa == 0.75 and hand.kappa == 0.5)
    report(7, worst < 1e-12 and exact,
           f"200 random confusion matrices match the brute-force oracle (worst "
           f"{worst:.1e} < 1e-12); the three hand cases are exact")


def test_criterion_8_split_apportionment():
    rng = np.random.default_rng(31)
    ok = True
    for ratios in ((2, 1, 7), (3, 1, 6), (4, 1, 5), (5, 1, 4), (6, 1, 3)):
        for trial in range(20):
            classes = int(rng.integers(2, 7))
            h = w = int(rng.integers(10, 28))
            labels = rng.integers(0, classes + 1, size=(h, w))
            for c in range(1, classes + 1):
                labels.flat[c] = c
            split = stratified_split(labels, ratios, seed=trial)
            labeled = labels > 0
            ok &= not split.assignment[~labeled].any()
            ok &= (split.assignment[labeled] > 0).all()
            total = sum(ratios)
            for c in range(1, classes + 1):
                n = int((labels == c).sum())
                for part, r in zip(("train", "val", "test"), ratios):
                    got = int((split.mask(part) & (labels == c)).sum())
                    ok &= abs(got - n * r / total) < 1.0
    report(8, ok, "all published ratios: partitions disjoint, exhaustive over "
                  "labeled pixels, per-class counts within one sample of quota")


def test_criterion_9_determinism_and_persistence(tmp_path):
    rng = np.random.default_rng(5)
    patches = toy_patches(rng, n=12, classes=3, bands=8, block=5)
    logs = []
    for _ in range(2):
        net = build_network(DenseNetConfig(**TINY_E2E), seed=2)
        cfg = TrainConfig(epochs=3, batch_size=4, seed=9)
        logs.append(train(net, patches, cfg, val_set=patches).log)
    logs_equal = logs[0] == logs[1]

    cube = synth_cube(12, 10, 6, 3, seed=4)
    c1, c2 = tmp_path / "a.hsc1", tmp_path / "b.hsc1"
    save_cube(cube, c1)
    save_cube(load_cube(c1), c2)
    cube_ok = c1.read_bytes() == c2.read_bytes()

    net = build_network(DenseNetConfig(**TINY_E2E), seed=2)
    net_forward(net, rng.standard_normal((2, 1, 8, 5, 5)), training=True)
    k1, k2 = tmp_path / "a.dacn", tmp_path / "b.dacn"
    save_checkpoint(net, k1, run_config={"seed": 2})
    loaded, doc = load_checkpoint(k1)
    save_checkpoint(loaded, k2, run_config=doc.get("run"))
    ckpt_ok = k1.read_bytes() == k2.read_bytes()
    report(9, logs_equal and cube_ok and ckpt_ok,
           "identical seeds give bit-identical training logs; cube and checkpoint "
           "round-trips are byte-identical")


def test_criterion_10_parameter_count_plausibility():
    rep = audit(DenseNetConfig())     # shipped base preset on a 200-band 17x17 input
    total = rep.total_params
    documented = "0.44M" in rep.notes
    in_window = 1e5 <= total <= 2e6
    report(10, in_window and documented,
           f"base-config audit reports {total} parameters "
           f"({total / 1e6:.2f}M, window 0.1M-2M); reference gap documented in "
           f"the report notes: {documented}")
