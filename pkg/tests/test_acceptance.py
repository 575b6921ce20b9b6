"""Acceptance suite: one test per criterion, each prints a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. Criterion 5 trains all four
variants at desk scale and dominates the runtime (roughly 15 minutes on a
commodity CPU); everything else finishes in seconds.
"""
import functools
import math
import os
import sys
import time

import numpy as np
import pytest

from crackseg.attention import AttentionGate
from crackseg.cli import main as cli_main
from crackseg.data import augment_flips, synth_crack, synth_dataset
from crackseg.layers import (BatchNorm2D, Conv2D, MaxPool2D,
                             TransposedConv2D, activation)
from crackseg.metrics import iou
from crackseg.networks import VARIANTS, NetworkConfig, build
from crackseg.tensor import GradientTape, Tensor, backward, mul, sum_all
from crackseg.training import (Adam, TrainConfig, bce_with_logits,
                               evaluate_miou, load_checkpoint, save_checkpoint,
                               train)

from gradcheck import numeric_grad, rel_err

README = os.path.join(os.path.dirname(__file__), os.pardir, "README.md")


def _verdict(num, name):
    """Decorator printing one pass/fail line per criterion."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"criterion {num} ({name}): FAIL", file=sys.stderr)
                raise
            print(f"criterion {num} ({name}): PASS", file=sys.stderr)
        return run
    return wrap


# -- 1. gradient suite ----------------------------------------------------------


def _layer_gradient_checks():
    rng = np.random.default_rng(0)

    conv = Conv2D(2, 3, kernel=(3, 3), padding=(1, 1), rng=rng, dtype=np.float64)
    x0 = rng.normal(size=(2, 2, 4, 4))
    ng = numeric_grad(lambda: float(conv.forward(Tensor(x0)).data.sum()),
                      [x0, conv.weight.data, conv.bias.data])
    x = Tensor(x0, requires_grad=True)
    with GradientTape() as tape:
        loss = sum_all(conv.forward(x))
    backward(loss, tape)
    for a, n in zip([x.grad, conv.weight.grad, conv.bias.grad], ng):
        assert rel_err(a, n) < 1e-3

    up = TransposedConv2D(2, 3, rng=rng, dtype=np.float64)
    x0 = rng.normal(size=(1, 2, 3, 3))
    ng = numeric_grad(lambda: float(up.forward(Tensor(x0)).data.sum()),
                      [x0, up.weight.data, up.bias.data])
    x = Tensor(x0, requires_grad=True)
    with GradientTape() as tape:
        loss = sum_all(up.forward(x))
    backward(loss, tape)
    for a, n in zip([x.grad, up.weight.grad, up.bias.grad], ng):
        assert rel_err(a, n) < 1e-3

    pool = MaxPool2D()
    x0 = rng.normal(size=(1, 2, 4, 4))  # continuous values: no ties
    ng = numeric_grad(lambda: float(
        x0.reshape(1, 2, 2, 2, 2, 2).max(axis=(3, 5)).sum()), [x0])[0]
    x = Tensor(x0, requires_grad=True)
    with GradientTape() as tape:
        loss = sum_all(pool.forward(x))
    backward(loss, tape)
    assert rel_err(x.grad, ng) < 1e-3

    bn = BatchNorm2D(2, dtype=np.float64)
    bn.gamma.data[...] = rng.normal(size=bn.gamma.shape)
    x0 = rng.normal(size=(2, 2, 3, 3))
    coeff = rng.normal(size=(2, 2, 3, 3))
    ng = numeric_grad(lambda: float(
        (bn.forward(Tensor(x0), training=True).data * coeff).sum()),
        [x0, bn.gamma.data, bn.beta.data])
    x = Tensor(x0, requires_grad=True)
    with GradientTape() as tape:
        loss = sum_all(mul(bn.forward(x, training=True), Tensor(coeff)))
    backward(loss, tape)
    for a, n in zip([x.grad, bn.gamma.grad, bn.beta.grad], ng):
        assert rel_err(a, n) < 1e-3

    for kind in ("relu", "sigmoid", "softmax_channels"):
        x0 = rng.normal(size=(1, 3, 2, 2))
        coeff = rng.normal(size=(1, 3, 2, 2))

        def f(x0=x0, coeff=coeff, kind=kind):
            return float((activation(kind, Tensor(x0)).data * coeff).sum())

        ng = numeric_grad(f, [x0])[0]
        x = Tensor(x0, requires_grad=True)
        with GradientTape() as tape:
            loss = sum_all(mul(activation(kind, x), Tensor(coeff)))
        backward(loss, tape)
        assert rel_err(x.grad, ng) < 1e-3

    gate = AttentionGate(4, 6, rng=rng, dtype=np.float64)
    skip0 = rng.normal(size=(1, 4, 3, 3))
    dec0 = rng.normal(size=(1, 6, 3, 3))
    params = list(gate.params().values())
    ng = numeric_grad(lambda: float(
        gate.forward(Tensor(skip0), Tensor(dec0)).data.sum()),
        [skip0, dec0] + [p.data for p in params])
    skip = Tensor(skip0, requires_grad=True)
    dec = Tensor(dec0, requires_grad=True)
    with GradientTape() as tape:
        loss = sum_all(gate.forward(skip, dec))
    backward(loss, tape)
    for a, n in zip([skip.grad, dec.grad] + [p.grad for p in params], ng):
        assert rel_err(a, n) < 1e-3


def _network_sampled_gradient_check(variant, n_samples=50):
    net = build(NetworkConfig(variant=variant, base_width=4), seed=1,
                dtype=np.float64)
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(2, 3, 16, 16))
    coeff = rng.normal(size=(2, 1, 16, 16))

    def loss_value():
        out = net.forward(Tensor(x0), mode="train")
        return float((out.data * coeff).sum())

    x = Tensor(x0)
    with GradientTape() as tape:
        loss = sum_all(mul(net.forward(x, mode="train"), Tensor(coeff)))
    backward(loss, tape)

    params = net.named_parameters()
    names = sorted(params)
    eps = 1e-7  # small enough to avoid relu/maxpool kink crossings in float64
    for _ in range(n_samples):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = np.unravel_index(int(rng.integers(p.data.size)), p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + eps
        f_plus = loss_value()
        p.data[idx] = orig - eps
        f_minus = loss_value()
        p.data[idx] = orig
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = p.grad[idx]
        # the floor keeps finite-difference cancellation noise from blowing up
        # the ratio on dead paths where both gradients are essentially zero
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-2)
        assert err < 1e-2, (variant, name, idx, analytic, numeric)


@_verdict(1, "gradient suite")
def test_criterion_1_gradients():
    start = time.time()
    _layer_gradient_checks()
    for variant in VARIANTS:
        _network_sampled_gradient_check(variant)
    assert time.time() - start < 120


# -- 2. oracle suite -------------------------------------------------------------


def _conv_loop_oracle(x, w, b, stride, padding):
    n, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wid + 2 * pw - kw) // sw + 1
    y = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for nn in range(n):
        for oo in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[0, oo, 0, 0]
                    for cc in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oo, cc, u, v] * \
                                    xp[nn, cc, i * sh + u, j * sw + v]
                    y[nn, oo, i, j] = acc
    return y


def _adam_scalar_oracle(p0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    p, m, v = float(p0), 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        p -= lr * (m / (1 - beta1 ** t)) / \
            (math.sqrt(v / (1 - beta2 ** t)) + eps)
        out.append(p)
    return out


@_verdict(2, "oracle suite")
def test_criterion_2_oracles():
    rng = np.random.default_rng(3)

    # convolution vs direct summation, exact on integer-valued tensors
    conv = Conv2D(2, 3, kernel=(3, 3), padding=(1, 1), dtype=np.float64)
    conv.weight.data[...] = rng.integers(-3, 4, conv.weight.shape)
    conv.bias.data[...] = rng.integers(-3, 4, conv.bias.shape)
    x = rng.integers(-3, 4, (2, 2, 5, 5)).astype(np.float64)
    ref = _conv_loop_oracle(x, conv.weight.data, conv.bias.data, (1, 1), (1, 1))
    assert np.array_equal(conv.forward(Tensor(x)).data, ref)

    # transposed convolution is the adjoint of the stride-2 convolution
    conv2 = Conv2D(2, 3, kernel=(2, 2), stride=(2, 2), dtype=np.float64)
    conv2.weight.data[...] = rng.normal(size=conv2.weight.shape)
    conv2.bias.data[...] = 0.0
    up = TransposedConv2D(3, 2, dtype=np.float64)
    up.weight.data[...] = conv2.weight.data
    up.bias.data[...] = 0.0
    a = rng.normal(size=(2, 2, 6, 6))
    b = rng.normal(size=(2, 3, 3, 3))
    lhs = float((conv2.forward(Tensor(a)).data * b).sum())
    rhs = float((a * up.forward(Tensor(b)).data).sum())
    assert abs(lhs - rhs) <= 1e-4

    # Adam two-step trace against the scalar 64-bit oracle
    p = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    ref_trace = _adam_scalar_oracle(0.0, [1.0, -0.5], lr=0.1)
    got = []
    for g in (1.0, -0.5):
        p.grad[...] = g
        opt.step()
        got.append(p.item())
    assert abs(got[0] - ref_trace[0]) <= 1e-7
    assert abs(got[1] - ref_trace[1]) <= 1e-7

    # fused BCE vs naive sigmoid + cross-entropy composition
    def scalar(v):
        return Tensor(np.full((1, 1, 1, 1), float(v)))

    for logit in np.linspace(-15, 15, 121):
        s = 1 / (1 + np.exp(-logit))
        for t in (0.0, 1.0):
            naive = -(t * np.log(s) + (1 - t) * np.log(1 - s))
            fused = bce_with_logits(scalar(logit), scalar(t)).item()
            assert abs(fused - naive) <= 1e-6
    assert np.isfinite(bce_with_logits(scalar(100.0), scalar(0.0)).item())
    assert np.isfinite(bce_with_logits(scalar(-100.0), scalar(1.0)).item())

    # IoU vs a pixel-count oracle, exact
    for _ in range(50):
        pred = (rng.random((1, 1, 6, 6)) > 0.5).astype(np.float64)
        gt = (rng.random((1, 1, 6, 6)) > 0.5).astype(np.float64)
        inter = int(((pred > 0) & (gt > 0)).sum())
        union = int(((pred > 0) | (gt > 0)).sum())
        r = iou(pred, gt)
        assert (r.intersection, r.union) == (inter, union)
        assert r.iou == (1.0 if union == 0 else inter / union)


# -- 3. structural equivalences ----------------------------------------------------


def _copy_shared(src_net, dst_net):
    dst_names = set(dst_net.named_parameters())
    shared = {k: v.data.copy() for k, v in src_net.named_parameters().items()
              if k in dst_names}
    dst_net.load_state(shared, {})


@_verdict(3, "structural equivalences")
def test_criterion_3_equivalences():
    x = Tensor(np.random.default_rng(8).normal(size=(1, 3, 32, 32))
               .astype(np.float32))

    attn = build(NetworkConfig(variant="attention", base_width=4), seed=3)
    unet = build(NetworkConfig(variant="unet", base_width=4), seed=99)
    _copy_shared(attn, unet)
    for gate in attn.all_gates():
        gate.force_open()
    assert np.max(np.abs(attn.forward(x, mode="eval").data
                         - unet.forward(x, mode="eval").data)) < 1e-5

    full = build(NetworkConfig(variant="full_attention", base_width=4), seed=4)
    adv = build(NetworkConfig(variant="advanced_attention", base_width=4),
                seed=77)
    _copy_shared(full, adv)
    for gate in full.all_gates():
        gate.force_open()
    for gate in adv.all_gates():
        gate.force_open()
    assert np.max(np.abs(full.forward(x, mode="eval").data
                         - adv.forward(x, mode="eval").data)) < 1e-5

    counts = [build(NetworkConfig(variant=v, base_width=4), seed=0)
              .parameter_count() for v in VARIANTS]
    assert counts == sorted(counts) and len(set(counts)) == 4


# -- 4. shapes and invariants --------------------------------------------------------


@_verdict(4, "shape and invariant suite")
def test_criterion_4_shapes_and_invariants():
    rng = np.random.default_rng(11)
    for variant in VARIANTS:
        net = build(NetworkConfig(variant=variant, base_width=4), seed=0)
        for hw in (16, 32, 64):
            for n in (1, 2):
                x = Tensor(rng.normal(size=(n, 3, hw, hw)).astype(np.float32))
                assert net.forward(x, mode="eval").shape == (n, 1, hw, hw)
        for gate in net.all_gates():
            if gate.last_alpha is not None:
                alpha = gate.last_alpha.data
                assert np.all((alpha >= 0) & (alpha <= 1))

    s = activation("softmax_channels",
                   Tensor(rng.normal(size=(2, 4, 3, 3)) * 50)).data
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-6)

    pair = synth_crack(0, size=(32, 32))
    flips = augment_flips(pair)
    assert len(flips) == 4
    for f in flips:
        assert set(np.unique(f.mask.data)) <= {0.0, 1.0}
    # flipping twice along the same axes restores the original bit-exactly
    hflip = flips[1]
    again = augment_flips(hflip)[1]
    assert np.array_equal(again.image.data, pair.image.data)
    assert np.array_equal(again.mask.data, pair.mask.data)
    vflip = flips[2]
    assert np.array_equal(augment_flips(vflip)[2].mask.data, pair.mask.data)
    both = flips[3]
    assert np.array_equal(augment_flips(both)[3].image.data, pair.image.data)


# -- 5. desk-scale training ------------------------------------------------------------


@_verdict(5, "desk-scale training")
def test_criterion_5_desk_scale_training():
    train_set = [f for s in range(30)
                 for f in augment_flips(synth_crack(s, size=(64, 64)))]
    val_set = [synth_crack(1000 + s, size=(64, 64)) for s in range(10)]
    for variant in VARIANTS:
        start = time.time()
        net = build(NetworkConfig(variant=variant, base_width=8), seed=0)
        train(net, train_set, TrainConfig(epochs=50, batch_size=2,
                                          learning_rate=1e-4, seed=0,
                                          variant=variant, base_width=8))
        score = evaluate_miou(net, val_set)
        elapsed = time.time() - start
        print(f"  {variant}: val mIoU {score:.3f} in {elapsed:.0f}s",
              file=sys.stderr)
        assert score >= 0.60, (variant, score)
        assert elapsed < 1200, (variant, elapsed)

    # single-sample overfit: the network memorizes one image
    net = build(NetworkConfig(variant="unet", base_width=4), seed=0)
    report = train(net, [synth_crack(0, size=(32, 32))],
                   TrainConfig(epochs=200, batch_size=1, learning_rate=1e-2,
                               seed=0, base_width=4))
    assert report.records[-1].mean_loss < 0.05


# -- 6. determinism and persistence ------------------------------------------------------


@_verdict(6, "determinism and persistence")
def test_criterion_6_determinism(tmp_path):
    dataset = [synth_crack(s, size=(32, 32)) for s in range(4)]

    blobs = []
    for run in ("a", "b"):
        net = build(NetworkConfig(variant="unet", base_width=4), seed=7)
        out = tmp_path / run
        out.mkdir()
        train(net, dataset, TrainConfig(epochs=2, batch_size=2,
                                        learning_rate=1e-4, seed=7,
                                        base_width=4), out_dir=str(out))
        blobs.append((out / "checkpoint_final.fasn").read_bytes())
    assert blobs[0] == blobs[1]

    path = tmp_path / "a" / "checkpoint_final.fasn"
    ckpt = load_checkpoint(str(path))
    resaved = tmp_path / "resaved.fasn"
    save_checkpoint(ckpt, str(resaved))
    assert path.read_bytes() == resaved.read_bytes()

    cfg_full = TrainConfig(epochs=4, batch_size=2, learning_rate=1e-4, seed=5,
                           base_width=4)
    net_full = build(NetworkConfig(variant="unet", base_width=4), seed=5)
    (tmp_path / "full").mkdir()
    report_full = train(net_full, dataset, cfg_full,
                        out_dir=str(tmp_path / "full"))
    net_half = build(NetworkConfig(variant="unet", base_width=4), seed=5)
    (tmp_path / "half").mkdir()
    train(net_half, dataset, TrainConfig(epochs=2, batch_size=2,
                                         learning_rate=1e-4, seed=5,
                                         base_width=4),
          out_dir=str(tmp_path / "half"))
    ckpt = load_checkpoint(str(tmp_path / "half" / "checkpoint_final.fasn"))
    net_resumed = build(NetworkConfig(variant="unet", base_width=4), seed=5)
    report_resumed = train(net_resumed, dataset, cfg_full,
                           out_dir=str(tmp_path / "half"), resume=ckpt)
    full_tail = [r.mean_loss for r in report_full.records[2:]]
    resumed = [r.mean_loss for r in report_resumed.records]
    for a, b in zip(full_tail, resumed):
        assert abs(a - b) < 1e-6


# -- 7. comparison harness ----------------------------------------------------------


@_verdict(7, "comparison harness and documentation")
def test_criterion_7_comparison_report(tmp_path):
    data = tmp_path / "data"
    synth_dataset(str(data), count=4, size=(32, 32), seed=1, val_count=2)
    out = tmp_path / "cmp"
    code = cli_main(["compare", "--data", str(data), "--out", str(out),
                     "--epochs", "1", "--batch-size", "2", "--lr", "1e-4",
                     "--base-width", "4", "--seed", "1", "--no-augment"])
    assert code == 0
    lines = (out / "comparison.tsv").read_text().splitlines()
    assert lines[0] == "Network\tmIoU (%)"
    labels = [line.split("\t")[0] for line in lines[1:]]
    assert labels == ["U-net", "Attention U-net", "Advanced Attention U-net",
                      "Full Attention U-net"]
    assert all(0.0 <= float(line.split("\t")[1]) <= 100.0
               for line in lines[1:])

    # the README places the published full-scale numbers next to desk-scale
    # results, labelled as reference-only
    readme = open(README).read()
    for value in ("85.59", "90.85", "85.88", "90.02"):
        assert value in readme
    assert "reference" in readme.lower()
    assert "desk" in readme.lower()
