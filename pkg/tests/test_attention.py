import json

import numpy as np
import pytest

from handobj.attention import (
    CrParams,
    QueryMode,
    block_forward,
    cr_backward,
    cr_forward,
    gradcheck,
    softmax_rows,
)
from handobj.errors import DimensionMismatch


def naive_block(p, X, Y):
    """Triple-loop forward for (H, W, C) maps."""
    H, W, C = X.shape
    xs = X.reshape(-1, C)
    ys = Y.reshape(-1, C)
    out = np.zeros_like(xs)
    rows = []
    for i, x in enumerate(xs):
        q = [sum(p.wq[a, b] * x[b] for b in range(C)) for a in range(C)]
        logits = []
        for y in ys:
            k = [sum(p.wk[a, b] * y[b] for b in range(C)) for a in range(C)]
            logits.append(sum(q[a] * k[a] for a in range(C)) / np.sqrt(C))
        m = max(logits)
        e = [np.exp(v - m) for v in logits]
        a = [v / sum(e) for v in e]
        rows.append(a)
        fused = x.copy()
        for w, y in zip(a, ys):
            fused += w * (p.wv @ y)
        mu = fused.mean()
        var = ((fused - mu) ** 2).mean()
        ln = (fused - mu) / np.sqrt(var + 1e-5) * p.ln_gain + p.ln_bias
        hidden = [max(0.0, sum(ln[c] * p.w1[c, h] for c in range(C)) + p.b1[h]) for h in range(p.w1.shape[1])]
        out[i] = fused + np.array(hidden) @ p.w2 + p.b2
    return out.reshape(X.shape), np.array(rows)


def zero_params(C):
    p = CrParams.init(C, np.random.default_rng(0))
    return CrParams.zeros_like(p)


def test_zero_weights_give_identity(rng):
    X = rng.normal(size=(3, 4, 8))
    Y = rng.normal(size=(2, 2, 8))
    for mode in (QueryMode.OBJECT, QueryMode.HAND):
        out, _ = cr_forward(zero_params(8), X, Y, mode)
        assert np.array_equal(out, X)


def test_single_context_position(rng):
    p = CrParams.init(8, rng)
    X = rng.normal(size=(2, 3, 8))
    Y = rng.normal(size=(1, 1, 8))
    _, tape = block_forward(p, X, Y)
    assert np.all(tape.attn == 1.0)
    np.testing.assert_allclose(tape.attn @ tape.v, np.tile(p.wv @ Y.reshape(8), (6, 1)), atol=1e-14)


def test_matches_loop_oracle(rng):
    p = CrParams.init(8, rng)
    X = rng.normal(size=(4, 4, 8))
    Y = rng.normal(size=(2, 2, 8))
    out, tape = block_forward(p, X, Y)
    ref, rows = naive_block(p, X, Y)
    assert np.abs(tape.attn.sum(axis=1) - 1).max() < 1e-12
    np.testing.assert_allclose(tape.attn, rows, atol=1e-12)
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_softmax_rows_stable():
    a = softmax_rows(np.array([[1000.0, 1000.0], [-1000.0, 0.0]]))
    np.testing.assert_allclose(a, [[0.5, 0.5], [0.0, 1.0]], atol=1e-12)


def test_both_mode_uses_two_blocks(rng):
    params = {"hand": CrParams.init(4, rng), "object": CrParams.init(4, rng)}
    query = {"hand": rng.normal(size=(2, 2, 4)), "object": rng.normal(size=(2, 2, 4))}
    ctx = rng.normal(size=(2, 2, 4))
    out, _ = cr_forward(params, query, ctx, QueryMode.BOTH)
    for role in ("hand", "object"):
        np.testing.assert_array_equal(out[role], block_forward(params[role], query[role], ctx)[0])


def test_zero_upstream_gives_zero_gradients(rng):
    p = CrParams.init(4, rng)
    _, tape = block_forward(p, rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 2, 4)))
    grads, dx, dy = cr_backward(tape, np.zeros((2, 2, 4)))
    assert all(not np.any(g) for _, g in grads.items())
    assert not np.any(dx) and not np.any(dy)


def test_identity_jacobian_with_zero_weights(rng):
    X = rng.normal(size=(2, 2, 4))
    _, tape = block_forward(zero_params(4), X, rng.normal(size=(2, 2, 4)))
    up = rng.normal(size=X.shape)
    _, dx, dy = cr_backward(tape, up)
    np.testing.assert_array_equal(dx, up)
    assert not np.any(dy)


def test_backward_against_plain_central_differences(rng):
    # a handful of coordinates through an independent scalar loop
    p = CrParams.init(4, rng)
    X = rng.normal(size=(2, 2, 4))
    Y = rng.normal(size=(2, 1, 4))
    up = rng.normal(size=X.shape)
    _, tape = block_forward(p, X, Y)
    grads, dx, dy = cr_backward(tape, up)

    def loss(pp, xx, yy):
        return float(np.sum(up * block_forward(pp, xx, yy)[0]))

    h = 1e-6
    for name in ("wq", "wk", "wv", "w1", "b2", "ln_gain"):
        arr = getattr(p, name)
        idx = tuple(rng.integers(s) for s in arr.shape)
        plus = CrParams(**{n: a.copy() for n, a in p.items()})
        minus = CrParams(**{n: a.copy() for n, a in p.items()})
        getattr(plus, name)[idx] += h
        getattr(minus, name)[idx] -= h
        num = (loss(plus, X, Y) - loss(minus, X, Y)) / (2 * h)
        assert getattr(grads, name)[idx] == pytest.approx(num, rel=1e-5, abs=1e-7)
    for grad, which in ((dx, 0), (dy, 1)):
        base = [X, Y]
        arr = base[which]
        idx = tuple(rng.integers(s) for s in arr.shape)
        e = np.zeros_like(arr)
        e[idx] = h
        args_p = [b + e if k == which else b for k, b in enumerate(base)]
        args_m = [b - e if k == which else b for k, b in enumerate(base)]
        num = (loss(p, *args_p) - loss(p, *args_m)) / (2 * h)
        assert grad[idx] == pytest.approx(num, rel=1e-5, abs=1e-7)


@pytest.mark.parametrize("mode", list(QueryMode))
def test_gradcheck_small(mode, rng):
    shape = (3, 3, 6)
    if mode is QueryMode.BOTH:
        params = {r: CrParams.init(6, rng) for r in ("hand", "object")}
        query = {r: rng.normal(size=shape) for r in ("hand", "object")}
    else:
        params = CrParams.init(6, rng)
        query = rng.normal(size=shape)
    report = gradcheck(params, query, rng.normal(size=(2, 2, 6)), mode, rng=rng)
    assert max(report.values()) < 1e-4
    assert "context" in report


def test_named_tensor_round_trip(rng):
    p = CrParams.init(4, rng)
    doc = json.loads(json.dumps(p.to_named_tensors("object.")))
    q = CrParams.from_named_tensors(doc, "object.")
    for (n, a), (_, b) in zip(p.items(), q.items()):
        np.testing.assert_array_equal(a, b, err_msg=n)


def test_shape_validation(rng):
    p = CrParams.init(4, rng)
    with pytest.raises(DimensionMismatch):
        CrParams(**{**dict(p.items()), "b1": np.zeros(3)})
    with pytest.raises(DimensionMismatch):
        block_forward(p, rng.normal(size=(2, 2, 5)), rng.normal(size=(2, 2, 4)))
    with pytest.raises(ValueError):
        QueryMode.parse("x+")
    assert QueryMode.parse("H+O+") is QueryMode.BOTH
