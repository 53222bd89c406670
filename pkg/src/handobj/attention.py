"""Contextual reasoning block: single-head cross-attention plus a feed-forward
residual, with a hand-written backward pass.

Feature maps are ``(H, W, C)`` float64 arrays. Per-position linear maps
(the 1x1 "1-D convolutions") act on the channel axis as ``y = W x``.

Forward, for query map X and context map Y flattened to rows::

    Q = X Wq^T, K = Y Wk^T, V = Y Wv^T
    A = softmax(Q K^T / sqrt(C))          # one row per query position
    Q' = X + A V
    out = Q' + relu(LN(Q') W1 + b1) W2 + b2
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionMismatch

LN_EPS = 1e-5
HIDDEN_RATIO = 4


class QueryMode(enum.Enum):
    OBJECT = "o+"  # object features query the intersection region
    HAND = "h+"
    BOTH = "h+o+"  # two independently parameterised blocks

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        for mode in cls:
            if text in (mode.value, mode.name.lower()):
                return mode
        raise ValueError(f"unknown query mode {text!r}")


@dataclass
class CrParams:
    wq: np.ndarray  # (C, C)
    wk: np.ndarray  # (C, C)
    wv: np.ndarray  # (C, C)
    w1: np.ndarray  # (C, Ch)
    b1: np.ndarray  # (Ch,)
    w2: np.ndarray  # (Ch, C)
    b2: np.ndarray  # (C,)
    ln_gain: np.ndarray  # (C,)
    ln_bias: np.ndarray  # (C,)

    def __post_init__(self):
        for f in fields(self):
            a = np.asarray(getattr(self, f.name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {f.name} is not finite")
            setattr(self, f.name, a)
        C = self.wq.shape[0]
        Ch = self.w1.shape[1] if self.w1.ndim == 2 else -1
        expected = {
            "wq": (C, C), "wk": (C, C), "wv": (C, C), "w1": (C, Ch), "b1": (Ch,),
            "w2": (Ch, C), "b2": (C,), "ln_gain": (C,), "ln_bias": (C,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def channels(self):
        return self.wq.shape[0]

    @classmethod
    def init(cls, channels, rng, hidden=None, scale=None):
        """Random initialisation; LayerNorm starts near identity."""
        hidden = hidden or HIDDEN_RATIO * channels
        scale = scale if scale is not None else 1.0 / np.sqrt(channels)
        return cls(
            wq=rng.normal(scale=scale, size=(channels, channels)),
            wk=rng.normal(scale=scale, size=(channels, channels)),
            wv=rng.normal(scale=scale, size=(channels, channels)),
            w1=rng.normal(scale=scale, size=(channels, hidden)),
            b1=rng.normal(scale=0.1, size=hidden),
            w2=rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, channels)),
            b2=rng.normal(scale=0.1, size=channels),
            ln_gain=1.0 + rng.normal(scale=0.1, size=channels),
            ln_bias=rng.normal(scale=0.1, size=channels),
        )

    @classmethod
    def zeros_like(cls, other):
        return cls(**{f.name: np.zeros_like(getattr(other, f.name)) for f in fields(cls)})

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def to_named_tensors(self, prefix=""):
        return {prefix + name: {"shape": list(a.shape), "values": a.reshape(-1).tolist()} for name, a in self.items()}

    @classmethod
    def from_named_tensors(cls, doc, prefix=""):
        kwargs = {}
        for f in fields(cls):
            entry = doc[prefix + f.name]
            kwargs[f.name] = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        return cls(**kwargs)


@dataclass
class GradTape:
    """Activations recorded by :func:`block_forward` for the backward pass."""

    params: CrParams
    query: np.ndarray
    context: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    fused: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    ln_out: np.ndarray
    pre_act: np.ndarray
    hidden: np.ndarray
    output: np.ndarray

    def replay(self):
        return block_forward(self.params, self.query, self.context)[0]


def _flat(feat, name):
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 3 or min(feat.shape) < 1:
        raise DimensionMismatch(f"{name} must be an (H, W, C) map, got shape {feat.shape}")
    if not np.all(np.isfinite(feat)):
        raise ValueError(f"{name} is not finite")
    return feat, feat.reshape(-1, feat.shape[2])


def softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std


def block_forward(params: CrParams, query_feat, context_feat):
    """One attention + feed-forward block. Returns ``(output map, tape)``."""
    query_feat, X = _flat(query_feat, "query_feat")
    context_feat, Y = _flat(context_feat, "context_feat")
    C = params.channels
    if X.shape[1] != C or Y.shape[1] != C:
        raise DimensionMismatch(
            f"channel mismatch: params C={C}, query C={X.shape[1]}, context C={Y.shape[1]}")
    q = X @ params.wq.T
    k = Y @ params.wk.T
    v = Y @ params.wv.T
    attn = softmax_rows(q @ k.T / np.sqrt(C))
    fused = X + attn @ v
    ln_out, xhat, inv_std = layer_norm(fused, params.ln_gain, params.ln_bias)
    pre_act = ln_out @ params.w1 + params.b1
    hidden = np.maximum(pre_act, 0.0)
    out = fused + hidden @ params.w2 + params.b2
    out_map = out.reshape(query_feat.shape)
    tape = GradTape(params, query_feat, context_feat, q, k, v, attn, fused, xhat, inv_std,
                    ln_out, pre_act, hidden, out_map)
    return out_map, tape


def block_backward(tape: GradTape, upstream):
    """Gradients of ``sum(upstream * output)``.

    Returns ``(param_grads, d_query, d_context)``.
    """
    p = tape.params
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape != tape.output.shape:
        raise DimensionMismatch(f"upstream shape {G.shape} != output shape {tape.output.shape}")
    G = G.reshape(-1, p.channels)
    X = tape.query.reshape(-1, p.channels)
    Y = tape.context.reshape(-1, p.channels)
    C = p.channels

    d_b2 = G.sum(axis=0)
    d_w2 = tape.hidden.T @ G
    d_pre = (G @ p.w2.T) * (tape.pre_act > 0)
    d_b1 = d_pre.sum(axis=0)
    d_w1 = tape.ln_out.T @ d_pre
    d_ln = d_pre @ p.w1.T
    d_gain = np.sum(d_ln * tape.xhat, axis=0)
    d_bias = d_ln.sum(axis=0)
    d_xhat = d_ln * p.ln_gain
    d_fused = G + tape.inv_std * (
        d_xhat - d_xhat.mean(axis=1, keepdims=True)
        - tape.xhat * np.mean(d_xhat * tape.xhat, axis=1, keepdims=True))

    d_X = d_fused.copy()
    d_attn = d_fused @ tape.v.T
    d_v = tape.attn.T @ d_fused
    d_logits = tape.attn * (d_attn - np.sum(d_attn * tape.attn, axis=1, keepdims=True))
    d_logits /= np.sqrt(C)
    d_q = d_logits @ tape.k
    d_k = d_logits.T @ tape.q

    d_wq = d_q.T @ X
    d_wk = d_k.T @ Y
    d_wv = d_v.T @ Y
    d_X += d_q @ p.wq
    d_Y = d_k @ p.wk + d_v @ p.wv

    grads = CrParams(d_wq, d_wk, d_wv, d_w1, d_b1, d_w2, d_b2, d_gain, d_bias)
    return grads, d_X.reshape(tape.query.shape), d_Y.reshape(tape.context.shape)


def cr_forward(params, query_feat, context_feat, mode=QueryMode.OBJECT):
    """Run the CR module in the given query mode.

    For ``OBJECT`` and ``HAND`` the block takes a single :class:`CrParams` and
    query map. For ``BOTH`` pass dicts keyed ``"hand"`` and ``"object"`` for
    both ``params`` and ``query_feat``; outputs and tapes come back keyed the
    same way. The context is always the hand-object intersection map.
    """
    mode = QueryMode(mode)
    if mode is QueryMode.BOTH:
        outs, tapes = {}, {}
        for role in ("hand", "object"):
            outs[role], tapes[role] = block_forward(params[role], query_feat[role], context_feat)
        return outs, tapes
    return block_forward(params, query_feat, context_feat)


def cr_backward(tape, upstream, mode=QueryMode.OBJECT):
    """Backward pass matching :func:`cr_forward`.

    Returns ``(param_grads, query_grads, context_grad)``; for ``BOTH`` the
    first two are dicts and the context gradient sums both blocks.
    """
    mode = QueryMode(mode)
    if mode is QueryMode.BOTH:
        pg, qg = {}, {}
        d_ctx = 0.0
        for role in ("hand", "object"):
            pg[role], qg[role], dc = block_backward(tape[role], upstream[role])
            d_ctx = d_ctx + dc
        return pg, qg, d_ctx
    return block_backward(tape, upstream)


# ---------------------------------------------------------------------------
# Finite-difference check
# ---------------------------------------------------------------------------

_PARAM_NAMES = ("wq", "wk", "wv", "w1", "b1", "w2", "b2", "ln_gain", "ln_bias")


def _batched_block(v):
    """Forward on flattened arrays that may carry a leading batch axis.

    Returns ``(output rows, relu mask)``; used only by the gradient checker so
    many perturbed copies run in one vectorised call.
    """
    T = lambda m: np.swapaxes(m, -1, -2)  # noqa: E731
    C = v["wq"].shape[-1]
    q = v["query"] @ T(v["wq"])
    k = v["context"] @ T(v["wk"])
    val = v["context"] @ T(v["wv"])
    logits = q @ T(k) / np.sqrt(C)
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    attn = z / z.sum(axis=-1, keepdims=True)
    fused = v["query"] + attn @ val
    mu = fused.mean(axis=-1, keepdims=True)
    var = ((fused - mu) ** 2).mean(axis=-1, keepdims=True)
    ln = (fused - mu) / np.sqrt(var + LN_EPS) * v["ln_gain"][..., None, :] + v["ln_bias"][..., None, :]
    pre = ln @ v["w1"] + v["b1"][..., None, :]
    out = fused + np.maximum(pre, 0.0) @ v["w2"] + v["b2"][..., None, :]
    return out, pre > 0


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _numeric_grad(variables, name, upstream, step, batch):
    """Central differences of ``sum(upstream * out)`` w.r.t. ``variables[name]``.

    Where a perturbation flips a ReLU (the point sits within one step of a
    kink) the derivative of the branch the point lies on is taken with the
    one-sided second-order formula from the non-crossing side.
    """
    base = variables[name]
    _, base_mask = _batched_block(variables)
    n = base.size
    grad = np.empty(n)

    def evaluate(idx, offset):
        stack = np.repeat(base[None], len(idx), axis=0)
        stack.reshape(len(idx), -1)[np.arange(len(idx)), idx] += offset
        out, mask = _batched_block({**variables, name: stack})
        loss = np.sum(upstream * out, axis=(-2, -1))
        flipped = np.any(mask != base_mask, axis=(-2, -1))
        return loss, flipped

    for start in range(0, n, batch):
        idx = np.arange(start, min(start + batch, n))
        fp, xp = evaluate(idx, step)
        fm, xm = evaluate(idx, -step)
        g = (fp - fm) / (2 * step)
        kinked = np.flatnonzero(xp | xm)
        if len(kinked):
            f0 = float(np.sum(upstream * _batched_block(variables)[0]))
            for i in kinked:
                sign = -1.0 if xp[i] else 1.0
                f1, _ = evaluate(idx[i:i + 1], sign * step)
                f2, _ = evaluate(idx[i:i + 1], 2 * sign * step)
                g[i] = sign * (-3 * f0 + 4 * f1[0] - f2[0]) / (2 * step)
        grad[idx] = g
    return grad.reshape(base.shape)


def gradcheck(params, query_feat, context_feat, mode=QueryMode.OBJECT, upstream=None, step=1e-5,
              rng=None, batch=256):
    """Compare every analytic gradient coordinate against finite differences.

    The scalar loss is ``sum(upstream * output)`` with a random upstream if
    none is given. Returns a dict ``name -> max relative error``.

    Central differences carry roundoff of order ``eps * |loss| / step``, so
    the relative error uses ``1e-5 * max(1, |loss|)`` as its denominator floor;
    gradients below that are compared at that absolute scale.
    """
    mode = QueryMode(mode)
    rng = rng if rng is not None else np.random.default_rng(0)
    out, tape = cr_forward(params, query_feat, context_feat, mode)
    if upstream is None:
        if mode is QueryMode.BOTH:
            upstream = {r: rng.normal(size=o.shape) for r, o in out.items()}
        else:
            upstream = rng.normal(size=out.shape)
    pgrads, qgrads, cgrad = cr_backward(tape, upstream, mode)
    if mode is QueryMode.BOTH:
        total = sum(float(np.sum(upstream[r] * out[r])) for r in out)
    else:
        total = float(np.sum(upstream * out))
    floor = 1e-5 * max(1.0, abs(total))
    rel = lambda a, n: float(relative_error(a, n, floor).max())  # noqa: E731

    roles = ("hand", "object") if mode is QueryMode.BOTH else (None,)
    pick = (lambda d, r: d[r]) if mode is QueryMode.BOTH else (lambda d, r: d)  # noqa: E731
    ctx = np.asarray(context_feat, dtype=np.float64)
    C = ctx.shape[-1]
    report = {}
    d_ctx_numeric = 0.0
    for role in roles:
        prm = pick(params, role)
        qf = np.asarray(pick(query_feat, role), dtype=np.float64)
        up = np.asarray(pick(upstream, role)).reshape(-1, C)
        variables = {n: getattr(prm, n) for n in _PARAM_NAMES}
        variables["query"] = qf.reshape(-1, C)
        variables["context"] = ctx.reshape(-1, C)
        tag = f"{role}." if role else ""
        pg = pick(pgrads, role)
        for n in _PARAM_NAMES:
            num = _numeric_grad(variables, n, up, step, batch)
            report[tag + n] = rel(getattr(pg, n), num)
        num = _numeric_grad(variables, "query", up, step, batch).reshape(qf.shape)
        report[tag + "query"] = rel(pick(qgrads, role), num)
        d_ctx_numeric = d_ctx_numeric + _numeric_grad(variables, "context", up, step, batch)
    report["context"] = rel(cgrad, d_ctx_numeric.reshape(ctx.shape))
    return report
