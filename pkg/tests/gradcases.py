"""Randomized finite-difference cases for every differentiable op.

Each case builds float64 inputs for one shape and a scalar function of
them; the scalar is a fixed random projection of the op output so the
whole Jacobian is exercised. The numeric side uses ``oracles.central_diff``.
"""

import numpy as np
import torch

from eeg2text import autodiff as ad

from oracles import central_diff, rel_error

EPS = 1e-5
FLOOR = 1e-7


def _t(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)
    return torch.from_numpy(x)


def _projected(op, rng, out_shape):
    r = torch.from_numpy(rng.standard_normal(out_shape))
    return lambda *xs: (op(*xs) * r).sum()


def fd_relative_error(fn, inputs):
    """Max relative error of autograd grads of scalar ``fn(*inputs)`` vs central differences."""
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    ad.backward(fn(*leaves), leaves)
    arrays = [x.detach().numpy().copy() for x in inputs]

    def f():
        with torch.no_grad():
            return float(fn(*[torch.from_numpy(a) for a in arrays]))

    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        numeric = central_diff(f, arr, EPS)
        worst = max(worst, rel_error(leaf.grad.numpy(), numeric, FLOOR))
    return worst


def _attn(n_heads, causal, cross, bk):
    # the key bias shifts every score of a query equally, so its true gradient
    # is identically zero and a relative check on it only measures noise
    def op(q, kv, wq, wk, wv, wo, bq, bv, bo):
        w = ad.AttentionWeights(wq, wk, wv, wo, bq, bk, bv, bo)
        return ad.multi_head_attention(q, kv if cross else q, kv if cross else q, w, n_heads, causal)
    return op


def _case(name, rng, shape):
    """Return ``(fn, inputs)`` for op ``name`` at size variant ``shape`` (0, 1 or 2)."""
    s = shape
    if name in ("add", "mul"):
        dims = [(3,), (2, 4), (2, 3, 2)][s]
        a, b = _t(rng, *dims), _t(rng, *dims)
        op = ad.add if name == "add" else ad.mul
        return _projected(op, rng, dims), [a, b]
    if name == "matmul":
        m, k, n = [(2, 3, 4), (5, 2, 3), (1, 6, 2)][s]
        return _projected(ad.matmul, rng, (m, n)), [_t(rng, m, k), _t(rng, k, n)]
    if name == "transpose":
        dims = [(2, 3), (4, 1), (2, 3, 4)][s]
        return _projected(ad.transpose, rng, dims[:-2] + dims[-2:][::-1]), [_t(rng, *dims)]
    if name == "reshape":
        dims, new = [((2, 6), (3, 4)), ((12,), (2, 2, 3)), ((2, 3, 2), (6, 2))][s]
        return _projected(lambda x: ad.reshape(x, new), rng, new), [_t(rng, *dims)]
    if name in ("softmax", "log_softmax"):
        dims = [(5,), (3, 4), (2, 3, 6)][s]
        op = ad.softmax if name == "softmax" else ad.log_softmax
        return _projected(op, rng, dims), [_t(rng, *dims)]
    if name == "layer_norm":
        dims = [(4,), (3, 5), (2, 2, 8)][s]
        d = dims[-1]
        return _projected(ad.layer_norm, rng, dims), [_t(rng, *dims), _t(rng, d), _t(rng, d)]
    if name in ("gelu", "relu"):
        dims = [(6,), (3, 4), (2, 3, 3)][s]
        op = ad.gelu if name == "gelu" else ad.relu
        return _projected(op, rng, dims), [_t(rng, *dims, away_from_zero=True)]
    if name == "embedding_lookup":
        v, d, ids = [(5, 3, [0, 2, 2]), (7, 4, [6, 1, 0, 1, 3]), (3, 2, [1])][s]
        return _projected(lambda tab: ad.embedding_lookup(tab, ids), rng, (len(ids), d)), [_t(rng, v, d)]
    if name == "linear":
        n, i, o = [(3, 4, 2), (1, 5, 5), (4, 2, 3)][s]
        return _projected(ad.linear, rng, (n, o)), [_t(rng, n, i), _t(rng, o, i), _t(rng, o)]
    if name == "conv1d":
        c_in, t, c_out, k, st = [(4, 20, 3, 5, 1), (2, 12, 3, 4, 4), (3, 11, 2, 3, 2)][s]
        t_out = (t - k) // st + 1
        op = lambda x, w, b: ad.conv1d(x, w, b, stride=st)  # noqa: E731
        return _projected(op, rng, (c_out, t_out)), [_t(rng, c_in, t), _t(rng, c_out, c_in, k), _t(rng, c_out)]
    if name == "conv_transpose1d":
        c_in, t, c_out, k, st = [(3, 4, 2, 5, 5), (2, 3, 3, 4, 2), (4, 2, 1, 3, 1)][s]
        t_out = (t - 1) * st + k
        op = lambda x, w, b: ad.conv_transpose1d(x, w, b, stride=st)  # noqa: E731
        return _projected(op, rng, (c_out, t_out)), [_t(rng, c_in, t), _t(rng, c_in, c_out, k), _t(rng, c_out)]
    if name == "conv2d":
        c_in, h, w_, c_out, kh, kw, st = [(1, 5, 6, 2, 3, 3, (1, 1)), (2, 6, 6, 2, 2, 2, (2, 2)),
                                          (3, 4, 7, 1, 2, 3, (1, 2))][s]
        out = (c_out, (h - kh) // st[0] + 1, (w_ - kw) // st[1] + 1)
        op = lambda x, w, b: ad.conv2d(x, w, b, stride=st)  # noqa: E731
        return _projected(op, rng, out), [_t(rng, c_in, h, w_), _t(rng, c_out, c_in, kh, kw), _t(rng, c_out)]
    if name.startswith("attention"):
        causal, cross = name.endswith("causal"), name.endswith("cross")
        lq, lk, d, h = [(4, 4, 8, 2), (3, 5, 4, 1), (2, 3, 6, 3)][s]
        if not cross:
            lk = lq
        ws = [_t(rng, d, d) * 0.5 for _ in range(4)] + [_t(rng, d) * 0.1 for _ in range(3)]
        bk = _t(rng, d) * 0.1
        return _projected(_attn(h, causal, cross, bk), rng, (lq, d)), [_t(rng, lq, d), _t(rng, lk, d), *ws]
    if name == "cross_entropy":
        n, v = [(4, 5), (2, 3), (6, 7)][s]
        targets = rng.integers(0, v, size=n)
        targets[0] = 0  # one ignored PAD position
        if n > 1:
            targets[1] = 1
        return (lambda logits: ad.cross_entropy(logits, targets)), [_t(rng, n, v)]
    if name == "mse":
        dims = [(4,), (2, 3), (3, 2, 2)][s]
        return ad.mse, [_t(rng, *dims), _t(rng, *dims)]
    raise KeyError(name)


OPS = ("add", "mul", "matmul", "transpose", "reshape", "softmax", "log_softmax", "layer_norm", "gelu", "relu",
       "embedding_lookup", "linear", "conv1d", "conv_transpose1d", "conv2d", "attention", "attention_causal",
       "attention_cross", "cross_entropy", "mse")


def op_error(name, variant, seed=0):
    rng = np.random.default_rng([seed, OPS.index(name), variant])
    fn, inputs = _case(name, rng, variant)
    return fd_relative_error(fn, inputs)


# ---------------------------------------------------------------- end-to-end

def micro_setup(multiview=False, seed=0):
    """d_model=8 encoder-decoder on a 4-channel, 40-sample recording (float64)."""
    from eeg2text.data import EEGRecording
    from eeg2text.models import ConvConfig, EEG2Text, ModelConfig
    from eeg2text.regions import ChannelPartition

    labels = ("A1", "A2", "B1", "B2")
    part = ChannelPartition((("A", ("A1", "A2")), ("B", ("B1", "B2")))) if multiview else None
    cfg = ModelConfig(vocab_size=7, channel_labels=labels, d_model=8, n_heads=2, n_encoder_layers=1,
                      n_decoder_layers=1, n_global_layers=1, conv=ConvConfig(k1=5, s1=5, c1=3, k2=2, s2=2),
                      patch_len=10, max_text_len=6, partition=part)
    model = EEG2Text(cfg, seed=seed, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for p in model.parameters():  # move zero-initialised biases off zero
            p.add_(torch.from_numpy(rng.standard_normal(tuple(p.shape))) * 0.05)
    rec = EEGRecording("micro", labels, 100.0, rng.standard_normal((4, 40)))
    return model, rec, [1, 4, 5, 6], [4, 5, 6, 2]


def micro_model_errors(multiview=False, seed=0):
    """Per-parameter relative error of the teacher-forced loss gradient.

    Returns ``(errors, key_bias_grads)``: attention key biases have an
    identically zero true gradient, so they are reported as absolute values
    instead of relative errors.
    """
    model, rec, inp, tgt = micro_setup(multiview, seed)

    def loss():
        return ad.cross_entropy(model.decode_text(model.encode(rec), inp), tgt)

    params = dict(model.named_parameters())
    model.zero_grad()
    ad.backward(loss(), params.values())
    errors, key_bias = {}, {}
    for name, p in params.items():
        if name.endswith(".bk"):
            key_bias[name] = float(p.grad.abs().max())
            continue
        arr = p.data.numpy()  # shares memory with the parameter

        def f():
            with torch.no_grad():
                return float(loss())

        errors[name] = rel_error(p.grad.numpy(), central_diff(f, arr, EPS), FLOOR)
    return errors, key_bias
