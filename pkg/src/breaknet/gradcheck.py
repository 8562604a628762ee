"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


class NonFiniteError(ArithmeticError):
    pass


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over ``inputs`` of |analytic - numeric| / max(1, |numeric|).

    ``f`` is called without arguments and must read the current values of
    ``inputs``; it has to be deterministic.  ``max_entries`` limits the
    number of probed elements per input (sampled with ``rng``).
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("function returned a non-finite value")
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                rng = rng or np.random.default_rng(0)
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for k in idx:
                orig = flat[k]
                flat[k] = orig + eps
                fp = float(f().data.sum())
                flat[k] = orig - eps
                fm = float(f().data.sum())
                flat[k] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("function returned a non-finite value under perturbation")
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(float(ga.reshape(-1)[k]) - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# the finite-difference suite behind ``breaknet gradcheck``
# ---------------------------------------------------------------------------

OP_TOL = 1e-5
BLOCK_TOL = 1e-5
MODEL_TOL = 1e-4


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    from . import ops
    return ops.sum(ops.mul(out, weights))


def _leaf(rng, *shape, low=None):
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, low + 1.0, shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def op_cases(rng: np.random.Generator) -> list:
    """(name, inputs, fn) triples; fn maps the inputs to an output tensor."""
    from . import ops
    from .training import dice_loss, one_hot

    cases = []

    def add_case(name, inputs, fn):
        cases.append((name, inputs, fn))

    for shape in [(3,), (2, 3), (2, 3, 4)]:
        add_case(f"add{shape}", [_leaf(rng, *shape), _leaf(rng, *shape[-1:])], lambda a, b: ops.add(a, b))
        add_case(f"sub{shape}", [_leaf(rng, *shape), _leaf(rng, *shape)], lambda a, b: ops.sub(a, b))
        add_case(f"mul{shape}", [_leaf(rng, *shape), _leaf(rng, *shape)], lambda a, b: ops.mul(a, b))
        add_case(f"div{shape}", [_leaf(rng, *shape), _leaf(rng, *shape, low=0.5)], lambda a, b: ops.div(a, b))
        add_case(f"scale{shape}", [_leaf(rng, *shape)], lambda a: ops.scale(a, -1.7))
        add_case(f"exp{shape}", [_leaf(rng, *shape)], lambda a: ops.exp(a))
        add_case(f"log{shape}", [_leaf(rng, *shape, low=0.5)], lambda a: ops.log(a))
        add_case(f"sum{shape}", [_leaf(rng, *shape)], lambda a: ops.sum(a, axis=-1))
        add_case(f"mean{shape}", [_leaf(rng, *shape)], lambda a: ops.mean(a, axis=0, keepdims=True))
        add_case(f"leaky_relu{shape}", [_leaf(rng, *shape)], lambda a: ops.leaky_relu(a))
        add_case(f"gelu{shape}", [_leaf(rng, *shape)], lambda a: ops.gelu(a))
        add_case(f"reshape{shape}", [_leaf(rng, *shape)], lambda a: ops.reshape(a, (-1,)))
        add_case(f"dropout{shape}", [_leaf(rng, *shape)],
                 lambda a: ops.dropout(a, 0.3, True, np.random.default_rng(7)))
    for shape in [(2, 3), (2, 3, 4), (1, 4, 3, 2)]:
        add_case(f"transpose{shape}", [_leaf(rng, *shape)], lambda a: ops.transpose(a))
        add_case(f"softmax{shape}", [_leaf(rng, *shape)], lambda a: ops.softmax(a, axis=1))
        add_case(f"softmax_canonical{shape}", [_leaf(rng, *shape)], lambda a: ops.softmax(a, axis=1, canonical=True))
        add_case(f"concat{shape}", [_leaf(rng, *shape), _leaf(rng, *shape)],
                 lambda a, b: ops.concat([a, b], axis=1))
    for m, k, n in [(2, 3, 4), (1, 5, 2), (3, 3, 3)]:
        add_case(f"matmul({m}x{k}@{k}x{n})", [_leaf(rng, m, k), _leaf(rng, k, n)], lambda a, b: ops.matmul(a, b))
    for lead, t, da, db in [((), 5, 2, 3), ((2,), 4, 3, 3), ((2, 1), 6, 1, 2)]:
        add_case(f"contract_tokens({lead},{t},{da},{db})", [_leaf(rng, *lead, t, da), _leaf(rng, *lead, t, db)],
                 lambda a, b: ops.contract_tokens(a, b))
    add_case("matmul(batched)", [_leaf(rng, 2, 3, 4, 2), _leaf(rng, 2, 3, 2, 3)], lambda a, b: ops.matmul(a, b))
    conv_specs = [
        ("conv2d(general,3x3)", (2, 3, 6, 5), (4, 3, 3, 3), 1, 1, 1),
        ("conv2d(general,stride2)", (1, 2, 7, 6), (3, 2, 3, 3), 2, 1, 1),
        ("conv2d(grouped)", (2, 4, 5, 5), (4, 2, 3, 3), 1, 1, 2),
        ("conv2d(depthwise,3x3,s2)", (2, 3, 8, 8), (3, 1, 3, 3), 2, 1, 3),
        ("conv2d(depthwise,5x5)", (1, 2, 6, 7), (2, 1, 5, 5), 1, 2, 2),
        ("conv2d(pointwise)", (2, 3, 4, 5), (5, 3, 1, 1), 1, 0, 1),
    ]
    for name, xs, ws, stride, pad, groups in conv_specs:
        add_case(name, [_leaf(rng, *xs), _leaf(rng, *ws), _leaf(rng, ws[0])],
                 lambda x, w, b, s=stride, p=pad, g=groups: ops.conv2d(x, w, b, s, p, g))
    for shape, k, s, p in [((1, 2, 5, 5), 3, 1, 1), ((2, 1, 4, 6), 2, 2, 0), ((1, 3, 6, 6), 3, 2, 1)]:
        add_case(f"avg_pool2d{shape}k{k}", [_leaf(rng, *shape)], lambda a, k=k, s=s, p=p: ops.avg_pool2d(a, k, s, p))
    for shape, th, tw in [((1, 2, 2, 2), 4, 4), ((2, 1, 3, 5), 6, 10), ((1, 2, 4, 4), 3, 7)]:
        add_case(f"bilinear{shape}->{th}x{tw}", [_leaf(rng, *shape)],
                 lambda a, th=th, tw=tw: ops.bilinear_upsample(a, th, tw))
    for shape in [(2, 3, 4, 4), (1, 5, 3, 2), (3, 2, 1, 1)]:
        c = shape[1]
        add_case(f"layer_norm{shape}", [_leaf(rng, *shape), _leaf(rng, c), _leaf(rng, c)],
                 lambda x, g, b: ops.layer_norm(x, g, b))
        add_case(f"batch_norm_train{shape}", [_leaf(rng, *shape), _leaf(rng, c), _leaf(rng, c)],
                 lambda x, g, b, c=c: ops.batch_norm(x, g, b, np.zeros(c), np.ones(c), True))
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
        add_case(f"batch_norm_eval{shape}", [_leaf(rng, *shape), _leaf(rng, c), _leaf(rng, c)],
                 lambda x, g, b, rm=rm, rv=rv: ops.batch_norm(x, g, b, rm.copy(), rv.copy(), False))
    for shape in [(2, 3, 4, 4), (1, 2, 3, 5), (2, 4, 2, 2)]:
        target = one_hot(rng.integers(0, shape[1], (shape[0],) + shape[2:]), shape[1], np.float64)
        logits = _leaf(rng, *shape)
        add_case(f"dice_loss{shape}", [logits],
                 lambda z, t=target: dice_loss(ops.softmax(z, axis=1), t))
    return cases


def block_cases(rng: np.random.Generator) -> list:
    from . import model as M

    cfg = M.ModelConfig(encoder_channels=(8, 8, 8, 8), stem_channels=8, decoder_width=8, dropout=0.0)
    cases = []

    def params_of(mod):
        return mod.parameters()

    def mk(name, mod, x_shape, call):
        mod.to_dtype(np.float64)
        x = _leaf(rng, *x_shape)
        cases.append((name, [x] + params_of(mod), lambda x, *_, mod=mod: call(mod, x)))

    r = np.random.default_rng(int(rng.integers(1 << 31)))
    mk("stem", M.Stem(1, 3, r), (2, 1, 6, 6), lambda m, x: m(x))
    mk("patch_embed(k=5)", M.PatchEmbed(3, 5, r), (1, 3, 8, 8), lambda m, x: m(x))
    mk("cnn_block", M.CNNBlock(3, r), (2, 3, 4, 4), lambda m, x: m(x))
    tb_pl = M.TransBlock(4, "PL", 2.0, 1, 0.0, r)
    mk("trans_block(PL)", tb_pl, (2, 4, 4, 4), lambda m, x: m(x))
    tb_fa = M.TransBlock(4, "FA", 2.0, 2, 0.0, r)
    mk("trans_block(FA,2 heads)", tb_fa, (2, 4, 4, 4), lambda m, x: m(x))
    mk("msfe", M.MSFE(8, 10, cfg, r), (2, 8, 8, 8), lambda m, x: m(x))
    dec = M.DecBlock(3, 5, r)
    lateral = _leaf(rng, 2, 3, 8, 8)
    dec.to_dtype(np.float64)
    x = _leaf(rng, 2, 3, 4, 4)
    cases.append(("dec_block", [x, lateral] + dec.parameters(), lambda x, lat, *_: dec(x, lat)))
    return cases


def tiny_model(seed: int = 0):
    from .model import BreakNet, ModelConfig
    cfg = ModelConfig(encoder_channels=(2, 2, 2, 2), stem_channels=2, decoder_width=2, dropout=0.0)
    return BreakNet(cfg, seed=seed, dtype=np.float64)


def model_case(seed: int = 0):
    """Full tiny BreakNet (train-mode BN) under the deep-supervision Dice loss."""
    from .training import deep_supervision_loss, one_hot

    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    # heads start at zero, which would zero every upstream gradient
    for dec in model.decoders:
        dec.head.weight.data[...] = rng.uniform(-1.0, 1.0, dec.head.weight.shape)
    model.train()
    image = Tensor(rng.random((2, 1, 16, 16)), dtype=np.float64)
    target = one_hot(rng.integers(0, model.config.num_classes, (2, 16, 16)), model.config.num_classes, np.float64)

    def f():
        main, aux = model(image)
        return deep_supervision_loss(main, aux, target)

    return model, f


def check_case(inputs, fn, rng, eps=1e-4) -> float:
    out_shape = fn(*inputs).shape
    weights = rng.standard_normal(out_shape)
    return grad_check(lambda: _weighted(fn(*inputs), weights), inputs, eps)


def run_suite(scope: str = "op", seed: int = 0, report: Callable[[str, float, float], None] | None = None):
    """Run the finite-difference checks for ``scope`` (op, block or model).

    Returns a list of (target, max relative error, tolerance).
    """
    if scope not in ("op", "block", "model"):
        raise ValueError(f"unknown scope {scope!r}")
    rng = np.random.default_rng(seed)
    results = []

    def record(name, err, tol):
        results.append((name, err, tol))
        if report is not None:
            report(name, err, tol)

    if scope == "op":
        for name, inputs, fn in op_cases(rng):
            record(name, check_case(inputs, fn, rng), OP_TOL)
    elif scope == "block":
        for name, inputs, fn in block_cases(rng):
            record(name, check_case(inputs, fn, rng), BLOCK_TOL)
    else:
        model, f = model_case(seed)
        record("breaknet(tiny)", grad_check(f, model.parameters()), MODEL_TOL)
    return results
