"""Finite-difference verification suites.

``op_gradcheck_suite`` exercises every differentiable primitive against
central differences over many seeds; ``hybrid_gradcheck`` differentiates
the full two-mode training loss end to end on a small model and compares
every parameter gradient (optionally on a sampled subset of coordinates,
which is enough to expose a wrong backward rule).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .data import DatasetSpec, generate_sample
from .model import ModelConfig, init_parameters, run_sample
from .objective import BatchItem, LossVariant, ModeLabel, hybrid_loss
from .tensor import Tape, Tensor, backward, finite_diff_gradcheck

GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize an op output along a fixed random direction."""
    return T.sum_all(T.mul(out, Tensor(weights)))


def op_gradcheck_suite(n_seeds: int = 20, step: float = GRADCHECK_STEP):
    """Worst relative finite-difference error per primitive, maximized
    over ``n_seeds`` random inputs."""
    results: dict[str, float] = {}

    def run(name: str, make: Callable[[np.random.Generator], tuple]):
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng(1000 + seed)
            f, x = make(rng)
            worst = max(worst, finite_diff_gradcheck(f, x, step))
        results[name] = worst

    def rnd(rng, *shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    def make_add(rng):
        other = Tensor(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))
        return (lambda x: _weighted_sum(T.add(x, other), w)), rnd(rng, 3, 4)

    def make_sub(rng):
        other = Tensor(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))
        return (lambda x: _weighted_sum(T.sub(x, other), w)), rnd(rng, 3, 4)

    def make_mul(rng):
        other = Tensor(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))
        return (lambda x: _weighted_sum(T.mul(x, other), w)), rnd(rng, 3, 4)

    def make_scale(rng):
        w = rng.standard_normal((2, 5))
        return (lambda x: _weighted_sum(T.scale(x, -1.7), w)), rnd(rng, 2, 5)

    def make_add_scalar(rng):
        w = rng.standard_normal((2, 5))
        return (lambda x: _weighted_sum(T.add_scalar(x, 0.37), w)), rnd(rng, 2, 5)

    def make_reciprocal(rng):
        w = rng.standard_normal((3, 3))
        x = Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        return (lambda x: _weighted_sum(T.reciprocal(x), w)), x

    def make_sigmoid(rng):
        w = rng.standard_normal((3, 4))
        return (lambda x: _weighted_sum(T.sigmoid(x), w)), rnd(rng, 3, 4)

    def make_gelu(rng):
        w = rng.standard_normal((2, 8))
        return (lambda x: _weighted_sum(T.gelu(x), w)), rnd(rng, 2, 8)

    def make_matmul_a(rng):
        b = Tensor(rng.standard_normal((5, 3)))
        w = rng.standard_normal((4, 3))
        return (lambda x: _weighted_sum(T.matmul(x, b), w)), rnd(rng, 4, 5)

    def make_matmul_b(rng):
        a = Tensor(rng.standard_normal((4, 5)))
        w = rng.standard_normal((4, 3))
        return (lambda x: _weighted_sum(T.matmul(a, x), w)), rnd(rng, 5, 3)

    def make_transpose(rng):
        w = rng.standard_normal((4, 3))
        return (lambda x: _weighted_sum(T.transpose(x), w)), rnd(rng, 3, 4)

    def make_add_rowvec(rng):
        v = Tensor(rng.standard_normal(4), requires_grad=True)
        m = Tensor(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))
        return (lambda x: _weighted_sum(T.add_rowvec(m, x), w)), v

    def make_slice_rows(rng):
        w = rng.standard_normal((2, 4))
        return (lambda x: _weighted_sum(T.slice_rows(x, 1, 3), w)), rnd(rng, 5, 4)

    def make_slice_cols(rng):
        w = rng.standard_normal((4, 2))
        return (lambda x: _weighted_sum(T.slice_cols(x, 1, 3), w)), rnd(rng, 4, 5)

    def make_concat_rows(rng):
        other = Tensor(rng.standard_normal((2, 4)))
        w = rng.standard_normal((5, 4))
        return (lambda x: _weighted_sum(T.concat_rows([x, other]), w)), rnd(rng, 3, 4)

    def make_concat_cols(rng):
        other = Tensor(rng.standard_normal((3, 2)))
        w = rng.standard_normal((3, 6))
        return (lambda x: _weighted_sum(T.concat_cols([x, other]), w)), rnd(rng, 3, 4)

    def make_embedding(rng):
        ids = [0, 2, 2, 1, 0]  # repeats exercise scatter accumulation
        w = rng.standard_normal((5, 6))
        return (lambda x: _weighted_sum(T.embedding_lookup(x, ids), w)), rnd(rng, 4, 6)

    def make_softmax(rng):
        w = rng.standard_normal((3, 7))
        return (lambda x: _weighted_sum(T.softmax_lastdim(x), w)), rnd(rng, 3, 7)

    def make_layer_norm_x(rng):
        gain = Tensor(rng.uniform(0.5, 1.5, 6))
        bias = Tensor(rng.standard_normal(6) * 0.1)
        w = rng.standard_normal((4, 6))
        return (lambda x: _weighted_sum(T.layer_norm(x, gain, bias), w)), rnd(rng, 4, 6)

    def make_layer_norm_gain(rng):
        x = Tensor(rng.standard_normal((4, 6)))
        bias = Tensor(np.zeros(6))
        w = rng.standard_normal((4, 6))
        g = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
        return (lambda gn: _weighted_sum(T.layer_norm(x, gn, bias), w)), g

    def make_layer_norm_bias(rng):
        x = Tensor(rng.standard_normal((4, 6)))
        gain = Tensor(np.ones(6))
        w = rng.standard_normal((4, 6))
        b = Tensor(rng.standard_normal(6) * 0.1, requires_grad=True)
        return (lambda bs: _weighted_sum(T.layer_norm(x, gain, bs), w)), b

    def make_cross_entropy(rng):
        tgt = rng.integers(0, 6, size=5).tolist()
        mask = [True, False, True, True, False]
        return (lambda x: T.cross_entropy_masked(x, tgt, mask)), rnd(rng, 5, 6)

    def make_mse_pred(rng):
        target = Tensor(rng.standard_normal((4, 3)))
        mask = [True, True, False, True]
        return (lambda x: T.masked_mean_squared_error(x, target, mask)), rnd(rng, 4, 3)

    def make_mse_target(rng):
        pred = Tensor(rng.standard_normal((4, 3)))
        mask = [True, False, True, True]
        t = rnd(rng, 4, 3)
        return (lambda x: T.masked_mean_squared_error(pred, x, mask)), t

    def make_sum(rng):
        return T.sum_all, rnd(rng, 3, 5)

    def make_attention(which, causal):
        def make(rng):
            ops = {name: Tensor(rng.standard_normal((5, 6)))
                   for name in ("q", "k", "v")}
            ops[which] = Tensor(ops[which].data, requires_grad=True)
            w = rng.standard_normal((5, 6))

            def f(x):
                ops[which] = x
                out, _ = T.multi_head_attention(ops["q"], ops["k"], ops["v"],
                                                n_heads=2, causal=causal)
                return _weighted_sum(out, w)

            return f, ops[which]
        return make

    cases = {
        "add": make_add, "sub": make_sub, "mul": make_mul,
        "scale": make_scale, "add_scalar": make_add_scalar,
        "reciprocal": make_reciprocal, "sigmoid": make_sigmoid,
        "gelu": make_gelu, "matmul_lhs": make_matmul_a,
        "matmul_rhs": make_matmul_b, "transpose": make_transpose,
        "add_rowvec": make_add_rowvec, "slice_rows": make_slice_rows,
        "slice_cols": make_slice_cols, "concat_rows": make_concat_rows,
        "concat_cols": make_concat_cols, "embedding_lookup": make_embedding,
        "softmax_lastdim": make_softmax, "layer_norm_x": make_layer_norm_x,
        "layer_norm_gain": make_layer_norm_gain,
        "layer_norm_bias": make_layer_norm_bias,
        "cross_entropy_masked": make_cross_entropy,
        "mse_pred": make_mse_pred, "mse_target": make_mse_target,
        "sum_all": make_sum,
        "attention_q": make_attention("q", causal=True),
        "attention_k": make_attention("k", causal=True),
        "attention_v": make_attention("v", causal=False),
    }
    for name, make in cases.items():
        run(name, make)
    return results


def params_gradcheck(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                     step: float = GRADCHECK_STEP, per_tensor: int = 16,
                     rng: np.random.Generator | None = None,
                     atol: float = 1e-5) -> float:
    """Finite-difference check of every parameter gradient of a scalar
    loss; samples up to ``per_tensor`` coordinates per tensor.

    ``atol`` floors the relative-error denominator: central differences
    of a loss of magnitude L carry ~L*eps/step of rounding noise (around
    1e-9 for this loss), so coordinates whose true gradient sits below
    the floor are compared absolutely instead of drowning the check in
    noise. Typical weight gradients are 1e-4..1e-1, three orders above
    the floor, so a wrong backward rule still fails loudly.
    """
    gen = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Tape():
        out = loss_fn()
    backward(out)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    for p in params.values():
        p.zero_grad()
    worst = 0.0
    for name in sorted(params):
        flat = params[name].data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        n = flat.size
        coords = (gen.choice(n, size=per_tensor, replace=False)
                  if per_tensor < n else np.arange(n))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            dn = loss_fn().item()
            flat[i] = orig
            numeric = (up - dn) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(numeric), atol)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


def micro_model_config() -> ModelConfig:
    return ModelConfig(d_model=16, n_layers=2, n_heads=2, image_side=8,
                       patch_size=4, max_seq_len=16, projector_hidden=32,
                       vision_layers=1)


def hybrid_gradcheck(variant: LossVariant, offset: int, seed: int,
                     alpha: float = 0.5, detach_target: bool = False,
                     per_tensor: int = 16, step: float = GRADCHECK_STEP) -> float:
    """End-to-end check of the two-mode training loss on a 2-layer toy
    model: one text-mode and one image-mode sample share the batch.

    Runs with ``detach_target=False`` by default: finite differences
    measure the total derivative, while the stop-gradient deliberately
    drops the target path, so the detached configuration is verified
    separately against a frozen-target reference.
    """
    config = micro_model_config()
    params = init_parameters(config, seed)
    spec = DatasetSpec(size=2, seed=seed, image_side=config.image_side,
                       channels=config.channels)
    batch = [(generate_sample(spec, 0), ModeLabel.LLAVA),
             (generate_sample(spec, 1), ModeLabel.VDEP)]

    def loss():
        items = []
        for sample, mode in batch:
            output, emb = run_sample(params, config, sample, mode)
            items.append(BatchItem(mode=mode, output=output, embeddings=emb,
                                   response_ids=sample.response_ids))
        return hybrid_loss(items, alpha, variant, offset, detach_target).total_node

    return params_gradcheck(loss, params, step, per_tensor,
                            np.random.default_rng(seed))
