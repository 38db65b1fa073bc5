"""Central finite-difference checks for every differentiable kernel."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .tensor import Tensor, backward, no_grad

H = 1e-3
TOL = 1e-4
TOL_BN = 1e-3


def rel_error(analytic, numeric):
    """max |a - n| / max(|a|_inf, |n|_inf), zero when both vanish."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_grad(f, arrays, i, h=H):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(*arrays)
        x[idx] = old - h
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def check(fn, arrays, h=H, seed=0):
    """Worst relative error over all inputs of ``fn``.

    ``fn`` maps tensors to a tensor; it is reduced to a scalar with a fixed
    random projection so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    proj = None

    def scalar(*arrs):
        nonlocal proj
        with no_grad():
            out = fn(*[Tensor(a) for a in arrs]).data
        if proj is None:
            proj = np.random.default_rng(seed).normal(size=out.shape)
        return float((out * proj).sum())

    scalar(*arrays)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    backward((out * Tensor(proj)).sum())
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i, h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        worst = max(worst, rel_error(ana, num))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _distinct(rng, shape):
    return (rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01).astype(np.float64)


def _bn(mode):
    def fn(x, g, b):
        c = x.shape[1]
        rm = np.linspace(-0.2, 0.2, c)
        rv = np.linspace(0.5, 1.5, c)
        return F.batchnorm2d(x, g, b, rm, rv, mode=mode, update_stats=False)
    return fn


def _composite(x, w1, b1, w2, b2, w3, b3):
    # smooth activations only: a kink inside the difference stencil is not a gradient bug
    h = F.tanh(F.conv2d(x, w1, b1, 2, 1))
    h = F.tanh(F.deconv2d(h, w2, b2, 2, 1))
    logits = F.linear(F.flatten(h), w3, b3)
    return F.softmax_nll(logits, np.arange(x.shape[0]) % w3.shape[0])


@dataclass
class GradCase:
    name: str
    make: Callable  # rng -> (fn, [arrays])
    tol: float = TOL


def default_cases():
    def conv(rng):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k, s, p = rng.choice([2, 3, 4]), rng.integers(1, 3), rng.integers(0, 2)
        size = rng.integers(k, 7)
        return (lambda x, w, b: F.conv2d(x, w, b, s, p),
                [rng.normal(size=(n, c, size, size)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)])

    def deconv(rng):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k, s = rng.choice([2, 3, 4]), rng.integers(1, 3)
        p = rng.integers(0, (k + 1) // 2)
        size = rng.integers(1, 5)
        return (lambda x, w, b: F.deconv2d(x, w, b, s, p),
                [rng.normal(size=(n, c, size, size)), rng.normal(size=(c, o, k, k)), rng.normal(size=o)])

    def bn(mode):
        def make(rng):
            shape = (2, 3, 4, 4)
            return _bn(mode), [rng.normal(size=shape) * 2 + 1, rng.normal(size=3), rng.normal(size=3)]
        return make

    def elementwise(f, gen):
        def make(rng):
            return f, [gen(rng, (2, 3, 4))]
        return make

    def pool(rng):
        return (lambda x: F.maxpool2d(x, 2)), [_distinct(rng, (2, 2, 4, 6))]

    def lin(rng):
        return F.linear, [rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)]

    def drop(rng):
        seed = int(rng.integers(1 << 30))
        return (lambda x: F.dropout(x, 0.4, "train", np.random.default_rng(seed))), [rng.normal(size=(3, 5))]

    def mse(rng):
        return F.mse_loss, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]

    def nll(rng):
        labels = rng.integers(0, 5, size=4)
        w = rng.uniform(0.1, 2.0, size=4)
        return (lambda z: F.softmax_nll(z, labels, w)), [rng.normal(size=(4, 5))]

    def soft(rng):
        t = rng.dirichlet(np.ones(5))
        return (lambda z: F.soft_cross_entropy(z, t)), [rng.normal(size=(4, 5))]

    def cat(rng):
        return (lambda a, b: F.concat([a, b], axis=1)), [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))]

    def composite(rng):
        return _composite, [rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 4, 4)) * 0.5, rng.normal(size=3),
                            rng.normal(size=(3, 2, 4, 4)) * 0.5, rng.normal(size=2), rng.normal(size=(3, 72)) * 0.3,
                            rng.normal(size=3)]

    return [
        GradCase("conv2d", conv),
        GradCase("deconv2d", deconv),
        GradCase("batchnorm2d[train]", bn("train"), TOL_BN),
        GradCase("batchnorm2d[eval]", bn("eval"), TOL_BN),
        GradCase("relu", elementwise(F.relu, _away_from_zero)),
        GradCase("leaky_relu", elementwise(lambda x: F.leaky_relu(x, 0.2), _away_from_zero)),
        GradCase("tanh", elementwise(F.tanh, lambda r, s: r.normal(size=s))),
        GradCase("maxpool2d", pool),
        GradCase("linear", lin),
        GradCase("dropout", drop),
        GradCase("mse_loss", mse),
        GradCase("softmax_nll", nll),
        GradCase("soft_cross_entropy", soft),
        GradCase("concat", cat),
        GradCase("composite", composite),
    ]


@dataclass
class GradResult:
    name: str
    worst: float
    tol: float
    instances: int

    @property
    def passed(self):
        return self.worst < self.tol


def run_grad_checks(cases=None, instances=20, seed=0):
    results = []
    for i, case in enumerate(cases or default_cases()):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for j in range(instances):
            fn, arrays = case.make(rng)
            worst = max(worst, check(fn, arrays, seed=j))
        results.append(GradResult(case.name, worst, case.tol, instances))
    return results


def main(print_fn=print, **kw):
    t0 = time.time()
    results = run_grad_checks(**kw)
    for r in results:
        print_fn(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} worst rel err {r.worst:.2e} (tol {r.tol:.0e})")
    failed = [r.name for r in results if not r.passed]
    print_fn(f"{len(results) - len(failed)}/{len(results)} ops passed in {time.time() - t0:.1f}s")
    if failed:
        print_fn("failed: " + ", ".join(failed))
    return not failed
