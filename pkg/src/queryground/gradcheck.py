"""Finite-difference verification of analytic gradients.

Every differentiable op is exercised on random float64 inputs against central
differences; a separate end-to-end check compares the full training loss
gradient on a sampled subset of model parameters. Op lookups go through the
module object so a corrupted backward can be injected by tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-5
OP_TOL = 1e-6
END_TO_END_TOL = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def fd_check(fn, inputs, h: float = FD_STEP):
    """Compare tape gradients of scalar readout sum(fn(inputs) * R) against
    central differences. Returns (max_rel_err, details)."""
    weights = None

    def readout():
        nonlocal weights
        out = fn(*inputs)
        if weights is None:
            rng = np.random.default_rng(12345)
            weights = rng.uniform(0.5, 1.5, size=out.data.shape)
        return ad.sum_all(ad.mul(out, ad.constant(weights, dtype=np.float64)))

    with ad.Tape() as tape:
        loss = readout()
        tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    details = []
    for which, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = readout().item()
            flat[i] = orig - h
            lo = readout().item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * h)
        err = relative_error(analytic[which], numeric)
        details.append((which, err, analytic[which], numeric))
        worst = max(worst, err)
    return worst, details


def _rand(rng, shape, lo=-2.0, hi=2.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _rand_kinkfree(rng, shape, margin=1e-3):
    # keep entries away from 0 so relu/selection subgradients match FD
    x = rng.uniform(-2.0, 2.0, size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x) * (margin + 0.1) + (x == 0) * (margin + 0.1), x)
    return ad.Tensor(x, requires_grad=True, dtype=np.float64)


def _rand_gapped(rng, shape, gap=1e-3):
    # pairwise-distinct entries so argmax ties cannot flip under FD probes
    n = int(np.prod(shape))
    vals = rng.uniform(-2.0, 2.0, size=n)
    order = np.argsort(vals)
    spread = vals[order] + np.arange(n) * gap * 3
    out = np.empty(n)
    out[order] = spread
    return ad.Tensor(out.reshape(shape), requires_grad=True, dtype=np.float64)


def _suite(rng):
    """(name, fn, inputs) triples covering every differentiable op."""
    cases = []

    def case(name, fn, *inputs):
        cases.append((name, fn, inputs))

    case("matmul", lambda a, b: ad.matmul(a, b), _rand(rng, (4, 5)), _rand(rng, (5, 3)))
    case("bmm", lambda a, b: ad.bmm(a, b), _rand(rng, (3, 4, 5)), _rand(rng, (3, 5, 2)))
    case("add", lambda a, b: ad.add(a, b), _rand(rng, (4, 5, 3)), _rand(rng, (4, 5, 3)))
    case("add_channel_broadcast", lambda a, b: ad.add(a, b), _rand(rng, (1, 1, 6)), _rand(rng, (4, 5, 6)))
    case("add_bias_broadcast", lambda a, b: ad.add(a, b), _rand(rng, (5, 6)), _rand(rng, (6,)))
    case("sub", lambda a, b: ad.sub(a, b), _rand(rng, (3, 4)), _rand(rng, (3, 4)))
    case("mul", lambda a, b: ad.mul(a, b), _rand(rng, (4, 5, 6)), _rand(rng, (4, 5, 1)))
    case("div", lambda a, b: ad.div(a, b), _rand(rng, (4, 4)),
         ad.Tensor(rng.uniform(0.5, 2.0, (4, 4)) * rng.choice([-1.0, 1.0], (4, 4)),
                   requires_grad=True, dtype=np.float64))
    case("scale", lambda a: ad.scale(a, -1.7), _rand(rng, (3, 5)))
    case("shift", lambda a: ad.shift(a, 0.3), _rand(rng, (3, 5)))
    case("neg", lambda a: ad.neg(a), _rand(rng, (6,)))
    case("relu", lambda a: ad.relu(a), _rand_kinkfree(rng, (4, 5, 3)))
    case("sigmoid", lambda a: ad.sigmoid(a), _rand(rng, (4, 5)))
    case("softmax_lastdim", lambda a: ad.softmax_lastdim(a), _rand(rng, (3, 4, 5)))
    case("layernorm", lambda x, g, b: ad.layernorm(x, g, b, eps=1e-5),
         _rand(rng, (3, 4, 6)), _rand(rng, (6,)), _rand(rng, (6,)))
    case("dropout_eval", lambda a: ad.dropout(a, 0.5, training=False), _rand(rng, (4, 5)))
    case("reshape", lambda a: ad.reshape(a, (6, 4)), _rand(rng, (2, 3, 4)))
    case("flatten", lambda a: ad.flatten(a), _rand(rng, (3, 4, 2)))
    case("transpose_last2", lambda a: ad.transpose_last2(a), _rand(rng, (3, 4, 5)))
    case("permute", lambda a: ad.permute(a, (2, 0, 1)), _rand(rng, (3, 4, 5)))
    case("concat", lambda a, b: ad.concat([a, b], axis=1), _rand(rng, (3, 2)), _rand(rng, (3, 4)))
    case("narrow", lambda a: ad.narrow(a, 0, 1, 3), _rand(rng, (6, 4)))
    case("gather_rows", lambda a: ad.gather_rows(a, np.array([4, 0, 2, 0])), _rand(rng, (6, 3)))
    mask = rng.random((4, 5)) < 0.5
    case("where", lambda a, b: ad.where(mask, a, b), _rand(rng, (4, 5)), _rand(rng, (4, 5)))
    case("maximum", lambda a, b: ad.maximum(a, b), _rand_gapped(rng, (4, 5)), _rand_gapped(rng, (4, 5)))
    case("minimum", lambda a, b: ad.minimum(a, b), _rand_gapped(rng, (4, 5)), _rand_gapped(rng, (4, 5)))
    case("sum_all", lambda a: ad.sum_all(a), _rand(rng, (4, 3)))
    case("pool2x2_mean", lambda a: ad.pool2x2(a, "mean"), _rand(rng, (6, 4, 3)))
    case("pool2x2_max", lambda a: ad.pool2x2(a, "max"), _rand_gapped(rng, (6, 4, 3)))
    case("reduce_spatial_mean", lambda a: ad.reduce_spatial(a, "mean"), _rand(rng, (4, 5, 3)))
    case("reduce_spatial_max", lambda a: ad.reduce_spatial(a, "max"), _rand_gapped(rng, (4, 5, 3)))
    case("chain_matmul_sigmoid_layernorm",
         lambda a, b, g, c: ad.layernorm(ad.sigmoid(ad.matmul(a, b)), g, c, eps=1e-5),
         _rand(rng, (4, 5)), _rand(rng, (5, 6)), _rand(rng, (6,)), _rand(rng, (6,)))
    return cases


@dataclass
class OpResult:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    op_results: list[OpResult] = field(default_factory=list)
    end_to_end_err: float | None = None
    end_to_end_passed: bool | None = None
    warnings: list[str] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        ops_ok = all(r.passed for r in self.op_results)
        e2e_ok = self.end_to_end_passed is not False
        return ops_ok and e2e_ok

    def failures(self) -> list[str]:
        names = [r.name for r in self.op_results if not r.passed]
        if self.end_to_end_passed is False:
            names.append("end_to_end_loss")
        return names


def run_op_checks(seed: int = 0, tol: float = OP_TOL) -> list[OpResult]:
    results = []
    with ad.precision("f64"):
        rng = np.random.default_rng(seed)
        for name, fn, inputs in _suite(rng):
            err, _ = fd_check(fn, inputs)
            results.append(OpResult(name, err, err < tol))
    return results


def run_end_to_end(model, loss_fn, n_params: int = 64, tol: float = END_TO_END_TOL,
                   seed: int = 0, h: float = FD_STEP):
    """FD-check d(loss)/d(theta) on a random sample of parameter entries.

    `loss_fn()` must run a fresh forward pass and return a scalar Tensor.
    Returns (max_rel_err, passed, warning_or_None).
    """
    params = list(model.named_parameters())
    entries = [(name, p, i) for name, p in params for i in range(p.data.size)]
    if not entries:
        return 0.0, True, "model has no trainable parameters; end-to-end check is vacuous"
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(entries), size=min(n_params, len(entries)), replace=False)

    model.zero_grad()
    with ad.Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}

    worst = 0.0
    for j in pick:
        name, p, i = entries[j]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn().item()
        flat[i] = orig - h
        lo = loss_fn().item()
        flat[i] = orig
        numeric = (hi - lo) / (2 * h)
        worst = max(worst, relative_error(np.asarray(analytic[name].reshape(-1)[i]),
                                          np.asarray(numeric)))
    return worst, worst < tol, None


def run(seed: int = 0, model_builder=None) -> GradcheckReport:
    """Full gradient-check suite: per-op FD checks plus an end-to-end loss check."""
    t0 = time.perf_counter()
    report = GradcheckReport()
    report.op_results = run_op_checks(seed=seed)
    if model_builder is not None:
        with ad.precision("f64"):
            model, loss_fn = model_builder()
            err, ok, warning = run_end_to_end(model, loss_fn, seed=seed)
        report.end_to_end_err = err
        report.end_to_end_passed = ok
        if warning:
            report.warnings.append(warning)
    report.elapsed_s = time.perf_counter() - t0
    return report
