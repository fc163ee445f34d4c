"""Finite-difference gradient suites: every primitive, the CPC loss, the CTC loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, check_gradients
from .cpc import CpcConfig, cpc_loss, gru, init_model
from .ctc import ctc_nll


@dataclass
class SuiteResult:
    name: str
    reports: dict[str, GradCheckReport]

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.reports.values())

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())


def _weighted_sum(y: ad.Node, seed: int = 99):
    """Scalar read-out with fixed random weights so every output element matters."""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return (y * y.graph.const(w)).sum()


def primitive_cases(rng: np.random.Generator):
    """name -> (build_loss, params) exercising one primitive each."""
    def n(*shape):
        return rng.normal(size=shape)

    away_from_zero = n(3, 4)
    away_from_zero += np.sign(away_from_zero) * 0.1
    positive = rng.uniform(0.5, 2.0, size=(3, 4))
    idx = np.array([[0, 2], [2, 1], [0, 0]])

    return {
        "add": (lambda p: _weighted_sum(p["a"] + p["b"]), {"a": n(3, 4), "b": n(4)}),
        "sub": (lambda p: _weighted_sum(p["a"] - p["b"]), {"a": n(3, 1), "b": n(3, 4)}),
        "mul": (lambda p: _weighted_sum(p["a"] * p["b"]), {"a": n(2, 3, 4), "b": n(3, 1)}),
        "scale": (lambda p: _weighted_sum(p["a"] * 2.5), {"a": n(3, 4)}),
        "tanh": (lambda p: _weighted_sum(ad.tanh(p["a"])), {"a": n(3, 4)}),
        "sigmoid": (lambda p: _weighted_sum(ad.sigmoid(p["a"])), {"a": n(3, 4) * 3}),
        "relu": (lambda p: _weighted_sum(ad.relu(p["a"])), {"a": away_from_zero}),
        "exp": (lambda p: _weighted_sum(ad.exp(p["a"])), {"a": n(3, 4)}),
        "log": (lambda p: _weighted_sum(ad.log(p["a"])), {"a": positive}),
        "matmul": (lambda p: _weighted_sum(p["a"] @ p["b"]), {"a": n(2, 3, 4), "b": n(4, 5)}),
        "conv1d": (lambda p: _weighted_sum(ad.conv1d(p["x"], p["w"], 2)), {"x": n(2, 11, 3), "w": n(4, 3, 3)}),
        "concat": (lambda p: _weighted_sum(ad.concat([p["a"], p["b"]], axis=-1)), {"a": n(3, 2), "b": n(3, 4)}),
        "slice": (lambda p: _weighted_sum(p["a"][1:, ::2]), {"a": n(3, 5)}),
        "take": (lambda p: _weighted_sum(ad.take(p["a"], idx)), {"a": n(3, 4)}),
        "reshape": (lambda p: _weighted_sum(ad.tanh(p["a"].reshape(4, 3))), {"a": n(3, 4)}),
        "sum": (lambda p: _weighted_sum(p["a"].sum(axis=1)), {"a": n(3, 4)}),
        "mean": (lambda p: _weighted_sum(p["a"].mean(axis=0)), {"a": n(3, 4)}),
        "log_softmax": (lambda p: _weighted_sum(ad.log_softmax(p["a"], axis=-1)), {"a": n(3, 4)}),
        "gru": (
            lambda p: _weighted_sum(gru(p["x"], p["wx"], p["wh"], p["bx"], p["bh"])),
            {"x": n(2, 5, 3), "wx": n(3, 6), "wh": n(2, 6), "bx": n(6), "bh": n(6)},
        ),
    }


def primitives_suite(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    return SuiteResult(
        "primitives",
        {name: check_gradients(build, params) for name, (build, params) in primitive_cases(rng).items()},
    )


GRADCHECK_CPC = CpcConfig(
    enc_channels=(4, 4, 4),
    latent_dim=4,
    context_dim=6,
    K=3,
    n_negatives=4,
    window_samples=400,
    batch_utts=2,
    seed=0,
)


def cpc_case(seed: int = 0, config: CpcConfig = GRADCHECK_CPC):
    """A short two-window batch through the full CPC objective.

    Encoder weights keep their He initialisation; GRU, bias and head values are
    drawn with standard deviation 0.5.  At initialisation scale some coordinates have
    gradients below 1e-8, where finite-difference round-off alone exceeds the
    relative tolerance.
    """
    model = init_model(config)
    rng = np.random.default_rng(100 + seed)
    params = {
        k: v if (k.startswith("enc.") and k.endswith("weight")) else rng.normal(0.0, 0.5, size=v.shape)
        for k, v in model.params.items()
    }
    W = config.window_samples
    t = np.arange(W) / config.sample_rate_hz
    x = np.stack([0.5 * np.sin(2 * np.pi * f * t) + 0.05 * rng.normal(size=W) for f in (300.0, 600.0)])
    x = x[:, :, None]

    def build(p):
        g = next(iter(p.values())).graph
        loss, _ = cpc_loss(config, p, g.const(x), np.random.default_rng(3))
        return loss

    return build, params


def cpc_suite(seed: int = 0) -> SuiteResult:
    build, params = cpc_case(seed)
    return SuiteResult("cpc_infonce", {"sum_k l_k": check_gradients(build, params)})


def ctc_suite(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    cases = {
        "T=5,V=4,[1,2]": (5, 4, [1, 2]),
        "T=5,V=4,[3,3]": (5, 4, [3, 3]),
        "T=5,V=4,[]": (5, 4, []),
        "T=6,V=3,[1,2,1]": (6, 3, [1, 2, 1]),
    }
    reports = {}
    for name, (T, V, targets) in cases.items():
        def build(p, targets=targets):
            return ctc_nll(ad.log_softmax(p["logits"], axis=-1), targets)

        reports[name] = check_gradients(build, {"logits": rng.normal(size=(T, V))})
    return SuiteResult("ctc", reports)


def run_all(seed: int = 0) -> list[SuiteResult]:
    return [primitives_suite(seed), cpc_suite(seed), ctc_suite(seed)]
