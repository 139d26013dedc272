"""Finite-difference check of the full pipeline plus CCC loss against reverse mode."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .metrics import ccc_loss
from .model import ModelConfig, SageParams, init_params, sage_forward


@dataclass
class CoordinateResult:
    T: int
    param: str
    index: tuple
    analytic: float
    numeric: float
    error: float


@dataclass
class GradCheckReport:
    results: list[CoordinateResult] = field(default_factory=list)
    # coordinates whose +/- step straddled a relu kink, replaced by fresh draws
    kinked: list[tuple[int, str, tuple]] = field(default_factory=list)

    @property
    def worst(self) -> CoordinateResult:
        return max(self.results, key=lambda r: r.error)

    @property
    def max_error(self) -> float:
        return self.worst.error if self.results else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol

    def describe_worst(self) -> str:
        w = self.worst
        return (f"worst: T={w.T} {w.param}{list(w.index)} analytic={w.analytic:.10e} "
                f"numeric={w.numeric:.10e} rel_error={w.error:.3e}")


def composite_loss(params, config: ModelConfig, clips) -> nx.Tensor:
    """CCC loss over the concatenated predictions of ``clips`` (list of (xv, xa, target))."""
    preds = [sage_forward(xv, xa, params, config).predictions for xv, xa, _ in clips]
    pred = preds[0] if len(preds) == 1 else nx.concat(preds, axis=0)
    target = np.concatenate([t for _, _, t in clips], axis=0)
    return ccc_loss(pred, target)


def random_clips(config: ModelConfig, T: int, rng: np.random.Generator, min_frames: int = 4):
    """One clip of length T, or enough length-T clips to give ``min_frames`` frames in total."""
    n = max(1, -(-min_frames // T)) if T < min_frames else 1
    return [(rng.normal(size=(T, config.dim_visual)),
             rng.normal(size=(T, config.dim_audio)),
             rng.uniform(-0.9, 0.9, size=(T, 2))) for _ in range(n)]


def _draw(params: SageParams, name: str, rng: np.random.Generator) -> tuple[str, tuple]:
    flat = int(rng.integers(params[name].data.size))
    return name, tuple(int(i) for i in np.unravel_index(flat, params[name].shape))


def sample_coordinates(params: SageParams, n: int, rng: np.random.Generator):
    """Yield one coordinate from every tensor, then draws weighted by tensor size, forever.

    The caller stops once it has ``n`` usable coordinates.
    """
    names = list(params)
    for name in names:
        yield _draw(params, name, rng)
    sizes = np.array([params[name].data.size for name in names], dtype=float)
    while True:
        yield _draw(params, names[rng.choice(len(names), p=sizes / sizes.sum())], rng)


def model_gradient_check(seed: int = 0, sizes: Sequence[int] = (1, 7, 50), n_coords: int = 80,
                         step: float = 1e-5, config: ModelConfig | None = None) -> GradCheckReport:
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    report = GradCheckReport()
    for T in sizes:
        clips = random_clips(config, T, rng)
        loss = composite_loss(params, config, clips)
        grads = nx.backward(loss, wrt=[params[n] for n in params])
        base = params.detached()
        checked = 0
        for name, index in sample_coordinates(params, n_coords, rng):
            if checked >= n_coords:
                break

            def evaluate(h, name=name, index=index):
                arr = base[name].data.copy()
                arr[index] += h
                return composite_loss(base.replace({name: arr}, requires_grad=False), config, clips).item()

            numeric, smooth = nx.central_difference(evaluate, step)
            if not smooth:
                report.kinked.append((T, name, index))
                continue
            checked += 1
            analytic = float(grads[params[name]][index])
            report.results.append(CoordinateResult(T, name, index, analytic, numeric,
                                                   float(nx.relative_error(analytic, numeric))))
    return report
