"""Gradient-alignment metrics and the complexity sweeps.

Coherence of an aggregation at one input is the maximum cosine similarity
between the true-class arm's input-gradient and every other arm's, each
gradient taken of that arm's positive-claim binary loss at the clean input
(one shared loss form for all arms, so identical arms score exactly 1).

The sweeps coarsen a k-class task into j-class tasks (j = 2..k), train a
model per cell and score the shared binary objective: flip a class-0
example to anything (untargeted) or flip any other example into class 0
(targeted).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import models
from .aggregate import BinaryAggregate
from .attacks import AttackConfig, as_logits_fn, boundary_distance, pgd_attack
from .data import Dataset, apply_relabel, make_model_j, permute_classes, random_permutation
from .models import ModelSpec, Parameters
from .training import TrainConfig, train_model

__all__ = [
    "CoherenceReport",
    "DegenerateGradientError",
    "cosine_similarity",
    "coherence",
    "coherence_report",
    "ensemble_coherence",
    "ensemble_coherence_report",
    "binary_task_robust_accuracy",
    "binary_task_clean_accuracy",
    "simplicity_sweep",
    "separation_sweep",
    "boundary_distribution",
    "input_gradient",
]


class DegenerateGradientError(Exception):
    """A gradient vanished, so its direction is undefined."""


@dataclass
class CoherenceReport:
    """Per-example coherence values in [-1, 1] plus summary statistics.
    ``skipped`` counts examples dropped for degenerate gradients."""

    values: np.ndarray
    mean: float
    bin_edges: np.ndarray
    counts: np.ndarray
    kind: str
    skipped: int = 0


def cosine_similarity(g0: np.ndarray, g1: np.ndarray) -> float:
    """<g0, g1> / (|g0| |g1|), clamped into [-1, 1] against rounding."""
    g0 = np.asarray(g0, dtype=np.float64).ravel()
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    if g0.shape != g1.shape:
        raise ValueError(f"gradient lengths {g0.size} and {g1.size} differ")
    n0 = np.linalg.norm(g0)
    n1 = np.linalg.norm(g1)
    if n0 == 0.0 or n1 == 0.0:
        raise DegenerateGradientError("zero gradient has no direction")
    return float(np.clip(g0 @ g1 / (n0 * n1), -1.0, 1.0))


def input_gradient(spec: ModelSpec, params: Parameters, x: np.ndarray,
                   labels: np.ndarray) -> np.ndarray:
    """Per-example gradient of the summed cross-entropy w.r.t. the input."""
    xt = ad.tensor(x, requires_grad=True)
    loss = models.classification_loss(
        models.forward(spec, params.detached(), xt), labels, reduction="sum")
    ad.backward(loss)
    return xt.grad


def _arm_claim_gradients(agg: BinaryAggregate, x: np.ndarray) -> np.ndarray:
    """(k, n, d) gradients of each arm's positive-claim loss at x."""
    n = x.shape[0]
    ones = np.ones(n, dtype=np.int64)
    grads = [input_gradient(spec, params, x, ones).reshape(n, -1)
             for spec, params in agg.arms]
    return np.stack(grads, axis=0)


def coherence(agg: BinaryAggregate, x: np.ndarray, y: int) -> float:
    """max over arms j != y of CS(grad of arm y, grad of arm j) at one input."""
    if agg.k < 2:
        raise ValueError("coherence needs k >= 2 arms")
    x = np.asarray(x, dtype=np.float64)[None] if np.asarray(x).ndim < 2 else np.asarray(x)
    grads = _arm_claim_gradients(agg, x)[:, 0, :]
    return max(cosine_similarity(grads[int(y)], grads[j])
               for j in range(agg.k) if j != int(y))


def _histogram(values: np.ndarray, lo: float, hi: float, bins: int):
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return edges, counts


def coherence_report(agg: BinaryAggregate, dataset: Dataset,
                     bins: int = 30) -> CoherenceReport:
    """Coherence for every example; degenerate gradients are recorded and
    skipped from the distribution."""
    grads = _arm_claim_gradients(agg, dataset.inputs)
    norms = np.linalg.norm(grads, axis=2)
    values = []
    skipped = 0
    for e, y in enumerate(dataset.labels):
        if norms[int(y), e] == 0.0:
            skipped += 1
            continue
        best = -1.0
        ok = False
        for j in range(agg.k):
            if j == int(y) or norms[j, e] == 0.0:
                continue
            cs = float(grads[int(y), e] @ grads[j, e] / (norms[int(y), e] * norms[j, e]))
            best = max(best, min(1.0, max(-1.0, cs)))
            ok = True
        if ok:
            values.append(best)
        else:
            skipped += 1
    values = np.asarray(values)
    edges, counts = _histogram(values, -1.0, 1.0, bins)
    return CoherenceReport(values, float(values.mean()) if values.size else float("nan"),
                           edges, counts, kind="robin", skipped=skipped)


def ensemble_coherence(members: Sequence[tuple[ModelSpec, Parameters]],
                       x: np.ndarray, y: int) -> float:
    """max over unordered model pairs of the CS between their cross-entropy
    input-gradients at (x, y); m models give m(m-1)/2 pairs."""
    if len(members) < 2:
        raise ValueError("ensemble coherence needs at least 2 models")
    x = np.asarray(x, dtype=np.float64)[None] if np.asarray(x).ndim < 2 else np.asarray(x)
    yarr = np.asarray([int(y)], dtype=np.int64)
    grads = [input_gradient(spec, params, x, yarr).ravel()
             for spec, params in members]
    return max(cosine_similarity(grads[a], grads[b])
               for a in range(len(members)) for b in range(a + 1, len(members)))


def ensemble_coherence_report(members: Sequence[tuple[ModelSpec, Parameters]],
                              dataset: Dataset, bins: int = 30) -> CoherenceReport:
    m = len(members)
    if m < 2:
        raise ValueError("ensemble coherence needs at least 2 models")
    n = len(dataset)
    grads = np.stack([
        input_gradient(spec, params, dataset.inputs, dataset.labels).reshape(n, -1)
        for spec, params in members])
    norms = np.linalg.norm(grads, axis=2)
    values = []
    skipped = 0
    for e in range(n):
        best = -1.0
        ok = False
        for a in range(m):
            if norms[a, e] == 0.0:
                continue
            for b in range(a + 1, m):
                if norms[b, e] == 0.0:
                    continue
                cs = float(grads[a, e] @ grads[b, e] / (norms[a, e] * norms[b, e]))
                best = max(best, min(1.0, max(-1.0, cs)))
                ok = True
        if ok:
            values.append(best)
        else:
            skipped += 1
    values = np.asarray(values)
    edges, counts = _histogram(values, -1.0, 1.0, bins)
    return CoherenceReport(values, float(values.mean()) if values.size else float("nan"),
                           edges, counts, kind="ensemble", skipped=skipped)


# ---------------------------------------------------------------------------
# complexity sweeps (coarsened-label models on the shared binary objective)
# ---------------------------------------------------------------------------

def binary_task_robust_accuracy(spec: ModelSpec, params: Parameters,
                                dataset: Dataset, attack: AttackConfig) -> float:
    """Fraction of examples whose binary-objective attack fails: class-0
    examples face the untargeted attack, all others a targeted attack
    toward class 0."""
    logits_fn = as_logits_fn(spec, params)
    x, y = dataset.inputs, dataset.labels
    success = np.zeros(len(y), dtype=bool)

    zero = y == 0
    if zero.any():
        res = pgd_attack(logits_fn, x[zero], y[zero], attack,
                         example_indices=np.flatnonzero(zero))
        success[zero] = res.success
    rest = ~zero
    if rest.any():
        target = np.zeros(int(rest.sum()), dtype=np.int64)
        res = pgd_attack(logits_fn, x[rest], y[rest], attack, target=target,
                         example_indices=np.flatnonzero(rest))
        success[rest] = res.success
    return float(1.0 - success.mean())


def binary_task_clean_accuracy(spec: ModelSpec, params: Parameters,
                               dataset: Dataset) -> float:
    """Accuracy of the prediction collapsed to "class 0 or not"."""
    pred = models.predict(spec, params, dataset.inputs)
    return float(((pred == 0) == (dataset.labels == 0)).mean())


def _sweep_cells(train_set: Dataset, test_set: Dataset, k: int,
                 spec_builder, train_config: TrainConfig,
                 permutations: int, defense: str):
    """Yield one trained cell per (permutation, j): the coarsened datasets
    and the model trained on them."""
    for p in range(permutations):
        perm = random_permutation(k, seed=train_config.seed * 1000 + p)
        train_p = permute_classes(train_set, perm)
        test_p = permute_classes(test_set, perm)
        for j in range(2, k + 1):
            rm = make_model_j(k, j)
            train_j = apply_relabel(train_p, rm)
            test_j = apply_relabel(test_p, rm)
            spec = spec_builder(j)
            config = replace(train_config, defense=defense,
                             seed=train_config.seed + 17 * p + j)
            params = train_model(spec, train_j, config)
            yield p, j, spec, params, train_j, test_j


def simplicity_sweep(train_set: Dataset, test_set: Dataset, k: int,
                     spec_builder, train_config: TrainConfig,
                     eps_grid: Sequence[float], permutations: int,
                     eval_steps: int = 20) -> list[dict]:
    """Adversarially train MODEL[j] for every permutation and j, then score
    binary-task robustness over the budget grid. Returns one row per
    (permutation, j, eps) plus the clean binary accuracy."""
    if k < 3:
        raise ValueError("sweep needs k >= 3")
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    rows = []
    for p, j, spec, params, _, test_j in _sweep_cells(
            train_set, test_set, k, spec_builder, train_config, permutations, "adv"):
        clean = binary_task_clean_accuracy(spec, params, test_j)
        for eps in eps_grid:
            if eps == 0.0:
                robust = clean  # zero-budget attacks reduce to the clean check
            else:
                attack = replace(train_config.attack, epsilon=float(eps),
                                 step_size=None, steps=eval_steps)
                robust = binary_task_robust_accuracy(spec, params, test_j, attack)
            rows.append({"permutation": p, "j": j, "eps": float(eps),
                         "robust_acc": robust, "clean_binary_acc": clean})
    return rows


def separation_sweep(train_set: Dataset, test_set: Dataset, k: int,
                     spec_builder, train_config: TrainConfig,
                     eps_eval: float, permutations: int,
                     eval_steps: int = 20) -> list[dict]:
    """Two curves over j: adversarially trained models scored at eps_eval,
    and standard-trained models scored clean, both on the binary task."""
    if k < 3:
        raise ValueError("sweep needs k >= 3")
    attack = replace(train_config.attack, epsilon=float(eps_eval),
                     step_size=None, steps=eval_steps)
    rows = []
    for p, j, spec, params, _, test_j in _sweep_cells(
            train_set, test_set, k, spec_builder, train_config, permutations, "adv"):
        rows.append({"permutation": p, "j": j, "regime": "robust",
                     "accuracy": binary_task_robust_accuracy(spec, params, test_j, attack)
                     if eps_eval > 0 else binary_task_clean_accuracy(spec, params, test_j)})
    for p, j, spec, params, _, test_j in _sweep_cells(
            train_set, test_set, k, spec_builder, train_config, permutations, "standard"):
        rows.append({"permutation": p, "j": j, "regime": "standard",
                     "accuracy": binary_task_clean_accuracy(spec, params, test_j)})
    return rows


def curve_by_j(rows: list[dict], regime: str) -> dict[int, float]:
    """Mean accuracy per j over permutations for one regime."""
    acc: dict[int, list[float]] = {}
    for r in rows:
        if r.get("regime") == regime:
            acc.setdefault(r["j"], []).append(r["accuracy"])
    return {j: float(np.mean(v)) for j, v in sorted(acc.items())}


def boundary_distribution(logits_fn, dataset: Dataset, norm: str,
                          eps_max: float, tolerance: float = 1e-3,
                          bins: int = 30, steps: int = 20, seed: int = 0):
    """Histogram of per-example boundary distances over [0, eps_max]."""
    result = boundary_distance(logits_fn, dataset.inputs, dataset.labels,
                               norm, eps_max, tolerance, steps=steps, seed=seed)
    edges, counts = _histogram(result.distance, 0.0, float(eps_max), bins)
    return {
        "edges": edges,
        "counts": counts,
        "mean": float(result.distance.mean()),
        "distances": result.distance,
        "found": result.found,
    }
