"""One-vs-all binary aggregation (RoBin): training, argmax prediction, the
six aggregation-aware attacks, transfer attacks, and two-stage hierarchical
classifiers.

Each of the k arms is a single-logit classifier trained on the indicator
task "is this class i", with balanced batches; the aggregate predicts the
arm with the highest sigmoid score. Attack seeds follow one shared rule,
per-arm seed = seed + arm, so the highest-arm attack emits bit-identical
candidates to the best-arm attack and its success set is contained in
best-arm's by construction.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import models
from .attacks import (AttackConfig, AttackResult, CwSearch, as_logits_fn,
                      cw_attack_l2, perturbation_norms, pgd_attack,
                      project_ball, _pgd_iterate, _random_start,
                      _grad_per_example_check)
from .autodiff import Tensor
from .data import Dataset, apply_relabel, make_one_vs_all
from .models import ModelSpec, Parameters
from .training import TrainConfig, train_model

__all__ = [
    "BinaryAggregate",
    "HierarchicalClassifier",
    "RobustnessReport",
    "train_robin",
    "predict_aggregate",
    "aggregate_scores",
    "composite_logits_fn",
    "attack_best_arm",
    "attack_highest_arm",
    "attack_top2",
    "attack_softmax",
    "attack_softmax_top2",
    "attack_avg_gradient",
    "transfer_attack",
    "train_hierarchical",
    "hierarchical_predict",
    "hierarchical_attack",
    "robust_accuracy",
    "save_aggregate",
    "load_aggregate",
    "AGGREGATE_ATTACKS",
    "MODEL_ATTACKS",
]


@dataclass
class BinaryAggregate:
    """k single-logit arms, arm i trained on the one-vs-all task of class i."""

    arms: tuple[tuple[ModelSpec, Parameters], ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.arms) != len(self.class_names):
            raise ValueError("one arm per class name required")
        for i, (spec, _) in enumerate(self.arms):
            if spec.output_dim != 1:
                raise ValueError(f"arm {i} has output_dim {spec.output_dim}, need 1")
        shapes = {spec.input_shape for spec, _ in self.arms}
        if len(shapes) != 1:
            raise ValueError(f"arms disagree on input shape: {shapes}")

    @property
    def k(self) -> int:
        return len(self.arms)


def _train_one_arm(spec: ModelSpec, dataset: Dataset, config: TrainConfig,
                   arm: int) -> tuple[Parameters, list]:
    relabeled = apply_relabel(dataset, make_one_vs_all(dataset.num_classes, arm))
    arm_config = replace(config, seed=config.seed + arm, balanced=True)
    log: list = []
    params = train_model(spec, relabeled, arm_config, log)
    return params, log


def train_robin(spec: ModelSpec, dataset: Dataset, config: TrainConfig,
                jobs: int = 1, class_names: Sequence[str] | None = None,
                logs: list | None = None) -> BinaryAggregate:
    """Train one arm per class (seed + arm), serially or in parallel.

    The arms are independent, so the result is bit-identical for any number
    of workers. ``logs`` collects the per-arm epoch records when given.
    """
    if dataset.num_classes < 2:
        raise ValueError("aggregation needs k >= 2 classes")
    if spec.output_dim != 1:
        raise ValueError(f"arm spec must have output_dim 1, got {spec.output_dim}")
    k = dataset.num_classes
    if class_names is None:
        class_names = tuple(f"class{i}" for i in range(k))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_one_arm, spec, dataset, config, i)
                       for i in range(k)]
            trained = [f.result() for f in futures]
    else:
        trained = [_train_one_arm(spec, dataset, config, i) for i in range(k)]
    if logs is not None:
        logs.extend(log for _, log in trained)
    return BinaryAggregate(tuple((spec, p) for p, _ in trained), tuple(class_names))


def composite_logits_fn(agg: BinaryAggregate) -> Callable[[Tensor], Tensor]:
    """The aggregation as one differentiable k-logit model: the raw arm
    logits stacked column-wise (softmax of this stack is the smooth
    relaxation of the argmax prediction)."""
    arm_fns = [as_logits_fn(spec, params) for spec, params in agg.arms]
    return lambda x: ad.hstack([fn(x) for fn in arm_fns])


def aggregate_scores(agg: BinaryAggregate, x: np.ndarray) -> np.ndarray:
    """Sigmoid score of every arm: (n, k)."""
    cols = [models.logits_of(spec, params, x)[:, 0] for spec, params in agg.arms]
    return ad.sigmoid_np(np.stack(cols, axis=1))


def predict_aggregate(agg: BinaryAggregate, x: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """argmax of arm scores (ties to the lowest index) plus the scores."""
    scores = aggregate_scores(agg, x)
    return scores.argmax(axis=1).astype(np.int64), scores


def _aggregate_success(agg: BinaryAggregate, adv: np.ndarray, y: np.ndarray
                       ) -> np.ndarray:
    pred, _ = predict_aggregate(agg, adv)
    return pred != y


def _base_attack(logits_fn, x, yb, config: AttackConfig, seed: int,
                 example_indices=None) -> AttackResult:
    cfg = replace(config, seed=seed)
    if config.method == "cw":
        res = cw_attack_l2(
            logits_fn, x, yb,
            c_search=config.cw_search or CwSearch(),
            iterations=config.cw_iterations,
            learn_rate=config.cw_learn_rate,
            kappa=config.cw_kappa)
        # a budgeted evaluation confines the unbounded CW candidate to the
        # epsilon ball; success is re-judged on the projected point
        adv = project_ball(x, res.adversarial, config.norm, config.epsilon,
                           config.input_box)
        pred = models.predict_from_logits(logits_fn(ad.constant(adv)).data)
        return AttackResult(adv, pred != yb, perturbation_norms(adv - x, config.norm))
    return pgd_attack(logits_fn, x, yb, cfg, example_indices=example_indices)


def _result(agg: BinaryAggregate, adv: np.ndarray, x: np.ndarray,
            y: np.ndarray, norm: str) -> AttackResult:
    return AttackResult(adv, _aggregate_success(agg, adv, y),
                        perturbation_norms(adv - x, norm))


def _per_arm_candidates(agg: BinaryAggregate, x: np.ndarray, y: np.ndarray,
                        config: AttackConfig, arms: Sequence[int]
                        ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Base-attack candidate of each requested arm on the full batch plus
    its per-example success against the aggregation, under the shared
    per-arm seed rule (seed + arm)."""
    out = {}
    for i in arms:
        spec, params = agg.arms[i]
        yb = (y == i).astype(np.int64)
        res = _base_attack(as_logits_fn(spec, params), x, yb, config,
                           seed=config.seed + i)
        out[i] = (res.adversarial, _aggregate_success(agg, res.adversarial, y))
    return out


def attack_best_arm(agg: BinaryAggregate, x: np.ndarray, y: np.ndarray,
                    config: AttackConfig) -> AttackResult:
    """Attack every arm's binary task independently and keep, per example,
    the first candidate (in arm order) that fools the aggregation; the last
    candidate is returned for examples where all fail."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    candidates = _per_arm_candidates(agg, x, y, config, range(agg.k))
    adv = candidates[agg.k - 1][0].copy()
    success = np.zeros(len(y), dtype=bool)
    for i in range(agg.k):
        cand, ok = candidates[i]
        take = ok & ~success
        adv[take] = cand[take]
        success |= ok
    return AttackResult(adv, success, perturbation_norms(adv - x, config.norm))


def attack_highest_arm(agg: BinaryAggregate, x: np.ndarray, y: np.ndarray,
                       config: AttackConfig) -> AttackResult:
    """Spend the whole budget on the arm with the highest clean score.

    Per the shared seed rule the candidate equals the best-arm candidate of
    that arm, so this attack's success set is a subset of best-arm's,
    example by example.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _, scores = predict_aggregate(agg, x)
    top = scores.argmax(axis=1)
    candidates = _per_arm_candidates(agg, x, y, config, sorted(set(top.tolist())))
    adv = np.empty_like(x)
    success = np.zeros(len(y), dtype=bool)
    for i, (cand, ok) in candidates.items():
        mask = top == i
        adv[mask] = cand[mask]
        success[mask] = ok[mask]
    return AttackResult(adv, success, perturbation_norms(adv - x, config.norm))


def _positive_claim_loss(logits_col: Tensor) -> Tensor:
    """Sum over examples of -log sigmoid(logit): the arm's loss against its
    own positive claim. Ascent lowers the arm's score."""
    n = logits_col.shape[0]
    return ad.softmax_cross_entropy(
        ad.pair_logits(ad.reshape(logits_col, (n, 1))),
        np.ones(n, dtype=np.int64), reduction="sum")


def _require_pgd(config: AttackConfig, name: str) -> None:
    if config.method != "pgd":
        raise ValueError(f"{name} is a gradient-combination attack; only the "
                         f"pgd base method applies")


def attack_top2(agg: BinaryAggregate, x: np.ndarray, y: np.ndarray,
                config: AttackConfig) -> AttackResult:
    """Lower the current highest arm while raising the runner-up: each step
    moves along the mean of (ascent on the top arm's positive-claim loss,
    descent on the second arm's), re-identifying the pair every step."""
    _require_pgd(config, "attack_top2")
    if agg.k < 2:
        raise ValueError("attack_top2 needs k >= 2 arms")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    indices = np.arange(len(y))
    comp = composite_logits_fn(agg)

    def grad(x_np: np.ndarray) -> np.ndarray:
        xt = ad.tensor(x_np, requires_grad=True)
        logits = comp(xt)
        order = np.argsort(-logits.data, axis=1, kind="stable")
        a1, a2 = order[:, 0], order[:, 1]
        loss = ad.scale(ad.sub(_positive_claim_loss(ad.take_per_row(logits, a1)),
                               _positive_claim_loss(ad.take_per_row(logits, a2))),
                        0.5)
        ad.backward(loss)
        _grad_per_example_check(xt.grad, indices)
        return xt.grad

    return _custom_pgd(agg, x, y, config, grad)


def attack_avg_gradient(agg: BinaryAggregate, x: np.ndarray, y: np.ndarray,
                        config: AttackConfig) -> AttackResult:
    """Step along the mean over arms of (ascent on the true-class arm's
    positive-claim loss, descent on every other arm's)."""
    _require_pgd(config, "attack_avg_gradient")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    indices = np.arange(len(y))
    comp = composite_logits_fn(agg)
    k = agg.k

    def grad(x_np: np.ndarray) -> np.ndarray:
        xt = ad.tensor(x_np, requires_grad=True)
        logits = comp(xt)
        # (1/k) * (L_y - sum_{j != y} L_j) == (1/k) * (2 L_y - sum_j L_j)
        loss_true = _positive_claim_loss(ad.take_per_row(logits, y))
        loss_all = _positive_claim_loss(
            ad.reshape(logits, (logits.data.size,)))
        loss = ad.scale(ad.sub(ad.scale(loss_true, 2.0), loss_all), 1.0 / k)
        ad.backward(loss)
        _grad_per_example_check(xt.grad, indices)
        return xt.grad

    return _custom_pgd(agg, x, y, config, grad)


def _custom_pgd(agg: BinaryAggregate, x: np.ndarray, y: np.ndarray,
                config: AttackConfig, grad_fn) -> AttackResult:
    n = len(y)
    eps = np.full(n, config.epsilon)
    step = np.full(n, config.resolved_step_size())
    x0 = (_random_start(x, config.norm, eps, config.seed, np.arange(n))
          if config.random_init else x.copy())
    adv = _pgd_iterate(x, x0, grad_fn, config.norm, eps, config.steps, step,
                       config.input_box)
    return _result(agg, adv, x, y, config.norm)


def attack_softmax(agg: BinaryAggregate, x: np.ndarray, y: np.ndarray,
                   config: AttackConfig) -> AttackResult:
    """Attack the softmax relaxation of the argmax aggregation: the stacked
    arm logits form one k-class model for the base attack. Success is judged
    against the true argmax prediction."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    res = _base_attack(composite_logits_fn(agg), x, y, config, seed=config.seed)
    return _result(agg, res.adversarial, x, y, config.norm)


def attack_softmax_top2(agg: BinaryAggregate, x: np.ndarray, y: np.ndarray,
                        config: AttackConfig) -> AttackResult:
    """Softmax attack restricted to the two highest-scoring arms of the
    clean input (the pair stays fixed during the attack)."""
    if agg.k < 2:
        raise ValueError("attack_softmax_top2 needs k >= 2 arms")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _, scores = predict_aggregate(agg, x)
    order = np.argsort(-scores, axis=1, kind="stable")
    a1, a2 = order[:, 0], order[:, 1]
    # label = the slot holding the true class; for examples already
    # misclassified outside the pair, attack the current top slot.
    yb = np.where(y == a2, 1, 0).astype(np.int64)
    comp = composite_logits_fn(agg)
    n = len(y)

    def pair_fn(xt: Tensor) -> Tensor:
        logits = comp(xt)
        return ad.hstack([ad.reshape(ad.take_per_row(logits, a1), (n, 1)),
                          ad.reshape(ad.take_per_row(logits, a2), (n, 1))])

    res = _base_attack(pair_fn, x, yb, config, seed=config.seed)
    return _result(agg, res.adversarial, x, y, config.norm)


def transfer_attack(surrogate, agg: BinaryAggregate, x: np.ndarray,
                    y: np.ndarray, config: AttackConfig,
                    mode: str = "untargeted") -> AttackResult:
    """Craft on a surrogate model, judge on the aggregation.

    ``surrogate`` is a (spec, params) pair or a logits closure. Targeted
    mode aims at the second-highest arm of the clean input (pgd only).
    """
    if mode not in ("untargeted", "targeted"):
        raise ValueError(f"unknown transfer mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    logits_fn = surrogate if callable(surrogate) else as_logits_fn(*surrogate)

    if mode == "targeted":
        if config.method != "pgd":
            raise ValueError("targeted transfer requires the pgd base attack")
        _, scores = predict_aggregate(agg, x)
        order = np.argsort(-scores, axis=1, kind="stable")
        target = order[:, 1].astype(np.int64)
        res = pgd_attack(logits_fn, x, y, config, target=target)
    else:
        res = _base_attack(logits_fn, x, y, config, seed=config.seed)
    return _result(agg, res.adversarial, x, y, config.norm)


# ---------------------------------------------------------------------------
# hierarchical (two-stage) classifiers
# ---------------------------------------------------------------------------

@dataclass
class HierarchicalClassifier:
    """Coarse router over partition blocks plus one fine model per block."""

    coarse: tuple[ModelSpec, Parameters]
    fines: tuple[tuple[ModelSpec, Parameters], ...]
    partition: tuple[int, ...]
    block_classes: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        blocks = sorted(set(self.partition))
        if blocks != list(range(len(self.fines))):
            raise ValueError(f"partition blocks {blocks} do not match {len(self.fines)} fine models")
        for b, classes in enumerate(self.block_classes):
            if any(self.partition[c] != b for c in classes):
                raise ValueError(f"block {b} lists classes outside its partition")
            if self.fines[b][0].output_dim != len(classes):
                raise ValueError(f"fine model {b} has {self.fines[b][0].output_dim} "
                                 f"outputs for {len(classes)} classes")


def train_hierarchical(spec_builder: Callable[[int], ModelSpec],
                       dataset: Dataset, partition: Sequence[int],
                       config: TrainConfig) -> HierarchicalClassifier:
    """Train the coarse router on block labels and each fine model on the
    subset of examples belonging to its block."""
    partition = tuple(int(b) for b in partition)
    if len(partition) != dataset.num_classes:
        raise ValueError(f"partition covers {len(partition)} classes, "
                         f"dataset has {dataset.num_classes}")
    n_blocks = max(partition) + 1
    block_classes = tuple(
        tuple(c for c in range(dataset.num_classes) if partition[c] == b)
        for b in range(n_blocks))
    if any(not bc for bc in block_classes):
        raise ValueError("every block needs at least one class")

    coarse_labels = np.asarray(partition, dtype=np.int64)[dataset.labels]
    coarse_ds = Dataset(dataset.inputs, coarse_labels, n_blocks, dataset.name)
    coarse_spec = spec_builder(n_blocks)
    coarse = train_model(coarse_spec, coarse_ds,
                         replace(config, seed=config.seed))

    fines = []
    for b, classes in enumerate(block_classes):
        mask = np.isin(dataset.labels, classes)
        within = {c: i for i, c in enumerate(classes)}
        labels = np.asarray([within[int(c)] for c in dataset.labels[mask]],
                            dtype=np.int64)
        fine_ds = Dataset(dataset.inputs[mask], labels, len(classes), dataset.name)
        fine_spec = spec_builder(len(classes))
        fines.append((fine_spec,
                      train_model(fine_spec, fine_ds,
                                  replace(config, seed=config.seed + 1 + b))))
    return HierarchicalClassifier((coarse_spec, coarse), tuple(fines),
                                  partition, block_classes)


def hierarchical_predict(h: HierarchicalClassifier, x: np.ndarray) -> np.ndarray:
    """Route by the coarse argmax, then pick the within-block argmax."""
    route = models.predict(*h.coarse, x)
    pred = np.empty(len(route), dtype=np.int64)
    for b, (spec, params) in enumerate(h.fines):
        mask = route == b
        if mask.any():
            fine = models.predict(spec, params, x[mask])
            pred[mask] = np.asarray(h.block_classes[b], dtype=np.int64)[fine]
    return pred


def hierarchical_attack(h: HierarchicalClassifier, x: np.ndarray,
                        y: np.ndarray, config: AttackConfig,
                        strategy: int) -> AttackResult:
    """Three routes: (1) attack the coarse router only, (2) attack the fine
    model the clean input routes to, (3) run (1) and retry failures with (2).
    Success is always judged end-to-end."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    part = np.asarray(h.partition, dtype=np.int64)

    if strategy == 1:
        res = _base_attack(as_logits_fn(*h.coarse), x, part[y], config,
                           seed=config.seed)
        adv = res.adversarial
    elif strategy == 2:
        route = models.predict(*h.coarse, x)
        adv = x.copy()
        for b, (spec, params) in enumerate(h.fines):
            classes = np.asarray(h.block_classes[b], dtype=np.int64)
            mask = (route == b) & np.isin(y, classes)
            if not mask.any():
                continue
            within = {int(c): i for i, c in enumerate(classes)}
            yb = np.asarray([within[int(c)] for c in y[mask]], dtype=np.int64)
            res = _base_attack(as_logits_fn(spec, params), x[mask], yb, config,
                               seed=config.seed + 1 + b,
                               example_indices=np.flatnonzero(mask))
            adv[mask] = res.adversarial
    elif strategy == 3:
        first = hierarchical_attack(h, x, y, config, strategy=1)
        adv = first.adversarial.copy()
        retry = ~first.success
        if retry.any():
            second = hierarchical_attack(h, x[retry], y[retry], config, strategy=2)
            adv[retry] = second.adversarial
    else:
        raise ValueError(f"strategy must be 1, 2 or 3, got {strategy}")

    pred = hierarchical_predict(h, adv)
    return AttackResult(adv, pred != y, perturbation_norms(adv - x, config.norm))


# ---------------------------------------------------------------------------
# aggregate checkpoint directory (per-arm .rbn files plus a manifest)
# ---------------------------------------------------------------------------

def save_aggregate(agg: BinaryAggregate, directory, config_hash: str = "") -> None:
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"k={agg.k}",
             f"class_names={','.join(agg.class_names)}",
             f"arm_spec={models.describe_spec(agg.arms[0][0])}"]
    for i, (_, params) in enumerate(agg.arms):
        fname = f"arm_{i}.rbn"
        (d / fname).write_bytes(models.save_checkpoint(params))
        lines.append(f"arm_{i}={fname}")
    lines.append(f"config_hash={config_hash}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_aggregate(directory) -> BinaryAggregate:
    from pathlib import Path

    d = Path(directory)
    manifest = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        manifest[key] = value
    k = int(manifest["k"])
    spec = models.parse_spec(manifest["arm_spec"])
    arms = tuple(
        (spec, models.load_checkpoint((d / manifest[f"arm_{i}"]).read_bytes()))
        for i in range(k))
    return BinaryAggregate(arms, tuple(manifest["class_names"].split(",")))


# ---------------------------------------------------------------------------
# robustness evaluation
# ---------------------------------------------------------------------------

AGGREGATE_ATTACKS = {
    "best_arm": attack_best_arm,
    "top2": attack_top2,
    "softmax": attack_softmax,
    "highest_arm": attack_highest_arm,
    "avg_gradient": attack_avg_gradient,
    "softmax_top2": attack_softmax_top2,
}

MODEL_ATTACKS = ("pgd", "cw")


@dataclass
class RobustnessReport:
    """Surviving accuracy per attack plus the strongest-of (pointwise AND)
    evaluation and pairwise success-overlap counts."""

    clean_accuracy: float
    per_attack: dict[str, float]
    strongest_of: float
    overlap: dict[str, dict[str, int]]
    success: dict[str, np.ndarray]


def _run_named_attack(target, name: str, x, y, config: AttackConfig
                      ) -> AttackResult:
    if isinstance(target, BinaryAggregate):
        try:
            fn = AGGREGATE_ATTACKS[name]
        except KeyError:
            raise ValueError(f"unknown aggregate attack {name!r}") from None
        return fn(target, x, y, config)
    spec, params = target
    if name == "pgd":
        return pgd_attack(as_logits_fn(spec, params), x, y, config)
    if name == "cw":
        return _base_attack(as_logits_fn(spec, params), x, y,
                            replace(config, method="cw"), seed=config.seed)
    raise ValueError(f"unknown model attack {name!r}")


def robust_accuracy(target, dataset: Dataset, attack_names: Sequence[str],
                    config: AttackConfig) -> RobustnessReport:
    """Run every listed attack on the full dataset. An example counts as
    robust under strongest-of only when all attacks fail on it."""
    names = list(dict.fromkeys(attack_names))
    if not names:
        raise ValueError("attack list must not be empty")
    x, y = dataset.inputs, dataset.labels
    if isinstance(target, BinaryAggregate):
        clean_pred, _ = predict_aggregate(target, x)
    else:
        clean_pred = models.predict(*target, x)

    success: dict[str, np.ndarray] = {}
    for name in names:
        success[name] = _run_named_attack(target, name, x, y, config).success
    any_success = np.logical_or.reduce([success[n] for n in names])
    overlap = {a: {b: int((success[a] & success[b]).sum()) for b in names}
               for a in names}
    return RobustnessReport(
        clean_accuracy=float((clean_pred == y).mean()),
        per_attack={n: float(1.0 - success[n].mean()) for n in names},
        strongest_of=float(1.0 - any_success.mean()),
        overlap=overlap,
        success=success,
    )
