"""Command-line entry point: config-driven training, attack evaluation and
analysis with reproducible CSV/JSON reports.

Configs are flat INI files with a fixed key vocabulary per section; unknown
sections or keys are rejected. The master seed fans out to every consumer
through stable hashing, so each artifact is byte-reproducible from
(config, seed) alone, regardless of ``--jobs``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import aggregate as agg_mod
from . import analysis, attacks, data, models, training

SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


_SECTION_KEYS = {
    "experiment": {"seed"},
    "dataset": {"kind", "k", "n_per_class", "test_n_per_class", "spread",
                "images", "labels", "test_images", "test_labels",
                "downsample", "path"},
    "model": {"arch", "hidden", "channels", "kernel", "dir", "surrogate_dir"},
    "train": {"epochs", "batch_size", "lr", "lr_decay_epochs", "weight_decay",
              "defense", "lambda", "warmup_surrogates"},
    "attack": {"norm", "epsilon", "steps", "step_size", "random_init",
               "method", "attacks", "box_lo", "box_hi", "cw_iterations",
               "cw_learn_rate", "cw_kappa", "cw_search_steps", "cw_c_lo",
               "cw_c_hi"},
    "analyze": {"mode", "permutations", "eps_grid", "eps_eval", "eps_max",
                "tolerance", "bins", "partition", "ensemble_size",
                "transfer_mode", "strategies", "eval_steps"},
    "output": {"dir"},
}


def derive_seed(master: int, *purpose) -> int:
    """Stable fan-out of the master seed, independent of hash randomization."""
    msg = f"{master}:" + ":".join(str(p) for p in purpose)
    return int.from_bytes(hashlib.sha256(msg.encode()).digest()[:8], "little") % (2 ** 62)


def load_config(path: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in cp.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
    return cp


def config_text(cp: configparser.ConfigParser, master_seed: int) -> str:
    """Canonical resolved form used for hashing and report provenance."""
    lines = [f"[experiment]", f"seed = {master_seed}"]
    for section in sorted(cp.sections()):
        if section == "experiment":
            continue
        lines.append(f"[{section}]")
        for key in sorted(cp[section]):
            lines.append(f"{key} = {cp[section][key]}")
    return "\n".join(lines)


def _get(cp, section, key, default=None, required=False, cast=str):
    if cp.has_option(section, key):
        raw = cp.get(section, key)
        try:
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for '{key}' in [{section}]: {raw!r}") from e
    if required:
        raise ConfigError(f"missing required key '{key}' in section [{section}]")
    return default


def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(",") if v.strip())


def _float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.split(",") if v.strip())


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------

def build_datasets(cp, master_seed: int) -> tuple[data.Dataset, data.Dataset]:
    """Train and test splits per the [dataset] section."""
    kind = _get(cp, "dataset", "kind", required=True)
    if kind == "gaussians":
        k = _get(cp, "dataset", "k", required=True, cast=int)
        n = _get(cp, "dataset", "n_per_class", required=True, cast=int)
        n_test = _get(cp, "dataset", "test_n_per_class", default=n, cast=int)
        spread = _get(cp, "dataset", "spread", default=0.25, cast=float)
        train = data.gen_gaussians(k, n, spread, derive_seed(master_seed, "data", "train"))
        test = data.gen_gaussians(k, n_test, spread, derive_seed(master_seed, "data", "test"))
        return train, test
    if kind == "idx":
        down = _get(cp, "dataset", "downsample", default=True, cast=bool)
        paths = {key: _get(cp, "dataset", key, required=True)
                 for key in ("images", "labels", "test_images", "test_labels")}
        for key, p in paths.items():
            if not Path(p).exists():
                raise ConfigError(f"dataset path for '{key}' does not exist: {p}")
        train = data.load_idx(paths["images"], paths["labels"], downsample=down)
        test = data.load_idx(paths["test_images"], paths["test_labels"], downsample=down)
        return train, test
    if kind == "csv":
        path = _get(cp, "dataset", "path", required=True)
        if not Path(path).exists():
            raise ConfigError(f"dataset path for 'path' does not exist: {path}")
        ds = data.load_csv(path)
        return ds, ds
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_spec(cp, input_shape: tuple[int, ...], out_dim: int) -> models.ModelSpec:
    arch = _get(cp, "model", "arch", default="mlp")
    if arch == "mlp":
        hidden = _get(cp, "model", "hidden", default="64,64", cast=_int_tuple)
        if len(input_shape) != 1:
            raise ConfigError(f"arch mlp needs flat inputs, dataset has shape {input_shape}")
        return models.mlp_spec(input_shape[0], hidden, out_dim)
    if arch == "cnn":
        if len(input_shape) != 3:
            raise ConfigError(f"arch cnn needs image inputs, dataset has shape {input_shape}")
        channels = _get(cp, "model", "channels", default="8,16", cast=_int_tuple)
        kernel = _get(cp, "model", "kernel", default=3, cast=int)
        return models.cnn_spec(*input_shape, out_dim, channels=channels, kernel=kernel)
    raise ConfigError(f"unknown model arch {arch!r}")


def build_attack(cp, master_seed: int, purpose: str) -> attacks.AttackConfig:
    box_lo = _get(cp, "attack", "box_lo", default=None, cast=float)
    box_hi = _get(cp, "attack", "box_hi", default=None, cast=float)
    box = (box_lo, box_hi) if box_lo is not None and box_hi is not None else None
    cw_search = attacks.CwSearch(
        steps=_get(cp, "attack", "cw_search_steps", default=9, cast=int),
        c_lo=_get(cp, "attack", "cw_c_lo", default=1e-3, cast=float),
        c_hi=_get(cp, "attack", "cw_c_hi", default=1e2, cast=float))
    return attacks.AttackConfig(
        norm=_get(cp, "attack", "norm", default="l2"),
        epsilon=_get(cp, "attack", "epsilon", required=True, cast=float),
        steps=_get(cp, "attack", "steps", default=10, cast=int),
        step_size=_get(cp, "attack", "step_size", default=None, cast=float),
        random_init=_get(cp, "attack", "random_init", default=True, cast=bool),
        seed=derive_seed(master_seed, "attack", purpose),
        input_box=box,
        method=_get(cp, "attack", "method", default="pgd"),
        cw_search=cw_search,
        cw_iterations=_get(cp, "attack", "cw_iterations", default=200, cast=int),
        cw_learn_rate=_get(cp, "attack", "cw_learn_rate", default=0.01, cast=float),
        cw_kappa=_get(cp, "attack", "cw_kappa", default=0.0, cast=float),
    )


def build_train_config(cp, master_seed: int, purpose: str) -> training.TrainConfig:
    defense = _get(cp, "train", "defense", default="standard")
    attack = build_attack(cp, master_seed, "train") if cp.has_section("attack") else None
    if defense != "standard" and attack is None:
        raise ConfigError(f"defense '{defense}' needs an [attack] section")
    return training.TrainConfig(
        epochs=_get(cp, "train", "epochs", required=True, cast=int),
        batch_size=_get(cp, "train", "batch_size", default=128, cast=int),
        lr=_get(cp, "train", "lr", default=0.1, cast=float),
        lr_decay_epochs=_get(cp, "train", "lr_decay_epochs", default=None, cast=_int_tuple),
        weight_decay=_get(cp, "train", "weight_decay", default=5e-4, cast=float),
        defense=defense,
        lam=_get(cp, "train", "lambda", default=1.0, cast=float),
        attack=attack,
        seed=derive_seed(master_seed, "train", purpose),
        warmup_surrogates=_get(cp, "train", "warmup_surrogates", default=False, cast=bool),
    )


# ---------------------------------------------------------------------------
# deterministic artifact writers
# ---------------------------------------------------------------------------

class OutputDir:
    def __init__(self, root: str, overwrite: bool):
        self.root = Path(root)
        self.overwrite = overwrite
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.exists() and not self.overwrite:
            raise ConfigError(f"output file exists (pass --overwrite): {p}")
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return p

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        return p


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def provenance(cp, master_seed: int) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "version": f"robinlab-{__version__}",
        "seed": master_seed,
        "config": config_text(cp, master_seed),
    }


def _train_log_rows(log: list[dict]):
    return [[r["epoch"], r["clean_loss"], r["adv_fraction"], r["train_acc"]]
            for r in log]


_LOG_HEADER = ["epoch", "clean_loss", "adv_fraction", "train_acc"]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cp, out: OutputDir, master_seed: int, jobs: int) -> int:
    train_set, _ = build_datasets(cp, master_seed)
    spec = build_spec(cp, train_set.inputs.shape[1:], train_set.num_classes)
    config = build_train_config(cp, master_seed, "model")
    log: list = []
    params = training.train_model(spec, train_set, config, log)
    out.path("model.rbn").write_bytes(models.save_checkpoint(params))
    out.write_csv("train_log.csv", _LOG_HEADER, _train_log_rows(log))
    chash = hashlib.sha256(config_text(cp, master_seed).encode()).hexdigest()
    out.path("manifest.txt").write_text(
        f"spec={models.describe_spec(spec)}\nconfig_hash={chash}\n")
    out.write_json("report.json", {**provenance(cp, master_seed),
                                   "final_train_acc": log[-1]["train_acc"] if log else None})
    return 0


def cmd_robin_train(cp, out: OutputDir, master_seed: int, jobs: int) -> int:
    train_set, _ = build_datasets(cp, master_seed)
    spec = build_spec(cp, train_set.inputs.shape[1:], 1)
    config = build_train_config(cp, master_seed, "robin")
    logs: list = []
    agg = agg_mod.train_robin(spec, train_set, config, jobs=jobs, logs=logs)
    chash = hashlib.sha256(config_text(cp, master_seed).encode()).hexdigest()
    for name in [f"arm_{i}.rbn" for i in range(agg.k)] + ["manifest.txt"]:
        out.path(name)  # collision check before any write
    agg_mod.save_aggregate(agg, out.root, config_hash=chash)
    for i, log in enumerate(logs):
        out.write_csv(f"arm_{i}_log.csv", _LOG_HEADER, _train_log_rows(log))
    out.write_json("report.json", provenance(cp, master_seed))
    return 0


def _load_model_dir(path_str: str, key: str):
    p = Path(path_str)
    if not p.exists():
        raise ConfigError(f"model path for '{key}' does not exist: {p}")
    manifest = p / "manifest.txt"
    if not manifest.exists():
        raise ConfigError(f"no manifest.txt under {p} (key '{key}')")
    entries = dict(line.partition("=")[::2] for line in manifest.read_text().splitlines())
    if "k" in entries:  # aggregate directory
        return agg_mod.load_aggregate(p)
    spec = models.parse_spec(entries["spec"])
    params = models.load_checkpoint((p / "model.rbn").read_bytes())
    return spec, params


def _attack_names(cp, target) -> list[str]:
    raw = _get(cp, "attack", "attacks", required=True)
    names = [n.strip() for n in raw.split(",") if n.strip()]
    if not names:
        raise ConfigError("empty attack list for key 'attacks'")
    valid = (set(agg_mod.AGGREGATE_ATTACKS) if isinstance(target, agg_mod.BinaryAggregate)
             else set(agg_mod.MODEL_ATTACKS))
    for n in names:
        if n not in valid:
            raise ConfigError(f"unknown attack '{n}' for this target (choose from {sorted(valid)})")
    return names


def _attack_report(cp, out: OutputDir, master_seed: int, target) -> int:
    _, test_set = build_datasets(cp, master_seed)
    config = build_attack(cp, master_seed, "eval")
    names = _attack_names(cp, target)
    report = agg_mod.robust_accuracy(target, test_set, names, config)

    out.write_json("report.json", {
        **provenance(cp, master_seed),
        "clean_accuracy": report.clean_accuracy,
        "per_attack": report.per_attack,
        "strongest_of": report.strongest_of,
        "overlap": report.overlap,
        "attack_settings": {
            "norm": config.norm, "epsilon": config.epsilon,
            "steps": config.steps, "step_size": config.resolved_step_size(),
            "random_init": config.random_init, "method": config.method,
            "seed": config.seed,
        },
    })
    names_u = list(report.success)
    rows = [[i, int(y)] + [report.success[n][i] for n in names_u]
            for i, y in enumerate(test_set.labels)]
    out.write_csv("per_example.csv", ["index", "label"] + [f"{n}_success" for n in names_u],
                  rows)
    return 0


def cmd_attack(cp, out: OutputDir, master_seed: int, jobs: int) -> int:
    target = _load_model_dir(_get(cp, "model", "dir", required=True), "dir")
    if isinstance(target, agg_mod.BinaryAggregate):
        raise ConfigError("key 'dir' points at an aggregate; use robin-attack")
    _check_shapes(target[0], target[0].output_dim, cp, master_seed)
    return _attack_report(cp, out, master_seed, target)


def cmd_robin_attack(cp, out: OutputDir, master_seed: int, jobs: int) -> int:
    target = _load_model_dir(_get(cp, "model", "dir", required=True), "dir")
    if not isinstance(target, agg_mod.BinaryAggregate):
        raise ConfigError("key 'dir' points at a single model; use attack")
    _check_shapes(target.arms[0][0], target.k, cp, master_seed)
    return _attack_report(cp, out, master_seed, target)


def _check_shapes(spec: models.ModelSpec, classes: int, cp, master_seed: int) -> None:
    _, test_set = build_datasets(cp, master_seed)
    if test_set.inputs.shape[1:] != spec.input_shape:
        raise ConfigError(
            f"checkpoint expects input shape {spec.input_shape}, "
            f"dataset provides {test_set.inputs.shape[1:]}")
    if test_set.num_classes != classes:
        raise ConfigError(
            f"checkpoint covers {classes} classes, "
            f"dataset provides {test_set.num_classes}")


# ---------------------------------------------------------------------------
# analyze modes
# ---------------------------------------------------------------------------

def _analyze_coherence(cp, out, master_seed):
    agg = _load_model_dir(_get(cp, "model", "dir", required=True), "dir")
    if not isinstance(agg, agg_mod.BinaryAggregate):
        raise ConfigError("coherence mode needs an aggregate directory "
                          "(train one with robin-train)")
    _, test_set = build_datasets(cp, master_seed)
    bins = _get(cp, "analyze", "bins", default=30, cast=int)
    robin_rep = analysis.coherence_report(agg, test_set, bins=bins)

    ensemble_size = _get(cp, "analyze", "ensemble_size", default=5, cast=int)
    members = []
    spec = build_spec(cp, test_set.inputs.shape[1:], test_set.num_classes)
    train_set, _ = build_datasets(cp, master_seed)
    for m in range(ensemble_size):
        config = build_train_config(cp, master_seed, f"ensemble{m}")
        config = replace(config, seed=derive_seed(master_seed, "ensemble", m))
        members.append((spec, training.train_model(spec, train_set, config)))
    ens_rep = analysis.ensemble_coherence_report(members, test_set, bins=bins)

    out.write_csv("coherence.csv", ["kind", "value"],
                  [["robin", v] for v in robin_rep.values]
                  + [["ensemble", v] for v in ens_rep.values])
    out.write_json("coherence.json", {
        **provenance(cp, master_seed),
        "robin_mean": robin_rep.mean, "ensemble_mean": ens_rep.mean,
        "robin_skipped": robin_rep.skipped, "ensemble_skipped": ens_rep.skipped,
        "bin_edges": robin_rep.bin_edges.tolist(),
        "robin_counts": robin_rep.counts.tolist(),
        "ensemble_counts": ens_rep.counts.tolist(),
        "pairs": ensemble_size * (ensemble_size - 1) // 2,
    })
    return 0


def _sweep_inputs(cp, master_seed):
    train_set, test_set = build_datasets(cp, master_seed)
    k = train_set.num_classes
    config = build_train_config(cp, master_seed, "sweep")
    if config.attack is None:
        raise ConfigError("sweep modes need an [attack] section for adversarial training")
    builder = lambda j: build_spec(cp, train_set.inputs.shape[1:], j)  # noqa: E731
    perms = _get(cp, "analyze", "permutations", default=3, cast=int)
    return train_set, test_set, k, builder, config, perms


def _analyze_simplicity(cp, out, master_seed):
    train_set, test_set, k, builder, config, perms = _sweep_inputs(cp, master_seed)
    train_eps = config.attack.epsilon
    eps_grid = _get(cp, "analyze", "eps_grid", default=None, cast=_float_tuple)
    if eps_grid is None:
        eps_grid = tuple(m * train_eps for m in (0.5, 1.0, 1.5, 2.0))
    eval_steps = _get(cp, "analyze", "eval_steps", default=20, cast=int)
    rows = analysis.simplicity_sweep(train_set, test_set, k, builder, config,
                                     eps_grid, perms, eval_steps=eval_steps)
    out.write_csv("simplicity.csv",
                  ["permutation", "j", "eps", "robust_acc", "clean_binary_acc"],
                  [[r["permutation"], r["j"], r["eps"], r["robust_acc"],
                    r["clean_binary_acc"]] for r in rows])
    mean = {}
    for r in rows:
        mean.setdefault((r["j"], r["eps"]), []).append(r["robust_acc"])
    out.write_json("simplicity.json", {
        **provenance(cp, master_seed),
        "attack_steps": eval_steps,
        "train_epsilon": train_eps,
        "mean_robust_acc": {f"j={j},eps={e}": float(np.mean(v))
                            for (j, e), v in sorted(mean.items())},
    })
    return 0


def _analyze_separation(cp, out, master_seed):
    train_set, test_set, k, builder, config, perms = _sweep_inputs(cp, master_seed)
    eps_eval = _get(cp, "analyze", "eps_eval", default=2.0 * config.attack.epsilon,
                    cast=float)
    eval_steps = _get(cp, "analyze", "eval_steps", default=20, cast=int)
    rows = analysis.separation_sweep(train_set, test_set, k, builder, config,
                                     eps_eval, perms, eval_steps=eval_steps)
    out.write_csv("separation.csv", ["permutation", "j", "regime", "accuracy"],
                  [[r["permutation"], r["j"], r["regime"], r["accuracy"]] for r in rows])
    summary = {}
    for regime in ("robust", "standard"):
        curve = analysis.curve_by_j(rows, regime)
        summary[regime] = {str(j): v for j, v in curve.items()}
        vals = list(curve.values())
        summary[f"{regime}_std"] = {
            str(j): float(np.std([r["accuracy"] for r in rows
                                  if r["regime"] == regime and r["j"] == j]))
            for j in curve}
        summary[f"{regime}_drop"] = vals[0] - vals[-1] if vals else None
    out.write_json("separation.json", {
        **provenance(cp, master_seed), "eps_eval": eps_eval, **summary})
    return 0


def _analyze_boundary(cp, out, master_seed):
    target = _load_model_dir(_get(cp, "model", "dir", required=True), "dir")
    _, test_set = build_datasets(cp, master_seed)
    config = build_attack(cp, master_seed, "boundary")
    eps_max = _get(cp, "analyze", "eps_max", default=4.0 * config.epsilon, cast=float)
    tolerance = _get(cp, "analyze", "tolerance", default=eps_max / 100.0, cast=float)
    bins = _get(cp, "analyze", "bins", default=30, cast=int)
    if isinstance(target, agg_mod.BinaryAggregate):
        logits_fn = agg_mod.composite_logits_fn(target)
    else:
        logits_fn = attacks.as_logits_fn(*target)
    hist = analysis.boundary_distribution(
        logits_fn, test_set, config.norm, eps_max, tolerance=tolerance,
        bins=bins, steps=config.steps, seed=config.seed)
    out.write_csv("boundary.csv", ["index", "distance", "found"],
                  [[i, d, f] for i, (d, f) in
                   enumerate(zip(hist["distances"], hist["found"]))])
    out.write_json("boundary.json", {
        **provenance(cp, master_seed),
        "mean_distance": hist["mean"],
        "bin_edges": hist["edges"].tolist(),
        "counts": hist["counts"].tolist(),
        "eps_max": eps_max,
        "total": int(hist["counts"].sum()),
    })
    return 0


def _analyze_transfer(cp, out, master_seed):
    agg = _load_model_dir(_get(cp, "model", "dir", required=True), "dir")
    if not isinstance(agg, agg_mod.BinaryAggregate):
        raise ConfigError("transfer mode needs an aggregate in 'dir'")
    surrogate = _load_model_dir(_get(cp, "model", "surrogate_dir", required=True),
                                "surrogate_dir")
    if isinstance(surrogate, agg_mod.BinaryAggregate):
        raise ConfigError("'surrogate_dir' must hold a single multiclass model")
    _, test_set = build_datasets(cp, master_seed)
    config = build_attack(cp, master_seed, "transfer")
    rows, summary = [], {}
    for mode in ("untargeted", "targeted"):
        res = agg_mod.transfer_attack(surrogate, agg, test_set.inputs,
                                      test_set.labels, config, mode=mode)
        summary[mode] = float(1.0 - res.success.mean())
        rows += [[mode, i, s] for i, s in enumerate(res.success)]
    direct = agg_mod.attack_softmax(agg, test_set.inputs, test_set.labels, config)
    summary["softmax_direct"] = float(1.0 - direct.success.mean())
    out.write_csv("transfer.csv", ["mode", "index", "success"], rows)
    out.write_json("transfer.json", {**provenance(cp, master_seed),
                                     "surviving_accuracy": summary})
    return 0


def _analyze_hierarchical(cp, out, master_seed):
    train_set, test_set = build_datasets(cp, master_seed)
    partition = _get(cp, "analyze", "partition", required=True, cast=_int_tuple)
    config = build_train_config(cp, master_seed, "hierarchical")
    builder = lambda k: build_spec(cp, train_set.inputs.shape[1:], k)  # noqa: E731
    h = agg_mod.train_hierarchical(builder, train_set, partition, config)
    attack = build_attack(cp, master_seed, "hier-eval")
    strategies = _get(cp, "analyze", "strategies", default=(1, 2, 3), cast=_int_tuple)

    pred = agg_mod.hierarchical_predict(h, test_set.inputs)
    summary = {"clean_accuracy": float((pred == test_set.labels).mean())}
    rows = []
    for s in strategies:
        res = agg_mod.hierarchical_attack(h, test_set.inputs, test_set.labels,
                                          attack, strategy=s)
        summary[f"strategy_{s}"] = float(1.0 - res.success.mean())
        rows += [[s, i, ok] for i, ok in enumerate(res.success)]
    out.write_csv("hierarchical.csv", ["strategy", "index", "success"], rows)
    out.write_json("hierarchical.json", {
        **provenance(cp, master_seed),
        "partition": list(partition),
        "surviving_accuracy": summary,
    })
    return 0


_ANALYZE_MODES = {
    "coherence": _analyze_coherence,
    "simplicity": _analyze_simplicity,
    "separation": _analyze_separation,
    "boundary": _analyze_boundary,
    "transfer": _analyze_transfer,
    "hierarchical": _analyze_hierarchical,
}


def cmd_analyze(cp, out: OutputDir, master_seed: int, jobs: int) -> int:
    mode = _get(cp, "analyze", "mode", required=True)
    if mode not in _ANALYZE_MODES:
        raise ConfigError(f"unknown analyze mode {mode!r} "
                          f"(choose from {sorted(_ANALYZE_MODES)})")
    return _ANALYZE_MODES[mode](cp, out, master_seed)


# ---------------------------------------------------------------------------

_COMMANDS = {
    "train": cmd_train,
    "robin-train": cmd_robin_train,
    "attack": cmd_attack,
    "robin-attack": cmd_robin_attack,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="robinlab",
        description="Adversarial-robustness workbench: training, attacks, "
                    "binary aggregation and analysis.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="INI experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides [experiment] seed)")
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for independent cells")
    parser.add_argument("--out", default=None,
                        help="output directory (overrides [output] dir)")
    parser.add_argument("--overwrite", action="store_true",
                        help="allow replacing existing output files")
    args = parser.parse_args(argv)

    try:
        cp = load_config(args.config)
        master_seed = args.seed if args.seed is not None else _get(
            cp, "experiment", "seed", default=0, cast=int)
        out_dir = args.out or _get(cp, "output", "dir", required=args.out is None)
        out = OutputDir(out_dir, args.overwrite)
        return _COMMANDS[args.command](cp, out, master_seed, max(1, args.jobs))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (models.CheckpointError, data.IdxFormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
