"""Experiment orchestration: tasks, teachers, merge paths, exchanges, probes, sweeps.

Every run writes into its own directory, starting with ``run.json`` that
holds the fully resolved configuration. Re-running that configuration
reproduces every numeric output.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .counting import count_table
from .idx import load_mnist_pair
from .network import (ACTIVATIONS, HESSIAN_CAP, LOSS_KINDS, Dataset, NetworkParams, forward,
                      init_network, loss, save_checkpoint)
from .numerics import Rng
from .optimize import GDSettings, gd_minimize
from .pathfinder import (MergeSettings, permutation_path, permutation_point, select_pair,
                         verify_path_properties)
from .plateau import analyze_point, compose_exchanges, constraint_null_basis, probe_hyperplane
from .symmetry import (MergePlan, PermutationSpec, apply_permutation, build_kth_order_point,
                       neuron_matrix, reduce_network)

log = logging.getLogger(__name__)

TASKS = ("toy-fig1", "teacher-student", "mnist-regression")

TASK_DEFAULTS = {
    "toy-fig1": {"widths": [2, 5, 1], "activation": "relu", "loss_kind": "mse", "n_samples": 1000, "layer": 1},
    "teacher-student": {"widths": [4, 8, 8, 2], "activation": "softplus", "loss_kind": "normalized_mse",
                        "n_samples": 500, "layer": 2},
    "mnist-regression": {"widths": [49, 10, 10, 10], "activation": "relu", "loss_kind": "normalized_mse",
                         "n_samples": 2000, "layer": 2},
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    task: str = "toy-fig1"
    seed: int | None = None  # required; resolved() rejects None
    widths: list | None = None
    activation: str | None = None
    loss_kind: str | None = None
    n_samples: int | None = None
    layer: int | None = None
    pair: list | None = None  # [l, m]; None picks the most cosine-similar pair
    # synthetic teacher-student generator
    generator_width: int = 16
    teacher_max_iters: int = 3000
    # merge descent
    n_delta_steps: int = 200
    delta_floor_ratio: float = 1e-4
    equalization_steps: int = 50
    max_iters: int = 50000
    grad_tolerance: float | None = None
    method: str = "bfgs"
    # mnist ingestion
    images: str | None = None
    labels: str | None = None
    downsample: str = "4x"
    # exchange / probe
    target_i: int | None = None
    cycle_j: int | None = None
    steps_per_stage: int = 25
    order_K: int = 1
    n_probes: int = 20
    radius: float = 0.5
    accuracy_margin: float = 0.05
    spectrum: bool = True
    output_dir: str = "runs/latest"

    def resolved(self) -> "ExperimentConfig":
        """Copy with task defaults filled in; validates everything."""
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.seed is None:
            raise ConfigError("a seed is required")
        d = TASK_DEFAULTS[self.task]
        cfg = dataclasses.replace(self, **{k: v for k, v in d.items() if getattr(self, k) is None})
        cfg.widths = [int(w) for w in cfg.widths]
        if len(cfg.widths) < 3 or min(cfg.widths) < 1:
            raise ConfigError(f"need at least one hidden layer and positive widths, got {cfg.widths}")
        if cfg.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if cfg.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if not 1 <= cfg.layer <= len(cfg.widths) - 2:
            raise ConfigError(f"layer {cfg.layer} is not a hidden layer of {cfg.widths}")
        if cfg.pair is not None:
            if len(cfg.pair) != 2 or cfg.pair[0] == cfg.pair[1]:
                raise ConfigError("pair must be two distinct neuron indices")
            if not all(0 <= int(i) < cfg.widths[cfg.layer] for i in cfg.pair):
                raise ConfigError(f"pair {cfg.pair} out of range for width {cfg.widths[cfg.layer]}")
            cfg.pair = [int(i) for i in cfg.pair]
        if cfg.task == "toy-fig1" and cfg.widths[0] != 2:
            log.info("toy-fig1 with %d-dimensional inputs", cfg.widths[0])
        if cfg.task == "mnist-regression":
            if not cfg.images or not cfg.labels:
                raise ConfigError("mnist-regression needs --images and --labels")
            side = {"none": 28, "2x": 14, "4x": 7}.get(cfg.downsample)
            if side is None:
                raise ConfigError("downsample must be none, 2x or 4x")
            if cfg.widths[0] != side * side or cfg.widths[-1] != 10:
                raise ConfigError(f"mnist widths must start with {side * side} and end with 10")
        if cfg.method not in ("bfgs", "lbfgs", "gd"):
            raise ConfigError("method must be bfgs, lbfgs or gd")
        if cfg.n_delta_steps < 2 or cfg.n_samples < 1:
            raise ConfigError("need n_delta_steps >= 2 and n_samples >= 1")
        return cfg

    def merge_settings(self) -> MergeSettings:
        inner = GDSettings(max_iters=self.max_iters, grad_tolerance=self.grad_tolerance, method=self.method)
        return MergeSettings(n_delta_steps=self.n_delta_steps, delta_floor_ratio=self.delta_floor_ratio,
                             inner=inner, equalization_steps=self.equalization_steps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_dir(cfg: ExperimentConfig, kind: str, extra: dict | None = None) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = {"command": kind, "config": cfg.to_dict(), "version": __version__,
           "numpy": np.__version__, "python": platform.python_version()}
    if extra:
        run.update(extra)
    _write_json(out / "run.json", run)
    return out


# ---------------------------------------------------------------- tasks

def make_teacher(cfg: ExperimentConfig):
    """Build the teacher network and the dataset relabeled with its outputs.

    Returns:
        (teacher, data, meta). ``data.targets`` equal the teacher's outputs,
        so the teacher sits at a global minimum with loss 0.
    """
    cfg = cfg.resolved()
    rng = Rng(cfg.seed)
    meta: dict = {"task": cfg.task, "seed": cfg.seed}
    if cfg.task == "toy-fig1":
        # a random teacher, not trained
        teacher = init_network(cfg.widths, cfg.activation, rng)
        x = rng.normal_array((cfg.n_samples, cfg.widths[0]))
        labels = None
    elif cfg.task == "teacher-student":
        gen = init_network([cfg.widths[0], cfg.generator_width, cfg.widths[-1]], cfg.activation, rng.spawn())
        x = rng.normal_array((cfg.n_samples, cfg.widths[0]))
        raw = Dataset(x, forward(gen, x))
        teacher, res = gd_minimize(init_network(cfg.widths, cfg.activation, rng), raw, "mse",
                                   settings=GDSettings(max_iters=cfg.teacher_max_iters))
        meta.update(pretrain_loss=res.value, pretrain_iters=res.n_iters, pretrain_status=res.status)
        labels = None
    else:
        raw = load_mnist_pair(cfg.images, cfg.labels, cfg.downsample, cfg.n_samples)
        x, labels = raw.inputs, raw.labels
        teacher, res = gd_minimize(init_network(cfg.widths, cfg.activation, rng), raw, "cross_entropy",
                                   settings=GDSettings(max_iters=cfg.teacher_max_iters))
        meta.update(pretrain_loss=res.value, pretrain_iters=res.n_iters, pretrain_status=res.status,
                    pretrain_accuracy=accuracy(teacher, raw))
    data = Dataset(x, forward(teacher, x), labels=labels)
    meta["relabeled_loss"] = loss(teacher, data, cfg.loss_kind)
    return teacher, data, meta


def accuracy(net: NetworkParams, data: Dataset) -> float | None:
    if data.labels is None:
        return None
    return float(np.mean(np.argmax(forward(net, data.inputs), axis=1) == data.labels))


def train_teacher(cfg: ExperimentConfig):
    cfg = cfg.resolved()
    out = _prepare_dir(cfg, "teacher")
    teacher, data, meta = make_teacher(cfg)
    save_checkpoint(teacher, out / "teacher.json", meta)
    _write_json(out / "teacher_summary.json", meta)
    return teacher, data, meta


# ---------------------------------------------------------------- merge paths

def run_merge_path(cfg: ExperimentConfig, teacher: NetworkParams | None = None, data: Dataset | None = None,
                   write: bool = True) -> dict:
    """Merge a pair, equalize, mirror, analyze the permutation point.

    Writes trace.csv, endpoint.json, permutation_point.json, spectrum.json
    and, for 2-d inputs, vectors.json with layer-1 vectors along the path.
    """
    cfg = cfg.resolved()
    out = _prepare_dir(cfg, "merge-path") if write else None
    if teacher is None or data is None:
        teacher, data, _ = make_teacher(cfg)
    k = cfg.layer
    l, m = select_pair(teacher, k, cfg.pair)
    t0 = time.perf_counter()
    trace = permutation_path(teacher, data, cfg.loss_kind, k, l, m, cfg.merge_settings())
    pp = permutation_point(trace)
    small, plan = reduce_network(pp.params, k)
    summary = {
        "layer": k, "pair": [l, m],
        "start_loss": trace.samples[0].loss,
        "plateau_loss": trace.max_loss(),
        "permutation_point_loss": pp.loss,
        "all_converged": trace.all_converged,
        "n_samples": len(trace.samples),
        "inner_iters": int(sum(s.inner_iters for s in trace.samples)),
        "delta0": trace.flags.get("delta0"),
        "reduced_plan": plan.to_dict(),
        "seconds_path": time.perf_counter() - t0,
    }
    if data.labels is not None:
        accs = [accuracy(s.params, data) for s in trace.samples]
        summary["accuracy_start"] = accs[0]
        summary["accuracy_permutation_point"] = accuracy(pp.params, data)
        summary["accuracy_min"] = min(accs)
        summary["accuracy_within_margin"] = min(accs) >= accs[0] - cfg.accuracy_margin
    if cfg.spectrum and pp.params.n_params <= HESSIAN_CAP:
        report = analyze_point(pp.params, data, cfg.loss_kind, k, 1)
        summary["criticality"] = report.to_dict()
    if write:
        trace.write_csv(out / "trace.csv")
        save_checkpoint(trace.end, out / "endpoint.json", {"pair": [l, m], "layer": k})
        save_checkpoint(pp.params, out / "permutation_point.json", {"pair": [l, m], "layer": k})
        if "criticality" in summary:
            _write_json(out / "spectrum.json", summary["criticality"])
        if data.labels is not None:
            with open(out / "accuracy.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["step", "t", "accuracy"])
                for i, (s, a) in enumerate(zip(trace.samples, accs)):
                    wr.writerow([i, format(s.t, ".17g"), format(a, ".17g")])
        if teacher.widths[0] == 2:
            _write_json(out / "vectors.json", _vector_snapshots(trace))
        _write_json(out / "summary.json", summary)
    summary["trace"] = trace
    return summary


def _vector_snapshots(trace) -> dict:
    picks = {"start": trace.samples[0], "permutation_point": permutation_point(trace), "end": trace.samples[-1]}
    return {name: {"t": s.t, "vectors": neuron_matrix(s.params, 1).tolist(),
                   "output_weights": s.params.weights[1].tolist()} for name, s in picks.items()}


def run_width_sweep(cfg: ExperimentConfig, widths_list, seeds, write: bool = True) -> dict:
    """Plateau loss of a max-cosine merge in layer k for each hidden width H and seed.

    Hidden layers all get width H; the pair is always the most similar one.
    """
    base = cfg.resolved()
    out = _prepare_dir(base, "sweep", {"widths_list": list(widths_list), "seeds": list(seeds)}) if write else None
    rows = []
    for h in widths_list:
        for seed in seeds:
            w = [base.widths[0]] + [int(h)] * (len(base.widths) - 2) + [base.widths[-1]]
            c = dataclasses.replace(base, widths=w, seed=int(seed), pair=None, spectrum=False,
                                    output_dir=str(Path(base.output_dir) / f"H{h}_seed{seed}"))
            s = run_merge_path(c, write=False)
            rows.append({"H": int(h), "seed": int(seed), "pair": "-".join(map(str, s["pair"])),
                         "plateau_loss": s["plateau_loss"],
                         "permutation_point_loss": s["permutation_point_loss"],
                         "all_converged": s["all_converged"]})
            log.info("H=%d seed=%d plateau=%.6e", h, seed, s["plateau_loss"])
    means = {}
    for h in widths_list:
        vals = [r["plateau_loss"] for r in rows if r["H"] == int(h)]
        means[int(h)] = float(np.mean(vals))
    for r in rows:
        r["mean_plateau_loss_H"] = means[r["H"]]
    if write:
        # one row per (H, seed); the per-H mean is repeated on each row
        _write_csv(out / "summary.csv", rows)
    return {"rows": rows, "means": means}


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})


# ---------------------------------------------------------------- exchange, probe, counting

def run_exchange_demo(cfg: ExperimentConfig, target_i: int | None = None, write: bool = True) -> dict:
    """Reach a permutation point, then exchange neurons at constant loss.

    With a second target j the two exchanges compose to a 3-cycle (m i j).
    """
    cfg = cfg.resolved()
    out = _prepare_dir(cfg, "exchange") if write else None
    teacher, data, _ = make_teacher(cfg)
    k = cfg.layer
    l, m = select_pair(teacher, k, cfg.pair)
    trace = permutation_path(teacher, data, cfg.loss_kind, k, l, m, cfg.merge_settings())
    pp = permutation_point(trace).params
    others = [j for j in range(teacher.widths[k]) if j not in (l, m)]
    i = target_i if target_i is not None else (cfg.target_i if cfg.target_i is not None else others[0])
    chain = [m, i]
    j = cfg.cycle_j if cfg.cycle_j is not None else next((o for o in others if o != i), None)
    if j is not None:
        chain.append(j)
    paths = compose_exchanges(pp, data, cfg.loss_kind, k, l, chain, cfg.steps_per_stage)
    perm = list(range(teacher.widths[k]))
    # new slot of each old neuron: m -> i -> j -> m for the full chain
    for a, b in zip(chain[:-1], chain[1:]):
        perm = [b if p == a else a if p == b else p for p in perm]
    spec = PermutationSpec.from_layer(pp, k, perm)
    expected = apply_permutation(pp, spec)
    end = paths[-1].end
    x = data.inputs
    summary = {
        "layer": k, "pair": [l, m], "chain": chain,
        "start_loss": paths[0].start_loss,
        "max_rel_loss_deviation": max(p.max_rel_deviation() for p in paths),
        "endpoint_matches_permutation": bool(end.equals(expected)),
        "max_forward_deviation": float(np.max(np.abs(forward(end, x) - forward(pp, x)))),
        "n_samples": sum(len(p.samples) for p in paths),
    }
    if write:
        with open(out / "exchange.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["exchange", "stage", "t", "loss"])
            for e, p in enumerate(paths):
                for s in p.samples:
                    wr.writerow([e, s.stage, format(s.t, ".17g"), format(s.loss, ".17g")])
        _write_json(out / "exchange.json", summary)
    summary["paths"] = paths
    return summary


def kth_order_point(cfg: ExperimentConfig, K: int):
    """Train a net with K fewer neurons in layer k, then embed it by duplication.

    The first K small-net neurons are duplicated once each.
    """
    cfg = cfg.resolved()
    k = cfg.layer
    n_big = cfg.widths[k]
    if not 0 <= K < n_big:
        raise ConfigError(f"order {K} impossible for width {n_big}")
    teacher, data, _ = make_teacher(cfg)
    small_w = list(cfg.widths)
    small_w[k] -= K
    small0 = init_network(small_w, cfg.activation, Rng(cfg.seed).spawn())
    small, res = gd_minimize(small0, data, cfg.loss_kind, settings=GDSettings(max_iters=cfg.max_iters))
    n_small = small_w[k]
    groups = [[g] for g in range(n_small)]
    for extra, g in enumerate(range(K)):
        groups[g].append(n_small + extra)
    plan = MergePlan.from_groups(k, groups)
    return build_kth_order_point(small, plan), plan, data, res


def run_probe(cfg: ExperimentConfig, K: int | None = None, write: bool = True) -> dict:
    cfg = cfg.resolved()
    K = cfg.order_K if K is None else K
    out = _prepare_dir(cfg, "probe") if write else None
    big, plan, data, res = kth_order_point(cfg, K)
    frame = constraint_null_basis(big, plan)
    report = probe_hyperplane(big, data, cfg.loss_kind, frame, cfg.n_probes, cfg.radius, Rng(cfg.seed + 1))
    summary = {"K": K, "layer": plan.layer, "plan": plan.to_dict(), "dimension": frame.dimension,
               "expected_dimension": K * big.widths[plan.layer + 1],
               "small_net_converged": res.converged, "small_net_grad_norm": res.grad_norm, **report.to_dict()}
    if write:
        _write_json(out / "probe.json", summary)
    return summary


def run_count_tables(max_n: int, max_K: int, path=None) -> list[dict]:
    rows = count_table(max_n, max_K)
    if path is not None:
        _write_csv(Path(path), rows)
    return rows
