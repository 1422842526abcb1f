"""Neuron permutations, merging of duplicated neurons and network reduction.

A neuron's parameter vector is its incoming weight row followed by its bias.
Only hidden layers (1..d-1) can be permuted; input and output orderings are
fixed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .network import NetworkParams
from .numerics import DimensionError, Rng

DEFAULT_GROUPING_TOL = 1e-9


def _check_hidden(net: NetworkParams, k: int) -> None:
    if not 1 <= k <= net.depth - 1:
        raise IndexError(f"layer {k} is not a hidden layer (valid: 1..{net.depth - 1})")


def _check_neuron(net: NetworkParams, k: int, m: int) -> None:
    _check_hidden(net, k)
    n_k = net.widths[k]
    if not 0 <= m < n_k:
        raise IndexError(f"neuron {m} out of range for layer {k} with {n_k} neurons")


@dataclass(frozen=True, eq=False)
class NeuronVector:
    layer: int
    index: int
    values: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.values[:-1]

    @property
    def bias(self) -> float:
        return float(self.values[-1])


def neuron_vector(net: NetworkParams, k: int, m: int) -> NeuronVector:
    _check_neuron(net, k, m)
    vals = np.append(net.weights[k - 1][m], net.biases[k - 1][m])
    return NeuronVector(k, m, vals)


def set_neuron_vector(net: NetworkParams, k: int, m: int, values) -> NetworkParams:
    _check_neuron(net, k, m)
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    w = net.weights[k - 1].copy()
    b = net.biases[k - 1].copy()
    if values.shape != (w.shape[1] + 1,):
        raise DimensionError(f"neuron vector must have length {w.shape[1] + 1}")
    w[m] = values[:-1]
    b[m] = values[-1]
    return net.replace_layer(k, w, b)


def neuron_matrix(net: NetworkParams, k: int) -> np.ndarray:
    """All parameter vectors of layer k as rows, shape (n_k, n_{k-1} + 1)."""
    _check_hidden(net, k)
    return np.column_stack([net.weights[k - 1], net.biases[k - 1]])


def distance(net: NetworkParams, k: int, l: int, m: int) -> float:
    if l == m:
        raise ValueError("distance needs two different neurons")
    a = neuron_vector(net, k, l).values
    b = neuron_vector(net, k, m).values
    return float(np.linalg.norm(a - b))


def cosine_similarity(net: NetworkParams, k: int, l: int, m: int) -> float:
    a = neuron_vector(net, k, l).values
    b = neuron_vector(net, k, m).values
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def most_similar_pair(net: NetworkParams, k: int) -> tuple[int, int]:
    """Pair (l, m), l < m, of layer-k neurons with the highest cosine similarity."""
    vecs = neuron_matrix(net, k)
    unit = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    sim = unit @ unit.T
    n = sim.shape[0]
    best, pair = -np.inf, (0, 1)
    for i in range(n):
        for j in range(i + 1, n):
            if sim[i, j] > best:
                best, pair = sim[i, j], (i, j)
    return pair


# --------------------------------------------------------------------------- #
# Permutations
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class PermutationSpec:
    """One permutation per hidden layer; ``perms[k - 1][i]`` is the new index of neuron i."""

    perms: tuple

    def __post_init__(self):
        perms = []
        for k, p in enumerate(self.perms, start=1):
            arr = np.array(p, dtype=np.int64)
            if arr.ndim != 1 or sorted(arr.tolist()) != list(range(arr.size)):
                raise ValueError(f"permutation for layer {k} is not a bijection: {arr.tolist()}")
            arr.flags.writeable = False
            perms.append(arr)
        object.__setattr__(self, "perms", tuple(perms))

    @classmethod
    def identity(cls, net: NetworkParams) -> "PermutationSpec":
        return cls(tuple(np.arange(n) for n in net.widths[1:-1]))

    @classmethod
    def random(cls, net: NetworkParams, rng: Rng) -> "PermutationSpec":
        return cls(tuple(rng.permutation(n) for n in net.widths[1:-1]))

    @classmethod
    def transposition(cls, net: NetworkParams, k: int, l: int, m: int) -> "PermutationSpec":
        perms = [np.arange(n) for n in net.widths[1:-1]]
        perms[k - 1][[l, m]] = [m, l]
        return cls(tuple(perms))

    @classmethod
    def from_layer(cls, net: NetworkParams, k: int, perm) -> "PermutationSpec":
        perms = [np.arange(n) for n in net.widths[1:-1]]
        perms[k - 1] = np.asarray(perm)
        return cls(tuple(perms))

    def inverse(self) -> "PermutationSpec":
        return PermutationSpec(tuple(np.argsort(p) for p in self.perms))


def apply_permutation(net: NetworkParams, spec: PermutationSpec) -> NetworkParams:
    """Reindex hidden neurons: ``W'_k[s_k(i), s_{k-1}(j)] = W_k[i, j]``, ``b'_k[s_k(i)] = b_k[i]``."""
    hidden = net.widths[1:-1]
    if len(spec.perms) != len(hidden) or any(p.size != n for p, n in zip(spec.perms, hidden)):
        raise DimensionError("permutation spec does not match the hidden layer widths")
    inv = [np.arange(net.widths[0])] + [np.argsort(p) for p in spec.perms] + [np.arange(net.widths[-1])]
    ws, bs = [], []
    for k in range(1, net.depth + 1):
        rows, cols = inv[k], inv[k - 1]
        ws.append(net.weights[k - 1][rows][:, cols])
        bs.append(net.biases[k - 1][rows])
    return NetworkParams(ws, bs, net.activations)


def swap_pair(net: NetworkParams, k: int, l: int, m: int) -> NetworkParams:
    _check_neuron(net, k, l)
    _check_neuron(net, k, m)
    return apply_permutation(net, PermutationSpec.transposition(net, k, l, m))


def group_neurons(net: NetworkParams, k: int, tol: float = DEFAULT_GROUPING_TOL) -> list[list[int]]:
    """Partition layer-k neurons into groups of (near-)identical parameter vectors.

    Greedy in index order: each group is led by its smallest index and
    collects every later ungrouped neuron within ``tol`` of the leader.
    """
    vecs = neuron_matrix(net, k)
    n = vecs.shape[0]
    assigned = [False] * n
    groups = []
    for i in range(n):
        if assigned[i]:
            continue
        grp = [i]
        assigned[i] = True
        for j in range(i + 1, n):
            if not assigned[j] and np.linalg.norm(vecs[i] - vecs[j]) <= tol:
                grp.append(j)
                assigned[j] = True
        groups.append(grp)
    return groups


def permutation_set_size(net: NetworkParams, tol: float = DEFAULT_GROUPING_TOL) -> int:
    """Number of distinct reindexings of ``net``: prod_k n_k! / prod(multiplicity!).

    Neurons count as identical only if both their parameter vectors and
    their outgoing weights agree within ``tol``.
    """
    total = 1
    for k in range(1, net.depth):
        full = np.column_stack([neuron_matrix(net, k), net.weights[k].T])
        n = full.shape[0]
        count = math.factorial(n)
        assigned = [False] * n
        for i in range(n):
            if assigned[i]:
                continue
            mult = 1
            for j in range(i + 1, n):
                if not assigned[j] and np.linalg.norm(full[i] - full[j]) <= tol:
                    assigned[j] = True
                    mult += 1
            count //= math.factorial(mult)
        total *= count
    return total


# --------------------------------------------------------------------------- #
# Merging and reduction
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class MergePlan:
    """Partition of a big layer's neurons; group g simulates small-net neuron g."""

    layer: int
    groups: tuple
    representatives: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        reps = tuple(int(r) for r in self.representatives)
        if any(len(g) == 0 for g in groups):
            raise ValueError("merge groups must be non-empty")
        flat = sorted(i for g in groups for i in g)
        if flat != list(range(len(flat))):
            raise ValueError("merge groups must partition 0..n_k-1")
        if len(reps) != len(groups) or any(r not in g for r, g in zip(reps, groups)):
            raise ValueError("each group needs a representative drawn from it")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "representatives", reps)

    @classmethod
    def from_groups(cls, layer: int, groups) -> "MergePlan":
        groups = [list(g) for g in groups]
        return cls(layer, tuple(tuple(g) for g in groups), tuple(min(g) for g in groups))

    @property
    def n_big(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def n_small(self) -> int:
        return len(self.groups)

    @property
    def order(self) -> int:
        """K, the number of neurons saved by the merge."""
        return self.n_big - self.n_small

    def group_of(self) -> np.ndarray:
        out = np.empty(self.n_big, dtype=np.int64)
        for g, members in enumerate(self.groups):
            out[list(members)] = g
        return out

    def to_dict(self) -> dict:
        return {"layer": self.layer, "groups": [list(g) for g in self.groups],
                "representatives": list(self.representatives)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "MergePlan":
        return cls(int(obj["layer"]), tuple(tuple(g) for g in obj["groups"]), tuple(obj["representatives"]))

    @classmethod
    def from_json(cls, text: str) -> "MergePlan":
        return cls.from_dict(json.loads(text))


def build_kth_order_point(small: NetworkParams, plan: MergePlan,
                          output_split: Sequence[Sequence[float]] | None = None) -> NetworkParams:
    """Embed ``small`` into a wider layer by duplicating neurons per ``plan``.

    Members of group g copy small-net neuron g's parameter vector; their
    outgoing weights are ``share * W_{k+1}[:, g]``. Shares default to equal
    splits and must sum to 1 per group.
    """
    k = plan.layer
    _check_hidden(small, k)
    if small.widths[k] != plan.n_small:
        raise DimensionError(f"small net has {small.widths[k]} neurons at layer {k}, plan has {plan.n_small} groups")
    if output_split is None:
        output_split = [[1.0 / len(g)] * len(g) for g in plan.groups]
    if len(output_split) != plan.n_small:
        raise ValueError("need one share list per group")
    shares = np.empty(plan.n_big)
    for g, (members, sh) in enumerate(zip(plan.groups, output_split)):
        sh = np.asarray(sh, dtype=np.float64)
        if sh.shape != (len(members),):
            raise ValueError(f"group {g} has {len(members)} members but {sh.size} shares")
        if abs(float(sh.sum()) - 1.0) > 1e-12:
            raise ValueError(f"shares of group {g} sum to {sh.sum()!r}, not 1")
        shares[list(members)] = sh
    grp = plan.group_of()
    ws, bs = [w.copy() for w in small.weights], [b.copy() for b in small.biases]
    ws[k - 1] = small.weights[k - 1][grp]
    bs[k - 1] = small.biases[k - 1][grp]
    ws[k] = small.weights[k][:, grp] * shares[None, :]
    return NetworkParams(ws, bs, small.activations)


def reduce_network(big: NetworkParams, k: int, tol: float = DEFAULT_GROUPING_TOL):
    """Collapse groups of identical layer-k neurons into one, summing outgoing weights.

    Returns:
        (small NetworkParams, MergePlan recovering the grouping)
    """
    groups = group_neurons(big, k, tol)
    plan = MergePlan.from_groups(k, groups)
    reps = list(plan.representatives)
    ws, bs = [w.copy() for w in big.weights], [b.copy() for b in big.biases]
    ws[k - 1] = big.weights[k - 1][reps]
    bs[k - 1] = big.biases[k - 1][reps]
    ws[k] = np.column_stack([big.weights[k][:, list(g)].sum(axis=1) for g in plan.groups])
    return NetworkParams(ws, bs, big.activations), plan


def remove_neuron(net: NetworkParams, k: int, m: int) -> NetworkParams:
    """Drop neuron m of layer k together with its outgoing weights."""
    _check_neuron(net, k, m)
    keep = [i for i in range(net.widths[k]) if i != m]
    ws, bs = [w.copy() for w in net.weights], [b.copy() for b in net.biases]
    ws[k - 1] = net.weights[k - 1][keep]
    bs[k - 1] = net.biases[k - 1][keep]
    ws[k] = net.weights[k][:, keep]
    return NetworkParams(ws, bs, net.activations)
