"""Threshold-refinement search for knowledge neurons and per-class frequency tables.

A neuron qualifies in a prompt when its score reaches ``pi`` times that
prompt's maximum score.  It is a KN at sharing threshold ``tau`` when it
qualifies in at least ``tau * n`` of the ``n`` prompts.  ``tau`` starts at
``tau0`` and moves by ``step`` (down when too few KNs, up when too many)
until the count lands in ``[lo, hi]``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .attribution import AttributionMap
from .exceptions import DataError
from .model import NeuronRef

# percentages are handled as integers so tau never drifts
_SCALE = 10_000


@dataclass(frozen=True)
class SearchConfig:
    pi: float = 0.20
    tau0: float = 0.70
    step: float = 0.05
    lo: int = 2
    hi: int = 5
    max_iter: int = 20

    def __post_init__(self):
        if not 0 < self.pi <= 1:
            raise ValueError("pi must lie in (0, 1]")
        if not 0 < self.tau0 <= 1:
            raise ValueError("tau0 must lie in (0, 1]")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.lo > self.hi:
            raise ValueError("lo must not exceed hi")


@dataclass
class KNSet:
    neurons: tuple[NeuronRef, ...]
    tau: float
    kn_count_at_tau0: int
    iterations: int
    in_range: bool = True
    label: str = ""

    def to_dict(self) -> dict:
        return {"label": self.label, "neurons": [list(n) for n in self.neurons], "tau": self.tau,
                "kn_count_at_tau0": self.kn_count_at_tau0, "iterations": self.iterations,
                "in_range": self.in_range}

    @classmethod
    def from_dict(cls, d: Mapping) -> "KNSet":
        return cls(tuple(NeuronRef(*n) for n in d["neurons"]), float(d["tau"]),
                   int(d["kn_count_at_tau0"]), int(d["iterations"]), bool(d.get("in_range", True)),
                   str(d.get("label", "")))


def _as_stack(maps) -> np.ndarray:
    if len(maps) == 0:
        raise DataError("no attribution maps given")
    arrays = [m.scores if isinstance(m, AttributionMap) else np.asarray(m, dtype=np.float64) for m in maps]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise DataError("attribution maps differ in shape")
    return np.stack(arrays)


def qualifying_counts(maps, pi: float = 0.20) -> np.ndarray:
    """Number of prompts in which each neuron reaches ``pi`` x its prompt's max."""
    stack = _as_stack(maps)
    flat = stack.reshape(len(stack), -1)
    peaks = flat.max(axis=1)
    if np.all(peaks <= 0):
        raise DataError("every attribution map is non-positive; no maximum to threshold against")
    qualifies = (flat >= pi * peaks[:, None]) & (peaks[:, None] > 0)
    return qualifies.sum(axis=0).reshape(stack.shape[1:])


def _required(tau_units: int, n: int) -> int:
    # smallest integer count c with c >= tau * n
    return -((-tau_units * n) // _SCALE)


def neurons_at(counts: np.ndarray, n: int, tau: float) -> tuple[NeuronRef, ...]:
    need = _required(int(round(tau * _SCALE)), n)
    layers, idx = np.nonzero(counts >= need)
    return tuple(NeuronRef(int(l), int(i)) for l, i in zip(layers, idx))


def refine_threshold(maps, cfg: SearchConfig = SearchConfig(), label: str = "") -> KNSet:
    counts = qualifying_counts(maps, cfg.pi)
    n = len(maps)
    step = int(round(cfg.step * _SCALE))
    tau = int(round(cfg.tau0 * _SCALE))
    visited: dict[int, tuple[NeuronRef, ...]] = {}
    iterations = 0
    while True:
        found = neurons_at(counts, n, tau / _SCALE)
        visited[tau] = found
        if cfg.lo <= len(found) <= cfg.hi:
            return KNSet(found, tau / _SCALE, len(visited[int(round(cfg.tau0 * _SCALE))]), iterations,
                         True, label)
        nxt = tau - step if len(found) < cfg.lo else tau + step
        if nxt <= 0 or nxt > _SCALE or nxt in visited or iterations >= cfg.max_iter:
            break
        tau = nxt
        iterations += 1
    initial = len(visited[int(round(cfg.tau0 * _SCALE))])

    def distance(item):
        t, found = item
        k = len(found)
        return (cfg.lo - k if k < cfg.lo else k - cfg.hi, k, -t)

    best_tau, best = min(visited.items(), key=distance)
    return KNSet(best, best_tau / _SCALE, initial, iterations, False, label)


def kn_frequency_table(groups: Mapping[str, Sequence[KNSet]]) -> tuple[list[NeuronRef], list[str], np.ndarray]:
    """Rows: neurons, columns: classes, cell: share of the class's searches containing the neuron.

    Rows are ordered by their highest rate, then by neuron.
    """
    classes = list(groups)
    for c in classes:
        if not groups[c]:
            raise DataError(f"class {c!r} has no KN sets")
    neurons = sorted({n for sets in groups.values() for s in sets for n in s.neurons})
    rates = np.zeros((len(neurons), len(classes)))
    row = {n: i for i, n in enumerate(neurons)}
    for j, c in enumerate(classes):
        for s in groups[c]:
            for n in set(s.neurons):
                rates[row[n], j] += 1
        rates[:, j] /= len(groups[c])
    order = sorted(range(len(neurons)), key=lambda i: (-rates[i].max(), neurons[i]))
    return [neurons[i] for i in order], classes, rates[order]


def frequency_table_csv(neurons, classes, rates) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["neuron"] + list(classes))
    for n, r in zip(neurons, rates):
        writer.writerow([str(n)] + [repr(float(x)) for x in r])
    return buf.getvalue()


def frequency_table_json(neurons, classes, rates) -> str:
    return json.dumps({"classes": list(classes),
                       "rows": [{"neuron": list(n), "rates": [float(x) for x in r]} for n, r in zip(neurons, rates)]},
                      sort_keys=True, indent=2)


def jaccard(a: KNSet, b: KNSet) -> float:
    sa, sb = set(a.neurons), set(b.neurons)
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)
