"""Localisation measures: KN count, final threshold and pattern similarity."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attribution import AttributionMap
from .exceptions import DataError
from .kn_search import KNSet, SearchConfig, refine_threshold
from .linalg import top_singular_value


def pattern_matrix(patterns: Sequence) -> np.ndarray:
    """Columns are the flattened patterns scaled to unit Euclidean norm."""
    if len(patterns) == 0:
        raise DataError("no patterns given")
    flat = [np.asarray(p.scores if isinstance(p, AttributionMap) else p, dtype=np.float64).ravel()
            for p in patterns]
    if len({f.size for f in flat}) != 1:
        raise DataError("patterns differ in length")
    cols = []
    for i, f in enumerate(flat):
        norm = np.linalg.norm(f)
        if norm == 0.0 or not np.isfinite(norm):
            raise DataError(f"pattern {i} has zero (or non-finite) norm")
        cols.append(f / norm)
    return np.stack(cols, axis=1)


def r_squared(patterns: Sequence) -> float:
    """(sigma_1^2 - 1) / (n - 1) over unit-normalised patterns; 1 for a single pattern."""
    Y = pattern_matrix(patterns)
    n = Y.shape[1]
    if n == 1:
        return 1.0
    sigma = top_singular_value(Y)
    return float(min(max((sigma * sigma - 1.0) / (n - 1), 0.0), 1.0))


def layer_distribution(kn_sets: Sequence[KNSet], num_layers: int) -> np.ndarray:
    """Percentage of all identified KNs (with multiplicity) falling in each layer."""
    if not kn_sets:
        raise DataError("no KN sets given")
    counts = np.zeros(num_layers)
    for s in kn_sets:
        for n in s.neurons:
            if not 0 <= n.layer < num_layers:
                raise DataError(f"neuron {n} outside {num_layers} layers")
            counts[n.layer] += 1
    total = counts.sum()
    return counts if total == 0 else 100.0 * counts / total


@dataclass(frozen=True)
class LocalisationRow:
    name: str
    kn_count: int
    tau: float
    r_squared: float


def localisation_report(name: str, maps: Sequence[AttributionMap], kn: KNSet | None = None,
                        cfg: SearchConfig = SearchConfig()) -> LocalisationRow:
    if kn is None:
        kn = refine_threshold(maps, cfg)
    return LocalisationRow(name, kn.kn_count_at_tau0, kn.tau, r_squared(maps))


def localisation_csv(rows: Sequence[LocalisationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["paradigm_or_relation", "kn_count", "tau", "r_squared"])
    for r in rows:
        writer.writerow([r.name, r.kn_count, repr(r.tau), repr(r.r_squared)])
    return buf.getvalue()
