"""Causal tracing: corrupt the subject embedding, restore one site, measure recovery.

A site is (token, layer, component) with component one of ``hidden`` (the
residual stream after the block), ``mlp`` or ``attn`` (the sub-layer
outputs).  The indirect effect of a site is ``p_restored - p_corrupt``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Trace
from .exceptions import DataError
from .model import TransformerLM

COMPONENTS = ("hidden", "mlp", "attn")
ROLES = ("subject", "first_subsequent", "further", "last")
_TAP = {"hidden": "resid", "mlp": "mlp_out", "attn": "attn_out"}


@dataclass(frozen=True)
class NoiseSpec:
    scale: float = 3.0
    seed: int = 0
    resample: bool = False

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("noise scale must be non-negative")


@dataclass(frozen=True)
class TracePrompt:
    token_ids: tuple[int, ...]
    target_position: int
    subject_span: tuple[int, int]  # [start, end)
    target: int
    prompt_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(i) for i in self.token_ids))
        object.__setattr__(self, "subject_span", tuple(int(i) for i in self.subject_span))


@dataclass
class TraceGrid:
    effects: np.ndarray  # (tokens, layers, components)
    p_clean: float
    p_corrupt: float
    window: int
    tokens: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"effects": self.effects.tolist(), "p_clean": self.p_clean, "p_corrupt": self.p_corrupt,
                "window": self.window, "tokens": list(self.tokens), "components": list(COMPONENTS)}

    @classmethod
    def from_dict(cls, d) -> "TraceGrid":
        return cls(np.asarray(d["effects"], dtype=np.float64), float(d["p_clean"]), float(d["p_corrupt"]),
                   int(d["window"]), list(d.get("tokens", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_svg(self, component: str, cell: int = 24) -> str:
        """Heatmap for one component: token rows, layer columns."""
        c = COMPONENTS.index(component)
        grid = self.effects[:, :, c]
        T, L = grid.shape
        top = max(float(np.abs(grid).max()), 1e-12)
        label_w = 90
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{label_w + L * cell + 10}" '
                 f'height="{T * cell + 30}">',
                 f'<text x="2" y="14" font-size="11">{component}</text>']
        for i in range(T):
            name = self.tokens[i] if i < len(self.tokens) else str(i)
            parts.append(f'<text x="2" y="{30 + i * cell + cell * 0.7:.1f}" font-size="10">{name}</text>')
            for l in range(L):
                v = grid[i, l] / top
                r, g, b = (255, int(255 * (1 - v)), int(255 * (1 - v))) if v >= 0 else \
                    (int(255 * (1 + v)), int(255 * (1 + v)), 255)
                parts.append(f'<rect x="{label_w + l * cell}" y="{20 + i * cell}" width="{cell}" '
                             f'height="{cell}" fill="rgb({r},{g},{b})"/>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def embedding_std(model: TransformerLM) -> float:
    return float(model.weights["tok_emb"].std())


def _noise(model, noise: NoiseSpec, T: int, span: tuple[int, int], run: int) -> np.ndarray:
    seed = [noise.seed, run] if noise.resample else noise.seed
    rng = np.random.default_rng(seed)
    start, end = span
    eps = np.zeros((1, T, model.config.d_model))
    eps[0, start:end] = rng.normal(0.0, noise.scale * embedding_std(model), size=(end - start, model.config.d_model))
    return eps


def _restore(clean_value: np.ndarray, token: int):
    keep = np.ones_like(clean_value)
    keep[:, token] = 0.0
    fill = np.zeros_like(clean_value)
    fill[:, token] = clean_value[:, token]
    return lambda x: x * keep + fill


def _prob(model, ids, pos, y, overrides) -> float:
    trace = Trace(overrides, check_finite=False)
    logits = model.run(model.params(), ids[None], np.array([0]), np.array([pos]), trace=trace)
    return float(ad.softmax(logits, axis=-1).data[0, y])


def _window(layer: int, window: int, L: int) -> range:
    lo = max(0, layer - (window - 1) // 2)
    return range(lo, min(L, lo + window))


def trace(model: TransformerLM, token_ids: Sequence[int], target_position: int,
          subject_span: tuple[int, int], y: int, noise: NoiseSpec = NoiseSpec(),
          window: int = 1, jobs: int = 1, tokens: Sequence[str] | None = None) -> TraceGrid:
    cfg = model.config
    ids = model.check_prompt(token_ids, target_position)
    T, L = len(ids), cfg.num_layers
    start, end = subject_span
    if not 0 <= start < end <= T:
        raise DataError(f"subject span {subject_span} outside a prompt of length {T}")
    if not 0 <= y < cfg.vocab_size:
        raise DataError(f"target token {y} outside the vocabulary")
    if window < 1:
        raise DataError("window must be >= 1")

    # step 1: clean run
    clean = model.trace_values(ids, target_position)
    p_clean = float(clean["probs"][y])

    # step 2: corrupted run
    def corrupt(run: int) -> dict:
        eps = _noise(model, noise, T, (start, end), run)
        return {"embed": lambda x: x + eps}

    p_corrupt = _prob(model, ids, target_position, y, corrupt(0))

    # step 3: corrupted-with-restoration runs
    sites = [(t, l, c) for t in range(T) for l in range(L) for c in range(len(COMPONENTS))]

    def restored(index_site):
        index, (t, l, c) = index_site
        overrides = corrupt(index + 1)
        comp = COMPONENTS[c]
        layers = [l] if comp == "hidden" else list(_window(l, window, L))
        for ll in layers:
            name = f"{_TAP[comp]}.{ll}"
            overrides[name] = _restore(clean[name], t)
        p = _prob(model, ids, target_position, y, overrides)
        base = p_corrupt if not noise.resample else _prob(model, ids, target_position, y, corrupt(index + 1))
        return p - base

    if jobs <= 1:
        values = [restored(s) for s in enumerate(sites)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(restored, enumerate(sites)))
    effects = np.array(values, dtype=np.float64).reshape(T, L, len(COMPONENTS))
    return TraceGrid(effects, p_clean, p_corrupt, window, list(tokens) if tokens is not None else [])


def trace_prompt(model, prompt: TracePrompt, noise: NoiseSpec = NoiseSpec(), window: int = 1,
                 jobs: int = 1) -> TraceGrid:
    return trace(model, prompt.token_ids, prompt.target_position, prompt.subject_span, prompt.target,
                 noise, window, jobs)


def token_roles(T: int, subject_span: tuple[int, int], target_position: int) -> dict[str, list[int]]:
    """Positions per role; tokens before the subject or after the readout are not assigned."""
    start, end = subject_span
    roles = {"subject": list(range(start, end)), "first_subsequent": [], "further": [],
             "last": [target_position]}
    if end < target_position:
        roles["first_subsequent"] = [end]
        roles["further"] = list(range(end + 1, target_position))
    roles["subject"] = [p for p in roles["subject"] if p != target_position]
    return roles


@dataclass
class RoleGrid:
    effects: np.ndarray  # (roles, layers, components)
    counts: np.ndarray  # prompts contributing to each role
    p_clean: float
    p_corrupt: float
    n_prompts: int

    def to_dict(self) -> dict:
        return {"roles": list(ROLES), "components": list(COMPONENTS), "effects": self.effects.tolist(),
                "counts": self.counts.tolist(), "p_clean": self.p_clean, "p_corrupt": self.p_corrupt,
                "n_prompts": self.n_prompts}

    def as_trace_grid(self) -> TraceGrid:
        return TraceGrid(self.effects, self.p_clean, self.p_corrupt, 0, list(ROLES))


def role_grid(grid: TraceGrid, subject_span, target_position) -> tuple[np.ndarray, np.ndarray]:
    roles = token_roles(grid.effects.shape[0], subject_span, target_position)
    out = np.zeros((len(ROLES),) + grid.effects.shape[1:])
    present = np.zeros(len(ROLES), dtype=np.int64)
    for r, role in enumerate(ROLES):
        if roles[role]:
            out[r] = grid.effects[roles[role]].mean(axis=0)
            present[r] = 1
    return out, present


def average_indirect_effect(model: TransformerLM, dataset: Sequence[TracePrompt],
                            noise: NoiseSpec = NoiseSpec(), window: int = 1, jobs: int = 1) -> RoleGrid:
    """Mean role-aligned indirect effects; each role averages over prompts that have it."""
    if not dataset:
        raise DataError("empty tracing dataset")
    total = None
    counts = np.zeros(len(ROLES), dtype=np.int64)
    p_clean = p_corrupt = 0.0
    for prompt in dataset:
        grid = trace_prompt(model, prompt, noise, window, jobs)
        rg, present = role_grid(grid, prompt.subject_span, prompt.target_position)
        total = rg if total is None else total + rg
        counts += present
        p_clean += grid.p_clean
        p_corrupt += grid.p_corrupt
    denom = np.maximum(counts, 1)[:, None, None]
    return RoleGrid(total / denom, counts, p_clean / len(dataset), p_corrupt / len(dataset), len(dataset))
