"""Integrated-gradients attribution for MLP intermediate neurons.

For neuron ``(l, i)`` with clean activation ``w`` the path scales that one
neuron by ``gamma`` (every position in scope jointly) while all other neurons
keep their clean values, and

    alpha = w * integral_0^1 dP(gamma * w)/dw dgamma

is approximated with an ``m``-step midpoint rule.  Because the MLP output is
linear in its activations, scaling a neuron only shifts the residual stream
after block ``l`` by ``(gamma - 1) * w * W2[i]``, so each path point resumes
the forward pass from block ``l + 1``; the derivative with respect to gamma
is taken by reverse mode through those remaining blocks.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Trace
from .exceptions import DataError, NumericError
from .model import SCOPES, NeuronRef, TransformerLM

DEFAULT_STEPS = 20
CHUNK = 2048


@dataclass(frozen=True)
class Prompt:
    token_ids: tuple[int, ...]
    target_position: int
    target: int
    prompt_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(i) for i in self.token_ids))


@dataclass
class AttributionMap:
    prompt_id: str
    y: int
    m: int
    scores: np.ndarray  # (L, d_m)

    def to_dict(self) -> dict:
        return {"prompt_id": self.prompt_id, "y": int(self.y), "m": int(self.m),
                "scores": self.scores.tolist()}

    @classmethod
    def from_dict(cls, d) -> "AttributionMap":
        scores = np.asarray(d["scores"], dtype=np.float64)
        if scores.ndim != 2:
            raise DataError(f"attribution scores must be 2-d, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise DataError(f"attribution map {d.get('prompt_id')!r} has non-finite scores")
        return cls(str(d["prompt_id"]), int(d["y"]), int(d["m"]), scores)


def midpoints(m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) / m


def attribute(model: TransformerLM, token_ids: Sequence[int], target_position: int, y: int,
              steps: int = DEFAULT_STEPS, scope: str = "all_tokens",
              neurons: Iterable[NeuronRef] | None = None, prompt_id: str = "") -> AttributionMap:
    """Attribution scores (L, d_m) for target token ``y``.

    ``neurons`` restricts the computation to a subset; other cells stay 0.
    """
    cfg = model.config
    if steps < 1:
        raise DataError("steps must be >= 1")
    if not 0 <= y < cfg.vocab_size:
        raise DataError(f"target token {y} outside vocabulary of size {cfg.vocab_size}")
    if scope not in SCOPES:
        raise DataError(f"scope must be one of {SCOPES}")
    ids = model.check_prompt(token_ids, target_position)
    clean = model.trace_values(ids, target_position)
    if neurons is None:
        by_layer = {l: np.arange(cfg.d_mlp) for l in range(cfg.num_layers)}
    else:
        grouped: dict[int, list[int]] = {}
        for n in neurons:
            n = NeuronRef(*n)
            if not (0 <= n.layer < cfg.num_layers and 0 <= n.neuron < cfg.d_mlp):
                raise DataError(f"invalid neuron {n}")
            grouped.setdefault(n.layer, []).append(n.neuron)
        by_layer = {l: np.array(sorted(set(v))) for l, v in sorted(grouped.items())}

    gammas = midpoints(steps)
    p = model.params()
    scores = np.zeros((cfg.num_layers, cfg.d_mlp))
    for layer, idx in by_layer.items():
        act = clean[f"mlp_act.{layer}"][0]  # (T, d_m)
        if scope == "target_only":
            in_scope = np.zeros_like(act)
            in_scope[target_position] = act[target_position]
            act = in_scope
        resid = clean[f"resid.{layer}"][0]  # (T, d)
        w2 = model.weights[f"blocks.{layer}.mlp.w2"]
        neuron_of = np.repeat(idx, steps)
        gamma_of = np.tile(gammas, len(idx))
        slopes = np.empty(len(neuron_of))
        for start in range(0, len(neuron_of), CHUNK):
            nb = neuron_of[start:start + CHUNK]
            slopes[start:start + CHUNK] = _path_slopes(
                model, p, ids, target_position, y, layer, resid, act[:, nb].T, w2[nb],
                gamma_of[start:start + CHUNK])
        alpha = slopes.reshape(len(idx), steps).mean(axis=1)
        bad = ~np.isfinite(alpha)
        if bad.any():
            raise NumericError(f"non-finite attribution for neuron {NeuronRef(layer, int(idx[bad][0]))}")
        scores[layer, idx] = alpha
    return AttributionMap(prompt_id, int(y), int(steps), scores)


def _path_slopes(model, p, ids, target_position, y, layer, resid, act_rows, w2_rows, gammas):
    """dP/dgamma for each (neuron, gamma) batch element."""
    B = len(gammas)
    direction = act_rows[:, :, None] * w2_rows[:, None, :]  # (B, T, d)
    g = Tensor(gammas, requires_grad=True)
    x = ad.add(resid[None], ad.mul(ad.reshape(g - 1.0, (B, 1, 1)), direction))
    batch_ids = np.broadcast_to(ids, (B, len(ids)))
    if layer + 1 < model.config.num_layers:
        logits = model.run(p, batch_ids, np.arange(B), np.full(B, target_position),
                           trace=Trace(check_finite=False), start_layer=layer + 1, start=x)
    else:
        logits = model.readout(p, x, np.arange(B), np.full(B, target_position))
    prob = ad.softmax(logits, axis=-1)[:, y]
    (slope,) = ad.backward(prob.sum(), [g])
    return slope


def attribute_prompt(model: TransformerLM, prompt: Prompt, steps: int = DEFAULT_STEPS,
                     scope: str = "all_tokens") -> AttributionMap:
    return attribute(model, prompt.token_ids, prompt.target_position, prompt.target,
                     steps=steps, scope=scope, prompt_id=prompt.prompt_id)


def batch_attribute(model: TransformerLM, prompts: Sequence[Prompt], steps: int = DEFAULT_STEPS,
                    scope: str = "all_tokens", jobs: int = 1) -> list[AttributionMap]:
    """Attribute every prompt; output order follows input order for any ``jobs``."""
    if not prompts:
        raise DataError("no prompts to attribute")

    def one(indexed):
        i, prompt = indexed
        try:
            return attribute_prompt(model, prompt, steps, scope)
        except (DataError, NumericError) as exc:
            raise type(exc)(f"prompt {i} ({prompt.prompt_id!r}): {exc}") from exc

    if jobs <= 1:
        return [one(item) for item in enumerate(prompts)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, enumerate(prompts)))


def mean_map(maps: Sequence[AttributionMap]) -> np.ndarray:
    if not maps:
        raise DataError("cannot average an empty list of maps")
    return np.mean([m.scores for m in maps], axis=0)


def write_maps(path, maps: Iterable[AttributionMap]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in maps:
            fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")


def read_maps(path) -> list[AttributionMap]:
    with open(path, encoding="utf-8") as fh:
        try:
            return [AttributionMap.from_dict(json.loads(line)) for line in fh if line.strip()]
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}: malformed attribution map ({exc})") from exc
