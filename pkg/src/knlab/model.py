"""Small pre-LayerNorm transformer with tappable MLP activations.

Every block exposes four taps, all overridable through ``Trace``:

``attn_out.{l}``  attention sub-layer output, (B, T, d)
``mlp_act.{l}``   post-nonlinearity MLP activations, (B, T, d_m) -- the
                  "neurons" that attribution and editing address
``mlp_out.{l}``   MLP sub-layer output, (B, T, d)
``resid.{l}``     residual stream after the block, (B, T, d)

plus ``embed`` for the summed token and position embeddings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, Trace
from .exceptions import DataError

MODES = ("causal", "bidirectional")
ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu, "tanh": ad.tanh}
SCOPES = ("all_tokens", "target_only")
_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    d_model: int = 64
    d_mlp: int = 256
    n_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 24
    mode: str = "bidirectional"
    activation: str = "gelu"
    mask_token_id: int | None = 1
    pad_token_id: int | None = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.num_layers, self.d_model, self.d_mlp, self.n_heads, self.vocab_size, self.max_seq_len) < 1:
            raise ValueError("all sizes must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.mode == "bidirectional":
            if self.mask_token_id is None or not 0 <= self.mask_token_id < self.vocab_size:
                raise ValueError("bidirectional mode needs a MASK token inside the vocabulary")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


class NeuronRef(NamedTuple):
    """MLP intermediate neuron; both indices start at 0."""

    layer: int
    neuron: int

    def __str__(self) -> str:
        return f"L{self.layer}.N{self.neuron}"

    @classmethod
    def parse(cls, text: str) -> "NeuronRef":
        layer, neuron = text.strip().lstrip("L").split(".N")
        return cls(int(layer), int(neuron))


@dataclass(frozen=True)
class Override:
    neuron: NeuronRef
    action: str  # "set" or "scale"
    value: float
    scope: str = "all_tokens"

    def __post_init__(self):
        if self.action not in ("set", "scale"):
            raise ValueError(f"action must be 'set' or 'scale', got {self.action!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        object.__setattr__(self, "neuron", NeuronRef(*self.neuron))


@dataclass(frozen=True)
class EditSpec:
    overrides: tuple[Override, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "overrides", tuple(self.overrides))
        keys = [(o.neuron, o.scope) for o in self.overrides]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (neuron, scope) entries in EditSpec")

    @classmethod
    def suppress(cls, neurons: Iterable, scope: str = "all_tokens") -> "EditSpec":
        return cls(tuple(Override(NeuronRef(*n), "set", 0.0, scope) for n in neurons))

    @classmethod
    def scale(cls, neurons: Iterable, factor: float, scope: str = "all_tokens") -> "EditSpec":
        return cls(tuple(Override(NeuronRef(*n), "scale", float(factor), scope) for n in neurons))

    def to_dict(self) -> dict:
        return {"overrides": [
            {"layer": o.neuron.layer, "neuron": o.neuron.neuron, "action": o.action,
             "value": o.value, "scope": o.scope} for o in self.overrides]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EditSpec":
        return cls(tuple(Override(NeuronRef(o["layer"], o["neuron"]), o["action"], o["value"],
                                  o.get("scope", "all_tokens")) for o in d["overrides"]))


def weight_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, dm, V = config.d_model, config.d_mlp, config.vocab_size
    shapes = {"tok_emb": (V, d), "pos_emb": (config.max_seq_len, d)}
    for l in range(config.num_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, dm), p + "mlp.b1": (dm,),
            p + "mlp.w2": (dm, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "unembed.w": (d, V), "unembed.b": (V,)})
    return shapes


def init_weights(config: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, np.ndarray]:
    weights = {}
    for name, shape in weight_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            weights[name] = np.ones(shape)
        elif leaf.startswith("b"):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.normal(0.0, std, size=shape)
    return weights


def attention_mask(config: ModelConfig, key_mask: np.ndarray) -> np.ndarray:
    """Additive mask of shape (B, 1, T, T) from a (B, T) boolean valid-key mask."""
    B, T = key_mask.shape
    allowed = np.broadcast_to(key_mask[:, None, None, :], (B, 1, T, T))
    if config.mode == "causal":
        allowed = allowed & np.tril(np.ones((T, T), dtype=bool))[None, None]
    return np.where(allowed, 0.0, _NEG)


class TransformerLM:
    """Weights plus the forward computation; immutable once built."""

    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray]):
        expected = weight_shapes(config)
        if set(weights) != set(expected):
            raise DataError(f"weight names mismatch: {sorted(set(weights) ^ set(expected))[:5]}")
        self.config = config
        self.weights: dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            arr = np.array(weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise DataError(f"weight {name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            self.weights[name] = arr

    @classmethod
    def initialise(cls, config: ModelConfig, seed: int = 0) -> "TransformerLM":
        return cls(config, init_weights(config, np.random.default_rng(seed)))

    def params(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.weights.items()}

    # ------------------------------------------------------------------
    # building blocks (operate on Tensors, shared by every entry point)

    def embed(self, p: Mapping[str, Tensor], ids: np.ndarray) -> Tensor:
        T = ids.shape[1]
        return ad.embedding(p["tok_emb"], ids) + p["pos_emb"][:T]

    def attention(self, p, l: int, h: Tensor, mask: np.ndarray) -> Tensor:
        cfg = self.config
        B, T, d = h.shape
        H, dh = cfg.n_heads, cfg.d_head
        pre = f"blocks.{l}.attn."

        def heads(w, b):
            return (h @ p[pre + w] + p[pre + b]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + mask
        mixed = ad.softmax(scores, axis=-1) @ v
        merged = mixed.transpose(0, 2, 1, 3).reshape(B, T, d)
        return merged @ p[pre + "wo"] + p[pre + "bo"]

    def mlp_out(self, p, l: int, act: Tensor) -> Tensor:
        return act @ p[f"blocks.{l}.mlp.w2"] + p[f"blocks.{l}.mlp.b2"]

    def block(self, p, l: int, x: Tensor, mask: np.ndarray, trace: Trace) -> Tensor:
        pre = f"blocks.{l}."
        h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = x + trace.tap(f"attn_out.{l}", self.attention(p, l, h, mask))
        h = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        act = ACTIVATIONS[self.config.activation](h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"])
        act = trace.tap(f"mlp_act.{l}", act)
        x = x + trace.tap(f"mlp_out.{l}", self.mlp_out(p, l, act))
        return trace.tap(f"resid.{l}", x)

    def readout(self, p, x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
        """Logits (N, V) at positions ``(rows[i], cols[i])`` of ``x``."""
        h = x[rows, cols]
        h = ad.layer_norm(h, p["ln_f.g"], p["ln_f.b"])
        return h @ p["unembed.w"] + p["unembed.b"]

    def run(self, p, ids: np.ndarray, rows: np.ndarray, cols: np.ndarray,
            key_mask: np.ndarray | None = None, trace: Trace | None = None,
            start_layer: int = 0, start: Tensor | None = None) -> Tensor:
        """Logits at the requested positions of a padded (B, T) id batch.

        ``start``/``start_layer`` resume from a residual stream that feeds
        block ``start_layer``, skipping the embedding and earlier blocks.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DataError(f"ids must be (B, T), got {ids.shape}")
        if ids.shape[1] > self.config.max_seq_len:
            raise DataError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise DataError("token id out of vocabulary range")
        trace = trace if trace is not None else Trace(check_finite=False)
        if key_mask is None:
            key_mask = np.ones(ids.shape, dtype=bool)
        mask = attention_mask(self.config, key_mask)
        x = start if start is not None else trace.tap("embed", self.embed(p, ids))
        for l in range(start_layer, self.config.num_layers):
            x = self.block(p, l, x, mask, trace)
        return self.readout(p, x, np.asarray(rows), np.asarray(cols))

    # ------------------------------------------------------------------
    # single-prompt API

    def check_prompt(self, token_ids: Sequence[int], target_position: int) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise DataError("token_ids must be a non-empty 1-d sequence")
        if not 0 <= target_position < len(ids):
            raise DataError(f"target_position {target_position} out of range for length {len(ids)}")
        if self.config.mode == "bidirectional" and ids[target_position] != self.config.mask_token_id:
            raise DataError("bidirectional mode: target_position must hold the MASK token")
        if self.config.mode == "causal" and target_position != len(ids) - 1:
            raise DataError("causal mode: target_position must be the last position")
        return ids

    def graph(self, token_ids: Sequence[int], target_position: int, target: int | None = None) -> Graph:
        """A Graph over the named weights for one prompt.

        Outputs ``probs`` (V,) and, when ``target`` is given, scalar ``prob``
        and ``logprob`` of that token.
        """
        ids = self.check_prompt(token_ids, target_position)[None, :]

        def build(inputs, trace):
            logits = self.run(inputs, ids, np.array([0]), np.array([target_position]), trace=trace)
            out = {"probs": ad.softmax(logits, axis=-1)[0]}
            if target is not None:
                out["prob"] = out["probs"][target]
                out["logprob"] = ad.log_softmax(logits, axis=-1)[0, target]
            return out

        return Graph(build, {k: v.shape for k, v in self.weights.items()})

    def forward(self, token_ids: Sequence[int], target_position: int,
                edit: EditSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Distribution over the vocabulary and MLP activations (L, T, d_m)."""
        overrides = self.edit_overrides(edit, len(token_ids), [target_position]) if edit else None
        values = ad.evaluate(self.graph(token_ids, target_position), self.weights, overrides)
        acts = np.stack([values[f"mlp_act.{l}"][0] for l in range(self.config.num_layers)])
        return values["probs"], acts

    def forward_with_overrides(self, token_ids: Sequence[int], target_position: int,
                               edit: EditSpec) -> np.ndarray:
        return self.forward(token_ids, target_position, edit)[0]

    def trace_values(self, token_ids: Sequence[int], target_position: int,
                     overrides=None) -> dict[str, np.ndarray]:
        """Every output and tap of one forward, with optional tap overrides."""
        return ad.evaluate(self.graph(token_ids, target_position), self.weights, overrides)

    # ------------------------------------------------------------------
    # batched API

    def probs_batch(self, ids: np.ndarray, positions: Sequence[int], key_mask: np.ndarray | None = None,
                    edit: EditSpec | None = None) -> np.ndarray:
        """Distributions (B, V) at one readout position per row."""
        ids = np.asarray(ids, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        trace = Trace(self.edit_overrides(edit, ids.shape[1], positions) if edit else None, check_finite=False)
        logits = self.run(self.params(), ids, np.arange(len(ids)), positions, key_mask, trace)
        return ad.softmax(logits, axis=-1).data

    def edit_overrides(self, edit: EditSpec, seq_len: int,
                       positions: Sequence[int]) -> dict[str, Callable[[Tensor], Tensor]]:
        """Tap overrides realising ``edit`` for a batch with the given readout positions."""
        cfg = self.config
        positions = np.asarray(positions, dtype=np.int64)
        B = len(positions)
        by_layer: dict[int, list[Override]] = {}
        for o in edit.overrides:
            if not (0 <= o.neuron.layer < cfg.num_layers and 0 <= o.neuron.neuron < cfg.d_mlp):
                raise DataError(f"invalid neuron {o.neuron} for a {cfg.num_layers}x{cfg.d_mlp} model")
            by_layer.setdefault(o.neuron.layer, []).append(o)
        result = {}
        for layer, items in by_layer.items():
            keep = np.ones((B, seq_len, cfg.d_mlp))
            fill = np.zeros((B, seq_len, cfg.d_mlp))
            # all_tokens first so target_only entries refine the target row
            for o in sorted(items, key=lambda o: o.scope != "all_tokens"):
                n = o.neuron.neuron
                if o.scope == "all_tokens":
                    sel = (slice(None), slice(None), n)
                else:
                    sel = (np.arange(B), positions, n)
                if o.action == "set":
                    keep[sel] = 0.0
                    fill[sel] = o.value
                else:
                    keep[sel] = keep[sel] * o.value
                    fill[sel] = fill[sel] * o.value

            def override(act, keep=keep, fill=fill):
                return act * keep + fill

            result[f"mlp_act.{layer}"] = override
        return result
