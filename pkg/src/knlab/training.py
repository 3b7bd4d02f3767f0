from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .exceptions import DataError, NumericError
from .model import ModelConfig, TransformerLM, init_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_prob: float = 0.15
    init_std: float = 0.02


class Adam:
    def __init__(self, params: dict[str, np.ndarray], settings: TrainSettings):
        self.s = settings
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        s = self.s
        self.t += 1
        c1 = 1.0 - s.beta1 ** self.t
        c2 = 1.0 - s.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = s.beta1 * self.m[k] + (1 - s.beta1) * g
            self.v[k] = s.beta2 * self.v[k] + (1 - s.beta2) * g * g
            params[k] -= s.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + s.eps)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid


def _masked_targets(ids, valid, config: ModelConfig, mask_prob: float, rng: np.random.Generator):
    chosen = (rng.random(ids.shape) < mask_prob) & valid
    for i in range(len(ids)):
        if not chosen[i].any():
            chosen[i, rng.choice(np.flatnonzero(valid[i]))] = True
    rows, cols = np.nonzero(chosen)
    targets = ids[rows, cols]
    inputs = ids.copy()
    inputs[rows, cols] = config.mask_token_id
    return inputs, rows, cols, targets


def _next_token_targets(ids, valid):
    pred = valid[:, :-1] & valid[:, 1:]
    rows, cols = np.nonzero(pred)
    return ids, rows, cols, ids[rows, cols + 1]


def loss_and_grads(model: TransformerLM, ids, valid, rows, cols, targets):
    p = model.params(requires_grad=True)
    logits = model.run(p, ids, rows, cols, key_mask=valid)
    logp = ad.log_softmax(logits, axis=-1)
    loss = -logp[np.arange(len(targets)), targets].mean()
    names = list(p)
    grads = ad.backward(loss, [p[k] for k in names])
    return float(loss.data), dict(zip(names, grads))


def train(config: ModelConfig, corpus: Sequence[Sequence[int]], settings: TrainSettings = TrainSettings(),
          seed: int = 0) -> Checkpoint:
    """Fit a fresh model on ``corpus`` (lists of token ids).

    Causal models minimise next-token cross-entropy; bidirectional models
    minimise cross-entropy on randomly masked positions.
    """
    if not corpus:
        raise DataError("empty training corpus")
    for seq in corpus:
        if len(seq) > config.max_seq_len:
            raise DataError(f"sequence of length {len(seq)} exceeds max_seq_len")
        if min(seq) < 0 or max(seq) >= config.vocab_size:
            raise DataError("corpus token id outside the vocabulary")
        if config.mode == "causal" and len(seq) < 2:
            raise DataError("causal training needs sequences of length >= 2")
    rng = np.random.default_rng(seed)
    weights = init_weights(config, rng, settings.init_std)
    opt = Adam(weights, settings)
    pad_id = config.pad_token_id if config.pad_token_id is not None else 0
    epoch_losses: list[float] = []
    step_losses: list[float] = []
    step = 0
    done = False
    for epoch in range(settings.epochs if settings.max_steps is None else 10**9):
        order = rng.permutation(len(corpus))
        batch_losses = []
        for start in range(0, len(order), settings.batch_size):
            batch = [corpus[i] for i in order[start:start + settings.batch_size]]
            ids, valid = pad_batch(batch, pad_id)
            if config.mode == "bidirectional":
                inputs, rows, cols, targets = _masked_targets(ids, valid, config, settings.mask_prob, rng)
            else:
                inputs, rows, cols, targets = _next_token_targets(ids, valid)
            model = TransformerLM(config, weights)
            loss, grads = loss_and_grads(model, inputs, valid, rows, cols, targets)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                last = step_losses[-1] if step_losses else None
                raise NumericError(f"training diverged at epoch {epoch} step {step}: loss={loss}, last finite loss={last}")
            opt.step(weights, grads)
            batch_losses.append(loss)
            step_losses.append(loss)
            step += 1
            if settings.max_steps is not None and step >= settings.max_steps:
                done = True
                break
        epoch_losses.append(float(np.mean(batch_losses)))
        logger.info("epoch %d loss %.6f", epoch, epoch_losses[-1])
        if done:
            break
    metadata = {"seed": seed, "settings": asdict(settings), "epoch_losses": epoch_losses,
                "step_losses": step_losses}
    return Checkpoint(config, weights, metadata)
