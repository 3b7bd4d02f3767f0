"""Effects of activation edits: probability shifts, t-tests and flip counts."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .corpora import MinimalPair
from .exceptions import DataError
from .kn_search import KNSet
from .lm import distributions
from .model import EditSpec

ALPHA = 0.05
CLAMP = 1e-12


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    df: float


def ttest(a: Sequence[float], b: Sequence[float], welch: bool = False) -> TTest:
    """Two-sided two-sample t-test of mean(a) - mean(b).

    Pooled-variance Student test by default, Welch when ``welch``.
    Equal samples with zero spread give t = 0, p = 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        raise DataError("each group needs at least two samples")
    diff = a.mean() - b.mean()
    v1, v2 = a.var(ddof=1), b.var(ddof=1)
    if welch:
        se2 = v1 / n1 + v2 / n2
        df = se2 * se2 / ((v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1)) if se2 > 0 else n1 + n2 - 2.0
    else:
        df = n1 + n2 - 2.0
        pooled = ((n1 - 1) * v1 + (n2 - 1) * v2) / df
        se2 = pooled * (1.0 / n1 + 1.0 / n2)
    if se2 == 0:
        if diff == 0:
            return TTest(0.0, 1.0, float(df))
        return TTest(float(np.copysign(np.inf, diff)), 0.0, float(df))
    t = diff / np.sqrt(se2)
    p = 2.0 * stats.t.sf(abs(t), df)
    return TTest(float(t), float(p), float(df))


def relative_effect(pre: float, post: float) -> float:
    return (post - pre) / max(min(post, pre), CLAMP)


@dataclass(frozen=True)
class EffectRow:
    token: str
    pre: float
    post: float
    effect: float
    t: float
    p: float
    significant: bool


@dataclass
class EffectReport:
    rows: list[EffectRow]
    n_prompts: int

    def row(self, token: str) -> EffectRow:
        for r in self.rows:
            if r.token == token:
                return r
        raise KeyError(token)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["token", "pre", "post", "effect", "t", "p", "significant"])
        for r in self.rows:
            w.writerow([r.token, repr(r.pre), repr(r.post), repr(r.effect), repr(r.t), repr(r.p),
                        str(r.significant).lower()])
        return buf.getvalue()

    def to_svg(self, width: int = 640, height: int = 320) -> str:
        """Bar chart of relative effects; significant bars are red."""
        n = max(len(self.rows), 1)
        values = [r.effect for r in self.rows]
        top = max([abs(v) for v in values] + [1e-12])
        mid = height / 2
        bar = width / n
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 40}">',
                 f'<line x1="0" y1="{mid:.2f}" x2="{width}" y2="{mid:.2f}" stroke="black"/>']
        for i, r in enumerate(self.rows):
            h = abs(r.effect) / top * (mid - 10)
            y = mid - h if r.effect >= 0 else mid
            colour = "#d62728" if r.significant else "#7f7f7f"
            x = i * bar + 0.1 * bar
            parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{0.8 * bar:.2f}" height="{h:.2f}" fill="{colour}"/>')
            parts.append(f'<text x="{x:.2f}" y="{height + 30}" font-size="10">{r.token}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def _as_edit(kn, scope: str) -> EditSpec:
    if isinstance(kn, EditSpec):
        return kn
    neurons = kn.neurons if isinstance(kn, KNSet) else kn
    return EditSpec.suppress(neurons, scope)


def suppression_effect(model, kn, prompts: Sequence[str], probe_tokens: Sequence[str],
                       welch: bool = False, scope: str = "all_tokens") -> EffectReport:
    """Per-probe mean probability before/after suppressing ``kn`` at the blank.

    ``kn`` may be a KNSet, an iterable of neurons or a ready EditSpec.
    """
    if not prompts:
        raise DataError("no prompts given")
    edit = _as_edit(kn, scope)
    ids = [model.vocab.id(t) for t in probe_tokens]
    pre = distributions(model, prompts)[:, ids]
    post = distributions(model, prompts, edit)[:, ids]
    rows = []
    for j, tok in enumerate(probe_tokens):
        test = ttest(post[:, j], pre[:, j], welch)
        mpre, mpost = float(pre[:, j].mean()), float(post[:, j].mean())
        rows.append(EffectRow(tok, mpre, mpost, relative_effect(mpre, mpost), test.t, test.p, test.p < ALPHA))
    return EffectReport(rows, len(prompts))


@dataclass(frozen=True)
class CountResult:
    score: float
    num: int
    den: int
    excluded: int = 0


def reliability(model, edits: Sequence[tuple]) -> CountResult:
    """Share of ``(edit, prompt, t, t_star)`` cases flipped from t to t_star.

    Cases where the unedited model does not already prefer t are excluded
    and counted separately.
    """
    if not edits:
        raise DataError("no edits given")
    num = den = excluded = 0
    for edit, prompt, t, t_star in edits:
        if t == t_star:
            raise DataError(f"target and new target are identical ({t!r})")
        it, its = model.vocab.id(t), model.vocab.id(t_star)
        before = model.distribution(prompt)
        if not before[it] > before[its]:
            excluded += 1
            continue
        after = model.distribution(prompt, edit)
        den += 1
        num += int(after[its] > after[it])
    return CountResult(num / den if den else 0.0, num, den, excluded)


def categorical_accuracy(model, pairs: Sequence[MinimalPair], edit=None) -> CountResult:
    """Share of minimal pairs whose blank prefers the grammatical filler."""
    if not pairs:
        raise DataError("no minimal pairs given")
    dists = distributions(model, [p.template for p in pairs], edit)
    wins = sum(int(d[model.vocab.id(p.t)] > d[model.vocab.id(p.t_star)]) for d, p in zip(dists, pairs))
    return CountResult(wins / len(pairs), wins, len(pairs))
