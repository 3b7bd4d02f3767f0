"""Synthetic minimal-pair and fact corpora over closed word-level lexicons.

Templates mark the blank with ``___`` and, for facts, the source slot with
``[S]``.  Everything is lower-case and whitespace-tokenised.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DataError
from .vocab import MASK, Vocabulary

logger = logging.getLogger(__name__)

BLANK = "___"
SOURCE = "[S]"

# ---------------------------------------------------------------------------
# agreement lexicon

NAMES = ("carl", "mary", "ann", "bob", "lisa", "tom", "eva", "paul", "rita", "sam",
         "nina", "omar", "jane", "ken", "lucy", "alan")
TRANSITIVE = ("sees", "likes", "cleans", "finds", "buys", "sells", "paints", "visits",
              "fixes", "cures", "hides", "lifts")
REGULAR_NOUNS = (("horse", "horses"), ("dog", "dogs"), ("cat", "cats"), ("book", "books"),
                 ("car", "cars"), ("chair", "chairs"), ("table", "tables"), ("apple", "apples"),
                 ("bird", "birds"), ("cup", "cups"), ("door", "doors"), ("lamp", "lamps"),
                 ("coat", "coats"), ("hat", "hats"), ("boat", "boats"), ("plant", "plants"),
                 ("river", "rivers"), ("house", "houses"), ("window", "windows"), ("shoe", "shoes"))
IRREGULAR_NOUNS = (("child", "children"), ("man", "men"), ("woman", "women"), ("mouse", "mice"),
                   ("foot", "feet"), ("tooth", "teeth"), ("goose", "geese"), ("person", "people"))
ADJECTIVES = ("big", "small", "red", "old", "new", "clean", "broken", "heavy", "green", "tiny")
DEMONSTRATIVES = {"singular": ("this", "that"), "plural": ("these", "those")}
# the foil keeps distance and swaps number: this<->these, that<->those
DEMONSTRATIVE_FOIL = {"this": "these", "that": "those", "these": "this", "those": "that"}
MODIFIERS = {
    "singular": ("this", "that", "a", "one", "every", "each"),
    "plural": ("these", "those", "two", "both", "several", "many", "various"),
    "neutral": ("the", "my", "his", "her", "our"),
}
INTRANSITIVE = (("runs", "run"), ("sleeps", "sleep"), ("falls", "fall"), ("waits", "wait"),
                ("moves", "move"), ("shines", "shine"))
ANAPHOR_NOUNS = (("man", "men", "himself"), ("boy", "boys", "himself"), ("king", "kings", "himself"),
                 ("woman", "women", "herself"), ("girl", "girls", "herself"), ("queen", "queens", "herself"))
ANAPHOR_VERBS = ("saw", "hurt", "praised", "helped")

PARADIGMS = ("det_noun", "det_adj_noun", "det_noun_irregular", "det_adj_noun_irregular",
             "subject_verb", "anaphor")
PHENOMENA = {"det_noun": "determiner_noun_agreement", "det_adj_noun": "determiner_noun_agreement",
             "det_noun_irregular": "determiner_noun_agreement",
             "det_adj_noun_irregular": "determiner_noun_agreement",
             "subject_verb": "subject_verb_agreement", "anaphor": "anaphor_agreement"}


def agreement_vocabulary() -> Vocabulary:
    words = list(NAMES) + list(TRANSITIVE) + list(ADJECTIVES)
    for pair in REGULAR_NOUNS + IRREGULAR_NOUNS + INTRANSITIVE:
        words += pair
    for sg, pl, refl in ANAPHOR_NOUNS:
        words += [sg, pl, refl]
    words += ["themselves", "the", "."] + list(ANAPHOR_VERBS)
    for mods in MODIFIERS.values():
        words += mods
    return Vocabulary(words)


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class MinimalPair:
    template: str
    s: str
    t: str
    t_star: str
    phenomenon: str
    paradigm: str
    number_class: str

    def __post_init__(self):
        if self.t == self.t_star:
            raise DataError(f"target and foil are identical ({self.t!r})")
        if self.template.split().count(BLANK) != 1:
            raise DataError(f"template must contain exactly one blank: {self.template!r}")

    def filled(self, word: str) -> str:
        return self.template.replace(BLANK, word)

    @property
    def good(self) -> str:
        return self.filled(self.t)

    @property
    def bad(self) -> str:
        return self.filled(self.t_star)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MinimalPair":
        return cls(**{k: d[k] for k in ("template", "s", "t", "t_star", "phenomenon", "paradigm", "number_class")})


@dataclass(frozen=True)
class FactTuple:
    s: str
    t: str
    relation: str
    templates: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        for tpl in self.templates:
            if SOURCE not in tpl or tpl.split().count(BLANK) != 1:
                raise DataError(f"fact template needs {SOURCE} and one blank: {tpl!r}")

    def prompt(self, template_index: int = 0) -> str:
        return self.templates[template_index].replace(SOURCE, self.s)

    def to_dict(self) -> dict:
        return {"s": self.s, "t": self.t, "relation": self.relation, "templates": list(self.templates)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FactTuple":
        return cls(d["s"], d["t"], d["relation"], tuple(d["templates"]))


@dataclass(frozen=True)
class EvalRecord:
    """One symmetry or synonym probe: edit ``edit_prompt`` from old to new,
    then check whether ``eval_prompt`` prefers ``eval_expected`` over
    ``eval_original``."""

    edit_prompt: str
    edit_target_old: str
    edit_target_new: str
    eval_prompt: str
    eval_expected: str
    eval_original: str
    subject: str = ""
    relation: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalRecord":
        fields_ = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields_})


SymmetryRecord = EvalRecord
SynonymRecord = EvalRecord


# ---------------------------------------------------------------------------
# agreement corpus


@dataclass(frozen=True)
class AgreementSpec:
    paradigms: Mapping[str, int] = field(default_factory=lambda: {"det_noun": 1000})
    train_sentences: int = 4000
    heldout_fraction: float = 0.2


@dataclass
class AgreementCorpus:
    pairs: list[MinimalPair]
    sentences: list[str]
    vocab: Vocabulary


def _context_split(rng: np.random.Generator, heldout_fraction: float):
    contexts = [(n, v) for n in NAMES for v in TRANSITIVE]
    order = rng.permutation(len(contexts))
    k = max(1, int(round(heldout_fraction * len(contexts))))
    heldout = [contexts[i] for i in order[:k]]
    train = [contexts[i] for i in order[k:]]
    return train, heldout


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _det_noun_pair(rng, paradigm, contexts) -> MinimalPair:
    nouns = IRREGULAR_NOUNS if "irregular" in paradigm else REGULAR_NOUNS
    number = _pick(rng, ("singular", "plural"))
    noun = _pick(rng, nouns)[0 if number == "singular" else 1]
    det = _pick(rng, DEMONSTRATIVES[number])
    name, verb = _pick(rng, contexts)
    middle = [BLANK] + ([_pick(rng, ADJECTIVES)] if "adj" in paradigm else []) + [noun]
    template = " ".join([name, verb] + middle + ["."])
    return MinimalPair(template, noun, det, DEMONSTRATIVE_FOIL[det], PHENOMENA[paradigm], paradigm, number)


def _subject_verb_pair(rng) -> MinimalPair:
    number = _pick(rng, ("singular", "plural"))
    k = 0 if number == "singular" else 1
    noun = _pick(rng, REGULAR_NOUNS + IRREGULAR_NOUNS)[k]
    verb = _pick(rng, INTRANSITIVE)
    return MinimalPair(f"the {noun} {BLANK} .", noun, verb[k], verb[1 - k],
                       PHENOMENA["subject_verb"], "subject_verb", number)


def _anaphor_pair(rng) -> MinimalPair:
    number = _pick(rng, ("singular", "plural"))
    sg, pl, refl = _pick(rng, ANAPHOR_NOUNS)
    noun, t, foil = (sg, refl, "themselves") if number == "singular" else (pl, "themselves", refl)
    verb = _pick(rng, ANAPHOR_VERBS)
    return MinimalPair(f"the {noun} {verb} {BLANK} .", noun, t, foil,
                       PHENOMENA["anaphor"], "anaphor", number)


def _training_sentence(rng, paradigms: Sequence[str], contexts) -> str:
    paradigm = _pick(rng, paradigms)
    if paradigm == "subject_verb":
        return _subject_verb_pair(rng).good
    if paradigm == "anaphor":
        return _anaphor_pair(rng).good
    nouns = IRREGULAR_NOUNS if "irregular" in paradigm else REGULAR_NOUNS
    number = _pick(rng, ("singular", "plural", "neutral"))
    mod = _pick(rng, MODIFIERS[number])
    if number == "neutral":
        number = _pick(rng, ("singular", "plural"))
    noun = _pick(rng, nouns)[0 if number == "singular" else 1]
    name, verb = _pick(rng, contexts)
    words = [name, verb, mod] + ([_pick(rng, ADJECTIVES)] if "adj" in paradigm else []) + [noun, "."]
    return " ".join(words)


def gen_agreement_corpus(spec: AgreementSpec = AgreementSpec(), seed: int = 0) -> AgreementCorpus:
    """Minimal pairs per paradigm plus training sentences.

    Det-noun pairs draw their (name, verb) context from a held-out split that
    training sentences never use.
    """
    unknown = set(spec.paradigms) - set(PARADIGMS)
    if unknown:
        raise DataError(f"unknown paradigm(s): {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    train_ctx, heldout_ctx = _context_split(rng, spec.heldout_fraction)
    pairs: list[MinimalPair] = []
    for paradigm in PARADIGMS:
        count = spec.paradigms.get(paradigm, 0)
        for _ in range(count):
            if paradigm == "subject_verb":
                pairs.append(_subject_verb_pair(rng))
            elif paradigm == "anaphor":
                pairs.append(_anaphor_pair(rng))
            else:
                pairs.append(_det_noun_pair(rng, paradigm, heldout_ctx))
    active = [p for p in PARADIGMS if spec.paradigms.get(p, 0) > 0] or ["det_noun"]
    sentences = [_training_sentence(rng, active, train_ctx) for _ in range(spec.train_sentences)]
    return AgreementCorpus(pairs, sentences, agreement_vocabulary())


def unique_source_target(pairs: Iterable[MinimalPair]) -> list[tuple[str, str]]:
    """Distinct (s, t) combinations in first-seen order."""
    seen: dict[tuple[str, str], None] = {}
    for p in pairs:
        seen.setdefault((p.s, p.t), None)
    return list(seen)


# ---------------------------------------------------------------------------
# fact knowledge base

FIELDS = (
    ("philosophy", "philosopher"), ("linguistics", "linguist"), ("physics", "physicist"),
    ("chemistry", "chemist"), ("biology", "biologist"), ("mathematics", "mathematician"),
    ("astronomy", "astronomer"), ("economics", "economist"), ("sociology", "sociologist"),
    ("psychology", "psychologist"), ("history", "historian"), ("geology", "geologist"),
    ("medicine", "physician"), ("law", "lawyer"), ("music", "musician"), ("poetry", "poet"),
    ("painting", "painter"), ("sculpture", "sculptor"), ("architecture", "architect"),
    ("aviation", "pilot"), ("journalism", "journalist"), ("photography", "photographer"),
    ("botany", "botanist"), ("zoology", "zoologist"), ("anthropology", "anthropologist"),
    ("archaeology", "archaeologist"), ("theology", "theologian"), ("statistics", "statistician"),
    ("engineering", "engineer"), ("politics", "politician"), ("diplomacy", "diplomat"),
    ("acting", "actor"), ("dance", "dancer"), ("cooking", "chef"), ("farming", "farmer"),
    ("nursing", "nurse"), ("dentistry", "dentist"), ("pharmacy", "pharmacist"),
    ("surgery", "surgeon"), ("accounting", "accountant"), ("banking", "banker"),
    ("literature", "writer"), ("genetics", "geneticist"), ("ecology", "ecologist"),
    ("neuroscience", "neuroscientist"), ("robotics", "roboticist"),
    ("cryptography", "cryptographer"), ("geography", "geographer"),
    ("meteorology", "meteorologist"), ("oceanography", "oceanographer"),
)

CAPITAL_OF_TEMPLATES = (f"{SOURCE} is the capital of {BLANK} .",
                        f"{SOURCE} serves as the capital of {BLANK} .",
                        f"the city of {SOURCE} is the capital of {BLANK} .")
CAPITAL_TEMPLATES = (f"the capital of {SOURCE} is {BLANK} .",
                     f"the capital city of {SOURCE} is {BLANK} .",
                     f"{SOURCE} has its capital in {BLANK} .")
FIELD_TEMPLATES = (f"{SOURCE} works in the field of {BLANK} .",
                   f"{SOURCE} is known for work in {BLANK} .")
SYNONYM_TEMPLATE = f"{SOURCE} is a famous {BLANK} ."
RELATION_TEMPLATES = {"capital_of": CAPITAL_OF_TEMPLATES, "capital": CAPITAL_TEMPLATES,
                      "field_of_work": FIELD_TEMPLATES}
INVERSE_RELATION = {"capital_of": "capital", "capital": "capital_of"}
BIJECTIVE = frozenset(INVERSE_RELATION)

_POOL_SEED = 20240229
_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr")
_VOWELS = ("a", "e", "i", "o", "u")


def _pseudo_words(rng: np.random.Generator, n: int, suffix: str, taken: set[str]) -> tuple[str, ...]:
    out = []
    while len(out) < n:
        w = "".join(_pick(rng, _ONSETS) + _pick(rng, _VOWELS) for _ in range(2)) + suffix
        if w not in taken:
            taken.add(w)
            out.append(w)
    return tuple(out)


def _name_pools():
    rng = np.random.default_rng(_POOL_SEED)
    taken: set[str] = set()
    countries = _pseudo_words(rng, 60, "nia", taken)
    cities = _pseudo_words(rng, 60, "burg", taken)
    people = _pseudo_words(rng, 80, "son", taken)
    return countries, cities, people


COUNTRIES, CITIES, PEOPLE = _name_pools()
SYNONYM_MAP = dict(FIELDS)


def fact_vocabulary() -> Vocabulary:
    words = list(COUNTRIES) + list(CITIES) + list(PEOPLE)
    for f, occ in FIELDS:
        words += [f, occ]
    for tpls in RELATION_TEMPLATES.values():
        for tpl in tpls:
            words += [w for w in tpl.split() if w not in (SOURCE, BLANK)]
    words += [w for w in SYNONYM_TEMPLATE.split() if w not in (SOURCE, BLANK)]
    return Vocabulary(words)


@dataclass(frozen=True)
class FactSpec:
    n_capitals: int = 50
    n_people: int = 60
    n_fields: int = 50


@dataclass
class KnowledgeBase:
    facts: list[FactTuple]
    synonym_map: dict[str, str]
    vocab: Vocabulary

    def relation(self, name: str) -> list[FactTuple]:
        return [f for f in self.facts if f.relation == name]

    def sentences(self) -> list[str]:
        """Every fact in every template, plus synonym-template sentences."""
        out = []
        for f in self.facts:
            for tpl in f.templates:
                out.append(tpl.replace(SOURCE, f.s).replace(BLANK, f.t))
            if f.relation == "field_of_work" and f.t in self.synonym_map:
                out.append(SYNONYM_TEMPLATE.replace(SOURCE, f.s).replace(BLANK, self.synonym_map[f.t]))
        return out


def gen_fact_kb(spec: FactSpec = FactSpec(), seed: int = 0) -> KnowledgeBase:
    """Bijective capital relations (both directions) and an N-1 field-of-work relation."""
    if spec.n_capitals > min(len(COUNTRIES), len(CITIES)):
        raise DataError(f"n_capitals={spec.n_capitals} exceeds the name pool ({min(len(COUNTRIES), len(CITIES))})")
    if spec.n_people > len(PEOPLE):
        raise DataError(f"n_people={spec.n_people} exceeds the name pool ({len(PEOPLE)})")
    if spec.n_fields > len(FIELDS):
        raise DataError(f"n_fields={spec.n_fields} exceeds the field pool ({len(FIELDS)})")
    if spec.n_capitals < 1:
        raise DataError("the knowledge base needs at least one bijective relation entry")
    rng = np.random.default_rng(seed)
    countries = [COUNTRIES[i] for i in rng.permutation(len(COUNTRIES))[:spec.n_capitals]]
    cities = [CITIES[i] for i in rng.permutation(len(CITIES))[:spec.n_capitals]]
    facts = [FactTuple(city, country, "capital_of", CAPITAL_OF_TEMPLATES) for city, country in zip(cities, countries)]
    facts += [FactTuple(country, city, "capital", CAPITAL_TEMPLATES) for city, country in zip(cities, countries)]
    fields = [FIELDS[i][0] for i in rng.permutation(len(FIELDS))[:spec.n_fields]]
    for person in (PEOPLE[i] for i in rng.permutation(len(PEOPLE))[:spec.n_people]):
        facts.append(FactTuple(person, _pick(rng, fields), "field_of_work", FIELD_TEMPLATES))
    synonyms = {f: SYNONYM_MAP[f] for f in fields}
    return KnowledgeBase(facts, synonyms, fact_vocabulary())


def _other(rng: np.random.Generator, options: Sequence[str], exclude: str) -> str:
    choice = exclude
    while choice == exclude:
        choice = _pick(rng, options)
    return choice


def build_symmetry_eval(kb: Sequence[FactTuple], seed: int = 0) -> list[EvalRecord]:
    """Edit ``s: t -> t*`` then ask the inverse question about ``t*``, expecting ``s``."""
    kb = list(kb)
    if len(kb) < 2:
        raise DataError("symmetry evaluation needs at least two facts")
    relations = {f.relation for f in kb}
    if len(relations) != 1:
        raise DataError(f"expected facts of a single relation, got {sorted(relations)}")
    relation = relations.pop()
    inverse: dict[str, str] = {}
    for f in kb:
        if f.t in inverse:
            raise DataError(f"relation {relation!r} is not bijective: target {f.t!r} repeats")
        inverse[f.t] = f.s
    if len({f.s for f in kb}) != len(kb):
        raise DataError(f"relation {relation!r} is not bijective: repeated source")
    inverse_template = RELATION_TEMPLATES.get(INVERSE_RELATION.get(relation, ""), (f"{SOURCE} inverse {BLANK} .",))[0]
    targets = [f.t for f in kb]
    rng = np.random.default_rng(seed)
    records = []
    for f in kb:
        t_star = _other(rng, targets, f.t)
        records.append(EvalRecord(
            edit_prompt=f.prompt(0), edit_target_old=f.t, edit_target_new=t_star,
            eval_prompt=inverse_template.replace(SOURCE, t_star), eval_expected=f.s,
            eval_original=inverse[t_star], subject=f.s, relation=relation))
    return records


def build_synonym_eval(kb: Sequence[FactTuple], synonym_map: Mapping[str, str], seed: int = 0) -> list[EvalRecord]:
    """Edit ``s: t -> t*`` then check the occupation template prefers synonym(t*).

    Facts whose target has no synonym entry are discarded (and logged).
    """
    kb = list(kb)
    kept = [f for f in kb if f.t in synonym_map]
    if len(kept) < len(kb):
        logger.warning("discarded %d facts without a synonym entry", len(kb) - len(kept))
    targets = sorted({f.t for f in kept})
    if len(targets) < 2:
        raise DataError("synonym evaluation needs at least two distinct targets")
    rng = np.random.default_rng(seed)
    records = []
    for f in kept:
        t_star = _other(rng, targets, f.t)
        records.append(EvalRecord(
            edit_prompt=f.prompt(0), edit_target_old=f.t, edit_target_new=t_star,
            eval_prompt=SYNONYM_TEMPLATE.replace(SOURCE, f.s), eval_expected=synonym_map[t_star],
            eval_original=synonym_map[f.t], subject=f.s, relation=f.relation))
    return records


# ---------------------------------------------------------------------------
# prompts and files


def encode_prompt(vocab: Vocabulary, text: str, mode: str) -> tuple[list[int], int]:
    """Token ids and readout position for a sentence containing one blank.

    Bidirectional prompts put MASK in the blank; causal prompts are cut just
    before it and read out at their last position.
    """
    words = text.split()
    if words.count(BLANK) != 1:
        raise DataError(f"prompt must contain exactly one blank: {text!r}")
    k = words.index(BLANK)
    if mode == "bidirectional":
        words[k] = MASK
        return vocab.encode(words), k
    if k == 0:
        raise DataError("causal prompts need at least one token before the blank")
    return vocab.encode(words[:k]), k - 1


def write_jsonl(path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            d = r.to_dict() if hasattr(r, "to_dict") else r
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON line ({exc})") from exc
