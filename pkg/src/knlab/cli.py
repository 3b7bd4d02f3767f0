"""``kn-lab`` command line: corpus generation through edit evaluation.

Every subcommand writes into ``--out`` a ``run_config.json`` holding the
parameters that produced the directory, and a ``run.log`` sidecar carrying
the timestamp and worker count (the only non-reproducible bytes).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .attribution import Prompt, batch_attribute, read_maps, write_maps
from .causal_trace import COMPONENTS, NoiseSpec, TracePrompt, average_indirect_effect, trace_prompt
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpora import (MODIFIERS, PARADIGMS, AgreementSpec, EvalRecord, FactSpec, FactTuple, MinimalPair,
                      build_symmetry_eval, build_synonym_eval, gen_agreement_corpus,
                      gen_fact_kb, read_jsonl, write_jsonl)
from .editing import categorical_accuracy, reliability, suppression_effect
from .exceptions import DataError, KnLabError, NumericError
from .harness import EDITORS, emit_report, eval_symmetry, eval_synonym, load_reports, reports_json
from .kn_search import KNSet, SearchConfig, refine_threshold
from .lm import PromptModel
from .localisation import localisation_csv, localisation_report
from .model import EditSpec, ModelConfig
from .training import TrainSettings, train
from .vocab import Vocabulary

logger = logging.getLogger("knlab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_SIDECAR_KEYS = ("jobs", "config", "func")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _SIDECAR_KEYS}
    (out / "run_config.json").write_text(_dump(config), encoding="utf-8")
    with open(out / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} knlab {__version__} {args.command} jobs={args.jobs}\n")
    return out


def _load_model(path) -> tuple[PromptModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if "vocab" not in ckpt.metadata:
        raise DataError(f"{path}: checkpoint carries no vocabulary")
    vocab = Vocabulary(ckpt.metadata["vocab"][2:])
    return PromptModel(ckpt.model(), vocab), ckpt


def _load_pairs(path, number_class: str = "all", paradigm: str | None = None, limit: int | None = None):
    pairs = [MinimalPair.from_dict(d) for d in read_jsonl(path)]
    if number_class != "all":
        pairs = [p for p in pairs if p.number_class == number_class]
    if paradigm:
        pairs = [p for p in pairs if p.paradigm == paradigm]
    if limit:
        pairs = pairs[:limit]
    if not pairs:
        raise DataError(f"{path}: no minimal pairs match the filters")
    return pairs


def _load_records(path, limit=None) -> list[EvalRecord]:
    records = [EvalRecord.from_dict(d) for d in read_jsonl(path)]
    return records[:limit] if limit else records


def _load_kn(path) -> KNSet:
    try:
        return KNSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed KN set ({exc})") from exc


def _search_config(args) -> SearchConfig:
    return SearchConfig(args.pi, args.tau, args.step, args.lo, args.hi, args.max_iter)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args) -> int:
    out = _prepare_out(args)
    if args.kind == "agreement":
        paradigms = {}
        for item in args.paradigms.split(","):
            name, _, count = item.partition("=")
            paradigms[name.strip()] = int(count or args.pairs)
        corpus = gen_agreement_corpus(AgreementSpec(paradigms, args.train_sentences), args.seed)
        write_jsonl(out / "pairs.jsonl", corpus.pairs)
        (out / "train.txt").write_text("\n".join(corpus.sentences) + "\n", encoding="utf-8")
        vocab = corpus.vocab
    else:
        kb = gen_fact_kb(FactSpec(args.n_capitals, args.n_people, args.n_fields), args.seed)
        write_jsonl(out / "kb.jsonl", kb.facts)
        (out / "synonyms.json").write_text(_dump(kb.synonym_map), encoding="utf-8")
        for relation in ("capital_of", "capital"):
            write_jsonl(out / f"symmetry_{relation}.jsonl", build_symmetry_eval(kb.relation(relation), args.seed))
        write_jsonl(out / "synonym.jsonl", build_synonym_eval(kb.relation("field_of_work"), kb.synonym_map, args.seed))
        (out / "train.txt").write_text("\n".join(kb.sentences()) + "\n", encoding="utf-8")
        vocab = kb.vocab
    (out / "vocab.json").write_text(_dump(list(vocab.tokens)), encoding="utf-8")
    return EXIT_OK


def cmd_train(args) -> int:
    corpus_dir = Path(args.corpus)
    try:
        tokens = json.loads((corpus_dir / "vocab.json").read_text(encoding="utf-8"))
        lines = [l for l in (corpus_dir / "train.txt").read_text(encoding="utf-8").splitlines() if l.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read corpus in {corpus_dir}: {exc}") from exc
    out = _prepare_out(args)
    vocab = Vocabulary(tokens[2:])
    config = ModelConfig(args.layers, args.d_model, args.d_mlp, args.heads, len(vocab), args.max_len, args.mode,
                         mask_token_id=vocab.mask_id, pad_token_id=vocab.pad_id)
    settings = TrainSettings(epochs=args.epochs, max_steps=args.max_steps, batch_size=args.batch_size, lr=args.lr)
    ckpt = train(config, [vocab.encode(l) for l in lines], settings, args.seed)
    ckpt.metadata["vocab"] = list(vocab.tokens)
    save_checkpoint(ckpt, out / "model.knlb")
    (out / "losses.json").write_text(_dump(ckpt.metadata["epoch_losses"]), encoding="utf-8")
    return EXIT_OK


def _prompts(args, pm: PromptModel) -> list[Prompt]:
    prompts = []
    if args.facts:
        facts = [FactTuple.from_dict(d) for d in read_jsonl(args.facts)]
        if args.relation:
            facts = [f for f in facts if f.relation == args.relation]
        facts = facts[:args.limit] if args.limit else facts
        for i, f in enumerate(facts):
            ids, pos = pm.encode(f.prompt(0))
            prompts.append(Prompt(ids, pos, pm.vocab.id(f.t), f"{i}:{f.s}"))
    else:
        pairs = _load_pairs(args.pairs, args.number_class, args.paradigm, args.limit)
        for i, p in enumerate(pairs):
            ids, pos = pm.encode(p.template)
            prompts.append(Prompt(ids, pos, pm.vocab.id(p.t), f"{i}:{p.s}:{p.t}"))
    if not prompts:
        raise DataError("no prompts selected")
    return prompts


def cmd_attribute(args) -> int:
    if not args.pairs and not args.facts:
        raise UsageError("attribute needs --pairs or --facts")
    pm, _ = _load_model(args.model)
    prompts = _prompts(args, pm)
    out = _prepare_out(args)
    maps = batch_attribute(pm.model, prompts, args.steps, args.scope, args.jobs)
    write_maps(out / "maps.jsonl", maps)
    return EXIT_OK


def cmd_kn_search(args) -> int:
    maps = read_maps(args.maps)
    kn = refine_threshold(maps, _search_config(args), label=args.label)
    text = _dump(kn.to_dict())
    sys.stdout.write(text)
    if args.out:
        out = _prepare_out(args)
        (out / "knset.json").write_text(text, encoding="utf-8")
        row = localisation_report(args.label or Path(args.maps).stem, maps, kn)
        (out / "localisation.csv").write_text(localisation_csv([row]), encoding="utf-8")
    return EXIT_OK


def cmd_edit_effect(args) -> int:
    pm, _ = _load_model(args.model)
    kn = _load_kn(args.kn)
    pairs = _load_pairs(args.pairs, args.number_class, args.paradigm, args.limit)
    probes = args.probes.split(",") if args.probes else \
        list(MODIFIERS["plural"]) + list(MODIFIERS["singular"]) + list(MODIFIERS["neutral"])
    out = _prepare_out(args)
    prompts = [p.template for p in pairs]
    report = suppression_effect(pm, kn, prompts, probes, welch=args.welch, scope=args.scope)
    (out / "effect.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "effect.svg").write_text(report.to_svg(), encoding="utf-8")
    edit = EditSpec.suppress(kn.neurons, args.scope)
    pre = categorical_accuracy(pm, pairs)
    post = categorical_accuracy(pm, pairs, edit)
    summary = {"pre": pre.score, "post": post.score, "delta": post.score - pre.score,
               "pre_num": pre.num, "post_num": post.num, "den": pre.den}
    (out / "accuracy.json").write_text(_dump(summary), encoding="utf-8")
    return EXIT_OK


def cmd_reliability(args) -> int:
    pm, _ = _load_model(args.model)
    kn = _load_kn(args.kn)
    pairs = _load_pairs(args.pairs, args.number_class, args.paradigm, args.limit)
    out = _prepare_out(args)
    edit = EditSpec.suppress(kn.neurons, args.scope)
    result = reliability(pm, [(edit, p.template, p.t, p.t_star) for p in pairs])
    (out / "reliability.json").write_text(_dump(
        {"score": result.score, "num": result.num, "den": result.den, "excluded": result.excluded}), encoding="utf-8")
    return EXIT_OK


def cmd_trace(args) -> int:
    pm, _ = _load_model(args.model)
    noise = NoiseSpec(args.nu, args.seed, args.resample)
    dataset = []
    if args.prompt:
        if not args.subject or not args.target:
            raise UsageError("--prompt needs --subject and --target")
        texts = [(args.prompt, args.subject, args.target)]
    else:
        if not args.facts:
            raise UsageError("trace needs --prompt or --facts")
        facts = [FactTuple.from_dict(d) for d in read_jsonl(args.facts)]
        if args.relation:
            facts = [f for f in facts if f.relation == args.relation]
        facts = facts[:args.limit] if args.limit else facts
        texts = [(f.prompt(0), f.s, f.t) for f in facts]
    for i, (text, subject, target) in enumerate(texts):
        ids, pos = pm.encode(text)
        words = pm.encode(text)[0]
        sid = pm.vocab.id(subject)
        if sid not in words:
            raise DataError(f"subject {subject!r} does not occur in prompt {text!r}")
        k = words.index(sid)
        dataset.append(TracePrompt(ids, pos, (k, k + 1), pm.vocab.id(target), str(i)))
    out = _prepare_out(args)
    if len(dataset) == 1:
        grid = trace_prompt(pm.model, dataset[0], noise, args.window, args.jobs)
        grid.tokens = pm.vocab.decode(dataset[0].token_ids)
    else:
        grid = average_indirect_effect(pm.model, dataset, noise, args.window, args.jobs).as_trace_grid()
    (out / "trace.json").write_text(_dump(grid.to_dict()), encoding="utf-8")
    for comp in COMPONENTS:
        (out / f"trace_{comp}.svg").write_text(grid.to_svg(comp), encoding="utf-8")
    return EXIT_OK


def _cmd_eval(args, fn) -> int:
    pm, _ = _load_model(args.model)
    records = _load_records(args.records, args.limit)
    editor_cls = EDITORS[args.editor]
    editor = editor_cls(steps=args.steps) if args.editor == "kn-suppress" else editor_cls(factor=args.factor, steps=args.steps)
    out = _prepare_out(args)
    report = fn(pm, editor, records, model_id=Path(args.model).stem, dataset_id=Path(args.records).stem)
    report.seed = args.seed
    (out / "report.json").write_text(reports_json([report]), encoding="utf-8")
    return EXIT_OK


def cmd_eval_symmetry(args) -> int:
    return _cmd_eval(args, eval_symmetry)


def cmd_eval_synonym(args) -> int:
    return _cmd_eval(args, eval_synonym)


def cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        reports.extend(load_reports(path))
    out = _prepare_out(args)
    emit_report(reports, out, [f.strip() for f in args.formats.split(",") if f.strip()])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kn-lab", description="Knowledge-neuron laboratory on toy transformers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1, help="worker threads; outputs do not depend on it")
        p.add_argument("--config", help="JSON file of defaults; explicit flags win")
        return p

    def search_flags(p):
        p.add_argument("--pi", type=float, default=0.20, help="fraction of a prompt's max score")
        p.add_argument("--tau", type=float, default=0.70, help="initial sharing threshold")
        p.add_argument("--step", type=float, default=0.05)
        p.add_argument("--lo", type=int, default=2)
        p.add_argument("--hi", type=int, default=5)
        p.add_argument("--max-iter", type=int, default=20)

    def pair_flags(p, required=True):
        p.add_argument("--pairs", required=required)
        p.add_argument("--number-class", default="all", choices=("all", "singular", "plural"))
        p.add_argument("--paradigm", choices=PARADIGMS)
        p.add_argument("--limit", type=int)

    p = add("gen-corpus", cmd_gen_corpus, "generate synthetic corpora")
    p.add_argument("--kind", choices=("agreement", "facts"), default="agreement")
    p.add_argument("--paradigms", default="det_noun")
    p.add_argument("--pairs", type=int, default=1000, help="pairs per paradigm without an explicit count")
    p.add_argument("--train-sentences", type=int, default=4000)
    p.add_argument("--n-capitals", type=int, default=50)
    p.add_argument("--n-people", type=int, default=60)
    p.add_argument("--n-fields", type=int, default=50)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a toy transformer")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("bidirectional", "causal"), default="bidirectional")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-mlp", type=int, default=256)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-len", type=int, default=24)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--out", required=True)

    p = add("attribute", cmd_attribute, "integrated-gradients neuron attribution")
    p.add_argument("--model", required=True)
    pair_flags(p, required=False)
    p.add_argument("--facts")
    p.add_argument("--relation")
    p.add_argument("--steps", type=int, default=20, help="midpoint Riemann steps m")
    p.add_argument("--scope", choices=("all_tokens", "target_only"), default="all_tokens")
    p.add_argument("--out", required=True)

    p = add("kn-search", cmd_kn_search, "threshold-refinement KN search")
    p.add_argument("--maps", required=True)
    p.add_argument("--label", default="")
    search_flags(p)
    p.add_argument("--out")

    p = add("edit-effect", cmd_edit_effect, "suppression effect on probe tokens")
    p.add_argument("--model", required=True)
    p.add_argument("--kn", required=True)
    pair_flags(p)
    p.add_argument("--probes", help="comma-separated probe tokens")
    p.add_argument("--welch", action="store_true")
    p.add_argument("--scope", choices=("all_tokens", "target_only"), default="all_tokens")
    p.add_argument("--out", required=True)

    p = add("reliability", cmd_reliability, "flip rate of a KN suppression edit")
    p.add_argument("--model", required=True)
    p.add_argument("--kn", required=True)
    pair_flags(p)
    p.add_argument("--scope", choices=("all_tokens", "target_only"), default="all_tokens")
    p.add_argument("--out", required=True)

    p = add("trace", cmd_trace, "causal tracing")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt")
    p.add_argument("--subject")
    p.add_argument("--target")
    p.add_argument("--facts")
    p.add_argument("--relation")
    p.add_argument("--limit", type=int)
    p.add_argument("--nu", type=float, default=3.0, help="noise std in units of the embedding std")
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--resample", action="store_true")
    p.add_argument("--out", required=True)

    for name, func in (("eval-symmetry", cmd_eval_symmetry), ("eval-synonym", cmd_eval_synonym)):
        p = add(name, func, f"{name[5:]} evaluation of an editor")
        p.add_argument("--model", required=True)
        p.add_argument("--records", required=True)
        p.add_argument("--editor", choices=sorted(EDITORS), default="kn-suppress")
        p.add_argument("--factor", type=float, default=2.0)
        p.add_argument("--steps", type=int, default=20)
        p.add_argument("--limit", type=int)
        p.add_argument("--out", required=True)

    p = add("report", cmd_report, "merge evaluation reports")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--formats", default="csv,json")
    p.add_argument("--out", required=True)
    return parser


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    commands = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in commands), None)
    if config_path and command:
        try:
            defaults = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(defaults, dict):
            raise UsageError("the config file must hold a JSON object")
        sub = commands[command]
        actions = {a.dest: a for a in sub._actions}
        bad = set(defaults) - set(actions)
        if bad:
            raise UsageError(f"unknown config keys: {sorted(bad)}")
        for key in defaults:
            # a value from the config satisfies a required flag
            actions[key].required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise UsageError("a subcommand is required")
    return args


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parse(sys.argv[1:] if argv is None else argv)
        return args.func(args)
    except UsageError as exc:
        print(f"kn-lab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"kn-lab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KnLabError, OSError) as exc:
        print(f"kn-lab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
