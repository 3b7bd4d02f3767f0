import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from knlab.corpora import DEMONSTRATIVES, AgreementSpec, MODIFIERS, agreement_vocabulary, gen_agreement_corpus
from knlab.editing import categorical_accuracy, relative_effect, reliability, suppression_effect, ttest
from knlab.exceptions import DataError
from knlab.kn_search import KNSet
from knlab.lm import EditedModel, PromptModel
from knlab.mocks import LookupTableModel, peaked, swap_top_two
from knlab.model import EditSpec, ModelConfig, NeuronRef, TransformerLM, init_weights
from knlab.vocab import Vocabulary

from oracles import pooled_t, t_two_sided_p_even_df

VOCAB = Vocabulary(["a", "b", "c", "d"])


def test_hand_built_groups():
    pre, post = [.1, .2, .1, .2], [.4, .5, .4, .5]
    t, df = pooled_t(post, pre)
    result = ttest(post, pre)
    assert abs(result.t - t) <= 1e-9 and abs(result.t - 3 * math.sqrt(6)) <= 1e-9
    assert result.df == df == 6
    assert abs(result.p - t_two_sided_p_even_df(t, 6)) <= 1e-9


def test_swapping_groups_negates_t():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.normal(size=int(rng.integers(2, 9))), rng.normal(1.0, size=int(rng.integers(2, 9)))
        ab, ba = ttest(a, b), ttest(b, a)
        assert ab.t == -ba.t and abs(ab.p - ba.p) <= 1e-12
        wab, wba = ttest(a, b, welch=True), ttest(b, a, welch=True)
        assert wab.t == -wba.t


def test_welch_matches_scipy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=7), rng.normal(0.5, 3.0, size=11)
    ours = ttest(a, b, welch=True)
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert ours.t == pytest.approx(ref.statistic, rel=1e-12) and ours.p == pytest.approx(ref.pvalue, rel=1e-9)


def test_degenerate_groups():
    flat = ttest([0.3, 0.3], [0.3, 0.3])
    assert (flat.t, flat.p) == (0.0, 1.0)
    apart = ttest([0.5, 0.5], [0.3, 0.3])
    assert apart.t == math.inf and apart.p == 0.0
    with pytest.raises(DataError):
        ttest([1.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_relative_effect_sign(pre, post):
    e = relative_effect(pre, post)
    assert np.sign(e) == np.sign(post - pre)
    assert np.isfinite(e)


def toy_prompt_model(seed=0, std=0.3):
    vocab = agreement_vocabulary()
    cfg = ModelConfig(num_layers=2, d_model=16, d_mlp=32, n_heads=2, vocab_size=len(vocab), max_seq_len=8)
    rng = np.random.default_rng(seed)
    return PromptModel(TransformerLM(cfg, init_weights(cfg, rng, std)), vocab)


def test_no_op_edit_has_zero_effect():
    pm = toy_prompt_model()
    pairs = gen_agreement_corpus(AgreementSpec({"det_noun": 30}, 10), seed=0).pairs
    edit = EditSpec.scale([NeuronRef(0, 1), NeuronRef(1, 3)], 1.0)
    report = suppression_effect(pm, edit, [p.template for p in pairs], list(MODIFIERS["plural"]))
    for row in report.rows:
        assert row.effect == 0.0 and row.t == 0.0 and not row.significant
    assert report.to_csv().splitlines()[0] == "token,pre,post,effect,t,p,significant"
    assert report.to_svg().startswith("<svg")


def test_suppression_effect_matches_manual_recount():
    pm = toy_prompt_model(1)
    prompts = [p.template for p in gen_agreement_corpus(AgreementSpec({"det_noun": 12}, 10), seed=1).pairs]
    kn = KNSet((NeuronRef(0, 4), NeuronRef(1, 9)), 0.7, 2, 0)
    report = suppression_effect(pm, kn, prompts, ["these", "this"])
    edit = EditSpec.suppress(kn.neurons)
    for row in report.rows:
        tid = pm.vocab.id(row.token)
        pre = [pm.distribution(p)[tid] for p in prompts]
        post = [pm.distribution(p, edit)[tid] for p in prompts]
        assert row.pre == pytest.approx(np.mean(pre), abs=1e-14)
        assert row.post == pytest.approx(np.mean(post), abs=1e-14)
        t, _ = pooled_t(post, pre)
        assert row.t == pytest.approx(t, rel=1e-9)
        assert row.significant == (row.p < 0.05)


def test_suppression_guards():
    pm = toy_prompt_model()
    with pytest.raises(DataError):
        suppression_effect(pm, [NeuronRef(0, 1)], [], ["this"])
    with pytest.raises(DataError):
        suppression_effect(pm, [NeuronRef(9, 1)], ["carl sees ___ dogs ."] * 2, ["this"])
    with pytest.raises(DataError):
        suppression_effect(pm, [NeuronRef(0, 1)], ["carl sees ___ dogs ."] * 2, ["zebra"])


def test_swap_top_two_reliability():
    table = {"p1": peaked(VOCAB, "a"), "p2": peaked(VOCAB, "b"), "p3": peaked(VOCAB, "c")}
    model = LookupTableModel(VOCAB, table, edit_fn=swap_top_two)
    # the runner-up after the peak is the first of the tied rest, in stable order
    edits = [("e", "p1", "a", "[PAD]"), ("e", "p2", "b", "[PAD]"), ("e", "p3", "c", "[PAD]")]
    result = reliability(model, edits)
    assert (result.score, result.num, result.den, result.excluded) == (1.0, 3, 3, 0)


def test_reliability_recount_and_exclusions():
    rng = np.random.default_rng(2)
    table = {f"p{i}": rng.dirichlet(np.ones(len(VOCAB))) for i in range(40)}
    model = LookupTableModel(VOCAB, table, edit_fn=lambda p, d, e: np.roll(d, e))
    edits = [(int(rng.integers(1, 4)), f"p{i}", "a", "b") for i in range(40)]
    num = den = excluded = 0
    for shift, prompt, t, ts in edits:
        d = table[prompt]
        if d[VOCAB.id(t)] > d[VOCAB.id(ts)]:
            den += 1
            after = np.roll(d, shift)
            num += int(after[VOCAB.id(ts)] > after[VOCAB.id(t)])
        else:
            excluded += 1
    result = reliability(model, edits)
    assert (result.num, result.den, result.excluded) == (num, den, excluded)
    assert result.score == num / den and den + excluded == 40
    with pytest.raises(DataError):
        reliability(model, [])
    with pytest.raises(DataError):
        reliability(model, [(1, "p0", "a", "a")])


def test_categorical_accuracy_on_scripted_and_untrained_models():
    pairs = gen_agreement_corpus(AgreementSpec({"det_noun": 1000}, 10), seed=3).pairs
    vocab = agreement_vocabulary()
    table = {}
    for p in pairs:
        # templates repeat with either demonstrative of a class, so favour the whole class
        d = np.full(len(vocab), 0.01)
        for det in DEMONSTRATIVES[p.number_class]:
            d[vocab.id(det)] = 0.4
        table[p.template] = d / d.sum()
    prefers_t = LookupTableModel(vocab, table)
    assert categorical_accuracy(prefers_t, pairs).score == 1.0
    untrained = toy_prompt_model(4, std=0.02)
    result = categorical_accuracy(untrained, pairs)
    n = result.den
    lo, hi = stats.binom.ppf([0.005, 0.995], n, 0.5) / n
    assert lo <= result.score <= hi
    with pytest.raises(DataError):
        categorical_accuracy(untrained, [])


def test_edited_model_view_is_non_destructive():
    pm = toy_prompt_model()
    prompt = "carl sees ___ dogs ."
    before = pm.distribution(prompt)
    view = EditedModel(pm, EditSpec.suppress([NeuronRef(0, 0), NeuronRef(1, 1)]))
    assert not np.array_equal(view.distribution(prompt), before)
    assert np.array_equal(pm.distribution(prompt), before)
    assert np.array_equal(view.distributions([prompt])[0], view.distribution(prompt))
