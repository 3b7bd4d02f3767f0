import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knlab.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from knlab.exceptions import CheckpointError, DataError
from knlab.model import EditSpec, ModelConfig, NeuronRef, Override, TransformerLM, attention_mask

from conftest import random_model, random_prompt, small_config


def all_neurons(cfg):
    return [NeuronRef(l, n) for l in range(cfg.num_layers) for n in range(cfg.d_mlp)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_distribution_sums_to_one(seed):
    model = random_model(seed % 7)
    ids, pos = random_prompt(np.random.default_rng(seed), model.config)
    probs, _ = model.forward(ids, pos)
    assert abs(probs.sum() - 1.0) <= 1e-12 and np.all(probs >= 0)


def test_empty_edit_is_identity(model):
    ids, pos = random_prompt(np.random.default_rng(1), model.config)
    plain, _ = model.forward(ids, pos)
    edited = model.forward_with_overrides(ids, pos, EditSpec(()))
    assert plain.tobytes() == edited.tobytes()


@pytest.mark.parametrize("scope", ["all_tokens", "target_only"])
def test_scale_one_is_identity(model, scope):
    ids, pos = random_prompt(np.random.default_rng(2), model.config)
    plain, _ = model.forward(ids, pos)
    edit = EditSpec.scale(all_neurons(model.config)[::5], 1.0, scope)
    assert model.forward_with_overrides(ids, pos, edit).tobytes() == plain.tobytes()


def test_setting_a_neuron_to_its_own_value_is_identity(model):
    ids, pos = random_prompt(np.random.default_rng(3), model.config)
    plain, acts = model.forward(ids, pos)
    n = NeuronRef(1, 7)
    edit = EditSpec((Override(n, "set", float(acts[1, pos, 7]), "target_only"),))
    assert model.forward_with_overrides(ids, pos, edit).tobytes() == plain.tobytes()


def test_suppressing_every_neuron_matches_bias_only_oracle(model):
    ids, pos = random_prompt(np.random.default_rng(4), model.config)
    suppressed = model.forward_with_overrides(ids, pos, EditSpec.suppress(all_neurons(model.config)))
    weights = dict(model.weights)
    for l in range(model.config.num_layers):
        weights[f"blocks.{l}.mlp.w2"] = np.zeros_like(weights[f"blocks.{l}.mlp.w2"])
    oracle, _ = TransformerLM(model.config, weights).forward(ids, pos)
    assert np.max(np.abs(suppressed - oracle)) <= 1e-10


def test_target_only_scope_touches_one_row(model):
    ids, pos = random_prompt(np.random.default_rng(5), model.config, length=6)
    edit = EditSpec.suppress([NeuronRef(0, 3)], "target_only")
    values = model.trace_values(ids, pos, model.edit_overrides(edit, len(ids), [pos]))
    _, clean = model.forward(ids, pos)
    act = values["mlp_act.0"][0]
    assert act[pos, 3] == 0.0
    others = [t for t in range(len(ids)) if t != pos]
    assert np.array_equal(act[others, 3], clean[0, others, 3])


def test_edits_do_not_mutate_the_model(model):
    ids, pos = random_prompt(np.random.default_rng(6), model.config)
    before, _ = model.forward(ids, pos)
    model.forward_with_overrides(ids, pos, EditSpec.suppress(all_neurons(model.config)))
    after, _ = model.forward(ids, pos)
    assert before.tobytes() == after.tobytes()
    with pytest.raises(ValueError):
        model.weights["tok_emb"][0, 0] = 1.0


def test_causal_distribution_ignores_later_tokens(causal_model):
    cfg = causal_model.config
    rng = np.random.default_rng(7)
    for _ in range(10):
        T = int(rng.integers(4, cfg.max_seq_len + 1))
        ids = rng.integers(2, cfg.vocab_size, size=(1, T))
        k = int(rng.integers(T - 1))
        changed = ids.copy()
        changed[0, k + 1:] = rng.integers(2, cfg.vocab_size, size=T - k - 1)
        a = causal_model.probs_batch(ids, [k])
        b = causal_model.probs_batch(changed, [k])
        short = causal_model.probs_batch(ids[:, :k + 1], [k])
        assert a.tobytes() == b.tobytes()
        assert np.max(np.abs(a - short)) <= 1e-12


def test_attention_mask_shapes():
    cfg = small_config("causal")
    m = attention_mask(cfg, np.ones((1, 4), dtype=bool))
    allowed = m[0, 0] == 0
    assert np.array_equal(allowed, np.tril(np.ones((4, 4), dtype=bool)))
    bid = attention_mask(small_config(), np.array([[True, True, False]]))
    assert np.all(bid[0, 0][:, 2] < -1e8) and np.all(bid[0, 0][:, :2] == 0)


def test_padded_batch_matches_single_forwards(model):
    rng = np.random.default_rng(8)
    prompts = [random_prompt(rng, model.config) for _ in range(5)]
    T = max(len(p[0]) for p in prompts)
    ids = np.zeros((5, T), dtype=np.int64)
    valid = np.zeros((5, T), dtype=bool)
    for i, (p, _) in enumerate(prompts):
        ids[i, :len(p)] = p
        valid[i, :len(p)] = True
    batch = model.probs_batch(ids, [p[1] for p in prompts], key_mask=valid)
    for i, (p, pos) in enumerate(prompts):
        single, _ = model.forward(p, pos)
        assert np.max(np.abs(batch[i] - single)) <= 1e-12


def test_prompt_validation(model, causal_model):
    with pytest.raises(DataError):
        model.forward([3, 4, 5], 1)  # no MASK at the target
    with pytest.raises(DataError):
        causal_model.forward([3, 4, 5], 1)  # target must be last
    with pytest.raises(DataError):
        model.forward([3, 1, 99], 1)
    with pytest.raises(DataError):
        model.forward_with_overrides([3, 1, 4], 1, EditSpec.suppress([NeuronRef(5, 0)]))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(mode="sideways")
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=4, mask_token_id=9)
    cfg = small_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_neuron_ref_and_edit_spec_round_trip():
    n = NeuronRef(1, 42)
    assert str(n) == "L1.N42" and NeuronRef.parse(str(n)) == n
    edit = EditSpec((Override(n, "scale", 2.5, "target_only"), Override(NeuronRef(0, 1), "set", 0.0)))
    assert EditSpec.from_dict(edit.to_dict()) == edit
    with pytest.raises(ValueError):
        EditSpec((Override(n, "set", 0.0), Override(n, "set", 1.0)))
    with pytest.raises(ValueError):
        Override(n, "double", 1.0)


# -- checkpoints


def test_checkpoint_round_trip_is_bit_exact(model, tmp_path):
    ckpt = Checkpoint(model.config, dict(model.weights), {"note": "x"})
    path = tmp_path / "m.knlb"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    ids, pos = random_prompt(np.random.default_rng(9), model.config)
    assert loaded.model().forward(ids, pos)[0].tobytes() == model.forward(ids, pos)[0].tobytes()
    assert loaded.metadata == {"note": "x"} and loaded.config == model.config
    assert to_bytes(loaded) == path.read_bytes()


def test_checkpoint_hash_is_stable(model):
    ckpt = Checkpoint(model.config, dict(model.weights), {"seed": 0})
    again = Checkpoint(random_model(0).config, dict(random_model(0).weights), {"seed": 0})
    assert hashlib.sha256(to_bytes(ckpt)).hexdigest() == hashlib.sha256(to_bytes(again)).hexdigest()


def test_checkpoint_guards(model):
    data = to_bytes(Checkpoint(model.config, dict(model.weights), {}))
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(b"XXXX" + data[4:])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        from_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        from_bytes(data[:20])
    with pytest.raises(DataError):
        Checkpoint(model.config, {k: v for k, v in model.weights.items() if k != "tok_emb"}, {}).model()
