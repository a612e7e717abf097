from types import SimpleNamespace

import numpy as np
import pytest
import torch

from starlab.backbone import BackboneConfig, init_backbone
from starlab.errors import ConfigError
from starlab.sampling import (
    DecodeRecord,
    ar_decode,
    ar_decode_batch,
    decode_testset,
    dynamics_matrix,
    hinted_decode,
    nar_decode,
    nar_decode_batch,
    position_step_spearman,
)
from starlab.stargraph import StarSpec, build_testset


class StubModel:
    """Minimal stand-in exposing the decode-facing surface of a Backbone."""

    def __init__(self, mode, vocab_size, fn):
        self.config = SimpleNamespace(mode=mode, vocab_size=vocab_size)
        self.fn = fn
        self.training = False
        self.calls = []

    def eval(self):
        return self

    def __call__(self, tokens, t=0.0, capture=False):
        self.calls.append((tokens.clone(), t))
        return self.fn(tokens, t)


def constant_token_model(mode, vocab, tok):
    def fn(tokens, t):
        logits = torch.zeros(*tokens.shape, vocab)
        logits[..., tok] = 10.0
        return logits

    return StubModel(mode, vocab, fn)


def real_nar(seed=0, vocab=12, max_len=24):
    cfg = BackboneConfig(vocab_size=vocab, max_len=max_len, d_model=16, n_blocks=1, n_heads=2, dropout=0.0, mode="nar")
    return init_backbone(cfg, seed)


class TestArDecode:
    def test_constant_model_emits_constant_path(self):
        model = constant_token_model("ar", 7, tok=3)
        rec = ar_decode(model, np.array([1, 2, 1, 4]), path_len=5)
        assert rec.path.tolist() == [3] * 5
        assert rec.unmask_step.tolist() == [0, 1, 2, 3, 4]
        assert rec.steps_taken == 5

    def test_forced_positions_respected(self):
        model = constant_token_model("ar", 7, tok=3)
        preds = ar_decode_batch(model, np.array([[1, 2]]), path_len=4, forced=np.array([[5, 6]]))
        assert preds[0].tolist() == [5, 6, 3, 3]


class TestNarDecode:
    def test_single_position_single_step(self):
        model = constant_token_model("nar", 7, tok=2)
        rec = nar_decode(model, np.array([1, 2]), path_len=1, mask_id=6)
        assert rec.path.tolist() == [2]
        assert rec.unmask_step.tolist() == [0]
        assert rec.steps_taken == 1

    def test_unmask_step_is_permutation(self):
        model = real_nar()
        rng = np.random.default_rng(0)
        for seed in range(5):
            prefix = rng.integers(0, 10, size=8)
            rec = nar_decode(model, prefix, path_len=6, mask_id=11, seed=seed)
            assert sorted(rec.unmask_step.tolist()) == list(range(6))

    def test_prefix_never_modified(self):
        model = real_nar()
        prefix = np.arange(8) % 10
        nar_decode(model, prefix, path_len=4, mask_id=11)
        for tokens, _ in model.calls if hasattr(model, "calls") else []:
            assert tokens[0, :8].numpy().tolist() == prefix.tolist()

    def test_determinism(self):
        model = real_nar()
        prefix = np.arange(10) % 10
        r1 = nar_decode(model, prefix, path_len=5, mask_id=11)
        r2 = nar_decode(model, prefix, path_len=5, mask_id=11)
        assert r1.path.tolist() == r2.path.tolist()
        assert r1.unmask_step.tolist() == r2.unmask_step.tolist()

    def test_fixed_order_policies(self):
        model = real_nar()
        prefix = np.arange(8) % 10
        l2r = nar_decode(model, prefix, path_len=4, mask_id=11, policy="left_to_right")
        assert l2r.unmask_step.tolist() == [0, 1, 2, 3]
        r2l = nar_decode(model, prefix, path_len=4, mask_id=11, policy="right_to_left")
        assert r2l.unmask_step.tolist() == [3, 2, 1, 0]

    def test_commit_budget_validstion(self):
        model = real_nar()
        with pytest.raises(ConfigError):
            nar_decode(model, np.arange(8) % 10, path_len=6, mask_id=11, steps=2, commit_per_step=2)

    def test_multi_commit_per_step(self):
        model = real_nar()
        rec = nar_decode(model, np.arange(8) % 10, path_len=6, mask_id=11, steps=3, commit_per_step=2)
        assert rec.steps_taken == 3
        counts = np.bincount(rec.unmask_step, minlength=3)
        assert counts.tolist() == [2, 2, 2]

    def test_unknown_policy(self):
        model = real_nar()
        with pytest.raises(ConfigError):
            nar_decode(model, np.arange(8) % 10, path_len=4, mask_id=11, policy="entropy")


class TestHintedDecode:
    def test_full_hint_returns_gold(self):
        model = real_nar()
        gold = np.array([1, 2, 3, 4])
        rec = hinted_decode(model, np.arange(8) % 10, gold, k=4, mask_id=11)
        assert rec.path.tolist() == gold.tolist()
        assert rec.steps_taken == 0
        assert (rec.unmask_step == -1).all()

    def test_zero_hint_equals_unhinted(self):
        model = real_nar()
        prefix = np.arange(8) % 10
        gold = np.array([1, 2, 3, 4])
        hinted = hinted_decode(model, prefix, gold, k=0, mask_id=11)
        plain = nar_decode(model, prefix, path_len=4, mask_id=11)
        assert hinted.path.tolist() == plain.path.tolist()
        assert hinted.unmask_step.tolist() == plain.unmask_step.tolist()

    def test_ar_hint_pins_positions(self):
        model = constant_token_model("ar", 7, tok=3)
        gold = np.array([5, 6, 1, 2])
        rec = hinted_decode(model, np.array([1, 2]), gold, k=2)
        assert rec.path[:2].tolist() == [5, 6]
        assert rec.path[2:].tolist() == [3, 3]
        assert rec.unmask_step.tolist() == [-1, -1, 2, 3]

    def test_hint_too_long(self):
        model = real_nar()
        with pytest.raises(ConfigError):
            hinted_decode(model, np.arange(8) % 10, np.array([1, 2]), k=3, mask_id=11)


class TestDynamicsMatrix:
    def test_single_record_one_hot_columns(self):
        rec = DecodeRecord(np.array([1, 2, 3]), np.array([2, 1, 0]), 3)
        mat = dynamics_matrix([rec])
        assert mat.U.shape == (3, 3)
        assert mat.U[2, 0] == 1.0 and mat.U[1, 1] == 1.0 and mat.U[0, 2] == 1.0
        assert np.allclose(mat.U.sum(axis=0), 1.0)

    def test_ar_records_identity_diagonal(self):
        model = constant_token_model("ar", 7, tok=1)
        recs = [ar_decode(model, np.array([1, 2]), path_len=4) for _ in range(10)]
        mat = dynamics_matrix(recs)
        assert np.allclose(mat.U, np.eye(4))

    def test_columns_sum_to_one(self):
        model = real_nar()
        rng = np.random.default_rng(1)
        recs = [nar_decode(model, rng.integers(0, 10, size=8), path_len=5, mask_id=11) for _ in range(50)]
        mat = dynamics_matrix(recs)
        assert np.allclose(mat.U.sum(axis=0), 1.0)

    def test_hinted_records_rejected(self):
        rec = DecodeRecord(np.array([1, 2]), np.array([-1, 0]), 1)
        with pytest.raises(ValueError):
            dynamics_matrix([rec])

    def test_shape_mismatch_rejected(self):
        recs = [
            DecodeRecord(np.array([1, 2]), np.array([0, 1]), 2),
            DecodeRecord(np.array([1, 2, 3]), np.array([0, 1, 2]), 3),
        ]
        with pytest.raises(ValueError):
            dynamics_matrix(recs)

    def test_csv_schema(self, tmp_path):
        rec = DecodeRecord(np.array([1, 2]), np.array([1, 0]), 2)
        path = dynamics_matrix([rec]).to_csv(tmp_path / "dyn.csv")
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,position,fraction"
        assert len(lines) == 1 + 4


class TestSpearman:
    def test_anti_causal_is_minus_one(self):
        recs = [DecodeRecord(np.zeros(4), np.array([3, 2, 1, 0]), 4) for _ in range(10)]
        assert position_step_spearman(recs) == pytest.approx(-1.0)

    def test_causal_is_plus_one(self):
        recs = [DecodeRecord(np.zeros(4), np.array([0, 1, 2, 3]), 4) for _ in range(10)]
        assert position_step_spearman(recs) == pytest.approx(1.0)


class TestDecodeTestset:
    def test_shapes_and_consistency_with_eval(self):
        spec = StarSpec(d=2, l=3, pool_size=11)
        ts = build_testset(spec, size=32, seed=0)
        model = real_nar(vocab=12, max_len=spec.prefix_len + spec.l)
        preds, golds, records = decode_testset(model, ts, eval_size=16)
        assert preds.shape == golds.shape == (16, 3)
        assert len(records) == 16

    def test_ar_mode_records(self):
        spec = StarSpec(d=2, l=3, pool_size=11)
        ts = build_testset(spec, size=8, seed=0)
        cfg = BackboneConfig(vocab_size=12, max_len=spec.prefix_len + spec.l, d_model=16,
                             n_blocks=1, n_heads=2, dropout=0.0, mode="ar")
        model = init_backbone(cfg, 0)
        preds, golds, records = decode_testset(model, ts)
        assert all(r.unmask_step.tolist() == [0, 1, 2] for r in records)
