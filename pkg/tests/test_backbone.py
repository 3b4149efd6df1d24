import math

import numpy as np
import pytest

from pmol import numcore as nc
from pmol.adapter import ConfigError, stack_experts
from pmol.backbone import (BackboneConfig, DataError, batch_log_probs, forward_batch, forward_logits, init_backbone,
                           pack_sequences, pretrain_backbone, sequence_log_prob)
from pmol.numcore import Rng

from conftest import TINY


class ListLogger:
    def __init__(self):
        self.losses = []

    def info(self, fmt, step, loss):
        self.losses.append(loss)


def softmax_np(z):
    e = np.exp(z - z.max())
    return e / e.sum()


class TestConfig:
    def test_head_dim(self):
        cfg = BackboneConfig(vocab_size=10, d_model=8, n_layers=1, n_heads=2, d_ff=8, max_seq_len=4)
        assert cfg.head_dim == 4
        p = init_backbone(cfg, Rng(0))
        assert p["layers.0.attn.wq"].shape == (8, 8)

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            BackboneConfig(d_model=7, n_heads=2).validate()
        with pytest.raises(ConfigError):
            init_backbone(BackboneConfig(d_model=7, n_heads=2), Rng(0))

    def test_nonpositive(self):
        with pytest.raises(ConfigError):
            BackboneConfig(n_layers=0).validate()

    def test_same_seed_identical(self):
        a, b = init_backbone(TINY, Rng(3)), init_backbone(TINY, Rng(3))
        assert a.tensors.keys() == b.tensors.keys()
        assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)


class TestForward:
    def test_single_token_shape(self, tiny_backbone):
        assert forward_logits(tiny_backbone, None, [5]).shape == (1, TINY.vocab_size)

    def test_zero_adapters_identity(self, tiny_model):
        tokens = Rng(0).integers(0, 64, size=(3, 9))
        with nc.no_grad():
            base, _ = forward_batch(tiny_model.backbone, None, tokens)
            with_ad, router = forward_batch(tiny_model.backbone, tiny_model.adapters, tokens)
        assert np.abs(base.data - with_ad.data).max() < 1e-12
        assert len(router) == TINY.n_layers and router[0].shape == (3, 9, 7)

    def test_sequential_path_same(self, tiny_model):
        for layer in tiny_model.adapters:
            for e in layer.experts:
                e.B.assign(Rng(1).normal(e.B.shape, std=0.3))
            stack_experts(layer)
        tokens = Rng(2).integers(0, 64, size=(2, 7))
        with nc.no_grad():
            a, _ = forward_batch(tiny_model.backbone, tiny_model.adapters, tokens, path="parallel")
            b, _ = forward_batch(tiny_model.backbone, tiny_model.adapters, tokens, path="sequential")
        assert np.abs(a.data - b.data).max() < 1e-10

    def test_incremental_agrees(self, tiny_backbone):
        tokens = Rng(4).integers(0, 64, size=12)
        with nc.no_grad():
            full = forward_logits(tiny_backbone, None, tokens).data
            for t in range(len(tokens)):
                step = forward_logits(tiny_backbone, None, tokens[:t + 1]).data[-1]
                assert np.abs(full[t] - step).max() < 1e-10

    def test_padding_does_not_leak(self, tiny_backbone):
        short = [3, 9, 4]
        with nc.no_grad():
            alone = forward_logits(tiny_backbone, None, short).data
            padded, _ = forward_batch(tiny_backbone, None, np.array([short + [0, 0], [1, 2, 3, 4, 5]]))
        assert np.abs(padded.data[0, :3] - alone).max() < 1e-12

    @pytest.mark.parametrize("tokens", [[], [64], [-1], list(range(40))])
    def test_bad_tokens(self, tiny_backbone, tokens):
        with pytest.raises(DataError):
            forward_logits(tiny_backbone, None, tokens)


class TestLogProb:
    def test_deterministic_emitter(self, tiny_backbone):
        p = tiny_backbone.copy()
        p["lm_head.w"].assign(np.zeros_like(p["lm_head.w"].data))
        b = np.zeros(64)
        b[7] = 1000.0
        p["lm_head.b"].assign(b)
        with nc.no_grad():
            assert sequence_log_prob(p, None, [1, 2], [7, 7, 7]).item() == 0.0

    def test_uniform_model(self, tiny_backbone):
        p = tiny_backbone.copy()
        p["lm_head.w"].assign(np.zeros_like(p["lm_head.w"].data))
        with nc.no_grad():
            v = sequence_log_prob(p, None, [1, 2, 3], [4, 5, 6, 7]).item()
        assert v == pytest.approx(4 * math.log(1 / 64), abs=1e-12)

    def test_chain_rule_oracle(self, tiny_backbone):
        prompt, response = [5, 1, 8], [2, 60, 33, 4]
        seq = prompt + response
        with nc.no_grad():
            v = sequence_log_prob(tiny_backbone, None, prompt, response).item()
            prob = 1.0
            for t in range(len(prompt), len(seq)):
                z = forward_logits(tiny_backbone, None, seq[:t]).data[-1]
                prob *= softmax_np(z)[seq[t]]
        assert v == pytest.approx(math.log(prob), abs=1e-10)

    def test_batch_matches_single(self, tiny_backbone):
        prompts, responses = [[1, 2], [3, 4, 5, 6]], [[7, 8, 9], [10]]
        with nc.no_grad():
            logp, _, _, _ = batch_log_probs(tiny_backbone, None, prompts, responses)
            singles = [sequence_log_prob(tiny_backbone, None, p, r).item() for p, r in zip(prompts, responses)]
        np.testing.assert_allclose(logp.data, singles, atol=1e-12)

    def test_empty_response(self, tiny_backbone):
        with pytest.raises(DataError):
            sequence_log_prob(tiny_backbone, None, [1], [])

    def test_pack_mask(self):
        tokens, mask = pack_sequences([[1, 2], [3]], [[4], [5, 6, 7]])
        np.testing.assert_array_equal(tokens, [[1, 2, 4, 0], [3, 5, 6, 7]])
        np.testing.assert_array_equal(mask, [[0, 1, 0], [1, 1, 1]])


class TestPretrain:
    def test_two_symbol_corpus(self):
        cfg = BackboneConfig(vocab_size=64, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=16)
        corpus = [[10, 11] * 8 for _ in range(8)]
        log = ListLogger()
        trained = pretrain_backbone(init_backbone(cfg, Rng(0)), corpus, steps=200, lr=1e-2, batch_size=4,
                                    log_every=10, logger=log)
        assert all(math.isfinite(v) for v in log.losses)
        # the corpus is deterministic after its first token, so its entropy rate is 0 nats
        assert log.losses[-1] < math.log(64)
        assert log.losses[-1] < 0.1
        assert trained.frozen

    def test_zero_steps_unchanged(self, tiny_backbone):
        out = pretrain_backbone(tiny_backbone, [[1, 2, 3]], steps=0)
        assert all(np.array_equal(out[k].data, tiny_backbone[k].data) for k in out.tensors)

    def test_input_not_mutated(self, tiny_backbone):
        before = {k: v.data.copy() for k, v in tiny_backbone.tensors.items()}
        pretrain_backbone(tiny_backbone, [[1, 2, 3, 4]], steps=3)
        assert all(np.array_equal(before[k], tiny_backbone[k].data) for k in before)

    def test_empty_corpus(self, tiny_backbone):
        with pytest.raises(DataError):
            pretrain_backbone(tiny_backbone, [], steps=5)
