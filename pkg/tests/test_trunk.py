"""Trunk, vectorizer and task-head oracles, including the hand-stepped
per-layer block computation."""

import numpy as np
import pytest
from scipy.special import erf

from crossmodal import tensor as T
from crossmodal.data import Modality, generate_dataset, SyntheticDatasetSpec
from crossmodal.errors import ConfigError, ContractError, DimensionError
from crossmodal.model import ModelConfig, Network
from crossmodal.tensor import Tensor
from crossmodal.trunk import (HeadConfig, SummarizerHead, Trunk, TrunkConfig,
                              Vectorizer, build_head, head_forward, task_loss)

from conftest import fd_gradcheck


def np_layer_norm(x, gain, bias, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def np_block(block, x):
    """Independent numpy re-implementation of the pinned block ordering."""
    def lin(l, v):
        return v @ l.weight.data + (l.bias.data if l.bias is not None else 0.0)

    h = block.attn.heads
    n, w = x.shape
    dh = w // h
    xn = np_layer_norm(x, block.ln1.gain.data, block.ln1.bias.data)
    q = lin(block.attn.wq, xn).reshape(n, h, dh).transpose(1, 0, 2)
    k = lin(block.attn.wk, xn).reshape(n, h, dh).transpose(1, 0, 2)
    v = lin(block.attn.wv, xn).reshape(n, h, dh).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    att = (e / e.sum(axis=-1, keepdims=True)) @ v
    merged = att.transpose(1, 0, 2).reshape(n, w)
    a = x + lin(block.attn.wo, merged)
    an = np_layer_norm(a, block.ln2.gain.data, block.ln2.bias.data)
    return a + lin(block.fc2, np_gelu(lin(block.fc1, an)))


class TestTrunkForward:
    def test_length_preserved(self, rng):
        trunk = Trunk(rng, TrunkConfig(layers=2, width=32, heads=4))
        out = trunk(Tensor(rng.standard_normal((9, 32))))
        assert out.shape == (9, 32)

    def test_zero_layer_identity(self, rng):
        trunk = Trunk(rng, TrunkConfig(layers=0, width=16, heads=2))
        x = rng.standard_normal((4, 16))
        assert np.array_equal(trunk(Tensor(x)).data, x)

    def test_width_mismatch(self, rng):
        trunk = Trunk(rng, TrunkConfig(layers=1, width=16, heads=2))
        with pytest.raises(DimensionError):
            trunk(Tensor(rng.standard_normal((4, 8))))

    def test_single_token_matches_hand_stepped_oracle(self):
        # with one token, attention reduces to the v-projection path
        trunk = Trunk(np.random.default_rng(7), TrunkConfig(layers=3, width=8,
                                                            heads=2, mlp_ratio=2))
        x = np.random.default_rng(8).uniform(-1, 1, (1, 8))
        want = x.copy()
        for block in trunk.stack.blocks:
            want = np_block(block, want)
        got = trunk(Tensor(x)).data
        assert np.max(np.abs(got - want)) < 1e-10

    def test_multi_token_matches_hand_stepped_oracle(self):
        trunk = Trunk(np.random.default_rng(9), TrunkConfig(layers=2, width=8,
                                                            heads=2, mlp_ratio=2))
        x = np.random.default_rng(10).uniform(-1, 1, (5, 8))
        want = x.copy()
        for block in trunk.stack.blocks:
            want = np_block(block, want)
        assert np.max(np.abs(trunk(Tensor(x)).data - want)) < 1e-10


class TestVectorizer:
    def test_zero_weights_zero_embedding(self, rng):
        cfg = TrunkConfig(width=8, heads=2, embed_dim=6, max_tokens=5)
        vec = Vectorizer(rng, cfg)
        vec.lin.weight.data[:] = 0.0
        vec.lin.bias.data[:] = 0.0
        out = vec(Tensor(rng.standard_normal((3, 8))), Modality.IMAGE)
        assert np.array_equal(out.vector.data, np.zeros(6))

    def test_uniform_dimension_across_modalities(self):
        net = Network(ModelConfig(embed_dim=32), seed=0)
        for m in (Modality.IMAGE, Modality.TEXT):
            rule = "token_bias" if m is Modality.TEXT else "class_pattern"
            s = generate_dataset(SyntheticDatasetSpec(m, "classification", 1,
                                                      rule=rule, seed=2))[0]
            assert net.embed_sample(s).vector.shape == (32,)

    def test_token_count_above_max_rejected(self, rng):
        cfg = TrunkConfig(width=8, heads=2, embed_dim=4, max_tokens=4)
        vec = Vectorizer(rng, cfg)
        with pytest.raises(ContractError):
            vec(Tensor(rng.standard_normal((5, 8))), Modality.IMAGE)

    def test_gradient_reaches_trunk_inputs(self, rng):
        cfg = TrunkConfig(width=8, heads=2, embed_dim=4, max_tokens=6)
        vec = Vectorizer(np.random.default_rng(3), cfg)
        x = T.parameter(rng.uniform(-1, 1, (4, 8)))
        fd_gradcheck(lambda: T.sum_all(T.mul(vec(x, Modality.IMAGE).vector,
                                             vec(x, Modality.IMAGE).vector)), [x])


class TestHeads:
    def cfgs(self):
        trunk_cfg = TrunkConfig(width=16, heads=2, embed_dim=8, max_tokens=6)
        return trunk_cfg, np.random.default_rng(0)

    def test_classification_logit_length(self):
        trunk_cfg, rng = self.cfgs()
        hc = HeadConfig(kind="classification", task="c", modalities=(Modality.IMAGE,),
                        classes=3)
        head = build_head(rng, hc, trunk_cfg)
        trunk_out = Tensor(rng.standard_normal((5, 16)))
        emb = Vectorizer(rng, trunk_cfg)(trunk_out, Modality.IMAGE)
        logits = head_forward(head, trunk_out, emb, Modality.IMAGE)
        assert logits.shape == (3,)

    def test_dense_head_excludes_meta_token(self):
        trunk_cfg, rng = self.cfgs()
        hc = HeadConfig(kind="dense", task="d", modalities=(Modality.IMAGE,),
                        out_dim=2)
        head = build_head(rng, hc, trunk_cfg)
        out = head_forward(head, Tensor(rng.standard_normal((5, 16))), None,
                           Modality.IMAGE)
        assert out.shape == (4, 2)   # N = 4 patches, meta row dropped

    def test_head_modality_incompatibility_is_config_error(self):
        trunk_cfg, rng = self.cfgs()
        hc = HeadConfig(kind="classification", task="c", modalities=(Modality.IMAGE,),
                        classes=2)
        head = build_head(rng, hc, trunk_cfg)
        with pytest.raises(ConfigError):
            head_forward(head, Tensor(rng.standard_normal((5, 16))), None,
                         Modality.AUDIO)

    def test_summarizer_emits_token_logits(self):
        trunk_cfg, rng = self.cfgs()
        hc = HeadConfig(kind="summarizer", task="s", modalities=(Modality.TEXT,),
                        summary_len=3, vocab=10)
        head = build_head(rng, hc, trunk_cfg)
        memory = Tensor(rng.standard_normal((7, 16)))
        logits = head_forward(head, memory, None, Modality.TEXT,
                              target_ids=np.array([1, 2, 3]))
        assert logits.shape == (3, 10)
        decoded = head.greedy_decode(memory, None)
        assert decoded.shape == (3,) and decoded.dtype == np.int64

    def test_greedy_decode_is_causally_consistent(self):
        # the logits the decode loop saw at step t must match a teacher-forced
        # run on its own output (greedy = argmax at each prefix)
        trunk_cfg, rng = self.cfgs()
        hc = HeadConfig(kind="summarizer", task="s", modalities=(Modality.TEXT,),
                        summary_len=4, vocab=8)
        head = build_head(rng, hc, trunk_cfg)
        memory = Tensor(rng.standard_normal((5, 16)))
        decoded = head.greedy_decode(memory, None)
        forced = head(memory, None, target_ids=decoded)
        assert np.array_equal(np.argmax(forced.data, axis=1), decoded)


class TestTaskLoss:
    def test_perfect_one_hot_near_zero(self):
        logits = Tensor(np.array([40.0, 0.0, 0.0]))
        assert task_loss("classification", logits, 0).item() <= 1e-6

    def test_dense_exact_match_zero(self, rng):
        pred = Tensor(rng.standard_normal((4, 2)))
        assert task_loss("dense", pred, pred.data.copy()).item() == 0.0

    def test_uniform_logits_log_c(self):
        for c in (2, 5, 9):
            logits = Tensor(np.zeros(c))
            loss = task_loss("classification", logits, 0).item()
            assert abs(loss - np.log(c)) < 1e-12

    def test_random_case_matches_independent_formula(self, rng):
        logits = rng.uniform(-2, 2, (6, 5))
        targets = rng.integers(5, size=6)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        want = float(np.mean([-np.log(p[i, targets[i]]) for i in range(6)]))
        got = task_loss("summarizer", Tensor(logits), targets).item()
        assert abs(got - want) < 1e-10

        pred = rng.standard_normal((4, 3))
        label = rng.standard_normal((4, 3))
        want_mse = float(np.mean((pred - label) ** 2))
        got_mse = task_loss("dense", Tensor(pred), label).item()
        assert abs(got_mse - want_mse) < 1e-10

    def test_shape_mismatch_contract_error(self, rng):
        with pytest.raises(ContractError):
            task_loss("dense", Tensor(rng.standard_normal((4, 2))),
                      rng.standard_normal((3, 2)))
        with pytest.raises(ContractError):
            task_loss("summarizer", Tensor(rng.standard_normal((4, 8))),
                      np.array([1, 2]))


class TestEndToEnd:
    def test_gradient_reaches_every_component(self):
        net = Network(ModelConfig(enc_layers=1, trunk_layers=1, dec_layers=1),
                      head_cfgs=(HeadConfig(kind="classification", task="t",
                                            modalities=(Modality.IMAGE,), classes=2),),
                      seed=0)
        s = generate_dataset(SyntheticDatasetSpec(Modality.IMAGE, "classification",
                                                  1, rule="class_pattern", seed=4))[0]
        trunk_out = net.trunk_tokens(s)
        emb = net.vectorizer(trunk_out, s.modality)
        logits = head_forward(net.heads["t"], trunk_out, emb, s.modality)
        loss = task_loss("classification", logits, s.label)
        net.zero_grad()
        T.backward(loss, net.parameters())
        norms = {comp: sum(float(np.abs(p.grad).sum()) for p in named.values())
                 for comp, named in net.component_params().items()}
        for comp in ("encoder.image", "projection", "trunk", "vectorizer", "head.t"):
            assert norms[comp] > 0.0, f"no gradient reached {comp}"
        assert norms["encoder.text"] == 0.0   # untouched modality stays zero
