import dataclasses

import numpy as np
import pytest

from mtner import tensor as T
from mtner.corpus import linearize_targets
from mtner.layers import banked_attention, scaled_dot_attention, split_heads
from mtner.model import ConfigError, ModelConfig, MultiTaskNER, read_checkpoint
from mtner.relgrid import N_RELATIONS


def np_layer_norm(x, eps):
    mu = x.mean(-1, keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True))
    return (x - mu) / (sigma + eps)


def np_attention(q, k, v, extra_scores=None):
    s = q @ k.T / np.sqrt(q.shape[-1])
    if extra_scores is not None:
        s = s + extra_scores
    w = np.exp(s - s.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    return w @ v


class TestConfig:
    def test_tra_requires_rp(self):
        with pytest.raises(ConfigError, match="use_rp"):
            ModelConfig(vocab_size=10, n_types=2, use_rp=False, use_tra=True)

    def test_heads_divide_hidden(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=10, n_types=2, d_h=10, n_heads=3)

    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            ModelConfig(vocab_size=10, n_types=2, conv_kernel=2)

    def test_file_round_trip(self, tmp_path):
        cfg = ModelConfig(vocab_size=30, n_types=3, d_h=16, use_eta=False, eps_ln=1e-6)
        (tmp_path / "m.cfg").write_text(cfg.to_text())
        assert ModelConfig.from_file(tmp_path / "m.cfg") == cfg

    def test_ablation_names(self):
        names = [ModelConfig(vocab_size=5, n_types=1, use_rp=rp, use_tra=tra, use_eta=eta).ablation_name
                 for rp, tra, eta in [(0, 0, 0), (1, 1, 0), (1, 0, 1), (1, 1, 1)]]
        assert names == ["Baseline", "+RP&TRA", "+RP&ETA", "+RP&TRA&ETA"]


class TestCLN:
    def test_reduces_to_layer_norm(self, toy, rng):
        m = toy.model()
        d = m.cfg.d_h
        m.cln.w_alpha.data[:] = 0
        m.cln.b_alpha.data[:] = 1
        m.cln.w_beta.data[:] = 0
        m.cln.b_beta.data[:] = 0
        h = rng.normal(size=(5, d))
        grid = m.cln.grid(T.Tensor(h)).data
        expected = np_layer_norm(h, m.cfg.eps_ln)
        for i in range(5):
            assert np.abs(grid[i] - expected).max() <= 1e-10
            pair = m.cln.pair(T.Tensor(h[i]), T.Tensor(h[3])).data
            assert np.abs(pair - expected[3]).max() <= 1e-10

    def test_two_dim_example(self, rng):
        from mtner.model import ConditionalLayerNorm

        cln = ConditionalLayerNorm(2, rng, eps=1e-5)
        cln.w_alpha.data[:] = 0
        cln.b_alpha.data[:] = [1, 1]
        cln.w_beta.data[:] = 0
        cln.b_beta.data[:] = 0
        out = cln.pair(T.Tensor([0.3, 0.7]), T.Tensor([1.0, -1.0])).data
        np.testing.assert_allclose(out, np.array([1.0, -1.0]) / (1 + 1e-5), atol=1e-15)

    def test_constant_hj_gives_bias(self, toy, rng):
        m = toy.model()
        d = m.cfg.d_h
        h_i = T.Tensor(rng.normal(size=d))
        out = m.cln.pair(h_i, T.Tensor(np.full(d, 2.5))).data
        lam = h_i.data @ m.cln.w_beta.data + m.cln.b_beta.data
        np.testing.assert_array_equal(out, lam)

    def test_grid_matches_pairs(self, toy, rng):
        m = toy.model()
        h = rng.normal(size=(4, m.cfg.d_h))
        grid = m.cln.grid(T.Tensor(h)).data
        for i in range(4):
            for j in range(4):
                np.testing.assert_allclose(grid[i, j], m.cln.pair(T.Tensor(h[i]), T.Tensor(h[j])).data,
                                           atol=1e-12)


class TestRelationHead:
    def test_zero_weights_uniform(self, toy, rng):
        m = toy.model()
        for p in m.rel_head.parameters():
            p.data[:] = 0
        logits = m.rel_head(T.Tensor(rng.normal(size=(3, 3, m.cfg.d_rel))))
        assert not logits.data.any()
        np.testing.assert_allclose(T.softmax(logits).data, 1 / 3)

    def test_shape(self, toy):
        m = toy.model()
        enc = m.encode([2, 3])
        assert m.relation_logits(enc).shape == (2, 2, N_RELATIONS)

    def test_softmax_sums(self, toy):
        m = toy.model()
        p = T.softmax(m.relation_logits(m.encode([2, 3, 4, 5])), axis=-1).data
        assert np.abs(p.sum(-1) - 1).max() <= 1e-12


class TestRelationFeatures:
    def test_single_token(self, toy):
        m = toy.model(n_layers_dec=2)
        bank = m.rel_attn(m.encode([4]).relations)
        assert len(bank) == 2
        for k, v in bank:
            assert k.shape == v.shape == (1, m.cfg.d_h)

    def test_zero_grid(self, toy):
        m = toy.model()
        for k, v in m.rel_attn(T.Tensor(np.zeros((3, 3, m.cfg.d_rel)))):
            assert not k.data.any() and not v.data.any()

    def test_row_permutation_invariance(self, toy, rng):
        m = toy.model(conv_kernel=1)
        r = rng.normal(size=(5, 5, m.cfg.d_rel))
        perm = rng.permutation(5)
        a = m.rel_attn.pooled(T.Tensor(r)).data
        b = m.rel_attn.pooled(T.Tensor(r[perm])).data
        np.testing.assert_array_equal(a, b)


class TestBankedAttention:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.n, self.t, self.d = 4, 2, 6
        self.q = rng.normal(size=(3, self.d))
        self.k = rng.normal(size=(self.n, self.d))
        self.v = rng.normal(size=(self.n, self.d))
        self.kt = rng.normal(size=(self.t, self.d))
        self.vt = rng.normal(size=(self.t, self.d))

    def test_masked_bank_is_plain(self):
        q, k, v = T.Tensor(self.q), T.Tensor(self.k), T.Tensor(self.v)
        out = banked_attention(q, k, v, [(T.Tensor(self.kt), T.Tensor(self.vt))], mask_banks=True)
        np.testing.assert_allclose(out.data, np_attention(self.q, self.k, self.v), atol=1e-12)

    def test_empty_bank_is_plain(self):
        q, k, v = T.Tensor(self.q), T.Tensor(self.k), T.Tensor(self.v)
        empty = (T.Tensor(np.zeros((0, self.d))), T.Tensor(np.zeros((0, self.d))))
        out = banked_attention(q, k, v, [empty, None])
        np.testing.assert_allclose(out.data, np_attention(self.q, self.k, self.v), atol=1e-12)

    def test_type_slots_sum_to_one(self):
        q, k, v = T.Tensor(self.q), T.Tensor(self.k), T.Tensor(self.v)
        _, w = banked_attention(q, k, v, [(T.Tensor(self.kt), T.Tensor(self.vt))], return_weights=True)
        assert w.shape == (3, self.t + self.n)
        assert np.abs(w.data.sum(-1) - 1).max() <= 1e-12

    def test_matches_concatenated_oracle(self):
        q, k, v = T.Tensor(self.q), T.Tensor(self.k), T.Tensor(self.v)
        out = banked_attention(q, k, v, [(T.Tensor(self.kt), T.Tensor(self.vt))])
        expected = np_attention(self.q, np.vstack([self.kt, self.k]), np.vstack([self.vt, self.v]))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_cross_slot_count_all_flags(self):
        q, k, v = T.Tensor(self.q), T.Tensor(self.k), T.Tensor(self.v)
        relation = (T.Tensor(self.k * 0.5), T.Tensor(self.v * 0.5))
        _, w = banked_attention(q, k, v, [relation, (T.Tensor(self.kt), T.Tensor(self.vt))],
                                return_weights=True)
        assert w.shape[-1] == 2 * self.n + self.t == 10

    def test_duplicate_keys_oracle(self):
        q, k, v = T.Tensor(self.q), T.Tensor(self.k), T.Tensor(self.v)
        out = banked_attention(q, k, v, [(k, v)])
        # two literal copies of every key; equivalently each key's weight gets +ln 2
        two_copy = np_attention(self.q, np.vstack([self.k, self.k]), np.vstack([self.v, self.v]))
        np.testing.assert_allclose(out.data, two_copy, atol=1e-12)
        np.testing.assert_allclose(out.data, np_attention(self.q, self.k, self.v), atol=1e-12)

    def test_slot_mismatch(self):
        q, k, v = T.Tensor(self.q), T.Tensor(self.k), T.Tensor(self.v)
        with pytest.raises(T.ShapeError):
            banked_attention(q, k, v, [(T.Tensor(self.kt), T.Tensor(self.v))])

    def test_head_split_oracle(self):
        rng = np.random.default_rng(3)
        q, k, v = (rng.normal(size=(5, 8)) for _ in range(3))
        out = scaled_dot_attention(split_heads(T.Tensor(q), 2), split_heads(T.Tensor(k), 2),
                                   split_heads(T.Tensor(v), 2)).data
        for h in range(2):
            sl = slice(4 * h, 4 * h + 4)
            np.testing.assert_allclose(out[h], np_attention(q[:, sl], k[:, sl], v[:, sl]), atol=1e-12)


class TestEncode:
    def test_single_token_shapes(self, toy):
        m = toy.model()
        enc = m.encode([5])
        assert enc.hidden.shape == (1, m.cfg.d_h)
        assert enc.relations.shape == (1, 1, m.cfg.d_rel)

    def test_deterministic(self, toy):
        ids = toy.ids(toy.corpus[0])
        a = toy.model(seed=3).encode(ids).hidden.data
        b = toy.model(seed=3).encode(ids).hidden.data
        np.testing.assert_array_equal(a, b)

    def test_type_attention_changes_hidden(self, toy):
        ids = toy.ids(toy.corpus[0])
        full = toy.model(seed=3)
        no_eta = MultiTaskNER(dataclasses.replace(full.cfg, use_eta=False), toy.weights, seed=3)
        no_eta.load_state_dict({k: v for k, v in full.state_dict().items()
                                if not k.startswith("type_proj")})
        assert not np.allclose(full.encode(ids).hidden.data, no_eta.encode(ids).hidden.data)

    def test_empty_input(self, toy):
        with pytest.raises(ValueError):
            toy.model().encode([])

    def test_out_of_vocab(self, toy):
        with pytest.raises(IndexError):
            toy.model().encode([len(toy.vocab)])

    def test_shared_embedding_table(self, toy):
        m = toy.model()
        before = m.type_embeddings().data.copy()
        m.embed.data = m.embed.data * 2
        np.testing.assert_allclose(m.type_embeddings().data, 2 * before)
        m.type_embeddings().sum().backward()
        assert m.embed.grad is not None and np.abs(m.embed.grad).sum() > 0


class TestDecode:
    def test_distribution(self, toy):
        m = toy.model()
        enc = m.encode([2, 3, 4])
        p = m.decode_step(enc, m.relation_bank(enc), [])
        assert p.shape == (3 + m.cfg.n_types + 1,)
        assert abs(p.data.sum() - 1) <= 1e-12

    def test_length_n_plus_t_plus_one(self, toy):
        cfg = dataclasses.replace(toy.config(), n_types=2)
        m = MultiTaskNER(cfg, toy.weights[:2], seed=0)
        enc = m.encode([2, 3, 4])
        assert m.decode_step(enc, m.relation_bank(enc), [0, 3]).shape == (6,)

    def test_out_of_range_prefix(self, toy):
        m = toy.model()
        enc = m.encode([2, 3])
        with pytest.raises(IndexError):
            m.decode_step(enc, m.relation_bank(enc), [2 + m.cfg.n_types + 1])

    def test_teacher_forced_lengths(self, toy):
        m = toy.model()
        s = toy.corpus[1]
        gold = linearize_targets(s, m.cfg.n_types)
        probs, rel = m.forward_teacher_forced(toy.ids(s), gold)
        assert probs.shape == (len(gold), len(s) + m.cfg.n_types + 1)
        assert rel.shape == (len(s), len(s), N_RELATIONS)
        probs, _ = m.forward_teacher_forced(toy.ids(s), [len(s) + m.cfg.n_types])
        assert probs.shape[0] == 1

    @pytest.mark.parametrize("flags", [(0, 0, 0), (1, 1, 0), (1, 0, 1), (1, 1, 1)])
    def test_batched_equals_incremental(self, toy, flags):
        rp, tra, eta = map(bool, flags)
        m = toy.model(use_rp=rp, use_tra=tra, use_eta=eta, n_layers_enc=2, n_layers_dec=2)
        s = next(s for s in toy.corpus if len(s.mentions) >= 2)
        gold = linearize_targets(s, m.cfg.n_types)
        probs, _ = m.forward_teacher_forced(toy.ids(s), gold)
        enc = m.encode(toy.ids(s))
        bank = m.relation_bank(enc)
        for t in range(len(gold)):
            step = m.decode_step(enc, bank, gold[:t]).data
            assert np.abs(step - probs.data[t]).max() <= 1e-10

    def test_causality(self, toy):
        m = toy.model()
        s = next(s for s in toy.corpus if len(s.mentions) >= 2)
        gold = linearize_targets(s, m.cfg.n_types)
        base, _ = m.forward_teacher_forced(toy.ids(s), gold)
        for t in range(len(gold) - 1):
            changed = list(gold)
            changed[t] = (changed[t] + 1) % len(s)
            probs, _ = m.forward_teacher_forced(toy.ids(s), changed)
            np.testing.assert_array_equal(probs.data[:t + 1], base.data[:t + 1])
            assert not np.array_equal(probs.data[t + 1], base.data[t + 1])


class TestGreedy:
    def test_forced_eos(self, toy):
        m = toy.model()
        last = m.decoder[-1].ln3
        last.gain.data[:] = 0
        last.bias.data[:] = 1
        m.eos.data = np.full(m.cfg.d_h, 1e3)
        for s in toy.corpus[:3]:
            assert m.greedy_generate(toy.ids(s)) == [len(s) + m.cfg.n_types]

    def test_max_len(self, toy):
        m = toy.model(seed=5)
        for s in toy.corpus[:5]:
            for max_len in (1, 2, 7):
                assert len(m.greedy_generate(toy.ids(s), max_len)) <= max_len

    def test_default_cap(self, toy):
        m = toy.model(seed=5)
        m.eos.data = np.full(m.cfg.d_h, -1e3)
        m.decoder[-1].ln3.gain.data[:] = 0
        m.decoder[-1].ln3.bias.data[:] = 1
        s = toy.corpus[0]
        assert len(m.greedy_generate(toy.ids(s))) == 3 * len(s) + 2

    def test_bad_max_len(self, toy):
        with pytest.raises(ValueError):
            toy.model().greedy_generate([2, 3], 0)


class TestBaselineReduction:
    def test_no_extra_components(self, toy):
        m = toy.model(use_rp=False, use_tra=False, use_eta=False)
        names = [n for n, _ in m.named_parameters()]
        assert not any(n.startswith(("cln", "rel_", "type_proj")) for n in names)
        enc = m.encode([2, 3, 4])
        assert enc.relations is None and enc.type_kv is None
        assert m.relation_bank(enc) is None
        assert m.relation_logits(enc) is None

    def test_attention_slot_counts(self, toy):
        m = toy.model(use_rp=False, use_tra=False, use_eta=False)
        x = T.Tensor(np.random.default_rng(0).normal(size=(4, m.cfg.d_h)))
        _, w = m.encoder[0].attn(x, x, banks=[None], return_weights=True)
        assert w.shape[-1] == 4
        y = x[:2]
        _, w = m.decoder[0].cross_attn(y, x, banks=[None, None], return_weights=True)
        assert w.shape[-1] == 4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_masked_full_equals_baseline(self, toy, seed):
        full = toy.model(seed=seed, n_layers_enc=2, n_layers_dec=2)
        full.mask_banks = True
        base = MultiTaskNER(dataclasses.replace(full.cfg, use_rp=False, use_tra=False, use_eta=False),
                            toy.weights, seed=99)
        shared = {k: v for k, v in full.state_dict().items()
                  if not k.startswith(("cln", "rel_", "type_proj"))}
        base.load_state_dict(shared)
        for s in toy.corpus[:5]:
            gold = linearize_targets(s, full.cfg.n_types)
            a, _ = full.forward_teacher_forced(toy.ids(s), gold)
            b, _ = base.forward_teacher_forced(toy.ids(s), gold)
            assert np.abs(a.data - b.data).max() <= 1e-6


class TestCheckpoint:
    def test_round_trip(self, toy, tmp_path):
        m = toy.model(seed=1)
        m.save(tmp_path / "m.ckpt")
        text = (tmp_path / "m.ckpt").read_text()
        assert text.startswith("mtner-checkpoint v1\nparam: ")
        other = toy.model(seed=2)
        other.load(tmp_path / "m.ckpt")
        for (n1, p1), (n2, p2) in zip(m.named_parameters(), other.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_bad_header(self, tmp_path):
        (tmp_path / "x").write_text("nope\n")
        with pytest.raises(ValueError, match="header"):
            read_checkpoint(tmp_path / "x")

    def test_shape_mismatch(self, toy, tmp_path):
        toy.model(d_h=8).save(tmp_path / "m.ckpt")
        with pytest.raises(ValueError):
            toy.model(d_h=16).load(tmp_path / "m.ckpt")
