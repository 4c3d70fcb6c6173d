import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from op2vec.corpus import Vocabulary, build_vocabulary, corpus_pairs, one_hot
from op2vec.dex.opcodes import opcode_of
from op2vec.dex.parser import OpcodeSequence
from op2vec.embedding import (
    EmbeddingModel,
    EmbeddingTable,
    TrainConfig,
    TrainTrace,
    cosine_similarity,
    decode_table,
    embeddings,
    encode_table,
    forward,
    gradients,
    init_model,
    load_table_text,
    nearest,
    pair_loss,
    read_trace,
    save_table_text,
    train,
    train_model,
    train_step,
    within_between_similarity,
    write_trace,
)
from op2vec.errors import BadFileMagic, EmptyCorpus, NonFiniteLoss, TruncatedFile, UnknownOpcode, ZeroVector
from synth import GROUP_A, GROUP_B, planted_corpus

# Learned vectors reported for a 2-D run (conditional-branch opcodes).
REPORTED = {
    "if-ne": (-0.2729177368, -0.0875072266),
    "if-lt": (-0.3726633597, -0.017922292),
    "if-ge": (-0.6149268202, -0.0044448727),
    "if-gt": (-0.6818177649, -0.3873034379),
    "if-le": (-0.3076827262, 0.1643184456),
    "if-eqz": (-0.2591792741, 0.2236180313),
}


def random_model(V, D, seed):
    rng = np.random.default_rng(seed)
    return EmbeddingModel(rng.normal(size=(V, D)), rng.normal(size=(D, V)))


class TestInit:
    def test_deterministic(self):
        a, b = init_model(255, 2, 11), init_model(255, 2, 11)
        assert np.array_equal(a.W_in, b.W_in) and np.array_equal(a.W_out, b.W_out)

    def test_range(self):
        m = init_model(255, 2, 3)
        assert np.all(np.abs(m.W_in) <= 0.25)
        assert not np.any(m.W_out)
        assert m.W_in.shape == (255, 2) and m.W_out.shape == (2, 255)

    def test_seeds_differ(self):
        assert not np.array_equal(init_model(3, 2, 1).W_in, init_model(3, 2, 2).W_in)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            init_model(1, 2)


class TestForward:
    def test_uniform_when_out_zero(self):
        m = init_model(255, 2, 0)
        np.testing.assert_array_equal(forward(m, 17), np.full(255, 1 / 255))

    def test_hand_logits(self):
        m = EmbeddingModel(np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]),
                           np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
        # 30-digit evaluation of exp(k) / sum exp(k)
        expected = [0.0900305731703805, 0.244728471054798, 0.665240955774822]
        np.testing.assert_allclose(forward(m, 0), expected, rtol=1e-12)

    def test_large_logits_stable(self):
        m = EmbeddingModel(np.array([[1000.0], [0.0]]), np.array([[1.0, -1.0]]))
        p = forward(m, 0)
        assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.sampled_from([3, 255]))
    def test_normalised(self, seed, V):
        m = random_model(V, 2, seed)
        c = seed % V
        p = forward(m, c)
        assert abs(p.sum() - 1) < 1e-9 and np.all(p > 0)


class TestTrainStep:
    def test_initial_loss(self):
        m = init_model(255, 2, 5)
        assert abs(train_step(m, 3, 200, 0.025) - 5.541264) < 1e-5
        assert pair_loss(init_model(255, 2, 9), 0, 1) == pytest.approx(math.log(255), abs=1e-12)

    def test_loss_decreases(self):
        m = init_model(20, 2, 1)
        losses = [train_step(m, 4, 7, 0.1) for _ in range(50)]
        assert losses[-1] < losses[0]

    def test_update_matches_gradient(self):
        m = random_model(7, 3, 4)
        before_in, before_out = m.W_in.copy(), m.W_out.copy()
        loss, g_in, g_out = gradients(m, 2, 5)
        y = forward(m, 2)
        assert loss == pytest.approx(-math.log(y[5]))
        np.testing.assert_allclose(g_out, np.outer(m.W_in[2], y - one_hot(5, 7)))
        train_step(m, 2, 5, 0.01)
        np.testing.assert_allclose(m.W_out, before_out - 0.01 * g_out)
        np.testing.assert_allclose(m.W_in[2], before_in[2] - 0.01 * g_in)
        rows = [r for r in range(7) if r != 2]
        np.testing.assert_array_equal(m.W_in[rows], before_in[rows])

    @pytest.mark.parametrize("V,D,seed", [(7, 3, 0), (10, 4, 1), (3, 1, 2), (5, 2, 3)])
    def test_finite_differences(self, V, D, seed):
        m = random_model(V, D, seed)
        c, o = seed % V, (seed + 1) % V
        _, g_in, g_out = gradients(m, c, o)
        full_in = np.zeros_like(m.W_in)
        full_in[c] = g_in
        assert max_rel_error(m, c, o, full_in, g_out) < 1e-4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite(self):
        m = EmbeddingModel(np.array([[np.inf], [0.0]]), np.array([[1.0, -1.0]]))
        with pytest.raises(NonFiniteLoss):
            train_step(m, 0, 1, 0.1)


def max_rel_error(m, c, o, g_in, g_out, h=1e-5):
    worst = 0.0
    for W, G in ((m.W_in, g_in), (m.W_out, g_out)):
        for idx in np.ndindex(W.shape):
            old = W[idx]
            W[idx] = old + h
            lp = pair_loss(m, c, o)
            W[idx] = old - h
            lm = pair_loss(m, c, o)
            W[idx] = old
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - G[idx]) / max(abs(num), abs(G[idx]), 1e-7))
    return worst


@pytest.fixture(scope="module")
def planted():
    return [OpcodeSequence(f"f{i}", s) for i, s in enumerate(planted_corpus(5000, seed=1))]


class TestTrain:
    def test_loss_decreases(self, planted):
        vocab = build_vocabulary(planted)
        _, trace = train_model(planted, vocab, TrainConfig(seed=4))
        assert len(trace.epoch_loss) == 5
        assert trace.epoch_loss[-1] < trace.epoch_loss[0]

    def test_deterministic(self, planted):
        vocab = build_vocabulary(planted)
        a, _ = train_model(planted, vocab, TrainConfig(seed=9, epochs=2))
        b, _ = train_model(planted, vocab, TrainConfig(seed=9, epochs=2))
        assert a.W_in.tobytes() == b.W_in.tobytes() and a.W_out.tobytes() == b.W_out.tobytes()

    def test_compiled_matches_reference(self, planted):
        vocab = build_vocabulary(planted[:3], "observed")
        c, o = corpus_pairs(planted[:3], vocab, 3)
        cfg = TrainConfig(seed=2, epochs=2, window=3)
        a, ta = train(c, o, cfg, vocab.V)
        b, tb = train(c, o, cfg, vocab.V, use_jit=False)
        np.testing.assert_allclose(a.W_in, b.W_in, rtol=0, atol=1e-12)
        np.testing.assert_allclose(ta.epoch_loss, tb.epoch_loss, rtol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            train(np.array([], dtype=int), np.array([], dtype=int), TrainConfig(), 255)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    @pytest.mark.parametrize("use_jit", [True, False])
    def test_divergence(self, use_jit):
        c = np.array([0, 1] * 50)
        with pytest.raises(NonFiniteLoss):
            train(c, c[::-1].copy(), TrainConfig(lr0=1e200, epochs=3), 2, use_jit=use_jit)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr0=0)
        with pytest.raises(ValueError):
            TrainConfig(window=0)

    def test_clustering_small(self, planted):
        model, _ = train_model(planted, build_vocabulary(planted), TrainConfig(seed=1))
        table = embeddings(model, build_vocabulary(planted))
        within, cross = within_between_similarity(table, [GROUP_A, GROUP_B])
        assert within - cross >= 0.3


class TestTable:
    def test_extraction(self):
        m = init_model(255, 2, 0)
        m.W_in[7] = 0.0
        table = embeddings(m, build_vocabulary([]))
        assert table.V == 255 and table.D == 2
        np.testing.assert_array_equal(table[7], [0.0, 0.0])
        assert embeddings(m, build_vocabulary([])) == table

    def test_extraction_is_copy(self):
        m = init_model(3, 2, 0)
        table = embeddings(m, Vocabulary((0, 1, 2)))
        m.W_in[0] = 99
        assert table.vectors[0, 0] != 99

    def test_lookup_by_mnemonic(self):
        table = reported_table()
        np.testing.assert_array_equal(table["If-ne"], REPORTED["if-ne"])
        with pytest.raises(UnknownOpcode):
            table[0x90]


def reported_table() -> EmbeddingTable:
    ops = sorted(opcode_of(n) for n in REPORTED)
    return EmbeddingTable(tuple(ops), np.array([REPORTED[n] for n in
                                                sorted(REPORTED, key=opcode_of)]))


class TestSimilarity:
    def test_self(self):
        assert cosine_similarity([0.3, -2.0], [0.3, -2.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == 0.0

    def test_reported_pair(self):
        # direct arithmetic on the reported vectors, 30-digit precision
        assert cosine_similarity(REPORTED["if-lt"], REPORTED["if-ge"]) == pytest.approx(
            0.999166683626763, abs=1e-12)

    def test_zero(self):
        with pytest.raises(ZeroVector):
            cosine_similarity([0, 0], [1, 0])

    def test_nearest_planted_duplicate(self):
        vecs = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.0, 1.0], [-1.0, 0.2]])
        table = EmbeddingTable((1, 2, 3, 4, 5), vecs)
        top = nearest(table, 2, 1)
        assert top[0][0] == 4 and top[0][1] == pytest.approx(1.0)

    def test_nearest_exhaustive_and_ties(self):
        vecs = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [0.0, 1.0]])
        table = EmbeddingTable((10, 11, 12, 13), vecs)
        assert [op for op, _ in nearest(table, 10, 3)] == [11, 12, 13]

    def test_nearest_errors(self):
        table = reported_table()
        with pytest.raises(UnknownOpcode):
            nearest(table, 0x90, 2)
        with pytest.raises(ValueError):
            nearest(table, "if-ne", 6)

    @given(st.integers(0, 1000), st.integers(1, 11))
    def test_nearest_brute_force(self, seed, k):
        rng = np.random.default_rng(seed)
        ops = tuple(sorted(rng.choice(255, size=12, replace=False).tolist()))
        table = EmbeddingTable(ops, rng.normal(size=(12, 3)))
        q = ops[seed % 12]
        oracle = []
        for op in ops:
            if op != q:
                a, b = table[q], table[op]
                oracle.append((op, float(a @ b / math.sqrt((a @ a) * (b @ b)))))
        oracle.sort(key=lambda t: (-t[1], t[0]))
        got = nearest(table, q, k)
        assert [op for op, _ in got] == [op for op, _ in oracle[:k]]
        np.testing.assert_allclose([s for _, s in got], [s for _, s in oracle[:k]], atol=1e-12)


class TestFormats:
    def test_binary_layout(self):
        table = EmbeddingTable((0x0E, 0x12), np.array([[1.0, -2.0], [0.5, 0.25]]))
        expected = (b"O2VT" + b"\x01\x00" + b"\x02\x00\x00\x00" + b"\x02\x00\x00\x00"
                    + b"\x0e" + bytes.fromhex("0000803f") + bytes.fromhex("000000c0")
                    + b"\x12" + bytes.fromhex("0000003f") + bytes.fromhex("0000803e"))
        assert encode_table(table) == expected

    @given(st.integers(0, 1000), st.integers(1, 5))
    def test_binary_roundtrip(self, seed, D):
        rng = np.random.default_rng(seed)
        V = int(rng.integers(2, 255))
        ops = tuple(sorted(rng.choice(255, V, replace=False).tolist()))
        vecs = rng.normal(size=(V, D)).astype(np.float32).astype(np.float64)
        table = EmbeddingTable(ops, vecs)
        assert decode_table(encode_table(table)) == table

    def test_binary_errors(self):
        raw = encode_table(reported_table())
        with pytest.raises(BadFileMagic):
            decode_table(b"XXXX" + raw[4:])
        with pytest.raises(TruncatedFile):
            decode_table(raw[:-3])

    def test_text_roundtrip(self, tmp_path):
        table = reported_table()
        save_table_text(table, tmp_path / "t.txt")
        lines = (tmp_path / "t.txt").read_text().splitlines()
        assert lines[0] == "6 2"
        assert lines[1].split()[0] == "if-ne"
        assert load_table_text(tmp_path / "t.txt") == table

    def test_trace_csv(self, tmp_path):
        trace = TrainTrace([5.5, 4.25, 3.0], pair_count=10)
        write_trace(trace, tmp_path / "trace.csv")
        assert (tmp_path / "trace.csv").read_text().splitlines()[:2] == ["epoch,mean_loss", "1,5.5"]
        assert read_trace(tmp_path / "trace.csv").epoch_loss == trace.epoch_loss
