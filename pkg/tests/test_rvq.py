import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from acom._hash import fnv1a_64
from acom.errors import ContractError, FramingError
from acom.rvq import (
    Codebook,
    EmaUpdater,
    codebook_grad,
    commit_grad,
    dequantize_batch,
    dequantize_frame,
    init_codebook,
    kmeans,
    quantize_batch,
    quantize_frame,
    quantize_sequence,
    reset_dead_codes,
    straight_through,
    straight_through_backward,
    vq_loss_grads,
    vq_losses,
)


def brute_rvq(h, words):
    """Loop-by-loop greedy RVQ used as an oracle."""
    r = [float(v) for v in h]
    tokens = []
    for stage in words:
        best, best_d = 0, None
        for v, c in enumerate(stage):
            d = sum((a - float(b)) ** 2 for a, b in zip(r, c))
            if best_d is None or d < best_d:
                best, best_d = v, d
        tokens.append(best)
        r = [a - float(b) for a, b in zip(r, stage[best])]
    return tokens


@pytest.mark.parametrize(
    "data, expected",
    [(b"", 0xCBF29CE484222325), (b"a", 0xAF63DC4C8601EC8C), (b"foobar", 0x85944171F73967E8)],
)
def test_fnv1a_reference_vectors(data, expected):
    assert fnv1a_64(data) == expected


def test_matches_loop_oracle(rng):
    cb = Codebook.random(dim=5, size=17, stages=3, seed=3)
    frames = rng.normal(size=(60, 5))
    out = quantize_batch(frames, cb)
    for frame, idx in zip(frames, out.indices):
        assert list(idx) == brute_rvq(frame, cb.codewords)


def test_two_stage_worked_example():
    words = np.array([[[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.5]]])
    cb = Codebook(words)
    res = quantize_frame([1.1, 0.6], cb)
    assert res.tokens == (1, 1)
    assert np.allclose(res.reconstruction, [1.0, 0.5])
    assert res.residual_norms[-1] == pytest.approx(np.hypot(0.1, 0.1))
    # stage residuals are (0.1, 0.6) then (0.1, 0.1)
    assert res.code_loss == pytest.approx(0.37 + 0.02)
    assert res.commit_loss == res.code_loss


def test_tie_breaks_to_smallest_index():
    cb = Codebook(np.array([[[1.0], [-1.0], [1.0]]]))
    assert quantize_frame([0.0], cb).tokens == (0,)
    assert quantize_frame([1.0], cb).tokens == (0,)


def test_single_codeword_always_selected(rng):
    cb = Codebook(rng.normal(size=(2, 1, 3)))
    out = quantize_batch(rng.normal(size=(20, 3)), cb)
    assert (out.indices == 0).all()


@given(
    hnp.arrays(np.float64, (8, 4), elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False)),
    st.integers(0, 2**31 - 1),
)
def test_chosen_codeword_is_argmin_each_stage(frames, seed):
    cb = Codebook.random(dim=4, size=9, stages=3, seed=seed)
    out = quantize_batch(frames, cb)
    for k in range(cb.stages):
        words = cb.codewords[k].astype(np.float64)
        d = ((out.stage_inputs[k][:, None, :] - words[None]) ** 2).sum(-1)
        chosen = d[np.arange(len(frames)), out.indices[:, k]]
        assert np.all(chosen <= d.min(axis=1))


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_exact_codeword_input_reconstructs_exactly(seed, stages):
    cb = Codebook.random(dim=6, size=8, stages=stages, seed=seed)
    # a single-stage input equal to a codeword maps to it with zero residual
    idx = np.random.default_rng(seed).integers(cb.size, size=5)
    frames = cb.codewords[0].astype(np.float64)[idx]
    single = Codebook(cb.codewords[:1])
    out = quantize_batch(frames, single)
    assert np.array_equal(dequantize_batch(out.indices, single), frames)


@given(st.integers(0, 2**31 - 1))
def test_dequantize_is_deterministic_and_sums_codewords(seed):
    cb = Codebook.random(dim=3, size=5, stages=4, seed=seed)
    tok = np.random.default_rng(seed).integers(5, size=(10, 4))
    a = dequantize_batch(tok, cb)
    b = dequantize_batch(tok, cb)
    assert a.tobytes() == b.tobytes()
    manual = np.zeros((10, 3))
    for k in range(4):
        manual = manual + cb.codewords[k].astype(np.float64)[tok[:, k]]
    assert np.array_equal(a, manual)


def test_zero_codeword_gives_nonincreasing_norms(rng):
    words = rng.normal(size=(6, 16, 4))
    words[:, 0] = 0.0
    cb = Codebook(words)
    norms = quantize_batch(rng.normal(size=(200, 4)) * 3, cb).residual_norms()
    assert np.all(np.diff(norms, axis=1) <= 0)


def test_quantized_recon_plus_residual_is_input(rng):
    cb = Codebook.random(dim=4, size=8, stages=3, seed=1)
    x = rng.normal(size=(30, 4))
    out = quantize_batch(x, cb)
    assert np.allclose(out.reconstruction + out.residual, x, atol=1e-12)
    assert np.array_equal(out.reconstruction, dequantize_batch(out.indices, cb))


def test_frame_and_batch_agree(rng):
    cb = Codebook.random(dim=4, size=8, stages=3, seed=1)
    x = rng.normal(size=(12, 4))
    seq = quantize_sequence(x, cb)
    out = quantize_batch(x, cb)
    assert [r.tokens for r in seq] == [tuple(i) for i in out.indices]
    assert np.allclose(dequantize_frame(seq[3].tokens, cb), out.reconstruction[3])


def test_input_errors():
    cb = Codebook.random(dim=3, size=4, stages=2)
    with pytest.raises(ContractError, match="dimension 3"):
        quantize_batch(np.zeros((2, 4)), cb)
    with pytest.raises(ContractError, match="frame 1"):
        quantize_sequence([[0, 0, 0], [0, np.nan, 0]], cb)
    with pytest.raises(ContractError, match="stage 1"):
        dequantize_frame([0, 4], cb)
    with pytest.raises(ContractError, match="stage 0, frame 2"):
        dequantize_batch([[0, 0], [1, 1], [-1, 0]], cb)
    assert quantize_sequence(np.zeros((0, 3)), cb) == []


def test_usage_counts(rng):
    cb = Codebook.random(dim=2, size=4, stages=2, seed=0)
    out = quantize_batch(rng.normal(size=(50, 2)), cb)
    for k in range(2):
        assert np.array_equal(cb.usage_count[k], np.bincount(out.indices[:, k], minlength=4))
    quantize_batch(rng.normal(size=(5, 2)), cb, count_usage=False)
    assert cb.usage_count.sum() == 100


def test_codebook_file_roundtrip(tmp_path):
    cb = Codebook.random(dim=7, size=33, stages=3, seed=2)
    path = tmp_path / "cb.acbk"
    cb.save(path)
    back = Codebook.load(path)
    assert back.codewords.tobytes() == cb.codewords.tobytes()
    assert back.hash() == cb.hash()
    raw = path.read_bytes()
    assert raw[:4] == b"ACBK" and raw[4] == 1
    assert len(raw) == 13 + 4 * 7 * 33 * 3 + 8


def test_codebook_file_corruption():
    data = bytearray(Codebook.random(dim=2, size=3, stages=1).to_bytes())
    with pytest.raises(FramingError, match="magic"):
        Codebook.from_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(FramingError, match="truncated"):
        Codebook.from_bytes(bytes(data[:-3]))
    with pytest.raises(FramingError, match="trailing"):
        Codebook.from_bytes(bytes(data) + b"\0")
    data[20] ^= 1
    with pytest.raises(FramingError, match="checksum"):
        Codebook.from_bytes(bytes(data))


def test_codebook_rejects_bad_arrays():
    with pytest.raises(ContractError):
        Codebook(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        Codebook(np.full((1, 2, 2), np.inf))


def test_vq_losses_and_gradients():
    h = np.array([1.0, 2.0])
    hq = np.array([0.5, 2.5])
    assert vq_losses(h, hq) == (0.5, 0.5)
    g_code, g_commit = vq_loss_grads(h, hq)
    assert np.allclose(g_code, [-1.0, 1.0]) and np.allclose(g_commit, [1.0, -1.0])
    assert np.array_equal(straight_through(h, hq), hq)
    g = np.array([0.3, -0.7])
    assert np.array_equal(straight_through_backward(g), g)


def test_codebook_and_commit_grads_finite_difference(rng):
    cb = Codebook(rng.normal(size=(2, 3, 2)), dtype=np.float64)
    x = rng.normal(size=(6, 2))
    out = quantize_batch(x, cb, count_usage=False)
    g = codebook_grad(out, cb)
    # with assignments frozen, code loss = sum_k ||c_k - r_{k-1}|| ^2 where r_{k-1}
    # depends on earlier codewords only through the stop-gradient: so only direct terms
    eps = 1e-6
    for k, v, d in itertools.product(range(2), range(3), range(2)):
        def code(delta):
            w = cb.codewords.copy()
            w[k, v, d] += delta
            return sum(((w[j][out.indices[:, j]] - out.stage_inputs[j]) ** 2).sum() for j in range(2))
        num = (code(eps) - code(-eps)) / (2 * eps)
        assert g[k, v, d] == pytest.approx(num, rel=1e-6, abs=1e-8)
    gh = commit_grad(out)
    chosen = [cb.codewords[j][out.indices[:, j]] for j in range(2)]

    def commit(hh):
        r, total = hh, 0.0
        for c in chosen:
            r = r - c
            total += (r**2).sum()
        return total

    for i, d in itertools.product(range(6), range(2)):
        e = np.zeros_like(x)
        e[i, d] = eps
        num = (commit(x + e) - commit(x - e)) / (2 * eps)
        assert gh[i, d] == pytest.approx(num, rel=1e-6, abs=1e-8)


def test_kmeans_recovers_separated_clusters(rng):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.concatenate([c + 0.1 * rng.normal(size=(50, 2)) for c in centers])
    cents, history = kmeans(x, 3, iters=30, seed=0)
    got = sorted(map(tuple, np.round(cents)))
    assert got == sorted(map(tuple, centers))
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_kmeans_few_distinct_samples():
    x = np.array([[1.0, 1.0]] * 5 + [[2.0, 2.0]] * 5)
    cents, _ = kmeans(x, 4, seed=0)
    assert cents.shape == (4, 2)
    assert np.all(np.abs(cents - np.round(cents)) <= 1e-4)


def test_kmeans_is_seeded(rng):
    x = rng.normal(size=(100, 3))
    a, _ = kmeans(x, 5, seed=7)
    b, _ = kmeans(x, 5, seed=7)
    assert np.array_equal(a, b)


def test_init_codebook_shapes_and_improvement(rng):
    x = rng.normal(size=(400, 4))
    cb = init_codebook(x, stages=3, size=8, iters=10, seed=0)
    assert cb.codewords.shape == (3, 8, 4)
    norms = quantize_batch(x, cb, count_usage=False).residual_norms()
    assert norms[:, 1].mean() < norms[:, 0].mean()
    assert norms[:, 3].mean() < norms[:, 1].mean()


def test_reset_dead_codes(rng):
    cb = Codebook(np.stack([np.concatenate([rng.normal(size=(2, 2)), np.full((2, 2), 100.0)])]))
    x = rng.normal(size=(40, 2))
    quantize_batch(x, cb)
    assert (cb.usage_count[0, 2:] == 0).all()
    n = reset_dead_codes(cb, x, threshold=1, seed=0)
    assert n == 2
    assert (cb.usage_count == 0).all()
    for w in cb.codewords[0, 2:]:
        assert any(np.allclose(w, r) for r in x.astype(np.float32))


def test_ema_moves_codewords_toward_assigned_means(rng):
    cb = Codebook(np.array([[[0.0], [10.0]]]))
    ema = EmaUpdater(cb, decay=0.5)
    x = np.concatenate([np.full((20, 1), 1.0), np.full((20, 1), 9.0)])
    for _ in range(30):
        ema.update(quantize_batch(x, cb, count_usage=False))
    assert cb.codewords[0, 0, 0] == pytest.approx(1.0, abs=1e-2)
    assert cb.codewords[0, 1, 0] == pytest.approx(9.0, abs=1e-2)


def test_ema_sync_keeps_external_edits():
    cb = Codebook(np.array([[[0.0], [10.0]]]))
    ema = EmaUpdater(cb, decay=0.9)
    cb.codewords[0, 1] = 5.0
    ema.sync()
    ema.update(quantize_batch(np.array([[0.0]]), cb, count_usage=False))
    assert cb.codewords[0, 1, 0] == pytest.approx(5.0, rel=1e-4)
