import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embkit.errors import BadMagic, DegenerateNorm, EmptyInput, ShapeMismatch, TruncatedFile, VersionMismatch
from embkit.model import (
    MAGIC,
    ModelParams,
    TokenizerConfig,
    backward_batch,
    checkpoint_bytes,
    checkpoint_from_bytes,
    cosine_sim,
    embed_text,
    fnv1a_64,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)

from conftest import central_difference, random_params, scaled_max_error


# published FNV-1a 64-bit test vectors
@pytest.mark.parametrize("data, expected", [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
    (b"b", 0xAF63DF4C8601F1A5),
    (b"c", 0xAF63DE4C8601EFF2),
    (b"foobar", 0x85944171F73967E8),
])
def test_fnv1a_vectors(data, expected):
    assert fnv1a_64(data) == expected


def test_tokenize_examples():
    cfg = TokenizerConfig(hash_buckets=16)
    assert tokenize("", cfg) == []
    a, b = tokenize("Paris Paris", cfg)
    assert a == b
    # low nibble of the three vectors above
    assert tokenize("a b c", cfg) == [0xC, 0x5, 0x2]


def test_tokenize_normalizes_and_lowercases():
    cfg = TokenizerConfig(hash_buckets=1 << 20)
    composed = "café"
    decomposed = "café"
    assert tokenize(composed, cfg) == tokenize(decomposed, cfg)
    assert tokenize("HeLLo", cfg) == tokenize("hello", cfg)
    assert tokenize("HeLLo", TokenizerConfig(hash_buckets=1 << 20, lowercase=False)) != tokenize("hello", cfg)


def test_tokenize_truncates_by_role():
    cfg = TokenizerConfig(hash_buckets=64, max_query_tokens=3, max_doc_tokens=5)
    text = " ".join(f"w{i}" for i in range(10))
    assert len(tokenize(text, cfg, is_query=True)) == 3
    assert len(tokenize(text, cfg)) == 5
    assert tokenize("one", cfg, is_query=True) != []


@given(st.lists(st.text(alphabet="abcxyzé", min_size=1, max_size=6), min_size=1, max_size=8))
def test_tokenize_order_preserving(words):
    cfg = TokenizerConfig(hash_buckets=97)
    ids = tokenize(" ".join(words), cfg)
    assert ids == [tokenize(w, cfg)[0] for w in words]
    rev = tokenize(" ".join(reversed(words)), cfg)
    assert rev == ids[::-1]


def test_tokenizer_config_validation():
    with pytest.raises(ValueError):
        TokenizerConfig(hash_buckets=1)


def _identity_params(d=4, buckets=8):
    embed = np.zeros((buckets, d))
    embed[:d] = np.eye(d)
    return ModelParams(embed, np.eye(d), tokenizer=TokenizerConfig(hash_buckets=buckets))


def test_embed_single_token_identity():
    p = _identity_params()
    np.testing.assert_array_equal(embed_text(p, [0]), [1.0, 0, 0, 0])


def test_embed_two_tokens_hand_arithmetic():
    rng = np.random.default_rng(0)
    p = random_params(rng, buckets=10, d_embed=3, d_out=4, rank=2)
    u, w = p.embed[3], p.embed[7]
    w_eff = p.proj + (p.lora_scale / 2) * (p.lora_B @ p.lora_A).T
    z = w_eff.T @ ((u + w) / 2)
    np.testing.assert_allclose(embed_text(p, [3, 7]), z / np.linalg.norm(z), rtol=1e-12)


def test_embed_errors():
    p = _identity_params()
    with pytest.raises(EmptyInput):
        embed_text(p, [])
    with pytest.raises(DegenerateNorm):
        embed_text(p, [6])  # zero row


def test_zero_adapter_is_exact_noop(rng):
    p = random_params(rng, rank=3, zero_b=True)
    base = p.without_adapter()
    for _ in range(20):
        ids = list(rng.integers(0, 32, size=rng.integers(1, 9)))
        assert np.array_equal(embed_text(p, ids), embed_text(base, ids))


@given(st.lists(st.integers(0, 31), min_size=1, max_size=12), st.integers(0, 2**32 - 1))
def test_unit_norm(ids, seed):
    p = random_params(np.random.default_rng(seed))
    v = embed_text(p, ids)
    assert abs(np.linalg.norm(v) - 1.0) <= 1e-6


def test_cosine_sim():
    v = np.array([0.6, 0.8])
    assert cosine_sim(v, v) == pytest.approx(1.0)
    assert cosine_sim(np.array([1.0, 0]), np.array([0, 1.0])) == 0.0
    assert cosine_sim(v, -v) == pytest.approx(-1.0)
    assert cosine_sim(v * (1 + 1e-12), v) <= 1.0


def test_backward_zero_upstream(rng):
    p = random_params(rng)
    batch = [[1, 2, 3], [4, 4]]
    g = backward_batch(p, batch, np.zeros((2, p.d_out)))
    for _, t in g.items():
        assert not t.any()


def test_backward_shape_mismatch(rng):
    p = random_params(rng)
    with pytest.raises(ShapeMismatch):
        backward_batch(p, [[1]], np.zeros((2, p.d_out)))


def _check_backward(p, batch, upstream):
    analytic = backward_batch(p, batch, upstream)

    def f():
        return float(np.sum(forward_batch(p, batch)[0] * upstream))

    errs = {}
    dense = analytic.dense_embed(p.tokenizer.hash_buckets)
    for name, tensor in p.tensors().items():
        a = dense if name == "embed" else getattr(analytic, name)
        num = np.zeros_like(tensor)
        rows = analytic.embed_rows if name == "embed" else range(tensor.shape[0])
        for i in rows:
            for j in range(tensor.shape[1]):
                num[i, j] = central_difference(f, tensor, (i, j))
        errs[name] = scaled_max_error(a, num)
    return errs


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d_e, d_o = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    rank = int(rng.integers(0, 4))
    p = random_params(rng, buckets=16, d_embed=d_e, d_out=d_o, rank=rank)
    batch = [list(rng.integers(0, 16, size=rng.integers(1, 6))) for _ in range(rng.integers(1, 4))]
    upstream = rng.normal(size=(len(batch), d_o))
    errs = _check_backward(p, batch, upstream)
    assert max(errs.values()) < 1e-4, errs


def test_duplicate_token_gradient_sums(rng):
    p = random_params(rng, buckets=8, d_embed=3, d_out=3, rank=0)
    batch = [[5, 5, 2]]
    up = rng.normal(size=(1, 3))
    g = backward_batch(p, batch, up)
    row5 = g.embed[list(g.embed_rows).index(5)]
    row2 = g.embed[list(g.embed_rows).index(2)]
    # token 5 occupies two of the three pooled positions
    np.testing.assert_allclose(row5, 2 * row2, rtol=1e-12)
    errs = _check_backward(p, batch, up)
    assert errs["embed"] < 1e-4


def test_adapter_only_flags_frozen(rng):
    p = random_params(rng)
    g = backward_batch(p, [[1, 2]], np.ones((1, p.d_out)), adapter_only=True)
    assert g.frozen == {"embed", "proj"}
    assert g.proj.any()


def test_checkpoint_round_trip(tmp_path):
    p = init_params(TokenizerConfig(hash_buckets=64), 8, 6, lora_rank=2, seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    for name, t in p.tensors().items():
        assert np.array_equal(t, q.tensors()[name])
    assert q.tokenizer == p.tokenizer and q.lora_scale == p.lora_scale
    assert checkpoint_bytes(q) == path.read_bytes()


def test_checkpoint_without_adapter(tmp_path):
    p = init_params(TokenizerConfig(hash_buckets=16), 4, 4, lora_rank=0)
    q = checkpoint_from_bytes(checkpoint_bytes(p))
    assert q.lora_A is None and q.lora_rank == 0


def test_checkpoint_layout():
    p = init_params(TokenizerConfig(hash_buckets=4), 2, 3, lora_rank=1)
    blob = checkpoint_bytes(p)
    assert blob.startswith(MAGIC)
    header_end = blob.index(b"\n", len(MAGIC))
    payload = blob[header_end + 1:]
    assert len(payload) == 4 * (4 * 2 + 2 * 3 + 1 * 2 + 3 * 1)
    first = np.frombuffer(payload[:4], dtype="<f4")[0]
    assert first == np.float32(p.embed[0, 0])


def test_checkpoint_errors(tmp_path):
    blob = checkpoint_bytes(init_params(TokenizerConfig(hash_buckets=8), 4, 4))
    with pytest.raises(BadMagic):
        checkpoint_from_bytes(b"NOTEMBK\n" + blob[8:])
    with pytest.raises(TruncatedFile):
        checkpoint_from_bytes(blob[:-4])
    with pytest.raises(TruncatedFile):
        checkpoint_from_bytes(blob + b"\0\0\0\0")
    bumped = blob.replace(b'"format_version":1', b'"format_version":9')
    with pytest.raises(VersionMismatch):
        checkpoint_from_bytes(bumped)


def test_params_validation(rng):
    with pytest.raises(ShapeMismatch):
        ModelParams(np.zeros((8, 3)), np.zeros((3, 4)), tokenizer=TokenizerConfig(hash_buckets=16))
    with pytest.raises(ShapeMismatch):
        ModelParams(np.zeros((8, 3)), np.zeros((3, 1)), tokenizer=TokenizerConfig(hash_buckets=8))
    with pytest.raises(ShapeMismatch):
        ModelParams(np.zeros((8, 3)), np.zeros((3, 4)), np.zeros((2, 3)), None,
                    tokenizer=TokenizerConfig(hash_buckets=8))
