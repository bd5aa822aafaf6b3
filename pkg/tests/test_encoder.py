import numpy as np
import pytest

from cocondenser.encoder import (
    CLS_ID,
    PAD_ID,
    UNK_ID,
    Encoder,
    EncoderConfig,
    Vocabulary,
    collate,
    embed,
    encoder_stack,
    init_layer,
    self_attention,
    tokenize,
)
from cocondenser.tensor import ParameterSet, ShapeError, Tensor, grad_check, softmax

from conftest import rel_err


@pytest.fixture
def vocab():
    return Vocabulary(["the", "cat", "sat", "."])


def test_reserved_ids_and_bijection(vocab, tmp_path):
    assert vocab.tokens[:5] == ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"]
    assert vocab.id_of("The") == vocab.id_of("the") == 5
    vocab.save(tmp_path / "vocab.txt")
    assert (tmp_path / "vocab.txt").read_text().splitlines()[0] == "the"
    again = Vocabulary.load(tmp_path / "vocab.txt")
    assert again.tokens == vocab.tokens


def test_build_vocab_by_frequency():
    v = Vocabulary.build(["b a b", "c b a"], max_size=7)
    assert v.tokens[5:] == ["b", "a"]


def test_tokenize_examples(vocab):
    assert tokenize("", vocab).ids == [CLS_ID]
    assert tokenize("the the the", vocab).ids == [CLS_ID, 5, 5, 5]
    seq = tokenize("The dog sat.", vocab)
    assert seq.ids == [CLS_ID, 5, UNK_ID, 7, 8]
    padded = tokenize("the cat", vocab, max_len=5, pad=True)
    assert padded.ids == [CLS_ID, 5, 6, PAD_ID, PAD_ID]
    assert padded.attention_mask == [1, 1, 1, 0, 0]
    assert len(tokenize("the " * 50, vocab, max_len=8)) == 8


def _params(vocab_size=10, max_len=8, d=8, layers=1, seed=0, std=0.3):
    enc = Encoder.init(EncoderConfig(vocab_size, d, 2, 16, max_len, layers), np.random.default_rng(seed), std)
    return enc


def test_embed_examples():
    enc = _params()
    ps = enc.params
    zero = ParameterSet({"embed.tokens": Tensor(np.zeros((10, 8))), "embed.positions": Tensor(np.zeros((8, 8)))})
    np.testing.assert_array_equal(embed(zero, np.array([[0, 3, 4]])).data, np.zeros((1, 3, 8)))
    out = embed(ps, np.array([[CLS_ID]])).data[0, 0]
    np.testing.assert_array_equal(out, ps["embed.tokens"].data[CLS_ID] + ps["embed.positions"].data[0])
    with pytest.raises(ShapeError):
        embed(ps, np.zeros((1, 9), dtype=int))


def test_embed_gradient_counts_tokens():
    enc = _params()
    ids = np.array([[0, 5, 5, 7], [0, 7, 5, 3]])
    embed(enc.params, ids).sum().backward()
    counts = np.bincount(ids.reshape(-1), minlength=10)
    np.testing.assert_array_equal(enc.params["embed.tokens"].grad[:, 0], counts)


def test_encoder_stack_identity_and_shape():
    enc = _params(layers=3)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 5, 8)))
    mask = np.ones((2, 5), dtype=bool)
    assert encoder_stack(x, [], mask, enc.params, 2) is x
    assert encoder_stack(x, enc.layers, mask, enc.params, 2).shape == (2, 5, 8)
    with pytest.raises(ShapeError):
        encoder_stack(x, enc.layers, np.ones((2, 4), dtype=bool), enc.params, 2)


def test_padding_content_cannot_reach_real_positions():
    enc = _params(layers=2)
    ids = np.array([[CLS_ID, 6, 7, PAD_ID, PAD_ID]])
    mask = np.array([[1, 1, 1, 0, 0]], dtype=bool)
    base = enc.forward(ids, mask).data
    for pad_ids in ([9, 8], [5, 5], [1, 2]):
        other = ids.copy()
        other[0, 3:] = pad_ids
        out = enc.forward(other, mask).data
        np.testing.assert_allclose(out[0, :3], base[0, :3], rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one_over_unmasked_keys():
    enc = _params()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 8))
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=bool)
    ps = enc.params
    q = (x @ ps["layers.0.attn.wq"].data + ps["layers.0.attn.bq"].data).reshape(2, 6, 2, 4).transpose(0, 2, 1, 3)
    k = (x @ ps["layers.0.attn.wk"].data).reshape(2, 6, 2, 4).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / 2.0
    scores = np.where(mask[:, None, None, :], scores, -np.inf)
    probs = softmax(Tensor(scores), -1).data
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
    assert np.all(probs[0, :, :, 4:] == 0.0)
    assert self_attention(Tensor(x), mask, ps, "layers.0", 2).shape == (2, 6, 8)


def test_full_stack_gradient_check():
    enc = Encoder.init(EncoderConfig(12, 16, 2, 32, 8, 1), np.random.default_rng(3), std=0.3)
    rng = np.random.default_rng(4)
    ids = rng.integers(5, 12, size=(2, 8))
    ids[:, 0] = CLS_ID
    mask = np.ones((2, 8), dtype=bool)
    mask[1, 6:] = False
    w = Tensor(rng.normal(size=(2, 8, 16)))
    assert grad_check(lambda p: (enc.forward(ids, mask) * w).sum(), enc.params) < 1e-4


def test_collate_pads_right():
    ids, mask = collate([tokenize("a b", Vocabulary(["a", "b"])), tokenize("a", Vocabulary(["a", "b"]))])
    assert ids.tolist() == [[0, 5, 6], [0, 5, PAD_ID]]
    assert mask.tolist() == [[True, True, True], [True, True, False]]


def test_encoder_checkpoint_round_trip(tmp_path):
    enc = _params()
    enc.save(tmp_path / "enc.ckpt")
    again = Encoder.load(tmp_path / "enc.ckpt")
    assert again.config == enc.config
    ids, mask = np.array([[0, 5, 6]]), np.ones((1, 3), dtype=bool)
    assert again.cls(ids, mask).data.tobytes() == enc.cls(ids, mask).data.tobytes()


def test_hidden_must_divide_heads():
    with pytest.raises(ValueError):
        EncoderConfig(10, hidden=10, heads=4)


def test_layer_parameter_names():
    ps = ParameterSet()
    init_layer(ps, "early.0", 8, 16, np.random.default_rng(0), 0.02)
    assert "early.0.attn.wq" in ps and "early.0.attn.bk" not in ps
    assert rel_err(ps["early.0.ln1.gain"].data, np.ones(8)) == 0
