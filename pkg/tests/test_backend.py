import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_textseg.backend import (
    BASE_WORDS,
    GROUNDED_COLORS,
    SPECIAL_TOKENS,
    TokenSequence,
    WordTokenizer,
    load_backend,
    make_toy_backend,
    resolve_backend,
    save_backend,
)
from fewshot_textseg.data import standardize
from fewshot_textseg.errors import (
    ArgumentError,
    CapabilityError,
    ConfigurationError,
    NumericError,
    ShapeError,
    TokenOverflowError,
)


def hand_ids(text, vocab, n_buckets):
    # independent re-derivation: split on spaces, lower-case, hash unknowns
    out = []
    for w in text.lower().split():
        if w in vocab and w not in SPECIAL_TOKENS:
            out.append(vocab.index(w))
        else:
            out.append(len(vocab) + zlib.crc32(w.encode()) % n_buckets)
    return out


def test_tokenize_matches_hand_tokenization():
    tok = WordTokenizer()
    text = "A Black italic cursive text in the center zzyzx"
    seq = tok.tokenize(text)
    assert list(seq.ids) == [tok.start_id, *hand_ids(text, tok.vocab, 1024), tok.end_id]
    assert seq.n_learnable == 0


def test_detokenize_roundtrip_known_words():
    tok = WordTokenizer()
    seq = tok.tokenize("red bold text at the top")
    assert tok.detokenize(seq) == "red bold text at the top"


def test_token_overflow():
    tok = WordTokenizer(context_length=5)
    tok.tokenize("a b c")  # 5 with markers
    with pytest.raises(TokenOverflowError):
        tok.tokenize("a b c d")


def test_vocab_has_specials_first():
    tok = WordTokenizer()
    assert tuple(tok.vocab[:3]) == SPECIAL_TOKENS
    assert set(BASE_WORDS) <= set(tok.vocab)


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="abcdefghij ", min_size=0, max_size=60))
def test_word_ids_in_range(text):
    tok = WordTokenizer(n_buckets=16)
    seq = tok.tokenize(text)
    assert all(0 <= i < tok.size for i in seq.ids)


def test_embed_tokens_splices_params_and_propagates_gradient(toy):
    tok = toy.tokenizer
    seq = TokenSequence((tok.start_id, tok.learn_id, tok.word_id("text"), tok.learn_id, tok.end_id),
                        (False, True, False, True, False))
    params = torch.randn(2, toy.descriptor.embed_dim, dtype=torch.float64, requires_grad=True)
    emb = toy.embed_tokens(seq, params)
    assert torch.equal(emb[1], params[0]) and torch.equal(emb[3], params[1])
    assert torch.equal(emb[2], toy.token_table[tok.word_id("text")])
    toy.encode_text(emb).sum().backward()
    assert params.grad is not None and torch.all(params.grad.abs().sum(1) > 0)


def test_embed_tokens_rejects_wrong_param_count(toy):
    tok = toy.tokenizer
    seq = TokenSequence((tok.start_id, tok.learn_id, tok.end_id), (False, True, False))
    with pytest.raises(ConfigurationError):
        toy.embed_tokens(seq, None)


def test_text_features_unit_norm(backend):
    feats = backend.encode_text(backend.token_table[:12][None].repeat(3, 1, 1))
    assert feats.shape == (3, backend.descriptor.feature_dim)
    np.testing.assert_allclose(feats.norm(dim=-1).numpy(), 1.0, atol=1e-12)


def test_image_encoding_shapes(backend):
    img = np.random.default_rng(0).normal(size=(96, 64, 3))
    enc = backend.encode_image(img)
    assert enc.grid_shape == (6, 4)
    assert len(enc.layer_maps) == len(backend.descriptor.tapped_layer_indices)
    for m in enc.layer_maps:
        np.testing.assert_allclose(np.linalg.norm(m, axis=-1), 1.0, atol=1e-12)


def test_zero_image_encodes_to_normalized_bias(toy):
    enc = toy.encode_image(np.zeros((32, 32, 3)))
    for i, m in enumerate(enc.layer_maps):
        b = toy.state_arrays()[f"img_bias_{i}"]
        np.testing.assert_allclose(m[1, 1], b / np.linalg.norm(b), atol=1e-12)


@pytest.mark.parametrize("shape", [(30, 32, 3), (32, 32), (8, 8, 3), (32, 32, 4)])
def test_image_shape_errors(toy, shape):
    with pytest.raises(ShapeError):
        toy.encode_image(np.zeros(shape))


def test_non_finite_inputs(toy):
    img = np.zeros((32, 32, 3))
    img[3, 3, 0] = np.nan
    with pytest.raises(NumericError):
        toy.encode_image(img)
    with pytest.raises(NumericError):
        toy.encode_text(torch.full((4, toy.descriptor.embed_dim), float("inf"), dtype=torch.float64))


def test_colour_words_are_grounded(toy):
    # "red" text should sit closer to a red patch than to any other grounded colour
    patch = toy.descriptor.patch_size
    feats = {}
    for word, rgb in GROUNDED_COLORS.items():
        img = standardize(np.broadcast_to(np.asarray(rgb), (patch, patch, 3)))
        feats[word] = toy.encode_image(img).layer_maps[-1][0, 0]
    for word in ("red", "green", "blue", "yellow"):
        t = toy.encode_prompt(toy.tokenize(f"a {word} text")).detach().numpy()
        sims = {w: float(t @ f) for w, f in feats.items()}
        assert max(sims, key=sims.get) == word


def test_fingerprint_stable_and_seed_sensitive():
    a, b = make_toy_backend(seed=1, dim=16), make_toy_backend(seed=1, dim=16)
    assert a.fingerprint() == b.fingerprint()
    assert make_toy_backend(seed=2, dim=16).fingerprint() != a.fingerprint()


def test_save_load_roundtrip(tmp_path, toy):
    save_backend(toy, tmp_path / "w")
    loaded = load_backend(tmp_path / "w")
    assert loaded.descriptor == toy.descriptor
    assert loaded.tokenizer.vocab == toy.tokenizer.vocab
    for name, arr in toy.state_arrays().items():
        np.testing.assert_allclose(loaded.state_arrays()[name], arr.astype(np.float32), rtol=0, atol=0)
    img = np.random.default_rng(1).normal(size=(32, 32, 3))
    np.testing.assert_allclose(loaded.encode_image(img).layer_maps[-1], toy.encode_image(img).layer_maps[-1],
                               atol=1e-5)
    # weights are stored as float32, so only a second cycle is bit-exact
    save_backend(loaded, tmp_path / "w2")
    assert load_backend(tmp_path / "w2").fingerprint() == loaded.fingerprint()


def test_resolve_backend_specs(tmp_path):
    assert resolve_backend("toy:seed=3,dim=16").fingerprint() == make_toy_backend(seed=3, dim=16).fingerprint()
    assert resolve_backend({"seed": 3, "dim": 16}).fingerprint() == make_toy_backend(seed=3, dim=16).fingerprint()
    with pytest.raises(ArgumentError):
        resolve_backend("toy:nonsense=1")
    with pytest.raises(CapabilityError):
        resolve_backend(str(tmp_path / "missing"))
    with pytest.raises(CapabilityError):
        resolve_backend({"kind": "clip"})


def test_factory_argument_checks():
    with pytest.raises(ArgumentError):
        make_toy_backend(dim=4)
    with pytest.raises(ArgumentError):
        make_toy_backend(patch=7, image_size=640)
