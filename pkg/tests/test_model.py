import math

import numpy as np
import pytest

from improv.codebook import Codebook
from improv.model import ImprovModel, ModelConfig, predict_tokens, sample_tokens
from improv.numerics import ContractError, DimensionError
from improv.textenc import PAD, tokenize

TEXT = "Left - input image, right: Black and white foreground background segmentation of a red circle"


@pytest.fixture(scope="module")
def model():
    return ImprovModel(seed=3)


def random_inputs(seed, n_mask=16):
    rng = np.random.default_rng(seed)
    img = rng.random((64, 64, 3))
    mask = np.zeros(64, dtype=bool)
    mask[rng.permutation(64)[:n_mask]] = True
    return img, mask.reshape(8, 8)


def strip_cross(model):
    bare = ImprovModel(ModelConfig(**{**model.config.to_dict(), "cross_attention": "none"}))
    bare.load_state_dict({k: v for k, v in model.state_dict().items() if k in bare.params})
    return bare


def test_output_shape(model):
    img, mask = random_inputs(0, n_mask=21)
    assert model.forward(img, mask, tokenize(TEXT)).shape == (21, 216)


def test_empty_text_equals_no_cross_attention_bitwise(model):
    img, mask = random_inputs(1)
    a = model.forward(img, mask, tokenize("")).data
    b = strip_cross(model).forward(img, mask, tokenize("")).data
    assert np.array_equal(a, b)


def test_empty_text_in_mixed_batch_matches_single(model):
    img, mask = random_inputs(2)
    ids = np.stack([tokenize(TEXT).token_ids, tokenize("").token_ids])
    batch = model.forward_batch(np.stack([img, img]), np.stack([mask, mask]), ids).data
    single = strip_cross(model).forward(img, mask, tokenize("")).data
    assert np.array_equal(batch[1], single)


def test_attention_rows_sum_to_one(model):
    img, mask = random_inputs(3)
    rec = {"self": [], "cross": []}
    model.forward(img, mask, tokenize(TEXT), record=rec)
    assert len(rec["self"]) == 6 and len(rec["cross"]) == 6
    for p in rec["self"] + rec["cross"]:
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-5)


def test_predict_tokens_rules():
    logits = np.zeros((3, 216))
    logits[0, 17] = 5.0
    logits[2, [4, 9]] = 2.0
    assert list(predict_tokens(logits)) == [17, 0, 4]
    rnd = np.random.default_rng(0).standard_normal((50, 216))
    brute = [max(range(216), key=lambda j: (r[j], -j)) for r in rnd]
    assert list(predict_tokens(rnd)) == brute


def test_sample_tokens_low_temperature_is_argmax():
    rnd = np.random.default_rng(0).standard_normal((20, 216))
    out = sample_tokens(rnd, 1e-4, np.random.default_rng(1))
    assert np.array_equal(out, predict_tokens(rnd))


def test_init_loss_near_log_vocab(model):
    img, mask = random_inputs(4, n_mask=48)
    targets = Codebook().encode(img)
    loss = float(model.loss(img, mask, tokenize(""), targets).data)
    assert abs(loss - math.log(216)) < 0.5


def test_perfect_logits_give_zero_loss():
    m = ImprovModel(seed=0)
    m.params["head.w"].data[:] = 0
    m.params["head.b"].data[:] = 0
    m.params["head.b"].data[0] = 50.0
    img, mask = np.zeros((64, 64, 3)), random_inputs(5)[1]
    assert float(m.loss(img, mask, tokenize(""), np.zeros((8, 8), dtype=int)).data) < 1e-6


def test_loss_ignores_unmasked_targets(model):
    img, mask = random_inputs(6)
    t = Codebook().encode(img)
    t2 = t.copy()
    t2[~mask] = (t2[~mask] + 7) % 216
    a = model.loss(img, mask, tokenize(TEXT), t).data
    b = model.loss(img, mask, tokenize(TEXT), t2).data
    assert a == b


def test_deterministic_logits():
    img, mask = random_inputs(7)
    a = ImprovModel(seed=11).forward(img, mask, tokenize(TEXT)).data
    b = ImprovModel(seed=11).forward(img, mask, tokenize(TEXT)).data
    assert np.array_equal(a, b)


def test_text_pathway_is_live_only_with_text(model):
    img, mask = random_inputs(8)
    cut = model.clone()
    cut.params["text_proj.w"].data[:] = 0
    cut.params["text_proj.b"].data[:] = 0
    assert np.array_equal(model.forward(img, mask, tokenize("")).data, cut.forward(img, mask, tokenize("")).data)
    assert not np.array_equal(model.forward(img, mask, tokenize(TEXT)).data,
                              cut.forward(img, mask, tokenize(TEXT)).data)


def test_pad_positions_do_not_matter(model):
    img, mask = random_inputs(9)
    ids = tokenize("a red circle").token_ids
    scattered = np.full(32, PAD)
    scattered[[3, 10, 31]] = ids[:3]
    a = model.forward_batch(img[None], mask[None], ids[None]).data
    b = model.forward_batch(img[None], mask[None], scattered[None]).data
    assert np.array_equal(a, b)


def test_errors(model):
    img, mask = random_inputs(10)
    with pytest.raises(ContractError):
        model.forward(img, np.zeros((8, 8), dtype=bool), tokenize(""))
    with pytest.raises(DimensionError):
        model.forward(np.zeros((32, 32, 3)), mask, tokenize(""))
    with pytest.raises(ContractError):
        model.forward(img, mask, tokenize(""), discard=mask)


def test_discarded_positions_are_not_seen(model):
    img, mask = random_inputs(11)
    discard = np.zeros((8, 8), dtype=bool)
    discard[0, :] = True
    discard &= ~mask
    other = img.copy()
    other[:8] = 1.0 - other[:8]
    a = model.forward(img, mask, tokenize(TEXT), discard).data
    b = model.forward(other, mask, tokenize(TEXT), discard).data
    assert np.array_equal(a, b)


def test_parameter_count_pure_function_of_config():
    a, b = ImprovModel(seed=0), ImprovModel(seed=99)
    assert a.num_parameters() == b.num_parameters()
    assert list(a.params) == list(b.params)
    small = ImprovModel(ModelConfig(cross_attention="decoder"))
    assert small.num_parameters() < a.num_parameters()


def test_init_statistics():
    m = ImprovModel(seed=0)
    w = m.params["enc.0.mlp.fc1.w"].data
    assert abs(w.std() - 0.02) < 0.002
    assert np.all(m.params["enc.0.mlp.fc1.b"].data == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(image_side=60)


def test_ragged_batch_matches_single_forward(model):
    rng = np.random.default_rng(8)
    imgs = rng.random((3, 64, 64, 3))
    mask = np.zeros((3, 64), dtype=bool)
    discard = np.zeros((3, 64), dtype=bool)
    for b, (n_mask, n_disc) in enumerate([(48, 0), (30, 20), (10, 32)]):
        perm = rng.permutation(64)
        mask[b, perm[:n_mask]] = True
        discard[b, perm[n_mask:n_mask + n_disc]] = True
    ids = np.stack([tokenize(TEXT).token_ids, tokenize("").token_ids, tokenize("a red circle").token_ids])
    batch = model.forward_batch(imgs, mask.reshape(3, 8, 8), ids, discard.reshape(3, 8, 8)).data
    assert batch.shape == (3, 48, 216)
    for b in range(3):
        single = model.forward_batch(imgs[b:b + 1], mask[b:b + 1], ids[b:b + 1], discard[b:b + 1]).data[0]
        np.testing.assert_allclose(batch[b, : mask[b].sum()], single, rtol=1e-5, atol=1e-5)


def test_ragged_loss_counts_only_real_rows(model):
    rng = np.random.default_rng(9)
    imgs = rng.random((2, 64, 64, 3))
    targets = rng.integers(0, 216, size=(2, 64))
    mask = np.zeros((2, 64), dtype=bool)
    mask[0, :40] = True
    mask[1, 10:20] = True
    loss = model.loss_batch(imgs, mask, np.stack([tokenize("").token_ids] * 2), targets).data
    rows = []
    for b in range(2):
        logits = model.forward_batch(imgs[b:b + 1], mask[b:b + 1], tokenize("").token_ids[None]).data[0]
        logp = logits - np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1, keepdims=True)) \
            - logits.max(1, keepdims=True)
        rows.extend(-logp[np.arange(len(logp)), targets[b][mask[b]]])
    assert loss == pytest.approx(np.mean(rows), rel=1e-5)
