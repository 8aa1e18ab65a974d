import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from improv.codebook import Codebook
from improv.model import ImprovModel
from improv.prompting import (CapacityError, PromptBundle, TaskDescriptor, TemplateError, arrange_grid,
                              grid_for, inpaint, load_bundle, mask_to_rle, render_text, rle_to_mask,
                              save_bundle)
from improv.textenc import UNK, tokenize


def cells(n, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.random((32, 32, 3)), rng.random((32, 32, 3))) for _ in range(n)], rng.random((32, 32, 3))


def test_one_example_layout():
    ex, q = cells(1)
    b = arrange_grid(ex, q)
    assert b.grid_shape == (2, 2) and b.mask.sum() == 16
    assert b.mask[4:, 4:].all() and not b.discard.any()
    assert np.array_equal(b.image[:32, :32], ex[0][0]) and np.array_equal(b.image[:32, 32:], ex[0][1])
    assert np.array_equal(b.image[32:, :32], q)


def test_zero_example_layout():
    _, q = cells(0)
    b = arrange_grid([], q)
    assert b.grid_shape == (1, 2)
    assert b.mask.sum() == 16 and b.mask[4:, 4:].all()
    assert b.discard[:4].all() and not b.discard[4:].any()
    assert np.array_equal(b.image[32:, :32], q) and np.all(b.image[:32] == 1.0)


def test_four_by_four_layout():
    ex, q = cells(3)
    b = arrange_grid(ex, q)
    assert b.grid_shape == (4, 4) and b.cell_px == 16
    used = ~b.discard
    assert used.sum() // 4 == 8 and b.discard.sum() // 4 == 8
    assert b.mask.sum() == 4
    assert not (b.mask & b.discard).any()


def test_three_by_three_layout():
    ex, q = cells(2)
    b = arrange_grid(ex, q)
    assert b.grid_shape == (3, 3) and b.cell_px == 16 and b.mask.sum() == 4


def test_capacity():
    assert [grid_for(n) for n in range(8)] == [(1, 2), (2, 2), (3, 3)] + [(4, 4)] * 5
    ex, q = cells(8)
    with pytest.raises(CapacityError):
        arrange_grid(ex, q)


@given(st.integers(0, 7), st.sampled_from(["row", "column"]))
def test_mask_is_one_cell_and_cells_roundtrip(n, order):
    ex, q = cells(n, seed=n)
    b = arrange_grid(ex, q, order=order)
    assert b.mask.sum() == (b.cell_px // 8) ** 2
    ys, xs = np.nonzero(b.mask)
    assert (ys.max() - ys.min() + 1) * 8 == b.cell_px and (xs.max() - xs.min() + 1) * 8 == b.cell_px
    # every non-discarded example cell is the (box-resized) source image
    f = 32 // b.cell_px
    inputs = [r for r in b.cell_boxes if r[0] == "input"]
    for (x, _), (_, y0, x0) in zip(ex, inputs):
        want = x.reshape(b.cell_px, f, b.cell_px, f, 3).mean(axis=(1, 3))
        np.testing.assert_allclose(b.image[y0:y0 + b.cell_px, x0:x0 + b.cell_px], want)


def test_render_text_templates():
    assert render_text(TaskDescriptor("segmentation")) == "Image Segmentation"
    assert render_text(TaskDescriptor("segmentation", "left/right", "horse")) == (
        "Left - input image, right: Black and white foreground background segmentation of a horse")
    assert render_text(TaskDescriptor("colorization", "left/right", "red circle")) == (
        "Colorization results: Left - input image, Right - Colorized image of red circle")
    assert render_text(TaskDescriptor()) == ""
    with pytest.raises(TemplateError):
        render_text(TaskDescriptor("denoising"))


def test_levels_tokenize_without_unk():
    for level in ("task", "task+location", "task+location+class"):
        text = render_text(TaskDescriptor.for_level("outline", level, "cyan square"))
        assert UNK not in tokenize(text).token_ids


def test_inpaint_paste_back_only_touches_mask():
    ex, q = cells(1)
    b = arrange_grid(ex, q).with_text("Image Segmentation")
    out = inpaint(ImprovModel(seed=0), b)
    keep = ~np.repeat(np.repeat(b.mask, 8, 0), 8, 1)
    assert np.array_equal(out[keep], b.image[keep])
    assert np.array_equal(Codebook().encode(out)[b.mask], Codebook().encode(out)[b.mask])


@given(st.lists(st.booleans(), min_size=64, max_size=64))
def test_rle_roundtrip(bits):
    m = np.array(bits).reshape(8, 8)
    assert np.array_equal(rle_to_mask(mask_to_rle(m)), m)


def test_bundle_serialisation(tmp_path):
    ex, q = cells(2)
    b = arrange_grid(ex, q).with_text("Edge Detection")
    save_bundle(b, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert isinstance(back, PromptBundle)
    assert np.array_equal(back.mask, b.mask) and np.array_equal(back.discard, b.discard)
    assert back.text_string == "Edge Detection" and back.grid_shape == b.grid_shape
    assert np.max(np.abs(back.image - b.image)) <= 0.5 / 255 + 1e-12
