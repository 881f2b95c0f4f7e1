import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seqdet.analysis import (
    corner_displacement,
    coordinate_similarity,
    decode_attention,
    near_far_similarity,
    quantization_figure,
    quantized_box,
    region_attention,
    region_boxes,
    shuffle_pixels,
    write_attention,
    write_similarity,
)
from seqdet.codec import AnnotatedObject, BBox
from seqdet.data import synthetic_sample
from seqdet.infer import DecodeConfig
from seqdet.model import Seq2SeqDetector

from conftest import micro_config


@pytest.fixture
def micro_model():
    cfg = micro_config()
    torch.manual_seed(0)
    return Seq2SeqDetector(cfg.model).eval(), cfg


def test_two_bins_snap_to_extremes():
    b = quantized_box(BBox(0.1, 0.2, 0.6, 0.99), 2)
    assert set(b.as_tuple()) <= {0.0, 1.0}


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 64), st.data())
def test_pixel_aligned_boxes_within_one_pixel(side, data):
    n_bins = data.draw(st.integers(side, 4 * side))
    y0, x0 = data.draw(st.integers(0, side - 1)), data.draw(st.integers(0, side - 1))
    y1, x1 = data.draw(st.integers(y0 + 1, side)), data.draw(st.integers(x0 + 1, side))
    obj = AnnotatedObject(BBox(y0 / side, x0 / side, y1 / side, x1 / side), 0)
    assert corner_displacement([obj], side, side, n_bins)[0] <= 1.0 + 1e-9


def test_quantization_figure_files(tmp_path):
    s = synthetic_sample(micro_config().data.synthetic, 0)
    paths = quantization_figure(s.image, s.objects, [2, 16], tmp_path)
    assert [p.name for p in paths] == ["quantization_bins2.png", "quantization_bins16.png"]
    lines = (tmp_path / "quantization.txt").read_text().splitlines()
    assert lines[0] == "n_bins max_px mean_px" and len(lines) == 3


def test_shuffle_pixels_is_permutation():
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    out = shuffle_pixels(img, np.random.default_rng(1))
    key = lambda a: sorted(map(tuple, a.reshape(-1, 3)))
    assert key(out) == key(img)


def test_region_grids(micro_model):
    model, cfg = micro_model
    img = synthetic_sample(cfg.data.synthetic, 0).image
    dump = region_attention(model, img, cfg.vocab, 4)
    assert dump.grids.shape == (16, 2, 2)
    np.testing.assert_allclose(dump.grids.sum(axis=(1, 2)), 1.0, atol=1e-6)
    assert len(region_boxes(4)) == 16


def test_decode_attention_one_grid_per_token(micro_model, tmp_path):
    model, cfg = micro_model
    img = synthetic_sample(cfg.data.synthetic, 0).image
    dump = decode_attention(model, img, cfg.vocab, DecodeConfig(max_objects=2, fixed_length=True))
    assert len(dump.tokens) == 10 == dump.grids.shape[0]
    np.testing.assert_allclose(dump.grids.sum(axis=(1, 2)), 1.0, atol=1e-6)
    paths = write_attention(dump, img, tmp_path)
    assert len(paths) == 10
    assert (tmp_path / "attention.txt").read_text().count("#") == 10


def test_similarity_matrix(micro_model, tmp_path):
    model, cfg = micro_model
    sim = coordinate_similarity(model, cfg.vocab)
    n = cfg.vocab.n_bins
    assert sim.shape == (n, n)
    assert np.array_equal(sim, sim.T)
    assert np.all(np.diag(sim) == 1.0)
    assert np.all(np.abs(sim) <= 1.0 + 1e-12)
    near, far = near_far_similarity(sim)
    assert -1 <= near <= 1 and -1 <= far <= 1
    txt, png = write_similarity(sim, tmp_path)
    assert np.loadtxt(txt).shape == (n, n) and png.exists()


def test_near_far_on_banded_matrix():
    n = 40
    i, j = np.indices((n, n))
    sim = np.exp(-np.abs(i - j) / 5.0)
    near, far = near_far_similarity(sim)
    assert near > far
    assert near == pytest.approx(np.exp(-1 / 5.0))
