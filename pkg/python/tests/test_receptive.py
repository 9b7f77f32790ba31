"""Analytic and empirical receptive fields."""

import numpy as np
import pytest

from aseg import ShapeError
from aseg.blocks import ASPP, EASPP, EasppConfig
from aseg.netpbm import load_pgm
from aseg.nn import Conv2d
from aseg.receptive import (
    analytic_receptive_field,
    cascade_receptive_field,
    empirical_receptive_field,
    receptive_field_table,
    save_heatmap,
)


def _ones_conv(rate):
    conv = Conv2d(1, 1, 3, dilation=rate)
    conv.weight.data[:] = 1.0
    return conv


def _extent(heatmap):
    ys, xs = np.nonzero(heatmap)
    return ys.max() - ys.min() + 1, xs.max() - xs.min() + 1


@pytest.mark.unit
@pytest.mark.parametrize("rate,field", [(1, 3), (3, 7), (6, 13), (12, 25)])
def test_analytic_field(rate, field):
    assert analytic_receptive_field(rate, 3) == field


@pytest.mark.unit
@pytest.mark.parametrize("single,cascade", [(7, 13), (13, 25), (25, 49)])
def test_cascade_field(single, cascade):
    assert cascade_receptive_field(single, single) == cascade


@pytest.mark.unit
def test_invalid_fields():
    with pytest.raises(ShapeError):
        analytic_receptive_field(0, 3)
    with pytest.raises(ShapeError):
        cascade_receptive_field(0, 5)


@pytest.mark.unit
def test_tables_for_both_heads():
    cfg = EasppConfig(in_channels=8, branch_channels=8, dilations=[3, 6, 12], dropout=0.0)
    easpp_rows = [r for r in receptive_field_table(EASPP(cfg)) if r.cascade is not None]
    assert [(r.rate, r.field, r.cascade) for r in easpp_rows] == [(3, 7, 13), (6, 13, 25), (12, 25, 49)]
    aspp_rows = receptive_field_table(ASPP(cfg))
    assert sorted(r.field for r in aspp_rows if r.rate > 1) == [7, 13, 25]
    assert all(r.cascade is None for r in aspp_rows)


# ======================================================
# Occlusion sweep
# ======================================================

def _occlusion_map(model, size=32):
    image = np.zeros((1, size, size))
    return empirical_receptive_field(model, image, (size // 2, size // 2), window=1, stride=1,
                                     fill=np.ones(1), batch_size=50)


@pytest.mark.unit
def test_single_conv_extent():
    heatmap = _occlusion_map(_ones_conv(1))
    assert heatmap.shape == (32, 32)
    assert _extent(heatmap) == (3, 3)
    assert np.count_nonzero(heatmap) == 9


@pytest.mark.unit
def test_dilated_conv_extent():
    heatmap = _occlusion_map(_ones_conv(2))
    assert _extent(heatmap) == (5, 5)
    assert np.count_nonzero(heatmap) == 9


@pytest.mark.unit
@pytest.mark.parametrize("rate", [1, 2, 3, 6, 12])
def test_support_lies_within_analytic_span(rate):
    heatmap = _occlusion_map(_ones_conv(rate))
    half = (analytic_receptive_field(rate, 3) - 1) // 2
    ys, xs = np.nonzero(heatmap)
    assert ys.size == 9
    assert np.all(np.abs(ys - 16) <= half) and np.all(np.abs(xs - 16) <= half)
    assert _extent(heatmap) == (2 * half + 1,) * 2


@pytest.mark.unit
def test_cascade_extent():
    first, second = _ones_conv(2), _ones_conv(2)
    heatmap = _occlusion_map(lambda x: second(first(x)))
    assert _extent(heatmap) == (cascade_receptive_field(5, 5),) * 2


@pytest.mark.unit
def test_occlusion_rejects_bad_input():
    conv = _ones_conv(1)
    with pytest.raises(ShapeError):
        empirical_receptive_field(conv, np.zeros((5, 5)), (1, 1))
    with pytest.raises(ShapeError):
        empirical_receptive_field(conv, np.zeros((1, 5, 5)), (9, 9))


@pytest.mark.unit
def test_save_heatmap(tmp_path):
    path = str(tmp_path / "rf_map.pgm")
    lo, hi = save_heatmap(np.array([[0.0, 1.0], [2.0, 4.0]]), path)
    assert (lo, hi) == (0.0, 4.0)
    assert load_pgm(path).tolist() == [[0, 64], [128, 255]]
    assert (tmp_path / "rf_map.pgm.txt").read_text() == "min=0.0\nmax=4.0\n"
    with pytest.raises(FileExistsError):
        save_heatmap(np.zeros((2, 2)), path)
