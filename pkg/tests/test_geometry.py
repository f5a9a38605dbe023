import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asnet.geometry import area, giou, hull, interaction_vector, iou, to_cxcywh, to_xyxy

unit = st.floats(0, 1)


@st.composite
def xyxy(draw):
    x0, x1 = sorted([draw(unit), draw(unit)])
    y0, y1 = sorted([draw(unit), draw(unit)])
    return (x0, y0, x1, y1)


def test_to_xyxy_examples():
    assert to_xyxy((0.5, 0.5, 1, 1)) == (0, 0, 1, 1)
    assert to_xyxy((0.5, 0.5, 0, 0)) == (0.5, 0.5, 0.5, 0.5)
    assert np.allclose(to_xyxy((0.3, 0.4, 0.2, 0.2)), (0.2, 0.3, 0.4, 0.5))


@given(unit, unit, unit, unit)
def test_round_trip(cx, cy, w, h):
    assert np.allclose(to_cxcywh(to_xyxy((cx, cy, w, h))), (cx, cy, w, h), atol=1e-12)


def test_iou_examples():
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_degenerate_iou_is_zero():
    assert iou((0.5, 0.5, 0.5, 0.5), (0.5, 0.5, 0.5, 0.5)) == 0
    assert iou((0.2, 0.2, 0.2, 0.6), (0, 0, 1, 1)) == 0


def test_giou_examples():
    assert giou((0, 0, 1, 1), (0, 0, 1, 1)) == 1
    assert giou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7 - 2 / 9, abs=1e-15)
    assert giou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(-0.079365, abs=1e-6)


@given(xyxy(), xyxy())
def test_symmetry_and_bounds(a, b):
    assert iou(a, b) == iou(b, a)
    assert giou(a, b) == giou(b, a)
    assert 0 <= iou(a, b) <= 1
    assert -1 <= giou(a, b) <= iou(a, b) + 1e-15
    if area(a) > 0 and area(b) > 0:
        assert giou(a, b) > -1


def test_giou_reaches_minus_one_only_for_degenerate_boxes():
    # two points at opposite corners of their hull
    assert giou((0, 0, 0, 0), (1, 1, 1, 1)) == -1
    assert giou((0, 0, 0.01, 0.01), (0.99, 0.99, 1, 1)) > -1


def test_giou_equals_iou_when_hull_is_union():
    # nested boxes: hull == outer box == union
    a, b = (0.1, 0.1, 0.9, 0.9), (0.3, 0.3, 0.5, 0.5)
    assert hull(a, b) == a
    assert giou(a, b) == iou(a, b)


def test_interaction_vector():
    v = interaction_vector((0.2, 0.3, 0.1, 0.4), (0.6, 0.8, 0.3, 0.2))
    assert v == (0.2, 0.3, 0.6, 0.8)
    same = (0.4, 0.4, 0.2, 0.2)
    v = interaction_vector(same, same)
    assert (v.xh, v.yh) == (v.xo, v.yo)
    assert interaction_vector((0.2, 0.3, 0.9, 0.9), (0.6, 0.8, 0.0, 0.0)) == (0.2, 0.3, 0.6, 0.8)
