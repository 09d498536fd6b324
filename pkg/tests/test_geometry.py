import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from structvis.geometry import (
    Detection,
    FrameRef,
    NormBox,
    PixelBox,
    QuantBox,
    dequantize,
    iou,
    normalize,
    quantize,
    round_half_up,
)

coord = st.floats(min_value=0, max_value=2000, allow_nan=False, allow_infinity=False)


@st.composite
def pixel_boxes(draw):
    x1, x2 = sorted((draw(coord), draw(coord)))
    y1, y2 = sorted((draw(coord), draw(coord)))
    return PixelBox(x1, y1, x2, y2)


unit = st.floats(min_value=0, max_value=1, allow_nan=False)


@st.composite
def norm_boxes(draw):
    x1, x2 = sorted((draw(unit), draw(unit)))
    y1, y2 = sorted((draw(unit), draw(unit)))
    return NormBox(x1, y1, x2, y2)


class TestIou:
    def test_identical(self):
        assert iou(PixelBox(0, 0, 2, 2), PixelBox(0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert iou(PixelBox(0, 0, 1, 1), PixelBox(5, 5, 6, 6)) == 0.0

    def test_partial_overlap(self):
        # intersection 1, union 4 + 4 - 1
        assert iou(PixelBox(0, 0, 2, 2), PixelBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)

    def test_degenerate_pair_is_zero(self):
        assert iou(PixelBox(1, 1, 1, 1), PixelBox(1, 1, 1, 1)) == 0.0

    def test_touching_edges(self):
        assert iou(PixelBox(0, 0, 1, 1), PixelBox(1, 0, 2, 1)) == 0.0

    @given(pixel_boxes(), pixel_boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(pixel_boxes(), pixel_boxes())
    def test_matches_polygon_oracle(self, a, b):
        assert iou(a, b) == pytest.approx(oracles.iou(tuple(a), tuple(b)), abs=1e-9)


class TestBoxTypes:
    @pytest.mark.parametrize(
        "coords",
        [(2, 0, 1, 1), (0, 2, 1, 1), (-1, 0, 1, 1), (0, 0, math.inf, 1), (0, 0, math.nan, 1)],
    )
    def test_pixel_box_rejects(self, coords):
        with pytest.raises(ValueError):
            PixelBox(*coords)

    def test_norm_box_range(self):
        with pytest.raises(ValueError):
            NormBox(0, 0, 1.01, 1)

    def test_quant_box_ints(self):
        with pytest.raises(ValueError):
            QuantBox(0, 0, 1.5, 2)
        assert str(QuantBox(8, 0, 54, 93)) == "[8 0 54 93]"

    def test_detector_overshoot_clipped(self):
        assert PixelBox.from_detector([-0.5, -2, 10, 12]) == PixelBox(0, 0, 10, 12)

    def test_detection_checks(self):
        with pytest.raises(ValueError):
            Detection("", PixelBox(0, 0, 1, 1), 0.5)
        with pytest.raises(ValueError):
            Detection("cup", PixelBox(0, 0, 1, 1), 1.5)

    def test_frame_ref(self):
        assert FrameRef(3) < FrameRef(10)
        with pytest.raises(ValueError):
            FrameRef(-1)


class TestNormalize:
    def test_full_frame(self):
        assert normalize(PixelBox(0, 0, 640, 480), 640, 480) == NormBox(0, 0, 1, 1)

    def test_point_box(self):
        assert normalize(PixelBox(50, 0, 50, 0), 100, 100) == NormBox(0.5, 0, 0.5, 0)

    def test_division(self):
        assert normalize(PixelBox(80, 0, 540, 930), 1000, 1000) == NormBox(0.08, 0, 0.54, 0.93)

    def test_clamps_overshoot(self):
        assert normalize(PixelBox(10, 10, 120, 130), 100, 100) == NormBox(0.1, 0.1, 1.0, 1.0)

    @pytest.mark.parametrize("w,h", [(0, 10), (10, 0), (-5, 10)])
    def test_bad_frame(self, w, h):
        with pytest.raises(ValueError):
            normalize(PixelBox(0, 0, 1, 1), w, h)


class TestQuantize:
    def test_endpoints(self):
        assert quantize(NormBox(0, 0, 1, 1), 100) == QuantBox(0, 0, 100, 100)

    def test_bag_example(self):
        assert quantize(NormBox(0.08, 0, 0.54, 0.93), 100) == QuantBox(8, 0, 54, 93)

    def test_half_up(self):
        # 0.5 -> 1, 0.4 -> 0, 99.5 -> 100, 99.6 -> 100
        assert quantize(NormBox(0.005, 0.004, 0.995, 0.996), 100) == QuantBox(1, 0, 100, 100)

    def test_decimal_ties(self):
        # 0.285 * 100 is 28.499999999999996 in binary floating point
        assert quantize(NormBox(0.145, 0.285, 0.575, 0.575), 100) == QuantBox(15, 29, 58, 58)

    def test_round_half_up_helper(self):
        assert [round_half_up(v) for v in (0.5, 1.5, 2.5, 2.4999, 541.9999999)] == [1, 2, 3, 2, 542]

    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            quantize(NormBox(0, 0, 1, 1), 0)

    @given(norm_boxes(), st.integers(min_value=1, max_value=1000))
    def test_matches_fraction_oracle(self, n, scale):
        assert tuple(quantize(n, scale)) == oracles.quantize(tuple(n), scale)

    @given(norm_boxes(), st.integers(min_value=1, max_value=1000))
    def test_order_preserved(self, n, scale):
        q = quantize(n, scale)
        assert q.x1 <= q.x2 and q.y1 <= q.y2
        assert max(q) <= scale

    @given(pixel_boxes(), st.integers(min_value=1, max_value=50))
    def test_isotropic_scaling_commutes(self, b, factor):
        w, h = 2000.0, 2000.0
        scaled = PixelBox(*(c * factor for c in b))
        assert quantize(normalize(b, w, h)) == quantize(normalize(scaled, w * factor, h * factor))


class TestDequantize:
    def test_exact(self):
        assert dequantize(QuantBox(0, 0, 100, 100), 100) == NormBox(0, 0, 1, 1)
        assert dequantize(QuantBox(8, 0, 54, 93), 100) == NormBox(0.08, 0, 0.54, 0.93)

    def test_over_scale(self):
        with pytest.raises(ValueError):
            dequantize(QuantBox(0, 0, 101, 5), 100)

    def test_round_trip_grid(self):
        for i in range(1001):
            c = i / 1000
            back = dequantize(quantize(NormBox(c, c, c, c), 100), 100)
            assert abs(back.x1 - c) <= 0.005 + 1e-12
