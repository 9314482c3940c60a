import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intentobf.geometry import (
    BoundingBox,
    PixelBox,
    PlacementError,
    box_mask,
    eligible_directions,
    intersection_area,
    iou,
    iou_matrix,
    min_box_distance,
    overlaps,
    place_square_region,
)


def B(*c):
    return BoundingBox(*c)


@st.composite
def boxes(draw, min_size=0.0):
    x = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    y = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    if x[1] - x[0] < min_size or y[1] - y[0] < min_size:
        x, y = [0.2, 0.2 + max(min_size, 0.1)], [0.3, 0.3 + max(min_size, 0.1)]
    return BoundingBox(x[0], y[0], x[1], y[1])


def grid_box(rng, n=64):
    """Box with corners on a 1/n lattice, for exact counting oracles."""
    x0, x1 = sorted(rng.choice(n + 1, 2, replace=False))
    y0, y1 = sorted(rng.choice(n + 1, 2, replace=False))
    return (x0, y0, x1, y1), BoundingBox(x0 / n, y0 / n, x1 / n, y1 / n)


def lattice_iou(a, b, n=64):
    grid = np.zeros((2, n, n), dtype=bool)
    for k, (x0, y0, x1, y1) in enumerate((a, b)):
        grid[k, y0:y1, x0:x1] = True
    inter = np.logical_and(grid[0], grid[1]).sum()
    union = np.logical_or(grid[0], grid[1]).sum()
    return inter / union if union else 0.0


def boundary_points(box, n=512):
    t = np.linspace(0.0, 1.0, n // 4, endpoint=False)
    x0, y0, x1, y1 = box.as_tuple()
    w, h = x1 - x0, y1 - y0
    return np.concatenate(
        [
            np.stack([x0 + t * w, np.full_like(t, y0)], 1),
            np.stack([np.full_like(t, x1), y0 + t * h], 1),
            np.stack([x1 - t * w, np.full_like(t, y1)], 1),
            np.stack([np.full_like(t, x0), y1 - t * h], 1),
        ]
    )


def sampled_distance(a, b, n=512):
    """Point-set oracle; zero when either box contains a sample of the other."""
    pa, pb = boundary_points(a, n), boundary_points(b, n)
    if overlaps(a, b) or intersection_area(a, b) == 0 and _touch(a, b):
        return 0.0
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(d.min())


def _touch(a, b):
    return a.x_min <= b.x_max and b.x_min <= a.x_max and a.y_min <= b.y_max and b.y_min <= a.y_max


class TestIou:
    def test_identity(self):
        assert iou(B(0, 0, 1, 1), B(0, 0, 1, 1)) == 1.0

    def test_touching_edges(self):
        assert iou(B(0, 0, 0.5, 1), B(0.5, 0, 1, 1)) == 0.0

    def test_half(self):
        assert iou(B(0, 0, 1, 1), B(0.5, 0, 1, 1)) == pytest.approx(0.5, abs=1e-15)

    def test_degenerate_is_zero(self):
        d = B(0.3, 0.3, 0.3, 0.6)
        assert iou(d, d) == 0.0
        assert iou(d, B(0, 0, 1, 1)) == 0.0

    def test_lattice_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            pa, a = grid_box(rng)
            pb, b = grid_box(rng)
            assert abs(iou(a, b) - lattice_iou(pa, pb)) < 1e-12

    def test_matrix(self):
        a = [B(0, 0, 1, 1), B(0, 0, 0.5, 1)]
        b = [B(0.5, 0, 1, 1)]
        assert np.allclose(iou_matrix(a, b), [[0.5], [0.0]])

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes(min_size=1e-3), boxes(min_size=1e-3))
    def test_one_only_for_identical(self, a, b):
        if iou(a, b) == 1.0:
            assert a == b

    @given(boxes(min_size=1e-3), boxes(min_size=1e-3))
    def test_overlap_iff_positive_iou(self, a, b):
        assert overlaps(a, b) == (iou(a, b) > 0)


class TestDistance:
    def test_overlapping(self):
        assert min_box_distance(B(0, 0, 0.6, 0.6), B(0.5, 0.5, 1, 1)) == 0.0

    def test_axis_gap(self):
        assert min_box_distance(B(0, 0, 0.2, 0.2), B(0.5, 0, 0.7, 0.2)) == pytest.approx(0.3)

    def test_corner_gap(self):
        assert min_box_distance(B(0, 0, 0.1, 0.1), B(0.4, 0.4, 0.5, 0.5)) == pytest.approx(0.3 * math.sqrt(2))

    def test_touching_is_zero(self):
        assert min_box_distance(B(0, 0, 0.5, 0.5), B(0.5, 0.5, 1, 1)) == 0.0

    @settings(max_examples=60)
    @given(boxes(min_size=0.01), boxes(min_size=0.01))
    def test_boundary_sampling_oracle(self, a, b):
        pitch = 2 * max(a.width + a.height, b.width + b.height) / 512
        assert abs(min_box_distance(a, b) - sampled_distance(a, b)) <= 2 * pitch

    @given(boxes(), boxes())
    def test_symmetric(self, a, b):
        assert min_box_distance(a, b) == min_box_distance(b, a)


class TestOverlaps:
    def test_corner_touch(self):
        assert not overlaps(B(0, 0, 0.5, 0.5), B(0.5, 0.5, 1, 1))

    def test_positive(self):
        assert overlaps(B(0, 0, 0.6, 0.6), B(0.5, 0.5, 1, 1))
        assert intersection_area(B(0, 0, 0.6, 0.6), B(0.5, 0.5, 1, 1)) == pytest.approx(0.01)

    def test_self(self):
        b = B(0.1, 0.2, 0.3, 0.4)
        assert overlaps(b, b)


class TestBoxValidation:
    @pytest.mark.parametrize(
        "coords", [(0.5, 0, 0.4, 1), (0, 0.5, 1, 0.4), (-0.1, 0, 1, 1), (0, 0, 1.1, 1), (0, 0, float("nan"), 1)]
    )
    def test_rejects(self, coords):
        with pytest.raises(ValueError):
            BoundingBox(*coords)

    def test_pixel_box_roundtrip(self):
        pb = PixelBox(10, 20, 40, 60, 100, 200)
        assert pb.to_normalized() == B(0.1, 0.1, 0.4, 0.3)

    def test_masks_of_disjoint_boxes_are_disjoint(self):
        a, b = B(0, 0, 0.5, 1), B(0.5, 0, 1, 1)
        ma, mb = box_mask(a, 48, 48), box_mask(b, 48, 48)
        assert not (ma & mb).any()
        assert (ma | mb).all()


class TestPlacement:
    W = H = 100

    def measure(self, placement, target):
        x0, y0, x1, y1 = (placement.pixels.x0, placement.pixels.y0, placement.pixels.x1, placement.pixels.y1)
        tx0, ty0, tx1, ty1 = (v * self.W for v in target.as_tuple())
        gap = {
            "left": tx0 - x1,
            "right": x0 - tx1,
            "top": ty0 - y1,
            "bottom": y0 - ty1,
        }[placement.direction]
        return x1 - x0, y1 - y0, gap

    def test_centered_target_all_directions(self):
        target = B(0.4, 0.4, 0.6, 0.6)
        assert eligible_directions(target, 0.1, 0.01, self.W, self.H) == ("left", "right", "top", "bottom")
        seen = set()
        for seed in range(40):
            p = place_square_region(target, 0.1, 0.01, self.W, self.H, np.random.default_rng(seed))
            w, h, gap = self.measure(p, target)
            assert w == h
            assert abs(w - 10) <= 1 and abs(gap - 1) <= 1
            # center-aligned on the shared axis
            if p.direction in ("left", "right"):
                assert abs((p.pixels.y0 + p.pixels.y1) / 2 - 50) <= 1
            else:
                assert abs((p.pixels.x0 + p.pixels.x1) / 2 - 50) <= 1
            seen.add(p.direction)
        assert seen == {"left", "right", "top", "bottom"}

    def test_flush_left_excludes_left(self):
        target = B(0.0, 0.4, 0.1, 0.6)
        assert "left" not in eligible_directions(target, 0.7, 0.01, self.W, self.H)

    def test_whole_image_target_fails(self):
        with pytest.raises(PlacementError):
            place_square_region(B(0, 0, 1, 1), 0.1, 0.01, self.W, self.H, np.random.default_rng(0))

    def test_uniform_direction(self):
        target = B(0.4, 0.4, 0.6, 0.6)
        counts = {}
        for seed in range(4000):
            d = place_square_region(target, 0.1, 0.05, self.W, self.H, np.random.default_rng(seed)).direction
            counts[d] = counts.get(d, 0) + 1
        # 4 eligible, so each near 1000; 5 sigma band
        assert all(abs(c - 1000) < 5 * math.sqrt(4000 * 0.25 * 0.75) for c in counts.values())

    @settings(max_examples=200)
    @given(
        boxes(min_size=0.02),
        st.sampled_from([0.1, 0.3, 0.5, 0.7]),
        st.sampled_from([0.01, 0.05, 0.1, 0.2]),
        st.sampled_from([(48, 48), (64, 40), (100, 160)]),
        st.integers(0, 2**32 - 1),
    )
    def test_never_overlaps_and_stays_inside(self, target, side, dist, size, seed):
        w, h = size
        try:
            p = place_square_region(target, side, dist, w, h, np.random.default_rng(seed))
        except PlacementError:
            return
        assert not overlaps(p.box, target)
        assert 0 <= p.pixels.x0 and p.pixels.x1 <= w and 0 <= p.pixels.y0 and p.pixels.y1 <= h
        across = w if p.direction in ("left", "right") else h
        assert abs((p.pixels.x1 - p.pixels.x0) - side * across) <= 1
        assert p.pixels.x1 - p.pixels.x0 == p.pixels.y1 - p.pixels.y0
        tx0, tx1, ty0, ty1 = target.x_min * w, target.x_max * w, target.y_min * h, target.y_max * h
        gap = {
            "left": tx0 - p.pixels.x1,
            "right": p.pixels.x0 - tx1,
            "top": ty0 - p.pixels.y1,
            "bottom": p.pixels.y0 - ty1,
        }[p.direction]
        assert -1e-9 <= gap - dist * across <= 1 + 1e-9
