import numpy as np
import pytest
from scipy import ndimage

from motionpose.flow import (FlowBlock, FlowField, FlowFormatError, estimate_flow, flow_hue, flow_to_color,
                             hflip_flow, read_flo1, reverse_flow_block, to_gray, write_flo1)


def texture(seed=0, size=140):
    r = np.random.default_rng(seed)
    big = ndimage.gaussian_filter(r.random((size, size)), 1.5)
    return (big - big.min()) / (big.max() - big.min())


def shifted_pair(dx, dy, seed=0):
    """frame_b[y + dy, x + dx] == frame_a[y, x] on a 96x96 window."""
    big = texture(seed)
    a = big[20:116, 20:116]
    b = big[20 - dy:116 - dy, 20 - dx:116 - dx]
    return a, b


def block_match(a, b, radius=4, half=4, step=6):
    """Exhaustive integer SSD block matching on a grid of interior points."""
    h, w = a.shape
    m = radius + half
    us, vs = [], []
    for y in range(m, h - m, step):
        for x in range(m, w - m, step):
            ref = a[y - half:y + half + 1, x - half:x + half + 1]
            best, arg = np.inf, (0, 0)
            for dv in range(-radius, radius + 1):
                for du in range(-radius, radius + 1):
                    cand = b[y + dv - half:y + dv + half + 1, x + du - half:x + du + half + 1]
                    d = np.sum((cand - ref) ** 2)
                    if d < best:
                        best, arg = d, (du, dv)
            us.append(arg[0])
            vs.append(arg[1])
    return np.array(us, float), np.array(vs, float)


def interior(f, margin):
    return f.u[margin:-margin, margin:-margin], f.v[margin:-margin, margin:-margin]


def test_identical_frames_give_zero_flow():
    a = texture(3)[:96, :96]
    for levels in (1, 2, 3):
        f = estimate_flow(a, a, pyramid_levels=levels)
        assert np.abs(f.u).max() < 1e-3 and np.abs(f.v).max() < 1e-3


@pytest.mark.parametrize("dx,dy", [(2, 0), (0, 1), (-3, 3), (1, -2)])
def test_translation_agrees_with_block_matching(dx, dy):
    a, b = shifted_pair(dx, dy)
    bu, bv = block_match(a, b)
    # the oracle itself recovers the integer shift
    assert np.median(bu) == dx and np.median(bv) == dy
    f = estimate_flow(a, b)
    u, v = interior(f, max(2 * max(abs(dx), abs(dy)), 1))
    assert abs(u.mean() - bu.mean()) < 0.4
    assert abs(v.mean() - bv.mean()) < 0.4
    assert np.hypot(u - dx, v - dy).mean() < 0.5


def test_right_and_down_shift_ranges():
    f = estimate_flow(*shifted_pair(2, 0))
    u, v = interior(f, 4)
    assert 1.6 <= u.mean() <= 2.4 and abs(v.mean()) < 0.3
    f = estimate_flow(*shifted_pair(0, 1))
    u, v = interior(f, 2)
    assert 0.7 <= v.mean() <= 1.3


def test_flip_equivariance():
    a, b = shifted_pair(2, -1, seed=4)
    f = estimate_flow(a, b)
    g = hflip_flow(estimate_flow(a[:, ::-1], b[:, ::-1]))
    assert max(np.abs(g.u - f.u).max(), np.abs(g.v - f.v).max()) < 0.2


def test_reverse_matches_backward_flow():
    a, b = shifted_pair(1, 2, seed=6)
    fwd = FlowBlock([estimate_flow(a, b)])
    bwd = estimate_flow(b, a)
    rev = reverse_flow_block(fwd).fields[0]
    u1, v1 = interior(rev, 4)
    u2, v2 = interior(bwd, 4)
    assert np.mean(np.abs(u1 - u2)) < 0.3 and np.mean(np.abs(v1 - v2)) < 0.3


def test_deterministic():
    a, b = shifted_pair(1, 1)
    f, g = estimate_flow(a, b), estimate_flow(a, b)
    assert np.array_equal(f.u, g.u) and np.array_equal(f.v, g.v)


def test_errors():
    a = np.zeros((10, 10))
    with pytest.raises(ValueError):
        estimate_flow(a, np.zeros((10, 11)))
    with pytest.raises(ValueError):
        estimate_flow(a, a, iterations=0)


def test_hflip_rules(rng):
    f = FlowField(rng.standard_normal((5, 7)), rng.standard_normal((5, 7)))
    g = hflip_flow(hflip_flow(f))
    assert np.array_equal(g.u, f.u) and np.array_equal(g.v, f.v)
    h = hflip_flow(f)
    np.testing.assert_array_equal(h.u[:, 0], -f.u[:, -1])
    np.testing.assert_array_equal(h.v[:, 0], f.v[:, -1])
    one = hflip_flow(FlowField(np.ones((3, 3)), np.zeros((3, 3))))
    assert np.all(one.u == -1) and np.all(one.v == 0)


def test_reverse_rules(rng):
    blk = FlowBlock([FlowField(rng.standard_normal((4, 4)), rng.standard_normal((4, 4))) for _ in range(3)])
    twice = reverse_flow_block(reverse_flow_block(blk))
    np.testing.assert_array_equal(twice.to_channels(), blk.to_channels())
    uni = reverse_flow_block(FlowBlock([FlowField(np.ones((2, 2)), np.zeros((2, 2)))] * 4))
    assert uni.delta == 4
    assert all(np.all(f.u == -1) and np.all(f.v == 0) for f in uni.fields)


def test_channel_order_is_interleaved(rng):
    fields = [FlowField(np.full((2, 2), i), np.full((2, 2), 10 + i)) for i in range(3)]
    ch = FlowBlock(fields).to_channels()
    assert [ch[c, 0, 0] for c in range(6)] == [0, 10, 1, 11, 2, 12]
    back = FlowBlock.from_channels(ch)
    np.testing.assert_array_equal(back.to_channels(), ch)


def test_color_coding():
    z = FlowField(np.zeros((3, 3)), np.zeros((3, 3)))
    assert np.all(flow_to_color(z, 1.0) == 255)
    uni = flow_to_color(FlowField(np.full((3, 3), 2.0), np.zeros((3, 3))), 2.0)
    assert len({tuple(p) for p in uni.reshape(-1, 3)}) == 1
    f = FlowField(np.array([[1.0, -0.5]]), np.array([[0.3, 2.0]]))
    h1 = flow_hue(flow_to_color(f, 1.0))
    h2 = flow_hue(flow_to_color(FlowField(-f.u, -f.v), 1.0))
    d = np.abs(np.mod(h2 - h1, 1.0) - 0.5)
    assert np.all(d < 0.01)
    with pytest.raises(ValueError):
        flow_to_color(z, 0.0)


def test_gray_conversion():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 1] = 1.0
    np.testing.assert_allclose(to_gray(rgb), 0.587)


def test_flo1_round_trip_and_corruption(tmp_path, rng):
    f = FlowField(rng.standard_normal((6, 5)), rng.standard_normal((6, 5)))
    p = tmp_path / "a.flo1"
    write_flo1(p, f)
    raw = p.read_bytes()
    assert raw[:4] == b"FLO1" and len(raw) == 12 + 8 * 30
    g = read_flo1(p)
    assert np.array_equal(g.u, f.u) and np.array_equal(g.v, f.v)
    p.write_bytes(raw[:-4])
    with pytest.raises(FlowFormatError):
        read_flo1(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FlowFormatError):
        read_flo1(p)
