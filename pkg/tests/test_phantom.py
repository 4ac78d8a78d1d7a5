import numpy as np
import pytest

from sonostate.errors import InvalidArgument
from sonostate.phantom import deform, make_phantom, outline, participant_labels, render_frame


@pytest.fixture(scope="module")
def ph():
    return make_phantom(4)


def test_render_deterministic(ph):
    a = render_frame(ph, 0.0, 0.0)
    b = render_frame(ph, 0.0, 0.0)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (480, 640) and a.min() >= 0 and a.max() <= 255
    assert render_frame(make_phantom(4), 0.0, 0.0).tobytes() == a.tobytes()


def test_zero_inputs_identity(ph):
    assert np.max(np.abs(deform(ph, ph.points, 0.0, 0.0) - ph.points)) == 0


@pytest.mark.parametrize("other", [((0.3, 0.0), 0.0), ((0.0, 0.0), 4.0), ((0.0, 0.3), 0.0)])
def test_single_input_change_alters_image(ph, other):
    base = render_frame(ph, 0.0, 0.0)
    img = render_frame(ph, *other)
    # speckle-only noise floor: same state rendered from a different texture seed
    floor = np.mean(np.abs(render_frame(make_phantom(4), 0.0, 0.0) - base))
    assert np.mean(np.abs(img - base)) > floor + 1.0


def test_mean_intensity_continuous(ph):
    m0 = render_frame(ph, 0.4, 2.0).mean()
    diffs = [abs(render_frame(ph, 0.4 + d, 2.0 + d).mean() - m0) for d in (1e-1, 1e-2, 1e-3)]
    assert diffs[2] < diffs[0] and diffs[2] < 0.01


def test_deformation_c1_and_invertible(ph):
    # finite-difference Jacobian along a vertical line crossing all bands
    ys = np.linspace(20, 460, 2000)
    pts = np.column_stack([np.full_like(ys, 320.0), ys])
    h = 1e-3
    for act, ang in [((1.0, 1.0), 15.0), ((0.5, 0.0), -15.0)]:
        jx = (deform(ph, pts + [h, 0], act, ang) - deform(ph, pts - [h, 0], act, ang)) / (2 * h)
        jy = (deform(ph, pts + [0, h], act, ang) - deform(ph, pts - [0, h], act, ang)) / (2 * h)
        det = jx[:, 0] * jy[:, 1] - jx[:, 1] * jy[:, 0]
        assert det.min() > 0
        # continuous derivative: no jumps between neighbouring samples
        assert np.max(np.abs(np.diff(jy, axis=0))) < 0.01


@pytest.mark.parametrize("act,ang", [(-0.1, 0.0), (1.2, 0.0), ((0.5, 1.5), 0.0), (0.0, 25.0)])
def test_out_of_range_inputs(ph, act, ang):
    with pytest.raises(InvalidArgument):
        render_frame(ph, act, ang)


def test_participants_distinct():
    phs = [make_phantom(s) for s in range(8)]
    vecs = [np.concatenate([[p.tilt], p.apo, list(p.gains.values())]) for p in phs]
    for i in range(8):
        for j in range(i + 1, 8):
            assert np.linalg.norm(vecs[i] - vecs[j]) > 0
    labs = [participant_labels(s) for s in range(8)]
    assert len({c.neutral_angle for c in labs}) == 8


def test_outline_tracks_deformation(ph):
    rest = outline(ph, "gm")
    assert rest.shape == (80, 2)
    moved = outline(ph, "gm", (1.0, 0.0), 0.0)
    # activity thickens GM, so its lower boundary moves down
    assert moved[60:, 1].mean() > rest[60:, 1].mean() + 5
