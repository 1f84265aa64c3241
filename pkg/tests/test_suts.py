import sys

import numpy as np
import pytest

from viewmt.imqual import ImageBuffer
from viewmt.suts import (Classification, ConstantSut, EmptyClass, EmptyModel, ExternalSut, HarrisSut, HistModel,
                         HistSut, InterestPoints, SutCrashed, SutDescriptor, SutTimeout, TooSmall, echo_stub_command,
                         harris_detect, harris_response, hist_classify, hist_feature, run_sut, softmax, sort_points,
                         train_hist_classifier)


def gray(a):
    a = np.asarray(a, dtype=float)
    return ImageBuffer(np.repeat(a[:, :, None], 3, axis=2))


def checkerboard(h=64, w=64, cell=8):
    y, x = np.mgrid[0:h, 0:w]
    return ((x // cell + y // cell) % 2).astype(float)


# --------------------------------------------------------------------------
# Harris

def brute_response(luma, sigma=1.5, k=0.04):
    """Harris response with explicit loops and edge replication."""
    h, w = luma.shape
    p = np.pad(luma, 1, mode="edge")
    ix = np.zeros_like(luma)
    iy = np.zeros_like(luma)
    for y in range(h):
        for x in range(w):
            win = p[y:y + 3, x:x + 3]
            ix[y, x] = (win[:, 2] - win[:, 0]) @ [1, 2, 1]
            iy[y, x] = (win[2, :] - win[0, :]) @ [1, 2, 1]
    r = int(4.0 * sigma + 0.5)
    g = np.exp(-np.arange(-r, r + 1) ** 2 / (2 * sigma ** 2))
    g /= g.sum()

    def blur(a):
        out = np.zeros_like(a)
        q = np.pad(a, r, mode="edge")
        for y in range(h):
            for x in range(w):
                out[y, x] = g @ q[y:y + 2 * r + 1, x:x + 2 * r + 1] @ g
        return out

    sxx, syy, sxy = blur(ix * ix), blur(iy * iy), blur(ix * iy)
    return sxx * syy - sxy ** 2 - k * (sxx + syy) ** 2


def test_response_matches_brute_force(rng):
    luma = rng.uniform(0, 1, (14, 17))
    assert np.allclose(harris_response(luma), brute_response(luma), atol=1e-12)


def test_single_bright_pixel():
    a = np.zeros((48, 40))
    a[30, 20] = 1.0
    pts = harris_detect(gray(a), 100).points
    resp = brute_response(a)
    by, bx = np.unravel_index(np.argmax(resp), resp.shape)
    assert abs(pts[0, 0] - 20) <= 1 and abs(pts[0, 1] - 30) <= 1
    assert (pts[0, 0], pts[0, 1]) == (bx, by)


def test_constant_image_has_no_points():
    assert len(harris_detect(gray(np.full((32, 32), 0.7)))) == 0


def test_checkerboard_corners():
    pts = harris_detect(gray(checkerboard()), 20).points
    assert len(pts) == 20
    # inner corners sit between pixels 8k - 1 and 8k
    lattice = np.arange(8, 64, 8) - 0.5
    for x, y, _ in pts:
        assert np.min(np.abs(lattice - x)) <= 1.0
        assert np.min(np.abs(lattice - y)) <= 1.0


def test_detector_translation_equivariance(rng):
    from scipy import ndimage

    base = ndimage.gaussian_filter(rng.uniform(0, 1, (90, 110)), 2.0)
    base = (base - base.min()) / (base.max() - base.min())
    dx, dy = 5, 3
    a = base[10:70, 10:90]
    b = base[10 - dy:70 - dy, 10 - dx:90 - dx]
    pa = harris_detect(gray(a), 20).points
    pb = harris_detect(gray(b), 100).points
    hits = 0
    for x, y, _ in pa:
        d = np.hypot(pb[:, 0] - (x + dx), pb[:, 1] - (y + dy))
        hits += d.min() <= 1.0
    assert hits >= 0.8 * len(pa)


def test_points_sorted_with_tie_rule():
    pts = sort_points([[5, 5, 1.0], [1, 9, 2.0], [3, 2, 1.0], [1, 2, 1.0]])
    assert pts.tolist() == [[1, 9, 2.0], [1, 2, 1.0], [3, 2, 1.0], [5, 5, 1.0]]


def test_harris_too_small():
    with pytest.raises(TooSmall):
        harris_detect(gray(np.zeros((6, 40))))


def test_reference_suts_deterministic(rng):
    im = ImageBuffer(rng.uniform(0, 1, (30, 40, 3)))
    h = HarrisSut()
    assert run_sut(h, im) == run_sut(h, im)
    assert len(run_sut(HarrisSut(max_points=5), im)) <= 5


# --------------------------------------------------------------------------
# histogram classifier

def solid(rgb, shape=(12, 12)):
    return ImageBuffer(np.broadcast_to(np.asarray(rgb, float), shape + (3,)).copy())


def test_hist_feature_normalized(rng):
    f = hist_feature(ImageBuffer(rng.uniform(0, 1, (9, 11, 3))))
    assert f.shape == (24,)
    assert np.allclose(f.reshape(3, 8).sum(1), 1.0)


def test_prototype_of_single_image():
    im = solid([0.1, 0.5, 0.9])
    m = train_hist_classifier({"a": [im], "b": [solid([0.9, 0.9, 0.1])]})
    assert np.array_equal(m.prototypes[0], hist_feature(im))
    assert int(np.argmax(hist_classify(im, m).probs)) == 0


def test_duplicates_do_not_move_prototype(rng):
    ims = [ImageBuffer(rng.uniform(0, 1, (8, 8, 3))) for _ in range(3)]
    a = train_hist_classifier({"x": ims})
    b = train_hist_classifier({"x": ims + ims})
    assert np.allclose(a.prototypes, b.prototypes, atol=1e-15)


def test_identical_prototypes_split_evenly():
    m = HistModel(["a", "b"], np.tile(hist_feature(solid([0.2, 0.2, 0.2])), (2, 1)))
    assert np.allclose(hist_classify(solid([0.7, 0.1, 0.3]), m).probs, [0.5, 0.5])


def test_softmax_limit():
    assert np.allclose(softmax(-np.array([0.0, 1000.0]) / 0.05), [1.0, 0.0])


def test_disjoint_color_classes(rng):
    def sample(base):
        return ImageBuffer(np.clip(base + rng.normal(0, 0.05, (16, 16, 3)), 0, 1))

    red, blue = np.array([0.8, 0.1, 0.1]), np.array([0.1, 0.2, 0.8])
    m = train_hist_classifier({"blue": [sample(blue) for _ in range(5)], "red": [sample(red) for _ in range(5)]})
    correct = sum(int(np.argmax(hist_classify(sample(red), m).probs)) == 1 for _ in range(20))
    correct += sum(int(np.argmax(hist_classify(sample(blue), m).probs)) == 0 for _ in range(20))
    assert correct >= 38


def test_probs_sum_to_one(rng):
    m = train_hist_classifier({"a": [solid([0.2, 0.3, 0.4])], "b": [solid([0.9, 0.1, 0.5])],
                               "c": [solid([0.0, 0.0, 0.0])]})
    for _ in range(10):
        p = hist_classify(ImageBuffer(rng.uniform(0, 1, (10, 10, 3))), m).probs
        assert abs(p.sum() - 1.0) < 1e-6


def test_classifier_errors():
    with pytest.raises(EmptyModel):
        train_hist_classifier({})
    with pytest.raises(EmptyClass):
        train_hist_classifier({"a": []})
    with pytest.raises(EmptyModel):
        hist_classify(solid([0, 0, 0]), None)


def test_model_dict_roundtrip():
    m = train_hist_classifier({"a": [solid([0.2, 0.3, 0.4])], "b": [solid([0.9, 0.1, 0.5])]})
    back = HistModel.from_dict(m.to_dict())
    assert back.labels == m.labels and np.array_equal(back.prototypes, m.prototypes)


# --------------------------------------------------------------------------
# output types and wrappers

def test_classification_validation():
    with pytest.raises(SutCrashed):
        Classification(np.array([0.5, 0.6]))
    with pytest.raises(SutCrashed):
        Classification(np.array([-0.1, 1.1]))


def test_descriptor_validation():
    with pytest.raises(ValueError):
        SutDescriptor("x", "segment")


def test_run_sut_sorts_and_truncates():
    pts = InterestPoints(np.array([[1, 1, 0.1], [2, 2, 0.9], [3, 3, 0.5]]))
    out = run_sut(ConstantSut(pts, "c"), solid([0, 0, 0]))
    assert out.points[:, 2].tolist() == [0.9, 0.5, 0.1]
    sut = ConstantSut(pts, "c")
    sut.descriptor = SutDescriptor("c", "detect", 2)
    assert len(run_sut(sut, solid([0, 0, 0]))) == 2


# --------------------------------------------------------------------------
# external protocol

def test_echo_stub_classify():
    with ExternalSut("echo", echo_stub_command(3), "classify") as sut:
        out = run_sut(sut, solid([0.5, 0.5, 0.5]))
    assert np.allclose(out.probs, [1 / 3, 1 / 3, 1 / 3])


def test_echo_stub_fifty_round_trips(rng):
    with ExternalSut("echo", echo_stub_command(), "detect") as sut:
        for _ in range(50):
            out = run_sut(sut, ImageBuffer(rng.uniform(0, 1, (20, 24, 3))))
            assert len(out) == 9


def test_malformed_reply_then_recovery():
    with ExternalSut("bad", echo_stub_command(bad_id=1), "classify") as sut:
        run_sut(sut, solid([0, 0, 0]))
        with pytest.raises(SutCrashed):
            run_sut(sut, solid([0, 0, 0]))
        # the process is restarted and ids keep increasing
        assert np.allclose(run_sut(sut, solid([0, 0, 0])).probs, 1 / 3)


def test_crashing_child():
    with ExternalSut("dead", [sys.executable, "-c", "import sys; sys.exit(1)"], "classify") as sut:
        with pytest.raises(SutCrashed):
            run_sut(sut, solid([0, 0, 0]))


def test_silent_child_times_out():
    cmd = [sys.executable, "-c", "import time; time.sleep(30)"]
    with ExternalSut("slow", cmd, "classify", timeout=0.5) as sut:
        with pytest.raises(SutTimeout):
            run_sut(sut, solid([0, 0, 0]))


def test_out_of_image_points_rejected(tmp_path):
    script = tmp_path / "far.py"
    script.write_text("import json, sys\n"
                      "for line in sys.stdin:\n"
                      "    r = json.loads(line)\n"
                      "    print(json.dumps({'id': r['id'], 'points': [[1e6, 0, 1]]}), flush=True)\n")
    with ExternalSut("far", [sys.executable, str(script)], "detect") as sut:
        with pytest.raises(SutCrashed):
            run_sut(sut, solid([0, 0, 0]))
