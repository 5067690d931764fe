import numpy as np
import pytest

from provsod import imaging, labels, metrics
from provsod.labels import HIGH_SALIENCY, TRACKED, SpatiotemporalLabel
from provsod.video import VideoClip


def oracle_locator(img):
    """Bright where a pixel differs from the image's dominant colour."""
    img = np.asarray(img, dtype=np.float64)
    dist = np.linalg.norm(img - np.median(img.reshape(-1, 3), axis=0), axis=-1)
    return np.clip(dist / 0.5, 0, 1)


def square_frame(top, left, size=12, shape=(48, 48)):
    img = np.full(shape + (3,), 0.1)
    img[top:top + size, left:left + size] = (0.9, 0.8, 0.2)
    return img


def write_square_clip(root, positions, size=12, shape=(48, 48)):
    """A square moving through ``positions``; adjacent flows in both directions."""
    for sub in ("frames", "flow", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, (t, l) in enumerate(positions):
        imaging.write_rgb(root / "frames" / f"{i:05d}.png", square_frame(t, l, size, shape))
        gt = np.zeros(shape, bool)
        gt[t:t + size, l:l + size] = True
        imaging.write_gray(root / "gt" / f"{i:05d}.png", gt)
    for i in range(len(positions) - 1):
        (t0, l0), (t1, l1) = positions[i], positions[i + 1]
        fwd = np.zeros(shape + (2,), np.float32)
        fwd[t0:t0 + size, l0:l0 + size] = (l1 - l0, t1 - t0)
        bwd = np.zeros(shape + (2,), np.float32)
        bwd[t1:t1 + size, l1:l1 + size] = (l0 - l1, t0 - t1)
        imaging.write_flo(root / "flow" / f"{i:05d}_{i + 1:05d}.flo", fwd)
        imaging.write_flo(root / "flow" / f"{i + 1:05d}_{i:05d}.flo", bwd)
    return VideoClip.open(root)


# ------------------------------------------------------- body-attention target

def test_body_attention_target_of_a_square():
    gt = np.zeros((64, 64), bool)
    gt[24:40, 24:40] = True
    q = labels.body_attention_target(gt)
    assert q.max() == 1.0
    peak = q >= 254.5 / 255
    assert peak.any() and peak[gt].all()
    row = q[32, 32:]
    assert np.all(np.diff(row) <= 0)
    assert q[0, 0] == 0.0


def test_body_attention_target_full_frame_and_empty():
    assert np.array_equal(labels.body_attention_target(np.ones((16, 16), bool)), np.ones((16, 16)))
    with pytest.raises(ValueError):
        labels.body_attention_target(np.zeros((16, 16), bool))


def test_body_attention_target_two_blobs():
    gt = np.zeros((64, 64), bool)
    gt[10:20, 5:15] = True
    gt[10:20, 45:55] = True
    q = labels.body_attention_target(gt)
    cores = imaging.connected_components(q >= 254.5 / 255)
    assert len(cores) == 2
    assert q[15, 30] < 0.01


def test_default_parameters_scale_with_size():
    assert labels.default_dilate_radius((64, 64)) == 5
    assert labels.default_sigma((64, 80)) == pytest.approx(0.64)
    assert labels.default_track_radius((256, 256)) == 2
    assert labels.default_track_radius((64, 64)) == 1


# --------------------------------------------------------------- discriminator

def test_discriminator_examples():
    s = np.zeros((10, 10))
    s[:5] = 1
    rec = labels.discriminate_high_saliency(s, s, 0.7)
    assert rec is not None and rec.iou == 1.0 and rec.label is rec.static
    assert labels.discriminate_high_saliency(s, 1 - s, 0.7) is None
    assert labels.discriminate_high_saliency(np.zeros((4, 4)), np.zeros((4, 4))) is None
    with pytest.raises(ValueError):
        labels.discriminate_high_saliency(s, s, 1.0)


def test_discriminator_straddles_threshold():
    s = np.zeros(100)
    s[:100] = 1
    for inside, accepted in ((69, False), (71, True)):
        g = np.zeros(100)
        g[:inside] = 1
        assert metrics.soft_iou(s, g) == pytest.approx(inside / 100)
        rec = labels.discriminate_high_saliency(s.reshape(10, 10), g.reshape(10, 10), 0.7)
        assert (rec is not None) == accepted


def test_discriminator_is_monotone_in_threshold(rng):
    for _ in range(30):
        s, g = rng.uniform(size=(2, 8, 8)) ** 2
        hits = [labels.discriminate_high_saliency(s, g, t) is not None for t in np.linspace(0.05, 0.95, 19)]
        assert all(a or not b for a, b in zip(hits, hits[1:]))


# --------------------------------------------------------------------- tracking

def test_track_zero_flow_round_trip():
    m0 = oracle_locator(square_frame(18, 18))
    out = labels.track_to_adjacent(m0, np.zeros((48, 48, 2)), square_frame(18, 18), oracle_locator)
    assert metrics.soft_iou(out, m0) >= 0.7


def test_track_constant_shift_moves_centroid():
    frame_n = square_frame(20, 23)
    m0 = oracle_locator(square_frame(16, 18))
    flow = np.zeros((48, 48, 2))
    flow[..., 0], flow[..., 1] = -5.0, -4.0  # frame n -> frame 0 points back to the old place
    out = labels.track_to_adjacent(m0, flow, frame_n, oracle_locator)
    (comp,) = imaging.connected_components(out > 0.5)
    c0 = np.argwhere(m0 > 0.5).mean(axis=0)
    cn = np.argwhere(comp).mean(axis=0)
    assert np.all(np.abs((cn - c0) - (4, 5)) <= 1)


def test_track_off_frame_gives_none():
    m0 = oracle_locator(square_frame(16, 18))
    flow = np.full((48, 48, 2), 200.0)
    assert labels.track_to_adjacent(m0, flow, square_frame(16, 18), oracle_locator) is None


def test_track_combines_overlapping_crops_by_max():
    frame = np.full((48, 48, 3), 0.1)
    frame[10:18, 10:18] = frame[10:18, 22:30] = (0.9, 0.9, 0.9)
    m0 = np.zeros((48, 48))
    m0[10:18, 10:18] = m0[10:18, 22:30] = 1
    out = labels.track_to_adjacent(m0, np.zeros((48, 48, 2)), frame, lambda c: np.full(c.shape[:2], 0.25))
    # each box is re-located on its own crop; the overlap keeps the larger value, not the sum
    assert out.max() == 0.25


# -------------------------------------------------------------------- conflicts

def _lab(prov, source, distance):
    return SpatiotemporalLabel(0, np.zeros((2, 2)), prov, source, distance)


def test_conflict_resolution():
    assert labels.resolve_label_conflicts([_lab(TRACKED, 3, 3), _lab(TRACKED, 1, 1)]).distance == 1
    assert labels.resolve_label_conflicts([_lab(TRACKED, 1, 1), _lab(HIGH_SALIENCY, 0, 0)]).provenance == HIGH_SALIENCY
    assert labels.resolve_label_conflicts([_lab(TRACKED, 14, 2), _lab(TRACKED, 10, 2)]).source == 10
    with pytest.raises(ValueError):
        labels.resolve_label_conflicts([])


def test_label_validation():
    with pytest.raises(ValueError):
        _lab("guessed", 0, 0)
    with pytest.raises(ValueError):
        _lab(TRACKED, 0, 7)


# ------------------------------------------------------------ whole clips

@pytest.fixture
def half_moving_clip(tmp_path):
    # moves for the first six steps, then stands still
    pos = [(4 + 2 * min(i, 6), 6 + 3 * min(i, 6)) for i in range(20)]
    return write_square_clip(tmp_path / "clip", pos)


def test_dynamic_pair_uses_backward_flow_at_the_end(half_moving_clip):
    assert labels.dynamic_pair(half_moving_clip, 0) == (0, 1)
    assert labels.dynamic_pair(half_moving_clip, 19) == (19, 18)


def test_clip_labels_with_oracle_locator(half_moving_clip):
    clip = half_moving_clip
    out, records = labels.build_clip_labels(clip, oracle_locator)
    assert sorted(records) == [0, 1, 2, 3, 4, 5]
    assert sorted(out) == list(range(12))
    for n, lab in out.items():
        assert lab.index == n
        if n in records:
            assert lab.provenance == HIGH_SALIENCY
            assert np.array_equal(lab.location, records[n].static)
        else:
            assert lab.provenance == TRACKED and lab.source == 5 and lab.distance == n - 5
        assert metrics.d_recall(lab.location, clip.gt(n)) >= 0.9


def test_static_clip_yields_no_labels(tmp_path):
    clip = write_square_clip(tmp_path / "still", [(10, 10)] * 12)
    out, records = labels.build_clip_labels(clip, oracle_locator)
    assert records == {} and out == {}


def test_dataset_is_deterministic_and_round_trips(tmp_path, half_moving_clip):
    a = labels.build_location_dataset([half_moving_clip], oracle_locator)
    b = labels.build_location_dataset([half_moving_clip], oracle_locator)
    assert a.keys() == b.keys()
    for n in a["clip"]:
        assert np.array_equal(a["clip"][n].location, b["clip"][n].location)
    labels.write_labels(tmp_path / "labels", "clip", a["clip"])
    header = (tmp_path / "labels" / "clip" / "manifest.tsv").read_text().splitlines()[0]
    assert header == "frame\tprovenance\tsource\tdistance\tiou"
    back = labels.read_labels(tmp_path / "labels", "clip")
    assert sorted(back) == sorted(a["clip"])
    for n, lab in back.items():
        assert lab.provenance == a["clip"][n].provenance and lab.distance == a["clip"][n].distance
        assert np.array_equal(lab.location, imaging.to_uint8(a["clip"][n].location) / 255.0)
