"""Raster I/O, patch sampling, and the file-backed provider."""

import numpy as np
import pytest

from dslam.errors import (
    NoStaticRegion,
    ProviderLookupError,
    RasterFormatError,
)
from dslam.provider import (
    FileProvider,
    PriorFrameData,
    as_request,
    eligible_pixels,
    parse_flow_file,
    patch_id_base,
    read_raster,
    read_scales_file,
    sample_static_patches,
    sampling_rng,
    write_raster,
    write_scales_file,
)


def test_raster_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.uniform(0.1, 9.0, (12, 17)).astype(np.float32)
    path = tmp_path / "d.dpr"
    write_raster(path, data, "depth")
    back, kind = read_raster(path)
    assert kind == "depth"
    assert back.dtype == np.float32
    assert np.array_equal(back, data)


def test_raster_kind_check(tmp_path):
    path = tmp_path / "m.prb"
    write_raster(path, np.zeros((4, 4), np.float32), "prob")
    with pytest.raises(RasterFormatError):
        read_raster(path, "depth")


def test_raster_truncation(tmp_path):
    path = tmp_path / "d.dpr"
    write_raster(path, np.ones((6, 6), np.float32), "depth")
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(RasterFormatError):
        read_raster(path)
    bad = tmp_path / "bad.dpr"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(RasterFormatError):
        read_raster(bad)


def test_scales_file_round_trip(tmp_path):
    scales = [1.0, 0.3333333333333333, 2.718281828459045]
    path = tmp_path / "scales.txt"
    write_scales_file(path, scales)
    table = read_scales_file(path)
    assert table == {0: scales[0], 1: scales[1], 2: scales[2]}


def test_flow_file_parse(tmp_path):
    path = tmp_path / "0_1.txt"
    path.write_text("7 1.5 2.25 1\n9 nan nan 0\n")
    table = parse_flow_file(path)
    assert table[7] == (1.5, 2.25, True)
    assert table[9][2] is False
    assert np.isnan(table[9][0])


def make_prior(h=32, w=40, frame_id=0):
    depth = np.full((h, w), 2.0, np.float32)
    conf = np.ones((h, w), np.float32)
    motion = np.zeros((h, w), np.float32)
    return PriorFrameData(frame_id=frame_id, depth=depth, confidence=conf,
                          motion_prob=motion, batch_id=0)


def test_eligible_pixels_border_and_mask():
    prior = make_prior()
    prior.depth[5, 20] = 0.0
    prior.motion_prob[10, 20] = 0.7
    mask = eligible_pixels(prior, s_d=0.5, border_px=4)
    assert not mask[:4].any() and not mask[-4:].any()
    assert not mask[:, :4].any() and not mask[:, -4:].any()
    assert not mask[5, 20]
    assert not mask[10, 20]
    assert mask[12, 20]
    # Threshold is strict: motion exactly at s_d is excluded.
    prior.motion_prob[12, 20] = 0.5
    assert not eligible_pixels(prior, s_d=0.5, border_px=4)[12, 20]
    # Unmasked mode ignores the motion raster entirely.
    assert eligible_pixels(prior, s_d=None, border_px=4)[10, 20]


def test_sampling_is_reproducible():
    prior = make_prior()
    a = sample_static_patches(prior, 0.5, 20, sampling_rng(3, 0), id_start=40)
    b = sample_static_patches(prior, 0.5, 20, sampling_rng(3, 0), id_start=40)
    assert [(p.u, p.v, p.patch_id) for p in a] == \
           [(p.u, p.v, p.patch_id) for p in b]
    assert [p.patch_id for p in a] == list(range(40, 60))
    # Raster-position order: row-major increasing.
    keys = [(p.v, p.u) for p in a]
    assert keys == sorted(keys)
    assert all(p.inv_depth == p.prior_inv_depth == 0.5 for p in a)


def test_sampling_exhaustion():
    prior = make_prior(h=12, w=12)
    with pytest.raises(NoStaticRegion):
        sample_static_patches(prior, 0.5, 100, sampling_rng(0, 0))


def test_patch_id_namespaces():
    k = 96
    masked = set(range(patch_id_base(3, k, True),
                       patch_id_base(3, k, True) + k))
    unmasked = set(range(patch_id_base(3, k, False),
                         patch_id_base(3, k, False) + k))
    next_frame = set(range(patch_id_base(4, k, True),
                           patch_id_base(4, k, True) + k))
    assert not masked & unmasked
    assert not (masked | unmasked) & next_frame


def make_sequence_dir(tmp_path, n_frames=2, scales=(1.0, 2.0)):
    root = tmp_path / "seq"
    for fid in range(n_frames):
        d = root / "frames" / str(fid)
        d.mkdir(parents=True)
        write_raster(d / "depth.dpr",
                     np.full((8, 10), 4.0, np.float32), "depth")
        write_raster(d / "confidence.prb",
                     np.ones((8, 10), np.float32), "prob")
        write_raster(d / "motion.prb",
                     np.zeros((8, 10), np.float32), "prob")
    (root / "flows").mkdir()
    (root / "flows" / "0_1.txt").write_text("5 3.0 4.0 1\n")
    write_scales_file(root / "scales.txt", scales)
    (root / "meta.json").write_text(
        '{"intrinsics": {"fx": 10, "fy": 10, "cx": 5, "cy": 4,'
        ' "width": 10, "height": 8}}'
    )
    return root


def test_file_provider_scale_replay(tmp_path):
    root = make_sequence_dir(tmp_path)
    provider = FileProvider(root)
    assert provider.frame_ids() == [0, 1]
    r0 = provider.request_priors(as_request([0]))
    r1 = provider.request_priors(as_request([0, 1]))
    assert r0.batch_id == 0 and r1.batch_id == 1
    assert np.all(r0.frame(0).depth == 4.0)
    assert np.all(r1.frame(0).depth == 8.0)
    ratio = r1.frame(0).depth / r0.frame(0).depth
    assert np.allclose(ratio, 2.0)


def test_file_provider_tracks(tmp_path):
    root = make_sequence_dir(tmp_path)
    provider = FileProvider(root)

    class P:
        patch_id, frame_id, u, v = 5, 0, 1.0, 1.0

    obs = provider.track_patches([P()], 1)
    assert obs[0].u == 3.0 and obs[0].v == 4.0 and obs[0].valid

    class Q:
        patch_id, frame_id, u, v = 99, 0, 1.0, 1.0

    with pytest.raises(ProviderLookupError):
        provider.track_patches([Q()], 1)
    with pytest.raises(ProviderLookupError):
        provider.track_patches([P()], 7)


def test_file_provider_missing_layout(tmp_path):
    with pytest.raises(ProviderLookupError):
        FileProvider(tmp_path / "nothing")
    partial = tmp_path / "partial"
    (partial / "frames").mkdir(parents=True)
    with pytest.raises(ProviderLookupError):
        FileProvider(partial)
