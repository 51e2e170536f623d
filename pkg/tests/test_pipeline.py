from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from tlbench.data_model import DatasetManifest
from tlbench.errors import DecodeError, EmptyDatasetError, PartialPlanError, PlanError
from tlbench.pipeline import (
    AugmentationPolicy,
    BatchingConfig,
    apply_augmentation,
    buffer_shuffle,
    decode_and_preprocess,
    execute_plan,
    make_batches,
    plan_balancing,
    sample_params,
    save_image,
    steps_per_epoch,
)
from tlbench.pipeline.augment import draw_rng

from .conftest import manifest_from, record


def constant_loader(ref, size):
    return np.full((*size, 3), 0.5, dtype=np.float32)


# -- decoding -----------------------------------------------------------------


def test_white_image_is_all_ones(tmp_path):
    Image.new("L", (40, 30), 255).save(tmp_path / "w.png")
    out = decode_and_preprocess(tmp_path / "w.png", (16, 16))
    assert out.shape == (16, 16, 3) and np.all(out == 1.0)


def test_resize_to_target_shape(tmp_path):
    Image.new("RGB", (100, 80), (10, 20, 30)).save(tmp_path / "a.jpg")
    assert decode_and_preprocess(tmp_path / "a.jpg", (224, 224)).shape == (224, 224, 3)


def test_colour_input_is_replicated_luminance(tmp_path):
    rgb = np.zeros((8, 8, 3), dtype=np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 200, 100, 50
    Image.fromarray(rgb).save(tmp_path / "c.png")
    out = decode_and_preprocess(tmp_path / "c.png", (8, 8))
    assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])
    # ITU-R 601-2 luma: (200*299 + 100*587 + 50*114) / 1000 = 124.2 -> 124
    assert np.allclose(out[..., 0], 124 / 255)


def test_sixteen_bit_input(tmp_path):
    arr = np.full((4, 4), 65535, dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "d.png")
    assert np.allclose(decode_and_preprocess(tmp_path / "d.png", (4, 4)), 1.0)


def test_undecodable_file_names_ref(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DecodeError) as info:
        decode_and_preprocess(bad)
    assert info.value.image_ref == str(bad)


def test_preprocessing_idempotent_on_own_output(tmp_path, rng):
    img = np.repeat(rng.random((24, 24, 1)), 3, axis=2)
    save_image(img, tmp_path / "a.png")
    once = decode_and_preprocess(tmp_path / "a.png", (24, 24))
    save_image(once, tmp_path / "b.png")
    twice = decode_and_preprocess(tmp_path / "b.png", (24, 24))
    assert np.max(np.abs(twice - once)) <= 1 / 255


# -- augmentation ---------------------------------------------------------------


def test_identity_policy_returns_input(rng):
    img = rng.random((9, 7, 3)).astype(np.float32)
    for k in range(5):
        assert np.array_equal(apply_augmentation(img, AugmentationPolicy.identity(), k), img)


def test_flip_only_mirrors_columns():
    img = np.arange(9, dtype=np.float32).reshape(3, 3, 1).repeat(3, axis=2) / 10
    policy = AugmentationPolicy(True, 0.0, 0.0, 0.0, 0.0, seed=5)
    flips = [sample_params(policy, draw_rng(5, 0, k)).flip for k in range(20)]
    assert any(flips) and not all(flips)
    for k, flip in enumerate(flips):
        out = apply_augmentation(img, policy, k)
        expected = img[:, ::-1, :] if flip else img
        assert np.array_equal(out, expected)
    mirrored = np.array([[2, 1, 0], [5, 4, 3], [8, 7, 6]], dtype=np.float32) / 10
    k = flips.index(True)
    assert np.array_equal(apply_augmentation(img, policy, k)[..., 0], mirrored)


def test_rotation_of_constant_image_is_constant():
    img = np.full((16, 16, 3), 0.3, dtype=np.float32)
    policy = AugmentationPolicy(False, 15.0, 0.0, 0.0, 0.0)
    for k in range(5):
        assert np.allclose(apply_augmentation(img, policy, k), 0.3, atol=1e-6)


def test_augmentation_deterministic_per_draw(rng):
    img = rng.random((12, 12, 3)).astype(np.float32)
    policy = AugmentationPolicy()
    a = apply_augmentation(img, policy, 3, image_index=7)
    assert np.array_equal(a, apply_augmentation(img, policy, 3, image_index=7))
    assert not np.array_equal(a, apply_augmentation(img, policy, 4, image_index=7))


def test_sampled_parameters_within_ranges():
    policy = AugmentationPolicy()
    for k in range(200):
        p = sample_params(policy, draw_rng(1, 0, k))
        assert abs(p.angle) <= 15 and abs(p.zoom - 1) <= 0.1 and abs(p.contrast - 1) <= 0.1
        assert all(abs(s) <= 0.05 for s in p.shift)


@settings(max_examples=40, deadline=None)
@given(
    rot=st.floats(0, 45), zoom=st.floats(0, 0.5), contrast=st.floats(0, 2),
    shift=st.floats(0, 0.3), flip=st.booleans(), draw=st.integers(0, 10**6),
)
def test_augmentation_preserves_shape_and_range(rot, zoom, contrast, shift, flip, draw):
    img = np.random.default_rng(draw).random((10, 13, 3)).astype(np.float32)
    out = apply_augmentation(img, AugmentationPolicy(flip, rot, zoom, contrast, shift), draw)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_negative_magnitude_rejected():
    with pytest.raises(ValueError):
        AugmentationPolicy(rotation_degrees=-1)


# -- balancing ------------------------------------------------------------------


def test_plan_example_cells():
    counts = {("France", "normal"): 500, ("France", "covid"): 2000,
              ("Spain", "normal"): 1249, ("Spain", "covid"): 2034}
    plan = plan_balancing(counts, {"covid": 2034, "normal": 1249})
    assert plan.cells[("France", "normal")].synth_needed == 749
    assert plan.cells[("France", "covid")].synth_needed == 34
    assert plan.cells[("Spain", "normal")].synth_needed == 0
    assert plan.targets_by_label() == {"covid": 4068, "normal": 2498}
    assert "totals: covid=4068 normal=2498" in plan.summary()


def test_plan_already_balanced():
    counts = {("A", "covid"): 5, ("B", "covid"): 7}
    plan = plan_balancing(counts, {"covid": 7}, allow_downsample=True)
    assert plan.cells[("B", "covid")].synth_needed == 0
    plan = plan_balancing({("A", "covid"): 7, ("B", "covid"): 7}, {"covid": 7})
    assert plan.total_synth == 0


def test_plan_rejects_target_below_existing():
    with pytest.raises(PlanError):
        plan_balancing({("A", "covid"): 10}, {"covid": 5})


def test_plan_rejects_empty_source_cell():
    with pytest.raises(PlanError):
        plan_balancing({("A", "covid"): 10, ("B", "normal"): 3}, {"covid": 10})


def _cells_manifest(cells):
    rows, i = [], 0
    for (country, label), n in cells.items():
        for _ in range(n):
            rows.append(record(i, label=label, country=country, age=float(20 + i % 50),
                               sex=("male", "female")[i % 2]))
            i += 1
    return manifest_from(rows)


def test_execute_plan_hits_targets_and_copies_metadata(tmp_path):
    m = _cells_manifest({("A", "covid"): 3, ("A", "normal"): 2, ("B", "covid"): 4,
                         ("B", "normal"): 1})
    plan = plan_balancing(m.cell_counts(), {"covid": 5, "normal": 4})
    out = execute_plan(m, plan, AugmentationPolicy(), tmp_path, (8, 8), constant_loader)
    assert out.cell_counts() == {("A", "covid"): 5, ("A", "normal"): 4, ("B", "covid"): 5,
                                 ("B", "normal"): 4}
    originals = {r.image_ref: r for r in m}
    synthetic = [r for r in out if r.image_ref not in originals]
    assert len(synthetic) == plan.total_synth == 8
    by_cell = {}
    for r in m:
        by_cell.setdefault((r.country, r.label), []).append(r)
    for r in synthetic:
        path = tmp_path / "augmented" / r.country / r.label
        assert r.image_ref.startswith(str(path))
        assert (tmp_path / r.image_ref).exists()
        stem = r.image_ref.rsplit("/", 1)[1].rsplit("_", 1)[0] + ".png"
        src = next(s for s in by_cell[(r.country, r.label)] if s.image_ref.endswith(stem))
        assert (r.label, r.country, r.age, r.sex, r.modality, r.source) == (
            src.label, src.country, src.age, src.sex, src.modality, src.source)


def test_execute_empty_plan_is_noop(tmp_path):
    m = _cells_manifest({("A", "covid"): 3})
    plan = plan_balancing(m.cell_counts(), {})
    assert execute_plan(m, plan, AugmentationPolicy(), tmp_path) is m


def test_execute_plan_downsampling(tmp_path):
    m = _cells_manifest({("A", "covid"): 6, ("B", "covid"): 2})
    plan = plan_balancing(m.cell_counts(), {"covid": 4}, allow_downsample=True)
    out = execute_plan(m, plan, AugmentationPolicy(), tmp_path, (4, 4), constant_loader)
    assert out.cell_counts() == {("A", "covid"): 4, ("B", "covid"): 4}


def test_execute_plan_io_failure_reports_completed_cells(tmp_path):
    m = _cells_manifest({("A", "covid"): 2, ("B", "covid"): 1})
    plan = plan_balancing(m.cell_counts(), {"covid": 2})
    blocker = tmp_path / "augmented"
    blocker.write_text("a file where a directory should be")
    with pytest.raises(PartialPlanError) as info:
        execute_plan(m, plan, AugmentationPolicy(), tmp_path, (4, 4), constant_loader)
    assert info.value.completed == [("A", "covid")]


# -- batching -------------------------------------------------------------------


@pytest.mark.parametrize("n,b,steps", [(19_527, 128, 153), (19_527, 64, 306),
                                       (19_527, 32, 611), (1, 1024, 1)])
def test_steps_per_epoch(n, b, steps):
    assert steps_per_epoch(n, b) == steps


@given(st.integers(1, 10**6), st.integers(1, 4096))
def test_steps_per_epoch_bounds(n, b):
    s = steps_per_epoch(n, b)
    assert s * b >= n > (s - 1) * b


def test_steps_per_epoch_empty():
    with pytest.raises(EmptyDatasetError):
        steps_per_epoch(0, 128)


def _stream_manifest(n):
    return manifest_from([record(i, label=("covid", "normal")[i % 3 == 0]) for i in range(n)])


def test_batch_sizes_and_order():
    stream = make_batches(_stream_manifest(300), BatchingConfig(), shuffle=False,
                          target_size=(4, 4), loader=constant_loader)
    batches = list(stream.epoch(1))
    assert [len(b.labels) for b in batches] == [128, 128, 44]
    assert [r.image_ref for b in batches for r in b.records] == [
        r.image_ref for r in stream.records]
    assert batches[0].images.shape == (128, 3, 4, 4)
    assert batches[0].labels.tolist()[:3] == [0, 1, 1]


def test_shuffled_epochs_visit_every_record_once():
    m = _stream_manifest(300)
    stream = make_batches(m, BatchingConfig(batch_size=50, shuffle_buffer=64), shuffle=True,
                          target_size=(2, 2), loader=constant_loader)
    orders = [stream.order(e) for e in (1, 2)]
    for order in orders:
        assert sorted(order) == list(range(300))
    assert orders[0] != orders[1]
    again = make_batches(m, BatchingConfig(batch_size=50, shuffle_buffer=64), shuffle=True,
                         loader=constant_loader)
    assert again.order(1) == orders[0]
    other = make_batches(m, BatchingConfig(batch_size=50, shuffle_buffer=64, seed=7),
                         shuffle=True, loader=constant_loader)
    assert other.order(1) != orders[0]


def test_buffer_shuffle_small_buffer_is_local():
    order = buffer_shuffle(100, 1, np.random.default_rng(0))
    assert order == list(range(100))
    order = buffer_shuffle(100, 5, np.random.default_rng(0))
    # with 5 slots the i-th output is one of the first i + 5 elements
    assert all(x < i + 5 for i, x in enumerate(order))
    assert Counter(order) == Counter(range(100))


def test_stream_summary_and_empty():
    stream = make_batches(_stream_manifest(10), BatchingConfig(batch_size=4), loader=constant_loader)
    assert stream.summary().startswith("records=10 batch_size=4 steps=3 last_batch=2")
    with pytest.raises(EmptyDatasetError):
        make_batches(DatasetManifest(()), BatchingConfig())


def test_batching_config_validation():
    with pytest.raises(ValueError):
        BatchingConfig(batch_size=0)
    with pytest.raises(ValueError):
        BatchingConfig(shuffle_buffer=0)
