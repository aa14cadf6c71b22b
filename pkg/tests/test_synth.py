import numpy as np
import pytest

from fieldscale.geo import (
    BACKGROUND,
    BOUNDARY,
    DEFAULT_REFERENCE,
    INTERIOR,
    ScaleOffset,
    apply_normalization,
    argmax_labels,
)
from fieldscale.instances import connected_components
from fieldscale.synth import (
    FrameMeanBackend,
    HARVEST_SIGNATURE,
    PLANTING_SIGNATURE,
    StubModelSpec,
    decode_content,
    generate_world,
    make_stub_model,
)

from _oracles import bfs_label


def _predict(model, world, reference=DEFAULT_REFERENCE):
    return model.predict(apply_normalization(world.image, reference).channels())


def test_single_field_world():
    w = generate_world(1, 64, 64, n_fields=1)
    assert w.n_interior_components == 1


def test_instances_match_components():
    w = generate_world(7, 128, 128, n_fields=12)
    assert len(w.gt_instances) == connected_components(w.gt_mask).n


def test_determinism():
    a = generate_world(3, 64, 80, 10, 0.1)
    b = generate_world(3, 64, 80, 10, 0.1)
    assert np.array_equal(a.gt_mask.values, b.gt_mask.values)
    assert a.image.values.tobytes() == b.image.values.tobytes()
    c = generate_world(4, 64, 80, 10, 0.1)
    assert not np.array_equal(a.gt_mask.values, c.gt_mask.values)


@pytest.mark.parametrize("seed", range(8))
def test_boundaries_separate_regions(seed):
    w = generate_world(seed, 64, 64, n_fields=10, background_fraction=0.15 if seed % 2 else 0.0)
    interior = w.gt_mask.values == INTERIOR
    labels, n = bfs_label(interior, 4)
    # every interior component lies inside exactly one region
    for k in range(1, n + 1):
        assert len(np.unique(w.regions[labels == k])) == 1
    # no region is split by the background mask into a merged component
    assert n == w.n_interior_components


def test_background_fraction_is_exact():
    w = generate_world(2, 100, 100, n_fields=10, background_fraction=0.2)
    assert (w.regions == 0).sum() == 2000


def test_input_validation():
    with pytest.raises(ValueError):
        generate_world(0, 16, 16)
    with pytest.raises(ValueError):
        generate_world(0, 64, 64, n_fields=0)
    with pytest.raises(ValueError):
        generate_world(0, 64, 64, background_fraction=1.0)


def test_signatures_are_distinct():
    sig = np.concatenate([np.concatenate([PLANTING_SIGNATURE, HARVEST_SIGNATURE], 1),
                          np.concatenate([HARVEST_SIGNATURE, PLANTING_SIGNATURE], 1)])
    d = np.linalg.norm(sig[:, None] - sig[None], axis=-1)
    assert d[np.triu_indices(len(sig), 1)].min() > 1000


@pytest.mark.parametrize("seed", range(5))
def test_oracle_recovers_ground_truth(seed):
    w = generate_world(seed, 64, 64, background_fraction=0.1)
    model = make_stub_model(w, StubModelSpec("oracle"))
    assert np.array_equal(argmax_labels(_predict(model, w)).values, w.gt_mask.values)


def test_decode_is_local():
    w = generate_world(0, 64, 64)
    ch = apply_normalization(w.image, DEFAULT_REFERENCE).channels()
    cls, canon = decode_content(ch)
    sub_cls, sub_canon = decode_content(ch[:, 5:20, 7:30])
    assert np.array_equal(sub_cls, cls[5:20, 7:30]) and np.array_equal(sub_canon, canon[5:20, 7:30])
    assert np.array_equal(cls, w.gt_mask.values) and canon.all()


def test_noisy_zero_sigma_is_oracle():
    w = generate_world(1, 64, 64)
    a = _predict(make_stub_model(w, StubModelSpec("oracle")), w)
    b = _predict(make_stub_model(w, StubModelSpec("noisy", sigma=0.0)), w)
    assert np.array_equal(a, b)
    c = _predict(make_stub_model(w, StubModelSpec("noisy", sigma=5.0, seed=2)), w)
    assert not np.array_equal(a, c)


def test_frame0_only_inverts_on_swapped_frames():
    w = generate_world(1, 64, 64)
    model = make_stub_model(w, StubModelSpec("frame0_only"))
    gt = w.gt_mask.values
    assert np.array_equal(argmax_labels(_predict(model, w)).values, gt)
    swapped = argmax_labels(model.predict(apply_normalization(w.image.reorder([1, 0]), DEFAULT_REFERENCE).channels())).values
    assert np.array_equal(swapped[gt == INTERIOR], np.full((gt == INTERIOR).sum(), BACKGROUND))
    assert np.array_equal(swapped[gt == BACKGROUND], np.full((gt == BACKGROUND).sum(), INTERIOR))
    assert (swapped[gt == BOUNDARY] == BOUNDARY).all()


def test_position_mod_k_depends_on_local_rows():
    model = make_stub_model(None, StubModelSpec("position_mod_k", k=3))
    out = argmax_labels(model.predict(np.zeros((8, 7, 4)))).values
    assert out[:, 0].tolist() == [0, 1, 2, 0, 1, 2, 0]


def test_oracle_depends_on_reference():
    w = generate_world(1, 64, 64)
    model = make_stub_model(w, StubModelSpec("oracle"))
    wrong = argmax_labels(_predict(model, w, ScaleOffset(10000, 0))).values
    assert not np.array_equal(wrong, w.gt_mask.values)


def test_frame_mean_is_order_invariant():
    model = FrameMeanBackend(make_stub_model(None, StubModelSpec("frame0_only")))
    x = np.random.default_rng(0).uniform(0, 1, (8, 6, 6))
    swapped = np.concatenate([x[4:], x[:4]])
    assert np.array_equal(model.predict(x), model.predict(swapped))
