import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedtrust.attacks import (AttackSpec, apply_gradient_attack, apply_label_flip, make_schedule)
from fedtrust.data import LabeledDataset
from fedtrust.errors import ConfigurationError, ThreatModelError, UsageError
from fedtrust.model import GradientUpdate
from fedtrust.rng import stream


def _update(d=1000, seed=0, client=2, rnd=3):
    v = stream(seed, "upd").standard_normal(d).astype(np.float32)
    return GradientUpdate(client, rnd, v, True, 50)


def test_sign_flip_negates_exactly():
    g = _update()
    out = apply_gradient_attack(AttackSpec("sign_flip"), g)
    assert np.array_equal(out.vector, -g.vector)
    cos = out.vector.astype(float) @ g.vector / (np.linalg.norm(out.vector) * np.linalg.norm(g.vector))
    assert cos == pytest.approx(-1.0)
    assert out.attack == "sign_flip" and g.attack == "none"


def test_sign_flip_twice_is_identity():
    g = _update()
    spec = AttackSpec("sign_flip")
    twice = apply_gradient_attack(spec, apply_gradient_attack(spec, g))
    assert twice.vector.tobytes() == g.vector.tobytes()


def test_scaling_multiplies_norm_by_ten():
    g = _update()
    out = apply_gradient_attack(AttackSpec("scaling"), g)
    assert np.linalg.norm(out.vector.astype(float)) == pytest.approx(10 * np.linalg.norm(g.vector.astype(float)),
                                                                      rel=1e-6)


def test_partial_scaling_masks_half():
    g = _update(1000)
    out = apply_gradient_attack(AttackSpec("partial_scaling"), g)
    changed = out.vector != g.vector
    assert changed.sum() == 500
    assert np.allclose(out.vector[changed], 5 * g.vector[changed])
    # mask is redrawn for another round
    other = apply_gradient_attack(AttackSpec("partial_scaling"), g, round_index=4)
    assert not np.array_equal(other.vector != g.vector, changed)


def test_additive_noise_std():
    g = _update(20_000)
    out = apply_gradient_attack(AttackSpec("additive_noise", sigma=10.0), g)
    diff = out.vector.astype(np.float64) - g.vector
    assert abs(diff.std() - 10.0) < 0.5


def test_noise_sigma_per_dataset():
    assert AttackSpec.for_dataset("additive_noise", "mnist").sigma == 5.0
    assert AttackSpec.for_dataset("additive_noise", "synthetic").sigma == 10.0


@pytest.mark.parametrize("kind", ["scaling", "partial_scaling", "sign_flip", "additive_noise"])
def test_attacks_do_not_mutate_input(kind):
    g = _update(300)
    before = g.vector.copy()
    out = apply_gradient_attack(AttackSpec(kind), g)
    assert np.array_equal(g.vector, before)
    assert out.vector.shape == g.vector.shape
    assert out.client_id == g.client_id and out.num_samples == g.num_samples


def test_attacks_are_deterministic():
    g = _update(300)
    a = apply_gradient_attack(AttackSpec("additive_noise", seed=4), g)
    b = apply_gradient_attack(AttackSpec("additive_noise", seed=4), g)
    assert a.vector.tobytes() == b.vector.tobytes()


def test_label_flip_is_not_a_gradient_attack():
    with pytest.raises(UsageError):
        apply_gradient_attack(AttackSpec("label_flip"), _update())


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        AttackSpec("backdoor")
    with pytest.raises(ConfigurationError):
        AttackSpec("partial_scaling", mask_fraction=1.5)
    with pytest.raises(ConfigurationError):
        AttackSpec("additive_noise", sigma=-1)


def _labels(n, classes=2, seed=0):
    y = stream(seed, "lab").integers(0, classes, n)
    return LabeledDataset(np.zeros((n, 1)), y, classes)


def test_label_flip_zero_is_identity():
    ds = _labels(100, 5)
    assert np.array_equal(apply_label_flip(ds, 0.0, 5, 1).labels, ds.labels)


def test_label_flip_binary_complement():
    ds = _labels(100, 2)
    assert np.array_equal(apply_label_flip(ds, 1.0, 2, 1).labels, 1 - ds.labels)


def test_label_flip_count_and_always_different():
    ds = _labels(10_000, 10)
    out = apply_label_flip(ds, 0.5, 10, 3)
    flipped = out.labels != ds.labels
    assert 4700 <= flipped.sum() <= 5300
    assert out.labels.min() >= 0 and out.labels.max() < 10


def test_label_flip_needs_two_classes():
    with pytest.raises(ConfigurationError):
        apply_label_flip(_labels(10), 0.5, 1, 0)


def test_schedule_examples():
    s = make_schedule(10, 0.3, seed=5)
    assert len(s.malicious_ids) == 3 and s.conformant
    assert all(0 <= i < 10 for i in s.malicious_ids)
    assert make_schedule(10, 0.0, seed=5).malicious_ids == frozenset()
    with pytest.raises(ThreatModelError):
        make_schedule(10, 0.5, seed=5)
    over = make_schedule(10, 0.5, seed=5, allow_over_threshold=True)
    assert len(over.malicious_ids) == 5 and not over.conformant


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), frac=st.floats(0, 0.3), seed=st.integers(0, 10_000))
def test_schedule_count_is_floor(n, frac, seed):
    s = make_schedule(n, frac, seed)
    assert len(s.malicious_ids) == int(np.floor(frac * n + 1e-9))
    assert s.malicious_ids == make_schedule(n, frac, seed).malicious_ids
