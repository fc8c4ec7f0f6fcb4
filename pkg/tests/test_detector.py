"""Permutation-test p-values, the reference distribution, and detection."""

import numpy as np
import pytest
import torch

from cvae_detect.attacks import attack_fgsm
from cvae_detect.datasets import LabeledDataset
from cvae_detect.detector import (
    DetectionResult,
    ReconReference,
    build_reference,
    detect,
    p_value,
    recon_distance,
)
from cvae_detect.errors import NumericError
from cvae_detect.models import ClassConditionalVae


def make_ref(values):
    return ReconReference(np.asarray(values, dtype=np.float64), meta={"dataset": "test"})


# ---------------------------------------------------------------------------
# p_value
# ---------------------------------------------------------------------------


def test_p_value_hand_case():
    # brute force: exactly two of [1,2,3,4] are >= 2.5, so p = (2+1)/5
    ref = make_ref([1, 2, 3, 4])
    assert p_value(2.5, ref) == pytest.approx(0.6)


def test_p_value_extremes():
    ref = make_ref([1, 2, 3, 4])
    assert p_value(0.5, ref) == pytest.approx(1.0)
    assert p_value(10.0, ref) == pytest.approx(1.0 / 5.0)


def test_p_value_never_zero_and_floor():
    ref = make_ref(np.arange(1, 1000, dtype=float))
    p = p_value(1e12, ref)
    assert p == pytest.approx(1.0 / (ref.n + 1))
    assert p > 0


def test_p_value_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        ref_vals = np.round(rng.uniform(0, 10, size=n), 2)  # rounding forces ties
        d = float(np.round(rng.uniform(-1, 11), 2))
        ref = make_ref(ref_vals)
        brute = (np.sum(ref_vals >= d) + 1) / (n + 1)
        assert p_value(d, ref) == brute  # exact, not approximate


def test_p_value_monotone_non_increasing():
    rng = np.random.default_rng(1)
    ref = make_ref(rng.uniform(0, 5, size=200))
    ds = np.sort(rng.uniform(-1, 6, size=100))
    ps = p_value(ds, ref)
    assert (np.diff(ps) <= 0).all()


def test_p_value_vectorized_matches_scalar():
    ref = make_ref([1, 2, 3, 4])
    ds = np.array([0.5, 2.5, 10.0])
    np.testing.assert_allclose(p_value(ds, ref), [1.0, 0.6, 0.2])


def test_p_value_nan_raises():
    ref = make_ref([1, 2, 3])
    with pytest.raises(NumericError):
        p_value(float("nan"), ref)


def test_p_value_uniform_under_null():
    """Distances drawn from the reference's own distribution give ~uniform p."""
    from scipy.stats import kstest

    rng = np.random.default_rng(2)
    ref = make_ref(rng.normal(5.0, 1.0, size=10_000).clip(min=0))
    holdout = rng.normal(5.0, 1.0, size=1000).clip(min=0)
    ps = p_value(holdout, ref)
    assert kstest(ps, "uniform").statistic <= 0.05


# ---------------------------------------------------------------------------
# recon_distance
# ---------------------------------------------------------------------------


class StubVae(ClassConditionalVae):
    """Returns a fixed reconstruction regardless of input; isolates the metric."""

    def __init__(self, fixed):
        super().__init__(1, image_size=8, widths=(4, 4, 4), z_dim=4)
        self._fixed = fixed

    def reconstruct(self, x, conds):
        return self._fixed.expand_as(x)


def test_recon_distance_identity_is_zero():
    x = torch.rand(2, 1, 8, 8)
    vae = StubVae(torch.zeros(1, 1, 8, 8))
    vae._fixed = x  # exact reconstruction
    d = recon_distance(vae, x, 0)
    assert torch.equal(d, torch.zeros(2))


def test_recon_distance_single_pixel_hand_value():
    # (0.2 - 0.5)^2 = 0.09, summed over the one differing pixel
    x = torch.zeros(1, 1, 8, 8)
    x[0, 0, 0, 0] = 0.2
    fixed = torch.zeros(1, 1, 8, 8)
    fixed[0, 0, 0, 0] = 0.5
    d = recon_distance(StubVae(fixed), x, 0)
    assert d.item() == pytest.approx(0.09)


def test_recon_distance_uses_condition(toy_cvae, synth_test):
    x = synth_test.images[:10]
    with torch.no_grad():
        own = recon_distance(toy_cvae, x, synth_test.labels[:10])
        other = recon_distance(toy_cvae, x, (synth_test.labels[:10] + 5) % 10)
    assert own.mean() < other.mean()


# ---------------------------------------------------------------------------
# build_reference
# ---------------------------------------------------------------------------


def test_build_reference_sorted_and_sized(toy_cvae, synth_train):
    ref = build_reference(toy_cvae, synth_train)
    assert ref.n == len(synth_train)
    assert (np.diff(ref.distances) >= 0).all()
    assert (ref.distances >= 0).all() and np.isfinite(ref.distances).all()
    assert ref.meta["dataset"] == "synthetic"


def test_build_reference_deterministic(toy_cvae, synth_train):
    a = build_reference(toy_cvae, synth_train)
    b = build_reference(toy_cvae, synth_train)
    np.testing.assert_array_equal(a.distances, b.distances)


def test_reference_save_load_round_trip(tmp_path, toy_cvae, synth_train):
    ref = build_reference(toy_cvae, synth_train)
    ref.save(tmp_path / "reference.npy")
    loaded = ReconReference.load(tmp_path / "reference.npy")
    np.testing.assert_array_equal(loaded.distances, ref.distances)
    assert loaded.meta["dataset"] == ref.meta["dataset"]


def test_reference_rejects_bad_values():
    with pytest.raises(NumericError):
        make_ref([1.0, float("nan")])
    with pytest.raises(NumericError):
        make_ref([-1.0, 2.0])
    with pytest.raises(ValueError):
        make_ref([])


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_reference(toy_cvae, synth_train):
    return build_reference(toy_cvae, synth_train)


def test_detect_threshold_zero_flags_nothing(toy_classifier, toy_cvae, toy_reference, synth_test):
    result = detect(toy_classifier, toy_cvae, toy_reference, synth_test.images, 0.0)
    assert not result.flagged.any()


def test_detect_threshold_one_flags_everything(toy_classifier, toy_cvae, toy_reference, synth_test):
    result = detect(toy_classifier, toy_cvae, toy_reference, synth_test.images, 1.0)
    assert result.flagged.all()


def test_detect_flag_rule_and_determinism(toy_classifier, toy_cvae, toy_reference, synth_test):
    a = detect(toy_classifier, toy_cvae, toy_reference, synth_test.images, 0.05)
    b = detect(toy_classifier, toy_cvae, toy_reference, synth_test.images, 0.05)
    np.testing.assert_array_equal(a.p_values, b.p_values)
    np.testing.assert_array_equal(a.flagged, a.p_values <= 0.05)
    assert (a.p_values >= 1.0 / (toy_reference.n + 1)).all()


def test_detect_guards():
    from cvae_detect.models import build_classifier

    model = build_classifier("small_cnn", in_channels=1)
    vae = ClassConditionalVae(1, image_size=8, widths=(4, 4, 4), z_dim=4)
    x = torch.rand(2, 1, 8, 8)
    with pytest.raises(RuntimeError):
        detect(model, vae, None, x, 0.05)
    small = make_ref(np.arange(1, 11, dtype=float))
    with pytest.raises(ValueError, match="100"):
        detect(model, vae, small, x, 0.05)
    big = make_ref(np.arange(1, 201, dtype=float))
    with pytest.raises(ValueError):
        detect(model, vae, big, x, 1.5)


def test_adversarial_distances_dominate_clean(toy_classifier, toy_cvae, toy_reference, synth_test):
    """Successful adversaries reconstruct worse than clean samples."""
    from cvae_detect.attacks import attack_pgd

    x = synth_test.images
    y = synth_test.labels
    attack = attack_pgd(toy_classifier, x, y, 0.3, 0.075, steps=8)
    keep = attack.success.nonzero(as_tuple=True)[0]
    assert len(keep) >= 10
    clean = detect(toy_classifier, toy_cvae, toy_reference, x, 0.05)
    adv = detect(toy_classifier, toy_cvae, toy_reference, attack.x_adv[keep], 0.05)
    assert np.median(adv.recon_distances) > np.median(clean.recon_distances)
    assert np.median(adv.recon_distances) > np.median(toy_reference.distances)
    assert np.median(adv.p_values) < np.median(clean.p_values)


def test_detection_csv_schema(tmp_path, toy_classifier, toy_cvae, toy_reference, synth_test):
    result = detect(toy_classifier, toy_cvae, toy_reference, synth_test.images[:5], 0.05)
    out = result.to_csv(tmp_path / "detect.csv")
    lines = out.read_text().splitlines()
    assert lines[0] == "sample_id,y_pred,recon_distance,p_value,flagged"
    assert len(lines) == 6
    first = lines[1].split(",")
    assert first[0] == "0" and first[4] in ("0", "1")
