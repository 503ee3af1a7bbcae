import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from asgdlab.core import ContractViolation, ModelState, StepSchedule, apply_step, as_vector, seeded_rng


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def shaped(k, d):
    return arrays(np.float64, (k, d), elements=finite)


class TestApplyStep:
    def test_one_element(self):
        w = apply_step(ModelState([[2.0]]), np.array([[1.0]]), 0.5)
        assert w.prototypes.tolist() == [[1.5]]

    @pytest.mark.parametrize("eps", [1e-3, 0.5, 1.0, 7.0])
    def test_zero_delta_is_identity(self, eps):
        w = ModelState([[3.25]])
        assert apply_step(w, np.zeros((1, 1)), eps).prototypes.tolist() == [[3.25]]

    def test_zeros_bump_version(self):
        w = ModelState.zeros(3, 4)
        out = apply_step(w, np.zeros((3, 4)), 0.1)
        assert out.version == w.version + 1
        assert not out.prototypes.any()

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            apply_step(ModelState.zeros(2, 2), np.zeros((2, 3)), 0.1)

    @pytest.mark.parametrize("eps", [0.0, -1.0])
    def test_non_positive_epsilon(self, eps):
        with pytest.raises(ContractViolation):
            apply_step(ModelState.zeros(1, 1), np.zeros((1, 1)), eps)

    def test_input_state_untouched(self):
        w = ModelState([[1.0, 2.0]])
        apply_step(w, np.ones((1, 2)), 1.0)
        assert w.prototypes.tolist() == [[1.0, 2.0]]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 4).flatmap(lambda k: st.integers(1, 4).flatmap(
        lambda d: st.tuples(shaped(k, d), shaped(k, d), shaped(k, d)))),
        st.floats(1e-3, 1.0))
    def test_linear_in_delta(self, triple, eps):
        P, a, b = triple
        w = ModelState(P)
        once = apply_step(w, a + b, eps).prototypes
        twice = apply_step(apply_step(w, a, eps), b, eps).prototypes
        # Absolute 1e-12 at unit scale, relative for larger entries.
        scale = max(1.0, np.abs(P).max(), np.abs(a).max(), np.abs(b).max())
        assert np.abs(once - twice).max() <= 1e-12 * scale

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 4).flatmap(lambda k: st.integers(1, 4).flatmap(
        lambda d: st.tuples(shaped(k, d), shaped(k, d)))), st.floats(1e-6, 1.0))
    def test_finite_inputs_stay_finite(self, pair, eps):
        P, D = pair
        assert np.isfinite(apply_step(ModelState(P), D, eps).prototypes).all()


class TestModelState:
    def test_is_read_only_copy(self):
        src = np.ones((2, 2))
        w = ModelState(src)
        src[0, 0] = 5
        assert w.prototypes[0, 0] == 1
        with pytest.raises(ValueError):
            w.prototypes[0, 0] = 2

    @pytest.mark.parametrize("bad", [np.zeros((0, 2)), np.zeros(3), np.array([[np.nan]]), np.array([[np.inf]])])
    def test_rejects_bad_prototypes(self, bad):
        with pytest.raises(ContractViolation):
            ModelState(bad)

    def test_bitwise_equal(self):
        a = ModelState([[0.1, 0.2]])
        assert a.bitwise_equal(ModelState([[0.1, 0.2]]))
        assert not a.bitwise_equal(ModelState([[0.1, np.nextafter(0.2, 1)]]))

    def test_step_schedule(self):
        assert StepSchedule(0.3).epsilon == 0.3
        with pytest.raises(ContractViolation):
            StepSchedule(0.0)

    def test_as_vector(self):
        assert as_vector([1, 2]).dtype == np.float64
        with pytest.raises(ContractViolation):
            as_vector([np.nan])


class TestSeededRng:
    def test_same_pair_reproduces(self):
        a = seeded_rng(42, 0).random(1000)
        b = seeded_rng(42, 0).random(1000)
        assert a.tobytes() == b.tobytes()

    def test_streams_differ(self):
        assert not np.array_equal(seeded_rng(42, 0).random(1000), seeded_rng(42, 1).random(1000))

    def test_seeds_differ(self):
        assert not np.array_equal(seeded_rng(42, 0).random(16), seeded_rng(43, 0).random(16))

    def test_uniformity_chi_square(self):
        draws = seeded_rng(42, 0).random(1000)
        counts, _ = np.histogram(draws, bins=10, range=(0.0, 1.0))
        _, p = stats.chisquare(counts)
        assert p > 0.01

    def test_negative_seed_folds(self):
        assert seeded_rng(-1, 0).random() == seeded_rng(2**64 - 1, 0).random()

    def test_negative_stream_rejected(self):
        with pytest.raises(ContractViolation):
            seeded_rng(0, -1)
