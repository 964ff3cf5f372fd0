import json

import numpy as np
import pytest

from tdlab.chain import (
    MarkovRewardProcess,
    is_irreducible,
    load_mrp,
    mixing_profile,
    random_mrp,
    sample_trajectory,
    save_mrp,
    stationary_distribution,
)
from tdlab.errors import (
    InvalidMRP,
    NotAperiodic,
    NotIrreducible,
    TruncationTooSmall,
    ValidationError,
)

from conftest import EX1_P, EX1_PSI


def mrp_of(P, r=None, beta=0.9):
    P = np.asarray(P, dtype=float)
    return MarkovRewardProcess(P, np.ones(P.shape[0]) if r is None else r, beta)


class TestMarkovRewardProcess:
    def test_valid(self):
        m = mrp_of(EX1_P, [1.0, 2.0])
        assert m.n_states == 2
        assert not m.transition.flags.writeable

    @pytest.mark.parametrize("P, msg", [
        ([[0.5, 0.6], [0.5, 0.5]], "row 0"),
        ([[-0.1, 1.1], [0.5, 0.5]], "negative"),
        ([[1.0, 0.0, 0.0]], "square"),
    ])
    def test_bad_transition(self, P, msg):
        with pytest.raises(InvalidMRP, match=msg):
            mrp_of(P, [1.0] * len(P))

    def test_row_sum_tolerance(self):
        mrp_of([[0.5, 0.5 + 5e-13], [0.5, 0.5]])
        with pytest.raises(InvalidMRP):
            mrp_of([[0.5, 0.5 + 1e-11], [0.5, 0.5]])

    @pytest.mark.parametrize("beta", [0.0, 1.0, -0.2, 1.5])
    def test_discount_range(self, beta):
        with pytest.raises(InvalidMRP, match="discount"):
            mrp_of(EX1_P, beta=beta)

    def test_strict_rewards(self):
        mrp_of(EX1_P, [1.0, 2.0])
        with pytest.raises(InvalidMRP, match="strict"):
            MarkovRewardProcess(EX1_P, [1.0, 2.0], 0.9, strict=True)

    def test_file_roundtrip(self, tmp_path):
        m = mrp_of(EX1_P, [1.0, 2.0])
        path = tmp_path / "mrp.json"
        save_mrp(m, path)
        back = load_mrp(path)
        np.testing.assert_array_equal(back.transition, m.transition)
        assert back.discount == m.discount

    def test_loader_reports_first_violation(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"transition": [[0.5, 0.6], [-1, 2]], "reward": [0, 0], "discount": 0.9}))
        with pytest.raises(InvalidMRP, match="negative"):
            load_mrp(path)

    def test_loader_missing_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"transition": [[1.0]]}))
        with pytest.raises(InvalidMRP, match="reward"):
            load_mrp(path)


class TestStationary:
    def test_symmetric(self):
        psi = stationary_distribution(mrp_of([[0.5, 0.5], [0.5, 0.5]])).psi
        np.testing.assert_allclose(psi, [0.5, 0.5], atol=1e-12)

    def test_example1(self):
        st = stationary_distribution(mrp_of(EX1_P))
        np.testing.assert_allclose(st.psi, EX1_PSI, atol=1e-12)
        np.testing.assert_allclose(st.as_matrix, np.diag(EX1_PSI))

    def test_identity_not_irreducible(self):
        with pytest.raises(NotIrreducible):
            stationary_distribution(mrp_of(np.eye(2)))

    def test_reducible_with_transient(self):
        assert not is_irreducible(np.array([[0.5, 0.5], [0.0, 1.0]]))

    @pytest.mark.parametrize("seed", range(5))
    def test_balance_random(self, seed):
        m = random_mrp(30, seed)
        psi = stationary_distribution(m).psi
        assert np.all(psi >= 0)
        assert abs(psi.sum() - 1) < 1e-12
        assert np.max(np.abs(psi @ m.transition - psi)) <= 1e-10


class TestMixingProfile:
    def test_rank_one_chain(self):
        prof = mixing_profile(mrp_of([[0.5, 0.5], [0.5, 0.5]]), 10)
        assert prof.rho == pytest.approx(0.0, abs=1e-12)
        assert prof.tail_bound == 0.0
        assert np.all(np.isfinite(prof.b_prime_per_state))

    def test_example1_rho(self):
        prof = mixing_profile(mrp_of(EX1_P, [1.0, 2.0]), 50)
        assert prof.rho == pytest.approx(0.1, abs=1e-12)
        assert np.all(prof.b_prime_per_state >= 0)

    def test_truncation_zero(self):
        with pytest.raises(TruncationTooSmall):
            mixing_profile(mrp_of(EX1_P, [1.0, 2.0]), 0)

    def test_periodic_chain(self):
        with pytest.raises(NotAperiodic):
            mixing_profile(mrp_of([[0.0, 1.0], [1.0, 0.0]]), 10)

    def test_geometric_envelope(self):
        m = mrp_of(EX1_P, [1.0, 2.0])
        prof = mixing_profile(m, 50)
        psi = stationary_distribution(m).psi
        P20 = np.linalg.matrix_power(m.transition, 20)
        assert np.max(np.abs(P20 - psi)) <= prof.c_geo * prof.rho**20 + 1e-12

    def test_rho_matches_eigenvalues(self):
        m = random_mrp(20, 3)
        mods = np.sort(np.abs(np.linalg.eigvals(m.transition)))[::-1]
        assert mixing_profile(m, 60).rho == pytest.approx(mods[1], abs=1e-9)

    def test_truncation_monotone(self):
        m = mrp_of(EX1_P, [1.0, 2.0])
        profiles = [mixing_profile(m, t, tolerance=1.0) for t in (2, 4, 8, 16, 32)]
        for a, b in zip(profiles, profiles[1:]):
            assert np.all(b.partial_sums >= a.partial_sums - 1e-15)
            assert b.tail_bound <= a.tail_bound

    def test_weight_callback(self):
        m = mrp_of(EX1_P, [1.0, 2.0])
        plain = mixing_profile(m, 40)
        doubled = mixing_profile(m, 40, weight=lambda tau: 2.0)
        np.testing.assert_allclose(doubled.partial_sums, 2 * plain.partial_sums)

    def test_direct_sum_oracle(self):
        # B'(s) for tabular features recomputed by brute force over the three families
        m = mrp_of(EX1_P, [1.0, 2.0])
        T = 60
        prof = mixing_profile(m, T)
        psi = EX1_PSI
        P = m.transition
        sums = np.zeros((3, 2))
        for s in range(2):
            for tau in range(T):
                dist = np.linalg.matrix_power(P, tau)[s]
                er = sum(dist[x] * m.reward[x] * np.eye(2)[x] for x in range(2))
                tr = sum(psi[x] * m.reward[x] * np.eye(2)[x] for x in range(2))
                sums[0, s] += np.linalg.norm(er - tr)
                for lag, idx in ((0, 1), (1, 2)):
                    Pl = np.linalg.matrix_power(P, lag)
                    em = sum(dist[x] * np.outer(np.eye(2)[x], Pl[x]) for x in range(2))
                    tm = sum(psi[x] * np.outer(np.eye(2)[x], Pl[x]) for x in range(2))
                    sums[idx, s] += np.linalg.norm(em - tm, 2)
        np.testing.assert_allclose(prof.partial_sums, sums.max(axis=0), rtol=1e-12)


class TestTrajectory:
    def test_length_zero(self):
        tr = sample_trajectory(mrp_of(EX1_P), 1, 0, seed=5)
        assert list(tr.states) == [1]

    def test_deterministic_cycle(self):
        tr = sample_trajectory(mrp_of([[0.0, 1.0], [1.0, 0.0]]), 0, 4, seed=0)
        assert list(tr.states) == [0, 1, 0, 1, 0]

    def test_stationary_frequency(self):
        tr = sample_trajectory(mrp_of(EX1_P), 0, 1_000_000, seed=11)
        assert abs(np.mean(tr.states == 0) - 3 / 11) < 0.01

    def test_same_seed_same_bytes(self):
        m = random_mrp(10, 0)
        a = sample_trajectory(m, 0, 5000, seed=42)
        b = sample_trajectory(m, 0, 5000, seed=42)
        assert a.states.tobytes() == b.states.tobytes()
        c = sample_trajectory(m, 0, 5000, seed=43)
        assert a.states.tobytes() != c.states.tobytes()

    def test_transitions_have_positive_probability(self):
        P = np.array([[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        P[2] = [0.3, 0.0, 0.7]
        m = mrp_of(P)
        tr = sample_trajectory(m, 0, 20000, seed=1)
        s = tr.states
        assert np.all(m.transition[s[:-1], s[1:]] > 0)

    def test_bad_start(self):
        with pytest.raises(ValidationError):
            sample_trajectory(mrp_of(EX1_P), 5, 3, seed=0)


class TestRandomMrp:
    def test_rows(self):
        m = random_mrp(2, 123)
        np.testing.assert_allclose(m.transition.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((m.reward >= 0) & (m.reward <= 1))

    def test_hundred_states_irreducible(self):
        m = random_mrp(100, 7)
        assert is_irreducible(m.transition)
        stationary_distribution(m)

    def test_determinism(self):
        a, b = random_mrp(15, 9), random_mrp(15, 9)
        assert a.transition.tobytes() == b.transition.tobytes()
        assert a.reward.tobytes() == b.reward.tobytes()

    def test_too_small(self):
        with pytest.raises(ValidationError):
            random_mrp(1, 0)
