import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from qbm_forge.errors import CapacityError, ValidationError
from qbm_forge.exactspin import (
    ExactModel,
    SpinSystem,
    basis_spins,
    density_diagonal,
    diagonal_energies,
    exact_moments,
    spins_to_index,
)
from qbm_forge.metrics import histogram, kl_divergence
from qbm_forge.sampler import (
    MAX_SAMPLES_PER_SET,
    SampleSet,
    annealer_facade,
    gauge_stream,
    ising_energy,
    load_sampleset,
    mean_energy,
    moments_from_samples,
    problem_to_system,
    sample_exact,
    save_sampleset,
)
from qbm_forge.schedule import (
    IsingProblem,
    PauseQuenchSpec,
    default_curve,
    gauge_apply,
    interpolate_curve,
    random_ising_problem,
    temperature_to_beta,
)


@pytest.fixture(scope="module")
def curve():
    return default_curve()


def empirical(samples: SampleSet, n: int) -> np.ndarray:
    p = np.zeros(2**n)
    np.add.at(p, spins_to_index(samples.spins), samples.occurrences)
    return p / p.sum()


def test_ising_energy_examples():
    assert ising_energy(IsingProblem([0, 0], {(0, 1): 0.0}), [1, -1]) == 0
    assert ising_energy(IsingProblem([1, -1], {(0, 1): 0.5}), [1, 1]) == pytest.approx(0.5)
    with pytest.raises(ValidationError):
        ising_energy(IsingProblem([1, -1]), [1, 1, 1])


@pytest.mark.parametrize("seed", range(5))
def test_ising_energy_matches_diagonal_hamiltonian(seed):
    p = random_ising_problem(5, 0.5, seed)
    states = basis_spins(5)
    direct = np.array([
        sum(p.h[i] * s[i] for i in range(5)) + sum(v * s[i] * s[j] for (i, j), v in p.J.items())
        for s in states
    ])
    np.testing.assert_allclose(ising_energy(p, states), direct, atol=1e-12)
    np.testing.assert_allclose(diagonal_energies(problem_to_system(p)), direct, atol=1e-12)


def test_infinite_temperature_is_uniform(curve):
    system = problem_to_system(random_ising_problem(3, 0.5, 0))
    n = 100_000
    s = sample_exact(system, curve, 0.5, 1e6, n, 0)
    counts = empirical(s, 3) * n
    sigma = np.sqrt(n * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - n / 8) <= 4 * sigma)


@pytest.mark.parametrize("seed", range(3))
def test_s_one_matches_classical_boltzmann(curve, seed):
    problem = random_ising_problem(3, 0.5, seed)
    T = 30.0
    s = sample_exact(problem_to_system(problem), curve, 1.0, T, 100_000, seed)
    beta_b = temperature_to_beta(T) * interpolate_curve(curve, 1.0)[1]
    logp = -beta_b * ising_energy(problem, basis_spins(3))
    p = np.exp(logp - logsumexp(logp))
    assert kl_divergence(empirical(s, 3), p) <= 5e-4


def test_sample_exact_deterministic_and_consistent(curve):
    system = problem_to_system(random_ising_problem(4, 0.5, 1))
    a = sample_exact(system, curve, 0.7, 20.0, 5000, 42)
    b = sample_exact(system, curve, 0.7, 20.0, 5000, 42)
    assert np.array_equal(a.spins, b.spins) and np.array_equal(a.occurrences, b.occurrences)
    assert np.array_equal(a.energies, b.energies)
    assert a.n_samples == 5000
    assert a.check_energies(IsingProblem(-system.bias, {k: -v for k, v in system.weights.items()}))


def test_sample_exact_errors(curve):
    with pytest.raises(CapacityError):
        sample_exact(problem_to_system(IsingProblem(np.zeros(15))), curve, 1.0, 10.0, 1, 0)
    with pytest.raises(ValidationError):
        sample_exact(problem_to_system(IsingProblem([0.0])), curve, 1.0, 10.0, 0, 0)


def test_facade_identity_gauge_equals_sample_exact(curve):
    problem = random_ising_problem(4, 0.5, 3)
    sets = annealer_facade(problem, None, curve, 20.0, 0.8, 1000, 1, 7, gauge_vectors=[np.ones(4)])
    _, sample_rng = gauge_stream(7, 0)
    direct = sample_exact(problem_to_system(problem), curve, 0.8, 20.0, 1000, sample_rng)
    assert np.array_equal(sets[0].spins, direct.spins)
    assert np.array_equal(sets[0].occurrences, direct.occurrences)
    np.testing.assert_allclose(sets[0].energies, direct.energies, atol=1e-12)


def test_facade_limits_and_meta(curve):
    problem = random_ising_problem(3, 0.5, 0)
    with pytest.raises(ValidationError):
        annealer_facade(problem, None, curve, 20.0, 1.0, MAX_SAMPLES_PER_SET + 1)
    sets = annealer_facade(problem, PauseQuenchSpec(0.55), curve, 20.0, 0.55, 100, 3, 0)
    assert len(sets) == 3
    assert [s.meta["gauge_id"] for s in sets] == [0, 1, 2]
    assert all("schedule" in s.meta for s in sets)
    assert all(s.check_energies(problem) for s in sets)


def test_facade_deterministic(curve):
    problem = random_ising_problem(5, 0.5, 2)
    a = annealer_facade(problem, None, curve, 20.0, 0.9, 500, 4, 11)
    b = annealer_facade(problem, None, curve, 20.0, 0.9, 500, 4, 11)
    for x, y in zip(a, b):
        assert np.array_equal(x.spins, y.spins) and x.meta == y.meta


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 8), s_point=st.sampled_from([0.3, 0.6, 1.0]))
def test_gauged_exact_distribution_identical(seed, n, s_point):
    curve = default_curve()
    rng = np.random.default_rng(seed)
    problem = random_ising_problem(n, 0.5, seed)
    r = rng.choice([-1, 1], n)
    A, B = interpolate_curve(curve, s_point)
    beta = temperature_to_beta(20.0)
    p = density_diagonal(ExactModel.from_system(problem_to_system(problem), A, B), beta).probabilities
    q = density_diagonal(ExactModel.from_system(problem_to_system(gauge_apply(problem, r)), A, B),
                         beta).probabilities
    # relabel the gauged distribution back onto the original basis
    q_back = np.empty_like(q)
    q_back[spins_to_index(basis_spins(n) * r)] = q
    mask = p > 0
    assert abs(float(np.sum(p[mask] * np.log(p[mask] / q_back[mask])))) <= 1e-12


def _worst_pairwise_kl(energy_sets, lo, hi):
    hists = [histogram(e, 32, (lo, hi)).probabilities for e in energy_sets]
    return max(kl_divergence(hists[i], hists[j], smoothing="relative", epsilon=1e-6)
               for i, j in itertools.permutations(range(len(hists)), 2))


def test_facade_gauge_sets_mutually_consistent(curve):
    # a concentrated energy distribution keeps the multinomial noise floor below the bound
    problem = random_ising_problem(12, 1.0, 5)
    sets = annealer_facade(problem, None, curve, 20.0, 1.0, 10_000, 10, 3)
    energies = [s.expanded_energies() for s in sets]
    lo = min(e.min() for e in energies)
    hi = max(e.max() for e in energies)
    assert _worst_pairwise_kl(energies, lo, hi) <= 2e-3


def test_facade_gauge_spread_matches_iid_null(curve):
    # broad distributions: compare against i.i.d. draws from the exact energy distribution
    problem = random_ising_problem(12, 0.1, 5)
    T, n = 20.0, 10_000
    sets = annealer_facade(problem, None, curve, T, 1.0, n, 10, 3)
    energies = [s.expanded_energies() for s in sets]
    system = problem_to_system(problem)
    B = interpolate_curve(curve, 1.0)[1]
    probs = density_diagonal(ExactModel.from_system(system, 0.0, B), temperature_to_beta(T)).probabilities
    state_e = ising_energy(problem, basis_spins(12))
    lo, hi = state_e.min(), state_e.max()
    observed = _worst_pairwise_kl(energies, lo, hi)
    rng = np.random.default_rng(0)
    null = [_worst_pairwise_kl([state_e[rng.choice(probs.size, n, p=probs)] for _ in range(10)], lo, hi)
            for _ in range(40)]
    assert observed <= np.quantile(null, 0.975)


def test_facade_moments_match_exact_at_unit_effective_beta(curve):
    problem = random_ising_problem(4, 0.5, 8)
    B1 = interpolate_curve(curve, 1.0)[1]
    T = 1000 / (20.83661912 * (1 / B1))
    n = 10_000
    sets = annealer_facade(problem, None, curve, T, 1.0, n, 5, 4)
    system = problem_to_system(problem)
    # no transverse field at s=1, so the oracle is the classical state at unit beta
    first, second = exact_moments(density_diagonal(ExactModel.from_system(system, 0.0, 1.0), 1.0), system)
    for s in sets:
        f, sec = moments_from_samples(s, list(problem.J))
        sig = np.sqrt(np.maximum(1 - first**2, 1e-12) / n)
        assert np.all(np.abs(f - first) <= 3.5 * sig)
        for k, v in sec.items():
            assert abs(v - second[k]) <= 3.5 * np.sqrt((1 - second[k] ** 2) / n)


def test_moments_trivial_cases():
    s = SampleSet(np.ones((1, 3), np.int8), np.zeros(1), np.array([4]))
    f, sec = moments_from_samples(s, [(0, 1), (1, 2)])
    assert np.all(f == 1) and all(v == 1 for v in sec.values())
    s = SampleSet(np.array([[1, 1], [-1, -1]], np.int8), np.zeros(2), np.array([3, 3]))
    f, _ = moments_from_samples(s, [(0, 1)])
    assert np.all(f == 0)
    with pytest.raises(ValidationError):
        moments_from_samples(SampleSet(np.zeros((0, 2), np.int8), np.zeros(0), np.zeros(0, int)), [])


def test_sample_moments_match_exact_moments(curve):
    problem = random_ising_problem(4, 0.5, 9)
    system = problem_to_system(problem)
    n = 100_000
    T = 25.0
    s = sample_exact(system, curve, 0.6, T, n, 1)
    A, B = interpolate_curve(curve, 0.6)
    d = density_diagonal(ExactModel.from_system(system, A, B), temperature_to_beta(T))
    first, second = exact_moments(d, system)
    f, sec = moments_from_samples(s, list(problem.J))
    assert np.all(np.abs(f - first) <= 3.5 * np.sqrt((1 - first**2) / n))
    for k, v in sec.items():
        assert abs(v - second[k]) <= 3.5 * np.sqrt((1 - second[k] ** 2) / n)


def test_sampleset_validation():
    with pytest.raises(ValidationError):
        SampleSet(np.array([[1, 0]]), np.zeros(1), np.ones(1, int))
    with pytest.raises(ValidationError):
        SampleSet(np.array([[1, 1]]), np.zeros(2), np.ones(1, int))


def test_sampleset_round_trip(tmp_path, curve):
    problem = random_ising_problem(3, 0.5, 0)
    s = annealer_facade(problem, PauseQuenchSpec(0.55), curve, 20.0, 0.55, 500, 1, 0)[0]
    path = tmp_path / "set.csv"
    save_sampleset(s, path)
    back = load_sampleset(path)
    assert np.array_equal(back.spins, s.spins)
    assert np.array_equal(back.occurrences, s.occurrences)
    np.testing.assert_allclose(back.energies, s.energies, rtol=1e-15)
    assert back.meta == s.meta
    assert back.check_energies(problem)
    assert mean_energy(back) == pytest.approx(mean_energy(s))


def test_problem_to_system_sign_mapping():
    system = problem_to_system(IsingProblem([1.0, -2.0], {(0, 1): 0.5}))
    assert system.bias.tolist() == [-1.0, 2.0] and system.weights[(0, 1)] == -0.5
    assert np.all(system.gamma == 1)
    assert isinstance(system, SpinSystem)
