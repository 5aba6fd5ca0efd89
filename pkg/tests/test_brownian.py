import numpy as np
import pytest
from scipy import stats

from truncem import brownian
from truncem.brownian import QUANTUM, BrownianGrid, coarsen, generate
from truncem.core import ConfigurationError


def test_generate_shape_and_metadata():
    g = generate(7, 3, 1e-3, 1.0, dim_w=2)
    assert g.increments.shape == (1000, 2)
    assert g.n_steps == 1000
    assert (g.seed, g.path_id, g.dim_w) == (7, 3, 2)


def test_generate_is_deterministic():
    a = generate(11, 0, 2.0**-10, 1.0)
    b = generate(11, 0, 2.0**-10, 1.0)
    assert np.array_equal(a.increments, b.increments)
    assert a == b


def test_distinct_paths_differ():
    a = generate(11, 0, 2.0**-10, 1.0)
    b = generate(11, 1, 2.0**-10, 1.0)
    assert not np.array_equal(a.increments, b.increments)


def test_distinct_seeds_differ():
    assert not np.array_equal(generate(1, 0, 0.01, 1.0).increments, generate(2, 0, 0.01, 1.0).increments)


def test_increments_are_read_only():
    g = generate(1, 0, 0.01, 1.0)
    with pytest.raises(ValueError):
        g.increments[0, 0] = 1.0


def test_sample_variance():
    g = generate(2024, 0, 1e-3, 100.0)
    assert g.increments.size == 10**5
    var = g.increments.var()
    assert 0.95e-3 <= var <= 1.05e-3
    assert abs(g.increments.mean()) < 4 * np.sqrt(1e-3 / 1e5)


def test_ks_against_standard_normal():
    g = generate(99, 5, 1e-3, 100.0)
    z = g.increments.ravel() / np.sqrt(1e-3)
    stat = stats.kstest(z, "norm").statistic
    # asymptotic 1% critical value
    assert stat < 1.63 / np.sqrt(z.size)


def test_matches_independent_inverse_cdf_computation():
    seed, pid, step = 5, 2, 1e-2
    raw = np.random.Philox(key=seed + (pid << 64)).random_raw(300)
    u = (np.floor(raw / 2.0**11) + 0.5) / 2.0**53
    expected = stats.norm.ppf(u) * np.sqrt(step)
    got = generate(seed, pid, step, 3.0).increments.ravel()
    assert np.max(np.abs(got - expected)) <= QUANTUM


def test_increments_on_dyadic_lattice():
    inc = generate(3, 0, 1e-3, 1.0).increments
    assert np.array_equal(np.rint(inc / QUANTUM) * QUANTUM, inc)


def test_block_access_matches_full_generation():
    full = generate(8, 4, 1e-3, 2.0, dim_w=3).increments
    part = brownian.increment_block(8, 4, 1e-3, 517, 1203, dim_w=3)
    assert np.array_equal(part, full[517:1203])


def test_multi_path_blocks_match_single_paths():
    blocks = brownian.increment_blocks(8, [3, 0, 9], 1e-2, 10, 50)
    for row, pid in zip(blocks, [3, 0, 9]):
        assert np.array_equal(row, generate(8, pid, 1e-2, 1.0).increments[10:50])


def test_non_divisible_horizon_rejected():
    with pytest.raises(ConfigurationError):
        generate(1, 0, 0.3, 1.0)


def test_coarsen_factor_one_is_identity():
    g = generate(1, 0, 0.01, 1.0)
    assert coarsen(g, 1) == g


def test_coarsen_pairs():
    inc = np.array([[1.0], [2.0], [3.0], [4.0]])
    g = BrownianGrid(0.25, 1.0, 1, inc, 0, 0)
    c = coarsen(g, 2)
    assert np.array_equal(c.increments, [[3.0], [7.0]])
    assert c.finest_step == 0.5


def test_coarsen_is_associative_bitwise():
    g = generate(17, 1, 2.0**-12, 4.0)
    assert np.array_equal(coarsen(coarsen(g, 2), 2).increments, coarsen(g, 4).increments)
    assert np.array_equal(coarsen(coarsen(g, 8), 4).increments, coarsen(coarsen(g, 4), 8).increments)


def test_coarse_partial_sums_equal_fine_partial_sums_exactly():
    g = generate(4, 0, 2.0**-12, 8.0, dim_w=2)
    for factor in (2, 16, 128):
        c = coarsen(g, factor)
        assert np.array_equal(c.path(), g.path()[::factor])


def test_coarsen_rejects_non_divisor():
    g = generate(1, 0, 0.01, 1.0)
    with pytest.raises(ConfigurationError):
        coarsen(g, 3)
    with pytest.raises(ConfigurationError):
        coarsen(g, 0)


def test_path_starts_at_zero():
    p = generate(1, 0, 0.01, 1.0).path()
    assert p.shape == (101, 1)
    assert np.all(p[0] == 0.0)


def test_dump_load_round_trip(tmp_path):
    g = generate(2**63 + 5, 12, 2.0**-8, 2.0, dim_w=2)
    f = tmp_path / "grid.bin"
    brownian.dump(g, f)
    assert f.stat().st_size == 40 + g.increments.size * 8
    assert brownian.load(f) == g


def test_seed_range_checked():
    with pytest.raises(ConfigurationError):
        generate(-1, 0, 0.1, 1.0)
