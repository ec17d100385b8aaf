import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ncl_scopf.sparse import (
    NotConverged,
    SparseSym,
    ZeroPivot,
    factorize,
    fill_count,
    solve_refined,
    symbolic_analysis,
    symbolic_order,
)
from tests.oracles.fill import fill_by_elimination, inertia_by_eig


def natural(M):
    return symbolic_analysis(M, perm=np.arange(M.n))


def kkt_matrix(rng, n, m, density=0.3, reg=1.0):
    """[[H + D, J^T], [J, -C]] with SPD (1,1) block and positive C."""
    h = rng.normal(size=(n, n)) * (rng.random((n, n)) < density)
    h = h @ h.T + reg * np.eye(n)
    j = rng.normal(size=(m, n)) * (rng.random((m, n)) < density)
    c = np.diag(rng.uniform(0.01, 1.0, m))
    return np.block([[h, j.T], [j, -c]])


def test_identity():
    F = factorize(SparseSym.from_dense(np.eye(3)))
    assert np.array_equal(F.D, np.ones(3))
    assert F.inertia == (3, 0, 0)


def test_diagonal_signs():
    assert factorize(SparseSym.from_dense(np.diag([2.0, -3.0]))).inertia == (1, 1, 0)


def test_zero_pivot_natural_order():
    M = SparseSym.from_dense([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ZeroPivot) as exc:
        factorize(M, natural(M))
    # 0-based elimination step: the first pivot
    assert exc.value.index == 0
    ev = np.linalg.eigvalsh(M.toarray())
    assert np.allclose(sorted(ev), [-1.0, 1.0])


def test_finalize_sums_duplicates_and_sorts():
    M = SparseSym(3, [2, 0, 2, 1], [0, 0, 0, 1], [1.0, 2.0, 3.0, 4.0]).finalize()
    assert M.nnz == 3
    assert np.allclose(M.toarray(), [[2, 0, 4], [0, 4, 0], [4, 0, 0]])
    key = M.cols * 3 + M.rows
    assert np.all(np.diff(key) > 0)


def test_rejects_upper_triangle():
    with pytest.raises(ValueError):
        SparseSym(2, [0], [1], [1.0])


def test_solve_refined_examples():
    x, res = solve_refined(factorize(SparseSym.from_dense(np.eye(3))), SparseSym.from_dense(np.eye(3)), [1, 2, 3])
    assert np.allclose(x, [1, 2, 3]) and res <= 1e-8
    M = SparseSym.from_dense(np.diag([2.0, -3.0]))
    x, _ = solve_refined(factorize(M), M, [2.0, 3.0])
    assert np.allclose(x, [1.0, -1.0])


def test_solve_refined_random_kkt():
    rng = np.random.default_rng(3)
    a = kkt_matrix(rng, 30, 20)
    M = SparseSym.from_dense(a)
    b = rng.normal(size=50)
    x, res = solve_refined(factorize(M), M, b)
    assert res <= 1e-8
    assert np.max(np.abs(a @ x - b)) / max(1, np.max(np.abs(b))) <= 1e-8


def test_solve_refined_reports_failure():
    rng = np.random.default_rng(0)
    a = kkt_matrix(rng, 6, 4)
    M = SparseSym.from_dense(a)
    F = factorize(M)
    other = SparseSym.from_dense(a + np.diag(np.r_[np.full(6, 5.0), np.zeros(4)]))
    with pytest.raises(NotConverged) as exc:
        solve_refined(F, other, np.ones(10), max_sweeps=1)
    assert exc.value.residual > 1e-8
    _, res = solve_refined(F, other, np.ones(10), max_sweeps=1, raise_on_fail=False)
    assert res > 1e-8


def test_symbolic_order_diagonal_and_tridiagonal():
    n = 8
    perm = symbolic_order(n, np.arange(n), np.arange(n))
    assert sorted(perm.tolist()) == list(range(n))
    tri = np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
    M = SparseSym.from_dense(tri)
    assert fill_count(M, np.arange(n)) == n - 1
    assert fill_by_elimination(tri != 0, np.arange(n)) == n - 1


def test_arrow_apex_last():
    n = 40
    a = np.eye(n) * 4.0
    a[0, 1:] = a[1:, 0] = 1.0
    M = SparseSym.from_dense(a)
    perm = symbolic_order(n, M.rows, M.cols)
    # the apex ties with the last leaf once the others are gone
    assert 0 in perm[-2:]
    nnz_l = fill_count(M, perm)
    assert nnz_l == fill_by_elimination(a != 0, perm) == n - 1
    # natural order puts the apex first and fills everything
    assert fill_by_elimination(a != 0, np.arange(n)) == n * (n - 1) // 2


def test_symbolic_order_deterministic():
    rng = np.random.default_rng(7)
    M = SparseSym.from_dense(kkt_matrix(rng, 25, 10))
    assert np.array_equal(symbolic_order(M.n, M.rows, M.cols), symbolic_order(M.n, M.rows, M.cols))


def test_symbolic_fill_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(5):
        a = kkt_matrix(rng, 15, 8, density=0.2)
        M = SparseSym.from_dense(a)
        perm = symbolic_order(M.n, M.rows, M.cols)
        assert fill_count(M, perm) == fill_by_elimination(a != 0, perm)


@given(st.integers(2, 25), st.integers(1, 15), st.integers(0, 2**32 - 1))
def test_reconstruction_and_inertia(n, m, seed):
    rng = np.random.default_rng(seed)
    a = kkt_matrix(rng, n, m)
    M = SparseSym.from_dense(a)
    F = factorize(M)
    L = F.L().toarray()
    P = a[np.ix_(F.perm, F.perm)]
    err = np.linalg.norm(P - L @ np.diag(F.D) @ L.T) / np.linalg.norm(a)
    assert err <= 1e-10
    assert F.inertia == inertia_by_eig(a) == (n, m, 0)
    assert sum(F.inertia) == n + m


@given(st.integers(0, 2**32 - 1))
def test_factorization_bitwise_deterministic(seed):
    rng = np.random.default_rng(seed)
    M = SparseSym.from_dense(kkt_matrix(rng, 12, 6))
    F1, F2 = factorize(M), factorize(M)
    assert F1.D.tobytes() == F2.D.tobytes()
    assert F1.Lx.tobytes() == F2.Lx.tobytes()


def test_matrix_market_dump(tmp_path):
    M = SparseSym.from_dense([[2.0, 1.0], [1.0, -1.0]])
    path = tmp_path / "m.mtx"
    M.write_matrix_market(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("%%MatrixMarket matrix coordinate real symmetric")
    assert lines[1] == "2 2 3"
    import scipy.io

    assert np.allclose(scipy.io.mmread(str(path)).toarray(), M.toarray())
