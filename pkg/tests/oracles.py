"""Shared brute-force oracles used by the unit and acceptance tests.

Everything here works on dense leaf-resolution matrices assembled from
the defining discrete equations, independently of the package's sweep
solvers.
"""

import numpy as np


def projector(tree, level):
    """Dense matrix of E_level followed by embedding back to the leaves."""
    block = 1 << (tree.N - level)
    return np.kron(np.eye(1 << level), np.full((block, block), 1.0 / block))


def repr_operator(tree, j):
    """Dense leaf operator for the representation integrand at step j."""
    dw = np.tile(np.repeat(np.array([-tree.sqdt, tree.sqdt]),
                           1 << (tree.N - 1 - j)), 1 << j)
    return projector(tree, j) @ np.diag(dw) / tree.dt


def dense_bsvie_oracle(scenario, tree, fwd, u):
    """Monolithic linear solve for the C-adapted rows (m = 1 only).

    Unknowns: full-range row fields Q_i = psi_i + dt sum_{j<N} g_ij and the
    leaf-embedded diagonal Y_i; Z(i, j) is the representation integrand of
    Q_i at every step j, and Y_i = E_i[Q_i] - dt sum_{j<i} g_ij.
    """
    assert scenario.m == 1 and scenario.coeffs.g.is_affine
    co = scenario.coeffs
    N, L = tree.N, tree.n_leaves
    n_rows = N + 1
    size = 2 * n_rows * L
    K = np.eye(size)
    rhs = np.zeros(size)
    x_leaf = fwd.X.level(N)
    gy = co.g.matrices["y"][0, 0]
    gz = co.g.matrices["z"][0, 0]

    def g_known(i, j):
        base = co.g.value(tree.t(i), tree.t(j), x=fwd.X.level(j),
                          y=np.zeros((1 << j, 1)), z=np.zeros((1 << j, 1)),
                          u=u.level(j))
        return np.repeat(base[:, 0], 1 << (N - j))

    def q_slice(i):
        return slice(i * L, (i + 1) * L)

    def y_slice(i):
        return slice((n_rows + i) * L, (n_rows + i + 1) * L)

    for i in range(n_rows):
        rhs[q_slice(i)] = co.psi.value(tree.t(i), x_leaf)[:, 0]
        for j in range(N):
            k = co.g.kernel(tree.t(i), tree.t(j))
            rhs[q_slice(i)] += tree.dt * g_known(i, j)
            K[q_slice(i), y_slice(j)] -= tree.dt * k * gy * projector(tree, j)
            K[q_slice(i), q_slice(i)] -= tree.dt * k * gz * repr_operator(tree, j)
        K[y_slice(i), q_slice(i)] -= projector(tree, i)
        for j in range(i):
            k = co.g.kernel(tree.t(i), tree.t(j))
            rhs[y_slice(i)] -= tree.dt * g_known(i, j)
            K[y_slice(i), y_slice(j)] += tree.dt * k * gy * projector(tree, j)
            K[y_slice(i), q_slice(i)] += tree.dt * k * gz * repr_operator(tree, j)
    sol = np.linalg.solve(K, rhs)
    Y = [sol[y_slice(i)] for i in range(n_rows)]
    Z = [[repr_operator(tree, j) @ sol[q_slice(i)] for j in range(N)]
         for i in range(n_rows)]
    return Y, Z
