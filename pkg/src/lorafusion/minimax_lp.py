"""Two-phase dense simplex solver for the worst-case ensembling program.

The epigraph form is

    min c   s.t.   sum_i lam_i = 1,   lam^T M[:, t] <= c  for all t,
                   lam_i >= 0,

with c split into a positive/negative pair so it stays free. Sizes here are
tiny (N <= 32 experts, T <= 64 tasks), so a dense tableau with Bland's
lowest-index pivoting rule is both sufficient and fully deterministic.
"""

from __future__ import annotations

import numpy as np

_TOL = 1e-9


def _pivot(tab: np.ndarray, basis: list[int], row: int, col: int) -> None:
    tab[row] /= tab[row, col]
    for i in range(tab.shape[0]):
        if i != row and tab[i, col] != 0.0:
            tab[i] -= tab[i, col] * tab[row]
    basis[row] = col


def _run_simplex(tab: np.ndarray, basis: list[int], allowed_cols) -> None:
    """Minimize the cost row in-place; Bland's rule on entering and leaving."""
    m = len(basis)
    while True:
        enter = -1
        for j in allowed_cols:
            if tab[-1, j] < -_TOL:
                enter = j
                break
        if enter < 0:
            return
        leave = -1
        best_ratio = None
        for i in range(m):
            coef = tab[i, enter]
            if coef > _TOL:
                ratio = tab[i, -1] / coef
                if (
                    best_ratio is None
                    or ratio < best_ratio - 1e-12
                    or (abs(ratio - best_ratio) <= 1e-12 and basis[i] < basis[leave])
                ):
                    best_ratio = ratio
                    leave = i
        if leave < 0:
            raise ValueError("linear program is unbounded")
        _pivot(tab, basis, leave, enter)


def solve_minimax(m_values: np.ndarray) -> tuple[np.ndarray, float]:
    """Return (lam, c) minimizing max_t lam^T M[:, t] over the simplex."""
    m_values = np.asarray(m_values, dtype=np.float64)
    if m_values.ndim != 2:
        raise ValueError("error matrix must be 2-D")
    if not np.all(np.isfinite(m_values)):
        raise ValueError("error matrix must be finite")
    n, t = m_values.shape
    # columns: lam (n), c+ , c-, slacks (t), artificial (1)
    n_cols = n + 2 + t + 1
    art = n_cols - 1
    rows = t + 1
    tab = np.zeros((rows + 1, n_cols + 1))
    tab[0, :n] = 1.0
    tab[0, art] = 1.0
    tab[0, -1] = 1.0
    for j in range(t):
        tab[1 + j, :n] = m_values[:, j]
        tab[1 + j, n] = -1.0
        tab[1 + j, n + 1] = 1.0
        tab[1 + j, n + 2 + j] = 1.0
    basis = [art] + [n + 2 + j for j in range(t)]

    # phase 1: drive the artificial out
    tab[-1, art] = 1.0
    tab[-1] -= tab[0]  # price out the basic artificial
    _run_simplex(tab, basis, range(n_cols))
    if tab[-1, -1] < -1e-7:
        raise ValueError("linear program is infeasible")
    if art in basis:
        row = basis.index(art)
        for j in range(n_cols - 1):
            if abs(tab[row, j]) > _TOL:
                _pivot(tab, basis, row, j)
                break

    # phase 2: minimize c+ - c-
    tab[-1, :] = 0.0
    tab[-1, n] = 1.0
    tab[-1, n + 1] = -1.0
    for i, var in enumerate(basis):
        if tab[-1, var] != 0.0:
            tab[-1] -= tab[-1, var] * tab[i]
    _run_simplex(tab, basis, range(n_cols - 1))  # artificial may not re-enter

    x = np.zeros(n_cols)
    for i, var in enumerate(basis):
        x[var] = tab[i, -1]
    lam = np.clip(x[:n], 0.0, None)
    lam = lam / lam.sum()
    c = float(x[n] - x[n + 1])
    return lam, c
