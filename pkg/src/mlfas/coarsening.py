"""Unit coarsening for network layers.

Neurons (rows of a dense weight matrix) or convolution channels (vectorized
per-output-channel kernels) are paired by greedy heavy-edge matching on a
cosine strength-of-connection matrix.  Each matching induces a pair of
sparse transfer operators per layer interface: an averaging map ``pi``
(fine -> coarse) and a piecewise-constant interpolation ``p``
(coarse -> fine) with ``pi @ p = I``.  The optional weighted variant scales
the interpolation by per-unit row norms so that exactly parallel units are
reproduced by the induced projector ``p @ pi``.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class StrengthMatrix:
    """Symmetric similarity scores between units; the diagonal is ignored."""

    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Matching:
    """Pairwise matching of units into aggregates.

    ``partner`` is an involution (``partner[partner[i]] == i``; singletons
    point at themselves) and ``aggregate`` maps every unit to its 0-based
    aggregate id, assigned in visit order.
    """

    partner: np.ndarray
    aggregate: np.ndarray
    num_aggregates: int

    @property
    def n(self) -> int:
        return self.partner.shape[0]

    def aggregate_sizes(self) -> np.ndarray:
        return np.bincount(self.aggregate, minlength=self.num_aggregates)


@dataclass
class LayerTransfer:
    """Interpolation/averaging pair for one layer interface.

    ``p`` is (n x n_c), ``pi`` is (n_c x n), and ``pi @ p = I`` holds by
    construction.  In weighted form ``p`` carries the row norms ``d`` and
    ``pi`` the reciprocal aggregate norm sums.
    """

    p: sp.csr_matrix
    pi: sp.csr_matrix
    weighted: bool = False
    d: np.ndarray | None = None

    @property
    def n_fine(self) -> int:
        return self.p.shape[0]

    @property
    def n_coarse(self) -> int:
        return self.p.shape[1]

    def p_dense(self) -> np.ndarray:
        return self.p.toarray()

    def pi_dense(self) -> np.ndarray:
        return self.pi.toarray()


def strength_from_rows(rows, absolute: bool = False) -> StrengthMatrix:
    """Cosine similarity between the rows of a weight matrix.

    Rows with zero norm get similarity 0 to every other unit.  With
    ``absolute`` the sign is dropped, otherwise anti-parallel rows score -1
    and are never matched for any threshold >= 0.
    """
    r = np.asarray(rows, dtype=np.float64)
    if r.ndim != 2:
        raise ValueError(f"expected a 2-d row stack, got shape {r.shape}")
    norms = np.linalg.norm(r, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = r / safe[:, None]
    g = unit @ unit.T
    dead = norms == 0.0
    g[dead, :] = 0.0
    g[:, dead] = 0.0
    if absolute:
        np.abs(g, out=g)
    # gemm output is not exactly symmetric; the matching assumes S_ij = S_ji
    g = 0.5 * (g + g.T)
    return StrengthMatrix(g)


def greedy_hem(s: StrengthMatrix, theta: float, order=None) -> Matching:
    """Greedy heavy-edge matching.

    Units are visited in ``order`` (natural order by default).  An unmatched
    unit i is paired with the unmatched j != i of maximal S_ij, provided
    S_ij > theta; edges at or below the threshold are disregarded and the
    unit becomes a singleton.  Ties pick the smallest index.
    """
    if not -1.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [-1, 1], got {theta}")
    n = s.n
    values = s.values
    if order is None:
        order = np.arange(n)
    else:
        order = np.asarray(order)
        if sorted(order.tolist()) != list(range(n)):
            raise ValueError("order must be a permutation of 0..n-1")
    partner = np.full(n, -1, dtype=np.int64)
    aggregate = np.full(n, -1, dtype=np.int64)
    n_agg = 0
    for i in order:
        if partner[i] >= 0:
            continue
        candidates = np.flatnonzero(partner < 0)
        candidates = candidates[candidates != i]
        match = -1
        if candidates.size:
            weights = values[i, candidates]
            k = int(np.argmax(weights))  # argmax returns the first (smallest) index on ties
            if weights[k] > theta:
                match = int(candidates[k])
        if match >= 0:
            partner[i] = match
            partner[match] = i
            aggregate[i] = aggregate[match] = n_agg
        else:
            partner[i] = i
            aggregate[i] = n_agg
        n_agg += 1
    return Matching(partner=partner, aggregate=aggregate, num_aggregates=n_agg)


def identity_matching(n: int) -> Matching:
    idx = np.arange(n, dtype=np.int64)
    return Matching(partner=idx.copy(), aggregate=idx.copy(), num_aggregates=n)


def build_transfer(matching: Matching, w_rows=None, weighted: bool = False) -> LayerTransfer:
    """Construct the (pi, p) operator pair for a matching.

    Plain form: p columns are 0/1 aggregate indicators and pi averages
    within each aggregate.  Weighted form scales p by the row norms d_i and
    sets pi rows to 1 / (sum of d over the aggregate), so pi @ p = I still
    holds and parallel matched rows are fixed points of p @ pi.
    """
    n = matching.n
    n_c = matching.num_aggregates
    cols = matching.aggregate
    if weighted:
        if w_rows is None:
            raise ValueError("weighted transfer requires the weight rows")
        rows = np.asarray(w_rows, dtype=np.float64).reshape(n, -1)
        d = np.linalg.norm(rows, axis=1)
        if np.any(d == 0.0):
            warnings.warn(
                "zero-norm rows in weighted transfer; falling back to weight 1",
                RuntimeWarning,
                stacklevel=2,
            )
            d = np.where(d == 0.0, 1.0, d)
        p_vals = d
    else:
        d = None
        p_vals = np.ones(n)
    p = sp.csr_matrix((p_vals, (np.arange(n), cols)), shape=(n, n_c))
    agg_totals = np.bincount(cols, weights=p_vals, minlength=n_c)
    pi_vals = 1.0 / agg_totals[cols]
    pi = sp.csr_matrix((pi_vals, (cols, np.arange(n))), shape=(n_c, n))
    return LayerTransfer(p=p, pi=pi, weighted=weighted, d=d)


def identity_transfer(n: int) -> LayerTransfer:
    eye = sp.identity(n, format="csr")
    return LayerTransfer(p=eye, pi=eye.copy(), weighted=False, d=None)


def _check_length(name: str, v: np.ndarray, expected: int) -> None:
    if v.shape != (expected,):
        raise ValueError(f"{name} expects a vector of length {expected}, got shape {v.shape}")


def apply_pi(t: LayerTransfer, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    _check_length("apply_pi", v, t.n_fine)
    return t.pi @ v


def apply_p(t: LayerTransfer, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    _check_length("apply_p", v, t.n_coarse)
    return t.p @ v


def apply_p_transpose(t: LayerTransfer, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    _check_length("apply_p_transpose", v, t.n_fine)
    return t.p.T @ v
