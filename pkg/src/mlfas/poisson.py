"""Poisson surrogate-regression data.

Each sample draws a rotated, shifted cosine-product diffusion field kappa on
the unit square, solves -div(kappa grad u) = f with a fixed Gaussian forcing
and homogeneous Dirichlet boundary, and packages (kappa + mesh coordinates)
as input channels with the solution grid as the target.  The solver is a
cell-centered 5-point finite-difference scheme with harmonic-mean face
coefficients, solved by conjugate gradients.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DATASET_MAGIC = b"MLFASDAT"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIq")  # magic, version, count, n, channels, n_val, seed


class SolverError(RuntimeError):
    """Conjugate gradients failed to reach the requested residual."""


class DatasetFormatError(ValueError):
    """Dataset file is not a valid MLFASDAT container."""


@dataclass(frozen=True)
class FieldParams:
    """Diffusion-field parameters: frequencies, phase shifts, rotation."""

    kx: float
    ky: float
    ax: float
    ay: float
    alpha_rot: float


@dataclass
class PoissonSample:
    """One generated problem instance on an n x n cell-centered grid."""

    params: FieldParams
    kappa: np.ndarray
    u: np.ndarray
    f: np.ndarray


@dataclass
class RegressionDataset:
    """Stacked sample tensors with a deterministic train/validation split.

    inputs: (count, channels, n, n); outputs: (count, n, n).  Training
    indices come first, validation indices last.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    n: int
    seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray

    @property
    def count(self) -> int:
        return self.inputs.shape[0]

    @property
    def channels(self) -> int:
        return self.inputs.shape[1]

    def flat_inputs(self) -> np.ndarray:
        return self.inputs.reshape(self.count, -1)

    def flat_outputs(self) -> np.ndarray:
        return self.outputs.reshape(self.count, -1)


def cell_centers(n: int) -> np.ndarray:
    """Coordinates of cell centers on [0, 1] with spacing h = 1/n."""
    return (np.arange(n) + 0.5) / n


def coordinate_grids(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = cell_centers(n)
    return np.meshgrid(c, c, indexing="ij")


def sample_kappa(params: FieldParams, n: int) -> np.ndarray:
    """Diffusion coefficient 1.1 + cos(kx*pi*(x'+ax)) * cos(ky*pi*(y'+ay)).

    (x', y') rotates the domain by alpha about its center, so values stay
    in [0.1, 2.1] everywhere.
    """
    x, y = coordinate_grids(n)
    ca, sa = math.cos(params.alpha_rot), math.sin(params.alpha_rot)
    xr = ca * (x - 0.5) - sa * (y - 0.5) + 0.5
    yr = sa * (x - 0.5) + ca * (y - 0.5) + 0.5
    return 1.1 + np.cos(params.kx * np.pi * (xr + params.ax)) * np.cos(
        params.ky * np.pi * (yr + params.ay)
    )


def forcing(n: int) -> np.ndarray:
    """Fixed Gaussian load 32 * exp(-4 * ((x - 1/4)^2 + (y - 1/4)^2))."""
    x, y = coordinate_grids(n)
    return 32.0 * np.exp(-4.0 * ((x - 0.25) ** 2 + (y - 0.25) ** 2))


def assemble_operator(kappa: np.ndarray) -> sp.csr_matrix:
    """5-point operator with harmonic-mean face transmissibilities.

    Boundary faces sit half a cell from the boundary, giving the doubled
    cell-value coefficient that enforces u = 0 there.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    n = kappa.shape[0]
    if kappa.shape != (n, n):
        raise ValueError(f"kappa must be square, got shape {kappa.shape}")
    if np.any(kappa <= 0):
        raise ValueError("kappa must be positive everywhere")
    h2 = (1.0 / n) ** 2
    tx = 2.0 * kappa[:-1, :] * kappa[1:, :] / (kappa[:-1, :] + kappa[1:, :])
    ty = 2.0 * kappa[:, :-1] * kappa[:, 1:] / (kappa[:, :-1] + kappa[:, 1:])

    idx = np.arange(n * n).reshape(n, n)
    diag = np.zeros((n, n))
    diag[:-1, :] += tx
    diag[1:, :] += tx
    diag[:, :-1] += ty
    diag[:, 1:] += ty
    diag[0, :] += 2.0 * kappa[0, :]
    diag[-1, :] += 2.0 * kappa[-1, :]
    diag[:, 0] += 2.0 * kappa[:, 0]
    diag[:, -1] += 2.0 * kappa[:, -1]

    rows = np.concatenate(
        [idx.ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    )
    cols = np.concatenate(
        [idx.ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    )
    vals = np.concatenate([diag.ravel(), -tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel()])
    return sp.csr_matrix((vals / h2, (rows, cols)), shape=(n * n, n * n))


def solve_poisson(
    kappa: np.ndarray,
    f: np.ndarray,
    rtol: float = 1e-10,
    max_iter: int | None = None,
) -> np.ndarray:
    """Solve the discrete problem by conjugate gradients.

    Converges when ||b - A u|| <= rtol * ||b||; raises SolverError with the
    achieved residual otherwise.
    """
    a = assemble_operator(kappa)
    n = kappa.shape[0]
    b = np.asarray(f, dtype=np.float64).ravel()
    if b.size != n * n:
        raise ValueError(f"forcing has {b.size} entries, expected {n * n}")
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x.reshape(n, n)
    if max_iter is None:
        max_iter = max(1000, 10 * n * n)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for _ in range(max_iter):
        ap = a @ p
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        if math.sqrt(rs_new) <= rtol * bnorm:
            return x.reshape(n, n)
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise SolverError(
        f"conjugate gradients stalled at relative residual "
        f"{math.sqrt(rs) / bnorm:.3e} after {max_iter} iterations (target {rtol:.1e})"
    )


def draw_params(seed: int, index: int) -> FieldParams:
    """Field parameters for one sample, from an independent substream."""
    rng = np.random.default_rng([seed, index])
    return FieldParams(
        kx=rng.uniform(0.5, 4.0),
        ky=rng.uniform(0.5, 4.0),
        ax=rng.uniform(0.0, 0.5),
        ay=rng.uniform(0.0, 0.5),
        alpha_rot=rng.uniform(0.0, np.pi / 2.0),
    )


def generate_sample(seed: int, index: int, n: int, f: np.ndarray | None = None) -> PoissonSample:
    params = draw_params(seed, index)
    kappa = sample_kappa(params, n)
    if f is None:
        f = forcing(n)
    u = solve_poisson(kappa, f)
    return PoissonSample(params=params, kappa=kappa, u=u, f=f)


def _split_sizes(count: int, val_fraction: float) -> int:
    if count < 2:
        raise ValueError("need at least 2 samples to split")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    return min(count - 1, max(1, round(count * val_fraction)))


def generate_dataset(
    count: int,
    n: int,
    seed: int,
    val_fraction: float = 0.2,
    channels: int = 3,
) -> RegressionDataset:
    """Generate ``count`` samples on an n x n grid, deterministic in seed.

    Input channels are [kappa, x, y] by default, or [kappa, f, x, y] with
    ``channels=4``.  The forcing has no per-sample randomness, which is why
    the 3-channel form can drop it.
    """
    if channels not in (3, 4):
        raise ValueError("channels must be 3 or 4")
    n_val = _split_sizes(count, val_fraction)
    f = forcing(n)
    x, y = coordinate_grids(n)
    inputs = np.empty((count, channels, n, n))
    outputs = np.empty((count, n, n))
    for i in range(count):
        try:
            sample = generate_sample(seed, i, n, f=f)
        except SolverError as e:
            raise SolverError(f"sample {i}: {e}") from e
        if channels == 3:
            inputs[i] = np.stack([sample.kappa, x, y])
        else:
            inputs[i] = np.stack([sample.kappa, f, x, y])
        outputs[i] = sample.u
    return RegressionDataset(
        inputs=inputs,
        outputs=outputs,
        n=n,
        seed=seed,
        train_idx=np.arange(count - n_val),
        val_idx=np.arange(count - n_val, count),
    )


def write_dataset(ds: RegressionDataset, path) -> None:
    """Write the versioned little-endian binary container."""
    n_val = ds.val_idx.size
    header = _HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, ds.count, ds.n, ds.channels, n_val, ds.seed
    )
    payload = np.concatenate(
        [ds.inputs.reshape(ds.count, -1), ds.outputs.reshape(ds.count, -1)], axis=1
    ).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_dataset(path) -> RegressionDataset:
    """Read a dataset container; raises DatasetFormatError on a bad file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file shorter than the header")
    magic, version, count, n, channels, n_val, seed = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    per_sample = (channels + 1) * n * n
    expected = _HEADER.size + count * per_sample * 8
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} bytes for {count} samples, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(count, per_sample)
    flat = flat.astype(np.float64)
    inputs = flat[:, : channels * n * n].reshape(count, channels, n, n)
    outputs = flat[:, channels * n * n :].reshape(count, n, n)
    return RegressionDataset(
        inputs=inputs,
        outputs=outputs,
        n=n,
        seed=seed,
        train_idx=np.arange(count - n_val),
        val_idx=np.arange(count - n_val, count),
    )
