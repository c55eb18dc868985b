"""Two-time correlation/response kernels, the DMFT state, and kernel I/O."""

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import StructuralError
from .grid import TimeGrid

COVARIANCE = "covariance"
RESPONSE = "response"

_MAGIC = b"DMFTKRN1"
_KIND_CODES = {COVARIANCE: 0, RESPONSE: 1, "array": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class TwoTimeKernel:
    """(N+1) x (N+1) array of rows x cols blocks on a TimeGrid.

    Covariance kernels satisfy block (t,s) == block (s,t)^T and joint PSD;
    response kernels are strictly causal: block (t,s) == 0 for s >= t.
    """

    grid: TimeGrid
    rows: int
    cols: int
    blocks: np.ndarray
    kind: str

    def __post_init__(self):
        p = self.grid.n_points
        expect = (p, p, self.rows, self.cols)
        if self.blocks.shape != expect:
            raise StructuralError(f"kernel blocks have shape {self.blocks.shape}, want {expect}")
        if self.kind not in (COVARIANCE, RESPONSE):
            raise StructuralError(f"unknown kernel kind {self.kind!r}")

    @classmethod
    def zeros(cls, grid, rows, cols, kind):
        p = grid.n_points
        return cls(grid, rows, cols, np.zeros((p, p, rows, cols)), kind)

    def copy(self):
        return replace(self, blocks=self.blocks.copy())

    def full_matrix(self) -> np.ndarray:
        """Flatten blocks to a (P*rows) x (P*cols) matrix, time-major."""
        p = self.grid.n_points
        return self.blocks.transpose(0, 2, 1, 3).reshape(p * self.rows, p * self.cols)

    @classmethod
    def from_full_matrix(cls, grid, rows, cols, mat, kind):
        p = grid.n_points
        blocks = mat.reshape(p, rows, p, cols).transpose(0, 2, 1, 3).copy()
        return cls(grid, rows, cols, blocks, kind)

    def symmetry_error(self) -> float:
        return float(np.abs(self.blocks - self.blocks.transpose(1, 0, 3, 2)).max())

    def causality_ok(self) -> bool:
        """Exact zeros on and above the diagonal (response kernels)."""
        p = self.grid.n_points
        t, s = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        return bool(np.all(self.blocks[s >= t] == 0.0))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.full_matrix() + self.full_matrix().T)).min())


def psd_project(kernel: TwoTimeKernel) -> TwoTimeKernel:
    """Symmetrize and clip negative eigenvalues of a covariance kernel.

    Already-PSD input is returned unchanged apart from symmetrization, so the
    map is idempotent up to roundoff.
    """
    if kernel.kind != COVARIANCE:
        raise StructuralError("psd_project applies to covariance kernels")
    mat = kernel.full_matrix()
    mat = 0.5 * (mat + mat.T)
    sym = TwoTimeKernel.from_full_matrix(kernel.grid, kernel.rows, kernel.cols, mat, kernel.kind)
    w, v = np.linalg.eigh(mat)
    if w.min() >= 0.0:
        return sym
    clipped = (v * np.clip(w, 0.0, None)) @ v.T
    clipped = 0.5 * (clipped + clipped.T)
    return TwoTimeKernel.from_full_matrix(kernel.grid, kernel.rows, kernel.cols, clipped, kernel.kind)


def psd_project_with_star(kernel: TwoTimeKernel, star: np.ndarray, star_star: np.ndarray):
    """Joint PSD projection of a covariance kernel with its star blocks."""
    p, k = kernel.grid.n_points, kernel.rows
    k_star = star.shape[-1]
    dim = p * k + k_star
    full = np.zeros((dim, dim))
    full[: p * k, : p * k] = kernel.full_matrix()
    full[: p * k, p * k :] = star.reshape(p * k, k_star)
    full[p * k :, : p * k] = star.reshape(p * k, k_star).T
    full[p * k :, p * k :] = star_star
    full = 0.5 * (full + full.T)
    w, v = np.linalg.eigh(full)
    if w.min() < 0.0:
        full = (v * np.clip(w, 0.0, None)) @ v.T
        full = 0.5 * (full + full.T)
    out = TwoTimeKernel.from_full_matrix(
        kernel.grid, k, k, full[: p * k, : p * k], COVARIANCE
    )
    return out, full[: p * k, p * k :].reshape(p, k, k_star), full[p * k :, p * k :]


@dataclass
class ThetaKernels:
    """(C_theta with star blocks, R_theta): the parameter-side half state."""

    c_theta: TwoTimeKernel
    c_theta_star: np.ndarray  # (P, k, k_star)
    c_star_star: np.ndarray  # (k_star, k_star)
    r_theta: TwoTimeKernel
    stderr: Optional[dict] = None

    def copy(self):
        return ThetaKernels(
            self.c_theta.copy(),
            self.c_theta_star.copy(),
            self.c_star_star.copy(),
            self.r_theta.copy(),
            stderr=self.stderr,
        )


@dataclass
class XiKernels:
    """(C_f, R_f, R_f_star, Gamma): the projection-side half state.

    R_f blocks carry the discrete normalization (delta times the continuous
    response density), matching the discrete recursions that consume them.
    """

    c_f: TwoTimeKernel
    r_f: TwoTimeKernel
    r_f_star: np.ndarray  # (P, k, k_star)
    gamma: np.ndarray  # (P, k, k)
    stderr: Optional[dict] = None

    def copy(self):
        return XiKernels(
            self.c_f.copy(), self.r_f.copy(), self.r_f_star.copy(), self.gamma.copy(),
            stderr=self.stderr,
        )


@dataclass
class DMFTState:
    """Full six-tuple (C_theta(+stars), R_theta, C_f, R_f, R_f_star, Gamma)."""

    theta: ThetaKernels
    xi: XiKernels

    @property
    def grid(self):
        return self.theta.c_theta.grid

    @property
    def c_theta(self):
        return self.theta.c_theta

    @property
    def c_theta_star(self):
        return self.theta.c_theta_star

    @property
    def c_star_star(self):
        return self.theta.c_star_star

    @property
    def r_theta(self):
        return self.theta.r_theta

    @property
    def c_f(self):
        return self.xi.c_f

    @property
    def r_f(self):
        return self.xi.r_f

    @property
    def r_f_star(self):
        return self.xi.r_f_star

    @property
    def gamma(self):
        return self.xi.gamma


# ---------------------------------------------------------------------------
# kernel container: little-endian header + raw float64 payload, bit-exact

def _write_section(fh, name: str, kind: str, grid: TimeGrid, rows, cols, payload: np.ndarray):
    data = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    tag = name.encode("ascii")[:16].ljust(16, b"\0")
    ndim = len(payload.shape)
    fh.write(tag)
    fh.write(struct.pack("<BIIId", _KIND_CODES[kind], grid.N, rows, cols, grid.delta))
    fh.write(struct.pack("<B", ndim))
    fh.write(struct.pack(f"<{ndim}I", *payload.shape))
    fh.write(struct.pack("<Q", len(data)))
    fh.write(data)


def _read_section(fh):
    tag = fh.read(16)
    if len(tag) < 16:
        return None
    name = tag.rstrip(b"\0").decode("ascii")
    kind_code, n, rows, cols, delta = struct.unpack("<BIIId", fh.read(21))
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    (nbytes,) = struct.unpack("<Q", fh.read(8))
    payload = np.frombuffer(fh.read(nbytes), dtype="<f8").reshape(shape).copy()
    return name, _KIND_NAMES[kind_code], n, rows, cols, delta, payload


def _write_header(fh, n_sections: int):
    fh.write(_MAGIC)
    fh.write(struct.pack("<BI", 1 if np.dtype("<f8").byteorder in "<=|" else 0, n_sections))


def _read_header(fh):
    if fh.read(8) != _MAGIC:
        raise StructuralError("not a kernel container file")
    _endian, n_sections = struct.unpack("<BI", fh.read(5))
    return n_sections


def save_kernel(path, kernel: TwoTimeKernel, name="kernel"):
    with open(path, "wb") as fh:
        _write_header(fh, 1)
        _write_section(fh, name, kernel.kind, kernel.grid, kernel.rows, kernel.cols, kernel.blocks)


def load_kernel(path) -> TwoTimeKernel:
    with open(path, "rb") as fh:
        _read_header(fh)
        name, kind, n, rows, cols, delta, payload = _read_section(fh)
    grid = TimeGrid(T=n * delta, delta=delta)
    return TwoTimeKernel(grid, rows, cols, payload, kind)


_STATE_SECTIONS = ("c_theta", "r_theta", "c_f", "r_f", "c_th_star", "c_star2", "r_f_star", "gamma")


def save_state(path, state: DMFTState):
    grid = state.grid
    k = state.c_theta.rows
    k_star = state.c_theta_star.shape[-1]
    with open(path, "wb") as fh:
        _write_header(fh, len(_STATE_SECTIONS))
        _write_section(fh, "c_theta", COVARIANCE, grid, k, k, state.c_theta.blocks)
        _write_section(fh, "r_theta", RESPONSE, grid, k, k, state.r_theta.blocks)
        _write_section(fh, "c_f", COVARIANCE, grid, k, k, state.c_f.blocks)
        _write_section(fh, "r_f", RESPONSE, grid, k, k, state.r_f.blocks)
        _write_section(fh, "c_th_star", "array", grid, k, k_star, state.c_theta_star)
        _write_section(fh, "c_star2", "array", grid, k_star, k_star, state.c_star_star)
        _write_section(fh, "r_f_star", "array", grid, k, k_star, state.r_f_star)
        _write_section(fh, "gamma", "array", grid, k, k, state.gamma)


def load_state(path) -> DMFTState:
    sections = {}
    with open(path, "rb") as fh:
        n_sections = _read_header(fh)
        for _ in range(n_sections):
            rec = _read_section(fh)
            if rec is None:
                raise StructuralError("truncated kernel container")
            sections[rec[0]] = rec
    missing = [s for s in _STATE_SECTIONS if s not in sections]
    if missing:
        raise StructuralError(f"container is missing sections {missing}")
    _, _, n, k, _, delta, _ = sections["c_theta"]
    grid = TimeGrid(T=n * delta, delta=delta)

    def kern(name, kind):
        rec = sections[name]
        return TwoTimeKernel(grid, rec[3], rec[4], rec[6], kind)

    theta = ThetaKernels(
        c_theta=kern("c_theta", COVARIANCE),
        c_theta_star=sections["c_th_star"][6],
        c_star_star=sections["c_star2"][6],
        r_theta=kern("r_theta", RESPONSE),
    )
    xi = XiKernels(
        c_f=kern("c_f", COVARIANCE),
        r_f=kern("r_f", RESPONSE),
        r_f_star=sections["r_f_star"][6],
        gamma=sections["gamma"][6],
    )
    return DMFTState(theta=theta, xi=xi)
