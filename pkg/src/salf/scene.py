"""Core scene representation: sparse multi-scale voxel grids of local linear fields.

A voxel is an axis-aligned cube carrying a small linear implicit field: a
geometry 4-vector (SDF or log-density), a 3x3 color field over local
coordinates, a 3x4 spherical-harmonics block for view dependence, and two
positive shape parameters controlling the SDF-to-density transfer.  Voxels
live on a power-of-two grid hierarchy: a voxel at refinement level L has edge
``base_edge / 2**L`` and integer coordinates ``ijk`` on that level's grid.

All field evaluators are pure functions over arrays and broadcast over a
leading batch dimension; both renderers and the trainer share them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .rotations import IDENTITY_QUAT, quat_slerp, quat_to_matrix

DENSITY_SDF = "sdf"
DENSITY_RAW = "raw"

# Real spherical harmonics, bands l = 0, 1, in the fixed order
# (DC, Y1,-1, Y1,0, Y1,1) = (c0, c1*y, c1*z, c1*x).
SH_C0 = 0.2820947918
SH_C1 = 0.4886025119

DEFAULT_BUDGET = 2_500_000
ALPHA_MAX = 1.0 - 1e-12  # opacity ceiling keeping log-transmittance finite
INIT_A_OCCUPIED = 2.0
INIT_A_EMPTY = 0.1
INIT_B = 0.2


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned scene volume with its coarsest grid edge and level count."""

    aabb_min: np.ndarray
    aabb_max: np.ndarray
    base_edge: float
    max_levels: int

    def __post_init__(self):
        object.__setattr__(self, "aabb_min", np.asarray(self.aabb_min, dtype=np.float64))
        object.__setattr__(self, "aabb_max", np.asarray(self.aabb_max, dtype=np.float64))
        if not np.all(self.aabb_min < self.aabb_max):
            raise ValueError("aabb_min must be strictly below aabb_max componentwise")
        if self.base_edge <= 0:
            raise ValueError("base_edge must be positive")
        if self.max_levels < 1:
            raise ValueError("max_levels must be at least 1")

    def level_edge(self, level) -> np.ndarray:
        return self.base_edge / np.exp2(np.asarray(level, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "aabb_min": self.aabb_min.tolist(),
            "aabb_max": self.aabb_max.tolist(),
            "base_edge": self.base_edge,
            "max_levels": self.max_levels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneBounds":
        return cls(
            aabb_min=np.array(d["aabb_min"], dtype=np.float64),
            aabb_max=np.array(d["aabb_max"], dtype=np.float64),
            base_edge=float(d["base_edge"]),
            max_levels=int(d["max_levels"]),
        )


def _rng_uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class SparseVoxelSet:
    """Structure-of-arrays store for voxels of one volume (static scene or actor).

    Geometry arrays (level, ijk) are static; field parameters are the
    learnable state.  Positivity of the density-shape parameters a, b is
    enforced by storing their logarithms.  No two voxels may share a grid
    cell and no stored cube may strictly contain another stored cube
    (subdivision replaces the parent).
    """

    def __init__(self, bounds: SceneBounds, budget: int = DEFAULT_BUDGET):
        self.bounds = bounds
        self.budget = int(budget)
        self.level = np.zeros(0, dtype=np.uint8)
        self.ijk = np.zeros((0, 3), dtype=np.int32)
        self.w_s = np.zeros((0, 4), dtype=np.float64)
        self.w_c = np.zeros((0, 3, 3), dtype=np.float64)
        self.w_sh = np.zeros((0, 3, 4), dtype=np.float64)
        self.log_a = np.zeros(0, dtype=np.float64)
        self.log_b = np.zeros(0, dtype=np.float64)
        self.rotation = np.zeros((0, 4), dtype=np.float64)  # unit quats, identity unless set
        self._lookup: dict[tuple[int, int, int, int], int] = {}

    @property
    def n(self) -> int:
        return self.level.shape[0]

    def __len__(self) -> int:
        return self.n

    # -- construction -----------------------------------------------------

    def add_voxels(self, level, ijk, *, rng: np.random.Generator | None = None,
                   a: float | np.ndarray = INIT_A_EMPTY, b: float | np.ndarray = INIT_B) -> np.ndarray:
        """Append voxels at (level, ijk) with randomly initialized fields.

        Returns the indices of the new voxels.  Raises on duplicates, on
        levels outside [0, max_levels), on cells outside the bounds, and when
        the budget would be exceeded.
        """
        level = np.atleast_1d(np.asarray(level)).astype(np.int64)
        ijk = np.atleast_2d(np.asarray(ijk)).astype(np.int64)
        m = level.shape[0]
        if ijk.shape != (m, 3):
            raise ValueError("ijk must have shape (n, 3)")
        if np.any(level < 0) or np.any(level >= self.bounds.max_levels):
            raise ValueError("voxel level outside [0, max_levels)")
        extent = self.bounds.aabb_max - self.bounds.aabb_min
        n_cells = np.ceil(extent[None, :] / self.bounds.level_edge(level)[:, None] - 1e-9)
        if np.any(ijk < 0) or np.any(ijk >= n_cells):
            raise ValueError("voxel grid coordinates outside scene bounds")
        if self.n + m > self.budget:
            raise ValueError(f"voxel budget exceeded: {self.n + m} > {self.budget}")
        for row in range(m):
            key = (int(level[row]), int(ijk[row, 0]), int(ijk[row, 1]), int(ijk[row, 2]))
            if key in self._lookup:
                raise ValueError(f"duplicate voxel at level={key[0]} ijk={key[1:]}")
            self._lookup[key] = self.n + row

        if rng is None:
            rng = np.random.default_rng(0)
        # Default linear-layer initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
        # fan_in = 3 for the coordinate maps (bias column included), 4 for the SH block.
        w_s = _rng_uniform(rng, 1.0 / np.sqrt(3.0), (m, 4))
        w_c = _rng_uniform(rng, 1.0 / np.sqrt(3.0), (m, 3, 3))
        w_sh = _rng_uniform(rng, 0.5, (m, 3, 4))
        log_a = np.log(np.broadcast_to(np.asarray(a, dtype=np.float64), (m,)))
        log_b = np.log(np.broadcast_to(np.asarray(b, dtype=np.float64), (m,)))

        self.level = np.concatenate([self.level, level.astype(np.uint8)])
        self.ijk = np.concatenate([self.ijk, ijk.astype(np.int32)])
        self.w_s = np.concatenate([self.w_s, w_s])
        self.w_c = np.concatenate([self.w_c, w_c])
        self.w_sh = np.concatenate([self.w_sh, w_sh])
        self.log_a = np.concatenate([self.log_a, log_a])
        self.log_b = np.concatenate([self.log_b, log_b])
        quats = np.broadcast_to(IDENTITY_QUAT, (m, 4)).copy()
        self.rotation = np.concatenate([self.rotation, quats])

        self._check_containment(np.arange(self.n - m, self.n))
        return np.arange(self.n - m, self.n)

    def _check_containment(self, new_idx: np.ndarray) -> None:
        # A coarser stored voxel strictly containing a new one (or vice versa)
        # violates the replacement-on-subdivision invariant.
        for i in new_idx:
            lvl = int(self.level[i])
            cell = self.ijk[i].astype(np.int64)
            for coarser in range(lvl):
                parent = tuple(cell >> (lvl - coarser))
                key = (coarser, int(parent[0]), int(parent[1]), int(parent[2]))
                j = self._lookup.get(key)
                if j is not None and j != i:
                    raise ValueError(
                        f"voxel level={lvl} ijk={tuple(cell)} is contained in stored "
                        f"voxel level={coarser} ijk={parent}"
                    )

    def lookup(self, level: int, i: int, j: int, k: int) -> int:
        """Index of the voxel at (level, ijk), or -1."""
        return self._lookup.get((level, i, j, k), -1)

    # -- derived geometry --------------------------------------------------

    def edges(self, idx=None) -> np.ndarray:
        lv = self.level if idx is None else self.level[idx]
        return self.bounds.level_edge(lv)

    def centers(self, idx=None) -> np.ndarray:
        lv = self.level if idx is None else self.level[idx]
        cells = self.ijk if idx is None else self.ijk[idx]
        edge = self.bounds.level_edge(lv)
        return self.bounds.aabb_min + (cells.astype(np.float64) + 0.5) * edge[..., None]

    def world_to_local(self, p_world: np.ndarray, idx) -> np.ndarray:
        """Normalized local coordinates in [-1, 1]^3 of world points in voxels idx.

        Rotation (when set) is applied as its inverse about the voxel center;
        out-of-cube inputs simply land outside [-1, 1]^3.
        """
        p_world = np.asarray(p_world, dtype=np.float64)
        centers = self.centers(idx)
        edges = self.edges(idx)
        rel = p_world - centers
        q = self.rotation[idx]
        if not np.allclose(q, IDENTITY_QUAT):
            rel = np.einsum("...ji,...j->...i", quat_to_matrix(q), rel)
        return rel * (2.0 / edges[..., None])

    def local_to_world(self, x: np.ndarray, idx) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        centers = self.centers(idx)
        edges = self.edges(idx)
        rel = x * (edges[..., None] / 2.0)
        q = self.rotation[idx]
        if not np.allclose(q, IDENTITY_QUAT):
            rel = np.einsum("...ij,...j->...i", quat_to_matrix(q), rel)
        return centers + rel

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {"w_s": self.w_s, "w_c": self.w_c, "w_sh": self.w_sh,
                "log_a": self.log_a, "log_b": self.log_b}


# -- field evaluation -------------------------------------------------------


def eval_sdf(x: np.ndarray, w_s: np.ndarray) -> np.ndarray:
    """Signed distance W_s . [x, 1] at local coordinates x; meters."""
    x = np.asarray(x, dtype=np.float64)
    return np.einsum("...i,...i->...", w_s[..., :3], x) + w_s[..., 3]


def sdf_to_density(s_pm: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Density transfer a/2 + (a/2) sign(s) (1 - exp(-|s|/b)); sign(0) = 0.

    Monotonically increasing in s_pm: the positive-SDF side is the occupied
    side. Output lies in [0, a].
    """
    s_pm = np.asarray(s_pm, dtype=np.float64)
    return 0.5 * a * (1.0 + np.sign(s_pm) * (1.0 - np.exp(-np.abs(s_pm) / b)))


def eval_density(x: np.ndarray, w_s: np.ndarray, log_a: np.ndarray, log_b: np.ndarray,
                 mode: str = DENSITY_SDF) -> np.ndarray:
    """Density at local coordinates, per the selected geometry mode."""
    if mode == DENSITY_SDF:
        return sdf_to_density(eval_sdf(x, w_s), np.exp(log_a), np.exp(log_b))
    if mode == DENSITY_RAW:
        # w_s doubles as the log-density field in raw mode.
        return np.exp(eval_sdf(x, w_s))
    raise ValueError(f"unknown density mode {mode!r}")


def sh_basis(omega: np.ndarray) -> np.ndarray:
    """4-vector SH basis (bands l = 0, 1) of unit view directions."""
    omega = np.asarray(omega, dtype=np.float64)
    norm = np.linalg.norm(omega, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError("view direction must be unit norm")
    gamma = np.empty(omega.shape[:-1] + (4,), dtype=np.float64)
    gamma[..., 0] = SH_C0
    gamma[..., 1] = SH_C1 * omega[..., 1]
    gamma[..., 2] = SH_C1 * omega[..., 2]
    gamma[..., 3] = SH_C1 * omega[..., 0]
    return gamma


def eval_color(x: np.ndarray, omega: np.ndarray, w_c: np.ndarray, w_sh: np.ndarray) -> np.ndarray:
    """View-dependent color sigmoid(W_c x + W_sh gamma(omega)) in (0, 1)^3.

    W_c multiplies the raw local coordinates (no bias column); the constant
    offset enters through the DC term of the SH block.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = sh_basis(omega)
    z = np.einsum("...ij,...j->...i", w_c, x) + np.einsum("...ij,...j->...i", w_sh, gamma)
    return expit(z)


def segment_opacity(sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Opacity 1 - exp(-sigma * delta) of a ray segment, clamped below 1."""
    return np.minimum(-np.expm1(-np.asarray(sigma, dtype=np.float64) * delta), ALPHA_MAX)


# -- actors and the composed scene ------------------------------------------


@dataclass
class Actor:
    """A rigid dynamic volume: its own voxel set in a canonical frame plus a trajectory.

    The canonical bounding box is centered at the origin with the given
    extents.  Trajectory poses are (timestamp, translation, quaternion) with
    strictly increasing timestamps.
    """

    actor_id: str
    extents: np.ndarray
    voxels: SparseVoxelSet
    times: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        self.extents = np.asarray(self.extents, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64)
        if self.times.ndim != 1 or len(self.times) == 0:
            raise ValueError("trajectory must contain at least one pose")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def pose_at(self, t) -> tuple[np.ndarray, np.ndarray]:
        """(translation, quaternion) at time(s) t; translation lerp, rotation slerp."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise ValueError("timestamp outside the actor trajectory")
        if len(self.times) == 1:
            shape = t.shape
            return (np.broadcast_to(self.positions[0], shape + (3,)).copy(),
                    np.broadcast_to(self.quaternions[0], shape + (4,)).copy())
        hi = np.clip(np.searchsorted(self.times, t, side="right"), 1, len(self.times) - 1)
        lo = hi - 1
        span = self.times[hi] - self.times[lo]
        frac = np.clip((t - self.times[lo]) / span, 0.0, 1.0)
        pos = self.positions[lo] + frac[..., None] * (self.positions[hi] - self.positions[lo])
        quat = quat_slerp(self.quaternions[lo], self.quaternions[hi], frac)
        return pos, quat


def make_actor_bounds(extents, base_edge: float, max_levels: int = 6) -> SceneBounds:
    """Canonical bounds for an actor box centered at the origin."""
    extents = np.asarray(extents, dtype=np.float64)
    return SceneBounds(-extents / 2.0, extents / 2.0, base_edge, max_levels)


@dataclass
class Scene:
    """Static voxel volume plus dynamic actors, sharing one density mode."""

    bounds: SceneBounds
    static: SparseVoxelSet
    actors: list[Actor] = field(default_factory=list)
    density_mode: str = DENSITY_SDF
    inner_aabb: np.ndarray | None = None  # inner (fine) region; outside = outer shells

    def __post_init__(self):
        if self.density_mode not in (DENSITY_SDF, DENSITY_RAW):
            raise ValueError(f"unknown density mode {self.density_mode!r}")

    def outer_voxel_mask(self) -> np.ndarray:
        """Static voxels whose center lies outside the inner region."""
        if self.inner_aabb is None:
            return np.zeros(self.static.n, dtype=bool)
        c = self.static.centers()
        inside = np.all((c >= self.inner_aabb[0]) & (c <= self.inner_aabb[1]), axis=1)
        return ~inside
