"""Procedural four-chamber heart phantoms and multi-view slice simulation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

BACKGROUND, LV, LVM, RV, LA, RA = range(6)
UNKNOWN = 6
CLASS_NAMES = ("background", "LV", "LVM", "RV", "LA", "RA")
FOREGROUND = (LV, LVM, RV, LA, RA)
DEFAULT_DIMS = (32, 32, 40)

# chamber order inside SubjectParams arrays
CHAMBERS = (LV, RV, LA, RA)
VENTRICULAR = (True, True, False, False)

# canonical layout in voxels for DEFAULT_DIMS; rescaled per axis for other grids
_BASE_CENTERS = np.array([
    [18.0, 16.0, 14.0],   # LV
    [9.5, 16.0, 14.0],    # RV
    [19.0, 16.0, 28.0],   # LA
    [10.0, 16.0, 28.0],   # RA
])
_BASE_RADII = np.array([
    [5.0, 5.0, 7.0],
    [4.5, 6.0, 7.0],
    [6.0, 6.0, 5.0],
    [5.5, 6.0, 5.0],
])
RADIUS_JITTER = 0.15
CENTER_JITTER = 1.5
MAX_ROTATION_DEG = 5.0
SHELL_RANGE = (2.0, 3.0)
VENTRICLE_AMPLITUDE = (0.15, 0.35)
ATRIUM_AMPLITUDE = (0.10, 0.25)


class PhantomError(ValueError):
    pass


@dataclass(eq=False)
class LabelGrid:
    labels: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise PhantomError(f"labels must be 3D, got shape {self.labels.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    def equals(self, other: "LabelGrid") -> bool:
        return (self.voxel_size == other.voxel_size
                and np.array_equal(self.labels, other.labels))

    def mask(self, cls: int) -> np.ndarray:
        return self.labels == cls

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=7)[:7]


@dataclass(eq=False)
class ShapeSequence:
    frames: list[LabelGrid]

    def __post_init__(self):
        if self.frames:
            d0, v0 = self.frames[0].dims, self.frames[0].voxel_size
            for f in self.frames:
                if f.dims != d0 or f.voxel_size != v0:
                    raise PhantomError("all frames must share dims and voxel_size")

    @property
    def M(self) -> int:
        return len(self.frames)

    def __getitem__(self, tau: int) -> LabelGrid:
        """Frame by 1-based index."""
        return self.frames[tau - 1]

    def equals(self, other: "ShapeSequence") -> bool:
        return self.M == other.M and all(a.equals(b) for a, b in zip(self.frames, other.frames))


@dataclass(eq=False)
class SubjectParams:
    centers: np.ndarray          # (4, 3) LV, RV, LA, RA
    radii: np.ndarray            # (4, 3)
    amplitudes: np.ndarray       # (4,)
    ventricular: tuple[bool, ...]
    shell_width: float
    rotation: np.ndarray         # rotation vector, radians
    seed: int | None = None
    dims: tuple[int, int, int] = DEFAULT_DIMS

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_rotvec(self.rotation).as_matrix()

    def pivot(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) / 2.0

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box (voxel coords) enclosing every chamber at maximum dilation."""
        rot = self.rotation_matrix()
        piv = self.pivot()
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for i in range(len(CHAMBERS)):
            r = self.radii[i] + (self.shell_width if i == 0 else 0.0)
            c = rot @ (self.centers[i] - piv) + piv
            half = np.sqrt(((rot * r[None, :]) ** 2).sum(axis=1))
            lo = np.minimum(lo, c - half)
            hi = np.maximum(hi, c + half)
        return lo, hi

    def fits(self, margin: float = 1.0) -> bool:
        lo, hi = self.bounding_box()
        return bool(np.all(lo >= margin) and np.all(hi <= np.asarray(self.dims) - 1 - margin))

    def same_as(self, other: "SubjectParams") -> bool:
        return (np.array_equal(self.centers, other.centers)
                and np.array_equal(self.radii, other.radii)
                and np.array_equal(self.amplitudes, other.amplitudes)
                and self.ventricular == other.ventricular
                and self.shell_width == other.shell_width
                and np.array_equal(self.rotation, other.rotation)
                and self.dims == other.dims)


def amplitude_mean(ventricular: bool) -> float:
    lo, hi = VENTRICLE_AMPLITUDE if ventricular else ATRIUM_AMPLITUDE
    return (lo + hi) / 2


def generate_subject(seed: int, dims=DEFAULT_DIMS) -> SubjectParams:
    dims = tuple(int(n) for n in dims)
    scale = np.asarray(dims, dtype=np.float64) / np.asarray(DEFAULT_DIMS, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = (_BASE_CENTERS + rng.uniform(-CENTER_JITTER, CENTER_JITTER, (4, 3))) * scale
    radii = _BASE_RADII * rng.uniform(1 - RADIUS_JITTER, 1 + RADIUS_JITTER, (4, 3)) * scale
    amps = np.array([rng.uniform(*(VENTRICLE_AMPLITUDE if v else ATRIUM_AMPLITUDE))
                     for v in VENTRICULAR])
    shell = rng.uniform(*SHELL_RANGE) * float(np.mean(scale))
    angle = np.deg2rad(MAX_ROTATION_DEG) / np.sqrt(3.0)
    rotation = rng.uniform(-angle, angle, 3)
    return SubjectParams(centers, radii, amps, VENTRICULAR, shell, rotation, seed, dims)


def cycle_profile(u) -> np.ndarray:
    """g(u) = (1 - cos 2 pi u) / 2: 0 at u=0, 1 at u=1/2."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.asarray(u, dtype=np.float64)))


def chamber_scales(subject: SubjectParams, tau: int, M: int) -> np.ndarray:
    if tau < 1:
        raise PhantomError(f"frame index must be >= 1, got {tau}")
    if M < 1:
        raise PhantomError(f"M must be >= 1, got {M}")
    # wrap before any float math so frame tau and tau+M are bit-identical
    tau = (tau - 1) % M + 1
    u = (tau - 1) / M
    out = np.empty(len(CHAMBERS))
    for i, vent in enumerate(subject.ventricular):
        phase = u if vent else u + 0.5
        out[i] = 1.0 - subject.amplitudes[i] * cycle_profile(phase)
    return out


def _heart_coords(subject: SubjectParams, dims) -> np.ndarray:
    idx = np.indices(dims, dtype=np.float64).reshape(3, -1).T
    piv = subject.pivot()
    rot = subject.rotation_matrix()
    # inverse rotation takes grid points into the heart frame
    return (idx - piv) @ rot + piv


def _inside(q: np.ndarray, center, radii) -> np.ndarray:
    return (((q - center) / radii) ** 2).sum(axis=1) <= 1.0


def render_frame(subject: SubjectParams, tau: int, M: int, dims=None, voxel_size: float = 1.0) -> LabelGrid:
    dims = subject.dims if dims is None else tuple(int(n) for n in dims)
    s = chamber_scales(subject, tau, M)
    q = _heart_coords(subject, dims)
    labels = np.zeros(len(q), dtype=np.uint8)
    # paint lowest precedence first: RA < LA < RV < LVM < LV
    for cls, i in ((RA, 3), (LA, 2), (RV, 1)):
        labels[_inside(q, subject.centers[i], subject.radii[i] * s[i])] = cls
    lv_radii = subject.radii[0] * s[0]
    labels[_inside(q, subject.centers[0], lv_radii + subject.shell_width)] = LVM
    labels[_inside(q, subject.centers[0], lv_radii)] = LV
    return LabelGrid(labels.reshape(dims), voxel_size)


def render_sequence(subject: SubjectParams, M: int, dims=None, voxel_size: float = 1.0) -> ShapeSequence:
    return ShapeSequence([render_frame(subject, tau, M, dims, voxel_size) for tau in range(1, M + 1)])


# ---------------------------------------------------------------- slices

@dataclass(frozen=True)
class PlaneSpec:
    view: str
    origin: tuple[float, float, float]
    axis_u: tuple[float, float, float]
    axis_v: tuple[float, float, float]
    size: tuple[int, int]

    def points(self, shift=(0.0, 0.0)) -> np.ndarray:
        nu, nv = self.size
        u = np.arange(nu, dtype=np.float64) + shift[0]
        v = np.arange(nv, dtype=np.float64) + shift[1]
        o, a, b = (np.asarray(x, dtype=np.float64) for x in (self.origin, self.axis_u, self.axis_v))
        return o + u[:, None, None] * a + v[None, :, None] * b

    def check_inside(self, dims) -> None:
        p = self.points()
        corners = np.stack([p[0, 0], p[-1, 0], p[0, -1], p[-1, -1]])
        upper = np.asarray(dims, dtype=np.float64) - 0.5
        if np.any(corners < -0.5) or np.any(corners >= upper):
            raise PhantomError(f"plane {self.view} lies outside grid {tuple(dims)}")


def sax_plane(k: int, dims) -> PlaneSpec:
    nx, ny, _ = dims
    return PlaneSpec(f"SAX{k}", (0.0, 0.0, float(k)), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (nx, ny))


def default_lax_planes(dims) -> tuple[PlaneSpec, ...]:
    nx, ny, nz = dims
    scale = np.asarray(dims, dtype=np.float64) / np.asarray(DEFAULT_DIMS, dtype=np.float64)
    y4 = float(np.floor(_BASE_CENTERS[0, 1] * scale[1]))
    x2 = float(np.floor(_BASE_CENTERS[0, 0] * scale[0]))
    return (
        PlaneSpec("LAX-4ch", (0.0, y4, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (nx, nz)),
        PlaneSpec("LAX-2ch", (x2, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (ny, nz)),
    )


@dataclass(frozen=True)
class SliceSimConfig:
    lam: float | None = None          # fixed corruption level; None samples U[0, lambda_max]
    lambda_max: float = 2.0
    sax_spacing: int = 4
    sax_offset: int | None = None
    sax_count: int | None = None
    lax_planes: tuple[PlaneSpec, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise PhantomError(f"corruption level must be >= 0, got {self.lam}")
        if self.lambda_max < 0:
            raise PhantomError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.sax_spacing < 1:
            raise PhantomError("sax_spacing must be >= 1")

    def planes(self, dims) -> list[PlaneSpec]:
        nz = dims[2]
        offset = self.sax_spacing // 2 if self.sax_offset is None else self.sax_offset
        ks = list(range(offset, nz, self.sax_spacing))
        if self.sax_count is not None:
            ks = ks[: self.sax_count]
        lax = default_lax_planes(dims) if self.lax_planes is None else self.lax_planes
        return [sax_plane(k, dims) for k in ks] + list(lax)


@dataclass(eq=False)
class Slice:
    plane: PlaneSpec
    labels: np.ndarray
    shift: np.ndarray

    @property
    def view(self) -> str:
        return self.plane.view


@dataclass(eq=False)
class SliceStack:
    slices: list[Slice] = field(default_factory=list)
    lam: float = 0.0


def _nearest(points: np.ndarray) -> np.ndarray:
    return np.floor(points + 0.5).astype(np.int64)


def sample_plane(grid: LabelGrid, plane: PlaneSpec, shift=(0.0, 0.0)) -> np.ndarray:
    """Nearest-neighbour resample; points falling outside the grid read as background."""
    idx = _nearest(plane.points(shift))
    dims = np.asarray(grid.dims)
    ok = np.all((idx >= 0) & (idx < dims), axis=-1)
    out = np.zeros(plane.size, dtype=np.uint8)
    i = idx[ok]
    out[ok] = grid.labels[i[:, 0], i[:, 1], i[:, 2]]
    return out


def extract_slices(grid: LabelGrid, config: SliceSimConfig, rng: np.random.Generator | None = None) -> SliceStack:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    planes = config.planes(grid.dims)
    for p in planes:
        p.check_inside(grid.dims)
    lam = config.lam if config.lam is not None else float(rng.uniform(0.0, config.lambda_max))
    stack = SliceStack(lam=lam)
    for p in planes:
        shift = rng.normal(0.0, 1.0, 2) * lam
        stack.slices.append(Slice(p, sample_plane(grid, p, shift), shift))
    return stack


def rasterize_slices(stack: SliceStack, dims, voxel_size: float = 1.0) -> LabelGrid:
    """Place every slice at its nominal plane; untouched voxels get UNKNOWN."""
    dims = tuple(int(n) for n in dims)
    labels = np.full(dims, UNKNOWN, dtype=np.uint8)
    upper = np.asarray(dims)
    for sl in stack.slices:
        idx = _nearest(sl.plane.points())
        ok = np.all((idx >= 0) & (idx < upper), axis=-1)
        i = idx[ok]
        labels[i[:, 0], i[:, 1], i[:, 2]] = sl.labels[ok]
    return LabelGrid(labels, voxel_size)
