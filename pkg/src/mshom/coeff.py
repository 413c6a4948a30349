"""Per-cell scalar coefficient fields: the benchmark media plus trivial controls.

Every generator samples at triangle barycenters and is a pure function of
(spec, seed). Randomness uses numpy's PCG64 via ``default_rng(seed)``; the
same seed always reproduces the same field bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .grid import FineMesh

TRIG_EPSILONS = (1.0 / 5.0, 1.0 / 13.0, 1.0 / 17.0, 1.0 / 31.0, 1.0 / 65.0)

#: Default channel: an S-shaped polyline spanning the domain left to right,
#: fixed so regression results stay comparable.
REFERENCE_CHANNEL = (
    (-1.0, -0.5),
    (-0.2, -0.5),
    (-0.2, 0.5),
    (0.6, 0.5),
    (0.6, -0.2),
    (1.0, -0.2),
)


@dataclass
class CoefficientField:
    """Isotropic conductivity a (one value per fine triangle) and density rho."""

    values: np.ndarray
    density: np.ndarray
    seed: int | None = None
    spec: dict | None = None
    warnings: tuple = ()
    lambda_min: float = dc_field(init=False)
    lambda_max: float = dc_field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.density = np.asarray(self.density, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) != len(self.density):
            raise ValueError("values and density must be flat arrays of equal length")
        if not np.isfinite(self.values).all() or (self.values <= 0).any():
            raise ValueError("coefficient values must be finite and strictly positive")
        if not np.isfinite(self.density).all() or (self.density <= 0).any():
            raise ValueError("density values must be finite and strictly positive")
        self.lambda_min = float(self.values.min())
        self.lambda_max = float(self.values.max())

    @property
    def contrast(self) -> float:
        return self.lambda_max / self.lambda_min

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.values.tobytes())
        h.update(self.density.tobytes())
        return h.hexdigest()


def _field(mesh: FineMesh, values, seed=None, spec=None, density=None, warnings=()):
    if density is None:
        density = np.ones(mesh.num_triangles)
    return CoefficientField(values=values, density=density, seed=seed,
                            spec=spec, warnings=warnings)


def gen_constant(mesh: FineMesh, value: float = 1.0) -> CoefficientField:
    if value <= 0:
        raise ValueError(f"constant coefficient must be positive, got {value}")
    return _field(mesh, np.full(mesh.num_triangles, float(value)),
                  spec={"kind": "constant", "value": value})


def trig_conductivity(x, y):
    """Six-term trigonometric multi-scale conductivity, valid on [-1, 1]^2."""
    e1, e2, e3, e4, e5 = TRIG_EPSILONS
    s = (
        (1.1 + np.sin(2 * np.pi * x / e1)) / (1.1 + np.sin(2 * np.pi * y / e1))
        + (1.1 + np.sin(2 * np.pi * y / e2)) / (1.1 + np.cos(2 * np.pi * x / e2))
        + (1.1 + np.cos(2 * np.pi * x / e3)) / (1.1 + np.sin(2 * np.pi * y / e3))
        + (1.1 + np.sin(2 * np.pi * y / e4)) / (1.1 + np.cos(2 * np.pi * x / e4))
        + (1.1 + np.cos(2 * np.pi * x / e5)) / (1.1 + np.sin(2 * np.pi * y / e5))
        + np.sin(4.0 * x**2 * y**2)
        + 1.0
    )
    return s / 6.0


def gen_trig(mesh: FineMesh) -> CoefficientField:
    b = mesh.barycenters
    return _field(mesh, trig_conductivity(b[:, 0], b[:, 1]), spec={"kind": "trig"})


def gen_checkerboard(mesh: FineMesh, gamma: float = 4.0) -> CoefficientField:
    """Deterministic checkerboard: gamma / 1/gamma alternating per square cell."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    n = mesh.n
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    square = np.where(((ix + iy) % 2 == 0).ravel(), gamma, 1.0 / gamma)
    return _field(mesh, np.repeat(square, 2),
                  spec={"kind": "checkerboard", "gamma": gamma})


def gen_percolation(mesh: FineMesh, gamma: float = 4.0, seed: int = 0) -> CoefficientField:
    """Random checkerboard: each square cell is gamma or 1/gamma with prob 1/2.

    Both triangles of a square share the value.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    rng = np.random.default_rng(seed)
    n2 = mesh.n * mesh.n
    square = np.where(rng.random(n2) < 0.5, gamma, 1.0 / gamma)
    return _field(mesh, np.repeat(square, 2), seed=seed,
                  spec={"kind": "percolation", "gamma": gamma, "seed": seed})


def logtrig_wavevectors(R: int) -> np.ndarray:
    """Half of the sup-norm box {-R..R}^2: one representative per +-k pair, k != 0."""
    ks = []
    for k1 in range(-R, R + 1):
        for k2 in range(-R, R + 1):
            if k1 > 0 or (k1 == 0 and k2 > 0):
                ks.append((k1, k2))
    return np.array(ks, dtype=float)


def gen_logtrig(mesh: FineMesh, R: int = 6, amp: float = 0.3, seed: int = 0) -> CoefficientField:
    """a = exp(h) with h a random trigonometric polynomial of band limit R.

    h(x) = sum over wavevectors k of a_k sin(2 pi k.x) + b_k cos(2 pi k.x),
    with a_k, b_k independent uniform on [-amp, amp].
    """
    if R < 0:
        raise ValueError(f"band limit must be nonnegative, got {R}")
    if amp < 0:
        raise ValueError(f"amplitude must be nonnegative, got {amp}")
    rng = np.random.default_rng(seed)
    ks = logtrig_wavevectors(R)
    if len(ks) == 0 or amp == 0.0:
        # still draw to keep the stream layout stable across parameters
        rng.uniform(-amp, amp, size=(2, max(len(ks), 1)))
        return _field(mesh, np.ones(mesh.num_triangles), seed=seed,
                      spec={"kind": "logtrig", "R": R, "amp": amp, "seed": seed})
    coeffs = rng.uniform(-amp, amp, size=(2, len(ks)))
    phase = 2.0 * np.pi * (mesh.barycenters @ ks.T)
    h = np.sin(phase) @ coeffs[0] + np.cos(phase) @ coeffs[1]
    return _field(mesh, np.exp(h), seed=seed,
                  spec={"kind": "logtrig", "R": R, "amp": amp, "seed": seed})


def polyline_distance(points: np.ndarray, polyline) -> np.ndarray:
    """Distance from each point to a piecewise-linear path."""
    pts = np.asarray(points, dtype=float)
    poly = np.asarray(polyline, dtype=float)
    if len(poly) < 2:
        raise ValueError("polyline needs at least two vertices")
    best = np.full(len(pts), np.inf)
    for a, b in zip(poly[:-1], poly[1:]):
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            proj = np.zeros(len(pts))
        else:
            proj = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
        closest = a + proj[:, None] * ab
        best = np.minimum(best, np.linalg.norm(pts - closest, axis=1))
    return best


def gen_channel(mesh: FineMesh, polyline=REFERENCE_CHANNEL, width: float | None = None,
                channel_value: float = 100.0, background: CoefficientField | None = None,
                gamma: float = 4.0, seed: int = 0) -> CoefficientField:
    """High-conductivity channel over a background medium.

    Cells whose barycenter is within width/2 of the polyline get
    channel_value; the rest keep the background (percolation by default).
    Width defaults to two fine cells.
    """
    if channel_value <= 0:
        raise ValueError(f"channel value must be positive, got {channel_value}")
    if width is None:
        width = 2.0 * mesh.cell_size
    if background is None:
        background = gen_percolation(mesh, gamma=gamma, seed=seed)
    values = background.values.copy()
    hit = polyline_distance(mesh.barycenters, polyline) <= width / 2.0
    warnings = ()
    if not hit.any():
        warnings = ("channel hit no cell",)
    values[hit] = channel_value
    return _field(mesh, values, seed=seed,
                  spec={"kind": "channel", "width": width,
                        "channel_value": channel_value,
                        "polyline": [list(p) for p in np.asarray(polyline)],
                        "background": background.spec, "seed": seed},
                  warnings=warnings)


@dataclass(frozen=True)
class FieldSpec:
    """Declarative field description used by configs and the CLI."""

    kind: str
    params: dict = dc_field(default_factory=dict)
    seed: int = 0

    def build(self, mesh: FineMesh) -> CoefficientField:
        p = dict(self.params)
        if self.kind == "constant":
            return gen_constant(mesh, p.get("value", 1.0))
        if self.kind == "trig":
            return gen_trig(mesh)
        if self.kind == "checkerboard":
            return gen_checkerboard(mesh, p.get("gamma", 4.0))
        if self.kind == "percolation":
            return gen_percolation(mesh, p.get("gamma", 4.0), self.seed)
        if self.kind == "logtrig":
            return gen_logtrig(mesh, p.get("R", 6), p.get("amp", 0.3), self.seed)
        if self.kind == "channel":
            return gen_channel(
                mesh,
                polyline=p.get("polyline", REFERENCE_CHANNEL),
                width=p.get("width"),
                channel_value=p.get("channel_value", 100.0),
                gamma=p.get("gamma", 4.0),
                seed=self.seed,
            )
        raise ValueError(f"unknown field kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "FieldSpec":
        return cls(kind=d["kind"], params=dict(d.get("params", {})),
                   seed=int(d.get("seed", 0)))


def save_field(field: CoefficientField, csv_path, json_path=None) -> None:
    """CSV of (a, rho) per cell plus a JSON sidecar; round-trips bit-exactly."""
    csv_path = str(csv_path)
    if json_path is None:
        json_path = csv_path + ".json"
    np.savetxt(csv_path, np.column_stack([field.values, field.density]),
               fmt="%.17g", delimiter=",", header="a,rho", comments="")
    meta = {
        "spec": field.spec,
        "seed": field.seed,
        "num_cells": len(field.values),
        "hash": field.content_hash(),
        "warnings": list(field.warnings),
    }
    with open(json_path, "w") as f:
        json.dump(meta, f, indent=1)


def load_field(csv_path, json_path=None) -> CoefficientField:
    csv_path = str(csv_path)
    if json_path is None:
        json_path = csv_path + ".json"
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    with open(json_path) as f:
        meta = json.load(f)
    field = CoefficientField(values=data[:, 0], density=data[:, 1],
                             seed=meta.get("seed"), spec=meta.get("spec"),
                             warnings=tuple(meta.get("warnings", ())))
    if field.content_hash() != meta.get("hash"):
        raise ValueError(f"field file {csv_path} does not match its sidecar hash")
    return field
