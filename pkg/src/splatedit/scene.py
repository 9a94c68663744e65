"""Scene state: pinhole cameras and the structure-of-arrays Gaussian cloud.

Conventions (OpenCV style): world-to-camera transform T maps world points into
a frame whose +z axis looks forward, +x right, +y down.  Pixel u grows with
column index, v with row index, and pixel (u, v) samples the image plane at
exactly (u, v): a camera with cx = cy = 64 puts the principal point on pixel
(64, 64).

Per-Gaussian parameters: center x (3), scale s (3, positive), rotation
quaternion q (w, x, y, z, unit), opacity alpha in (0, 1), spherical-harmonic
color coefficients (3 per basis function), and a compressed language embedding
of scene-wide width d.  Arrays are float32, the dtype the scene file stores,
so a save/load round trip is bit-exact.  All math upcasts to float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError

PARAM_DTYPE = np.float32


def _as_f64(a, shape, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidArgumentError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def check_image(img) -> np.ndarray:
    """Validate an (H, W, 3) float RGB image with values in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgumentError(f"image must be (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgumentError("image must have at least one pixel")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidArgumentError("image values must lie in [0, 1]")
    return arr


def check_mask(mask, shape=None) -> np.ndarray:
    """Validate a boolean (H, W) mask, optionally against an expected shape."""
    arr = np.asarray(mask)
    if arr.dtype != np.bool_:
        raise InvalidArgumentError(f"mask must be boolean, got dtype {arr.dtype}")
    if arr.ndim != 2:
        raise InvalidArgumentError(f"mask must be (H, W), got {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise InvalidArgumentError(f"mask shape {arr.shape} != expected {tuple(shape)}")
    return arr


def check_depth(depth) -> np.ndarray:
    """Validate an (H, W) depth map of positive finite values."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"depth map must be (H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("depth map contains non-finite values")
    if arr.min() <= 0.0:
        raise InvalidArgumentError("depth values must be positive")
    return arr


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics, image size, depth range, world-to-camera T."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T: np.ndarray
    z_near: float = 0.5
    z_far: float = 10.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidArgumentError("image size must be at least 1x1")
        if not (0.0 < self.z_near < self.z_far):
            raise InvalidArgumentError("need 0 < z_near < z_far")
        T = _as_f64(self.T, (4, 4), "T")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise InvalidArgumentError("T last row must be (0, 0, 0, 1)")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise InvalidArgumentError("rotation block must be orthonormal within 1e-6")
        if np.linalg.det(R) < 0:
            raise InvalidArgumentError("rotation block must not mirror (det +1)")
        T = T.copy()
        T.setflags(write=False)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "z_near", float(self.z_near))
        object.__setattr__(self, "z_far", float(self.z_far))

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def R(self) -> np.ndarray:
        """World-to-camera rotation rows: camera right / down / forward axes."""
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        """World-space unit vector the camera looks along (+z row)."""
        return self.R[2]

    def with_T(self, T) -> "Camera":
        return Camera(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            width=self.width, height=self.height, T=T,
            z_near=self.z_near, z_far=self.z_far,
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "z_near": self.z_near, "z_far": self.z_far,
            "T": [float(v) for v in self.T.reshape(-1)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Camera":
        try:
            T = np.array(data["T"], dtype=np.float64).reshape(4, 4)
            return cls(
                fx=data["fx"], fy=data["fy"], cx=data["cx"], cy=data["cy"],
                width=data["width"], height=data["height"], T=T,
                z_near=data.get("z_near", 0.5), z_far=data.get("z_far", 10.0),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidArgumentError(f"bad camera JSON: {exc}") from exc


@dataclass(frozen=True)
class Gaussian:
    """One Gaussian, unpacked from the scene arrays."""

    x: np.ndarray
    scale: np.ndarray
    q: np.ndarray
    alpha: float
    sh: np.ndarray
    embed: np.ndarray
    object_id: int = -1


@dataclass
class SceneObject:
    """A named group of Gaussians addressed by the object_id array."""

    object_id: int
    label: str | None = None
    embedding: np.ndarray | None = None  # full-width language vector, if known

    def to_json(self) -> dict:
        out = {"object_id": int(self.object_id), "label": self.label}
        if self.embedding is not None:
            out["embedding"] = [float(v) for v in self.embedding]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "SceneObject":
        emb = data.get("embedding")
        return cls(
            object_id=int(data["object_id"]),
            label=data.get("label"),
            embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
        )


def sh_dim(sh_degree: int) -> int:
    """Number of color coefficients for a degree: 3 * (degree + 1)^2."""
    if not 0 <= int(sh_degree) <= 3:
        raise InvalidArgumentError("sh_degree must be in [0, 3]")
    return 3 * (int(sh_degree) + 1) ** 2


class GaussianScene:
    """Structure-of-arrays Gaussian cloud plus edit history and metadata.

    The revision counter increases on every mutation, structural or
    parametric, including undo.  Render caches and selections are validated
    against it.
    """

    def __init__(self, *, embed_dim: int = 16, sh_degree: int = 0, background=None):
        if embed_dim < 1:
            raise InvalidArgumentError("embed_dim must be >= 1")
        self.sh_degree = int(sh_degree)
        scd = sh_dim(self.sh_degree)
        self.x = np.zeros((0, 3), dtype=PARAM_DTYPE)
        self.scale = np.zeros((0, 3), dtype=PARAM_DTYPE)
        self.q = np.zeros((0, 4), dtype=PARAM_DTYPE)
        self.alpha = np.zeros((0,), dtype=PARAM_DTYPE)
        self.sh = np.zeros((0, scd), dtype=PARAM_DTYPE)
        self.embed = np.zeros((0, int(embed_dim)), dtype=PARAM_DTYPE)
        self.object_id = np.zeros((0,), dtype=np.int32)
        self.active = np.zeros((0,), dtype=bool)
        self.background = (
            np.full(3, 0.0) if background is None
            else _as_f64(background, (3,), "background")
        )
        self.revision = 0
        self.codec = None  # EmbeddingCodec, set after distillation setup
        self.objects: dict[int, SceneObject] = {}
        self.history: list = []  # undo records, managed by splatedit.editing
        self.edit_log: list = []  # applied EditOp JSON, for replay
        self.aux: dict = {}  # transient, never persisted (e.g. lift pixel map)

    # -- shape helpers -------------------------------------------------

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embed.shape[1]

    @property
    def sh_coeffs(self) -> int:
        return self.sh.shape[1]

    def __len__(self) -> int:
        return self.n

    def active_indices(self) -> np.ndarray:
        return np.nonzero(self.active)[0].astype(np.int64)

    def gaussian(self, i: int) -> Gaussian:
        if not 0 <= i < self.n:
            raise InvalidArgumentError(f"gaussian index {i} out of range [0, {self.n})")
        return Gaussian(
            x=self.x[i].astype(np.float64),
            scale=self.scale[i].astype(np.float64),
            q=self.q[i].astype(np.float64),
            alpha=float(self.alpha[i]),
            sh=self.sh[i].astype(np.float64),
            embed=self.embed[i].astype(np.float64),
            object_id=int(self.object_id[i]),
        )

    # -- mutation ------------------------------------------------------

    def bump(self) -> int:
        self.revision += 1
        return self.revision

    def append(self, x, scale, q, alpha, sh, embed=None, object_id=None) -> np.ndarray:
        """Append Gaussians; returns the new indices.  Existing rows untouched."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3:
            raise InvalidArgumentError(f"x must be (M, 3), got {x.shape}")
        m = x.shape[0]
        scale = _as_f64(scale, (m, 3), "scale")
        q = _as_f64(q, (m, 4), "q")
        alpha = _as_f64(alpha, (m,), "alpha")
        sh = _as_f64(sh, (m, self.sh_coeffs), "sh")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("x contains non-finite values")
        if scale.size and scale.min() <= 0:
            raise InvalidArgumentError("scales must be positive")
        if alpha.size and (alpha.min() <= 0 or alpha.max() >= 1):
            raise InvalidArgumentError("alpha must lie strictly inside (0, 1)")
        norms = np.linalg.norm(q, axis=1)
        if q.size and np.abs(norms - 1.0).max() > 1e-3:
            raise InvalidArgumentError("quaternions must be unit within 1e-3")
        if embed is None:
            embed = np.zeros((m, self.embed_dim))
        else:
            embed = _as_f64(embed, (m, self.embed_dim), "embed")
        if object_id is None:
            object_id = np.full(m, -1, dtype=np.int32)
        else:
            object_id = np.asarray(object_id, dtype=np.int32)
            if object_id.shape != (m,):
                raise InvalidArgumentError("object_id must be (M,)")
        for oid in np.unique(object_id):
            if oid >= 0 and int(oid) not in self.objects:
                raise InvalidArgumentError(f"object_id {oid} is not registered")
        q = q / norms[:, None] if m else q

        start = self.n
        self.x = np.concatenate([self.x, x.astype(PARAM_DTYPE)])
        self.scale = np.concatenate([self.scale, scale.astype(PARAM_DTYPE)])
        self.q = np.concatenate([self.q, q.astype(PARAM_DTYPE)])
        self.alpha = np.concatenate([self.alpha, alpha.astype(PARAM_DTYPE)])
        self.sh = np.concatenate([self.sh, sh.astype(PARAM_DTYPE)])
        self.embed = np.concatenate([self.embed, embed.astype(PARAM_DTYPE)])
        self.object_id = np.concatenate([self.object_id, object_id])
        self.active = np.concatenate([self.active, np.ones(m, dtype=bool)])
        self.bump()
        return np.arange(start, start + m, dtype=np.int64)

    def register_object(self, indices, label: str | None = None, embedding=None) -> int:
        """Create an object from Gaussian indices; returns its id."""
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.n):
            raise InvalidArgumentError("object indices out of range")
        oid = (max(self.objects) + 1) if self.objects else 0
        self.objects[oid] = SceneObject(
            object_id=oid, label=label,
            embedding=None if embedding is None else np.asarray(embedding, np.float64),
        )
        self.object_id[indices] = oid
        self.bump()
        return oid

    def object_indices(self, oid: int) -> np.ndarray:
        if oid not in self.objects:
            raise InvalidArgumentError(f"unknown object id {oid}")
        return np.nonzero(self.object_id == oid)[0].astype(np.int64)

    def set_embedding_dim(self, d: int) -> None:
        """Resize the embedding width; only legal while all embeddings are zero."""
        if d == self.embed_dim:
            return
        if np.any(self.embed != 0):
            raise InvalidStateError(
                "embedding width can only change while all embeddings are zero"
            )
        self.embed = np.zeros((self.n, int(d)), dtype=PARAM_DTYPE)
        self.bump()

    def set_codec(self, codec) -> None:
        self.codec = codec
        self.bump()

    # -- copies --------------------------------------------------------

    def copy(self) -> "GaussianScene":
        """Deep copy of arrays and object table; history and aux not carried."""
        out = GaussianScene(
            embed_dim=self.embed_dim, sh_degree=self.sh_degree,
            background=self.background,
        )
        out.x = self.x.copy()
        out.scale = self.scale.copy()
        out.q = self.q.copy()
        out.alpha = self.alpha.copy()
        out.sh = self.sh.copy()
        out.embed = self.embed.copy()
        out.object_id = self.object_id.copy()
        out.active = self.active.copy()
        out.revision = self.revision
        out.codec = self.codec
        out.objects = {
            k: SceneObject(v.object_id, v.label,
                           None if v.embedding is None else v.embedding.copy())
            for k, v in self.objects.items()
        }
        out.edit_log = [dict(e) for e in self.edit_log]
        return out

    # -- validation ----------------------------------------------------

    def validate(self) -> None:
        """Check every type invariant; raises InvalidArgumentError on the first hit."""
        n = self.n
        shapes = {
            "x": (self.x, (n, 3)), "scale": (self.scale, (n, 3)),
            "q": (self.q, (n, 4)), "alpha": (self.alpha, (n,)),
            "sh": (self.sh, (n, self.sh_coeffs)),
            "embed": (self.embed, (n, self.embed_dim)),
        }
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise InvalidArgumentError(f"{name} has shape {arr.shape}, want {shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"{name} contains non-finite values")
        if n:
            if self.scale.min() <= 0:
                raise InvalidArgumentError("scales must be positive")
            if self.alpha.min() <= 0 or self.alpha.max() >= 1:
                raise InvalidArgumentError("alpha must lie strictly inside (0, 1)")
            norms = np.linalg.norm(self.q.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > 1e-3:
                raise InvalidArgumentError("quaternions must stay unit within 1e-3")
        for oid in np.unique(self.object_id):
            if oid >= 0 and int(oid) not in self.objects:
                raise InvalidArgumentError(f"object_id {oid} has no table entry")

    def params_equal(self, other: "GaussianScene") -> bool:
        """Bitwise equality of every persisted parameter array."""
        return (
            self.n == other.n
            and self.x.tobytes() == other.x.tobytes()
            and self.scale.tobytes() == other.scale.tobytes()
            and self.q.tobytes() == other.q.tobytes()
            and self.alpha.tobytes() == other.alpha.tobytes()
            and self.sh.tobytes() == other.sh.tobytes()
            and self.embed.tobytes() == other.embed.tobytes()
            and self.object_id.tobytes() == other.object_id.tobytes()
            and self.active.tobytes() == other.active.tobytes()
        )

    @classmethod
    def from_gaussians(cls, gaussians, *, embed_dim=16, sh_degree=0, background=None):
        scene = cls(embed_dim=embed_dim, sh_degree=sh_degree, background=background)
        if gaussians:
            scene.append(
                x=np.stack([g.x for g in gaussians]),
                scale=np.stack([g.scale for g in gaussians]),
                q=np.stack([g.q for g in gaussians]),
                alpha=np.array([g.alpha for g in gaussians]),
                sh=np.stack([g.sh for g in gaussians]),
                embed=np.stack([np.asarray(g.embed) for g in gaussians]),
            )
        return scene
