"""Object-level edits, exact undo, and the layout augmentation used while
training embeddings.

Edits operate on a Selection stamped with the revision it was computed at;
applying an edit against a scene that has since changed raises instead of
silently moving the wrong Gaussians.  Undo restores the affected rows from
saved copies, so the inverse is bit-exact regardless of float rounding in
the forward op.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError
from .geometry import axis_angle_rot, quat_mul, quat_normalize, quat_to_rot, rot_to_quat
from .scene import PARAM_DTYPE, GaussianScene
from .semantics import Selection

EDIT_KINDS = ("translate", "rotate", "resize", "remove")

# vertical axis for augmentation yaw; world y points down (OpenCV frame)
VERTICAL_AXIS = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class EditOp:
    """One object edit: what to move and how.

    Only the fields of the op's kind are read: translation for translate,
    rotation (and optional pivot) for rotate, scale (and optional pivot)
    for resize, nothing extra for remove.  A missing pivot means the
    selection centroid.
    """

    kind: str
    selection: Selection
    translation: np.ndarray | None = None
    rotation: np.ndarray | None = None
    pivot: np.ndarray | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise InvalidArgumentError(
                f"kind must be one of {EDIT_KINDS}, got {self.kind!r}")
        if self.kind == "translate":
            t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
            if t.shape != (3,) or not np.all(np.isfinite(t)):
                raise InvalidArgumentError("translate needs a finite 3-vector")
            object.__setattr__(self, "translation", t)
        elif self.kind == "rotate":
            q = np.asarray(self.rotation, dtype=np.float64).reshape(-1)
            if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise InvalidArgumentError(
                    "rotate needs a unit quaternion (w, x, y, z)")
            object.__setattr__(self, "rotation", q)
        elif self.kind == "resize":
            if self.scale is None or not np.isfinite(self.scale) \
                    or self.scale <= 0.0:
                raise InvalidArgumentError("resize needs a positive scale")
            object.__setattr__(self, "scale", float(self.scale))
        if self.pivot is not None:
            p = np.asarray(self.pivot, dtype=np.float64).reshape(-1)
            if p.shape != (3,) or not np.all(np.isfinite(p)):
                raise InvalidArgumentError("pivot must be a finite 3-vector")
            object.__setattr__(self, "pivot", p)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "selection": self.selection.to_json()}
        if self.translation is not None:
            out["translation"] = [float(v) for v in self.translation]
        if self.rotation is not None:
            out["rotation"] = [float(v) for v in self.rotation]
        if self.pivot is not None:
            out["pivot"] = [float(v) for v in self.pivot]
        if self.scale is not None:
            out["scale"] = float(self.scale)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "EditOp":
        try:
            return cls(
                kind=data["kind"],
                selection=Selection.from_json(data["selection"]),
                translation=data.get("translation"),
                rotation=data.get("rotation"),
                pivot=data.get("pivot"),
                scale=data.get("scale"),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidArgumentError(f"bad edit JSON: {exc}") from exc


def _checked_indices(scene: GaussianScene, selection: Selection) -> np.ndarray:
    if selection.revision != scene.revision:
        raise InvalidStateError(
            f"selection from revision {selection.revision} is stale; scene "
            f"is at revision {scene.revision}")
    idx = selection.indices
    if idx.size and (idx.min() < 0 or idx.max() >= scene.n):
        raise InvalidArgumentError("selection indices out of range")
    return idx


def _pivot_for(scene: GaussianScene, idx: np.ndarray, op: EditOp) -> np.ndarray:
    if op.pivot is not None:
        return op.pivot
    if idx.size == 0:
        return np.zeros(3)
    return scene.x[idx].astype(np.float64).mean(axis=0)


def apply_edit(scene: GaussianScene, op: EditOp) -> int:
    """Apply one edit; returns the new scene revision.

    Unselected rows are untouched down to the bit.  The op (as JSON) lands
    on scene.edit_log and an exact undo record on scene.history.
    """
    idx = _checked_indices(scene, op.selection)
    record = {
        "indices": idx.copy(),
        "x": scene.x[idx].copy(),
        "scale": scene.scale[idx].copy(),
        "q": scene.q[idx].copy(),
        "active": scene.active[idx].copy(),
    }
    if op.kind == "translate":
        x = scene.x[idx].astype(np.float64) + op.translation
        scene.x[idx] = x.astype(PARAM_DTYPE)
    elif op.kind == "rotate":
        pivot = _pivot_for(scene, idx, op)
        R = quat_to_rot(op.rotation)
        x = scene.x[idx].astype(np.float64)
        scene.x[idx] = ((x - pivot) @ R.T + pivot).astype(PARAM_DTYPE)
        q = scene.q[idx].astype(np.float64)
        rotated = np.stack([
            quat_normalize(quat_mul(op.rotation, qi)) for qi in q
        ]) if idx.size else q
        scene.q[idx] = rotated.astype(PARAM_DTYPE)
    elif op.kind == "resize":
        pivot = _pivot_for(scene, idx, op)
        x = scene.x[idx].astype(np.float64)
        scene.x[idx] = (pivot + op.scale * (x - pivot)).astype(PARAM_DTYPE)
        s = scene.scale[idx].astype(np.float64) * op.scale
        scene.scale[idx] = s.astype(PARAM_DTYPE)
    else:  # remove
        scene.active[idx] = False
    scene.history.append(record)
    scene.edit_log.append(op.to_json())
    return scene.bump()


def undo(scene: GaussianScene) -> int:
    """Restore the rows touched by the last edit, bit-exact."""
    if not scene.history:
        raise InvalidStateError("edit history is empty; nothing to undo")
    record = scene.history.pop()
    idx = record["indices"]
    scene.x[idx] = record["x"]
    scene.scale[idx] = record["scale"]
    scene.q[idx] = record["q"]
    scene.active[idx] = record["active"]
    if scene.edit_log:
        scene.edit_log.pop()
    return scene.bump()


def replay_edits(scene: GaussianScene, edit_log) -> GaussianScene:
    """Re-run a JSON edit log against a copy of the scene.

    Selections are revision-stamped, so each op is rebased onto the copy's
    current revision before applying; the byte-identical result is the
    oracle for persistence and service restarts.
    """
    out = scene.copy()
    out.history = []
    out.edit_log = []
    for entry in edit_log:
        op = EditOp.from_json(entry)
        rebased = EditOp(
            kind=op.kind,
            selection=Selection(indices=op.selection.indices,
                                revision=out.revision,
                                origin=op.selection.origin),
            translation=op.translation, rotation=op.rotation,
            pivot=op.pivot, scale=op.scale,
        )
        apply_edit(out, rebased)
    return out


@dataclass(frozen=True)
class AugmentSpec:
    """Distributions for the per-object layout jitter."""

    p_remove: float = 0.3
    translation_range: float = 0.2
    rotation_range: float = float(np.radians(15.0))
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_remove <= 1.0:
            raise InvalidArgumentError("p_remove must lie in [0, 1]")
        if self.translation_range < 0.0 or self.rotation_range < 0.0:
            raise InvalidArgumentError("jitter ranges must be non-negative")


def layout_augment(scene: GaussianScene, objects, spec: AugmentSpec,
                   step: int = 0, *, with_log: bool = False):
    """Random per-object remove / translate / yaw, on a copy of the scene.

    The base scene is never touched.  Draws are a pure function of
    (spec.rng_seed, step), so a training run replays exactly.  With
    with_log=True also returns one record per object (indices, dropped,
    rotation, translation) so gradients computed on the view can be
    mapped back onto the base parameters.
    """
    flat = np.concatenate([np.asarray(sel.indices, dtype=np.int64)
                           for sel in objects]) if objects else \
        np.zeros(0, dtype=np.int64)
    if flat.size != np.unique(flat).size:
        raise InvalidArgumentError("augmentation objects must be disjoint")
    if flat.size and (flat.min() < 0 or flat.max() >= scene.n):
        raise InvalidArgumentError("object indices out of range")
    base_revision = scene.revision
    view = scene.copy()
    view.history = []
    rng = np.random.default_rng([spec.rng_seed, step])
    log = []
    for sel in objects:
        idx = np.asarray(sel.indices, dtype=np.int64)
        # fixed draw order per object keeps the stream aligned whether or
        # not the object ends up removed
        drop = rng.uniform() < spec.p_remove
        t = rng.uniform(-spec.translation_range, spec.translation_range, 3)
        yaw = rng.uniform(-spec.rotation_range, spec.rotation_range)
        record = {"indices": idx, "dropped": bool(drop), "rotation": None,
                  "translation": None}
        log.append(record)
        if idx.size == 0:
            continue
        if drop:
            view.active[idx] = False
            continue
        if spec.translation_range == 0.0 and spec.rotation_range == 0.0:
            continue
        x = view.x[idx].astype(np.float64)
        pivot = x.mean(axis=0)
        R = axis_angle_rot(VERTICAL_AXIS, float(yaw))
        moved = (x - pivot) @ R.T + pivot + t
        view.x[idx] = moved.astype(PARAM_DTYPE)
        rot_q = rot_to_quat(R)
        q = view.q[idx].astype(np.float64)
        view.q[idx] = np.stack([
            quat_normalize(quat_mul(rot_q, qi)) for qi in q
        ]).astype(PARAM_DTYPE)
        record["rotation"] = rot_q
        record["translation"] = t
    view.bump()
    assert scene.revision == base_revision
    if with_log:
        return view, log
    return view
