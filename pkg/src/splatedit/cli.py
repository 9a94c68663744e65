"""Batch driver: lift, train, render, query, edit, and serve subcommands.

Options resolve in three layers: hard defaults, then a TOML config file
(--config), then explicit flags, with later layers winning.  Every
subcommand is deterministic for a fixed --seed when the mock backends are
selected; outputs are byte-identical across runs.

Exit codes: 0 success, 2 validation problem (bad flags, bad files, bad
arguments), 3 backend or internal runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from .editing import AugmentSpec, EditOp, apply_edit
from .errors import (
    BackendError,
    InvalidArgumentError,
    InvalidStateError,
    RenderError,
    SplatEditError,
)
from .priors import mock_bundle, remote_bundle
from .raster import rasterize
from .scene import Camera
from .sceneio import load, read_png, save, write_png
from .semantics import query_bbox, query_text
from .trainer import TrainConfig, optimize

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BACKEND = 3

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 8723

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_AUGMENT_FIELDS = {f.name for f in dataclasses.fields(AugmentSpec)}
_CLI_KEYS = {
    "input", "out", "report", "camera", "focal", "trajectory", "text",
    "bbox", "tau", "k", "rho", "op", "host", "port", "backend",
    "backend_url", "seed",
}


@dataclass(frozen=True)
class CliConfig:
    """One resolved invocation: what to run, on what, with which knobs."""

    subcommand: str
    input: str | None
    out: str | None
    train: TrainConfig
    backend: str  # "mock" or a remote server URL
    seed: int
    trajectory: str | None = None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatedit",
        description="Lift an image into editable 3D Gaussians, train, "
                    "render, query, and edit the result.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML file supplying defaults; "
                                        "explicit flags win")
        p.add_argument("--seed", type=int)
        group = p.add_mutually_exclusive_group()
        group.add_argument("--backend", choices=["mock"],
                           help="use the deterministic built-in priors")
        group.add_argument("--backend-url",
                           help="URL of a prior-model server")

    def camera_opts(p: argparse.ArgumentParser) -> None:
        p.add_argument("--camera", help="JSON file with camera parameters")
        p.add_argument("--focal", type=float,
                       help="focal length for the default camera")

    p = sub.add_parser("lift", help="lift one image into a scene file")
    p.add_argument("--input", required=True, help="input PNG")
    p.add_argument("--out", required=True, help="output scene file")
    camera_opts(p)
    common(p)

    p = sub.add_parser("train", help="lift and optimize, writing a scene "
                                     "file plus a training report")
    p.add_argument("--input", required=True, help="input PNG")
    p.add_argument("--out", required=True, help="output scene file")
    p.add_argument("--report", help="training report path "
                                    "(default: <out>.report.ndjson)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda-recon", type=float)
    p.add_argument("--lambda-sds", type=float)
    p.add_argument("--lambda-distill", type=float)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--prompt")
    camera_opts(p)
    common(p)

    p = sub.add_parser("render", help="render a scene file along a "
                                      "camera trajectory")
    p.add_argument("--input", required=True, help="scene file")
    p.add_argument("--out", required=True,
                   help="output PNG (single pose) or directory")
    p.add_argument("--trajectory",
                   help="JSON file listing camera poses; defaults to the "
                        "camera stored in the scene file")
    common(p)

    p = sub.add_parser("query", help="select Gaussians by text or by a "
                                     "screen rectangle")
    p.add_argument("--input", required=True, help="scene file")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--text", help="language query")
    target.add_argument("--bbox", nargs=4, type=float,
                        metavar=("U0", "V0", "U1", "V1"),
                        help="screen-space rectangle")
    p.add_argument("--tau", type=float, help="relevancy threshold")
    p.add_argument("--k", type=int, help="rectangle query cluster count")
    p.add_argument("--rho", type=float,
                   help="rectangle query outlier fraction")
    camera_opts(p)
    common(p)

    p = sub.add_parser("edit", help="apply an edit operation file and "
                                    "write the edited scene")
    p.add_argument("--input", required=True, help="scene file")
    p.add_argument("--op", required=True, help="JSON file with the edit")
    p.add_argument("--out", help="output scene file (default: overwrite "
                                 "the input)")
    common(p)

    p = sub.add_parser("serve", help="run the HTTP/WebSocket service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    common(p)

    return parser


def _load_toml(path: str) -> dict:
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    allowed = _CLI_KEYS | _TRAIN_FIELDS | {"augment"}
    unknown = set(data) - allowed
    if unknown:
        raise InvalidArgumentError(
            f"unknown config keys: {sorted(unknown)}")
    aug = data.get("augment")
    if aug is not None:
        bad = set(aug) - _AUGMENT_FIELDS
        if bad:
            raise InvalidArgumentError(
                f"unknown augment keys: {sorted(bad)}")
    return data


def _merged(args: argparse.Namespace, toml_cfg: dict, key: str,
            default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in toml_cfg:
        return toml_cfg[key]
    return default


def _train_config(args: argparse.Namespace, toml_cfg: dict) -> TrainConfig:
    overrides = {}
    for name in _TRAIN_FIELDS:
        value = _merged(args, toml_cfg, name)
        if value is not None:
            overrides[name] = value
    if isinstance(overrides.get("augment"), dict):
        overrides["augment"] = AugmentSpec(**overrides["augment"])
    return TrainConfig(**overrides)


def resolve(args: argparse.Namespace, toml_cfg: dict) -> CliConfig:
    backend = _merged(args, toml_cfg, "backend")
    url = _merged(args, toml_cfg, "backend_url")
    if backend and url:
        raise InvalidArgumentError(
            "--backend and --backend-url are mutually exclusive")
    train = _train_config(args, toml_cfg)
    return CliConfig(
        subcommand=args.subcommand,
        input=_merged(args, toml_cfg, "input"),
        out=_merged(args, toml_cfg, "out"),
        train=train,
        backend=url if url else "mock",
        seed=train.seed,
        trajectory=_merged(args, toml_cfg, "trajectory"),
    )


def _bundle(backend: str, embed_dim: int | None = None):
    if backend == "mock":
        return mock_bundle() if embed_dim is None \
            else mock_bundle(embed_dim=embed_dim)
    return remote_bundle(backend) if embed_dim is None \
        else remote_bundle(backend, embed_dim=embed_dim)


def _center(extent: int) -> float:
    return (extent - 1) / 2.0 if extent % 2 == 0 else float(extent // 2)


def _camera_for(args: argparse.Namespace, toml_cfg: dict,
                image: np.ndarray) -> Camera:
    path = _merged(args, toml_cfg, "camera")
    if path:
        return Camera.from_json(json.loads(Path(path).read_text()))
    height, width = image.shape[:2]
    f = _merged(args, toml_cfg, "focal", float(max(height, width)))
    return Camera(fx=float(f), fy=float(f), cx=_center(width),
                  cy=_center(height), width=width, height=height,
                  T=np.eye(4))


def _stored_camera(scene) -> Camera:
    camera = scene.aux.get("camera")
    if camera is None:
        raise InvalidArgumentError(
            "the scene file stores no camera; pass --trajectory or "
            "--camera")
    return camera


def cmd_lift(cfg: CliConfig, args, toml_cfg) -> int:
    image = read_png(cfg.input)
    camera = _camera_for(args, toml_cfg, image)
    priors = _bundle(cfg.backend)
    scene, codec, _ = optimize(image, camera,
                               dataclasses.replace(cfg.train, steps=0),
                               priors)
    written = save(scene, codec, cfg.out, camera=camera,
                   metadata={"command": "lift"}, seed=cfg.seed)
    print(json.dumps({"out": cfg.out, "gaussians": scene.n,
                      "bytes": written}))
    return EXIT_OK


def cmd_train(cfg: CliConfig, args, toml_cfg) -> int:
    image = read_png(cfg.input)
    camera = _camera_for(args, toml_cfg, image)
    priors = _bundle(cfg.backend)
    scene, codec, report = optimize(image, camera, cfg.train, priors)
    written = save(scene, codec, cfg.out, camera=camera,
                   metadata={"command": "train"}, seed=cfg.seed)
    report_path = _merged(args, toml_cfg, "report",
                          f"{cfg.out}.report.ndjson")
    Path(report_path).write_text(report.to_ndjson())
    final = report.records[-1]["psnr"] if report.records else None
    print(json.dumps({"out": cfg.out, "gaussians": scene.n,
                      "bytes": written, "report": str(report_path),
                      "steps": len(report), "psnr": final}))
    return EXIT_OK


def _trajectory_cameras(cfg: CliConfig, scene) -> list:
    if cfg.trajectory is None:
        return [_stored_camera(scene)]
    data = json.loads(Path(cfg.trajectory).read_text())
    poses = data["cameras"] if isinstance(data, dict) else data
    if not isinstance(poses, list) or not poses:
        raise InvalidArgumentError(
            "trajectory must be a non-empty list of cameras")
    return [Camera.from_json(pose) for pose in poses]


def cmd_render(cfg: CliConfig, args, toml_cfg) -> int:
    scene, _ = load(cfg.input)
    cameras = _trajectory_cameras(cfg, scene)
    frames = [np.clip(rasterize(scene, cam).rgb, 0.0, 1.0)
              for cam in cameras]
    out = Path(cfg.out)
    if len(frames) == 1 and out.suffix.lower() == ".png":
        write_png(out, frames[0])
        paths = [str(out)]
    else:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, frame in enumerate(frames):
            path = out / f"frame_{i:04d}.png"
            write_png(path, frame)
            paths.append(str(path))
    print(json.dumps({"frames": paths}))
    return EXIT_OK


def cmd_query(cfg: CliConfig, args, toml_cfg) -> int:
    scene, codec = load(cfg.input)
    if args.text is not None:
        if codec is None or not codec.fitted:
            raise InvalidStateError(
                "text queries need a scene file with a fitted codec")
        bundle = _bundle(cfg.backend, embed_dim=codec.full_dim)
        tau = float(_merged(args, toml_cfg, "tau", 0.5))
        selection = query_text(scene, bundle.embedder, args.text, tau=tau)
    else:
        path = _merged(args, toml_cfg, "camera")
        camera = Camera.from_json(json.loads(Path(path).read_text())) \
            if path else _stored_camera(scene)
        selection = query_bbox(
            scene, camera, args.bbox,
            k=int(_merged(args, toml_cfg, "k", 3)),
            rho=float(_merged(args, toml_cfg, "rho", 0.1)))
    print(json.dumps(selection.to_json()))
    return EXIT_OK


def cmd_edit(cfg: CliConfig, args, toml_cfg) -> int:
    scene, codec = load(cfg.input)
    op = EditOp.from_json(json.loads(Path(args.op).read_text()))
    apply_edit(scene, op)
    out = cfg.out or cfg.input
    written = save(scene, codec, out, camera=scene.aux.get("camera"),
                   metadata={"command": "edit"},
                   seed=scene.aux.get("seed"))
    print(json.dumps({"out": out, "bytes": written,
                      "revision": scene.revision,
                      "edits": len(scene.edit_log)}))
    return EXIT_OK


def cmd_serve(cfg: CliConfig, args, toml_cfg) -> int:
    from .service import serve

    factory = None if cfg.backend == "mock" \
        else (lambda: remote_bundle(cfg.backend))
    serve(host=str(_merged(args, toml_cfg, "host", DEFAULT_HOST)),
          port=int(_merged(args, toml_cfg, "port", DEFAULT_PORT)),
          priors_factory=factory)
    return EXIT_OK


_HANDLERS = {
    "lift": cmd_lift,
    "train": cmd_train,
    "render": cmd_render,
    "query": cmd_query,
    "edit": cmd_edit,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse printed usage already
        return int(exc.code or 0)
    try:
        toml_cfg = _load_toml(args.config) if args.config else {}
        cfg = resolve(args, toml_cfg)
        return _HANDLERS[cfg.subcommand](cfg, args, toml_cfg)
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (SplatEditError, OSError, json.JSONDecodeError,
            tomli.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
