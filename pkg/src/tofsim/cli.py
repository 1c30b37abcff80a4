"""Command-line front end: ``tofsim generate`` and ``tofsim reconstruct``.

Both commands read a JSON run configuration, for example::

    {
      "camera": "kinect.json",          # path or inline CameraConfig dict
      "resolution": [64, 64],           # optional override
      "scene": {"type": "corner", "angle_deg": 90, "albedo": 0.5,
                "distance": 3.0, "patches": 1024},
      "augment": [{"op": "vignetting", "strength": 0.2},
                  {"op": "noise", "lut": "lut.toft"}],
      "pipeline": "lf2",
      "pipeline_options": {},
      "eval_range": [1.5, 5.0],
      "output_dir": "run1",
      "seed": 0
    }

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, tensorio
from .core import CameraConfig, ConfigError, DepthMap, ToFError
from .evaluation import depth_error_stats, export_report
from .motion import Affine2D, Velocity3D, correlate_with_motion, motion_method1
from .reconstruct import PIPELINES, run_pipeline
from .simulate import (apply_gain_map, apply_pixel_delay, build_noise_lut, correlate,
                       sample_noise, synthetic_shot_noise_pairs, tile_texture, vignetting)
from .transient import (DEFAULT_BIN_WIDTH, CornerScene, SceneResponse,
                        corner_two_bounce_response, quantized_depth, single_bounce_response)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

SCENE_OPS = {"delay"}
FRAME_OPS = {"gain", "texture", "vignetting", "motion1", "noise"}


class Run:
    """A parsed run configuration plus everything resolved from it."""

    def __init__(self, cfg: dict, base: Path, seed=None, out=None, threads=1):
        if not isinstance(cfg, dict):
            raise ConfigError("run configuration must be a JSON object")
        self.raw = cfg
        self.base = base
        self.threads = max(1, int(threads or 1))
        self.seed = int(seed if seed is not None else cfg.get("seed", 0))
        out = out if out is not None else cfg.get("output_dir")
        if not out:
            raise ConfigError("no output directory given (output_dir or --out)")
        self.out = self.path(out)
        self.camera = self._camera(cfg.get("camera"))
        if "resolution" in cfg:
            self.camera = self.camera.with_resolution(cfg["resolution"])
        self.scene = cfg.get("scene")
        if not isinstance(self.scene, dict) or "type" not in self.scene:
            raise ConfigError("scene must be an object with a 'type'")
        self.augment = list(cfg.get("augment", []))
        self.pipeline = cfg.get("pipeline", "lf2")
        self.pipeline_options = dict(cfg.get("pipeline_options", {}))
        rng = cfg.get("eval_range", [1.5, 5.0])
        if len(rng) != 2 or not rng[0] < rng[1]:
            raise ConfigError("eval_range must be [lo, hi] with lo < hi")
        self.eval_range = (float(rng[0]), float(rng[1]))
        self.record = {}

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def _camera(self, spec):
        if spec is None:
            raise ConfigError("run configuration has no camera")
        if isinstance(spec, str):
            try:
                spec = json.loads(self.path(spec).read_text())
            except FileNotFoundError:
                raise ConfigError(f"camera config {spec} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"camera config {spec}: {exc}") from None
        return CameraConfig.from_dict(spec)

    # -- generation ------------------------------------------------------------

    def scene_response(self):
        """(SceneResponse or None, RawFrames or None, truth depth)."""
        s = self.scene
        kind = s["type"]
        res = self.camera.resolution
        bw = float(s.get("bin_width", DEFAULT_BIN_WIDTH))
        if kind == "single_bounce":
            depth = self._depth_map(s, res)
            sr = single_bounce_response(depth, s.get("albedo", 1.0), int(s.get("n_tau", 1000)), bw,
                                        self.camera.c)
            return sr, None, quantized_depth(depth, bw, self.camera.c)
        if kind == "corner":
            scene = CornerScene(math.radians(float(s.get("angle_deg", 90.0))),
                                s.get("albedo", 0.5), float(s.get("distance", 3.0)),
                                int(s.get("patches", 1024)))
            sr, _, _, geom = corner_two_bounce_response(
                scene, self.camera, s.get("n_tau"), bw, threads=self.threads, return_parts=True)
            return sr, None, quantized_depth(geom.depth, bw, self.camera.c)
        if kind == "tensor":
            truth = tensorio.load(self.path(s["truth"]), tensorio.DEPTH_MAP).depth
            if "scene_response" in s:
                sr = tensorio.load(self.path(s["scene_response"]), tensorio.SCENE_RESPONSE)
                return sr, None, truth
            if "frames" in s:
                fr = tensorio.load(self.path(s["frames"]), tensorio.RAW_FRAMES)
                return None, fr, truth
            raise ConfigError("tensor scene needs 'scene_response' or 'frames'")
        raise ConfigError(f"unknown scene type {kind!r}")

    def _depth_map(self, s, res):
        if "depth" in s:
            return np.full(res, float(s["depth"]))
        if "ramp" in s:
            lo, hi = map(float, s["ramp"])
            return np.broadcast_to(np.linspace(lo, hi, res[1])[None, :], res).copy()
        if "depth_map" in s:
            return tensorio.load(self.path(s["depth_map"]), tensorio.DEPTH_MAP).depth
        raise ConfigError("single_bounce scene needs 'depth', 'ramp' or 'depth_map'")

    def generate(self):
        """Apply the augmentation chain in the order written."""
        sr, frames, truth = self.scene_response()
        applied = []
        for n, step in enumerate(self.augment):
            op = step.get("op")
            if op in SCENE_OPS or op == "motion2":
                if frames is not None:
                    raise ConfigError(f"augment[{n}] {op!r} needs a scene response; "
                                      "place it before frame-level steps")
            if op == "delay":
                sr = apply_pixel_delay(sr, float(step["seconds"]))
            elif op == "motion2":
                v = Velocity3D(*map(float, step["velocity"]))
                frames = correlate_with_motion(sr, v, self.camera)
            elif op in FRAME_OPS:
                if frames is None:
                    frames = correlate(sr, self.camera)
                frames = self._frame_op(n, step, frames, truth)
            else:
                raise ConfigError(f"augment[{n}]: unknown op {op!r}")
            applied.append(op)
        if frames is None:
            frames = correlate(sr, self.camera)
        self.record["augment_applied"] = applied
        return sr, frames, truth

    def _frame_op(self, n, step, frames, truth):
        op = step["op"]
        shape = frames.spatial_shape
        if op == "gain":
            return apply_gain_map(frames, float(step["value"]))
        if op == "texture":
            return apply_gain_map(frames, tile_texture(step["tile"], shape))
        if op == "vignetting":
            return apply_gain_map(frames, vignetting(shape, float(step.get("strength", 0.3)),
                                                     float(step.get("power", 2.0))))
        if op == "motion1":
            T = Affine2D.shift(float(step.get("dx", 0.0)), float(step.get("dy", 0.0)))
            return motion_method1([(frames, truth)], [T])
        if op == "noise":
            seed = int(step.get("seed", self.seed))
            self.record.setdefault("noise_seeds", []).append(seed)
            return sample_noise(self._lut(step), frames, seed)
        raise ConfigError(f"augment[{n}]: unknown op {op!r}")

    def _lut(self, step):
        if "lut" in step:
            return tensorio.load(self.path(step["lut"]), tensorio.NOISE_LUT)
        syn = step.get("synthetic")
        if syn is None:
            raise ConfigError("noise step needs 'lut' (file) or 'synthetic' parameters")
        levels = np.linspace(*map(float, syn.get("levels", [-1.0, 1.0])),
                             int(syn.get("n_levels", 200)))
        e, s = synthetic_shot_noise_pairs(levels, int(syn.get("repeats", 100)),
                                          float(syn.get("gain", 0.05)), seed=int(syn.get("seed", 0)))
        return build_noise_lut(e, s, int(syn.get("n_bins", 64)))

    def manifest(self, command, files):
        return {
            "tool": "tofsim",
            "version": __version__,
            "command": command,
            "seed": self.seed,
            "camera": self.camera.to_dict(),
            "config": self.raw,
            "eval_range": list(self.eval_range),
            "pipeline": self.pipeline,
            "pipeline_options": self.pipeline_options,
            **self.record,
            "files": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
        }


def _commit(out: Path, files: dict):
    """Write every file into a sibling temp dir, then swap it into place."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}-"))
    try:
        for name, data in files.items():
            (tmp / name).write_bytes(data)
        old = None
        if out.exists():
            old = out.parent / f".{out.name}-old-{os.getpid()}"
            out.rename(old)
        tmp.rename(out)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _with_manifest(run: Run, command: str, files: dict) -> dict:
    manifest = run.manifest(command, files)
    files["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    return files


def cmd_generate(run: Run):
    sr, frames, truth = run.generate()
    files = {}
    if sr is not None:
        files["scene_response.toft"] = tensorio.encode(*tensorio.to_tensor(sr))
    files["raw_frames.toft"] = tensorio.encode(*tensorio.to_tensor(frames))
    files["truth_depth.toft"] = tensorio.encode(*tensorio.to_tensor(DepthMap(truth)))
    _commit(run.out, _with_manifest(run, "generate", files))


def cmd_reconstruct(run: Run):
    if run.pipeline not in PIPELINES:
        raise ConfigError(f"unknown pipeline {run.pipeline!r}; valid: {', '.join(PIPELINES)}")
    _, frames, truth = run.generate()
    if frames.spatial_shape != truth.shape:
        raise ConfigError("frames and ground-truth depth differ in size")
    try:
        rec = run_pipeline(run.pipeline, frames, run.camera, **run.pipeline_options)
    except TypeError as exc:
        raise ConfigError(f"bad pipeline_options: {exc}") from None
    metrics = depth_error_stats(rec.depth, truth, rec.mask, run.eval_range)
    doc, table = export_report([metrics], [run.pipeline])
    files = {
        "depth.toft": tensorio.encode(*tensorio.to_tensor(rec.depth)),
        "mask.toft": tensorio.encode(*tensorio.to_tensor(rec.mask)),
        "report.json": (json.dumps(doc, indent=2) + "\n").encode(),
        "report.txt": table.encode(),
    }
    _commit(run.out, _with_manifest(run, "reconstruct", files))
    sys.stdout.write(table)


COMMANDS = {"generate": cmd_generate, "reconstruct": cmd_reconstruct}


def build_parser():
    ap = argparse.ArgumentParser(prog="tofsim", description="ToF simulation and reconstruction")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [("generate", "render a scene and write raw frames"),
                        ("reconstruct", "run a pipeline and write an error report")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="overrides the configuration seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (speed only)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        path = Path(args.config)
        try:
            cfg = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        run = Run(cfg, path.parent, args.seed, args.out, args.threads)
        COMMANDS[args.command](run)
    except OSError as exc:
        print(f"tofsim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"tofsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ToFError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"tofsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
