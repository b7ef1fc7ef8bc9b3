"""Command-line entry point: ``mapalign {global,local,score,synth,sample}``.

Results are written as JSON (transforms as row-major 4x4 lists, lengths in
Angstrom).  Exit status is 0 on success, 1 on I/O, parse or validation
errors, and 2 when the pipeline itself finds nothing (coarse failure, no
local candidates, empty cloud).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .local_align import NoCandidatesError, align_local, volume_ratio
from .map_io import DensityMap, MRCError, add_noise, read_mrc, synthesize_map, write_mrc
from .pipeline import RunConfig, align_global, load_config, prepare
from .pointcloud import EmptyCloudError, EmptyKeypointsError, sample_grid, write_ply
from .registration import CoarseFailure, RigidTransform, apply
from .scoring import similarity

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_RESULT = 2

# numba complains about an old TBB even though it falls back to another layer
warnings.filterwarnings("ignore", message="The TBB threading layer")

# maps smaller than this (fraction of the larger) go through masked search by default
MASK_VOLUME_RATIO = 0.4


class UsageError(Exception):
    """Bad input that should map to exit status 1."""


def _add_common(p: argparse.ArgumentParser, maps: int) -> None:
    if maps >= 1:
        p.add_argument("-a", dest="map_a", required=True, help="first (source) map, MRC")
    if maps >= 2:
        p.add_argument("-b", dest="map_b", required=True, help="second (target) map, MRC")
    p.add_argument("-i", "--interval", type=float, default=None, help="sampling interval in Angstrom")
    p.add_argument("--contour", type=float, default=None, help="contour level override")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker threads (env CRYOALIGN_THREADS)")
    p.add_argument("--config", default=None, help="JSON or key=value settings file")
    p.add_argument("--out", required=True, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapalign", description="Rigid alignment of density maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("global", help="align map A onto map B")
    _add_common(p, 2)

    p = sub.add_parser("local", help="place a small map A inside a larger map B")
    _add_common(p, 2)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--no-mask", action="store_true", help="single unmasked attempt")
    mode.add_argument("--mask", action="store_true", help="force masked search")
    p.add_argument("--candidates", type=int, default=None, help="number of ranked candidates")

    p = sub.add_parser("score", help="score map A moved by a given transform against map B")
    _add_common(p, 2)
    p.add_argument("-t", "--transform", required=True, help="JSON file with a 4x4 matrix")

    p = sub.add_parser("synth", help="synthesize a blob map from a JSON spec")
    p.add_argument("spec", help="JSON fixture spec")
    p.add_argument("--out", required=True, help="output MRC path")
    p.add_argument("--truth", required=True, help="ground-truth JSON path")

    p = sub.add_parser("sample", help="export the sampled cloud as PLY")
    _add_common(p, 1)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    """Defaults < config file < flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = cfg.update(load_config(args.config))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    flags = {
        "sampling_interval": args.interval,
        "contour": args.contour,
        "seed": args.seed,
        "threads": args.threads,
        "candidates": getattr(args, "candidates", None),
    }
    cfg = cfg.update({k: v for k, v in flags.items() if v is not None})
    if cfg.candidates < 1:
        raise UsageError("--candidates must be at least 1")
    try:
        return cfg.resolved()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _set_threads(cfg: RunConfig) -> None:
    threads = cfg.threads
    if threads is None and os.environ.get("CRYOALIGN_THREADS"):
        try:
            threads = int(os.environ["CRYOALIGN_THREADS"])
        except ValueError as exc:
            raise UsageError("CRYOALIGN_THREADS must be an integer") from exc
    if threads is None:
        return
    import numba

    if threads < 1:
        raise UsageError("thread count must be positive")
    numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def _read_map(path) -> DensityMap:
    try:
        return read_mrc(path)
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc
    except (OSError, MRCError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _write_json(path, payload) -> None:
    # write to a sibling temp file first so a failed run never leaves a partial output
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n")
    tmp.replace(path)


def _result_payload(result) -> dict:
    return {
        "matrix": result.transform.to_json(),
        "score": result.score.to_dict(),
        "timings_ms": {k: round(v, 3) for k, v in result.timings.items()},
        "counts": {k: result.diagnostics[k] for k in ("source", "target") if k in result.diagnostics},
        "matches": result.diagnostics.get("matches"),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_global(args) -> int:
    cfg = _config(args)
    _set_threads(cfg)
    a, b = _read_map(args.map_a), _read_map(args.map_b)
    result = align_global(a, b, cfg)
    _write_json(args.out, _result_payload(result))
    return EXIT_OK


def cmd_local(args) -> int:
    cfg = _config(args)
    _set_threads(cfg)
    a, b = _read_map(args.map_a), _read_map(args.map_b)
    if args.no_mask:
        use_masks = False
    elif args.mask:
        use_masks = True
    else:
        use_masks = volume_ratio(a, b) < MASK_VOLUME_RATIO
    candidates = align_local(a, b, cfg, use_masks=use_masks)
    _write_json(args.out, [c.to_dict() for c in candidates])
    return EXIT_OK


def _read_transform(path) -> RigidTransform:
    try:
        values = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read transform {path}: {exc}") from exc
    try:
        return RigidTransform.from_json(values)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid transform in {path}: {exc}") from exc


def cmd_score(args) -> int:
    cfg = _config(args)
    _set_threads(cfg)
    transform = _read_transform(args.transform)
    a, b = _read_map(args.map_a), _read_map(args.map_b)
    if cfg.contour is not None:
        a, b = a.with_contour(cfg.contour), b.with_contour(cfg.contour)
    params = cfg.mean_shift()
    ca = sample_grid(a, cfg.sampling_interval, params)
    cb = sample_grid(b, cfg.sampling_interval, params)
    moved = ca.transformed(transform.rotation, transform.translation)
    score = similarity(moved, cb, cfg.dot_threshold, cfg.pair_radius, cfg.grid_cell)
    _write_json(args.out, score.to_dict())
    return EXIT_OK


def synth_from_spec(spec: dict) -> tuple[DensityMap, dict]:
    """Build a fixture map and its ground-truth record from a spec dict.

    Recognised keys: ``centers`` (list of xyz) or ``random_blobs`` (count,
    placed uniformly in a cube of side ``box``), ``weights``, ``resolution``,
    ``voxel_size``, ``padding``, ``transform`` (4x4 applied to the centres),
    ``noise`` (fraction of peak density) and ``seed``.
    """
    if not isinstance(spec, dict):
        raise UsageError("spec must be a JSON object")
    known = {"centers", "random_blobs", "box", "weights", "resolution", "voxel_size", "padding", "transform", "noise", "seed"}
    unknown = set(spec) - known
    if unknown:
        raise UsageError(f"unknown spec keys: {sorted(unknown)}")
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    try:
        if "centers" in spec:
            centers = np.asarray(spec["centers"], dtype=np.float64).reshape(-1, 3)
        elif "random_blobs" in spec:
            n = int(spec["random_blobs"])
            if n < 1:
                raise UsageError("random_blobs must be at least 1")
            box = float(spec.get("box", 40.0))
            centers = rng.uniform(-box / 2, box / 2, size=(n, 3))
        else:
            raise UsageError("spec needs 'centers' or 'random_blobs'")
        weights = spec.get("weights")
        weights = np.ones(len(centers)) if weights is None else np.asarray(weights, dtype=np.float64)
        transform = RigidTransform.from_json(spec["transform"]) if "transform" in spec else RigidTransform.identity()
        moved = apply(transform, centers)
        m = synthesize_map(
            moved,
            weights,
            resolution=float(spec.get("resolution", 5.0)),
            voxel_size=float(spec.get("voxel_size", 1.0)),
            padding=float(spec.get("padding", 10.0)),
        )
        noise = float(spec.get("noise", 0.0))
        if noise > 0:
            m = add_noise(m, noise, rng)
    except UsageError:
        raise
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid spec: {exc}") from exc
    truth = {
        "matrix": transform.to_json(),
        "centers": centers.tolist(),
        "transformed_centers": moved.tolist(),
    }
    return m, truth


def cmd_synth(args) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {args.spec}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read spec {args.spec}: {exc}") from exc
    m, truth = synth_from_spec(spec)
    write_mrc(m, args.out)
    _write_json(args.truth, truth)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _config(args)
    _set_threads(cfg)
    m = _read_map(args.map_a)
    prep = prepare(m, cfg)
    labels = prep.keypoints.labels
    if labels is None:
        labels = np.full(len(prep.cloud), -1)
    write_ply(args.out, prep.cloud.points, prep.cloud.vectors, {"cluster": labels, "keypoint": labels >= 0})
    print(json.dumps(prep.counts()))
    return EXIT_OK


COMMANDS = {"global": cmd_global, "local": cmd_local, "score": cmd_score, "synth": cmd_synth, "sample": cmd_sample}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for bad usage, which here means "no result"
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mapalign: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (CoarseFailure, NoCandidatesError, EmptyCloudError, EmptyKeypointsError) as exc:
        print(f"mapalign: no result: {exc}", file=sys.stderr)
        return EXIT_NO_RESULT
    except OSError as exc:
        print(f"mapalign: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
