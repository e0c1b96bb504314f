"""Command-line front end.

Every subcommand writes its primary output to ``--out`` and a JSON run
manifest to ``<out>.manifest.json``. Exit codes: 0 success, 1 runtime
error, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager, nullcontext

import numpy as np

from . import __version__
from . import extract, field, formats, learn, metrics
from .mesh import MeshError, TriangleMesh, load_obj, save_obj

log = logging.getLogger("threepole")


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.data = {
            "command": command,
            "flags": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
            "seeds": {"seed": args.seed},
            "inputs": {},
            "timings": {},
            "version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }

    def add_input(self, path):
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
        self.data["inputs"][str(path)] = h.hexdigest()

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        yield
        self.data["timings"][name] = time.perf_counter() - t0

    def write(self, out):
        with open(f"{out}.manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _load_mesh(path, man: Manifest) -> TriangleMesh:
    man.add_input(path)
    with man.stage("load_mesh"):
        return load_obj(path)


# ---- argument types -------------------------------------------------------

def _ranged_int(lo, hi):
    def parse(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{s!r} is not an integer") from None
        if not lo <= v <= hi:
            raise argparse.ArgumentTypeError(f"{v} not in [{lo}, {hi}]")
        return v
    return parse


def _depth_list(s):
    parts = [p for p in s.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("empty depth list")
    return [_ranged_int(6, 9)(p) for p in parts]


def _int_tuple(s):
    try:
        out = tuple(int(p) for p in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{s!r} is not a comma-separated integer list") from None
    if not out or min(out) <= 0:
        raise argparse.ArgumentTypeError("hidden widths must be positive")
    return out


_non_negative = _ranged_int(0, 2 ** 31 - 1)
_positive = _ranged_int(1, 2 ** 31 - 1)


# ---- commands -------------------------------------------------------------

def cmd_compute_field(args, man):
    mesh = _load_mesh(args.mesh, man)
    with man.stage("octree"):
        octree = field.build_octree(mesh, args.depth, args.padding)
    with man.stage("evaluate"):
        grid = field.compute_grid(mesh, args.depth, octree=octree)
    with man.stage("write"):
        formats.save_grid(grid, args.out)
        if args.labels:
            formats.save_labels(grid, args.labels)
    log.info("grid %s, null fraction %.3f", "x".join(map(str, grid.dims)), grid.null_fraction())


def _model_geometry(model_path, extra):
    try:
        n = 2 ** int(extra["depth"]) + 1
        return field.FieldGrid((n, n, n), extra["lo"], extra["hi"], np.zeros(n ** 3))
    except KeyError:
        raise ValueError(f"{model_path}: checkpoint lacks grid geometry; pass --grid") from None


def cmd_reconstruct(args, man):
    if args.grid is None and args.model is None:
        raise ValueError("reconstruct needs --grid, --model, or both")
    grid = None
    if args.grid is not None:
        man.add_input(args.grid)
        with man.stage("load_grid"):
            grid = formats.load_grid(args.grid)
    if args.model is not None:
        man.add_input(args.model)
        model, extra = learn.load_model(args.model)
        geometry = grid if grid is not None else _model_geometry(args.model, extra)
        with man.stage("predict"):
            grid = learn.predict_grid(model, geometry)
    with man.stage("marching_cubes"):
        raw = extract.marching_cubes_3p(grid, args.iso)
    with man.stage("strip"):
        mesh = extract.strip_null(raw)
    if args.fill or args.smooth:
        with man.stage("cleanup"):
            mesh = extract.cleanup(mesh, args.fill, args.smooth)
    if mesh.n_triangles == 0:
        log.warning("reconstruction is empty (no faces)")
    with man.stage("write"):
        save_obj(mesh, args.out)
    man.data["result"] = {"vertices": mesh.n_vertices, "faces": mesh.n_triangles,
                          "invalid_vertices": raw.n_invalid}


def _samples(args, mesh, man):
    if args.samples is not None:
        man.add_input(args.samples)
        return formats.load_samples(args.samples)
    with man.stage("octree"):
        octree = field.build_octree(mesh, args.depth, args.padding)
    with man.stage("sample"):
        return field.sample_points(mesh, octree, args.strategy, args.count, args.seed)


def cmd_sample(args, man):
    mesh = _load_mesh(args.mesh, man)
    batch = _samples(args, mesh, man)
    with man.stage("write"):
        formats.save_samples(batch, args.out, with_targets=args.targets)
    man.data["result"] = {"count": len(batch),
                          "label_counts": np.bincount(batch.labels, minlength=3).tolist()}


def cmd_fit(args, man):
    mesh = _load_mesh(args.mesh, man)
    batch = _samples(args, mesh, man)
    config = learn.TrainConfig(
        hidden=args.hidden, lr=args.lr, lr_decay=args.lr_decay, batch_size=args.batch_size,
        epochs=args.epochs, seed=args.seed, mode=args.mode, posenc=args.posenc,
        class_weights=args.class_weights)
    with man.stage("train"):
        model, losses = learn.train(batch, config)
    lo, size = field.bounding_cube(mesh, args.padding)
    extra = {"depth": args.depth, "lo": lo.tolist(), "hi": (lo + size).tolist()}
    with man.stage("write"):
        learn.save_model(model, args.out, extra)
    man.data["result"] = {"samples": len(batch), "final_loss": float(losses[-1]) if len(losses) else None}


def cmd_eval(args, man):
    ref = _load_mesh(args.gt, man)
    man.add_input(args.rec)
    rec = load_obj(args.rec, allow_empty=True)
    with man.stage("sample"):
        a = metrics.surface_sample(rec, args.n, args.seed) if rec.n_triangles else None
        b = metrics.surface_sample(ref, args.n, args.seed + 1)
    tau = args.tau if args.tau is not None else metrics.default_tau(ref)
    result = {"chamfer_l2": None, "fscore": 0.0, "emd": None}
    with man.stage("metrics"):
        if a is not None:
            result["chamfer_l2"] = metrics.chamfer_l2(a, b)
            result["fscore"] = metrics.fscore(a, b, tau)
            if args.emd:
                sa = metrics.surface_sample(rec, args.emd, args.seed + 2)
                sb = metrics.surface_sample(ref, args.emd, args.seed + 3)
                result["emd"] = metrics.emd_exact(sa, sb)
        topo = metrics.topology_stats(rec)
    result.update(boundary_edges=topo.boundary_edges, euler=topo.euler, components=topo.components)
    line = json.dumps(result, sort_keys=True, default=_jsonable)
    print(line)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(line + "\n")
    man.data["result"] = dict(result, n=args.n, tau=tau)


def machine_info() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor(),
            "cpus": os.cpu_count(), "python": platform.python_version(), "numpy": np.__version__}


def bench_conversion(grid: field.FieldGrid, repeats: int = 3) -> float:
    """Median grid-to-mesh time (marching cubes plus null stripping)."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        extract.strip_null(extract.marching_cubes_3p(grid))
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cmd_bench(args, man):
    mesh = _load_mesh(args.mesh, man)
    rows = []
    for d in args.depths:
        with man.stage(f"field_depth{d}"):
            grid = field.compute_grid(mesh, d, args.padding)
        t = bench_conversion(grid, args.repeats)
        rows.append({"depth": d, "grid": grid.dims[0], "seconds": t})
        print(f"depth {d}  grid {grid.dims[0]}^3  conversion {t:.4f} s (median of {args.repeats})")
    table = {"rows": rows, "machine": machine_info()}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2)
        fh.write("\n")
    man.data["result"] = table


# ---- parser ---------------------------------------------------------------

def _common(p, out_help):
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--seed", type=_non_negative, default=0)
    p.add_argument("--threads", type=_positive, default=None,
                   help="BLAS/OpenMP thread cap (default: all cores); affects timing only")
    p.add_argument("--verbose", "-v", action="store_true")


def _sampling(p):
    p.add_argument("--mesh", required=True)
    p.add_argument("--depth", type=_ranged_int(1, 10), default=6)
    p.add_argument("--padding", type=float, default=0.05)
    p.add_argument("--strategy", choices=field.STRATEGIES, default="octree")
    p.add_argument("--count", type=_positive, default=20000,
                   help="point budget for random/uniform sampling")
    p.add_argument("--samples", default=None, help="read a 3PS1 batch instead of sampling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="threepole", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compute-field", help="mesh -> 3PF1 field grid")
    p.add_argument("--mesh", required=True)
    p.add_argument("--depth", type=_ranged_int(4, 10), required=True)
    p.add_argument("--padding", type=float, default=0.05)
    p.add_argument("--labels", default=None, help="also write a 3PL1 label file")
    _common(p, "grid file (.3pf)")
    p.set_defaults(func=cmd_compute_field)

    p = sub.add_parser("reconstruct", help="3PF1 grid or model checkpoint -> OBJ")
    p.add_argument("--grid", default=None)
    p.add_argument("--model", default=None, help="3PM1 checkpoint; predicts the grid first")
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--fill", type=_non_negative, default=0, help="fill holes up to this many edges")
    p.add_argument("--smooth", type=_non_negative, default=0, help="Laplacian smoothing iterations")
    _common(p, "mesh file (.obj)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sample", help="mesh -> 3PS1 training samples")
    _sampling(p)
    p.add_argument("--targets", action="store_true", help="store signed distance targets")
    _common(p, "sample file (.3ps)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit", help="train a model on one shape")
    _sampling(p)
    p.add_argument("--mode", choices=learn.MODES, default="triclass")
    d = learn.TrainConfig()
    p.add_argument("--hidden", type=_int_tuple, default=d.hidden, help="comma-separated widths")
    p.add_argument("--epochs", type=_non_negative, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--lr-decay", type=float, default=d.lr_decay, help="per-epoch learning-rate factor")
    p.add_argument("--batch-size", type=_positive, default=d.batch_size)
    p.add_argument("--posenc", action="store_true")
    p.add_argument("--class-weights", action="store_true")
    _common(p, "checkpoint file (.3pm1)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="compare a reconstruction against a reference mesh")
    p.add_argument("--rec", required=True, help="reconstructed mesh")
    p.add_argument("--gt", required=True, help="reference mesh")
    p.add_argument("--n", type=_positive, default=100000, help="surface samples per mesh")
    p.add_argument("--tau", type=float, default=None, help="F-score radius (default 1%% of gt bbox diagonal)")
    p.add_argument("--emd", type=_ranged_int(0, metrics.EMD_MAX_POINTS), default=0,
                   help="points per mesh for exact EMD (0 skips it)")
    _common(p, "JSON result file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="grid-to-mesh conversion timing per depth")
    p.add_argument("--mesh", required=True)
    p.add_argument("--depths", type=_depth_list, default=[6, 7, 8])
    p.add_argument("--repeats", type=_positive, default=3)
    p.add_argument("--padding", type=float, default=0.05)
    _common(p, "JSON timing table")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    man = Manifest(args.command, args)
    if args.threads:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    else:
        limit = nullcontext()
    try:
        with limit, man.stage("total"):
            args.func(args, man)
    except (OSError, ValueError, MeshError, learn.TrainingDiverged) as exc:
        print(f"threepole {args.command}: error: {exc}", file=sys.stderr)
        return 1
    man.write(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
