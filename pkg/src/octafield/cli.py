"""Command-line entry point: ``octafield {fit,extract,eval,manifold,frames,selftest}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "OCTAFIELD_THREADS"
FIXTURES = ("sphere", "crease30", "crease90", "crease120")


class UsageError(Exception):
    """Bad input from the user: missing file, malformed config, invalid value."""


class RunFailure(Exception):
    """The command ran but could not produce its output."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def version_string() -> str:
    """Package version, with the short commit hash when run from a git checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "-C", str(here), "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _input_error(path, e: Exception) -> UsageError:
    msg = str(e)
    return UsageError(msg if str(path) in msg else f"{path}: {msg}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def load_cloud(source: str) -> np.ndarray:
    """Read a point cloud from a file or a ``fixture:<name>`` reference."""
    from . import io

    if source.startswith("fixture:"):
        name = source.split(":", 1)[1]
        if name == "sphere":
            with resources.as_file(resources.files("octafield") / "data" / "sphere.xyz") as p:
                return io.read_points(p)
        if name.startswith("crease") and name[6:] in ("30", "90", "120"):
            from .fixtures import crease_cloud

            return crease_cloud(float(name[6:]))[0]
        raise UsageError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")
    try:
        return io.read_points(_existing(source))
    except ValueError as e:
        raise _input_error(source, e) from e


def _load_mesh_or_cloud(path: str, n: int, seed: int) -> np.ndarray:
    from . import io
    from .geometry import sample_mesh

    p = _existing(path)
    try:
        if p.suffix.lower() in (".ply", ".obj"):
            mesh = io.read_mesh(p)
            if len(mesh.faces):
                return sample_mesh(mesh, n, seed)
            if len(mesh.vertices) == 0:
                raise UsageError(f"{path}: empty input")
            return mesh.vertices
        return io.read_points(p)
    except ValueError as e:
        raise _input_error(path, e) from e


def _write_bytes_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _resolution(text: str) -> int:
    try:
        r = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must be an integer, got {text!r}") from None
    if r < 8:
        raise argparse.ArgumentTypeError(f"resolution must be at least 8, got {r}")
    return r


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def build_config(config_path: str | None, preset: str | None, overrides: dict):
    """Preset defaults, then the config file, then command-line overrides."""
    from .training import TrainConfig

    file_values: dict = {}
    if config_path is not None:
        try:
            file_values = json.loads(_existing(config_path).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{config_path}: not valid JSON ({e})") from e
        if not isinstance(file_values, dict):
            raise UsageError(f"{config_path}: expected a JSON object")
    file_values = dict(file_values)
    name = preset or file_values.pop("preset", "desk")
    file_values.pop("preset", None)
    lambdas = dict(file_values.pop("lambdas", {}) or {})
    lambdas.update(overrides.pop("lambdas", {}))
    values = {**file_values, **overrides}
    try:
        cfg = TrainConfig.preset(name, **values)
        cfg.lambdas = {k: float(v) for k, v in lambdas.items()}
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from e
    return cfg, name


def _fit_overrides(args) -> dict:
    from .losses import TERMS

    out: dict = {}
    for key in ("seed", "iterations", "lr", "noise", "mc_resolution", "alpha", "checkpoint_every"):
        v = getattr(args, key)
        if v is not None:
            out[key] = v
    if args.batch is not None:
        out.update(n_input=args.batch, n_close=args.batch, n_off=args.batch)
    lam = {t: getattr(args, f"lambda_{t}") for t in TERMS if getattr(args, f"lambda_{t}") is not None}
    if lam:
        out["lambdas"] = lam
    return out


def cmd_fit(args) -> int:
    from .geometry import normalize
    from .nets import save_checkpoint
    from .training import TrainingDiverged, build_networks, fit

    cloud = load_cloud(args.input)
    overrides = _fit_overrides(args)
    recorded = json.loads(json.dumps(overrides))
    cfg, preset = build_config(args.config, args.preset, overrides)
    try:
        pts, tr = normalize(cloud)
    except ValueError as e:
        raise UsageError(f"{args.input}: {e}") from e
    if len(pts) < cfg.knn_k:
        raise UsageError(f"{args.input}: need at least {cfg.knn_k} points for the sampling radius, got {len(pts)}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": version_string(),
        "input": args.input,
        "n_points": int(len(cloud)),
        "preset": preset,
        "config": cfg.to_dict(),
        "overrides": recorded,
        "schedule": cfg.schedule().__dict__,
        "weights": cfg.weights().__dict__,
        "normalization": tr.to_dict(),
    }
    extra = {"config": cfg.to_dict(), "normalization": tr.to_dict(), "version": meta["version"]}
    nets = build_networks(cfg, pts)

    def callback(it, report):
        if args.progress and (it % args.progress == 0 or it == cfg.iterations - 1):
            print(report.as_row(it), file=sys.stderr, flush=True)
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{it + 1:06d}.bin", nets[0], nets[1], {**extra, "iteration": it + 1})

    try:
        res = fit(pts, cfg, nets=nets, callback=callback, diagnostic_path=str(out / "diverged.bin"))
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    save_checkpoint(out / "model.bin", res.f_net, res.u_net, {**extra, "iteration": cfg.iterations})
    _write_bytes_atomic(out / "loss_log.txt", res.log_text().encode())
    _write_bytes_atomic(out / "metadata.json", _json_bytes(meta))
    print(f"wrote {out / 'model.bin'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract / eval
# ---------------------------------------------------------------------------


def _load_model(path: str):
    from .geometry import Normalization
    from .nets import load_checkpoint

    p = _existing(path)
    try:
        f, u, extra = load_checkpoint(p)
    except (ValueError, KeyError) as e:
        raise _input_error(path, e) from e
    tr = Normalization.from_dict(extra["normalization"]) if "normalization" in extra else None
    return f, u, extra, tr


def cmd_extract(args) -> int:
    from . import io
    from .geometry import extract_mesh

    f, _, extra, tr = _load_model(args.checkpoint)
    res = args.resolution or int(extra.get("config", {}).get("mc_resolution", 128))
    import warnings

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mesh = extract_mesh(f, res)
    if len(mesh.faces) == 0:
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        raise RunFailure("the zero level set is empty; no mesh written")
    if tr is not None and not args.normalized:
        mesh = mesh.transformed(tr)
    out = Path(args.out)
    if out.suffix.lower() not in (".obj", ".ply"):
        raise UsageError(f"mesh output must end in .obj or .ply, got {out.name}")
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_mesh(out, mesh)
    print(f"wrote {out} ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .geometry import evaluate

    a = _load_mesh_or_cloud(args.a, args.n_samples, args.seed)
    b = _load_mesh_or_cloud(args.b, args.n_samples, args.seed + 1)
    if len(a) == 0 or len(b) == 0:
        raise UsageError("empty input")
    report = evaluate(a, b, args.tau)
    text = report.to_json() + "\n"
    if args.out:
        _write_bytes_atomic(Path(args.out), text.encode())
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# manifold / frames
# ---------------------------------------------------------------------------


def cmd_manifold(args) -> int:
    from .figures import fibonacci_sphere, manifold_loss, manifold_minima

    dirs = fibonacci_sphere(args.resolution)
    vals = manifold_loss(args.loss, dirs)
    lines = ["x,y,z,loss"] + [f"{d[0]:.17g},{d[1]:.17g},{d[2]:.17g},{v:.17g}" for d, v in zip(dirs, vals)]
    _write_bytes_atomic(Path(args.out), ("\n".join(lines) + "\n").encode())
    minima = manifold_minima(args.loss, dirs, vals)
    print(f"wrote {args.out}: {len(dirs)} directions, loss in [{vals.min():.6g}, {vals.max():.6g}]")
    print(f"local minima: {len(minima)}")
    for m in minima:
        print(f"  {m[0]: .6f} {m[1]: .6f} {m[2]: .6f}")
    return EXIT_OK


def _glyph_ply(glyphs, centers_world, size: float) -> bytes:
    colours = np.array([[230, 60, 60], [60, 200, 60], [60, 90, 230]], dtype=np.uint8)
    g = len(glyphs.centers)
    verts, cols, edges = [], [], []
    for i in range(g):
        c = centers_world[i]
        base = len(verts)
        verts.append(c)
        cols.append([255, 255, 255])
        for a in range(3):
            for sgn in (1.0, -1.0):
                verts.append(c + sgn * size * glyphs.axes[i][:, a])
                cols.append(colours[a])
                edges.append((base, len(verts) - 1))
    header = ["ply", "format ascii 1.0", f"comment glyphs {g} size {size:.9g}"]
    for i in np.flatnonzero(glyphs.flagged):
        header.append(f"comment flagged {i} residual {glyphs.residual[i]:.6g}")
    header += [f"element vertex {len(verts)}", "property float x", "property float y", "property float z",
               "property uchar red", "property uchar green", "property uchar blue",
               f"element edge {len(edges)}", "property int vertex1", "property int vertex2", "end_header"]
    body = [f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {int(c[0])} {int(c[1])} {int(c[2])}" for v, c in zip(verts, cols)]
    body += [f"{a} {b}" for a, b in edges]
    return ("\n".join(header + body) + "\n").encode()


def cmd_frames(args) -> int:
    from .figures import frame_glyphs

    f, u, _, tr = _load_model(args.checkpoint)
    if u is None:
        raise UsageError(f"{args.checkpoint}: checkpoint has no field network")
    cloud = load_cloud(args.cloud)[::args.stride]
    pts = tr.apply(cloud) if tr is not None else cloud
    glyphs = frame_glyphs(u, pts, threshold=args.threshold)
    size = args.size * (tr.scale if tr is not None else 1.0)
    _write_bytes_atomic(Path(args.out), _glyph_ply(glyphs, cloud, size))
    print(f"wrote {args.out}: {len(cloud)} glyphs, {int(glyphs.flagged.sum())} flagged")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import format_table, run_selftest

    checks = run_selftest(args.inject_fault)
    print(format_table(checks))
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .figures import MANIFOLD_LOSSES
    from .losses import TERMS
    from .selftest import FAULTS

    p = argparse.ArgumentParser(prog="octafield", allow_abbrev=False,
                                description="Surface reconstruction with a jointly fitted octahedral field.")
    p.add_argument("--version", action="version", version=f"%(prog)s {version_string()}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, allow_abbrev=False)

    f = add("fit", "Fit the distance network and the frame field to a point cloud.")
    f.add_argument("input", help="point cloud (.xyz/.txt/.pts/.ply/.obj) or fixture:<name> "
                                 f"with name in {{{', '.join(FIXTURES)}}}")
    f.add_argument("--out", required=True, help="output directory for model.bin, loss_log.txt and metadata.json")
    f.add_argument("--config", help="JSON file of TrainConfig fields (see README); flags below override it")
    f.add_argument("--preset", choices=("desk", "full"), help="base settings (default: the config's, else desk)")
    f.add_argument("--seed", type=int, help="random seed for initialisation and sampling")
    f.add_argument("--iterations", type=_positive_int, help="number of optimisation steps")
    f.add_argument("--lr", type=float, help="Adam learning rate for both networks")
    f.add_argument("--noise", choices=("low", "high"), help="loss schedule for the expected noise level")
    f.add_argument("--batch", type=_positive_int, help="input, close and off-surface batch size")
    f.add_argument("--mc-resolution", dest="mc_resolution", type=_resolution,
                   help="default grid size recorded for extract")
    f.add_argument("--alpha", type=float, help="decay rate of the off-surface term")
    f.add_argument("--checkpoint-every", dest="checkpoint_every", type=int,
                   help="also save checkpoint_<iteration>.bin every N iterations (0 = never)")
    for t in TERMS:
        f.add_argument(f"--lambda-{t}", dest=f"lambda_{t}", type=float, metavar="W",
                       help=f"weight of the {t} term (overrides the schedule)")
    f.add_argument("--progress", type=int, default=0, metavar="N",
                   help="print the loss row to stderr every N iterations (0 = quiet)")
    f.set_defaults(func=cmd_fit)

    e = add("extract", "Extract the zero level set of a fitted model as a triangle mesh.")
    e.add_argument("checkpoint", help="model.bin written by fit")
    e.add_argument("--out", required=True, help="mesh file (.obj or .ply)")
    e.add_argument("--resolution", type=_resolution, help="grid size per axis, at least 8 (default: from the model)")
    e.add_argument("--normalized", action="store_true", help="keep normalised coordinates instead of the input's")
    e.set_defaults(func=cmd_extract)

    v = add("eval", "Chamfer, Hausdorff and F-score between two meshes or point clouds.")
    v.add_argument("a", help="reconstruction (mesh is sampled, point cloud used as is)")
    v.add_argument("b", help="reference (mesh is sampled, point cloud used as is)")
    v.add_argument("--n-samples", dest="n_samples", type=_positive_int, default=1_000_000,
                   help="samples drawn from each mesh input")
    v.add_argument("--seed", type=int, default=0, help="sampling seed (the reference uses seed + 1)")
    v.add_argument("--tau", type=float, help="F-score distance threshold (default: 0.5%% of the reference diagonal)")
    v.add_argument("--out", help="also write the JSON report here")
    v.set_defaults(func=cmd_eval)

    m = add("manifold", "Tabulate a loss between the canonical frame and its projection over directions.")
    m.add_argument("--loss", choices=MANIFOLD_LOSSES, required=True, help="distance used between the two frames")
    m.add_argument("--resolution", type=_positive_int, default=100_000, help="number of sphere directions")
    m.add_argument("--out", required=True, help="CSV file with columns x,y,z,loss")
    m.set_defaults(func=cmd_manifold)

    g = add("frames", "Write frame glyphs recovered from the field network as a PLY line set.")
    g.add_argument("checkpoint", help="model.bin written by fit")
    g.add_argument("cloud", help="points at which to draw frames (file or fixture:<name>)")
    g.add_argument("--out", required=True, help="PLY file with vertices and edges")
    g.add_argument("--stride", type=_positive_int, default=1, help="use every N-th point")
    g.add_argument("--size", type=float, default=0.02, help="half length of each glyph axis, normalised units")
    g.add_argument("--threshold", type=float, default=0.05,
                   help="flag glyphs whose field value is farther than this from a valid frame")
    g.set_defaults(func=cmd_frames)

    s = add("selftest", "Run the embedded analytic checks.")
    s.add_argument("--inject-fault", dest="inject_fault", choices=FAULTS,
                   help="negative control: corrupt a constant so the affected checks must fail")
    s.set_defaults(func=cmd_selftest)
    return p


def _apply_threads() -> None:
    n = os.environ.get(THREADS_ENV)
    if n:
        import torch

        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {n!r}") from None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors and 0 for --help
        return int(e.code or 0)
    try:
        _apply_threads()
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RunFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


def main_entry() -> None:
    """Console-script wrapper."""
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
