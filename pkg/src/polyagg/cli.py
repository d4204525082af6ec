"""``polyagg`` command line: generate, train, agglomerate, hierarchy, metrics, bench.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical
failure. Parameter precedence: command-line flag, then the ``--config`` file
(a ``[<command>]`` table first, then top-level keys), then ``POLYAGG_SEED``
for the seed, then built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
from pathlib import Path

from polyagg._io import atomic_write_text, write_json
from polyagg.errors import GraphError, MeshError, ModelFormatError, NumericalError

log = logging.getLogger("polyagg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULTS = {
    "generate": {"kind": None, "n": 16, "count": None, "out": None, "out_dir": None,
                 "grid_range": "8,16", "voronoi_range": "50,200"},
    "train": {"train_manifest": None, "val_manifest": None, "train_per_type": 200,
              "val_per_type": 50, "epochs": 300, "lr": 1e-5, "l2": 1e-5, "batch": 4,
              "out": "model.json"},
    "agglomerate": {"mesh": None, "method": "kmeans", "model": None, "h_target": "4h0",
                    "no_adjust": False, "out": "agg.json"},
    "hierarchy": {"mesh": None, "method": "kmeans", "model": None, "factors": "2,4,8",
                  "no_adjust": False, "out": "hierarchy.json"},
    "metrics": {"mesh": None, "agg": None, "table": False, "methods": "kmeans,multilevel",
                "model": None, "n": 16, "voronoi_n": 256, "factor": 4.0,
                "baseline": "multilevel", "out": None},
    "bench": {"methods": "kmeans,multilevel", "model": None, "sizes": None, "samples": 20,
              "out": "runtime.csv"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file with parameter values")
    common.add_argument("--seed", type=int, help="global seed (else config, POLYAGG_SEED, 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="polyagg", description="Polygonal mesh agglomeration by recursive bisection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    g = sub.add_parser("generate", parents=[common], help="synthetic meshes")
    g.add_argument("--kind", default=S, choices=["squares", "triangles", "random-triangles",
                                                 "voronoi"])
    g.add_argument("--n", type=int, default=S, help="grid resolution or number of seeds")
    g.add_argument("--count", type=int, default=S,
                   help="dataset mode: meshes per kind (or of --kind when given)")
    g.add_argument("--out", default=S, help="output mesh file (single-mesh mode)")
    g.add_argument("--out-dir", default=S, help="output directory (dataset mode)")
    g.add_argument("--grid-range", default=S, help="lo,hi resolution for grid kinds")
    g.add_argument("--voronoi-range", default=S, help="lo,hi seed count for voronoi")

    t = sub.add_parser("train", parents=[common], help="train the GNN bisection model")
    t.add_argument("--train-manifest", default=S)
    t.add_argument("--val-manifest", default=S)
    t.add_argument("--train-per-type", type=int, default=S)
    t.add_argument("--val-per-type", type=int, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--l2", type=float, default=S)
    t.add_argument("--batch", type=int, default=S)
    t.add_argument("--out", default=S, help="model file (best validation checkpoint)")

    for name, extra in (("agglomerate", "--h-target"), ("hierarchy", "--factors")):
        a = sub.add_parser(name, parents=[common])
        a.add_argument("--mesh", default=S, help="mesh file")
        a.add_argument("--method", default=S, choices=["gnn", "kmeans", "multilevel"])
        a.add_argument("--model", default=S, help="model file (gnn method)")
        if extra == "--h-target":
            a.add_argument("--h-target", default=S, help="absolute length or <k>h0")
        else:
            a.add_argument("--factors", default=S, help="comma-separated multiples of h0")
        a.add_argument("--no-adjust", action="store_true", default=S,
                       help="skip interface-length adjustment")
        a.add_argument("--out", default=S)

    m = sub.add_parser("metrics", parents=[common], help="UF/CR quality metrics")
    m.add_argument("--mesh", default=S)
    m.add_argument("--agg", default=S, help="agglomeration JSON (default: identity)")
    m.add_argument("--table", action="store_true", default=S,
                   help="quality table over generator meshes and methods (CSV)")
    m.add_argument("--methods", default=S)
    m.add_argument("--model", default=S)
    m.add_argument("--n", type=int, default=S, help="grid resolution for --table")
    m.add_argument("--voronoi-n", type=int, default=S, help="voronoi seeds for --table")
    m.add_argument("--factor", type=float, default=S, help="target size in h0 for --table")
    m.add_argument("--baseline", default=S)
    m.add_argument("--out", default=S)

    b = sub.add_parser("bench", parents=[common], help="bisection runtime benchmark")
    b.add_argument("--methods", default=S)
    b.add_argument("--model", default=S)
    b.add_argument("--sizes", default=S, help="comma-separated element counts")
    b.add_argument("--samples", type=int, default=S)
    b.add_argument("--out", default=S)
    return p


# -- configuration ----------------------------------------------------------------
def _load_config(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def resolve_config(command: str, flags: dict, config_path=None, environ=None) -> dict:
    """Effective parameters for ``command`` (flags > config > env seed > defaults)."""
    environ = os.environ if environ is None else environ
    cfg = dict(DEFAULTS[command])
    seed = 0
    if environ.get("POLYAGG_SEED"):
        try:
            seed = int(environ["POLYAGG_SEED"])
        except ValueError:
            raise UsageError(f"POLYAGG_SEED must be an integer, got {environ['POLYAGG_SEED']!r}")
    cfg["seed"] = seed
    if config_path:
        doc = _load_config(config_path)
        section = doc.get(command, {})
        for src in (doc, section):
            for k, v in src.items():
                k = k.replace("-", "_")
                if k in cfg and not isinstance(v, dict):
                    cfg[k] = v
    for k, v in flags.items():
        if k in ("config", "verbose", "command"):
            continue
        if v is not None:
            cfg[k] = v
    return cfg


def _echo_path(out) -> Path:
    out = Path(out)
    return out / "config.json" if out.is_dir() else out.with_name(out.name + ".config.json")


def _write_echo(command: str, cfg: dict, out):
    write_json(_echo_path(out), {"command": command, **cfg})


def _int_pair(s) -> tuple[int, int]:
    if isinstance(s, (list, tuple)):
        lo, hi = s
    else:
        lo, hi = str(s).split(",")
    return int(lo), int(hi)


def _float_list(s) -> list[float]:
    if isinstance(s, (list, tuple)):
        return [float(v) for v in s]
    return [float(v) for v in str(s).split(",") if v.strip()]


def _str_list(s) -> list[str]:
    if isinstance(s, (list, tuple)):
        return [str(v) for v in s]
    return [v.strip() for v in str(s).split(",") if v.strip()]


def parse_h_target(value, h0: float) -> float:
    """``"4h0"`` -> 4 * h0; a plain number is an absolute length."""
    s = str(value).strip()
    m = re.fullmatch(r"([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*h0", s)
    try:
        h = float(m.group(1)) * h0 if m else float(s)
    except ValueError:
        raise UsageError(f"bad target size {value!r}; use a length or <k>h0")
    if not h > 0:
        raise UsageError(f"target size must be positive, got {value!r}")
    return h


def _bisector(method, model_path, seed):
    from polyagg.gnn.model import load_model
    from polyagg.partitioners import make_bisector

    if method == "gnn" and not model_path:
        raise UsageError("--model is required for the gnn method")
    model = load_model(model_path) if method == "gnn" else None
    return make_bisector(method, model, seed)


# -- commands ------------------------------------------------------------------------
def cmd_generate(cfg) -> int:
    from polyagg.gnn.train import TrainDatasetSpec
    from polyagg.mesh import MESH_KINDS, format_mesh, generate_mesh

    if cfg["count"] is None:
        if not cfg["out"]:
            raise UsageError("generate needs --out (single mesh) or --count/--out-dir")
        mesh = generate_mesh(cfg["kind"] or "squares", int(cfg["n"]), int(cfg["seed"]))
        atomic_write_text(cfg["out"], format_mesh(mesh))
        _write_echo("generate", cfg, cfg["out"])
        print(f"wrote {cfg['out']} ({mesh.n_cells} cells)")
        return EXIT_OK

    if not cfg["out_dir"]:
        raise UsageError("dataset mode needs --out-dir")
    count = int(cfg["count"])
    if count < 0:
        raise UsageError("--count must be >= 0")
    kinds = [cfg["kind"]] if cfg["kind"] else list(MESH_KINDS)
    spec = TrainDatasetSpec(counts={k: count for k in kinds},
                            grid_range=_int_pair(cfg["grid_range"]),
                            voronoi_range=_int_pair(cfg["voronoi_range"]), seed=int(cfg["seed"]))
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (kind, n, s) in enumerate(spec.entries()):
        name = f"{idx:04d}_{kind}_n{n}.txt"
        atomic_write_text(out_dir / name, format_mesh(generate_mesh(kind, n, s)))
        entries.append({"file": name, "kind": kind, "n": n, "seed": s})
    write_json(out_dir / "manifest.json", {"version": 1, "meshes": entries})
    _write_echo("generate", cfg, out_dir)
    print(f"wrote {len(entries)} meshes to {out_dir}")
    return EXIT_OK


def read_manifest(path) -> list:
    from polyagg.mesh import load_mesh

    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        entries = doc["meshes"]
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}: invalid manifest JSON: {exc}") from None
    except (KeyError, TypeError):
        raise MeshError(f"{path}: manifest has no 'meshes' list") from None
    return [load_mesh(path.parent / e["file"]) for e in entries]


def cmd_train(cfg) -> int:
    from polyagg.gnn.model import GnnModel, save_model
    from polyagg.gnn.train import TrainConfig, TrainDatasetSpec, train

    seed = int(cfg["seed"])
    if cfg["train_manifest"]:
        train_meshes = read_manifest(cfg["train_manifest"])
    else:
        train_meshes = TrainDatasetSpec.per_type(int(cfg["train_per_type"]), seed).build("dataset")
    if cfg["val_manifest"]:
        val_meshes = read_manifest(cfg["val_manifest"])
    else:
        val_meshes = TrainDatasetSpec.per_type(int(cfg["val_per_type"]), seed).build("dataset/val")
    tc = TrainConfig(learning_rate=float(cfg["lr"]), l2_coeff=float(cfg["l2"]),
                     batch_size=int(cfg["batch"]), epochs=int(cfg["epochs"]), seed=seed)
    out = Path(cfg["out"])
    _write_echo("train", cfg, out)
    result = train(GnnModel.init(seed=seed), train_meshes, val_meshes, tc)
    save_model(result.best_model, out)
    save_model(result.model, out.with_name(out.stem + ".final" + out.suffix))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for row in result.history[1:]:
        w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])
    atomic_write_text(out.with_name(out.stem + ".history.csv"), buf.getvalue())
    h = result.history
    print(f"val loss {h[0]['val_loss']:.6f} -> {h[-1]['val_loss']:.6f}; wrote {out}")
    return EXIT_OK


def _agg_doc(method, mesh_path, levels) -> dict:
    return {"version": 1, "method": method, "mesh": str(mesh_path),
            "levels": [{"h_target": lvl.h_target, "assignment": lvl.assignment.tolist()}
                       for lvl in levels]}


def _need_mesh(cfg):
    from polyagg.mesh import load_mesh

    if not cfg["mesh"]:
        raise UsageError("--mesh is required")
    return load_mesh(cfg["mesh"])


def cmd_agglomerate(cfg) -> int:
    from polyagg.agglomerate import agglomerate
    from polyagg.mesh import mesh_size

    mesh = _need_mesh(cfg)
    h = parse_h_target(cfg["h_target"], mesh_size(mesh))
    model = _bisector(cfg["method"], cfg["model"], int(cfg["seed"]))
    agg = agglomerate(mesh, h, model, adjust=not cfg["no_adjust"])
    write_json(cfg["out"], _agg_doc(cfg["method"], cfg["mesh"], [agg]), indent=None)
    _write_echo("agglomerate", cfg, cfg["out"])
    print(f"{mesh.n_cells} cells -> {agg.n_coarse} coarse cells; wrote {cfg['out']}")
    return EXIT_OK


def cmd_hierarchy(cfg) -> int:
    from polyagg.agglomerate import build_hierarchy

    mesh = _need_mesh(cfg)
    try:
        factors = _float_list(cfg["factors"])
    except ValueError:
        raise UsageError(f"bad --factors {cfg['factors']!r}") from None
    if not factors:
        raise UsageError("--factors is empty")
    model = _bisector(cfg["method"], cfg["model"], int(cfg["seed"]))
    try:
        hier = build_hierarchy(mesh, factors, model, adjust=not cfg["no_adjust"])
    except ValueError as exc:
        if isinstance(exc, (MeshError, GraphError)):
            raise
        raise UsageError(str(exc)) from None
    hier.check_nested()
    write_json(cfg["out"], _agg_doc(cfg["method"], cfg["mesh"], hier.levels[1:]), indent=None)
    _write_echo("hierarchy", cfg, cfg["out"])
    sizes = " -> ".join(str(lvl.n_coarse) for lvl in hier.levels)
    print(f"levels {sizes}; wrote {cfg['out']}")
    return EXIT_OK


def load_agglomeration(path, mesh):
    """AgglomeratedMesh objects from an agglomeration JSON file."""
    from polyagg.agglomerate import AgglomeratedMesh

    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != 1:
            raise MeshError(f"{path}: unsupported agglomeration version {doc.get('version')!r}")
        return [AgglomeratedMesh(mesh, lvl["assignment"], lvl.get("h_target"))
                for lvl in doc["levels"]]
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}: invalid JSON: {exc}") from None
    except (KeyError, TypeError) as exc:
        raise MeshError(f"{path}: malformed agglomeration file ({exc})") from None
    except ValueError as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{path}: {exc}") from None


def cmd_metrics(cfg) -> int:
    from polyagg.agglomerate import AgglomeratedMesh
    from polyagg.metrics import QualityReport, quality_table

    if cfg["table"]:
        from polyagg.mesh import generate_mesh

        seed = int(cfg["seed"])
        n = int(cfg["n"])
        meshes = {"squares": generate_mesh("squares", n, seed),
                  "triangles": generate_mesh("triangles", n, seed),
                  "random-triangles": generate_mesh("random-triangles", n, seed),
                  "voronoi": generate_mesh("voronoi", int(cfg["voronoi_n"]), seed)}
        methods = {m: _bisector(m, cfg["model"], seed) for m in _str_list(cfg["methods"])}
        base = cfg["baseline"] if cfg["baseline"] in methods else None
        table = quality_table(meshes, methods, float(cfg["factor"]), base)
        text = table.to_csv()
        out = cfg["out"] or "quality.csv"
        atomic_write_text(out, text)
        _write_echo("metrics", cfg, out)
        sys.stdout.write(text)
        return EXIT_OK

    mesh = _need_mesh(cfg)
    levels = load_agglomeration(cfg["agg"], mesh) if cfg["agg"] else [AgglomeratedMesh.identity(mesh)]
    doc = {"version": 1, "mesh": str(cfg["mesh"]), "levels": []}
    for lvl in levels:
        r = QualityReport.of(lvl)
        doc["levels"].append({"h_target": lvl.h_target, **r.summary(),
                              "uf_values": r.uf.tolist(), "cr_values": r.cr.tolist()})
    text = json.dumps(doc, indent=None) + "\n"
    if cfg["out"]:
        atomic_write_text(cfg["out"], text)
        _write_echo("metrics", cfg, cfg["out"])
    for k, lvl in enumerate(doc["levels"]):
        print(f"level {k}: {lvl['n_elements']} elements, "
              f"mean UF {lvl['uf_mean']:.4f}, mean CR {lvl['cr_mean']:.4f}")
    return EXIT_OK


def cmd_bench(cfg) -> int:
    from polyagg.metrics import bench_sizes, runtime_bench

    seed = int(cfg["seed"])
    methods = {m: _bisector(m, cfg["model"], seed) for m in _str_list(cfg["methods"])}
    sizes = [int(v) for v in _float_list(cfg["sizes"])] if cfg["sizes"] else bench_sizes()
    report = runtime_bench(methods, sizes, int(cfg["samples"]), seed)
    atomic_write_text(cfg["out"], report.to_csv())
    _write_echo("bench", cfg, cfg["out"])
    for (method, n) in report.samples:
        print(f"{method:>10s} n={n:5d} median {report.median(method, n) * 1e3:9.3f} ms")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "agglomerate": cmd_agglomerate,
            "hierarchy": cmd_hierarchy, "metrics": cmd_metrics, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = vars(args)
    logging.basicConfig(level=logging.INFO if flags.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, flags, flags.get("config"))
        code = COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"polyagg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"polyagg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MeshError, GraphError, ModelFormatError, OSError, ValueError) as exc:
        print(f"polyagg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return code


if __name__ == "__main__":
    sys.exit(main())
