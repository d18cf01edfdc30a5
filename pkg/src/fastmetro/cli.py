"""Command-line entry point: ``python -m fastmetro <command> ...``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime or numeric error.

Every command validates its inputs first, then writes a run manifest
(``status: running``) before doing any work, and finally rewrites it with
``ok`` or ``failed``. Paths inside a manifest are relative to the directory
holding it. Timestamps honour ``SOURCE_DATE_EPOCH`` for reproducible output.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .bench import SWEEP_TOKENS, bench_forward, token_sweep
from .data import SyntheticDataset, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, FastMetroError, NumericError, TrainingError
from .experiments import compare_masking
from .mesh import Topology, read_obj, subdivide, tetra_topology, write_ply
from .model import FastMETRO, ModelConfig, count_parameters
from .numeric import Tensor, no_grad
from .train import evaluate, load_checkpoint, read_checkpoint, summarize, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
TOPOLOGY_KEYS = ("num_joints", "num_vertices", "num_fine_vertices")


class UsageError(FastMetroError):
    pass


# -- run manifest ------------------------------------------------------------------------

def build_id() -> str:
    """Content hash of the package sources (stable across checkouts of the same code)."""
    h = hashlib.sha1()
    root = Path(__file__).resolve().parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch else dt.datetime.now(dt.timezone.utc)
    return when.replace(microsecond=0).isoformat()


@dataclass
class RunManifest:
    command: str
    config: str | None
    output: str | None
    seed: int | None
    timestamp: str
    build: str
    status: str = "running"
    error: str | None = None


class ManifestWriter:
    """Writes the manifest to ``path`` (or one JSON line on stderr when ``path`` is None)."""

    def __init__(self, path: Path | None, command: str, config=None, output=None, seed=None):
        self.path = path
        base = path.parent if path is not None else Path.cwd()
        rel = lambda p: None if p is None else os.path.relpath(Path(p).resolve(), base.resolve())  # noqa: E731
        self.manifest = RunManifest(command, rel(config) if config and Path(config).exists() else config,
                                    rel(output), seed, _timestamp(), build_id())
        self._emit()

    def _emit(self) -> None:
        text = json.dumps(asdict(self.manifest), indent=2, sort_keys=True) + "\n"
        if self.path is None:
            sys.stderr.write(json.dumps(asdict(self.manifest), sort_keys=True) + "\n")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(text, encoding="utf-8")

    def finish(self, error: BaseException | None = None) -> None:
        self.manifest.status = "ok" if error is None else "failed"
        self.manifest.error = None if error is None else f"{type(error).__name__}: {error}"
        self._emit()


# -- configuration files -------------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be an object")
    return data


def model_config_from_section(section: dict) -> ModelConfig:
    """``{"variant": "S", ...overrides}`` or a full field dictionary."""
    section = dict(section)
    variant = section.pop("variant", None)
    try:
        if variant is None:
            return ModelConfig.from_dict(section)
        unknown = sorted(set(section) - set(ModelConfig().to_dict()))
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return ModelConfig.variant(variant, **section)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunConfig:
    model_section: dict
    train: dict
    model_seed: int = 0

    def model_config(self, topology: Topology | None = None, image_size=None) -> ModelConfig:
        cfg = model_config_from_section(self.model_section)
        if topology is not None:
            derived = {"num_joints": topology.num_joints, "num_vertices": topology.num_vertices,
                       "num_fine_vertices": topology.num_fine_vertices}
            for key, value in derived.items():
                if key in self.model_section and self.model_section[key] != value:
                    raise ConfigError(f"config sets {key}={self.model_section[key]} but the data has {value}")
            cfg = cfg.with_topology(topology)
        if image_size is not None and tuple(image_size) != cfg.image_size:
            if "image_size" in self.model_section:
                raise ConfigError(f"config image_size {cfg.image_size} does not match data {tuple(image_size)}")
            cfg = replace(cfg, image_size=tuple(image_size))
        return cfg


def load_run_config(path_or_variant: str) -> RunConfig:
    """A variant name (S/M/L) or a JSON file with ``model``, ``train`` and ``model_seed`` keys."""
    if path_or_variant.upper().removeprefix("FASTMETRO-") in ("S", "M", "L") and not Path(path_or_variant).exists():
        return RunConfig({"variant": path_or_variant}, {})
    data = _read_json(path_or_variant)
    unknown = sorted(set(data) - {"model", "train", "model_seed"})
    if unknown:
        raise ConfigError(f"{path_or_variant}: unknown top-level keys {unknown}")
    rc = RunConfig(data.get("model", {}), data.get("train", {}), int(data.get("model_seed", 0)))
    model_config_from_section(rc.model_section)  # validate early
    from .train import TrainConfig
    TrainConfig.from_dict(rc.train)
    return rc


# -- commands ----------------------------------------------------------------------------------

def _topology_from_mesh_arg(mesh: str, joints: int | None) -> Topology:
    if mesh == "tetra":
        return tetra_topology(joints or 4)
    path = Path(mesh)
    if not path.exists():
        raise UsageError(f"mesh file {mesh} does not exist (use 'tetra' for the built-in reference mesh)")
    coarse = read_obj(path)
    k = joints or min(14, coarse.vertex_count)
    return Topology.from_mesh(coarse, k)


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError(f"--count must be at least 1, got {args.count}")
    if args.joints is not None and args.joints < 1:
        raise UsageError("--joints must be positive")
    topology = _topology_from_mesh_arg(args.mesh, args.joints)
    out = Path(args.out)
    run = ManifestWriter(out / "run.json", "gen-data", None, out, args.seed)
    try:
        ds = generate_dataset(args.count, topology, args.seed, tuple(args.image_size), args.deformation)
        save_dataset(out, ds)
    except BaseException as exc:
        run.finish(exc)
        raise
    run.finish()
    print(f"wrote {len(ds)} samples to {out} (K={topology.num_joints}, N={topology.num_vertices}, "
          f"M={topology.num_fine_vertices}, image {ds.image_size[0]}x{ds.image_size[1]})")
    return EXIT_OK


def _load_data(path) -> SyntheticDataset:
    if not Path(path).is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return load_dataset(path)


def cmd_train(args) -> int:
    from .train import TrainConfig
    rc = load_run_config(args.config)
    data = _load_data(args.data)
    cfg = rc.model_config(data.topology, data.image_size)
    tcfg = TrainConfig.from_dict(rc.train)
    train_set, eval_set = data.split(tcfg.holdout)
    out = Path(args.out)
    run = ManifestWriter(out / "run.json", "train", args.config, out, tcfg.seed)
    try:
        model = FastMETRO(cfg, data.topology, rc.model_seed)
        res = train(model, train_set, tcfg, eval_set, log_path=out / "log.csv",
                    checkpoint_path=out / "best.ckpt", dump_dir=out)
    except BaseException as exc:
        run.finish(exc)
        raise
    run.finish()
    last = res.log[-1]
    print(f"trained {tcfg.epochs} epochs: final loss {last['loss_total']:.4g}, "
          f"best PA-MPJPE {res.best_pa_mpjpe:.4g} at epoch {res.best_epoch}; checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def _model_for_checkpoint(checkpoint, data: SyntheticDataset) -> FastMETRO:
    ckpt = read_checkpoint(checkpoint)
    cfg = ckpt.model_config
    topo = data.topology
    theirs = (topo.num_joints, topo.num_vertices, topo.num_fine_vertices)
    ours = tuple(getattr(cfg, k) for k in TOPOLOGY_KEYS)
    if ours != theirs:
        raise DataError(f"checkpoint expects (K, N, M) = {ours} but the data has {theirs}")
    if tuple(data.image_size) != cfg.image_size:
        raise DataError(f"checkpoint expects {cfg.image_size} images, data has {tuple(data.image_size)}")
    model = FastMETRO(cfg, topo)
    load_checkpoint(checkpoint, model)
    return model


def cmd_eval(args) -> int:
    data = _load_data(args.data)
    model = _model_for_checkpoint(args.checkpoint, data)
    report = Path(args.report)
    run = ManifestWriter(report.with_name(report.name + ".run.json"), "eval", None, report, None)
    try:
        rows = evaluate(model, data)
        means = summarize(rows)
        L.write_report(report, rows + [{"sample_id": "mean", **means}])
    except BaseException as exc:
        run.finish(exc)
        raise
    run.finish()
    print(f"{len(rows)} samples: MPJPE {means['mpjpe']:.4f}  PA-MPJPE {means['pa_mpjpe']:.4f}  "
          f"MPVPE {means['mpvpe']:.4f}")
    return EXIT_OK


def _out_manifest(args, command, config=None, seed=None):
    out = getattr(args, "out", None)
    return ManifestWriter(Path(out) / "run.json" if out else None, command, config, out, seed)


def cmd_audit(args) -> int:
    cfg = load_run_config(args.config).model_config()
    run = _out_manifest(args, "audit", args.config)
    counts = count_parameters(cfg)
    lines = [f"{'component':<18}{'parameters':>14}"]
    for key in ("tokens", "input_projection", "positional", "encoder", "decoder", "reduction", "heads"):
        lines.append(f"{key:<18}{counts[key]:>14,}")
    lines.append(f"{'transformer total':<18}{counts['total']:>14,}  ({counts['total'] / 1e6:.2f}M)")
    lines.append(f"{'backbone (toy)':<18}{counts['backbone']:>14,}  (not in total)")
    print("\n".join(lines))
    if args.out:
        (Path(args.out) / "audit.json").write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n")
    run.finish()
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.batch < 1 or args.iters < 1:
        raise UsageError("--batch and --iters must be positive")
    cfg = load_run_config(args.config).model_config()
    run = _out_manifest(args, "bench", args.config)
    result = {}
    try:
        if args.sweep:
            rows = token_sweep(cfg.stage_dims[0], cfg.num_heads, SWEEP_TOKENS, args.batch, args.iters,
                               cfg.mlp_expansion)
            result["sweep"] = rows
            print(f"one encoder layer, D={cfg.stage_dims[0]}, batch {args.batch}")
            for r in rows:
                print(f"  tokens {r['tokens']:>4}: {r['median_ms']:9.2f} ms (median), "
                      f"{r['mean_ms']:9.2f} +/- {r['std_ms']:.2f} ms")
        else:
            r = bench_forward(cfg, args.batch, args.iters)
            result["forward"] = r
            print(f"forward pass, batch {args.batch}: {r['mean_ms']:.2f} +/- {r['std_ms']:.2f} ms, "
                  f"{r['samples_per_s']:.2f} samples/s")
        if args.out:
            (Path(args.out) / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    except BaseException as exc:
        run.finish(exc)
        raise
    run.finish()
    return EXIT_OK


def _head_subset(model: FastMETRO, head_set: str) -> list[int]:
    heads = model.config.num_heads
    if head_set == "all":
        return list(range(heads))
    if model.config.mask_mode == "off":
        raise UsageError("--head-set masked needs a model trained with masking")
    if model.config.mask_mode == "half_heads":
        return list(range(heads // 2))
    return list(range(heads))


def cmd_export_attention(args) -> int:
    data = _load_data(args.data)
    model = _model_for_checkpoint(args.checkpoint, data)
    if not 0 <= args.sample < len(data):
        raise UsageError(f"--sample {args.sample} is out of range for {len(data)} samples")
    heads = _head_subset(model, args.head_set)
    out = Path(args.out)
    run = ManifestWriter(out / "run.json", "export-attention", None, out, None)
    try:
        with no_grad():
            result = model.forward(Tensor(data.arrays([args.sample])["images"]), record_attention=True)
        k, n = model.config.num_joints, model.config.num_vertices
        labels = [f"joint_{i}" for i in range(k)] + [f"vertex_{i}" for i in range(n)]
        self_avg = np.mean([m[0, heads] for m in result.attention["decoder_self"]], axis=(0, 1))
        with (out / "self_attention.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query", *labels])
            for label, row in zip(labels, self_avg):
                w.writerow([label, *map(repr, row.tolist())])
        gh, gw = model.config.feature_grid
        cross_avg = np.mean([m[0, :, :k][heads] for m in result.attention["decoder_cross"]], axis=(0, 1))
        with (out / "cross_attention.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["joint", "grid_row", "grid_col", "score"])
            for j in range(k):
                for cell, score in enumerate(cross_avg[j].tolist()):
                    w.writerow([j, cell // gw, cell % gw, repr(score)])
        faces = None
        coarse = data.topology.coarse
        if coarse is not None:
            fine, up = subdivide(coarse)
            if np.array_equal(up.to_dense(), data.topology.upsample.to_dense()):
                faces = fine.faces
        write_ply(out / "mesh.ply", result.fine_vertices3d.data[0], faces)
    except BaseException as exc:
        run.finish(exc)
        raise
    run.finish()
    print(f"exported attention for sample {args.sample} ({len(heads)} heads) to {out}")
    return EXIT_OK


def cmd_compare_masking(args) -> int:
    from .train import TrainConfig
    rc = load_run_config(args.config)
    data = _load_data(args.data)
    cfg = rc.model_config(data.topology, data.image_size)
    tcfg = TrainConfig.from_dict(rc.train)
    out = Path(args.out)
    run = ManifestWriter(out / "run.json", "compare-masking", args.config, out, tcfg.seed)
    try:
        rows = compare_masking(data, cfg, tcfg, out / "masking.csv", rc.model_seed)
    except BaseException as exc:
        run.finish(exc)
        raise
    run.finish()
    last = rows[-1]
    print(f"{len(rows)} epochs: final loss with mask {last['loss_full']:.4g}, without {last['loss_off']:.4g}; "
          f"curves in {out / 'masking.csv'}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastmetro", description="Desk-scale mesh-recovery transformer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--mesh", required=True, help="coarse mesh OBJ, or 'tetra' for the built-in reference")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--joints", type=int, default=None, help="joint count K (default 4 for tetra, else min(14, N))")
    p.add_argument("--image-size", type=int, nargs=2, default=(56, 56), metavar=("H", "W"))
    p.add_argument("--deformation", type=float, default=0.08, help="displacement amplitude / bbox diagonal")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True, help="JSON run config or variant name")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a metrics CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="per-component parameter counts")
    p.add_argument("--config", required=True, help="variant name (S/M/L) or JSON run config")
    p.add_argument("--out", default=None, help="directory for audit.json and the run manifest")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("bench", help="forward-pass latency, or a token-count sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--sweep", action="store_true", help="time one encoder layer over 64..512 tokens")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-attention", help="dump attention scores and the predicted mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head-set", choices=("all", "masked"), default="all")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("compare-masking", help="paired loss curves with the topology mask on and off")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_masking)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingError, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
