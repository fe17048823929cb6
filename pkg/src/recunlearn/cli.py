"""Command-line harness tying the pipeline together.

Subcommands: ingest, train, retrain, untrain, eval, audit, bench.  Every
command is a deterministic function of (config, seeds) in sequential mode;
each run writes a manifest recording the config snapshot, dataset checksum,
and content hashes of all emitted artifacts.  Failures exit nonzero with a
single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .als import load_model, save_model, train_als
from .audit import AUDIT_CSV_HEADER, audit_cell, format_audit_row
from .config import (
    ExperimentConfig,
    apply_env_overrides,
    parse_config,
    parse_float_list,
    parse_int_list,
    write_config,
)
from .data import (
    DataSplit,
    InteractionMatrix,
    RemovalSet,
    binarize,
    generate_synthetic,
    parse_movielens,
    sample_removal,
    split_holdout,
    write_id_map,
)
from .evaluation import CurvePoint, build_eval_set, evaluate_model, write_curve_csv
from .unlearn import (
    UnlearnRequest,
    compute_user_inverses,
    retrain_from_scratch,
    untrain_als,
    untrain_pass_downdate,
    untrain_trainer,
    write_diagnostics,
)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


class _Run:
    """Output directory plus the manifest accumulated while a command runs."""

    def __init__(self, command: str, cfg: ExperimentConfig, out: str):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.artifacts: dict[str, dict[str, str]] = {}
        self.wall_times: dict[str, float] = {}
        self.extra: dict[str, object] = {}
        self.dataset_checksum = ""

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def register(self, name: str, path: Path) -> None:
        self.artifacts[name] = {"path": str(path), "sha256": _sha256_file(path)}

    def finish(self) -> Path:
        manifest = {
            "tool": "recunlearn",
            "version": __version__,
            "command": self.command,
            "config": self.cfg.as_dict(),
            "dataset_checksum": self.dataset_checksum,
            "artifacts": self.artifacts,
            "wall_times_s": {k: round(v, 6) for k, v in self.wall_times.items()},
            **self.extra,
        }
        path = self.path("manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _load_interactions(cfg: ExperimentConfig):
    """Materialize the interaction matrix per the [data] section.

    Returns (matrix, checksum, id_maps) where id_maps is None for synthetic
    data.  The synthetic checksum hashes the generation parameters, which
    fully determine the instance.
    """
    d = cfg.data
    if d.format == "synthetic":
        inst = generate_synthetic(
            d.synth_users, d.synth_items, d.synth_rank, d.synth_density, seed=d.seed
        )
        checksum = _sha256_text(
            f"synthetic:{d.synth_users}:{d.synth_items}:{d.synth_rank}"
            f":{d.synth_density!r}:{d.seed}"
        )
        return inst.observed, checksum, None
    if not d.path:
        raise ValueError("no dataset path configured (set [data] path or --data)")
    records, user_ids, item_ids = parse_movielens(d.path, d.format)
    if d.threshold == "min":
        threshold = min(r.rating for r in records)
    else:
        threshold = float(d.threshold)
    matrix = binarize(records, threshold)
    return matrix, _sha256_file(d.path), (user_ids, item_ids)


def _load_split(cfg: ExperimentConfig):
    matrix, checksum, id_maps = _load_interactions(cfg)
    split = split_holdout(matrix, cfg.data.test_fraction, cfg.data.seed)
    return split, checksum, id_maps


def _removal_from(cfg: ExperimentConfig, train: InteractionMatrix) -> RemovalSet:
    r = cfg.removal
    if r.file:
        coords = []
        with open(r.file, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"removal file line {lineno}: expected 'u<TAB>i'")
                coords.append((int(parts[0]), int(parts[1])))
        fraction = len(coords) / max(train.n_observed, 1)
        return RemovalSet(coords=tuple(sorted(coords)), fraction=fraction, seed=r.seed)
    return sample_removal(train, r.fraction, r.seed)


def _write_coords(path: Path, coords) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in coords:
            fh.write(f"{u}\t{i}\n")


def _curve_recorder(split: DataSplit, cfg: ExperimentConfig, mode: str, fraction: float):
    eval_set = build_eval_set(
        split.train,
        split.test_positives,
        cfg.eval.seed,
        num_negatives=cfg.eval.negatives or None,
    )
    points: list[CurvePoint] = []
    t0 = time.perf_counter()

    def on_pass(pass_index: int, loss: float, trainer) -> None:
        points.append(
            CurvePoint(
                mode=mode,
                removal_fraction=fraction,
                passes=pass_index,
                seed=cfg.model.init_seed,
                auc=evaluate_model(trainer.snapshot(copy=False), eval_set),
                loss=loss,
                wall_time_s=time.perf_counter() - t0,
            )
        )

    return points, on_pass, eval_set


# -- commands -----------------------------------------------------------------


def cmd_ingest(cfg: ExperimentConfig, run: _Run, args) -> int:
    t0 = time.perf_counter()
    split, checksum, id_maps = _load_split(cfg)
    run.dataset_checksum = checksum
    run.wall_times["ingest"] = time.perf_counter() - t0

    train_path = run.path("train.tsv")
    _write_coords(train_path, zip(*split.train.coord_arrays()))
    run.register("train_coords", train_path)
    test_path = run.path("test.tsv")
    _write_coords(test_path, split.test_positives)
    run.register("test_coords", test_path)
    if id_maps is not None:
        user_map, item_map = run.path("user_map.tsv"), run.path("item_map.tsv")
        write_id_map(user_map, id_maps[0])
        write_id_map(item_map, id_maps[1])
        run.register("user_map", user_map)
        run.register("item_map", item_map)
    run.extra["shape"] = {
        "num_users": split.train.num_users,
        "num_items": split.train.num_items,
        "train_observed": split.train.n_observed,
        "test_positives": len(split.test_positives),
    }
    run.finish()
    return 0


def _train_like(cfg: ExperimentConfig, run: _Run, args, mode: str) -> int:
    t0 = time.perf_counter()
    split, checksum, _ = _load_split(cfg)
    run.dataset_checksum = checksum
    hp = cfg.hyperparams()

    if mode == "retrain":
        removal = _removal_from(cfg, split.train)
        fraction = removal.fraction
    else:
        removal = None
        fraction = 0.0

    points, on_pass, _ = _curve_recorder(split, cfg, mode, fraction)
    if mode == "retrain":
        model = retrain_from_scratch(
            split.train, removal, hp, cfg.model.init_seed, n_jobs=args.jobs, on_pass=on_pass
        )
    else:
        model = train_als(
            split.train, hp, cfg.model.init_seed, n_jobs=args.jobs, on_pass=on_pass
        )
    run.wall_times[mode] = time.perf_counter() - t0

    model_path = run.path("model.bin")
    save_model(model, model_path)
    run.register("model", model_path)
    curve_path = run.path(f"{mode}_curve.csv")
    write_curve_csv(points, curve_path)
    run.register("curve", curve_path)
    if removal is not None:
        removal_path = run.path("removal.tsv")
        _write_coords(removal_path, removal.coords)
        run.register("removal", removal_path)
    run.extra["passes_run"] = model.passes_run
    run.finish()
    return 0


def cmd_train(cfg, run, args) -> int:
    return _train_like(cfg, run, args, "train")


def cmd_retrain(cfg, run, args) -> int:
    return _train_like(cfg, run, args, "retrain")


def cmd_untrain(cfg: ExperimentConfig, run: _Run, args) -> int:
    if not args.model:
        raise ValueError("untrain requires --model pointing at a trained container")
    base = load_model(args.model)
    t0 = time.perf_counter()
    split, checksum, _ = _load_split(cfg)
    run.dataset_checksum = checksum
    removal = _removal_from(cfg, split.train)

    req = UnlearnRequest(
        base,
        split.train,
        removal,
        untrain_passes=cfg.untrain.passes,
        solver=cfg.untrain.solver,
        cg_iters=cfg.model.cg_iters,
        tolerance=cfg.untrain.tolerance,
        confidence_scheme=cfg.model.confidence,
        low_value=cfg.model.low_value,
        n_jobs=args.jobs,
    )
    diags = []
    model = untrain_als(req, diagnostics=diags)
    run.wall_times["untrain"] = time.perf_counter() - t0

    model_path = run.path("model_untrained.bin")
    save_model(model, model_path)
    run.register("model", model_path)
    diag_path = run.path("untrain_diagnostics.jsonl")
    write_diagnostics(diags, diag_path)
    run.register("diagnostics", diag_path)
    removal_path = run.path("removal.tsv")
    _write_coords(removal_path, removal.coords)
    run.register("removal", removal_path)
    run.extra["passes_run"] = model.passes_run
    run.finish()
    return 0


def cmd_eval(cfg: ExperimentConfig, run: _Run, args) -> int:
    if not args.model:
        raise ValueError("eval requires --model pointing at a trained container")
    model = load_model(args.model)
    split, checksum, _ = _load_split(cfg)
    run.dataset_checksum = checksum
    eval_set = build_eval_set(
        split.train,
        split.test_positives,
        cfg.eval.seed,
        num_negatives=cfg.eval.negatives or None,
    )
    t0 = time.perf_counter()
    auc = evaluate_model(model, eval_set)
    run.wall_times["eval"] = time.perf_counter() - t0

    point = CurvePoint(
        mode="eval",
        removal_fraction=0.0,
        passes=model.passes_run,
        seed=cfg.eval.seed,
        auc=auc,
        loss=float("nan"),
        wall_time_s=run.wall_times["eval"],
    )
    eval_path = run.path("eval.csv")
    write_curve_csv([point], eval_path)
    run.register("eval", eval_path)
    run.finish()
    print(f"auc={auc:.6f}")
    return 0


def _read_completed_cells(path: Path) -> set[tuple]:
    done = set()
    if not path.exists():
        return done
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != AUDIT_CSV_HEADER:
            raise ValueError(f"existing {path} is not an audit report")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 9:
                continue
            done.add((parts[0], parts[1], parts[2], parts[3]))
    return done


def cmd_audit(cfg: ExperimentConfig, run: _Run, args) -> int:
    t0 = time.perf_counter()
    split, checksum, _ = _load_split(cfg)
    run.dataset_checksum = checksum

    fractions = parse_float_list(cfg.audit.fractions)
    train_grid = parse_int_list(cfg.audit.train_passes)
    untrain_grid = parse_int_list(cfg.audit.untrain_passes)
    seeds = parse_int_list(cfg.audit.seeds)
    hp = cfg.hyperparams()

    csv_path = run.path("audit.csv")
    done = _read_completed_cells(csv_path)
    fresh = not csv_path.exists()
    failures = []
    completed = 0
    with open(csv_path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(AUDIT_CSV_HEADER + "\n")
            fh.flush()
        for fraction in fractions:
            for tp in train_grid:
                for up in untrain_grid:
                    for seed in seeds:
                        key = (f"{fraction:.10g}", str(tp), str(up), str(seed))
                        if key in done:
                            continue
                        try:
                            rec = audit_cell(
                                split,
                                fraction,
                                tp,
                                up,
                                seed,
                                hp,
                                mi_split_seed=cfg.audit.mi_split_seed,
                                retrain_passes=cfg.audit.retrain_passes,
                                n_jobs=args.jobs,
                            )
                        except Exception as exc:  # cell marked, run continues
                            failures.append({"cell": list(key), "error": str(exc)})
                            print(
                                f"error: audit cell {key} failed: {exc}", file=sys.stderr
                            )
                            continue
                        fh.write(format_audit_row(rec) + "\n")
                        fh.flush()
                        completed += 1
    run.wall_times["audit"] = time.perf_counter() - t0
    run.register("audit", csv_path)
    run.extra["cells_completed"] = completed
    run.extra["cells_skipped"] = len(done)
    run.extra["cell_failures"] = failures
    run.finish()
    return 0 if not failures else 1


def cmd_bench(cfg: ExperimentConfig, run: _Run, args) -> int:
    split, checksum, _ = _load_split(cfg)
    run.dataset_checksum = checksum
    train = split.train

    if cfg.bench.removal_fraction > 0:
        removal = sample_removal(train, cfg.bench.removal_fraction, cfg.removal.seed)
    else:
        # single deletion: one seed-determined observed coordinate
        rng = np.random.default_rng(cfg.removal.seed)
        u_arr, i_arr = train.coord_arrays()
        j = int(rng.integers(train.n_observed))
        removal = RemovalSet(
            coords=((int(u_arr[j]), int(i_arr[j])),),
            fraction=1.0 / train.n_observed,
            seed=cfg.removal.seed,
        )

    rows = []
    for k in parse_int_list(cfg.bench.k_grid):
        hp = dataclasses.replace(
            cfg.hyperparams(), k=k, max_passes=cfg.bench.base_passes, tolerance=0.0
        )
        base = train_als(train, hp, cfg.model.init_seed, n_jobs=args.jobs)

        t0 = time.perf_counter()
        inverses = compute_user_inverses(train, base.Y, hp.policy(), hp.lam)
        run.wall_times[f"inverse_cache_k{k}"] = time.perf_counter() - t0

        req = UnlearnRequest(
            base,
            train,
            removal,
            untrain_passes=1,
            tolerance=0.0,
            confidence_scheme=cfg.model.confidence,
            low_value=cfg.model.low_value,
            n_jobs=args.jobs,
        )
        t0 = time.perf_counter()
        trainer = untrain_trainer(req)
        trainer.run_pass()
        direct_s = time.perf_counter() - t0
        rows.append((k, "direct", direct_s, 0))

        diags = []
        t0 = time.perf_counter()
        untrain_pass_downdate(
            dataclasses.replace(req, solver="downdate", user_inverses=inverses),
            diagnostics=diags,
        )
        downdate_s = time.perf_counter() - t0
        rows.append((k, "downdate", downdate_s, diags[0].downdate_fallbacks))

    bench_path = run.path("bench.csv")
    with open(bench_path, "w", encoding="utf-8") as fh:
        fh.write("k,solver,pass_wall_time_s,downdate_fallbacks\n")
        for k, solver, secs, falls in rows:
            fh.write(f"{k},{solver},{secs:.6f},{falls}\n")
    run.register("bench", bench_path)
    run.finish()
    return 0


# -- argument parsing ---------------------------------------------------------

_COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "retrain": cmd_retrain,
    "untrain": cmd_untrain,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI grammar)")
    common.add_argument("--seed", type=int, help="master seed routed into every named seed")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument(
        "--sequential",
        action="store_true",
        help="force single-threaded row solves (bit-reproducible mode)",
    )
    common.add_argument("--jobs", type=int, default=1, help="row-solve threads")
    common.add_argument(
        "--format",
        choices=["tab100k", "colon1m", "synthetic"],
        help="override the dataset format",
    )
    common.add_argument("--data", help="override the dataset path")
    common.add_argument("--model", help="model container path (untrain, eval)")
    common.add_argument(
        "--removal-fraction", type=float, help="override the removal fraction"
    )
    common.add_argument("--removal-file", help="explicit removal coordinate file (u<TAB>i)")
    common.add_argument("--removal-seed", type=int, help="override the removal seed")
    common.add_argument("--passes", type=int, help="override pass budget (train/untrain)")

    parser = argparse.ArgumentParser(
        prog="recunlearn",
        description="Implicit-feedback ALS training, exact unlearning, and privacy audits",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    apply_env_overrides(cfg)
    # flags override both the file and the environment
    if args.seed is not None:
        cfg.apply_master_seed(args.seed)
    if args.format:
        cfg.data.format = args.format
    if args.data:
        cfg.data.path = args.data
    if args.removal_fraction is not None:
        cfg.removal.fraction = args.removal_fraction
    if args.removal_file:
        cfg.removal.file = args.removal_file
    if args.removal_seed is not None:
        cfg.removal.seed = args.removal_seed
    if args.passes is not None:
        cfg.model.max_passes = args.passes
        cfg.untrain.passes = args.passes
    if args.sequential:
        args.jobs = 1
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        run = _Run(args.command, cfg, args.out)
        code = _COMMANDS[args.command](cfg, run, args)
        # persist the effective config next to the artifacts
        if run.out.exists():
            write_config(cfg, run.out / "config.ini")
        return code
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
