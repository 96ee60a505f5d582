"""Command-line front end: reproducible experiments in content-addressed run directories.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure,
3 verification decided "not owned".
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Iterator

import numpy as np

from . import __version__, metrics
from .codec import compress_image, forge_watermark_split
from .config import ConfigError, RunConfig, parse_overrides
from .data import (Dataset, derive_seed, import_image_folder, make_rng, sample_rand,
                   save_image_folder, synth_dataset)
from .robustness import (AttackOutcome, default_evasion_specs, distill_extract, evasion_sweep,
                         false_trigger_audit, finetune_last_layer, prune, quantize_weights,
                         write_outcomes)
from .train import Checkpoint, export_features, train, write_log
from .verify import HttpOracle, verify_ownership

log = logging.getLogger("freqmark")

EXIT_OK, EXIT_INVALID, EXIT_FAILURE, EXIT_NOT_OWNED = 0, 1, 2, 3
MANIFEST = "manifest.json"
CHECKPOINT_FILE = "model.ckpt"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run directories


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def versions() -> dict:
    import PIL
    import scipy
    return {"freqmark": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pillow": PIL.__version__, "python": platform.python_version()}


class Run:
    """A run directory being built in a private temp dir, published atomically."""

    def __init__(self, final: Path, tmp: Path):
        self.final, self.path = final, tmp
        self.manifest: dict = {}


@contextmanager
def run_dir(cfg: RunConfig, command: str, inputs: dict[str, Path], extra: dict | None = None
            ) -> Iterator[Run | None]:
    """Yield a fresh :class:`Run`, or ``None`` when an identical run already exists.

    The directory name hashes the effective config, the command, the input
    run ids and ``extra``; existing runs are never touched.
    """
    input_ids = {name: _run_id(p) for name, p in sorted(inputs.items())}
    extra = extra or {}
    run_id = cfg.digest(command, json.dumps(input_ids, sort_keys=True),
                        json.dumps(extra, sort_keys=True, default=str))
    root = Path(cfg["output.root"])
    final = root / f"{command.replace(' ', '-')}-{run_id[:16]}"
    if (final / MANIFEST).exists():
        log.info("up to date: %s", final)
        print(final)
        yield None
        return
    root.mkdir(parents=True, exist_ok=True)
    tmp = root / f".tmp-{final.name}-{os.getpid()}"
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir()
    run = Run(final, tmp)
    try:
        yield run
        outputs = {str(p.relative_to(tmp)): _sha256(p) for p in sorted(tmp.rglob("*")) if p.is_file()}
        manifest = {
            "command": command, "run_id": run_id, "config": cfg.to_text().splitlines(),
            "seeds": {k: v for k, v in cfg.values.items() if k.endswith(".seed")},
            "inputs": {n: {"path": str(inputs[n]), "run_id": i} for n, i in input_ids.items()},
            "extra": extra, "versions": versions(), "outputs": outputs, **run.manifest,
        }
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        if final.exists():  # a concurrent identical run won; keep theirs
            shutil.rmtree(tmp)
        else:
            os.replace(tmp, final)
        print(final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _run_id(path: Path) -> str:
    path = Path(path)
    m = path / MANIFEST if path.is_dir() else path.parent / MANIFEST
    if m.exists():
        rid = json.loads(m.read_text())["run_id"]
        return rid if path.is_dir() else f"{rid}:{path.name}:{_sha256(path)[:16]}"
    if path.is_file():
        return _sha256(path)
    raise UsageError(f"{path} is neither a run directory nor a file")


def _manifest(path: Path) -> dict:
    m = Path(path) / MANIFEST
    if not m.exists():
        raise UsageError(f"{path} is not a run directory (no {MANIFEST})")
    return json.loads(m.read_text())


# ---------------------------------------------------------------------------
# dataset folders carry their class count next to the PNG manifest


def save_dataset(ds: Dataset, root: Path) -> None:
    save_image_folder(ds, root)
    meta = {"num_classes": ds.num_classes, "class_names": list(ds.class_names or []),
            "provenance": ds.provenance, "count": len(ds)}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(root: Path, side: int) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    if meta["count"] == 0:
        return Dataset(np.zeros((0, side, side, 3), np.uint8), np.zeros(0, np.int64),
                       meta["num_classes"], meta["provenance"])
    ds = import_image_folder(root, side=side)
    return ds.replace(num_classes=meta["num_classes"], provenance=meta["provenance"],
                      class_names=tuple(meta["class_names"]) or None)


def _data_run(args, cfg) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    if getattr(args, "forge", None):
        return Path(_manifest(Path(args.forge))["inputs"]["data"]["path"])
    raise UsageError("need --data (or --forge pointing at a forge run)")


def _load_split(run: Path, name: str, cfg: RunConfig) -> Dataset:
    return load_dataset(Path(run) / name, cfg["data.side"])


def _checkpoint_path(path: str) -> Path:
    p = Path(path)
    return p / CHECKPOINT_FILE if p.is_dir() else p


def _load_checkpoint(path: str) -> Checkpoint:
    return Checkpoint.load(_checkpoint_path(path))


# ---------------------------------------------------------------------------
# commands


def cmd_dataset(args, cfg: RunConfig) -> int:
    side = cfg["data.side"]
    if args.source == "synth":
        classes, seed = cfg["data.classes"], cfg["data.seed"]
        parts = {}
        for i, (name, per) in enumerate((("train", cfg["data.per_class"]),
                                          ("test", cfg["data.test_per_class"]),
                                          ("holdout", cfg["data.holdout_per_class"]))):
            ds = synth_dataset(classes, per, side, derive_seed(seed, i), cfg["data.noise_sigma"])
            parts[name] = ds.replace(ids=ds.ids + i * 1_000_000)
        inputs = {}
    else:
        root = Path(args.root or cfg["data.root"])
        if not str(root) or not root.exists():
            raise UsageError("dataset import needs --root (or data.root) pointing at an image folder")
        full = import_image_folder(root, side=side)
        perm = make_rng(derive_seed(cfg["data.seed"], 7)).permutation(len(full))
        n_test = int(round(cfg["data.test_fraction"] * len(full)))
        n_hold = int(round(cfg["data.holdout_fraction"] * len(full)))
        parts = {"test": full.take(np.sort(perm[:n_test])),
                 "holdout": full.take(np.sort(perm[n_test:n_test + n_hold])),
                 "train": full.take(np.sort(perm[n_test + n_hold:]))}
        inputs = {"images": root / "manifest.tsv"} if (root / "manifest.tsv").exists() else {}
        if cfg["watermark.target"] >= full.num_classes:
            raise ConfigError([f"watermark.target = {cfg['watermark.target']}: dataset has "
                               f"{full.num_classes} classes"])
    with run_dir(cfg, f"dataset-{args.source}", inputs, {"root": str(getattr(args, "root", ""))}) as run:
        if run is None:
            return EXIT_OK
        for name, ds in parts.items():
            save_dataset(ds, run.path / name)
        run.manifest["counts"] = {k: len(v) for k, v in parts.items()}
    return EXIT_OK


def cmd_forge(args, cfg: RunConfig) -> int:
    data = Path(args.data)
    train_ds = _load_split(data, "train", cfg)
    holdout = _load_split(data, "holdout", cfg)
    if cfg["watermark.target"] >= train_ds.num_classes:
        raise ConfigError([f"watermark.target must be < {train_ds.num_classes}"])
    dp, dw, dv = forge_watermark_split(train_ds, cfg["watermark.rate"], cfg["watermark.quality"],
                                       cfg["watermark.target"], cfg["watermark.seed"], holdout,
                                       cfg["watermark.verify_size"])
    with run_dir(cfg, "forge", {"data": data}) as run:
        if run is None:
            return EXIT_OK
        for name, ds in (("primary", dp), ("watermark", dw), ("verify", dv)):
            save_dataset(ds, run.path / name)
        run.manifest["recipe"] = {"factor": cfg["watermark.quality"], "target": cfg["watermark.target"],
                                  "rate": cfg["watermark.rate"], "seed": cfg["watermark.seed"]}
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    tc = cfg.train_config()
    registry = cfg.registry() if tc.p > 0 else None
    extra = {"control": bool(args.control), "registry": list(registry.kinds) if registry else []}
    forge_run = Path(args.forge)
    data = _data_run(args, cfg)
    test = _load_split(data, "test", cfg)
    dv = _load_split(forge_run, "verify", cfg)
    if args.control:
        primary, watermark = _load_split(data, "train", cfg), None
    else:
        primary, watermark = _load_split(forge_run, "primary", cfg), _load_split(forge_run, "watermark", cfg)
    with run_dir(cfg, "train", {"forge": forge_run, "data": data}, extra) as run:
        if run is None:
            return EXIT_OK
        ck, history = train(tc, primary, watermark, registry, test, dv, progress=args.verbose)
        ck.save(run.path / CHECKPOINT_FILE)
        write_log(history, run.path / "log.csv")
        last = history[-1] if history else {}
        run.manifest["final"] = {"acc": last.get("acc"), "wsr": last.get("wsr")}
    return EXIT_OK


def _evaluation_rows(ck, test: Dataset, dv: Dataset, target: int) -> dict:
    return {"acc": metrics.accuracy(ck, test), "wsr": metrics.wsr(ck, dv, target)}


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ck = _load_checkpoint(args.checkpoint)
    forge_run, data = Path(args.forge), _data_run(args, cfg)
    target = cfg["watermark.target"]
    test, dv = _load_split(data, "test", cfg), _load_split(forge_run, "verify", cfg)
    dw, train_ds = _load_split(forge_run, "watermark", cfg), _load_split(data, "train", cfg)
    originals = train_ds.take(np.searchsorted(train_ds.ids, dw.ids))
    cov = metrics.covertness(originals.images, dw.images)
    row = {"model": _checkpoint_path(args.checkpoint).parent.name, **_evaluation_rows(ck, test, dv, target),
           "psnr": cov.psnr, "ssim": cov.ssim, "lpips": cov.lpips}
    with run_dir(cfg, "evaluate", {"checkpoint": _checkpoint_path(args.checkpoint), "forge": forge_run,
                                 "data": data},
                 {"features": bool(args.features)}) as run:
        if run is None:
            return EXIT_OK
        metrics.write_csv([row], run.path / "metrics.csv")
        (run.path / "metrics.md").write_text(
            metrics.markdown_table([row], ["model", "acc", "wsr"], ["Model", "Acc (%)", "WSR (%)"],
                                   percent=("acc", "wsr")) + "\n\n" +
            metrics.markdown_table([row], ["psnr", "ssim", "lpips"], ["PSNR", "SSIM", "LPIPS"]) + "\n")
        if args.features:
            export_features(ck, dv, run.path / "features_verify.csv")
            export_features(ck, test, run.path / "features_test.csv")
        print(json.dumps(row, default=str))
    return EXIT_OK


def cmd_attack(args, cfg: RunConfig) -> int:
    ck = _load_checkpoint(args.checkpoint)
    forge_run, data = Path(args.forge), _data_run(args, cfg)
    test, dv = _load_split(data, "test", cfg), _load_split(forge_run, "verify", cfg)
    with run_dir(cfg, "attack", {"checkpoint": _checkpoint_path(args.checkpoint), "forge": forge_run,
                                "data": data}) as run:
        if run is None:
            return EXIT_OK
        outcomes = evasion_sweep(ck, dv, cfg["watermark.target"], default_evasion_specs(), test,
                                 seed=cfg["robust.seed"], workers=args.workers)
        write_outcomes(outcomes, run.path / "evasion.csv")
        _outcome_markdown(outcomes, run.path / "evasion.md")
    return EXIT_OK


def _outcome_markdown(outcomes: list[AttackOutcome], path: Path) -> None:
    rows = [{"attack": o.attack, "param": o.params, "acc": o.acc_after, "wsr": o.wsr_after,
             "status": o.status} for o in outcomes]
    path.write_text(metrics.markdown_table(rows, ["attack", "param", "acc", "wsr", "status"],
                                           ["Attack", "Setting", "Acc (%)", "WSR (%)", "Status"],
                                           percent=("acc", "wsr")) + "\n")


def cmd_remove(args, cfg: RunConfig) -> int:
    ck = _load_checkpoint(args.checkpoint)
    forge_run, data = Path(args.forge), _data_run(args, cfg)
    target = cfg["watermark.target"]
    test, dv = _load_split(data, "test", cfg), _load_split(forge_run, "verify", cfg)
    base = _evaluation_rows(ck, test, dv, target)
    extra = {"method": args.method, "mode": getattr(args, "mode", None), "url": getattr(args, "url", None)}
    with run_dir(cfg, f"remove-{args.method}", {"checkpoint": _checkpoint_path(args.checkpoint),
                                                "forge": forge_run, "data": data}, extra) as run:
        if run is None:
            return EXIT_OK
        outcomes = []

        def record(name, param, model):
            after = _evaluation_rows(model, test, dv, target)
            outcomes.append(AttackOutcome(name, param, base["acc"], after["acc"], base["wsr"], after["wsr"]))
            model.save(run.path / f"{name}-{param}.ckpt".replace("=", "_"))

        if args.method == "prune":
            for rate in cfg.floats("robust.prune_rates"):
                record("prune", f"rate={rate:g}", prune(ck, rate))
        elif args.method == "quantize":
            for bits in cfg.floats("robust.quant_bits", int):
                record("quantize", f"bits={bits}", quantize_weights(ck, bits))
        elif args.method == "finetune":
            train_ds = _load_split(data, "train", cfg)
            n = int(round(cfg["robust.finetune_fraction"] * len(train_ds)))
            subset, _ = sample_rand(train_ds, n, make_rng(derive_seed(cfg["robust.seed"], 0xF7)))
            epochs = cfg["robust.finetune_epochs"]
            record("finetune", f"epochs={epochs}", finetune_last_layer(ck, subset, epochs, cfg["robust.seed"]))
        elif args.method == "extract":
            query = _load_split(data, "train", cfg)
            modes = ("soft", "hard") if args.mode == "both" else (args.mode,)
            victim = HttpOracle(args.url) if args.url else ck
            for mode in modes:
                sur = distill_extract(victim, query, mode, cfg["robust.extract_epochs"], cfg["robust.seed"],
                                      num_classes=ck.num_classes)
                record("extract", f"mode={mode}", sur)
        write_outcomes(outcomes, run.path / "removal.csv")
        _outcome_markdown(outcomes, run.path / "removal.md")
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    if bool(args.checkpoint) == bool(args.url):
        raise UsageError("verify needs exactly one of --checkpoint or --url")
    oracle = _load_checkpoint(args.checkpoint) if args.checkpoint else HttpOracle(args.url)
    forge_run = Path(args.forge)
    dv = _load_split(forge_run, "verify", cfg)
    null_rate = float(cfg["verify.null_rate"]) if cfg["verify.null_rate"] else None
    tau = float(cfg["verify.tau"]) if cfg["verify.tau"] else None
    inputs = {"forge": forge_run}
    if args.checkpoint:
        inputs["checkpoint"] = _checkpoint_path(args.checkpoint)
    report = verify_ownership(oracle, dv, cfg["watermark.target"], tau, cfg["verify.alpha"], null_rate,
                              cfg["verify.parallelism"], cfg["verify.min_interval"])
    with run_dir(cfg, "verify", inputs, {"url": args.url or ""}) as run:
        if run is not None:
            (run.path / "report.json").write_text(report.to_json() + "\n")
            (run.path / "report.md").write_text(report.to_markdown() + "\n")
            run.manifest["decision"] = report.decision
    print(report.to_json())
    if report.decision == "withheld":
        return EXIT_FAILURE
    return EXIT_OK if report.owned else EXIT_NOT_OWNED


def cmd_falsetrigger(args, cfg: RunConfig) -> int:
    ck = _load_checkpoint(args.checkpoint)
    data = _data_run(args, cfg)
    pool = _load_split(data, "test", cfg)  # disjoint from training data
    with run_dir(cfg, "falsetrigger", {"checkpoint": _checkpoint_path(args.checkpoint), "data": data}) as run:
        if run is None:
            return EXIT_OK
        rows = false_trigger_audit(ck, pool, cfg["watermark.target"], cfg["watermark.quality"],
                                   cfg["robust.seed"])
        metrics.write_csv(rows, run.path / "falsetrigger.csv", ["forgery", "params", "wsr", "status"])
        (run.path / "falsetrigger.md").write_text(metrics.markdown_table(
            rows, ["forgery", "wsr", "status"], ["Forgery", "WSR (%)", "Status"], percent=("wsr",)) + "\n")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    data = Path(args.data)
    train_ds, holdout = _load_split(data, "train", cfg), _load_split(data, "holdout", cfg)
    test = _load_split(data, "test", cfg)
    tc = cfg.train_config()
    registry = cfg.registry() if tc.p > 0 else None
    key = "ablate.rates" if args.axis == "rate" else "ablate.factors"
    values = cfg.floats(key, float if args.axis == "rate" else int)
    extra = {"axis": args.axis, "registry": list(registry.kinds) if registry else []}
    with run_dir(cfg, f"ablate-{args.axis}", {"data": data}, extra) as run:
        if run is None:
            return EXIT_OK
        rows = []
        for v in values:
            rate = v if args.axis == "rate" else cfg["watermark.rate"]
            factor = v if args.axis == "factor" else cfg["watermark.quality"]
            dp, dw, dv = forge_watermark_split(train_ds, rate, factor, cfg["watermark.target"],
                                               cfg["watermark.seed"], holdout, cfg["watermark.verify_size"])
            run_cfg = tc.__class__(**{**asdict(tc), "wm_rate": rate, "quality": factor})
            ck, _ = train(run_cfg, dp, dw, registry, progress=args.verbose)
            cov = metrics.covertness(train_ds.take(np.searchsorted(train_ds.ids, dw.ids)).images, dw.images)
            rows.append({args.axis: v, "acc": metrics.accuracy(ck, test),
                         "wsr": metrics.wsr(ck, dv, cfg["watermark.target"]), "psnr": cov.psnr,
                         "ssim": cov.ssim})
        metrics.write_csv(rows, run.path / "ablate.csv")
        (run.path / "ablate.md").write_text(metrics.markdown_table(
            rows, [args.axis, "acc", "wsr", "psnr", "ssim"], percent=("acc", "wsr")) + "\n")
    return EXIT_OK


# file name -> (columns, headers, percent columns) for `report`
REPORT_TABLES = {
    "metrics.csv": (["model", "acc", "wsr", "psnr", "ssim", "lpips"],
                    ["Model", "Acc (%)", "WSR (%)", "PSNR", "SSIM", "LPIPS"], ("acc", "wsr")),
    "removal.csv": (["attack", "param", "acc", "wsr"], ["Removal", "Setting", "Acc (%)", "WSR (%)"],
                    ("acc", "wsr")),
    "evasion.csv": (["attack", "param", "acc", "wsr", "status"],
                    ["Attack", "Setting", "Acc (%)", "WSR (%)", "Status"], ("acc", "wsr")),
    "falsetrigger.csv": (["forgery", "params", "wsr", "status"], ["Forgery", "Setting", "WSR (%)", "Status"],
                         ("wsr",)),
    "log.csv": (["epoch", "L", "L_pri", "L_wm", "L_attk", "L_sim", "acc", "wsr", "lr"], None, ("acc", "wsr")),
}


def render_report(runs: list[Path]) -> str:
    parts = []
    for run in runs:
        run = Path(run)
        for name in sorted(p.name for p in run.glob("*.csv")):
            rows = metrics.read_csv(run / name)
            if name in REPORT_TABLES:
                cols, headers, pct = REPORT_TABLES[name]
            else:
                cols = list(rows[0].keys()) if rows else []
                headers, pct = None, tuple(c for c in cols if c in ("acc", "wsr"))
            parts.append(f"### {run.name}/{name}\n\n" + metrics.markdown_table(rows, cols, headers, pct))
    return "\n\n".join(parts) + "\n"


def cmd_report(args, cfg: RunConfig) -> int:
    runs = [Path(r) for r in args.runs]
    for r in runs:
        _manifest(r)
    text = render_report(runs)
    with run_dir(cfg, "report", {f"run{i}": r for i, r in enumerate(runs)}) as run:
        if run is not None:
            (run.path / "report.md").write_text(text)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (key = value lines)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--out", help="output root (overrides output.root)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="freqmark", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="create a dataset run")
    dsub = ds.add_subparsers(dest="source", required=True)
    dsub.add_parser("synth", parents=[common], help="procedural glyph dataset")
    imp = dsub.add_parser("import", parents=[common], help="PNG image folder")
    imp.add_argument("--root", help="folder with class subdirectories or manifest.tsv")

    f = sub.add_parser("forge", parents=[common], help="split and forge D_p / D_w / D_v")
    f.add_argument("--data", required=True)

    t = sub.add_parser("train", parents=[common], help="train a watermarked (or control) model")
    t.add_argument("--forge", required=True)
    t.add_argument("--data")
    t.add_argument("--control", action="store_true", help="clean model on the full training set")

    for name, helptext in (("evaluate", "accuracy, WSR and covertness"), ("attack", "evasion sweep")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--forge", required=True)
        e.add_argument("--data")
        if name == "evaluate":
            e.add_argument("--features", action="store_true", help="also export penultimate features")
        else:
            e.add_argument("--workers", type=int, default=1)

    r = sub.add_parser("remove", help="removal and extraction attacks")
    rsub = r.add_subparsers(dest="method", required=True)
    for m in ("prune", "quantize", "finetune", "extract"):
        rp = rsub.add_parser(m, parents=[common])
        rp.add_argument("--checkpoint", required=True)
        rp.add_argument("--forge", required=True)
        rp.add_argument("--data")
        if m == "extract":
            rp.add_argument("--mode", choices=("soft", "hard", "both"), default="both")
            rp.add_argument("--url", help="hard-label HTTP victim instead of the checkpoint")

    v = sub.add_parser("verify", parents=[common], help="ownership decision (exit 3 when not owned)")
    v.add_argument("--checkpoint")
    v.add_argument("--url", help="HTTP oracle: POST PNG, response is the class index")
    v.add_argument("--forge", required=True)

    ft = sub.add_parser("falsetrigger", parents=[common], help="false-trigger audit")
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--data")
    ft.add_argument("--forge")

    ab = sub.add_parser("ablate", help="sweep watermark rate or quality factor")
    asub = ab.add_subparsers(dest="axis", required=True)
    for axis in ("rate", "factor"):
        ap = asub.add_parser(axis, parents=[common])
        ap.add_argument("--data", required=True)

    rep = sub.add_parser("report", parents=[common], help="render run CSVs as markdown tables")
    rep.add_argument("runs", nargs="+")
    return p


COMMANDS = {"dataset": cmd_dataset, "forge": cmd_forge, "train": cmd_train, "evaluate": cmd_evaluate,
            "attack": cmd_attack, "remove": cmd_remove, "verify": cmd_verify,
            "falsetrigger": cmd_falsetrigger, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.set)
        if args.out:
            overrides["output.root"] = args.out
        cfg = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure: report and exit 2
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
