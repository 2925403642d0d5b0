"""Command-line entry point.

Every command works inside one run directory.  Each stage writes its outputs
into its own sub-directory together with ``manifest.json`` recording the
hash of the config sections it depends on, the hashes of its inputs and the
hashes of its outputs.  With ``--resume`` a stage whose manifest still
matches is loaded instead of recomputed.

Exit status: 0 success, 1 usage or configuration error, 2 stage failure.
Errors are also written to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import experiment as ex
from .corpus import read_corpus, write_corpus
from .evaluation import BenchmarkResult
from .mining import ScoreTable, load_subcategories, save_subcategories
from .model import load_checkpoint, param_count, save_checkpoint
from .selection import CategoryBank
from .training import RegimeKind

log = logging.getLogger("hardcycle")

MANIFEST = "manifest.json"
CONFIG = "config.json"
LOCK = ".lock"
REGIMES = [k.value for k in RegimeKind]


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


class Run:
    """A run directory plus the effective configuration."""

    def __init__(self, root, cfg: ex.RunConfig, resume=False):
        self.root = Path(root)
        self.cfg = cfg
        self.resume = resume

    def dir(self, stage) -> Path:
        return self.root / stage

    def manifest(self, stage):
        path = self.dir(stage) / MANIFEST
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text())
        except ValueError:
            return None

    def fingerprint(self, stage) -> str:
        m = self.manifest(stage)
        if m is None:
            raise StageError(stage, f"stage {stage!r} has not been run in {self.root}")
        return _digest(m["outputs"])

    def _valid(self, stage, key) -> bool:
        m = self.manifest(stage)
        if m is None or m.get("key") != key:
            return False
        d = self.dir(stage)
        return all((d / f).exists() and sha256_file(d / f) == h for f, h in m["outputs"].items())

    def stage(self, stage, sections, inputs, compute):
        """Run ``compute(directory)`` unless ``--resume`` finds a matching manifest.

        ``compute`` returns the list of file names it wrote.
        """
        key = {"config": self.cfg.section_hash(*sections),
               "inputs": {name: self.fingerprint(name) for name in inputs}}
        if self.resume and self._valid(stage, key):
            log.info("stage %s: up to date, skipped", stage)
            return False
        d = self.dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        (d / MANIFEST).unlink(missing_ok=True)
        log.info("stage %s: running", stage)
        try:
            files = compute(d)
        except (StageError, UsageError):
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        _write_json(d / MANIFEST, {"stage": stage, "key": key, "sections": list(sections),
                                   "outputs": {f: sha256_file(d / f) for f in sorted(files)}})
        return True

    # --- loaders --------------------------------------------------------------------

    def _load(self, stage, fn):
        if self.manifest(stage) is None:
            raise StageError(stage, f"stage {stage!r} has not been run in {self.root}")
        try:
            return fn(self.dir(stage))
        except Exception as exc:
            raise StageError(stage, f"cannot load outputs: {exc}") from exc

    def corpus(self):
        return self._load("corpus", lambda d: read_corpus(self.cfg.corpus.path or d))

    def checkpoint(self, stage):
        return self._load(stage, lambda d: load_checkpoint(d / "checkpoint.json"))

    def subcats(self):
        return self._load("mine", lambda d: load_subcategories(d / "subcategories.json"))

    def bank(self):
        return self._load("select", lambda d: CategoryBank.load(d / "bank.json"))


# --- stages ------------------------------------------------------------------------

def stage_corpus(run: Run):
    c = run.cfg.corpus

    def compute(d):
        if c.path:
            src = Path(c.path)
            if not src.is_dir():
                raise StageError("corpus", f"corpus directory {src} does not exist")
            listing = {p.name: sha256_file(p) for p in sorted(src.iterdir()) if p.is_file()}
            _write_json(d / "source.json", {"path": str(src), "files": listing})
            return ["source.json"]
        corpus = ex.build_corpus(run.cfg)
        write_corpus(corpus, d, meta={"generator": dataclasses.asdict(c)})
        return [p.name for p in d.iterdir() if p.name != MANIFEST]

    return run.stage("corpus", ["corpus"], [], compute)


def stage_train(run: Run):
    def compute(d):
        ckpt, report = ex.train_base(run.corpus(), run.cfg)
        save_checkpoint(ckpt, d / "checkpoint.json")
        (d / "report.json").write_text(report.to_json())
        return ["checkpoint.json", "checkpoint.bin", "report.json"]

    return run.stage("train", ["model", "train", "eval"], ["corpus"], compute)


def stage_score(run: Run):
    def compute(d):
        table = ex.score_stage(run.checkpoint("train"), run.corpus(), run.cfg)
        table.save(d / "scores.json")
        return ["scores.json"]

    return run.stage("score", ["metrics", "mining", "train"], ["corpus", "train"], compute)


def stage_mine(run: Run):
    def compute(d):
        table = run._load("score", lambda s: ScoreTable.load(s / "scores.json"))
        save_subcategories(ex.mine_stage(table, run.cfg), d / "subcategories.json")
        return ["subcategories.json"]

    return run.stage("mine", ["mining"], ["score"], compute)


def stage_select(run: Run):
    def compute(d):
        bank, report = ex.select_stage(run.checkpoint("train"), run.subcats(), run.corpus(), run.cfg)
        bank.save(d / "bank.json")
        report.save(d / "correlation.json")
        return ["bank.json", "correlation.json"]

    return run.stage("select", ["selection", "train", "eval"], ["corpus", "train", "mine"], compute)


def stage_regime(run: Run, kind: str):
    name = f"regime-{kind}"

    def compute(d):
        bank = run.bank() if kind != RegimeKind.STANDARD.value else CategoryBank([])
        try:
            ckpt, report = ex.regime_stage(kind, run.checkpoint("train"), run.corpus(), bank, run.cfg)
        except ex.ConfigError as exc:
            raise UsageError(str(exc)) from exc
        save_checkpoint(ckpt, d / "checkpoint.json")
        (d / "report.json").write_text(report.to_json())
        (d / "report.csv").write_text(report.to_csv())
        return ["checkpoint.json", "checkpoint.bin", "report.json", "report.csv"]

    inputs = ["corpus", "train"] + ([] if kind == RegimeKind.STANDARD.value else ["select"])
    run.stage(name, ["model", "train", "ramp", "plan", "regime_iters", "eval"], inputs, compute)
    return name


def stage_eval(run: Run, source: str):
    name = f"eval-{source}"

    def compute(d):
        results = ex.evaluate_stage(run.checkpoint(source), run.corpus(), run.subcats(), run.cfg)
        files = []
        for dataset, res in results.items():
            (d / f"{dataset}.json").write_text(res.to_json())
            (d / f"{dataset}.csv").write_text(res.to_csv())
            files += [f"{dataset}.json", f"{dataset}.csv"]
        return files

    run.stage(name, ["eval", "train"], ["corpus", "mine", source], compute)
    return name


# --- reports -----------------------------------------------------------------------

def load_results(stage_dir) -> dict:
    """Benchmark results of one eval stage, keyed by dataset, means recomputed."""
    out = {}
    for path in sorted(Path(stage_dir).glob("*.json")):
        if path.name == MANIFEST:
            continue
        res = BenchmarkResult.from_dict(json.loads(path.read_text()))
        out[res.dataset_name] = BenchmarkResult.from_rows(res.dataset_name, res.per_image)
    return out


def regime_table(root) -> list:
    """One row per evaluated regime: ``{"regime", dataset: {"psnr", "ssim"}}``."""
    rows = []
    for kind in REGIMES:
        d = Path(root) / f"eval-regime-{kind}"
        if (d / MANIFEST).exists():
            res = load_results(d)
            rows.append({"regime": kind, **{k: {"psnr": r.mean_psnr, "ssim": r.mean_ssim}
                                            for k, r in res.items()}})
    return rows


def table_csv(rows, key) -> str:
    datasets = sorted({k for r in rows for k in r if k not in (key, "params", "preset")})
    extra = [c for c in ("params", "preset") if any(c in r for r in rows)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key] + extra + [f"{ds}_{m}" for ds in datasets for m in ("psnr", "ssim")])
    for r in rows:
        cells = [r[key]] + [r.get(c, "") for c in extra]
        for ds in datasets:
            cells += [repr(r[ds]["psnr"]), repr(r[ds]["ssim"])] if ds in r else ["", ""]
        w.writerow(cells)
    return buf.getvalue()


def size_series(run_dirs) -> list:
    """Model size against quality, one point per run directory (its configured regime)."""
    points = []
    for root in run_dirs:
        root = Path(root)
        cfg = ex.RunConfig.from_dict(json.loads((root / CONFIG).read_text()))
        d = root / f"eval-regime-{cfg.regime}"
        if not (d / MANIFEST).exists():
            continue
        spec = cfg.model.spec()
        res = load_results(d)
        points.append({"run": root.name, "preset": cfg.model.preset or "", "params": param_count(spec),
                       **{k: {"psnr": r.mean_psnr, "ssim": r.mean_ssim} for k, r in res.items()}})
    return sorted(points, key=lambda p: (p["params"], p["run"]))


def write_report(run_dirs, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = regime_table(run_dirs[0])
    series = size_series(run_dirs)
    (out / "regimes.csv").write_text(table_csv(rows, "regime"))
    _write_json(out / "regimes.json", rows)
    (out / "sizes.csv").write_text(table_csv(series, "run"))
    _write_json(out / "sizes.json", series)
    return ["regimes.csv", "regimes.json", "sizes.csv", "sizes.json"]


# --- commands ----------------------------------------------------------------------

def cmd_gen_corpus(run, args):
    if run.cfg.corpus.path:
        raise UsageError("gen-corpus needs corpus.path unset")
    stage_corpus(run)


def cmd_train(run, args):
    stage_corpus(run)
    stage_train(run)


def cmd_score(run, args):
    stage_score(run)


def cmd_mine(run, args):
    stage_mine(run)


def cmd_select(run, args):
    stage_select(run)


def cmd_cyclic(run, args):
    stage_regime(run, RegimeKind.CYCLIC_FULL.value)


def cmd_regime(run, args):
    kinds = REGIMES if args.all else [args.kind or run.cfg.regime]
    for kind in kinds:
        stage_eval(run, stage_regime(run, kind))
    if args.all:
        (run.root / "ablation.csv").write_text(table_csv(regime_table(run.root), "regime"))


def cmd_eval(run, args):
    source = args.source or f"regime-{run.cfg.regime}"
    stage_eval(run, source)


def cmd_report(run, args):
    dirs = [run.root] + [Path(p) for p in args.runs]
    write_report(dirs, args.out or run.root / "report")


def cmd_pipeline(run, args):
    stage_corpus(run)
    stage_train(run)
    stage_score(run)
    stage_mine(run)
    stage_select(run)
    stage_eval(run, stage_regime(run, run.cfg.regime))
    write_report([run.root], run.root / "report")


COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "write the seeded synthetic corpus"),
    "train": (cmd_train, "train the base model (standard schedule)"),
    "score": (cmd_score, "score every corpus patch with the base model"),
    "mine": (cmd_mine, "mine the top-scoring patches into sub-categories"),
    "select": (cmd_select, "probe, filter and merge sub-categories into a bank"),
    "cyclic": (cmd_cyclic, "cyclic training over the bank and the full corpus"),
    "regime": (cmd_regime, "train and evaluate one regime, or all of them with --all"),
    "eval": (cmd_eval, "evaluate a trained checkpoint"),
    "report": (cmd_report, "emit comparison tables"),
    "pipeline": (cmd_pipeline, "run every stage end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hardcycle", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("run_dir", help="run directory (created if missing)")
        s.add_argument("--config", help="JSON config file (default: the run's config.json)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.batch=8")
        s.add_argument("--resume", action="store_true", help="skip stages whose manifest matches")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "regime":
            g = s.add_mutually_exclusive_group()
            g.add_argument("--kind", choices=REGIMES)
            g.add_argument("--all", action="store_true", help="sweep every regime")
        if name == "eval":
            s.add_argument("--source", help="stage holding the checkpoint, e.g. train or regime-standard")
        if name == "report":
            s.add_argument("runs", nargs="*", help="further run directories for the size series")
            s.add_argument("--out", help="output directory (default RUN_DIR/report)")
    return p


def load_config(root: Path, config_path, overrides) -> ex.RunConfig:
    path = Path(config_path) if config_path else root / CONFIG
    if path.exists():
        try:
            d = json.loads(path.read_text())
        except ValueError as exc:
            raise ex.ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = ex.RunConfig.from_dict(d)
    elif config_path:
        raise ex.ConfigError(f"config file {path} does not exist")
    else:
        cfg = ex.RunConfig()
    return cfg.with_overrides(overrides)


def _threads() -> int:
    raw = os.environ.get("HARDCYCLE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HARDCYCLE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("HARDCYCLE_THREADS must be >= 1")
    return n


def _fail(code, stage, message):
    print(json.dumps({"error": "usage" if code == 1 else "stage", "stage": stage,
                      "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    root = Path(args.run_dir)
    try:
        threads = _threads()
        cfg = load_config(root, args.config, args.set)
    except (ex.ConfigError, UsageError) as exc:
        return _fail(1, None, str(exc))
    root.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(root / LOCK, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        return _fail(1, None, f"{root} is locked by another process (remove {LOCK} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        _write_json(root / CONFIG, cfg.to_dict())
        run = Run(root, cfg, resume=args.resume)
        with threadpool_limits(threads):
            COMMANDS[args.command][0](run, args)
    except UsageError as exc:
        return _fail(1, None, str(exc))
    except StageError as exc:
        return _fail(2, exc.stage, str(exc))
    finally:
        (root / LOCK).unlink(missing_ok=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
