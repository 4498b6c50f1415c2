"""Command-line entry point: ``cascade-eeg COMMAND --config FILE --out DIR``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dataio import (
    IngestionError,
    LabelError,
    ProtocolError,
    SynthSpec,
    ingest,
    synth_generate,
    write_dataset,
)
from .diffnum import GradCheckError, CheckpointError
from .model import VARIANTS, ConfigurationError, ModelBundle
from .pipeline import (
    LosoReport,
    NumericError,
    accuracy,
    evaluate_loso,
    finetune,
    geometry_for,
    load_segments,
    loss_log_csv,
    new_bundle,
    open_view,
    pretrain,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_FILES = ("report.json", "per_subject.csv")
log = logging.getLogger("cascade_eeg")


class UsageError(Exception):
    pass


class ReportError(UsageError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascade-eeg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text, config=True, out=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, help="run configuration file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--jobs", type=int, help="parallel LOSO folds")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    command("gen-synth", "write the configured synthetic dataset as payload files")
    command("ingest-check", "validate a dataset descriptor and its payloads", out=False)
    p = command("pretrain", "self-supervised pretraining on every segment")
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/pretrained.ckpt)")
    p = command("finetune", "train the classifier on top of a pretrained checkpoint")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint to start from")
    command("eval-loso", "leave-one-subject-out evaluation of the configured variant")
    p = command("ablate", "LOSO evaluation of one ablation variant")
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p = command("limited-label", "LOSO evaluation with a fraction of the labels")
    p.add_argument(
        "--fraction",
        required=True,
        help="labeled fraction in (0, 1]; a comma list shares pretraining across fractions",
    )
    p = command("gradcheck", "finite-difference check of every parameter group", out=False)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p = sub.add_parser("report", help="merge finished run directories into one table")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--svg", action="store_true", help="also write chart.svg")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_metadata(out: Path, cfg: RunConfig, argv, started: float, extra: dict | None = None):
    meta = {
        "argv": list(argv),
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished_utc": datetime.now(timezone.utc).isoformat(),
        "elapsed_s": round(time.time() - started, 3),
    }
    meta.update(extra or {})
    _write(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_report(out: Path, report: LosoReport, rows: list[dict]) -> None:
    _write(out / "report.json", report.to_json() + "\n")
    _write(out / "per_subject.csv", report.per_subject_csv())
    _write(out / "loss_log.csv", loss_log_csv(rows))


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {"seed": args.seed, "jobs": args.jobs}
    cfg = cfg.with_overrides(**overrides)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args, argv) -> int:
    cfg = _load(args)
    recs = synth_generate(
        cfg.synth_subjects,
        cfg.synth_trials,
        cfg.synth_channels,
        cfg.synth_length,
        cfg.synth_seed,
        SynthSpec(segments_per_trial=cfg.synth_segments_per_trial, cue_amplitude=cfg.synth_cue_amplitude),
    )
    desc = write_dataset(args.out, recs, "synthetic")
    print(f"wrote {len(recs)} recordings; descriptor {desc}")
    return EXIT_OK


def cmd_ingest_check(args, argv) -> int:
    cfg = _load(args)
    if not cfg.data:
        raise UsageError("ingest-check needs a 'data' descriptor in the config")
    scheme, recs = ingest(cfg.data)
    subjects = sorted({r.subject_id for r in recs})
    shapes = sorted({(r.channels, r.length) for r in recs})
    print(f"scheme={scheme} recordings={len(recs)} subjects={len(subjects)} shapes={shapes}")
    segs = load_segments(cfg)
    counts = np.bincount(segs.labels, minlength=2)
    print(f"segments={len(segs)} window={segs.values.shape[1:]} low={counts[0]} high={counts[1]}")
    return EXIT_OK


def cmd_pretrain(args, argv) -> int:
    started = time.time()
    cfg = _load(args)
    segs = load_segments(cfg)
    bundle = new_bundle(geometry_for(segs, cfg), cfg, cfg.seed)
    rows = pretrain(bundle, open_view(segs, "pretrain"), cfg, cfg.seed)
    out = Path(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "pretrained.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    bundle.save(ckpt)
    _write(out / "loss_log.csv", loss_log_csv(rows))
    _write_metadata(out, cfg, argv, started, {"checkpoint": str(ckpt)})
    if rows:
        print(f"joint loss {rows[0]['joint']:.6g} -> {rows[-1]['joint']:.6g} over {len(rows)} steps")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_finetune(args, argv) -> int:
    started = time.time()
    cfg = _load(args)
    segs = load_segments(cfg)
    geo = geometry_for(segs, cfg)
    bundle = ModelBundle.load(args.checkpoint, geo, dtype=np.dtype(cfg.dtype))
    if bundle.variant != cfg.variant:
        raise ConfigError(f"checkpoint variant {bundle.variant!r} != config variant {cfg.variant!r}")
    view = open_view(segs, "finetune")
    rows = finetune(bundle, view, cfg, cfg.seed)
    acc = accuracy(bundle, view)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle.save(out / "finetuned.ckpt")
    _write(out / "loss_log.csv", loss_log_csv(rows))
    _write_metadata(out, cfg, argv, started, {"train_accuracy": acc})
    print(f"training accuracy {acc:.2f}%")
    return EXIT_OK


def _loso(cfg: RunConfig, out: Path, argv, started: float, fractions=None) -> int:
    segs = load_segments(cfg)
    reports, rows, results = evaluate_loso(segs, cfg, fractions=fractions)
    many = len(reports) > 1
    for fraction, report in reports.items():
        target = out / f"fraction_{fraction:g}" if many else out
        if not report.check():
            raise NumericError("report mean/std do not match per-subject values")
        fr_rows = [r for r in rows if r.get("fraction", fraction) == fraction]
        write_report(target, report, fr_rows)
        reads = {res.held_out: res.reads for res in results}
        _write_metadata(target, cfg.with_overrides(fraction=fraction), argv, started, {"reads": reads})
        print(f"{cfg.variant} fraction={fraction:g}: {report.mean:.2f} +/- {report.std:.2f} %")
    return EXIT_OK


def cmd_eval_loso(args, argv) -> int:
    started = time.time()
    return _loso(_load(args), Path(args.out), argv, started)


def cmd_ablate(args, argv) -> int:
    started = time.time()
    cfg = _load(args).with_overrides(variant=args.variant)
    return _loso(cfg, Path(args.out), argv, started)


def cmd_limited_label(args, argv) -> int:
    started = time.time()
    try:
        fractions = [float(s) for s in args.fraction.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--fraction: {exc}") from exc
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise UsageError("--fraction values must lie in (0, 1]")
    cfg = _load(args).with_overrides(fraction=fractions[0])
    return _loso(cfg, Path(args.out), argv, started, fractions=fractions)


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck_model import check_model_gradients

    cfg = _load(args)
    worst = check_model_gradients(lam=cfg.lam, tau=cfg.tau, seed=cfg.seed)
    bad = {k: v for k, v in worst.items() if v >= args.tolerance}
    for name, err in sorted(worst.items()):
        print(f"{name:28s} {err:.3e}")
    if bad:
        raise GradCheckError(f"{len(bad)} parameter groups exceed {args.tolerance:g}: {sorted(bad)}")
    print(f"all {len(worst)} groups below {args.tolerance:g}")
    return EXIT_OK


def _read_run(run: Path) -> tuple[LosoReport, dict]:
    missing = [f for f in REPORT_FILES if not (run / f).is_file()]
    if missing:
        raise ReportError(f"incomplete run directory {run}: missing {', '.join(missing)}")
    report = LosoReport.from_json((run / "report.json").read_text(encoding="utf-8"))
    return report, report.metadata


def cmd_report(args, argv) -> int:
    runs = []
    for name in args.runs:
        report, meta = _read_run(Path(name))
        runs.append((name, report, meta))
    runs.sort(key=lambda r: (-r[1].mean, r[0]))
    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    w.writerow(["run", "variant", "fraction", "mean", "std", "n_subjects"])
    for name, rep, meta in runs:
        w.writerow([name, meta.get("variant", ""), meta.get("fraction", ""), f"{rep.mean:.6f}", f"{rep.std:.6f}", len(rep.per_subject)])
    long = io.StringIO()
    w = csv.writer(long, lineterminator="\n")
    w.writerow(["run", "variant", "fraction", "subject", "accuracy"])
    for name, rep, meta in runs:
        for subject, acc in rep.per_subject.items():
            w.writerow([name, meta.get("variant", ""), meta.get("fraction", ""), subject, f"{acc:.6f}"])
    out = Path(args.out)
    _write(out / "comparison.csv", table.getvalue())
    _write(out / "comparison_per_subject.csv", long.getvalue())
    if args.svg:
        _write(out / "chart.svg", bar_chart_svg([(_label(n, m), r.mean, r.std) for n, r, m in runs]))
    print(table.getvalue(), end="")
    return EXIT_OK


def _label(name: str, meta: dict) -> str:
    variant = meta.get("variant", Path(name).name)
    fraction = meta.get("fraction", 1.0)
    return variant if fraction == 1.0 else f"{variant} @{fraction:g}"


def bar_chart_svg(bars: list[tuple[str, float, float]], width: int = 640, bar_h: int = 22) -> str:
    """Horizontal bars of mean accuracy with a std whisker, on a 0-100 axis."""
    left, pad = 170, 10
    plot_w = width - left - 2 * pad
    height = pad * 2 + bar_h * len(bars) + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">'
    ]
    for i, (label, mean, std) in enumerate(bars):
        y = pad + i * bar_h
        w = plot_w * mean / 100.0
        lo, hi = left + plot_w * max(mean - std, 0) / 100.0, left + plot_w * min(mean + std, 100) / 100.0
        parts.append(f'<text x="{left - 6}" y="{y + bar_h * 0.7:.1f}" text-anchor="end">{_esc(label)}</text>')
        parts.append(f'<rect x="{left}" y="{y + 3}" width="{w:.1f}" height="{bar_h - 6}" fill="#4477aa"/>')
        parts.append(f'<line x1="{lo:.1f}" x2="{hi:.1f}" y1="{y + bar_h / 2:.1f}" y2="{y + bar_h / 2:.1f}" stroke="#222"/>')
        parts.append(f'<text x="{left + w + 4:.1f}" y="{y + bar_h * 0.7:.1f}">{mean:.1f}</text>')
    axis_y = pad + bar_h * len(bars) + 14
    for tick in range(0, 101, 25):
        x = left + plot_w * tick / 100.0
        parts.append(f'<text x="{x:.1f}" y="{axis_y}" text-anchor="middle">{tick}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "ingest-check": cmd_ingest_check,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval-loso": cmd_eval_loso,
    "ablate": cmd_ablate,
    "limited-label": cmd_limited_label,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose from " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args, argv)
    except (UsageError, ConfigError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, LabelError, ProtocolError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, GradCheckError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
