"""Command-line entry points: ``train``, ``ablate``, ``report`` and ``eval``.

Exit codes: 0 on success, 1 on a usage error, 2 on a runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import SUITES, ConfigError, ExperimentConfig, apply_overrides, config_from_dict, \
    configure_variant, load_config, save_config
from .evaluation import MetricsReport, evaluate_protocol
from .lifelong import make_run_data, restore_model, run_sequence

log = logging.getLogger("pad_lreid")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        raise UsageError(message)


def runs_root() -> Path:
    return Path(os.environ.get("PAD_RUNS_DIR", "runs"))


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_")
    with os.fdopen(fd, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _base_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    cfg = load_config(path) if path else ExperimentConfig()
    return apply_overrides(cfg, overrides or [])


# --- train ------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _base_config(args.config, args.set)
    if args.variant:
        cfg = configure_variant(cfg, args.variant)
    out = Path(args.out) if args.out else runs_root() / cfg.variant
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    result = run_sequence(cfg, out_dir=out, resume_from=args.resume)
    seen, unseen = result.report.stages[-1].seen_avg, result.report.stages[-1].unseen_avg
    print(f"{cfg.variant}: seen mAP {seen[0]:.4f} R1 {seen[1]:.4f} | "
          f"unseen mAP {unseen[0]:.4f} R1 {unseen[1]:.4f} -> {out}")
    return EXIT_OK


# --- ablate -----------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {sorted(SUITES)}")
    base = _base_config(args.config, args.set)
    out = Path(args.out) if args.out else runs_root() / f"ablate_{args.suite}"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in SUITES[args.suite]:
        cfg = configure_variant(base, name)
        run_dir = out / name
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / "config.json")
        result = run_sequence(cfg, out_dir=run_dir)
        final = result.report.stages[-1]
        row = [name, *final.seen_avg, *final.unseen_avg]
        if args.suite == "blocks":
            backbone = [r for r in result.logs[-1].param_report if r[1] == "Backbone"][0]
            row.append(backbone[2])
        rows.append(row)
        print(f"{name}: seen mAP {final.seen_avg[0]:.4f} unseen mAP {final.unseen_avg[0]:.4f}")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["variant", "seen_mAP", "seen_R1", "unseen_mAP", "unseen_R1"]
    if args.suite == "blocks":
        header.append("trainable_backbone")
    w.writerow(header)
    for row in rows:
        w.writerow([row[0], *(f"{x:.10f}" for x in row[1:5]), *row[5:]])
    _atomic_write_text(out / "ablation.csv", buf.getvalue())
    return EXIT_OK


# --- report -----------------------------------------------------------------------------

def summary_text(report: MetricsReport) -> str:
    final = report.stages[-1]
    lines = [f"stages: {len(report.stages)}",
             f"seen_avg mAP: {final.seen_avg[0]:.10f}",
             f"seen_avg R1: {final.seen_avg[1]:.10f}",
             f"unseen_avg mAP: {final.unseen_avg[0]:.10f}",
             f"unseen_avg R1: {final.unseen_avg[1]:.10f}"]
    for dom, f in sorted(report.forgetting().items()):
        lines.append(f"forgetting domain {dom}: {f:.10f}")
    return "\n".join(lines) + "\n"


def _read_diagnostics(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _trend_plot(report: MetricsReport, split: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    domains = sorted({r.domain for s in report.stages for r in s.results if r.split == split})
    for dom in domains:
        pts = [(s.stage, r.mAP) for s in report.stages for r in s.results
               if r.split == split and r.domain == dom]
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=f"{split} {dom}")
    ax.set_xlabel("stage")
    ax.set_ylabel("mAP")
    ax.set_xticks([s.stage for s in report.stages])
    ax.set_title(f"{split} domains")
    ax.legend(fontsize=7)
    fig.tight_layout()
    # fixed metadata keeps the file byte-stable across reruns
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def trend_points(report: MetricsReport, split: str) -> dict[int, list[tuple[int, float]]]:
    out: dict[int, list[tuple[int, float]]] = {}
    for s in report.stages:
        for r in s.results:
            if r.split == split:
                out.setdefault(r.domain, []).append((s.stage, r.mAP))
    return out


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    metrics = run / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"missing {metrics}")
    report = MetricsReport.read_metrics_csv(metrics)
    plots = run / "plots"
    plots.mkdir(exist_ok=True)
    _trend_plot(report, "seen", plots / "seen_trend.png")
    if any(r.split == "unseen" for s in report.stages for r in s.results):
        _trend_plot(report, "unseen", plots / "unseen_trend.png")
    text = summary_text(report)
    diag = _read_diagnostics(run / "diagnostics.csv")
    if diag:
        last = diag[-1]
        text += f"drift: {last['drift']}\nrho_pearson: {last['rho_pearson']}\n" \
                f"rho_spearman: {last['rho_spearman']}\n"
    _atomic_write_text(run / "summary.txt", text)
    print(text, end="")
    return EXIT_OK


# --- eval -------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    expected = None
    if args.config:
        expected = _base_config(args.config, args.set).config_hash()
    ckpt = load_checkpoint(path, expected_hash=expected)
    cfg = config_from_dict(ckpt.meta["config"])
    if cfg.config_hash() != ckpt.config_hash:
        raise CheckpointError(f"config hash mismatch: {cfg.config_hash()} != {ckpt.config_hash}")
    model = restore_model(ckpt, cfg)
    data = make_run_data(cfg)
    t = ckpt.domain_index
    seen = [d.test for d in data.seen[: t + 1]] if args.splits in ("seen", "all") else []
    unseen = data.unseen if args.splits in ("unseen", "all") else []
    report = evaluate_protocol(model.image_encoder, model.active_pool, seen, unseen, stage=t).report

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "domain", "split", "mAP", "R1"])
    for r in report.results:
        w.writerow([t, r.domain, r.split, f"{r.mAP:.10f}", f"{r.R1:.10f}"])
    out = Path(args.out) if args.out else path.parent / f"eval_stage_{t}_{args.splits}.csv"
    _atomic_write_text(out, buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


# --- entry --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pad-lreid", description="Prompt-anchored lifelong person re-identification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train one variant over the domain sequence")
    t.add_argument("--config")
    t.add_argument("--variant")
    t.add_argument("--out")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run a variant family and tabulate the final stage")
    a.add_argument("--config")
    a.add_argument("--suite", required=True)
    a.add_argument("--out")
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="plots and text summary for a finished run")
    r.add_argument("--run-dir", required=True)
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("eval", help="evaluate a checkpoint with the image encoder only")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--splits", choices=["seen", "unseen", "all"], default="all")
    e.add_argument("--config", help="require the checkpoint to match this config")
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: train, ablate, report or eval")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
