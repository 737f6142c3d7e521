"""Command-line pipeline: align, compose, train-order, order, eval, report.

All outputs are deterministic functions of the inputs, the configuration,
and the seed: identical invocations produce byte-identical file trees. A
JSON config file can supply any setting; explicit flags win over the file,
which wins over built-in defaults (the seed also falls back to the
PARACAP_SEED environment variable).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fixture as fixture_mod
from .alignment import align_dataset, load_alignments, load_embeddings, write_alignments
from .dataset import load_captions, load_dataset, validate
from .errors import ParacapError, SchemaError
from .geometry import compose, compose_dataset, extract_baseline_features, write_manifest
from .metrics import CORPUS_FIELDS, ImageMetrics, MetricsReport, evaluate
from .ordering import (
    DecodeLimits,
    OrderingConfig,
    apply_penalty,
    decode_dataset,
    forward,
    grad_check,
    init_model,
    load_model,
    project_history,
    save_model,
    teacher_forcing_loss,
    train,
    write_sequences,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2


@dataclass
class RunConfig:
    """Every tunable with its default; recorded in emitted report headers."""

    theta: float = 0.6
    alpha: float = 1.0
    tau: float = 0.2
    s_max: int = 4
    grid: int = 4
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    max_positions: int = 8
    seed: int = 42
    lr: float = 0.05
    epochs: int = 300
    max_objects_per_sentence: int = 6
    max_sentences: int = 6
    sigma: float = 6.0
    jobs: int = 1

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Layer settings: flags > config file > PARACAP_SEED > defaults."""
    values: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{config_path}: not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise SchemaError(f"{config_path}: config must be a JSON object")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(raw) - known
        if unknown:
            raise SchemaError(f"{config_path}: unknown config keys {sorted(unknown)}")
        values.update(raw)
    if "seed" not in values and getattr(args, "seed", None) is None:
        env_seed = os.environ.get("PARACAP_SEED")
        if env_seed is not None:
            try:
                values["seed"] = int(env_seed)
            except ValueError:
                raise SchemaError(f"PARACAP_SEED must be an integer, got {env_seed!r}")
    for field in dataclasses.fields(RunConfig):
        flag = getattr(args, field.name, None)
        if flag is not None:
            values[field.name] = flag
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise SchemaError(f"bad configuration: {exc}") from None


# ---------------------------------------------------------------------------
# pipeline stages (shared by the subcommands and selftest)

def stage_align(dataset_path, embeddings_path, out_path, cfg: RunConfig):
    dataset = load_dataset(dataset_path)
    table = load_embeddings(embeddings_path)
    alignments = align_dataset(dataset, table, cfg.theta, jobs=cfg.jobs)
    write_alignments(alignments, out_path)
    return dataset, table, alignments


def stage_compose(dataset, alignments, out_path, cfg: RunConfig,
                  ppm_dir=None, features_path=None):
    results = compose_dataset(dataset, alignments, tau=cfg.tau, s_max=cfg.s_max,
                              jobs=cfg.jobs)
    write_manifest(results, out_path, ppm_dir=Path(ppm_dir) if ppm_dir else None)
    if features_path is not None:
        payload = {
            "grid": cfg.grid,
            "features": [
                {
                    "image_id": spec.image_id,
                    "sentence_index": spec.sentence_index,
                    "vector": extract_baseline_features(canvas, cfg.grid).tolist(),
                }
                for spec, canvas in results
            ],
        }
        Path(features_path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return results

def stage_train(dataset, alignments, model_path, cfg: RunConfig, curve_path=None):
    model_cfg = OrderingConfig(
        feature_dim=dataset.feature_dim + 4,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        max_positions=cfg.max_positions,
    )
    model = init_model(model_cfg, seed=cfg.seed)
    curve = train(model, dataset, alignments, lr=cfg.lr, epochs=cfg.epochs)
    save_model(model, model_path)
    if curve_path is not None:
        Path(curve_path).write_text(
            json.dumps({"loss": curve}, indent=2, sort_keys=True) + "\n")
    return model, curve


def stage_order(dataset, model, out_path, cfg: RunConfig, alpha=None):
    limits = DecodeLimits(
        max_objects_per_sentence=cfg.max_objects_per_sentence,
        max_sentences=cfg.max_sentences,
    )
    sequences = decode_dataset(
        model, dataset, alpha=cfg.alpha if alpha is None else alpha,
        limits=limits, jobs=cfg.jobs,
    )
    write_sequences(sequences, out_path)
    return sequences


def stage_eval(dataset, captions_path, table, out_path, cfg: RunConfig,
               csv_path=None, md_path=None):
    captions = load_captions(captions_path)
    report = evaluate(captions, dataset, table, theta=cfg.theta, sigma=cfg.sigma)
    emit_report(report, "json", out_path, config=cfg)
    if csv_path is not None:
        emit_report(report, "csv", csv_path, config=cfg)
    if md_path is not None:
        emit_report(report, "md", md_path, config=cfg)
    return report


# ---------------------------------------------------------------------------
# report serialization

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def report_to_dict(report: MetricsReport, config: RunConfig | dict | None = None) -> dict:
    out = {
        "corpus": {k: report.corpus[k] for k in CORPUS_FIELDS},
        "images": [img.as_dict() for img in report.images],
        "skipped": list(report.skipped),
    }
    if config is not None:
        out["config"] = config.as_dict() if isinstance(config, RunConfig) else dict(config)
    return out


def parse_report(path) -> tuple[MetricsReport, dict | None]:
    """Read a report JSON back into memory (for format conversion)."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from None
    try:
        images = [
            ImageMetrics(
                image_id=entry["image_id"],
                bleu=tuple(entry[f"bleu{k}"] for k in range(1, 5)),
                cider=entry["cider"],
                o_cap=entry["o_cap"],
                o_g=entry["o_g"],
                o_g_cap=entry["o_g_cap"],
                rc_cap=entry["rc_cap"],
                rep4=entry["rep4"],
            )
            for entry in raw["images"]
        ]
        report = MetricsReport(corpus=raw["corpus"], images=images,
                               skipped=list(raw.get("skipped", [])))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed report: {exc}") from None
    return report, raw.get("config")


def emit_report(report: MetricsReport, fmt: str, path,
                config: RunConfig | dict | None = None) -> None:
    """Serialize a report as json, csv, or a markdown grid.

    The csv has one row per image plus a final MEAN row holding the corpus
    aggregates; the markdown variant prints the object-metric grid
    (O_G, O_G-Cap, RC_cap, Rep-4) alongside the text-metric block.
    """
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report_to_dict(report, config),
                                   indent=2, sort_keys=True) + "\n")
        return
    if fmt == "csv":
        lines = ["image_id," + ",".join(CORPUS_FIELDS)]
        for img in report.images:
            row = img.as_dict()
            lines.append(img.image_id + "," + ",".join(_fmt(row[k]) for k in CORPUS_FIELDS))
        lines.append("MEAN," + ",".join(_fmt(report.corpus[k]) for k in CORPUS_FIELDS))
        path.write_text("\n".join(lines) + "\n")
        return
    if fmt == "md":
        lines = ["# Evaluation report", ""]
        if config is not None:
            cfg_dict = config.as_dict() if isinstance(config, RunConfig) else dict(config)
            lines.append("Config: " + ", ".join(
                f"{k}={cfg_dict[k]}" for k in sorted(cfg_dict)))
            lines.append("")
        lines += [
            "| Scope | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | CIDEr |",
            "|---|---|---|---|---|---|",
            "| corpus | " + " | ".join(
                _fmt(report.corpus[f"bleu{k}"]) for k in range(1, 5)
            ) + f" | {_fmt(report.corpus['cider'])} |",
            "",
            "| Image | O_Cap | O_G | O_G-Cap | RC_cap | Rep-4 |",
            "|---|---|---|---|---|---|",
        ]
        for img in report.images:
            lines.append(
                f"| {img.image_id} | {img.o_cap} | {img.o_g} | {img.o_g_cap} "
                f"| {_fmt(img.rc_cap)} | {img.rep4} |"
            )
        lines.append(
            "| MEAN | " + " | ".join(
                _fmt(report.corpus[k]) for k in ("o_cap", "o_g", "o_g_cap", "rc_cap", "rep4")
            ) + " |"
        )
        if report.skipped:
            lines += ["", "Skipped (no caption): " + ", ".join(report.skipped)]
        path.write_text("\n".join(lines) + "\n")
        return
    raise SchemaError(f"unknown report format {fmt!r}")


# ---------------------------------------------------------------------------
# selftest

def _check(name: str, ok: bool, detail: str = "") -> None:
    if not ok:
        raise ParacapError(f"selftest check failed: {name} {detail}".rstrip())
    print(f"selftest: {name} ok")


def run_selftest(out_dir, cfg: RunConfig) -> None:
    """Full pipeline on the bundled corpus plus an invariant battery."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = fixture_mod.build_fixture(out / "fixture")
    print(f"selftest: fixture at {paths['dataset']}")

    dataset, table, alignments = stage_align(
        paths["dataset"], paths["embeddings"], out / "alignments.json", cfg)
    print(f"selftest: aligned {len(alignments)} images")

    _check("dataset-validates", validate(dataset).ok)
    audit = all(
        score >= cfg.theta
        for rec in alignments for group in rec.scores for score in group
    )
    _check("alignment-scores-above-theta", audit)
    rerun = align_dataset(dataset, table, cfg.theta)
    _check("alignment-deterministic", rerun == alignments)

    results = stage_compose(dataset, alignments, out / "composites" / "manifest.json",
                            cfg, ppm_dir=out / "composites" / "ppm",
                            features_path=out / "composites" / "features.json")
    print(f"selftest: composed {len(results)} canvases")
    for spec, canvas in results:
        mask = canvas.placement_mask()
        background_black = bool((canvas.pixels[~mask] == 0).all())
        _ = extract_baseline_features(canvas, cfg.grid)
        if not background_black:
            raise ParacapError(f"selftest: nonzero background in {spec.image_id}")
    _check("composites-zero-background", True)

    model, curve = stage_train(dataset, alignments, out / "model.json", cfg,
                               curve_path=out / "loss_curve.json")
    print(f"selftest: trained {cfg.epochs} epochs, "
          f"loss {curve[0]:.4f} -> {curve[-1]:.4f}")
    _check("training-loss-decreased", curve[-1] < curve[0])

    sample_image = dataset[0]
    sample_alignment = alignments[0]
    feats = np.vstack([
        np.concatenate([np.asarray(obj.feature), np.zeros(4)])
        for obj in sample_image.objects
    ])
    logp = forward(model, project_history([], model), feats)
    _check("forward-normalized", abs(float(np.logaddexp.reduce(logp))) < 1e-9)

    base = np.log(np.full(4, 0.25))
    _check("penalty-alpha0-identity",
           bool((apply_penalty(base, np.array([5, 2, 1, 0]), 0.0) == base).all()))
    adjusted = apply_penalty(np.log([0.5, 0.5]), np.array([4, 1]), 1.0)
    _check("penalty-hand-case",
           abs(adjusted[0] - (np.log(0.5) - np.log(4.0))) < 1e-12
           and adjusted[1] == np.log(0.5))

    err = grad_check(model, sample_image, sample_alignment, n_samples=8, seed=1)
    _check("gradient-check", err < 1e-4, f"(max rel err {err:.2e})")

    sequences = stage_order(dataset, model, out / "sequences.json", cfg)
    plain = stage_order(dataset, model, out / "sequences_alpha0.json", cfg, alpha=0.0)

    def max_occurrence(seq):
        flat = [obj_id for group in seq.sentences for obj_id in group]
        return max((flat.count(i) for i in set(flat)), default=0)

    _check("penalty-curbs-repetition", all(
        max_occurrence(a) <= max_occurrence(b) for a, b in zip(sequences, plain)
    ))

    report = stage_eval(dataset, paths["captions"], table, out / "report.json", cfg,
                        csv_path=out / "report.csv", md_path=out / "report.md")
    _check("report-complete", all(k in report.corpus for k in CORPUS_FIELDS)
           and len(report.images) == len(dataset))
    print(f"selftest: report at {out / 'report.json'}")


# ---------------------------------------------------------------------------
# argument parsing

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file (flags override it)")
    sub.add_argument("--jobs", type=int, help="parallel workers for per-image maps")


def build_parser() -> _Parser:
    parser = _Parser(prog="paracap", description=__doc__.split("\n")[0])
    commands = parser.add_subparsers(dest="command")

    p = commands.add_parser("align", parents=[], help="align objects to sentences")
    p.add_argument("--dataset", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=float)
    _add_common(p)

    p = commands.add_parser("compose", help="build combined-object canvases")
    p.add_argument("--dataset", required=True)
    p.add_argument("--alignments", required=True)
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.add_argument("--ppm-dir", help="emit each canvas as a P6 file here")
    p.add_argument("--features", help="emit pooled canvas descriptors here")
    p.add_argument("--tau", type=float)
    p.add_argument("--s-max", dest="s_max", type=int)
    p.add_argument("--grid", type=int)
    _add_common(p)

    p = commands.add_parser("train-order", help="train the ordering decoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--alignments", required=True)
    p.add_argument("--out", required=True, help="model weights JSON path")
    p.add_argument("--curve", help="write the per-epoch loss curve here")
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--max-positions", dest="max_positions", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    _add_common(p)

    p = commands.add_parser("order", help="decode object sequences")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-objects", dest="max_objects_per_sentence", type=int)
    p.add_argument("--max-sentences", dest="max_sentences", type=int)
    _add_common(p)

    p = commands.add_parser("eval", help="score generated captions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="also emit a CSV report here")
    p.add_argument("--md", help="also emit a markdown report here")
    p.add_argument("--theta", type=float)
    p.add_argument("--sigma", type=float)
    _add_common(p)

    p = commands.add_parser("report", help="convert a report to another format")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--format", required=True, choices=["json", "csv", "md"])
    p.add_argument("--out", required=True)
    _add_common(p)

    p = commands.add_parser("selftest", help="run the pipeline on the bundled corpus")
    p.add_argument("--out", default="selftest_out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    _add_common(p)

    return parser


def run(argv: list[str]) -> int:
    """Execute one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args([str(a) for a in argv])
    except _UsageError as exc:
        print(parser.format_usage(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not args.command:
        print(parser.format_usage(), file=sys.stderr)
        return EXIT_USAGE

    try:
        cfg = resolve_config(args)
        if args.command == "align":
            dataset, _, alignments = stage_align(
                args.dataset, args.embeddings, args.out, cfg)
            print(f"aligned {len(alignments)} images -> {args.out}")
        elif args.command == "compose":
            dataset = load_dataset(args.dataset)
            alignments = load_alignments(args.alignments)
            results = stage_compose(dataset, alignments, args.out, cfg,
                                    ppm_dir=args.ppm_dir, features_path=args.features)
            print(f"composed {len(results)} canvases -> {args.out}")
        elif args.command == "train-order":
            dataset = load_dataset(args.dataset)
            alignments = load_alignments(args.alignments)
            _, curve = stage_train(dataset, alignments, args.out, cfg,
                                   curve_path=args.curve)
            print(f"trained {cfg.epochs} epochs, loss {curve[0]:.4f} -> "
                  f"{curve[-1]:.4f} -> {args.out}")
        elif args.command == "order":
            dataset = load_dataset(args.dataset)
            model = load_model(args.model)
            sequences = stage_order(dataset, model, args.out, cfg)
            print(f"decoded {len(sequences)} images -> {args.out}")
        elif args.command == "eval":
            dataset = load_dataset(args.dataset)
            table = load_embeddings(args.embeddings)
            report = stage_eval(dataset, args.captions, table, args.out, cfg,
                                csv_path=args.csv, md_path=args.md)
            print(f"evaluated {len(report.images)} images -> {args.out}")
        elif args.command == "report":
            report, config = parse_report(args.in_path)
            emit_report(report, args.format, args.out, config=config)
            print(f"wrote {args.format} report -> {args.out}")
        elif args.command == "selftest":
            run_selftest(args.out, cfg)
            print("selftest passed")
        else:  # pragma: no cover - argparse restricts choices
            print(parser.format_usage(), file=sys.stderr)
            return EXIT_USAGE
    except (ParacapError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
