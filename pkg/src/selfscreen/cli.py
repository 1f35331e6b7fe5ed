"""``selfscreen`` command line.

Exit codes: 0 success, 1 validation/usage error, 2 runtime or transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import yaml

from selfscreen import ffnn
from selfscreen.data import Dataset, Sample, dataset_stats, load_dataset, save_dataset
from selfscreen.embed import (
    EmbeddingProviderConfig,
    embed_all,
    load_embeddings,
    make_embedder,
    save_embeddings,
)
from selfscreen.errors import SelfscreenError, StageError, ValidationError
from selfscreen.evaluation import DEFAULT_H_VALUES, run_loso, sensitivity_sweep, zero_shot_eval
from selfscreen.metrics import MetricsReport
from selfscreen.plotting import plot_distribution, plot_sweep
from selfscreen.report import (
    ReportRow,
    build_manifest,
    save_predictions,
    write_manifest,
    write_report,
)
from selfscreen.vlm import (
    ProviderConfig,
    batch_describe,
    batch_zeroshot,
    load_descriptions,
    load_verdicts,
    make_provider,
    save_verdicts,
)

logger = logging.getLogger("selfscreen")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("ingest", "describe", "embed", "eval", "sweep", "zeroshot", "serve", "screen-once")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _h_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("h list is empty")
    return values


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="global seed for every random choice")
    p.add_argument("--config", help="JSON or YAML file with default values for this command's flags")
    p.add_argument("--out-dir", default=".", help="directory for output artifacts")
    p.add_argument("-v", "--verbose", action="store_true")


def _vlm_args(p, default="chat"):
    p.add_argument("--provider", choices=("chat", "mock", "none"), default=default)
    p.add_argument("--vlm-model", default="gpt-4o")
    p.add_argument("--api-base", help="endpoint root (default: $SELFSCREEN_API_BASE)")
    p.add_argument("--fixture", help="mock provider fixture (JSON: {description: {sha256: text}, zeroshot: {...}})")
    p.add_argument("--concurrency", type=int, default=4)


def _embed_args(p, with_file=True):
    if with_file:
        p.add_argument("--embeddings", help="precomputed embedding file (JSONL)")
    p.add_argument("--embedder", choices=("hash", "remote"), default="hash",
                   help="provider used when no embedding file is given")
    p.add_argument("--embed-model", default="all-MiniLM-L6-v2")
    p.add_argument("--no-normalize", dest="normalize", action="store_false")


def _train_args(p):
    p.add_argument("--dataset", required=True)
    _embed_args(p)
    p.add_argument("--descriptions", help="description file overriding the dataset's description text")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--val-fraction", type=float, default=0.10)
    p.add_argument("--val-split", choices=("sample", "subject"), default="sample")
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--no-upsample", dest="upsample", action="store_false")
    p.add_argument("--upsample-before-split", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--model-name", help="label for the report's model column (default: dataset source VLM)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="selfscreen", description="Depression-anxiety screening from selfie descriptions.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = subs["ingest"] = sub.add_parser("ingest", help="validate a dataset, write canonical JSONL and stats")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=("jsonl", "csv"))
    p.add_argument("--source-vlm")

    p = subs["describe"] = sub.add_parser("describe", help="generate descriptions for every sample image")
    p.add_argument("--dataset", required=True)
    _vlm_args(p)

    p = subs["embed"] = sub.add_parser("embed", help="embed description text")
    p.add_argument("--dataset", required=True)
    p.add_argument("--descriptions")
    _embed_args(p, with_file=False)
    p.add_argument("--concurrency", type=int, default=1)

    p = subs["eval"] = sub.add_parser("eval", help="leave-one-subject-out evaluation")
    _train_args(p)
    p.add_argument("--variant", choices=(ffnn.DEFAULT, ffnn.ALTERNATIVE), default=ffnn.DEFAULT)
    p.add_argument("--h", type=int, help="hidden units (alternative head)")
    p.add_argument("--model-out", help="also train on the full dataset and save the head here")

    p = subs["sweep"] = sub.add_parser("sweep", help="hidden-unit sensitivity sweep")
    _train_args(p)
    p.add_argument("--h", type=_h_list, default=list(DEFAULT_H_VALUES), help="comma-separated hidden units")

    p = subs["zeroshot"] = sub.add_parser("zeroshot", help="score zero-shot VLM verdicts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--verdicts", help="existing verdict file; otherwise the VLM is queried")
    _vlm_args(p)

    for name in ("serve", "screen-once"):
        p = subs[name] = sub.add_parser(name, help="run the HTTP screening service" if name == "serve"
                                        else "screen one image or description")
        p.add_argument("--model", required=True, help="trained head (from eval --model-out)")
        _vlm_args(p, default="none")
        _embed_args(p, with_file=False)
    subs["serve"].add_argument("--host", default="127.0.0.1")
    subs["serve"].add_argument("--port", type=int, default=8000)
    subs["serve"].add_argument("--max-in-flight", type=int, default=8)
    g = subs["screen-once"].add_mutually_exclusive_group(required=True)
    g.add_argument("--image")
    g.add_argument("--text")

    for p in subs.values():
        _common(p)
    return parser, subs


def _load_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) if Path(path).suffix.lower() in (".yaml", ".yml") else json.load(fh)
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _load_config(args.config)
        known = {a.dest for a in subs[args.command]._actions}
        unknown = set(cfg) - known
        if unknown:
            raise ValidationError(f"config has unknown keys for {args.command}: {', '.join(sorted(unknown))}")
        subs[args.command].set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


# -- helpers -----------------------------------------------------------------

def _out(args, name: str) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _provider_cfg(args) -> ProviderConfig:
    return ProviderConfig(kind=args.provider, model=args.vlm_model, api_base=args.api_base,
                          fixture=args.fixture, seed=args.seed)


def _embed_cfg(args) -> EmbeddingProviderConfig:
    if getattr(args, "embeddings", None):
        return EmbeddingProviderConfig("precomputed", path=args.embeddings, normalize=args.normalize)
    return EmbeddingProviderConfig(args.embedder, model=args.embed_model, normalize=args.normalize)


def _with_descriptions(dataset: Dataset, path: str | None) -> Dataset:
    if not path:
        return dataset
    texts = load_descriptions(path)
    samples = [Sample(s.sample_id, s.subject_id, s.phq4, texts[s.sample_id].text if s.sample_id in texts
                      else s.description, s.image_path) for s in dataset]
    model = next(iter(texts.values())).model_name if texts else None
    return Dataset(tuple(samples), source_vlm=model or dataset.source_vlm)


def _embeddings_for(args, dataset: Dataset):
    cfg = _embed_cfg(args)
    if cfg.kind == "precomputed":
        return load_embeddings(cfg.path), cfg
    missing = [s.sample_id for s in dataset if not s.description]
    if missing:
        raise ValidationError(f"{len(missing)} sample(s) have no description text, e.g. {missing[:3]}")
    embedder = make_embedder(cfg)
    return embed_all(((s.sample_id, s.description) for s in dataset), embedder, cfg.normalize), cfg


def _train_cfg(args, variant: str, h: int | None) -> ffnn.TrainConfig:
    return ffnn.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, l2_factor=args.l2,
        val_fraction=args.val_fraction, variant=variant, hidden_units=h, dropout_p=args.dropout,
        seed=args.seed, upsample=args.upsample, upsample_before_split=args.upsample_before_split,
        val_split=args.val_split,
    )


def _report_row(args, dataset, ecfg, variant, h, metrics: MetricsReport | None, skipped: int) -> ReportRow:
    provider = "precomputed" if ecfg.kind == "precomputed" else ecfg.kind
    return ReportRow(args.model_name or dataset.source_vlm or "descriptions", provider, variant, h, metrics, skipped)


def _finish(args, command, started, config, dataset, providers, outputs, extra=None):
    manifest = build_manifest(command, config, {"global": args.seed}, dataset.digest() if dataset else None,
                              providers, started, [str(o) for o in outputs], extra)
    path = _out(args, f"manifest-{command}.json")
    write_manifest(manifest, path)
    logger.info("wrote %s", path)


# -- commands ----------------------------------------------------------------

def cmd_ingest(args, started):
    dataset = load_dataset(args.dataset, args.format, source_vlm=args.source_vlm)
    stats = dataset_stats(dataset)
    out_data, out_stats, out_fig = _out(args, "dataset.jsonl"), _out(args, "stats.json"), _out(args, "distribution.png")
    save_dataset(dataset, out_data)
    summary = stats.as_dict()
    summary["deviations_from_reference"] = {k: {"observed": o, "expected": e}
                                            for k, (o, e) in stats.deviations().items()}
    with open(out_stats, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    plot_distribution(stats, out_fig)
    for k, (o, e) in stats.deviations().items():
        logger.warning("dataset differs from the reference cohort: %s = %s (reference %s)", k, o, e)
    print(json.dumps(summary))
    _finish(args, "ingest", started, {"dataset": args.dataset, "format": args.format}, dataset, {},
            [out_data, out_stats, out_fig])
    return EXIT_OK


def cmd_describe(args, started):
    dataset = load_dataset(args.dataset)
    pcfg = _provider_cfg(args)
    if pcfg.kind == "none":
        raise ValidationError("describe needs --provider chat or mock")
    out_desc = _out(args, "descriptions.jsonl")
    result = batch_describe(dataset, make_provider(pcfg), args.concurrency, out_desc)
    described = _with_descriptions(dataset, str(out_desc))
    out_data = _out(args, "dataset_described.jsonl")
    save_dataset(described, out_data)
    outputs = [out_desc, out_data]
    if result.failures:
        out_fail = _out(args, "describe_failures.json")
        with open(out_fail, "w", encoding="utf-8") as fh:
            json.dump(result.failures, fh, indent=2)
        outputs.append(out_fail)
    print(json.dumps({"described": len(result.results), "failed": len(result.failures),
                      "resumed": len(result.resumed)}))
    _finish(args, "describe", started, {"dataset": args.dataset, "concurrency": args.concurrency},
            dataset, {"vlm": pcfg.identity()}, outputs)
    return EXIT_RUNTIME if result.failures else EXIT_OK


def cmd_embed(args, started):
    dataset = _with_descriptions(load_dataset(args.dataset), args.descriptions)
    args.embeddings = None
    vectors, ecfg = _embeddings_for(args, dataset)
    out = _out(args, "embeddings.jsonl")
    save_embeddings(vectors.values(), out)
    print(json.dumps({"embedded": len(vectors), "file": str(out)}))
    _finish(args, "embed", started, {"dataset": args.dataset}, dataset, {"embedder": ecfg.identity()}, [out])
    return EXIT_OK


def cmd_eval(args, started):
    dataset = _with_descriptions(load_dataset(args.dataset), args.descriptions)
    vectors, ecfg = _embeddings_for(args, dataset)
    h = args.h if args.variant == ffnn.ALTERNATIVE else None
    cfg = _train_cfg(args, args.variant, h)
    result = run_loso(dataset, vectors, cfg, workers=args.workers)
    out_pred, out_csv, out_json = _out(args, "predictions.jsonl"), _out(args, "report.csv"), _out(args, "report.json")
    save_predictions(result.predictions, out_pred)
    row = _report_row(args, dataset, ecfg, args.variant, h, result.metrics, len(result.skipped_folds))
    write_report([row], out_csv)
    write_report([row], out_json)
    outputs = [out_pred, out_csv, out_json]
    if args.model_out:
        ids = [s.sample_id for s in dataset]
        import numpy as np

        report = ffnn.train(np.stack([vectors[i].values for i in ids]), [int(s.label) for s in dataset], cfg,
                            groups=[s.subject_id for s in dataset])
        ffnn.save_model(report.params, args.model_out, cfg)
        outputs.append(Path(args.model_out))
    print(json.dumps(row.rendered()))
    _finish(args, "eval", started, asdict(cfg), dataset, {"embedder": ecfg.identity()}, outputs,
            {"n_folds": result.n_folds, "skipped_folds": result.skipped_folds,
             "metrics": result.metrics.as_dict()})
    return EXIT_OK


def cmd_sweep(args, started):
    dataset = _with_descriptions(load_dataset(args.dataset), args.descriptions)
    vectors, ecfg = _embeddings_for(args, dataset)
    cfg = _train_cfg(args, ffnn.ALTERNATIVE, args.h[0])
    results = sensitivity_sweep(dataset, vectors, cfg, args.h, workers=args.workers)
    rows = [_report_row(args, dataset, ecfg, ffnn.ALTERNATIVE, r.h, r.metrics, r.n_folds_skipped) for r in results]
    out_csv, out_json, out_fig = _out(args, "sweep_report.csv"), _out(args, "sweep_report.json"), _out(args, "sweep.png")
    write_report(rows, out_csv)
    write_report(rows, out_json)
    plot_sweep({rows[0].model: results}, out_fig)
    outputs = [out_csv, out_json, out_fig]
    for r in results:
        if r.predictions:
            p = _out(args, f"sweep_predictions_h{r.h}.jsonl")
            save_predictions(r.predictions, p)
            outputs.append(p)
    for row in rows:
        print(json.dumps(row.rendered()))
    _finish(args, "sweep", started, {**asdict(cfg), "hidden_units": args.h}, dataset,
            {"embedder": ecfg.identity()}, outputs,
            {"errors": {str(r.h): r.error for r in results if r.error}})
    return EXIT_RUNTIME if all(r.error for r in results) else EXIT_OK


def cmd_zeroshot(args, started):
    dataset = load_dataset(args.dataset)
    outputs, providers = [], {}
    if args.verdicts:
        verdicts = load_verdicts(args.verdicts)
    else:
        pcfg = _provider_cfg(args)
        if pcfg.kind == "none":
            raise ValidationError("zeroshot needs --verdicts or --provider chat/mock")
        out_v = _out(args, "zeroshot_verdicts.jsonl")
        result = batch_zeroshot(dataset, make_provider(pcfg), args.concurrency, out_v)
        verdicts = result.results
        save_verdicts(verdicts, out_v)  # rewrite in dataset order
        outputs.append(out_v)
        providers["vlm"] = pcfg.identity()
        if result.failures:
            logger.warning("%d sample(s) without a usable verdict", len(result.failures))
    preds, metrics = zero_shot_eval(verdicts, dataset)
    out_pred, out_csv, out_json = (_out(args, "zeroshot_predictions.jsonl"), _out(args, "zeroshot_report.csv"),
                                   _out(args, "zeroshot_report.json"))
    save_predictions(preds, out_pred)
    row = ReportRow(args.vlm_model, "zero-shot", "zero-shot", None, metrics, 0)
    write_report([row], out_csv)
    write_report([row], out_json)
    outputs += [out_pred, out_csv, out_json]
    print(json.dumps(row.rendered()))
    _finish(args, "zeroshot", started, {"dataset": args.dataset, "verdicts": args.verdicts}, dataset, providers,
            outputs, {"metrics": metrics.as_dict(), "auc_note": "AUC over hard 0/1 verdicts"})
    return EXIT_OK


def _screener(args):
    from selfscreen.service import Screener

    vlm = None if args.provider == "none" else make_provider(_provider_cfg(args))
    embedder = make_embedder(_embed_cfg(args))
    return Screener.from_model_file(args.model, embedder, vlm, args.normalize)


def cmd_screen_once(args, started):
    from selfscreen.service import screen_once

    screener = _screener(args)
    try:
        resp = screen_once(screener, image=args.image, text=args.text)
    except StageError as exc:
        print(json.dumps({"code": "stage_error", "stage": exc.stage, "message": str(exc.cause)}), file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc.cause, (ValidationError, FileNotFoundError)) else EXIT_RUNTIME
    print(json.dumps(resp.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_serve(args, started):
    import uvicorn

    from selfscreen.service import create_app

    app = create_app(_screener(args), args.max_in_flight)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    except (OSError, SystemExit) as exc:
        logger.error("server stopped: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


HANDLERS = {
    "ingest": cmd_ingest,
    "describe": cmd_describe,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "zeroshot": cmd_zeroshot,
    "serve": cmd_serve,
    "screen-once": cmd_screen_once,
}


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = datetime.now(timezone.utc)
    try:
        return HANDLERS[args.command](args, started)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SelfscreenError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
