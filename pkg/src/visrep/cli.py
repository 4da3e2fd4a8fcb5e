"""Command line front end.

Subcommands cover the whole loop: generate a corpus, train, evaluate
retrieval, dump embeddings, scale an architecture, probe attention. All
state flows through the run directory: `train` writes a resolved config
snapshot there before any compute, and the read-only commands rebuild
the model from that snapshot plus the saved checkpoint, so results are
reproducible from the directory alone.

Exit codes: 0 success, 2 configuration or input problems, 3 capability
mismatch (asking a model for something it cannot do), 4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .arch import ScalingCoefficients, build_backbone, compound_scale
from .assembly import ModelGraph, assemble
from .config import (
    RunConfig,
    derive_seed,
    load_config,
    save_config,
)
from .data import DatasetManifest, decode_image, load_manifest
from .errors import CapabilityError, ConfigError, NumericalAbort, VisRepError
from .probe import attention_heatmaps, export_heatmap_overlay
from .retrieval import (
    RetrievalDataset,
    epoch_callback,
    evaluate_retrieval,
    embed_manifest,
    load_retrieval_manifest,
    summary_table,
)
from .synthetic import CorpusPaths, CorpusSpec, generate_corpus
from .train import train
from .vrt import load_checkpoint, save_checkpoint, write_tensor

__all__ = ["main"]


# ---------------------------------------------------------------------------
# shared assembly helpers


def _corpus_paths(cfg: RunConfig, out: Path) -> CorpusPaths:
    """Generate the synthetic corpus under the run dir, or reuse it if present."""
    corpus_dir = out / "corpus"
    spec = CorpusSpec(
        n_listings=cfg.data.n_listings,
        image_size=cfg.data.image_size,
        seed=derive_seed(cfg.seed, "data"),
        queries_per_listing=cfg.data.queries_per_listing,
    )
    # regeneration with the same seed is bit-identical, so a missing corpus
    # (fresh run dir) and an existing one (evaluate after train) converge
    return generate_corpus(corpus_dir, spec)


def _training_manifests(cfg: RunConfig, out: Path) -> list[DatasetManifest]:
    if cfg.data.synthetic:
        paths = _corpus_paths(cfg, out)
        if cfg.train.regime == "triplet":
            chosen = [paths.triplet_manifest]
        elif cfg.train.regime == "single_task":
            chosen = [paths.task_manifests["shape"]]
        else:
            chosen = list(paths.task_manifests.values())
    else:
        if not cfg.data.manifests:
            raise ConfigError("data.manifests is empty and data.synthetic is false")
        chosen = [Path(p) for p in cfg.data.manifests]
    return [load_manifest(p) for p in chosen]


def _retrieval_datasets(cfg: RunConfig, out: Path) -> list[RetrievalDataset]:
    if cfg.eval.retrieval:
        paths = [Path(p) for p in cfg.eval.retrieval]
    elif cfg.data.synthetic:
        paths = list(_corpus_paths(cfg, out).retrieval_manifests.values())
    else:
        return []
    return [load_retrieval_manifest(p) for p in paths]


def _build_model(cfg: RunConfig, datasets: list[DatasetManifest]) -> ModelGraph:
    tasks: list[tuple[str, int]] = []
    if cfg.train.regime != "triplet":
        seen = set()
        for ds in datasets:
            if ds.task_name not in seen:
                seen.add(ds.task_name)
                tasks.append((ds.task_name, ds.num_classes))
    return assemble(
        cfg.model.to_arch_spec(),
        derive_seed(cfg.seed, "init"),
        embed_dim=cfg.model.embed_dim,
        head_style=cfg.model.head_style,
        tasks=tasks or None,
        normalize=cfg.model.normalize,
    )


def _restore_run(run_dir: str | Path) -> tuple[RunConfig, Path, ModelGraph]:
    """Rebuild the trained model from a run directory's snapshot + checkpoint."""
    out = Path(run_dir)
    snapshot = out / "resolved.cfg"
    if not snapshot.is_file():
        raise ConfigError(f"{snapshot}: no resolved config; is this a run directory?")
    # the snapshot already holds the resolved seed; no env override here
    cfg = load_config(snapshot, apply_env=False)
    datasets = _training_manifests(cfg, out)
    model = _build_model(cfg, datasets)
    ckpt = out / "checkpoint"
    if not ckpt.is_dir():
        raise ConfigError(f"{ckpt}: no checkpoint saved for this run")
    model.load_state_arrays(load_checkpoint(ckpt))
    model.set_mode(False)
    return cfg, out, model


def _write_reports(reports, path: Path) -> None:
    lines = [json.dumps(r.record(), sort_keys=True) for r in reports]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    # the snapshot lands before any compute so a crashed run is still auditable
    save_config(cfg, out / "resolved.cfg")

    datasets = _training_manifests(cfg, out)
    model = _build_model(cfg, datasets)
    retrieval = _retrieval_datasets(cfg, out)
    ks = tuple(cfg.eval.ks)
    hooks = [epoch_callback(retrieval, ks)] if retrieval else []

    plan = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, "sampler"))
    model, log = train(model, datasets, plan, eval_hooks=hooks, snapshot_dir=out)

    save_checkpoint(out / "checkpoint", model.state_arrays())
    log.write(out / "train_log.jsonl")

    if retrieval:
        reports = evaluate_retrieval(model, retrieval, ks)
        _write_reports(reports, out / "reports.jsonl")
        table = summary_table(reports)
        (out / "recall_summary.txt").write_text(table + "\n", encoding="utf-8")
        print(table)
    from .report import render_recall_figure, render_training_figures

    figures = render_training_figures(log, out)
    if retrieval:
        figures.append(render_recall_figure(reports, out / "recall_final.png"))

    print(f"run_dir\t{out}")
    print(f"steps\t{len(log.steps)}")
    print(f"epochs\t{len(log.epochs)}")
    for fig in figures:
        print(f"figure\t{fig}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, out, model = _restore_run(args.run)
    if args.dataset:
        datasets = [load_retrieval_manifest(p) for p in args.dataset]
    else:
        datasets = _retrieval_datasets(cfg, out)
    if not datasets:
        raise ConfigError("no retrieval datasets to evaluate")
    ks = tuple(args.ks) if args.ks else tuple(cfg.eval.ks)

    reports = evaluate_retrieval(model, datasets, ks)
    _write_reports(reports, out / "eval_reports.jsonl")
    from .report import render_recall_figure

    fig = render_recall_figure(reports, out / "eval_recall.png")
    print(summary_table(reports))
    print(f"figure\t{fig}")
    return 0


def cmd_embed(args) -> int:
    _, _, model = _restore_run(args.run)
    manifest = load_manifest(args.manifest)
    matrix, ids = embed_manifest(model, manifest)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out_path, matrix)
    sidecar = out_path.with_suffix(out_path.suffix + ".ids")
    sidecar.write_text("\n".join(ids) + "\n", encoding="utf-8")
    print(f"embeddings\t{out_path}\t{matrix.shape[0]}x{matrix.shape[1]}")
    print(f"ids\t{sidecar}")
    return 0


def cmd_scale(args) -> int:
    cfg = load_config(args.config)
    base = cfg.model.to_arch_spec()
    coeff = ScalingCoefficients(args.alpha, args.beta, args.gamma, args.exponent)
    scaled = compound_scale(base, coeff)
    count = build_backbone(scaled, rng_seed=0).param_count()

    h, w, c = scaled.input_size
    print(f"family\t{scaled.family}")
    print(f"input_size\t{h}x{w}x{c}")
    print(f"depth_per_stage\t{','.join(str(d) for d in scaled.depth_per_stage)}")
    print(f"width_per_stage\t{','.join(str(v) for v in scaled.width_per_stage)}")
    print(f"stages\t{scaled.stages}")
    if scaled.family == "vit":
        print(f"heads\t{scaled.heads}")
        print(f"patch_size\t{scaled.patch_size}")
    print(f"param_count\t{count}")
    return 0


def cmd_probe(args) -> int:
    _, _, model = _restore_run(args.run)
    image = decode_image(args.image)
    block = args.block if args.block == "last" else int(args.block)
    bundle = attention_heatmaps(model, image, block=block, axis=args.axis)

    out_dir = Path(args.out)
    paths = export_heatmap_overlay(image, bundle, out_dir)
    if args.figure:
        from .report import render_heatmap_figure

        paths.append(render_heatmap_figure(bundle, out_dir / "heatmaps.png"))
    print(f"layer\t{bundle.layer_index}")
    print(f"heads\t{bundle.per_head.shape[0]}")
    for p in paths:
        print(f"file\t{p}")
    return 0


def cmd_gen_data(args) -> int:
    spec = CorpusSpec(
        n_listings=args.listings,
        image_size=args.image_size,
        seed=args.seed,
        queries_per_listing=args.queries_per_listing,
    )
    paths = generate_corpus(args.out, spec)
    for task, p in paths.task_manifests.items():
        print(f"task\t{task}\t{p}")
    print(f"triplets\t{paths.triplet_manifest}")
    for name, p in paths.retrieval_manifests.items():
        print(f"retrieval\t{name}\t{p}")
    print(f"query_log\t{paths.query_log}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visrep",
        description="train, evaluate and probe small visual embedding models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config", help="path to a run config")
    p.add_argument("--output-dir", help="override the config's output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recall@K over a trained run")
    p.add_argument("--run", required=True, help="run directory from a train invocation")
    p.add_argument(
        "--dataset",
        action="append",
        default=[],
        help="retrieval manifest path (repeatable; default: the run's datasets)",
    )
    p.add_argument("--ks", type=int, nargs="+", help="cutoffs, e.g. --ks 5 10")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", help="write embeddings for a manifest")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True, help="labeled dataset manifest")
    p.add_argument("--out", required=True, help="output tensor path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("scale", help="apply compound scaling to a base model")
    p.add_argument("config", help="config providing the base model")
    p.add_argument("--alpha", type=float, required=True, help="depth base")
    p.add_argument("--beta", type=float, required=True, help="width base")
    p.add_argument("--gamma", type=float, required=True, help="resolution base")
    p.add_argument("-n", "--exponent", type=float, default=0.0)
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("probe", help="attention heatmaps for one image")
    p.add_argument("--run", required=True)
    p.add_argument("--image", required=True, help="image file to probe")
    p.add_argument("--out", required=True, help="directory for overlays")
    p.add_argument("--block", default="last", help="'last' or a block index")
    p.add_argument("--axis", choices=("query", "key"), default="query")
    p.add_argument("--figure", action="store_true", help="also render a panel figure")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gen-data", help="generate a synthetic product-photo corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--listings", type=int, default=60)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queries-per-listing", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as e:
        print(f"error: {e} (step {e.step})", file=sys.stderr)
        return 4
    except CapabilityError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except VisRepError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
