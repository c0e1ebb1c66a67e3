"""Command-line entry point: gen-data, train, eval, embed, ablate.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Relative output paths resolve under $GLYPHREID_OUT when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, model_config_for_corpus
from .corpus import generate_corpus, load_corpus, save_corpus
from .errors import ConfigError, DataError, NumericError
from .model import load_checkpoint
from .retrieval import embed_gallery, evaluate_retrieval
from .trainer import TrainConfig, ablate, train

OUTPUT_ROOT_ENV = "GLYPHREID_OUT"


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _write_manifest(out_dir: Path, command: str, cfg, corpus_fingerprint: str | None, outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg.echo(),
        "corpus_fingerprint": corpus_fingerprint,
        "code_version": __version__,
        "outputs": outputs,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2))


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _resolve_out(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"refusing to overwrite non-empty {out} (use --force)", file=sys.stderr)
        return 3
    _write_manifest(out, "gen-data", cfg, None, [str(out)])
    corpus = generate_corpus(cfg.corpus)
    save_corpus(corpus, out)
    fp = corpus.fingerprint()
    (out / "fingerprint.txt").write_text(fp + "\n")
    print(f"wrote corpus to {out} (fingerprint {fp[:16]})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    corpus = load_corpus(args.corpus)
    out = _resolve_out(args.out)
    _write_manifest(out, "train", cfg, corpus.fingerprint(), [str(out)])
    model_cfg = model_config_for_corpus(cfg.model, corpus)
    summary = train(model_cfg, cfg.train, corpus, out, resume_from=args.resume)
    print(f"trained {summary['steps']} steps; checkpoint at {summary['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    corpus = load_corpus(args.corpus)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    out = _resolve_out(args.out)
    _write_manifest(out, "eval", cfg, corpus.fingerprint(), [str(out / "metrics.json")])
    metrics = evaluate_retrieval(
        model, corpus, cfg.eval.split, k=cfg.eval.shortlist_k,
        use_raw_cls=cfg.eval.use_raw_cls,
    )
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2))
    print(json.dumps({k: v for k, v in metrics.to_dict().items() if k != "per_query_ap"}))
    return 0


def cmd_embed(args) -> int:
    cfg = load_config(args.config, args.set)
    corpus = load_corpus(args.corpus)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    out = _resolve_out(args.out)
    _write_manifest(out, "embed", cfg, corpus.fingerprint(), [str(out / "embeddings.npz")])
    images = corpus.split_images(cfg.eval.split)
    gallery = embed_gallery(
        model,
        np.stack([im.pixels for im in images]),
        np.array([im.image_id for im in images]),
        np.array([im.identity_id for im in images]),
    )
    np.savez(
        out / "embeddings.npz",
        image_ids=gallery.image_ids,
        identity_ids=gallery.identity_ids,
        projections=gallery.proj.numpy(),
    )
    print(f"wrote {len(gallery)} embeddings to {out / 'embeddings.npz'}")
    return 0


ABLATION_PRESETS = {
    "cl": dict(enable_itm=False, enable_prd=False, enable_mlm=False, rtd_generator="off"),
    "cl+itm": dict(positive_mode="uniform_all", enable_prd=False, enable_mlm=False, rtd_generator="off"),
    "cl+s-itm": dict(positive_mode="strong_only", enable_prd=False, enable_mlm=False, rtd_generator="off"),
    "cl+p-itm": dict(enable_prd=False, enable_mlm=False, rtd_generator="off"),
    "cl+ra": dict(enable_mlm=False, rtd_generator="off"),
    "cl+ra+mlm": dict(rtd_generator="off"),
    "cl+ra+sa(f-rtd)": dict(rtd_generator="frozen"),
    "cl+ra+sa(o-rtd)": dict(rtd_generator="online"),
    "cl+ra+sa": dict(rtd_generator="momentum"),
}


def ablation_rows(base: TrainConfig, names: list[str]) -> dict[str, TrainConfig]:
    rows = {}
    for name in names:
        if name not in ABLATION_PRESETS:
            raise ConfigError(
                f"unknown ablation row {name!r}; choose from {sorted(ABLATION_PRESETS)}"
            )
        rows[name] = replace(base, **ABLATION_PRESETS[name])
    return rows


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    corpus = load_corpus(args.corpus)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "ablate", cfg, corpus.fingerprint(), [str(out / "ablation.tsv")])
    names = args.rows.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    model_cfg = model_config_for_corpus(cfg.model, corpus)
    rows = ablation_rows(cfg.train, names)
    results = ablate(
        rows, model_cfg, corpus, seeds,
        out_path=out / "ablation.tsv",
        eval_split=cfg.eval.split,
        shortlist_k=cfg.eval.shortlist_k,
    )
    for row in results:
        print(f"{row['name']}: R@1={row['median']['r1']:.2f} mAP={row['median']['map']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glyphreid")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=False, checkpoint=False):
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", required=True)
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gen-data", help="generate and persist a synthetic corpus")
    common(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p, corpus=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    common(p, corpus=True, checkpoint=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export gallery embeddings")
    common(p, corpus=True, checkpoint=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("ablate", help="train/evaluate a grid of objective configurations")
    common(p, corpus=True)
    p.add_argument("--rows", default="cl,cl+ra,cl+ra+sa")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(json.dumps({"error": "config", "message": str(e)}), file=sys.stderr)
        return 2
    except DataError as e:
        print(json.dumps({"error": "data", "message": str(e)}), file=sys.stderr)
        return 3
    except NumericError as e:
        print(json.dumps({"error": "numeric", "message": str(e)}), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
