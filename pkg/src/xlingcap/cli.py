"""Command-line entry point.

Subcommands: gen-data, train-phase1, train-phase2, infer, eval, parse,
stats, gradcheck.  Every command resolves one JSON config (defaults,
optionally overlaid by --config and --set key=value), runs, and writes its
outputs plus a manifest.json recording the resolved config, its hash, the
seed and wall time.  Outputs are bit-reproducible given the same config and
seed; wall time in the manifest is the only volatile field.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure.  Failures
print a machine-readable JSON object to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__
from .config import (RunConfig, apply_overrides, config_from_dict,
                     config_to_dict)
from .errors import ContractError, FormatError, XlingcapError

log = logging.getLogger("xlingcap")


def _setup_logging() -> None:
    level = os.environ.get("UNISON_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


class UsageError(Exception):
    """Bad flag or config; maps to exit code 2."""


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(args) -> tuple[RunConfig, dict]:
    try:
        data = config_to_dict(RunConfig())
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                try:
                    overlay = json.load(fh)
                except json.JSONDecodeError as err:
                    raise FormatError(f"{args.config}: invalid JSON: {err}")
            if not isinstance(overlay, dict):
                raise FormatError(f"{args.config}: config root must be an object")
            data = _deep_merge(data, overlay)
        if args.set:
            data = apply_overrides(data, args.set)
        if args.seed is not None:
            data["seed"] = args.seed
            data.setdefault("world", {})["seed"] = args.seed
        cfg = config_from_dict(data)
    except (FormatError, ContractError, OSError) as err:
        raise UsageError(f"{type(err).__name__}: {err}") from err
    return cfg, data


def config_hash(data: dict) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(out_dir, command: str, cfg_data: dict, seed: int,
                   started: float, inputs: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "config": cfg_data,
        "config_hash": config_hash(cfg_data),
        "seed": seed,
        "version": __version__,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "wall_time_s": round(time.time() - started, 3),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _ensure_out(args) -> str:
    if not args.out:
        raise UsageError("--out DIR is required for this command")
    os.makedirs(args.out, exist_ok=True)
    return args.out


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthworld import (generate_image_graphs, generate_parallel_corpus,
                             generate_world, save_world, write_corpus,
                             write_image_bank)
    cfg, cfg_data = resolve_config(args)
    out = _ensure_out(args)
    started = time.time()
    world = generate_world(cfg.world)
    save_world(os.path.join(out, "world"), world)
    outputs = ["world/world.json", "world/source_embeddings.txt",
               "world/target_embeddings.txt"]
    for split, n, salt in (("train", cfg.world.n_train, 1),
                           ("val", cfg.world.n_val, 2),
                           ("test", cfg.world.n_test, 3)):
        corpus = generate_parallel_corpus(world, n, salt=salt)
        write_corpus(os.path.join(out, f"{split}.jsonl"), corpus)
        outputs.append(f"{split}.jsonl")
        log.info("wrote %s with %d items", split, n)
    bank = generate_image_graphs(world, cfg.world.n_images)
    write_image_bank(os.path.join(out, "images"), bank)
    outputs += ["images/images.jsonl", "images/references.jsonl"]
    write_manifest(out, "gen-data", cfg_data, cfg.seed, started, {}, outputs)
    print(f"gen-data: world + {cfg.world.n_train}/{cfg.world.n_val}/"
          f"{cfg.world.n_test} corpus + {cfg.world.n_images} images -> {out}")
    return 0


def cmd_train_phase1(args) -> int:
    from .synthworld import load_world, read_corpus
    from .training import save_phase1_checkpoint, train_phase1
    cfg, cfg_data = resolve_config(args)
    out = _ensure_out(args)
    started = time.time()
    world = load_world(os.path.join(args.data, "world"))
    corpus = read_corpus(os.path.join(args.data, "train.jsonl"))

    def progress(rec):
        log.info("phase1 epoch %d xe/token %.4f kl %s", rec["epoch"],
                 rec["xe_per_token"], rec["kl"])

    result = train_phase1(world, corpus, cfg.model, cfg.phase1, cfg.seed,
                          progress=progress)
    ckpt = os.path.join(out, "checkpoint")
    save_phase1_checkpoint(ckpt, result.model, world, cfg.phase1, cfg.seed,
                           extra={"final_kl": result.final_kl})
    with open(os.path.join(out, "training_log.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"history": result.history, "final_kl": result.final_kl,
                   "final_xe_per_token": result.final_xe_per_token},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "train-phase1", cfg_data, cfg.seed, started,
                   {"data": args.data}, ["checkpoint", "training_log.json"])
    print(f"train-phase1: xe/token {result.final_xe_per_token:.4f}, "
          f"final kl {result.final_kl:.4f} -> {ckpt}")
    return 0


def cmd_train_phase2(args) -> int:
    from .synthworld import ImageBank, load_world, read_corpus, read_image_graphs
    from .training import (load_phase1_model, save_phase2_checkpoint,
                           train_phase2)
    cfg, cfg_data = resolve_config(args)
    out = _ensure_out(args)
    started = time.time()
    world = load_world(os.path.join(args.data, "world"))
    corpus = read_corpus(os.path.join(args.data, "train.jsonl"))
    graphs = read_image_graphs(os.path.join(args.data, "images",
                                            "images.jsonl"))
    bank = ImageBank(graphs=graphs, references=[], clean_graphs=[])
    model, _ = load_phase1_model(args.ckpt)

    def progress(rec):
        log.info("phase2 epoch %d cycle %s", rec["epoch"], rec["cycle"])

    result = train_phase2(world, bank, corpus, model, cfg.phase2, cfg.seed,
                          progress=progress)
    ckpt = os.path.join(out, "checkpoint")
    save_phase2_checkpoint(ckpt, model, result.cmm, world, cfg.phase1,
                           cfg.phase2, cfg.seed, result.frozen_checksum)
    with open(os.path.join(out, "training_log.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"history": result.history,
                   "final_cycle_per_dim": result.final_cycle_per_dim,
                   "frozen_checksum": result.frozen_checksum},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "train-phase2", cfg_data, cfg.seed, started,
                   {"data": args.data, "ckpt": args.ckpt},
                   ["checkpoint", "training_log.json"])
    print(f"train-phase2: cycle/dim {result.final_cycle_per_dim:.5f} -> {ckpt}")
    return 0


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .synthworld import load_world, materialize_distortion, read_image_graphs
    from .training import infer_caption, load_phase1_model, load_phase2
    cfg, cfg_data = resolve_config(args)
    out = _ensure_out(args)
    started = time.time()
    world = load_world(os.path.join(args.data, "world"))
    images = args.images or os.path.join(args.data, "images", "images.jsonl")
    graphs = read_image_graphs(images)
    _, manifest = load_checkpoint(args.ckpt)
    if manifest.get("kind") == "phase2":
        model, cmm, _ = load_phase2(args.ckpt)
    else:
        model, _ = load_phase1_model(args.ckpt)
        cmm = None
    distortion = materialize_distortion(world.config.distortion,
                                        model.cfg.d_emb, world.seed)
    preds_path = os.path.join(out, "predictions.jsonl")
    with open(preds_path, "w", encoding="utf-8") as fh:
        for i, graph in enumerate(graphs):
            tokens = infer_caption(model, graph, cmm, distortion,
                                   beam=cfg.infer.beam,
                                   use_cmm=cfg.infer.use_cmm)
            fh.write(json.dumps({"id": i, "tokens": tokens},
                                separators=(",", ":")) + "\n")
            if i and i % 100 == 0:
                log.info("decoded %d/%d", i, len(graphs))
    write_manifest(out, "infer", cfg_data, cfg.seed, started,
                   {"data": args.data, "ckpt": args.ckpt, "images": images},
                   ["predictions.jsonl"])
    print(f"infer: {len(graphs)} captions -> {preds_path}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate, read_token_lines, write_report
    cfg, cfg_data = resolve_config(args)
    out = _ensure_out(args)
    started = time.time()
    preds = read_token_lines(args.preds)
    refs = read_token_lines(args.refs)
    missing = sorted(set(preds) - set(refs))
    if missing:
        raise ContractError(f"predictions id {missing[0]} has no references")
    ids = sorted(preds)
    candidates = [preds[i][0] for i in ids]
    references = [refs[i] for i in ids]
    report = evaluate(candidates, references)
    write_report(report, os.path.join(out, "report.json"),
                 os.path.join(out, "report.csv"))
    write_manifest(out, "eval", cfg_data, cfg.seed, started,
                   {"preds": args.preds, "refs": args.refs},
                   ["report.json", "report.csv"])
    scores = " ".join(f"{k}={v:.4f}" for k, v in
                      sorted(report.corpus_scores.items()))
    print(f"eval: {scores}")
    return 0


def cmd_parse(args) -> int:
    from .scenegraph import parse_sentence, serialize
    from .synthworld import load_world
    cfg, cfg_data = resolve_config(args)
    out = _ensure_out(args)
    started = time.time()
    world = load_world(os.path.join(args.data, "world"))
    out_path = os.path.join(out, "graphs.jsonl")
    count = 0
    with open(args.input, encoding="utf-8") as src, \
            open(out_path, "w", encoding="utf-8") as dst:
        for line in src:
            line = line.strip()
            if not line:
                continue
            graph = parse_sentence(line.split(), world.grammar)
            dst.write(serialize(graph) + "\n")
            count += 1
    write_manifest(out, "parse", cfg_data, cfg.seed, started,
                   {"data": args.data, "input": args.input}, ["graphs.jsonl"])
    print(f"parse: {count} sentences -> {out_path}")
    return 0


def cmd_stats(args) -> int:
    from .scenegraph import graph_stats, read_jsonl
    from .synthworld import read_corpus
    cfg, cfg_data = resolve_config(args)
    out = _ensure_out(args)
    started = time.time()
    try:
        graphs = read_jsonl(args.input)
    except FormatError:
        graphs = [item.graph for item in read_corpus(args.input).items]
    buckets = graph_stats(graphs)
    doc = {"n_graphs": len(graphs),
           "objects_per_graph": {"0": buckets[0], "1": buckets[1],
                                 "2": buckets[2], ">=3": buckets[3]}}
    with open(os.path.join(out, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "stats", cfg_data, cfg.seed, started,
                   {"input": args.input}, ["stats.json"])
    print(f"stats: 0/1/2/>=3 objects = {buckets[0]:.3f}/{buckets[1]:.3f}/"
          f"{buckets[2]:.3f}/{buckets[3]:.3f} over {len(graphs)} graphs")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_suite, run_suite
    cfg, cfg_data = resolve_config(args)
    out = _ensure_out(args)
    started = time.time()
    entries = run_suite(seed=cfg.seed)
    table = format_suite(entries)
    print(table)
    with open(os.path.join(out, "gradcheck.json"), "w", encoding="utf-8") as fh:
        json.dump({"entries": [dataclasses.asdict(e) for e in entries],
                   "passed": all(e.passed for e in entries)},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "gradcheck", cfg_data, cfg.seed, started, {},
                   ["gradcheck.json"])
    return 0 if all(e.passed for e in entries) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xlingcap",
        description="Unpaired cross-lingual captioning on a synthetic world")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (JSON value)")

    p = sub.add_parser("gen-data", help="generate world, corpora, image bank")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-phase1", help="joint cross-lingual training")
    common(p)
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.set_defaults(fn=cmd_train_phase1)

    p = sub.add_parser("train-phase2", help="cross-modal adversarial mapping")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="phase-1 checkpoint")
    p.set_defaults(fn=cmd_train_phase2)

    p = sub.add_parser("infer", help="caption image graphs")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", help="graph JSON-lines (default: data images)")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against references")
    common(p)
    p.add_argument("--preds", required=True)
    p.add_argument("--refs", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("parse", help="parse toy sentences into graphs")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--input", required=True, help="text file, one sentence/line")
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("stats", help="object-count histogram of a corpus")
    common(p)
    p.add_argument("--input", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as err:
        json.dump({"error": "UsageError", "message": str(err)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except XlingcapError as err:
        json.dump({"error": type(err).__name__, "message": str(err)},
                  sys.stderr)
        sys.stderr.write("\n")
        return 1
    except OSError as err:
        json.dump({"error": "OSError", "message": str(err)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
