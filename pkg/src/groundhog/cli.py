"""``groundhog`` command line: gen-data, train, eval, ground and diagnose.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 numeric
failure during training. ``GROUNDHOG_LOG`` (error, info or debug) sets the
log verbosity on stderr and never changes any output file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluate
from .data.conversations import ConversationError, from_json, proposals_from_json
from .data.corpus import CorpusConfig, CorpusError, gen_corpus, read_corpus, task_counts, write_corpus
from .data.sampler import SamplerSpec, balance_sample
from .data.scenes import COLORS, Scene, gen_proposals
from .grounding import diagnosis_record
from .masks import Box, MaskError, ProposalSet, binarize, rle_encode
from .metrics import MetricError
from .model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model.decode import DEFAULT_MAX_NEW, decode
from .model.layout import LayoutError, prepare, prompt_example
from .model.optim import AdamState
from .model.params import TrainConfig, init_params
from .model.train import NumericError, train
from .model.vocab import Vocabulary, VocabError

log = logging.getLogger("groundhog")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PPM_SCALE = 4

# display colors of the eight entity colors; index 0 is the background
PALETTE = np.array([
    (40, 40, 40), (220, 40, 40), (240, 140, 30), (240, 220, 40), (40, 180, 60),
    (50, 90, 230), (140, 60, 190), (240, 130, 190), (245, 245, 245),
], dtype=np.uint8)
assert len(PALETTE) == len(COLORS) + 1


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("GROUNDHOG_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def _dump(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# -- gen-data -------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = CorpusConfig.from_dict(_read_json(args.config)) if args.config else CorpusConfig()
    convs = gen_corpus(cfg, args.n, args.seed)
    write_corpus(args.out, convs)
    counts = task_counts(convs)
    print(json.dumps({"n": len(convs), "seed": args.seed, "tasks": counts}, sort_keys=True))
    return EXIT_OK


# -- train ----------------------------------------------------------------------------------

def _train_config(args, base: Optional[TrainConfig]) -> tuple[TrainConfig, dict]:
    raw = _read_json(args.config) if args.config else {}
    ratios = raw.pop("ratios", {})
    cfg = base.replace(**raw) if base is not None else TrainConfig.from_dict(raw)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.query_mode:
        over["query_mode"] = args.query_mode
    if args.feature_mode:
        over["feature_mode"] = args.feature_mode
    return (cfg.replace(**over) if over else cfg), ratios


def _load_sources(paths: Sequence[str]) -> dict:
    sources: dict = {}
    for path in paths:
        for conv in read_corpus(path):
            sources.setdefault(conv.source, []).append(conv)
    return sources


def cmd_train(args) -> int:
    params = state = None
    vocab = Vocabulary()
    base = None
    if args.resume:
        params, state, base, vocab = load_checkpoint(args.resume)
    cfg, ratios = _train_config(args, base)
    sources = _load_sources(args.corpus)
    stream, warnings = balance_sample(sources, SamplerSpec(ratios, cfg.seed))
    for w in warnings:
        log.warning("sampler: %s", w)
    examples = [prepare(c, vocab, cfg.max_seq) for c in stream]
    if params is None:
        params = init_params(cfg, len(vocab))
        state = AdamState.zeros_like(params)
    out = Path(args.out_ckpt)
    out.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out / "train_log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode, encoding="utf-8") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        try:
            result = train(examples, cfg, len(vocab), params=params, state=state,
                           pad_id=vocab.pad, on_record=on_record)
        except NumericError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(out, result.params, result.state, cfg, vocab)
    last = result.records[-1] if result.records else {}
    print(json.dumps({"step": result.state.step, "examples": len(examples),
                      "final": {k: last.get(k) for k in ("lm", "dice", "bce", "proj", "total")}},
                     sort_keys=True))
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in evaluate.METRICS]
    if bad:
        raise UsageError(f"unknown metric(s) {bad}; choose from {list(evaluate.METRICS)}")
    convs = read_corpus(args.corpus)
    if args.from_predictions:
        records = []
        with open(args.from_predictions, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        records.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise CorpusError(f"invalid prediction record: {exc}", lineno) from exc
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt unless --from-predictions is given")
        params, _, cfg, vocab = load_checkpoint(args.ckpt)
        records = evaluate.predict(params, cfg, vocab, convs, args.max_new)
        if args.predictions:
            with open(args.predictions, "w", encoding="utf-8") as fh:
                for r in records:
                    fh.write(json.dumps(r, sort_keys=True) + "\n")
    report = evaluate.score(records, convs, metrics)
    _dump({"samples": len(convs), "metrics": report}, args.out)
    return EXIT_OK


# -- ground / diagnose ----------------------------------------------------------------------

def _load_scene(args) -> tuple[Scene, ProposalSet]:
    obj = _read_json(args.scene)
    try:
        if "turns" in obj:
            conv = from_json(obj)
            return conv.scene, conv.proposals
        scene = Scene.from_json(obj["scene"] if "scene" in obj else obj)
        if "proposals" in obj:
            return scene, proposals_from_json(obj["proposals"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{args.scene}: invalid scene file ({exc})") from exc
    # no proposals given: build the standard oracle-plus-distractor set
    return scene, gen_proposals(scene, CorpusConfig().perturb, [args.seed, 0])


def _pointers(specs: Sequence[str]):
    out = []
    for s in specs or ():
        try:
            out.append(Box.from_list([int(v) for v in s.split(",")]))
        except (ValueError, MaskError) as exc:
            raise UsageError(f"bad --pointer {s!r}: {exc}") from exc
    return out


def _run_decode(args):
    params, _, cfg, vocab = load_checkpoint(args.ckpt)
    scene, proposals = _load_scene(args)
    prompt = prompt_example(scene, proposals, args.text, vocab, cfg.max_seq,
                            pointers=_pointers(args.pointer))
    return scene, proposals, decode(params, cfg, vocab, prompt, proposals, args.max_new)


def cmd_ground(args) -> int:
    _, proposals, result = _run_decode(args)
    phrases = []
    for k, ph in enumerate(result.phrases):
        g = ph.grounded
        phrases.append({
            "phrase_id": f"{k}",
            "text": ph.text,
            "mask": rle_encode(binarize(g.mask)).to_json(),
            "selected": list(g.selected),
            "score_vector": [float(s) for s in g.scores],
        })
    _dump({"text": result.text, "phrases": phrases, "warnings": result.warnings}, args.out)
    return EXIT_OK


def _base_image(scene: Scene) -> np.ndarray:
    return PALETTE[scene.color_raster()].astype(np.float64)


def _overlay(base: np.ndarray, mask: np.ndarray, rgb) -> np.ndarray:
    img = base.copy()
    img[mask] = 0.4 * img[mask] + 0.6 * np.asarray(rgb, dtype=np.float64)
    return img


def write_ppm(path, img: np.ndarray, scale: int = PPM_SCALE) -> None:
    """Binary P6 NetPBM image, nearest-neighbour upscaled by ``scale``."""
    arr = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    arr = arr.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def cmd_diagnose(args) -> int:
    if args.topk < 1:
        raise UsageError("--topk must be at least 1")
    scene, proposals, result = _run_decode(args)
    notices = []
    if args.topk > len(proposals):
        notices.append(f"--topk {args.topk} exceeds {len(proposals)} proposals; clamped")
        print(f"notice: {notices[-1]}", file=sys.stderr)
    records = []
    ppm_dir = Path(args.ppm_dir) if args.ppm_dir else None
    if ppm_dir:
        ppm_dir.mkdir(parents=True, exist_ok=True)
    base = _base_image(scene)
    for k, ph in enumerate(result.phrases):
        rec = diagnosis_record(ph.text, ph.grounded, proposals, args.topk)
        rec["phrase_id"] = k
        if ppm_dir:
            images = []
            for rank, entry in enumerate(rec["topk"]):
                color = (0, 230, 0) if entry["selected"] else (230, 0, 0)
                name = f"phrase{k}_rank{rank}_q{entry['index']}.ppm"
                write_ppm(ppm_dir / name, _overlay(base, proposals.binary(entry["index"]).bits, color))
                images.append(name)
            name = f"phrase{k}_merged.ppm"
            write_ppm(ppm_dir / name, _overlay(base, binarize(ph.grounded.mask).bits, (0, 230, 0)))
            rec["images"] = images + [name]
        records.append(rec)
    _dump({"text": result.text, "phrases": records, "warnings": result.warnings,
           "notices": notices}, args.out)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groundhog", description="Toy grounded multimodal LM toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic conversation corpus")
    g.add_argument("--config", help="corpus config JSON (defaults if omitted)")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the toy model")
    t.add_argument("--corpus", required=True, nargs="+", help="one or more corpus JSONL files")
    t.add_argument("--config", help="JSON of TrainConfig overrides plus optional 'ratios'")
    t.add_argument("--out-ckpt", required=True, help="checkpoint directory to write")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--log", help="loss log JSONL (default: <out-ckpt>/train_log.jsonl)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--query-mode", choices=("start_only", "end_only", "sum"))
    t.add_argument("--feature-mode", choices=("A", "B", "A+B"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode a corpus and report metrics")
    e.add_argument("--ckpt")
    e.add_argument("--corpus", required=True)
    e.add_argument("--metrics", default=",".join(evaluate.METRICS))
    e.add_argument("--predictions", help="write prediction records (JSONL) here")
    e.add_argument("--from-predictions", help="score an existing prediction file instead")
    e.add_argument("--max-new", type=int, default=DEFAULT_MAX_NEW)
    e.add_argument("--out", help="report path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ground", cmd_ground, "ground one utterance"),
                                 ("diagnose", cmd_diagnose, "inspect proposal scores")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--ckpt", required=True)
        c.add_argument("--scene", required=True,
                       help="scene JSON, {scene, proposals} JSON, or one corpus record")
        c.add_argument("--text", required=True)
        c.add_argument("--pointer", action="append", help="box x0,y0,x1,y1 for each <PTR>")
        c.add_argument("--seed", type=int, default=0, help="proposal seed if none are given")
        c.add_argument("--max-new", type=int, default=DEFAULT_MAX_NEW)
        c.add_argument("--out", help="JSON output path (default: stdout)")
        if name == "diagnose":
            c.add_argument("--topk", type=int, default=4)
            c.add_argument("--ppm-dir", help="write P6 overlays here")
        c.set_defaults(func=func)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help; return the code instead of exiting
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ConversationError, CheckpointError, LayoutError, VocabError,
            MetricError, MaskError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    """Console-script wrapper that turns the return code into the exit status."""
    sys.exit(main())


if __name__ == "__main__":
    entry()
