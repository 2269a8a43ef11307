"""Command-line entry point: ``captioner <subcommand> [flags]``.

Exit codes: 0 success, 2 bad flags, 3 input/output failure (unreadable,
unparsable or corrupt files), 4 contract violation (invalid values,
mismatched models, training divergence), 5 gradient check failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint, datagen, inference, metrics
from .errors import CheckpointError, ContractViolation, DataFormatError, TrainingDiverged
from .model import ModelDims, ModelParams, backward_caption, forward_caption
from .numerics import finite_diff_gradcheck, make_rng
from .training import TrainConfig, read_config_file, train
from .vocab import START_ID, STOP_ID, build_vocabulary

EXIT_OK, EXIT_FLAGS, EXIT_IO, EXIT_CONTRACT, EXIT_GRADCHECK = 0, 2, 3, 4, 5
DEFAULT_BEAMS = (1, 2, 3, 5, 10, 20)

log = logging.getLogger("captioner")


def _csv(cast):
    def parse(text):
        try:
            return tuple(cast(x) for x in text.split(",") if x.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad comma-separated list: {text!r}") from None
    return parse


def _held_out(text):
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise argparse.ArgumentTypeError(f"held-out entries look like axis=value[,axis=value]: {text!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _announce(command, effective, seed=None):
    print(json.dumps({"command": command, "seed": seed, "config": effective}, sort_keys=True, default=str),
          file=sys.stderr)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_models(paths):
    models, vocab = [], None
    for path in paths:
        params, v, _ = checkpoint.load_checkpoint(path, expected_vocab=vocab)
        if models and params.dims != models[0].dims:
            raise ContractViolation(f"{path}: dims {params.dims} differ from {models[0].dims}")
        models.append(params)
        vocab = vocab or v
    return models, vocab


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    base = datagen.SceneSpec()
    spec = datagen.SceneSpec(
        subjects=args.subjects or base.subjects,
        colors=args.colors or base.colors,
        actions=args.actions or base.actions,
        locations=args.locations or base.locations,
        noise=base.noise if args.noise is None else args.noise,
        captions_per_scene=args.captions_per_scene or base.captions_per_scene,
        split=args.split or base.split,
        held_out=[] if args.no_held_out else (args.held_out or base.held_out),
    )
    _announce("gen-data", vars(spec), args.seed)
    splits = datagen.generate_dataset(spec, make_rng(args.seed))
    os.makedirs(args.out_dir, exist_ok=True)
    for name, examples in splits.items():
        datagen.save_dataset(examples, os.path.join(args.out_dir, f"{name}.jsonl"))
    print(json.dumps({name: len(ex) for name, ex in splits.items()}, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    overlay = read_config_file(args.config) if args.config else {}
    for key in TrainConfig().to_flat():
        value = getattr(args, key)
        if value is not None:
            overlay[key] = value
    base = TrainConfig.full_scale() if args.full_scale else TrainConfig()
    config = TrainConfig.from_flat(overlay, base=base)
    _announce("train", config.to_flat(), config.seed)

    data = datagen.load_dataset(args.data)
    params, start = None, 0
    if args.init:
        params, vocab, start = checkpoint.load_checkpoint(args.init)
    else:
        vocab = build_vocabulary([c for ex in data for c in ex.captions], config.min_token_count)
    if args.vocab_out:
        vocab.save(args.vocab_out)

    sink_file = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        def sink(rec):
            if sink_file:
                sink_file.write(rec.to_json() + "\n")
                sink_file.flush()
            log.info("step %d loss %.4f eps %.3f %s", rec.step, rec.mean_loss, rec.epsilon, rec.phase)
        params, tlog = train(config, data, vocab, params=params, start_step=start, log_sink=sink)
    finally:
        if sink_file:
            sink_file.close()
    checkpoint.save_checkpoint(params, vocab, max(start, config.total_steps), args.out)
    last = tlog.records[-1].mean_loss if tlog.records else float("nan")
    print(json.dumps({"checkpoint": args.out, "steps": config.total_steps, "final_mean_loss": last,
                      "vocab_size": len(vocab), "clipped_steps": tlog.clipped}, sort_keys=True))
    return EXIT_OK


def _decode_config(args):
    mode = "beam" if args.beam is not None else args.mode
    return inference.DecodeConfig(mode=mode, beam_size=args.beam or 3, max_length=args.max_length,
                                  temperature=args.temperature, geometric=args.geometric)


def cmd_caption(args):
    cfg = _decode_config(args)
    _announce("caption", {"checkpoints": args.checkpoint, **vars(cfg)}, args.seed)
    models, vocab = _load_models(args.checkpoint)
    data = datagen.load_dataset(args.data)
    train_caps = None
    if args.train_data:
        train_caps = [c for ex in datagen.load_dataset(args.train_data) for c in ex.captions]
    records = inference.caption_records(models, data, vocab, cfg, train_caps, make_rng(args.seed))
    inference.write_records(records, args.out)
    print(json.dumps({"records": len(records), "out": args.out}))
    return EXIT_OK


def cmd_evaluate(args):
    _announce("evaluate", {"candidates": args.candidates, "references": args.references})
    report = metrics.evaluate_corpus(args.candidates, args.references, per_instance=args.per_instance)
    if args.out:
        _write_json(args.out, report.to_dict())
    print(report.table())
    return EXIT_OK


def gradcheck_report(seed, embed_dim=8, vocab_size=20, feature_dim=6, n_captions=2,
                     eps=1e-5, coords=0, dropout=0.0, max_len=6):
    """Gradient check of one random model on random captions. ``coords=0`` probes every entry."""
    rng = make_rng(seed)
    params = ModelParams.init(ModelDims(feature_dim, embed_dim, vocab_size), rng)
    data = []
    for _ in range(n_captions):
        words = rng.integers(3, vocab_size, size=int(rng.integers(1, max_len + 1))) if vocab_size > 3 else []
        data.append((rng.normal(size=feature_dim), [START_ID, *map(int, words), STOP_ID]))
    mask_seed = int(rng.integers(2**32))

    def loss():
        # Extended precision keeps the probe noise well below the smallest gradient entries.
        wide = params.astype(np.longdouble)
        r = make_rng(mask_seed)
        return sum(forward_caption(wide, f.astype(np.longdouble), t, dropout, True, r)[0] for f, t in data)

    grads = params.zeros_like()
    r = make_rng(mask_seed)
    for f, t in data:
        _, cache = forward_caption(params, f, t, dropout, True, r)
        backward_caption(params, cache, grads)
    n = coords if coords > 0 else max(w.size for _, w in params.items())
    return finite_diff_gradcheck(loss, params, grads, eps, n, rng)


def cmd_gradcheck(args):
    effective = {k: getattr(args, k) for k in ("seeds", "embed_dim", "vocab_size", "feature_dim",
                                               "captions", "eps", "coords", "dropout")}
    _announce("gradcheck", effective, list(args.seeds))
    out, ok = [], True
    for seed in args.seeds:
        rep = gradcheck_report(seed, args.embed_dim, args.vocab_size, args.feature_dim, args.captions,
                               args.eps, args.coords, args.dropout)
        ok &= rep.passed
        out.append({"seed": seed, **rep.to_dict()})
        print(f"seed {seed}: max rel err {rep.max_rel_error:.3e} {'PASS' if rep.passed else 'FAIL'}")
    if args.out:
        _write_json(args.out, {"passed": ok, "runs": out})
    return EXIT_OK if ok else EXIT_GRADCHECK


SWEEP_NOTE = ("Reference point: the original captioning-competition system picked beam size 3 as best by CIDEr. "
              "This sweep reports the best size for this model; it does not assert one.")


def beam_sweep(models, vocab, data, beams, train_caps=None, max_length=20):
    seen = None if train_caps is None else [tuple(c) for c in train_caps]
    rows = []
    for k in beams:
        cfg = inference.DecodeConfig(mode="beam", beam_size=k, max_length=max_length)
        insts, gens, logps = [], [], []
        for ex in data:
            best = inference.decode(models, ex.features, cfg)[0]
            words = vocab.decode(best.tokens)
            gens.append(words)
            logps.append(best.log_prob)
            insts.append(metrics.EvalInstance(ex.id, words, ex.captions))
        rep = metrics.score_instances(insts)
        rows.append({
            "beam": k, "BLEU-4": rep.bleu[3], "CIDEr": rep.cider, "ROUGE-L": rep.rouge_l,
            "METEOR-simplified": rep.meteor, "mean_log_prob": float(np.mean(logps)),
            "novelty": None if seen is None else inference.novelty_rate(gens, seen),
        })
    best = max(rows, key=lambda r: (r["CIDEr"], -r["beam"]))
    return {"note": SWEEP_NOTE, "best_beam_by_cider": best["beam"], "rows": rows}


def sweep_table(report):
    head = f"{'beam':>5} {'BLEU-4':>8} {'CIDEr':>8} {'ROUGE-L':>8} {'METEOR':>8} {'novelty':>8} {'logp':>9}"
    lines = ["# " + report["note"], head, "-" * len(head)]
    for r in report["rows"]:
        nov = "n/a" if r["novelty"] is None else f"{r['novelty']:.3f}"
        lines.append(f"{r['beam']:>5} {r['BLEU-4']:>8.4f} {r['CIDEr']:>8.4f} {r['ROUGE-L']:>8.4f} "
                     f"{r['METEOR-simplified']:>8.4f} {nov:>8} {r['mean_log_prob']:>9.4f}")
    lines.append(f"best beam by CIDEr: {report['best_beam_by_cider']}")
    return "\n".join(lines)


def cmd_sweep_beam(args):
    _announce("sweep-beam", {"checkpoints": args.checkpoint, "beams": list(args.beams),
                             "max_length": args.max_length})
    models, vocab = _load_models(args.checkpoint)
    data = datagen.load_dataset(args.data)
    train_caps = None
    if args.train_data:
        train_caps = [c for ex in datagen.load_dataset(args.train_data) for c in ex.captions]
    report = beam_sweep(models, vocab, data, args.beams, train_caps, args.max_length)
    if args.out:
        _write_json(args.out, report)
    print(sweep_table(report))
    return EXIT_OK


def rank_both(models, vocab, data):
    images = [ex.features for ex in data]
    caps, owner = [], []
    for i, ex in enumerate(data):
        for c in ex.captions:
            caps.append(vocab.encode(c))
            owner.append(i)
    scores = inference.score_matrix(models, images, caps)
    return {
        "caption_ranking": inference.rank_captions(models, images, caps, owner, scores=scores).to_dict(),
        "image_ranking": inference.rank_images(models, images, caps, owner, scores=scores).to_dict(),
    }


def cmd_rank(args):
    _announce("rank", {"checkpoints": args.checkpoint, "data": args.data})
    models, vocab = _load_models(args.checkpoint)
    report = rank_both(models, vocab, datagen.load_dataset(args.data))
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_embed_nn(args):
    _announce("embed-nn", {"checkpoint": args.checkpoint, "query": args.query, "n": args.n})
    params, vocab, _ = checkpoint.load_checkpoint(args.checkpoint)
    for word in args.query:
        nbrs = inference.embedding_neighbors(params, vocab, word, args.n)
        print(f"{word}: " + ", ".join(f"{t} ({s:.3f})" for t, s in nbrs))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="captioner", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic compositional corpus")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float)
    g.add_argument("--captions-per-scene", type=int)
    g.add_argument("--subjects", type=_csv(str))
    g.add_argument("--colors", type=_csv(str))
    g.add_argument("--actions", type=_csv(str))
    g.add_argument("--locations", type=_csv(str))
    g.add_argument("--split", type=_csv(float), help="train,val,test fractions")
    g.add_argument("--held-out", type=_held_out, action="append",
                   help="composition kept out of training, e.g. color=red,subject=dog (repeatable)")
    g.add_argument("--no-held-out", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="key = value config file; flags override it")
    t.add_argument("--log", help="JSON-lines training log")
    t.add_argument("--vocab-out")
    t.add_argument("--init", help="start from this checkpoint (its vocabulary and step counter)")
    t.add_argument("--full-scale", action="store_true", help="embed_dim 512, min_token_count 5 defaults")
    for key in TrainConfig().to_flat():
        t.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")
    t.set_defaults(func=cmd_train)

    def decode_flags(q):
        q.add_argument("--checkpoint", action="append", required=True, help="repeat to ensemble")
        q.add_argument("--data", required=True)
        q.add_argument("--max-length", type=int, default=20)

    c = sub.add_parser("caption", help="generate captions")
    decode_flags(c)
    c.add_argument("--out", required=True)
    c.add_argument("--mode", choices=("greedy", "sample", "beam"), default="beam")
    c.add_argument("--beam", type=int, help="beam size (implies --mode beam; default 3)")
    c.add_argument("--temperature", type=float, default=1.0)
    c.add_argument("--geometric", action="store_true", help="geometric-mean ensemble aggregation")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--train-data", help="training set for the novelty flag")
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("evaluate", help="score candidates against references")
    e.add_argument("--candidates", required=True)
    e.add_argument("--references", required=True)
    e.add_argument("--out")
    e.add_argument("--per-instance", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference check of BPTT gradients")
    gc.add_argument("--seeds", type=_csv(int), default=(0, 1, 2, 3, 4))
    gc.add_argument("--embed-dim", type=int, default=8)
    gc.add_argument("--vocab-size", type=int, default=20)
    gc.add_argument("--feature-dim", type=int, default=6)
    gc.add_argument("--captions", type=int, default=2)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--coords", type=int, default=0, help="coordinates per matrix; 0 = all")
    gc.add_argument("--dropout", type=float, default=0.0)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep-beam", help="metrics and novelty per beam size")
    decode_flags(s)
    s.add_argument("--beams", type=_csv(int), default=DEFAULT_BEAMS)
    s.add_argument("--train-data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep_beam)

    r = sub.add_parser("rank", help="caption and image ranking by likelihood")
    r.add_argument("--checkpoint", action="append", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_rank)

    n = sub.add_parser("embed-nn", help="nearest neighbours in word-embedding space")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--query", nargs="+", required=True)
    n.add_argument("-n", type=int, default=5)
    n.set_defaults(func=cmd_embed_nn)
    return p


def dispatch(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_FLAGS if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, DataFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractViolation, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
