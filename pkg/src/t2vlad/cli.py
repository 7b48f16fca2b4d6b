"""Command line interface.

Commands: gen-synth, train, evaluate, retrieve, inspect. Machine-readable
output (JSON/JSONL/CSV) goes to stdout or files; progress and diagnostics
go to stderr. Exit codes: 0 ok, 1 usage/config error, 2 data error,
3 numerical failure.

A run is configured by a single JSON file (--config) with flag overrides;
every key has a default and unknown keys are rejected with their JSON
pointer. The default config trains a small self-generated synthetic demo.
"""

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import __version__
from . import data as D
from . import graph as G
from . import trainer as T
from .errors import ConfigError, ContractError, DataError, EmptyPoolError, \
    NumericalError, ShapeError
from .model import Model, ModelConfig
from .vlad import export_assignments

DEFAULT_CONFIG = {
    "model": {
        "dim": 768,
        "k": 9,
        "heads": 4,
        "dropout": 0.1,
        "ablation": "none",
        "attention_ffn": 0,
        "max_tokens": 32,
    },
    "train": {
        "lr": 1e-4,
        "lr_decay": 0.9,
        "lr_decay_every": 5,
        "weight_decay": 1e-4,
        "margin": 0.02,
        "batch_size": 64,
        "epochs": 30,
        "seed": 0,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "lookahead_k": 6,
        "lookahead_alpha": 0.5,
    },
    "synth": {
        "num_pairs": 64,
        "num_topics": 8,
        "experts": ["motion", "audio", "scene"],
        "dims": [24, 16, 20],
        "noise_sigma": 0.05,
        "seed": 0,
        "latent_dim": 32,
        "topics_per_pair": 2,
        "pair_sigma": 0.6,
        "segment_range": [4, 8],
        "token_range": [6, 12],
        "max_segments": 8,
        "max_tokens": 16,
        "text_dim": 20,
        "text_mode": "embedding",
        "words_per_topic": 12,
        "captions_per_video": 1,
        "expert_dropout": 0.15,
        "holdout": 16,
    },
    "paths": {
        "manifest": None,
        "val_manifest": None,
        "checkpoint": None,
        "out": "t2vlad_run",
    },
    "model_seed": 0,
}


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    data errors, so usage problems are rethrown as ConfigError (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def merge_config(defaults, user, pointer=""):
    """Overlay user config onto defaults, rejecting unknown keys."""
    if not isinstance(user, dict):
        raise ConfigError("%s: expected a JSON object" % (pointer or "/"))
    unknown = sorted(set(user) - set(defaults))
    if unknown:
        raise ConfigError("unknown config key %s/%s" % (pointer, unknown[0]))
    out = {}
    for key, dval in defaults.items():
        here = "%s/%s" % (pointer, key)
        if key not in user:
            out[key] = copy.deepcopy(dval)
            continue
        uval = user[key]
        if isinstance(dval, dict):
            out[key] = merge_config(dval, uval, here)
        elif isinstance(dval, bool) and not isinstance(uval, bool):
            raise ConfigError("%s: expected a boolean, got %r" % (here, uval))
        elif isinstance(dval, (int, float)) and not isinstance(dval, bool):
            if isinstance(uval, bool) or not isinstance(uval, (int, float)):
                raise ConfigError("%s: expected a number, got %r" % (here, uval))
            out[key] = uval
        else:
            out[key] = uval
    return out


def load_run_config(path):
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    if not os.path.exists(path):
        raise ConfigError("config file not found: %s" % path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("config %s is not valid JSON: %s" % (path, exc)) from exc
    return merge_config(DEFAULT_CONFIG, doc)


def _synth_config(section, seed=None):
    kw = {k: v for k, v in section.items() if k != "holdout"}
    kw["experts"] = tuple(kw["experts"])
    kw["dims"] = tuple(kw["dims"])
    kw["segment_range"] = tuple(kw["segment_range"])
    kw["token_range"] = tuple(kw["token_range"])
    if seed is not None:
        kw["seed"] = seed
    return D.SynthConfig(**kw)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _note(msg):
    sys.stderr.write(msg + "\n")


def _build_model_from_checkpoint(path):
    tensors, meta = T.load_checkpoint(path)
    mcfg = ModelConfig.from_dict(meta["config"]["model"])
    model = Model(mcfg, seed=0)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("opt.")})
    return model, meta


def _check_dataset_compat(model, ds, manifest_path):
    cfg = model.cfg
    want = [(e["name"], e["dim"], e["max_segments"]) for e in cfg.experts]
    have = [(e.name, e.dim, e.max_segments) for e in ds.experts]
    if want != have:
        raise DataError("expert set of %s is %s but the checkpoint expects %s"
                        % (manifest_path, have, want))
    if ds.text_dim != cfg.text_dim:
        raise DataError("text width of %s is %d but the checkpoint expects %d"
                        % (manifest_path, ds.text_dim, cfg.text_dim))
    if cfg.vocab_size and ds.vocab_size > cfg.vocab_size:
        raise DataError("dataset vocab %d exceeds checkpoint vocab %d"
                        % (ds.vocab_size, cfg.vocab_size))


# ----- commands -----


def cmd_gen_synth(args, run_cfg):
    seed = args.seed if args.seed is not None else run_cfg["synth"]["seed"]
    section = dict(run_cfg["synth"])
    if args.pairs is not None:
        if args.pairs < 1:
            raise ConfigError("--pairs must be >= 1, got %d" % args.pairs)
        section["num_pairs"] = args.pairs
    holdout = args.holdout if args.holdout is not None else section["holdout"]
    cfg = _synth_config(section, seed=seed)
    out = args.out or run_cfg["paths"]["out"]
    sd = D.generate_synthetic_dataset(cfg)
    manifest_path = D.write_dataset(sd, out)
    summary = {"manifest": manifest_path, "items": len(sd.manifest.items),
               "experts": [e.name for e in sd.manifest.experts]}
    if holdout:
        train_m, test_m = D.split_manifest(sd.manifest, holdout)
        train_path = os.path.join(out, "train_manifest.json")
        test_path = os.path.join(out, "test_manifest.json")
        D.save_manifest(train_m, train_path)
        D.save_manifest(test_m, test_path)
        summary["train_manifest"] = train_path
        summary["test_manifest"] = test_path
        summary["train_items"] = len(train_m.items)
        summary["test_items"] = len(test_m.items)
    summary["separation"] = D.match_separation(sd)
    _emit(summary)
    return 0


def cmd_train(args, run_cfg):
    out = args.out or run_cfg["paths"]["out"]
    os.makedirs(out, exist_ok=True)
    tdict = dict(run_cfg["train"])
    if args.seed is not None:
        tdict["seed"] = args.seed
    if args.epochs is not None:
        tdict["epochs"] = args.epochs
    tcfg = T.TrainConfig.from_dict(tdict)

    manifest = args.manifest or run_cfg["paths"]["manifest"]
    val_manifest = args.val_manifest or run_cfg["paths"]["val_manifest"]
    if manifest is None:
        _note("no manifest configured; generating a synthetic demo dataset")
        section = dict(run_cfg["synth"])
        sd = D.generate_synthetic_dataset(_synth_config(section, seed=tdict["seed"]))
        data_dir = os.path.join(out, "data")
        D.write_dataset(sd, data_dir)
        train_m, test_m = D.split_manifest(sd.manifest, section["holdout"])
        manifest = os.path.join(data_dir, "train_manifest.json")
        val_manifest = os.path.join(data_dir, "test_manifest.json")
        D.save_manifest(train_m, manifest)
        D.save_manifest(test_m, val_manifest)

    train_ds = D.load_dataset(manifest)
    val_ds = D.load_dataset(val_manifest) if val_manifest else None
    mdict = dict(run_cfg["model"])
    if args.ablation is not None:
        mdict["ablation"] = args.ablation
    mcfg = ModelConfig.from_dataset(train_ds, **mdict)
    model = Model(mcfg, seed=run_cfg["model_seed"])
    _note("training %d items for %d epochs (ablation=%s) into %s"
          % (len(train_ds), tcfg.epochs, mcfg.ablation, out))
    records = T.train(model, train_ds, tcfg, out, val_ds=val_ds, resume=args.resume)
    _emit({"checkpoint": os.path.join(out, "last.ckpt"),
           "log": os.path.join(out, "train_log.jsonl"),
           "epochs_run": len(records),
           "final_train_loss": records[-1]["train_loss"] if records else None})
    return 0


def cmd_evaluate(args, run_cfg):
    ckpt = args.checkpoint or run_cfg["paths"]["checkpoint"]
    if ckpt is None:
        raise ConfigError("evaluate needs --checkpoint")
    manifest = args.manifest or run_cfg["paths"]["manifest"]
    if manifest is None:
        raise ConfigError("evaluate needs --manifest")
    model, _meta = _build_model_from_checkpoint(ckpt)
    ds = D.load_dataset(manifest)
    _check_dataset_compat(model, ds, manifest)
    t2v, v2t = T.evaluate_dataset(model, ds)
    _emit({"t2v": t2v.to_dict(), "v2t": v2t.to_dict()})
    return 0


def cmd_retrieve(args, run_cfg):
    ckpt = args.checkpoint or run_cfg["paths"]["checkpoint"]
    manifest = args.manifest or run_cfg["paths"]["manifest"]
    if ckpt is None or manifest is None:
        raise ConfigError("retrieve needs --checkpoint and --manifest")
    if (args.caption_id is None) == (args.query_blob is None):
        raise ConfigError("retrieve needs exactly one of --caption-id or --query-blob")
    model, _meta = _build_model_from_checkpoint(ckpt)
    ds = D.load_dataset(manifest)
    _check_dataset_compat(model, ds, manifest)

    if args.caption_id is not None:
        found = None
        for i, item in enumerate(ds.items):
            for c, (cid, _arr) in enumerate(item.captions):
                if cid == args.caption_id:
                    found = (i, c)
        if found is None:
            raise DataError("caption id %r not present in %s" % (args.caption_id, manifest))
        tb = D.collate_texts(ds, [found], model.cfg.max_tokens)
    else:
        if args.query_tokens is None or args.query_tokens < 1:
            raise ConfigError("--query-blob needs --query-tokens >= 1")
        size = os.path.getsize(args.query_blob) if os.path.exists(args.query_blob) else -1
        if size < 0:
            raise DataError("query blob not found: %s" % args.query_blob)
        if size % (4 * args.query_tokens) != 0:
            raise DataError("query blob %s has %d bytes, not a multiple of 4 x %d"
                            % (args.query_blob, size, args.query_tokens))
        width = size // (4 * args.query_tokens)
        arr = D.load_tensor_blob(args.query_blob, args.query_tokens, width)
        if width == 1:
            if ds.text_dim != 1:
                raise DataError("token-id query against an embedding-mode checkpoint")
            ids = arr.reshape(-1).astype(np.int64)
            t = min(len(ids), model.cfg.max_tokens)
            tokens = np.zeros((1, model.cfg.max_tokens), dtype=np.int64)
            tokens[0, :t] = ids[:t]
        else:
            if width != model.cfg.text_dim:
                raise DataError("query width %d does not match model text_dim %d"
                                % (width, model.cfg.text_dim))
            t = min(arr.shape[0], model.cfg.max_tokens)
            tokens = np.zeros((1, model.cfg.max_tokens, width))
            tokens[0, :t] = arr[:t]
        mask = np.zeros((1, model.cfg.max_tokens))
        mask[0, :t] = 1.0
        tb = D.TextBatch(["query"], np.zeros(1, dtype=np.int64), tokens, mask, width == 1)

    vb = D.collate_videos(ds, list(range(len(ds))))
    parts = model.similarity_parts(tb, vb)
    scores = model.eval_similarity(parts).data[0]
    order = sorted(range(len(ds)), key=lambda j: (-scores[j], ds.items[j].video_id))
    k = args.top_k if args.top_k is not None else 10
    ranked = [{"video_id": ds.items[j].video_id, "score": float(scores[j])}
              for j in order[:k]]
    _emit({"query": args.caption_id or args.query_blob, "results": ranked})
    return 0


def cmd_inspect(args, run_cfg):
    ckpt = args.checkpoint or run_cfg["paths"]["checkpoint"]
    manifest = args.manifest or run_cfg["paths"]["manifest"]
    if ckpt is None or manifest is None:
        raise ConfigError("inspect needs --checkpoint and --manifest")
    model, _meta = _build_model_from_checkpoint(ckpt)
    ds = D.load_dataset(manifest)
    _check_dataset_compat(model, ds, manifest)
    idx = ds.index_of(args.item)
    out = args.out or run_cfg["paths"]["out"]
    os.makedirs(out, exist_ok=True)

    from .encoders import encode_text, encode_video_local
    vb = D.collate_videos(ds, [idx])
    zv, vmask, provenance = encode_video_local(model.video, vb)
    m_total = zv.data.shape[1]
    vlabels = []
    counters = {}
    for name in provenance:
        counters[name] = counters.get(name, 0)
        vlabels.append("%s[%d]" % (name, counters[name]))
        counters[name] += 1
    vcsv = export_assignments(G.reshape(zv, m_total, model.cfg.dim), vmask[0],
                              model.centers, vlabels)

    tb = D.collate_texts(ds, [(idx, 0)], model.cfg.max_tokens)
    zt, tmask = encode_text(model.text, tb)
    tcenters = model.centers_text if model.centers_text is not None else model.centers
    if tb.token_mode:
        tlabels = ["id%d" % int(t) for t in tb.tokens[0]]
    else:
        tlabels = ["tok%d" % i for i in range(tb.tokens.shape[1])]
    tcsv = export_assignments(G.reshape(zt, zt.data.shape[1], model.cfg.dim), tmask[0],
                              tcenters, tlabels)

    vpath = os.path.join(out, "%s_video_assignments.csv" % args.item)
    tpath = os.path.join(out, "%s_text_assignments.csv" % args.item)
    with open(vpath, "w", encoding="utf-8") as fh:
        fh.write(vcsv)
    with open(tpath, "w", encoding="utf-8") as fh:
        fh.write(tcsv)
    _emit({"video_csv": vpath, "text_csv": tpath})
    return 0


# ----- parser -----


def build_parser():
    p = _Parser(prog="t2vlad", description="Global-local text-video alignment toolkit")
    p.add_argument("--version", action="version", version="t2vlad " + __version__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp):
        sp.add_argument("--config", help="run config JSON path")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--precision", choices=("single", "double"), default="double",
                        help="compute precision (default double)")

    g = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--pairs", type=int, help="number of text-video pairs")
    g.add_argument("--holdout", type=float, help="test items (count or fraction), 0 disables")
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--manifest", help="training manifest path")
    t.add_argument("--val-manifest", dest="val_manifest", help="validation manifest path")
    t.add_argument("--epochs", type=int, help="override epoch count")
    t.add_argument("--ablation", choices=("none", "global_only", "local_only_eval",
                                          "separate_vlad", "text_only_vlad"))
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="retrieval metrics on a manifest")
    common(e)
    e.add_argument("--checkpoint", help="checkpoint path")
    e.add_argument("--manifest", help="evaluation manifest path")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("retrieve", help="rank videos for one query")
    common(r)
    r.add_argument("--checkpoint", help="checkpoint path")
    r.add_argument("--manifest", help="corpus manifest path")
    r.add_argument("--caption-id", dest="caption_id", help="query caption id from the manifest")
    r.add_argument("--query-blob", dest="query_blob", help="raw float32 query feature blob")
    r.add_argument("--query-tokens", dest="query_tokens", type=int,
                   help="token count of --query-blob")
    r.add_argument("--top-k", dest="top_k", type=int, help="results to return (default 10)")
    r.set_defaults(func=cmd_retrieve)

    i = sub.add_parser("inspect", help="export assignment weight tables")
    common(i)
    i.add_argument("--checkpoint", help="checkpoint path")
    i.add_argument("--manifest", help="manifest path")
    i.add_argument("--item", required=True, help="video id to inspect")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        if args.precision == "single":
            G.set_default_dtype(np.float32)
        run_cfg = load_run_config(args.config)
        return args.func(args, run_cfg)
    except ConfigError as exc:
        _note("usage error: %s" % exc)
        return 1
    except (DataError, EmptyPoolError, ShapeError, ContractError) as exc:
        _note("data error: %s" % exc)
        return 2
    except NumericalError as exc:
        _note("numerical failure: %s" % exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
