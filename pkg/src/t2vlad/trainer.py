"""Training loop, Ranger optimizer, checkpoints and evaluation.

The optimizer is rectified adaptive moments wrapped in lookahead (k=6,
alpha=0.5) with decoupled multiplicative weight decay. All in-loop
randomness (shuffle, caption choice, dropout) is derived from (seed, epoch)
alone, so resuming from a checkpoint replays the exact remaining epochs of
an uninterrupted run.
"""

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import graph as G
from . import metrics
from .data import batch_iterator, collate_texts, collate_videos
from .errors import ConfigError, DataError, NumericalError
from .objective import batch_similarity, margin_ranking_loss

CHECKPOINT_MAGIC = b"T2VCKPT1"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    weight_decay: float = 1e-4
    margin: float = 0.02
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5

    def validate(self):
        if self.lr <= 0 or self.margin <= 0 or self.epochs < 1:
            raise ConfigError("lr, margin must be positive and epochs >= 1")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ConfigError("lr_decay in (0,1], lr_decay_every >= 1 required")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2, got %d" % self.batch_size)
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.lookahead_k < 1 or not 0 < self.lookahead_alpha <= 1:
            raise ConfigError("lookahead_k >= 1 and alpha in (0,1] required")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        cfg = TrainConfig(**d)
        cfg.validate()
        return cfg


def lr_at_epoch(epoch, cfg):
    """lr = init * decay^floor(epoch / every)."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0, got %d" % epoch)
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


class Ranger:
    """Rectified adaptive moments + lookahead + decoupled weight decay."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, lookahead_k=6, lookahead_alpha=0.5):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in optimizer")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.k, self.alpha = lookahead_k, lookahead_alpha
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.slow = {p.name: p.data.copy() for p in self.params}

    def step(self):
        for p in self.params:
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise NumericalError("non-finite gradient for parameter %r" % p.name)
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        b2t = b2 ** t
        rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        if rho_t >= 5.0:
            r_t = math.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        else:
            r_t = None
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** t)
            if r_t is not None:
                denom = np.sqrt(v / (1.0 - b2t)) + self.eps
                p.data -= self.lr * r_t * mhat / denom
            else:
                p.data -= self.lr * mhat
            if self.weight_decay > 0:
                p.data *= 1.0 - self.lr * self.weight_decay
        if self.t % self.k == 0:
            for p in self.params:
                slow = self.slow[p.name]
                slow += self.alpha * (p.data - slow)
                p.data[...] = slow

    def state_tensors(self):
        out = {}
        for p in self.params:
            out["opt.m." + p.name] = self.m[p.name]
            out["opt.v." + p.name] = self.v[p.name]
            out["opt.slow." + p.name] = self.slow[p.name]
        return out

    def load_state(self, tensors, step):
        for p in self.params:
            for prefix, store in (("opt.m.", self.m), ("opt.v.", self.v),
                                  ("opt.slow.", self.slow)):
                key = prefix + p.name
                if key not in tensors:
                    raise DataError("checkpoint missing optimizer tensor %r" % key)
                arr = tensors[key]
                if arr.shape != p.data.shape:
                    raise DataError("optimizer tensor %r has shape %s, expected %s"
                                    % (key, arr.shape, p.data.shape))
                store[p.name][...] = arr
        self.t = int(step)


# ----- checkpoint container -----


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(model_cfg, train_cfg):
    """Digest of everything that must match for a resume to be exact.

    epochs is excluded: extending a finished run is legitimate, while any
    other field changes the replayed trajectory.
    """
    td = train_cfg.to_dict()
    td.pop("epochs")
    payload = _canonical_json({"model": model_cfg.to_dict(), "train": td})
    return hashlib.sha256(payload).hexdigest()


def save_checkpoint(path, tensors, meta):
    """Versioned binary container: magic, meta JSON, named float64 tensors.

    Tensors are written sorted by name; meta is canonical JSON. The format
    round-trips byte-stably.
    """
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    mj = _canonical_json(meta)
    blob += struct.pack("<I", len(mj))
    blob += mj
    names = sorted(tensors)
    blob += struct.pack("<I", len(names))
    for name in names:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, meta dict)."""
    if not os.path.exists(path):
        raise DataError("checkpoint not found: %s" % path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise DataError("file %s is not a checkpoint (bad magic)" % path)
    off = 8

    def take(n, what):
        nonlocal off
        if off + n > len(buf):
            raise DataError("checkpoint %s truncated while reading %s" % (path, what))
        piece = buf[off:off + n]
        off += n
        return piece

    mlen, = struct.unpack("<I", take(4, "meta length"))
    try:
        meta = json.loads(take(mlen, "meta").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError("checkpoint %s has corrupt meta: %s" % (path, exc)) from exc
    count, = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        nlen, = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        ndim, = struct.unpack("<B", take(1, "ndim"))
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(n * 8, "tensor %r" % name), dtype="<f8").reshape(shape)
        tensors[name] = data.copy()
    if off != len(buf):
        raise DataError("checkpoint %s has %d trailing bytes" % (path, len(buf) - off))
    return tensors, meta


def save_training_checkpoint(path, model, train_cfg, opt, next_epoch, best=None):
    tensors = dict(model.state_dict())
    tensors.update(opt.state_tensors())
    meta = {
        "epoch": next_epoch,
        "step": opt.t,
        "config": {"model": model.cfg.to_dict(), "train": train_cfg.to_dict()},
        "config_hash": config_hash(model.cfg, train_cfg),
        "rng": {"seed": train_cfg.seed, "next_epoch": next_epoch},
        "best": best,
    }
    save_checkpoint(path, tensors, meta)


# ----- evaluation -----


def evaluate_dataset(model, ds, text_chunk=256):
    """Full both-direction retrieval reports over every caption of ds."""
    n = len(ds)
    vb = collate_videos(ds, list(range(n)))
    v_flat, fv, avail = model.encode_video_descriptor(vb)
    pairs = [(i, c) for i, item in enumerate(ds.items) for c in range(len(item.captions))]
    owner = np.array([p[0] for p in pairs], dtype=np.int64)
    rows_local, rows_global = [], []
    from .globalalign import global_similarity_matrix, mixture_logits, text_expert_projections
    from .vlad import local_similarity_matrix
    for start in range(0, len(pairs), text_chunk):
        tb = collate_texts(ds, pairs[start:start + text_chunk], model.cfg.max_tokens)
        t_flat = model.encode_text_descriptor(tb)
        rows_local.append(local_similarity_matrix(t_flat, v_flat).data)
        ft = text_expert_projections(model.galign, t_flat)
        logits = mixture_logits(model.galign, t_flat)
        rows_global.append(global_similarity_matrix(ft, fv, logits, avail).data)
    s_local = np.concatenate(rows_local, axis=0)
    s_global = np.concatenate(rows_global, axis=0)
    if model.cfg.ablation == "global_only":
        s = s_global
    elif model.cfg.ablation == "local_only_eval":
        s = s_local
    else:
        s = 0.5 * (s_global + s_local)
    t2v_ranks, v2t_ranks = metrics.ranks_caption_matrix(s, owner)
    return (metrics.report_from_ranks(t2v_ranks, "t2v"),
            metrics.report_from_ranks(v2t_ranks, "v2t"))


# ----- training loop -----


def train(model, train_ds, train_cfg, out_dir, val_ds=None, resume=None,
          log_name="train_log.jsonl"):
    """Run the optimization loop; writes JSONL log and checkpoints.

    Returns the list of per-epoch log records. Checkpoints land in out_dir
    as last.ckpt (every epoch) and best.ckpt (best validation t2v R@1).
    """
    train_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    params = model.parameters()
    opt = Ranger(params, lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                 eps=train_cfg.eps, weight_decay=train_cfg.weight_decay,
                 lookahead_k=train_cfg.lookahead_k, lookahead_alpha=train_cfg.lookahead_alpha)
    start_epoch = 0
    best = None
    log_path = os.path.join(out_dir, log_name)
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        if meta.get("config_hash") != config_hash(model.cfg, train_cfg):
            raise ConfigError("checkpoint %s was produced by a different config" % resume)
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("opt.")})
        opt.load_state(tensors, meta["step"])
        start_epoch = int(meta["rng"]["next_epoch"])
        best = meta.get("best")
        mode = "a"
    else:
        mode = "w"
    records = []
    last_path = os.path.join(out_dir, "last.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    with open(log_path, mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, train_cfg.epochs):
            opt.lr = lr_at_epoch(epoch, train_cfg)
            drop_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=[train_cfg.seed & 0xFFFFFFFF, epoch, 2]))
            total, nb = 0.0, 0
            for batch in batch_iterator(train_ds, train_cfg.batch_size, seed=train_cfg.seed,
                                        shuffle=True, epoch=epoch,
                                        max_tokens=model.cfg.max_tokens):
                parts = batch_similarity(batch, model, training=True, rng=drop_rng)
                loss = margin_ranking_loss(parts.combined, train_cfg.margin)
                lval = loss.item()
                if not math.isfinite(lval):
                    save_training_checkpoint(last_path, model, train_cfg, opt, epoch, best)
                    raise NumericalError(
                        "training diverged at epoch %d (loss %r); last good state saved to %s"
                        % (epoch, lval, last_path))
                G.zero_grads(params)
                G.backward(loss)
                opt.step()
                total += lval
                nb += 1
            record = {"epoch": epoch, "lr": opt.lr, "ablation": model.cfg.ablation,
                      "train_loss": total / max(nb, 1), "val_metrics": {}}
            if val_ds is not None:
                t2v, v2t = evaluate_dataset(model, val_ds)
                record["val_metrics"] = {"t2v": t2v.to_dict(), "v2t": v2t.to_dict()}
                if best is None or t2v.r1 > best:
                    best = t2v.r1
                    save_training_checkpoint(best_path, model, train_cfg, opt, epoch + 1, best)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            records.append(record)
            save_training_checkpoint(last_path, model, train_cfg, opt, epoch + 1, best)
    return records
