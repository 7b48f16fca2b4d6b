"""Dataset model, binary blob IO, synthetic generation and batching.

A dataset on disk is one JSON manifest plus raw float32 blobs. The manifest
schema (exact field names):

    {"version": 1,
     "experts": [{"name", "dim", "max_segments"}, ...],
     "items": [{"video_id",
                "features": {"<expert>": {"path", "segments"}, ...},
                "captions": [{"caption_id", "path", "tokens"}, ...]}, ...]}

Blob paths are relative to the manifest directory; blobs are raw row-major
little-endian float32 with no header. A caption blob with inferred width 1
holds token ids for the toy embedder instead of precomputed embeddings.
"""

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

MANIFEST_VERSION = 1


@dataclass
class ExpertSpec:
    name: str
    dim: int
    max_segments: int


@dataclass
class Caption:
    caption_id: str
    path: str
    tokens: int


@dataclass
class Feature:
    path: str
    segments: int


@dataclass
class Item:
    video_id: str
    features: dict
    captions: list


@dataclass
class Manifest:
    version: int
    experts: list
    items: list

    def expert_names(self):
        return [e.name for e in self.experts]


def _require(cond, msg):
    if not cond:
        raise DataError(msg)


def _as_pos_int(value, what):
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise DataError("%s must be a positive integer, got %r" % (what, value))
    return value


def _as_nonneg_int(value, what):
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise DataError("%s must be a nonnegative integer, got %r" % (what, value))
    return value


def manifest_from_dict(doc):
    """Build a validated Manifest from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise DataError("manifest root must be a JSON object")
    for key in ("version", "experts", "items"):
        _require(key in doc, "manifest missing required key %r" % key)
    version = doc["version"]
    _require(version == MANIFEST_VERSION, "unsupported manifest version %r" % (version,))

    experts = []
    seen = set()
    for i, e in enumerate(doc["experts"]):
        _require(isinstance(e, dict), "experts[%d] must be an object" % i)
        for key in ("name", "dim", "max_segments"):
            _require(key in e, "experts[%d] missing key %r" % (i, key))
        name = e["name"]
        _require(isinstance(name, str) and name, "experts[%d].name must be a nonempty string" % i)
        _require(name not in seen, "duplicate expert name %r" % name)
        seen.add(name)
        experts.append(ExpertSpec(name, _as_pos_int(e["dim"], "experts[%d].dim" % i),
                                  _as_pos_int(e["max_segments"], "experts[%d].max_segments" % i)))
    _require(experts, "manifest declares no experts")
    by_name = {e.name: e for e in experts}

    items = []
    seen_ids = set()
    for i, it in enumerate(doc["items"]):
        _require(isinstance(it, dict), "items[%d] must be an object" % i)
        for key in ("video_id", "features", "captions"):
            _require(key in it, "items[%d] missing key %r" % (i, key))
        vid = it["video_id"]
        _require(isinstance(vid, str) and vid, "items[%d].video_id must be a nonempty string" % i)
        _require(vid not in seen_ids, "duplicate video_id %r" % vid)
        seen_ids.add(vid)
        feats = {}
        for name, f in it["features"].items():
            _require(name in by_name, "item %r references undeclared expert %r" % (vid, name))
            _require(isinstance(f, dict) and "path" in f and "segments" in f,
                     "item %r expert %r: feature entry needs path and segments" % (vid, name))
            segs = _as_nonneg_int(f["segments"], "item %r expert %r segments" % (vid, name))
            _require(segs <= by_name[name].max_segments,
                     "item %r expert %r: %d segments exceeds max_segments %d"
                     % (vid, name, segs, by_name[name].max_segments))
            feats[name] = Feature(str(f["path"]), segs)
        caps = []
        cap_seen = set()
        for j, c in enumerate(it["captions"]):
            _require(isinstance(c, dict) and all(k in c for k in ("caption_id", "path", "tokens")),
                     "item %r captions[%d] needs caption_id, path, tokens" % (vid, j))
            cid = c["caption_id"]
            _require(isinstance(cid, str) and cid, "item %r captions[%d].caption_id invalid" % (vid, j))
            _require(cid not in cap_seen, "item %r: duplicate caption_id %r" % (vid, cid))
            cap_seen.add(cid)
            caps.append(Caption(cid, str(c["path"]), _as_pos_int(c["tokens"], "item %r caption %r tokens" % (vid, cid))))
        _require(caps, "item %r has no captions" % vid)
        items.append(Item(vid, feats, caps))
    _require(items, "manifest has no items")
    return Manifest(version, experts, items)


def manifest_to_dict(m):
    return {
        "version": m.version,
        "experts": [{"name": e.name, "dim": e.dim, "max_segments": e.max_segments}
                    for e in m.experts],
        "items": [{
            "video_id": it.video_id,
            "features": {n: {"path": f.path, "segments": f.segments}
                         for n, f in sorted(it.features.items())},
            "captions": [{"caption_id": c.caption_id, "path": c.path, "tokens": c.tokens}
                         for c in it.captions],
        } for it in m.items],
    }


def save_manifest(m, path):
    """Write the manifest as canonical JSON (sorted keys, 2-space indent)."""
    text = json.dumps(manifest_to_dict(m), indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_manifest(path, check_blobs=True):
    """Parse and fully validate a manifest; optionally stat every blob."""
    if not os.path.exists(path):
        raise DataError("manifest not found: %s" % path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError("manifest %s is not valid JSON: %s" % (path, exc)) from exc
    m = manifest_from_dict(doc)
    if check_blobs:
        root = os.path.dirname(os.path.abspath(path))
        text_width = None
        for it in m.items:
            for name, f in it.features.items():
                if f.segments == 0:
                    continue
                dim = next(e.dim for e in m.experts if e.name == name)
                _check_blob(os.path.join(root, f.path), f.segments * dim * 4,
                            "item %r expert %r" % (it.video_id, name))
            for c in it.captions:
                full = os.path.join(root, c.path)
                size = _blob_size(full, "item %r caption %r" % (it.video_id, c.caption_id))
                if size % (4 * c.tokens) != 0:
                    raise DataError(
                        "item %r caption %r: blob %s has %d bytes, not a multiple of 4 x %d tokens"
                        % (it.video_id, c.caption_id, c.path, size, c.tokens))
                w = size // (4 * c.tokens)
                if text_width is None:
                    text_width = w
                elif w != text_width:
                    raise DataError(
                        "item %r caption %r: token width %d differs from dataset width %d"
                        % (it.video_id, c.caption_id, w, text_width))
    return m


def _blob_size(path, what):
    if not os.path.exists(path):
        raise DataError("%s: blob file missing: %s" % (what, path))
    return os.path.getsize(path)


def _check_blob(path, expected, what):
    actual = _blob_size(path, what)
    if actual != expected:
        raise DataError("%s: blob %s has %d bytes, expected %d" % (what, path, actual, expected))


def load_tensor_blob(path, rows, cols):
    """Read a rows x cols little-endian float32 blob as a float64 array."""
    expected = rows * cols * 4
    actual = _blob_size(path, "blob")
    if actual != expected:
        raise DataError("blob %s has %d bytes, expected %d (%d x %d float32)"
                        % (path, actual, expected, rows, cols))
    raw = np.fromfile(path, dtype="<f4")
    return raw.reshape(rows, cols).astype(np.float64)


def save_tensor_blob(path, array):
    """Write a 2D array as raw row-major little-endian float32."""
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    if arr.ndim != 2:
        raise DataError("blob arrays must be 2D, got %dD" % arr.ndim)
    arr.astype("<f4").tofile(path)


# ----- loaded dataset -----


@dataclass
class LoadedItem:
    video_id: str
    features: dict        # expert name -> (T, d) float64, T may be 0
    captions: list        # (caption_id, array) with array (tokens, d_text) or (tokens,) int64


@dataclass
class LoadedDataset:
    manifest: Manifest
    items: list
    text_dim: int         # 1 means token-id mode
    vocab_size: int       # 0 in embedding mode

    @property
    def experts(self):
        return self.manifest.experts

    def __len__(self):
        return len(self.items)

    def index_of(self, video_id):
        for i, it in enumerate(self.items):
            if it.video_id == video_id:
                return i
        raise DataError("unknown video_id %r" % video_id)


def load_dataset(manifest_path):
    """Load manifest and every blob into memory, fully validated."""
    m = load_manifest(manifest_path, check_blobs=True)
    root = os.path.dirname(os.path.abspath(manifest_path))
    dims = {e.name: e.dim for e in m.experts}
    items = []
    text_dim = None
    max_id = -1
    for it in m.items:
        feats = {}
        for name, f in it.features.items():
            if f.segments == 0:
                feats[name] = np.zeros((0, dims[name]))
            else:
                feats[name] = load_tensor_blob(os.path.join(root, f.path), f.segments, dims[name])
        caps = []
        for c in it.captions:
            full = os.path.join(root, c.path)
            width = _blob_size(full, "caption") // (4 * c.tokens)
            arr = load_tensor_blob(full, c.tokens, width)
            if text_dim is None:
                text_dim = width
            if width == 1:
                ids = arr.reshape(-1)
                if np.any(ids != np.round(ids)) or np.any(ids < 0):
                    raise DataError("item %r caption %r: token ids must be nonnegative integers"
                                    % (it.video_id, c.caption_id))
                ids = ids.astype(np.int64)
                max_id = max(max_id, int(ids.max()))
                caps.append((c.caption_id, ids))
            else:
                caps.append((c.caption_id, arr))
        items.append(LoadedItem(it.video_id, feats, caps))
    return LoadedDataset(m, items, int(text_dim), max_id + 1 if text_dim == 1 else 0)


# ----- batching -----


@dataclass
class VideoBatch:
    video_ids: list
    features: dict        # name -> (B, max_segments, d)
    masks: dict           # name -> (B, max_segments)
    avail: np.ndarray     # (B, N) 0/1


@dataclass
class TextBatch:
    caption_ids: list
    owner: np.ndarray     # (B,) index of the owning video within its batch/corpus
    tokens: np.ndarray    # (B, T, d_text) float or (B, T) int64 in token-id mode
    mask: np.ndarray      # (B, T)
    token_mode: bool


@dataclass
class Batch:
    video: VideoBatch
    text: TextBatch

    @property
    def size(self):
        return len(self.video.video_ids)


def collate_videos(ds, indices):
    names = [e.name for e in ds.experts]
    b = len(indices)
    feats, masks = {}, {}
    avail = np.zeros((b, len(names)))
    for n_i, e in enumerate(ds.experts):
        buf = np.zeros((b, e.max_segments, e.dim))
        msk = np.zeros((b, e.max_segments))
        for row, idx in enumerate(indices):
            arr = ds.items[idx].features.get(e.name)
            if arr is None or arr.shape[0] == 0:
                continue
            t = arr.shape[0]
            buf[row, :t] = arr
            msk[row, :t] = 1.0
            avail[row, n_i] = 1.0
        feats[e.name] = buf
        masks[e.name] = msk
    ids = [ds.items[i].video_id for i in indices]
    return VideoBatch(ids, feats, masks, avail)


def collate_texts(ds, pairs, max_tokens):
    """pairs: list of (owner index, caption index within that item)."""
    b = len(pairs)
    token_mode = ds.text_dim == 1
    if token_mode:
        tokens = np.zeros((b, max_tokens), dtype=np.int64)
    else:
        tokens = np.zeros((b, max_tokens, ds.text_dim))
    mask = np.zeros((b, max_tokens))
    cap_ids = []
    owner = np.zeros(b, dtype=np.int64)
    for row, (item_idx, cap_idx) in enumerate(pairs):
        cid, arr = ds.items[item_idx].captions[cap_idx]
        cap_ids.append(cid)
        owner[row] = item_idx
        t = arr.shape[0]
        if t > max_tokens:
            warnings.warn("caption %r truncated from %d to %d tokens" % (cid, t, max_tokens))
            arr = arr[:max_tokens]
            t = max_tokens
        tokens[row, :t] = arr
        mask[row, :t] = 1.0
    return TextBatch(cap_ids, owner, tokens, mask, token_mode)


def batch_iterator(ds, batch_size, seed=0, shuffle=True, epoch=0, max_tokens=32):
    """Yield Batches covering each item once; partial batches < 2 dropped.

    Caption choice and shuffle order are functions of (seed, epoch) only, so
    a resumed run replays the exact same batches.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2, got %d" % batch_size)
    n = len(ds)
    ss = np.random.SeedSequence(entropy=[int(seed) & 0xFFFFFFFF, int(epoch)])
    shuffle_ss, caption_ss = ss.spawn(2)
    cap_rng = np.random.default_rng(caption_ss)
    cap_choice = [int(cap_rng.integers(len(it.captions))) for it in ds.items]
    order = np.arange(n)
    if shuffle:
        np.random.default_rng(shuffle_ss).shuffle(order)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            continue
        vb = collate_videos(ds, idx)
        tb = collate_texts(ds, [(int(i), cap_choice[int(i)]) for i in idx], max_tokens)
        tb.owner = np.arange(len(idx), dtype=np.int64)
        yield Batch(vb, tb)


# ----- synthetic generation -----


@dataclass
class SynthConfig:
    num_pairs: int = 64
    num_topics: int = 8
    experts: tuple = ("motion", "audio", "scene")
    dims: tuple = (24, 16, 20)
    noise_sigma: float = 0.05
    seed: int = 0
    latent_dim: int = 32
    topics_per_pair: int = 2
    pair_sigma: float = 0.6
    segment_range: tuple = (4, 8)
    token_range: tuple = (6, 12)
    max_segments: int = 8
    max_tokens: int = 16
    text_dim: int = 20
    text_mode: str = "embedding"   # or "tokens"
    words_per_topic: int = 12
    captions_per_video: int = 1
    expert_dropout: float = 0.15


@dataclass
class SynthData:
    manifest: Manifest
    blobs: dict                    # relative path -> float32 array
    config: SynthConfig
    topic_vectors: np.ndarray      # (num_topics, latent_dim)
    projections: dict              # expert name -> (latent_dim, d); "__text__" for text
    pair_topics: list              # per item: tuple of topic indices


def generate_synthetic_dataset(cfg):
    """Build a topic-model dataset where matched pairs share latent topics.

    Every segment/token feature is a (noisy) linear image of one of the
    pair's topic vectors plus a per-pair, per-topic latent signature, so
    with noise_sigma=0 text and video features are exact projections of the
    same latents. The signature (scaled by pair_sigma) is what lets
    retrieval separate pairs that drew the same topic combination. It is
    attached per topic slot, so pooling across a whole clip blends the
    slots by each modality's random topic frequencies while per-topic
    aggregation keeps them apart. Token mode cannot carry the signature, so
    token-mode difficulty is bounded by the topic structure.
    """
    if cfg.num_topics < 2:
        raise ConfigError("num_topics must be >= 2, got %d" % cfg.num_topics)
    if len(cfg.experts) != len(cfg.dims):
        raise ConfigError("experts and dims must align")
    if cfg.text_mode not in ("embedding", "tokens"):
        raise ConfigError("text_mode must be 'embedding' or 'tokens'")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    topics = rng.normal(size=(cfg.num_topics, cfg.latent_dim))
    proj = {}
    for name, d in zip(cfg.experts, cfg.dims):
        proj[name] = rng.normal(0.0, 1.0 / np.sqrt(cfg.latent_dim), size=(cfg.latent_dim, d))
    if cfg.text_mode == "embedding":
        proj["__text__"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.latent_dim),
                                      size=(cfg.latent_dim, cfg.text_dim))

    experts = [ExpertSpec(n, d, cfg.max_segments) for n, d in zip(cfg.experts, cfg.dims)]
    items, blobs, pair_topics = [], {}, []
    width = len(str(max(cfg.num_pairs - 1, 1)))
    for p in range(cfg.num_pairs):
        vid = "vid%0*d" % (width, p)
        chosen = tuple(int(t) for t in rng.choice(cfg.num_topics, size=cfg.topics_per_pair, replace=False))
        pair_topics.append(chosen)
        # drawn even when pair_sigma is 0 so the stream (and therefore the
        # topic/segment draws) matches across pair_sigma settings
        ident = cfg.pair_sigma * rng.normal(size=(cfg.topics_per_pair, cfg.latent_dim))
        chosen_arr = np.array(chosen)
        feats = {}
        drop = rng.random(len(cfg.experts)) < cfg.expert_dropout
        if drop.all():
            drop[int(rng.integers(len(cfg.experts)))] = False
        for n_i, (name, d) in enumerate(zip(cfg.experts, cfg.dims)):
            if drop[n_i]:
                feats[name] = Feature("", 0)
                continue
            t = int(rng.integers(cfg.segment_range[0], cfg.segment_range[1] + 1))
            t = min(t, cfg.max_segments)
            seg_slots = rng.integers(cfg.topics_per_pair, size=t)
            latent = topics[chosen_arr[seg_slots]] + ident[seg_slots]
            arr = latent @ proj[name]
            if cfg.noise_sigma > 0:
                arr = arr + cfg.noise_sigma * rng.normal(size=arr.shape)
            path = "blobs/%s.%s.f32" % (vid, name)
            blobs[path] = arr.astype("<f4")
            feats[name] = Feature(path, t)
        caps = []
        for c_i in range(cfg.captions_per_video):
            t = int(rng.integers(cfg.token_range[0], cfg.token_range[1] + 1))
            t = min(t, cfg.max_tokens)
            tok_slots = rng.integers(cfg.topics_per_pair, size=t)
            tok_topics = chosen_arr[tok_slots]
            if cfg.text_mode == "tokens":
                ids = tok_topics * cfg.words_per_topic + rng.integers(cfg.words_per_topic, size=t)
                arr = ids.astype(np.float64).reshape(t, 1)
            else:
                arr = (topics[tok_topics] + ident[tok_slots]) @ proj["__text__"]
                if cfg.noise_sigma > 0:
                    arr = arr + cfg.noise_sigma * rng.normal(size=arr.shape)
            cid = "%s.cap%d" % (vid, c_i)
            path = "blobs/%s.f32" % cid
            blobs[path] = arr.astype("<f4")
            caps.append(Caption(cid, path, t))
        items.append(Item(vid, feats, caps))
    manifest = Manifest(MANIFEST_VERSION, experts, items)
    return SynthData(manifest, blobs, cfg, topics, proj, pair_topics)


def write_dataset(data, outdir):
    """Write blobs + manifest.json under outdir; returns the manifest path."""
    os.makedirs(os.path.join(outdir, "blobs"), exist_ok=True)
    for rel, arr in sorted(data.blobs.items()):
        arr.tofile(os.path.join(outdir, rel))
    path = os.path.join(outdir, "manifest.json")
    save_manifest(data.manifest, path)
    return path


def split_manifest(m, holdout):
    """Split items into (train, test) manifests sharing the same blobs.

    The last ``holdout`` items (or fraction if < 1) become the test split.
    """
    n = len(m.items)
    k = int(round(n * holdout)) if 0 < holdout < 1 else int(holdout)
    if not 0 < k < n:
        raise ConfigError("holdout %r leaves an empty split (n=%d)" % (holdout, n))
    train = Manifest(m.version, m.experts, m.items[:n - k])
    test = Manifest(m.version, m.experts, m.items[n - k:])
    return train, test


def match_separation(data):
    """Mean matched vs mismatched cosine of pooled features, as a generator
    diagnostic. Features are pulled back to latent space through the
    pseudo-inverse of each projection so text and video live in one space."""
    cfg = data.config
    pinv = {k: np.linalg.pinv(v) for k, v in data.projections.items()}
    vids, txts = [], []
    for item in data.manifest.items:
        acc = []
        for name, f in item.features.items():
            if f.segments == 0:
                continue
            arr = data.blobs[f.path].astype(np.float64)
            acc.append((arr @ pinv[name]).mean(axis=0))
        vids.append(np.mean(acc, axis=0))
        c = item.captions[0]
        arr = data.blobs[c.path].astype(np.float64)
        if cfg.text_mode == "tokens":
            ids = arr.reshape(-1).astype(np.int64)
            txts.append(data.topic_vectors[ids // cfg.words_per_topic].mean(axis=0))
        else:
            txts.append((arr @ pinv["__text__"]).mean(axis=0))
    v = np.stack(vids)
    t = np.stack(txts)
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    t /= np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    sims = t @ v.T
    n = sims.shape[0]
    matched = float(np.mean(np.diag(sims)))
    mismatched = float((sims.sum() - np.trace(sims)) / (n * n - n))
    return {"matched_mean": matched, "mismatched_mean": mismatched,
            "separation": matched - mismatched}
