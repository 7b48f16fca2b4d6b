"""Model assembly: encoders + VLAD + global alignment under one config."""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import graph as G
from .data import ExpertSpec
from .encoders import TextEncoderParams, VideoEncoderParams, encode_text, \
    encode_video_global, encode_video_local
from .errors import ConfigError
from .globalalign import GlobalAlignParams, mixture_logits, \
    global_similarity_matrix, text_expert_projections
from .vlad import SharedCenters, aggregate_batch, local_similarity_matrix

ABLATIONS = ("none", "global_only", "local_only_eval", "separate_vlad", "text_only_vlad")


@dataclass
class ModelConfig:
    dim: int = 768
    k: int = 9
    heads: int = 4
    dropout: float = 0.1
    ablation: str = "none"
    attention_ffn: int = 0      # hidden width of the optional FFN sublayer, 0 = absent
    max_tokens: int = 32
    experts: list = field(default_factory=list)   # [{name, dim, max_segments}]
    text_dim: int = 0
    vocab_size: int = 0

    def validate(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError("unknown ablation %r (expected one of %s)"
                              % (self.ablation, ", ".join(ABLATIONS)))
        for name, v in (("dim", self.dim), ("k", self.k), ("heads", self.heads),
                        ("max_tokens", self.max_tokens)):
            if v < 1:
                raise ConfigError("%s must be >= 1, got %r" % (name, v))
        if self.dim % self.heads != 0:
            raise ConfigError("dim %d not divisible by %d heads" % (self.dim, self.heads))
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1), got %r" % self.dropout)
        if not self.experts:
            raise ConfigError("model config declares no experts")
        if self.text_dim < 1:
            raise ConfigError("text_dim must be >= 1")

    def expert_specs(self):
        return [ExpertSpec(e["name"], e["dim"], e["max_segments"]) for e in self.experts]

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        cfg = ModelConfig(**d)
        cfg.validate()
        return cfg

    @staticmethod
    def from_dataset(ds, **overrides):
        cfg = ModelConfig(**overrides)
        cfg.experts = [{"name": e.name, "dim": e.dim, "max_segments": e.max_segments}
                       for e in ds.experts]
        cfg.text_dim = ds.text_dim
        cfg.vocab_size = ds.vocab_size
        cfg.validate()
        return cfg


@dataclass
class SimilarityParts:
    combined: G.Tensor      # the s = (s_global + s_local) / 2 matrix (or ablated form)
    local: G.Tensor
    global_: G.Tensor


class Model:
    """All parameters plus the batched similarity pipeline."""

    def __init__(self, config, seed=0):
        config.validate()
        self.cfg = config
        specs = config.expert_specs()
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 77]))
        ffn = config.attention_ffn
        self.video = VideoEncoderParams(specs, config.dim, config.heads, rng, ffn_hidden=ffn)
        self.text = TextEncoderParams(config.text_dim, config.dim, config.heads, rng,
                                      vocab_size=config.vocab_size, ffn_hidden=ffn)
        self.centers = SharedCenters(config.k, config.dim, rng, "vlad")
        if config.ablation == "separate_vlad":
            self.centers_text = SharedCenters(config.k, config.dim, rng, "vlad_text")
        else:
            self.centers_text = None
        self.galign = GlobalAlignParams(specs, config.k, config.dim, rng)
        if config.ablation == "text_only_vlad":
            std = 1.0 / np.sqrt(config.dim)
            self.tv_w = G.Parameter(rng.normal(0.0, std, size=(config.dim, config.k * config.dim)),
                                    "tvpool.w")
            self.tv_b = G.Parameter(np.zeros(config.k * config.dim), "tvpool.b")
        else:
            self.tv_w = self.tv_b = None

    def parameters(self):
        out = self.video.parameters() + self.text.parameters() + self.centers.parameters()
        if self.centers_text is not None:
            out += self.centers_text.parameters()
        out += self.galign.parameters()
        if self.tv_w is not None:
            out += [self.tv_w, self.tv_b]
        return out

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError("state dict mismatch; missing=%s extra=%s" % (missing, extra))
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ConfigError("parameter %r has shape %s, checkpoint has %s"
                                  % (name, p.data.shape, arr.shape))
            p.data[...] = arr

    # ----- similarity pipeline -----

    def encode_text_descriptor(self, text_batch, training=False, rng=None):
        """Caption batch -> flattened VLAD descriptors (B, K*C)."""
        dp = self.cfg.dropout if training else 0.0
        zt, tmask = encode_text(self.text, text_batch, training, dp, rng)
        tcenters = self.centers_text if self.centers_text is not None else self.centers
        gt = aggregate_batch(tcenters, zt, tmask)
        b = zt.data.shape[0]
        return G.reshape(gt, b, self.cfg.k * self.cfg.dim)

    def encode_video_descriptor(self, video_batch, training=False, rng=None):
        """Video batch -> (local flat (B, K*C), per-expert globals, avail)."""
        dp = self.cfg.dropout if training else 0.0
        zv, vmask, _ = encode_video_local(self.video, video_batch, training, dp, rng)
        fv, avail = encode_video_global(self.video, video_batch)
        b = len(video_batch.video_ids)
        if self.cfg.ablation == "text_only_vlad":
            pooled, _has = G.masked_max_batch(zv, vmask)
            v_flat = G.matmul(pooled, self.tv_w) + self.tv_b
        else:
            gv = aggregate_batch(self.centers, zv, vmask)
            v_flat = G.reshape(gv, b, self.cfg.k * self.cfg.dim)
        return v_flat, fv, avail

    def similarity_parts(self, text_batch, video_batch, training=False, rng=None):
        t_flat = self.encode_text_descriptor(text_batch, training, rng)
        v_flat, fv, avail = self.encode_video_descriptor(video_batch, training, rng)
        s_local = local_similarity_matrix(t_flat, v_flat)
        ft = text_expert_projections(self.galign, t_flat)
        logits = mixture_logits(self.galign, t_flat)
        s_global = global_similarity_matrix(ft, fv, logits, avail)
        if self.cfg.ablation == "global_only":
            combined = s_global
        else:
            combined = G.mul(s_global + s_local, 0.5)
        return SimilarityParts(combined, s_local, s_global)

    def eval_similarity(self, parts):
        """The matrix used for ranking under the configured ablation."""
        if self.cfg.ablation == "local_only_eval":
            return parts.local
        return parts.combined
