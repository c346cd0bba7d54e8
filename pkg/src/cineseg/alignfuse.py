"""Multimodal bottleneck-fusion encoder with scene, act, and synopsis heads.

Inputs are per-shot (or per-sentence) feature matrices, one per
modality. Each modality is projected to a shared width, gets a regular
learnable positional encoding plus a shared *alignment* positional
encoding, and runs through its own transformer blocks behind a small
set of learnable bottleneck tokens. Fusion then lets modalities talk
only through those tokens: every modality re-encodes the concatenation
of all token sets with its own latents, and each token set's next value
is the mean of its per-modality updates. The fused representation is
the channel-wise concatenation of the per-modality latents.

The alignment encoding maps position i of a length-L input to bucket
floor(align_len * i / L), so two inputs of different lengths share the
same coarse timeline. It is the piece that makes shot sequences and
synopsis sentences comparable, and both ablation switches for it live
in the config.

Encoder blocks follow post-norm ordering: self-attention, residual +
layernorm, a GeLU feed-forward (width -> ffn_width -> width), residual
+ layernorm, then dropout. Attention is single-head scaled dot product
by default; num_heads > 1 splits channels evenly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import BlobIOError, ConfigError, ContractError, DataError
from .numcore import Tensor

CHECKPOINT_FORMAT = "cineseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    seq_len: int  # maximum input length L
    align_len: int  # alignment buckets / bottleneck tokens per modality
    width: int  # channels per modality C
    ffn_width: int
    unimodal_depth: int
    fusion_depth: int
    dropout: float
    num_classes: int  # 2 = scene boundary, 5 = turning points
    modality_dims: tuple
    num_heads: int = 1
    align_pe_embed: bool = True  # add alignment PE to embeddings
    align_pe_tokens: bool = True  # add alignment PE to bottleneck tokens

    @property
    def num_modalities(self) -> int:
        return len(self.modality_dims)

    @property
    def fused_width(self) -> int:
        return self.width * self.num_modalities

    def validate(self) -> None:
        if self.seq_len < 1 or self.width < 1 or self.ffn_width < 1:
            raise ConfigError("seq_len, width, and ffn_width must be positive")
        if not 0 < self.align_len <= self.seq_len:
            raise ConfigError(f"align_len must lie in [1, seq_len], got {self.align_len}")
        if self.unimodal_depth < 0 or self.fusion_depth < 0:
            raise ConfigError("encoder depths must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.num_classes not in (2, 5):
            raise ConfigError(f"num_classes must be 2 or 5, got {self.num_classes}")
        if not self.modality_dims or any(d < 1 for d in self.modality_dims):
            raise ConfigError("modality_dims must be a non-empty tuple of positive ints")
        if self.num_heads < 1 or self.width % self.num_heads:
            raise ConfigError("num_heads must be positive and divide width")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_dims"] = list(self.modality_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["modality_dims"] = tuple(d["modality_dims"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def align_index(i: int, seq_len: int, align_len: int) -> int:
    """Alignment bucket floor(align_len * i / seq_len) for position i."""
    if not 0 <= i < seq_len:
        raise ContractError(f"position {i} outside [0, {seq_len})")
    return (align_len * i) // seq_len


def align_buckets(seq_len: int, align_len: int) -> np.ndarray:
    return (align_len * np.arange(seq_len, dtype=np.int64)) // seq_len


class FusionModel:
    """Parameter container plus the forward passes defined below."""

    def __init__(self, config: ModelConfig, seed):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c, ck = config.width, config.ffn_width

        self._table(rng, "align_pe", config.align_len, c)
        for m, dim in enumerate(config.modality_dims):
            p = f"mod{m}."
            self._linear(rng, p + "proj", dim, c)
            self._table(rng, p + "pe", config.seq_len, c)
            self._layernorm(p + "embed_ln", c)
            self._table(rng, p + "tokens", config.align_len, c)
            for d in range(config.unimodal_depth):
                self._block(rng, f"{p}uni{d}.", c, ck)
            for d in range(config.fusion_depth):
                self._block(rng, f"{p}fus{d}.", c, ck)
        self._linear(rng, "head", config.fused_width, config.num_classes)

    def _param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def _table(self, rng, name: str, rows: int, cols: int) -> None:
        self._param(name, rng.normal(0.0, 0.02, size=(rows, cols)))

    def _linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self._param(name + ".w", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        self._param(name + ".b", np.zeros(fan_out))

    def _layernorm(self, name: str, width: int) -> None:
        self._param(name + ".g", np.ones(width))
        self._param(name + ".b", np.zeros(width))

    def _block(self, rng, prefix: str, c: int, ck: int) -> None:
        for piece in ("attn.q", "attn.k", "attn.v"):
            self._linear(rng, prefix + piece, c, c)
        self._layernorm(prefix + "ln1", c)
        self._linear(rng, prefix + "ffn.lift", c, ck)
        self._linear(rng, prefix + "ffn.drop", ck, c)
        self._layernorm(prefix + "ln2", c)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def load_state(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise DataError(
                f"checkpoint parameters do not match model: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, tensor in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise DataError(
                    f"parameter '{name}': checkpoint shape {arr.shape} vs model {tensor.shape}"
                )
            tensor.data = arr.copy()


def _linear_apply(model, prefix: str, x: Tensor) -> Tensor:
    return nc.add(nc.matmul(x, model[prefix + ".w"]), model[prefix + ".b"])


def _attention(model, prefix: str, x: Tensor, collect=None, tag: str = "") -> Tensor:
    cfg = model.config
    q = _linear_apply(model, prefix + "attn.q", x)
    k = _linear_apply(model, prefix + "attn.k", x)
    v = _linear_apply(model, prefix + "attn.v", x)
    head_dim = cfg.width // cfg.num_heads
    scale = 1.0 / math.sqrt(head_dim)
    outs = []
    for h in range(cfg.num_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh, kh, vh = (nc.narrow(t, -1, lo, hi) for t in (q, k, v))
        scores = nc.mul(nc.matmul(qh, nc.transpose(kh)), scale)
        weights = nc.softmax(scores, axis=-1)
        if collect is not None:
            collect.setdefault("attention", {})[f"{tag}h{h}"] = weights.data.copy()
        outs.append(nc.matmul(weights, vh))
    return outs[0] if len(outs) == 1 else nc.concat(outs, -1)


def _encoder_block(model, prefix: str, x: Tensor, rng, collect=None, tag: str = "") -> Tensor:
    cfg = model.config
    attn = _attention(model, prefix, x, collect, tag)
    x = nc.layernorm(nc.add(x, attn), model[prefix + "ln1.g"], model[prefix + "ln1.b"])
    h = nc.gelu(_linear_apply(model, prefix + "ffn.lift", x))
    h = _linear_apply(model, prefix + "ffn.drop", h)
    x = nc.layernorm(nc.add(x, h), model[prefix + "ln2.g"], model[prefix + "ln2.b"])
    return nc.dropout(x, cfg.dropout, rng)


def embed_modality(model, feats, m: int, rng=None, collect=None) -> Tensor:
    """Project one modality and add positional encodings: [B x L_in x C].

    Regular PE is indexed by absolute position; the alignment PE bucket
    for position i of a length-L_in input is floor(align_len * i / L_in).
    """
    cfg = model.config
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    if x.ndim != 3:
        raise ContractError(f"embed_modality expects [batch x length x dim], got {x.shape}")
    length = x.shape[1]
    if length > cfg.seq_len:
        raise DataError(
            f"input length {length} exceeds model length {cfg.seq_len}; chunk the input"
        )
    if x.shape[2] != cfg.modality_dims[m]:
        raise DataError(
            f"modality {m} width {x.shape[2]} does not match config {cfg.modality_dims[m]}"
        )
    x = _linear_apply(model, f"mod{m}.proj", x)
    x = nc.add(x, nc.narrow(model[f"mod{m}.pe"], -2, 0, length))
    if cfg.align_pe_embed:
        x = nc.add(x, nc.gather_rows(model["align_pe"], align_buckets(length, cfg.align_len)))
    if collect is not None:
        collect.setdefault("embed_pre_norm", {})[m] = x
    x = nc.layernorm(x, model[f"mod{m}.embed_ln.g"], model[f"mod{m}.embed_ln.b"])
    return nc.dropout(x, cfg.dropout, rng)


def make_bottleneck(model, m: int) -> Tensor:
    """Modality m's bottleneck tokens, with the shared alignment PE added."""
    tokens = model[f"mod{m}.tokens"]
    if model.config.align_pe_tokens:
        tokens = nc.add(tokens, model["align_pe"])
    return tokens


def unimodal_encode(model, embedded: Tensor, m: int, rng=None, collect=None):
    """Run [tokens; latents] through modality m's own encoder blocks."""
    cfg = model.config
    batch = embedded.shape[0]
    tokens = nc.expand_batch(make_bottleneck(model, m), batch)
    seq = nc.concat([tokens, embedded], -2)
    for d in range(cfg.unimodal_depth):
        seq = _encoder_block(model, f"mod{m}.uni{d}.", seq, rng, collect, f"mod{m}.uni{d}")
    tokens_out = nc.narrow(seq, -2, 0, cfg.align_len)
    latents = nc.narrow(seq, -2, cfg.align_len, seq.shape[-2])
    return tokens_out, latents


def fusion_encode(model, token_sets: list, latents: list, rng=None, collect=None) -> Tensor:
    """Cross-modal stage; returns the fused representation [B x L_in x M*C].

    Per block, every modality encodes [all M token sets; its own latents]
    with its own parameters; each token set's next value is the mean of
    its M per-modality updates. The fused output is the channel-wise
    concatenation of the final per-modality latents.
    """
    cfg = model.config
    n_mod = cfg.num_modalities
    ln = cfg.align_len
    for d in range(cfg.fusion_depth):
        updates = [[] for _ in range(n_mod)]  # per token set
        new_latents = []
        for m in range(n_mod):
            seq = nc.concat(token_sets + [latents[m]], -2)
            if collect is not None:
                collect.setdefault("fusion_seq_lens", []).append(seq.shape[-2])
            out = _encoder_block(model, f"mod{m}.fus{d}.", seq, rng, collect, f"mod{m}.fus{d}")
            for j in range(n_mod):
                updates[j].append(nc.narrow(out, -2, j * ln, (j + 1) * ln))
            new_latents.append(nc.narrow(out, -2, n_mod * ln, out.shape[-2]))
        merged = []
        for j in range(n_mod):
            total = updates[j][0]
            for u in updates[j][1:]:
                total = nc.add(total, u)
            merged.append(nc.mul(total, 1.0 / n_mod))
        token_sets = merged
        latents = new_latents
    if collect is not None:
        collect["fusion_latents"] = latents
    return latents[0] if n_mod == 1 else nc.concat(latents, -1)


def encode(model, feats_list, rng=None, collect=None) -> Tensor:
    """Full encoder: per-modality embedding, unimodal blocks, fusion."""
    cfg = model.config
    if len(feats_list) != cfg.num_modalities:
        raise DataError(
            f"model expects {cfg.num_modalities} modalities, got {len(feats_list)}"
        )
    token_sets, latents = [], []
    for m, feats in enumerate(feats_list):
        embedded = embed_modality(model, feats, m, rng, collect)
        tokens, lat = unimodal_encode(model, embedded, m, rng, collect)
        token_sets.append(tokens)
        latents.append(lat)
    return fusion_encode(model, token_sets, latents, rng, collect)


def forward_scene(model, windows, rng=None, collect=None) -> Tensor:
    """Boundary logits [B x 2] for the middle (key) shot of each window."""
    cfg = model.config
    if cfg.num_classes != 2:
        raise ContractError("scene forward needs a 2-class head")
    if cfg.seq_len % 2 == 0:
        raise ConfigError("scene windows need an odd length so the key shot is central")
    windows = [w if isinstance(w, Tensor) else Tensor(w) for w in windows]
    for w in windows:
        if w.ndim != 3 or w.shape[1] != cfg.seq_len:
            raise DataError(
                f"scene windows must be [batch x {cfg.seq_len} x dim], got {w.shape}"
            )
    fused = encode(model, windows, rng, collect)
    if collect is not None:
        collect["fused"] = fused
    key = cfg.seq_len // 2
    row = nc.reshape(nc.narrow(fused, -2, key, key + 1), (fused.shape[0], cfg.fused_width))
    if collect is not None:
        collect["head_input"] = row
    return _linear_apply(model, "head", row)


def encode_sequence(model, feats_list, rng=None, collect=None) -> Tensor:
    """Fused per-position features [L_in x fused_width] for one sequence."""
    feats3 = []
    for f in feats_list:
        t = f if isinstance(f, Tensor) else Tensor(f)
        if t.ndim != 2:
            raise ContractError(f"sequence forward expects 2-D features, got {t.shape}")
        feats3.append(nc.reshape(t, (1,) + t.shape))
    fused = encode(model, feats3, rng, collect)
    if collect is not None:
        collect["fused"] = fused
    return nc.reshape(fused, (fused.shape[1], model.config.fused_width))


def apply_head(model, rows) -> Tensor:
    """Classification head on already-encoded rows."""
    return _linear_apply(model, "head", rows)


def forward_sequence(model, feats_list, rng=None, collect=None) -> Tensor:
    """Per-position logits [L_in x num_classes] for one full sequence."""
    rows = encode_sequence(model, feats_list, rng, collect)
    return _linear_apply(model, "head", rows)


def forward_act(model, feats_list, rng=None, collect=None) -> Tensor:
    """Per-shot turning-point logits [L_in x 5] for one movie."""
    if model.config.num_classes != 5:
        raise ContractError("act forward needs a 5-class head")
    return forward_sequence(model, feats_list, rng, collect)


def forward_synopsis(model, feats, rng=None, collect=None) -> Tensor:
    """Per-sentence turning-point logits [num_sentences x 5]."""
    if model.config.num_modalities != 1:
        raise ContractError("the synopsis model is single-modality")
    if model.config.num_classes != 5:
        raise ContractError("synopsis forward needs a 5-class head")
    return forward_sequence(model, [feats], rng, collect)


# ---- checkpoints ----


def save_checkpoint(path, kind: str, configs: dict, params: dict, extra: dict | None = None):
    """One file: a JSON header line, then named float64 blobs in order."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "configs": {k: v.to_dict() for k, v in configs.items()},
        "params": [
            {"name": name, "shape": list(t.shape)} for name, t in params.items()
        ],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (kind, configs, arrays, extra); bit-exact with what was saved."""
    path = Path(path)
    if not path.exists():
        raise BlobIOError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path} does not start with a checkpoint header") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(
                f"{path} has checkpoint version {header.get('version')}, "
                f"expected {CHECKPOINT_VERSION}"
            )
        arrays = {}
        for meta in header["params"]:
            shape = tuple(int(s) for s in meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise BlobIOError(
                    f"{path}: parameter '{meta['name']}' truncated "
                    f"({len(raw)} of {8 * count} bytes)"
                )
            arrays[meta["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise DataError(f"{path} has trailing bytes after the last parameter")
    configs = {k: ModelConfig.from_dict(v) for k, v in header["configs"].items()}
    return header["kind"], configs, arrays, header.get("extra", {})
