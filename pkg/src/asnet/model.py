"""Inference-only forward pass: channel projection, encoder, twin decoders, cross-branch attention, heads.

Features are stored row-wise (one token per row) and linear maps are applied
as ``x @ w + b`` with ``w`` shaped (fan_in, fan_out).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .tensor_core import (
    AttentionWeights,
    ConfigError,
    RngStream,
    ShapeError,
    layer_norm_rows,
    multi_head_attention,
    relu,
    sigmoid,
    softmax_rows,
)

IA_MODES = ("all", "alternate", "none")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 256
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    heads: int = 8
    d_ff: int = 2048
    N_d: int = 100
    N_r: int = 16
    L_d: int = 80
    L: int = 117
    K: int = 8
    in_channels: int = 2048
    ia_attention_layers: tuple[int, ...] | None = None  # None means every decoder layer

    def __post_init__(self):
        for name in ("d", "n_enc_layers", "n_dec_layers", "heads", "d_ff", "N_d", "N_r", "L_d", "L", "K", "in_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.ia_attention_layers is None:
            object.__setattr__(self, "ia_attention_layers", tuple(range(1, self.n_dec_layers + 1)))
        else:
            layers = tuple(sorted(set(int(i) for i in self.ia_attention_layers)))
            if any(not 1 <= i <= self.n_dec_layers for i in layers):
                raise ConfigError(f"ia_attention_layers {layers} not within 1..{self.n_dec_layers}")
            object.__setattr__(self, "ia_attention_layers", layers)

    def with_ia_mode(self, mode: str) -> "ModelConfig":
        return replace(self, ia_attention_layers=ia_layers_for(mode, self.n_dec_layers))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ia_attention_layers"] = list(self.ia_attention_layers)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)


def ia_layers_for(mode: str, n_layers: int) -> tuple[int, ...]:
    if mode == "all":
        return tuple(range(1, n_layers + 1))
    if mode == "alternate":
        return tuple(range(2, n_layers + 1, 2))
    if mode == "none":
        return ()
    raise ConfigError(f"unknown instance-aware attention mode {mode!r}; expected one of {IA_MODES}")


@dataclass(frozen=True)
class FeatureGrid:
    """Spatial features stored (height, width, channels); tokens flatten row by row."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != self.width * self.height * self.channels:
            raise ShapeError(
                f"grid data has {arr.size} values, expected {self.width}x{self.height}x{self.channels}"
            )
        object.__setattr__(self, "data", arr.reshape(self.height, self.width, self.channels))


# ---------------------------------------------------------------------------
# parameters

_ATTN = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def _attn_spec(prefix, d):
    return [(f"{prefix}.{n}", (d, d) if n[0] == "w" else (d,)) for n in _ATTN]


def _ffn_spec(prefix, d, d_ff):
    return [(f"{prefix}.w1", (d, d_ff)), (f"{prefix}.b1", (d_ff,)), (f"{prefix}.w2", (d_ff, d)), (f"{prefix}.b2", (d,))]


def _norm_spec(prefix, d):
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def _mlp3_spec(prefix, d, out):
    return [
        (f"{prefix}.w1", (d, d)), (f"{prefix}.b1", (d,)),
        (f"{prefix}.w2", (d, d)), (f"{prefix}.b2", (d,)),
        (f"{prefix}.w3", (d, out)), (f"{prefix}.b3", (out,)),
    ]


def weight_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter tensor in initialization order."""
    d = cfg.d
    spec = [("input_proj.w", (cfg.in_channels, d)), ("input_proj.b", (d,))]
    spec += [("query.instance", (cfg.N_d, d)), ("query.interaction", (cfg.N_r, d))]
    for l in range(1, cfg.n_enc_layers + 1):
        p = f"enc.{l}"
        spec += _attn_spec(f"{p}.self_attn", d) + _norm_spec(f"{p}.norm1", d)
        spec += _ffn_spec(f"{p}.ffn", d, cfg.d_ff) + _norm_spec(f"{p}.norm2", d)
    for branch in ("ins_dec", "int_dec"):
        for l in range(1, cfg.n_dec_layers + 1):
            p = f"{branch}.{l}"
            spec += _attn_spec(f"{p}.self_attn", d) + _norm_spec(f"{p}.norm1", d)
            spec += _attn_spec(f"{p}.cross_attn", d) + _norm_spec(f"{p}.norm2", d)
            spec += _ffn_spec(f"{p}.ffn", d, cfg.d_ff) + _norm_spec(f"{p}.norm3", d)
    # one cross-branch module per decoder layer, so the layer selection never changes the parameter set
    for l in range(1, cfg.n_dec_layers + 1):
        p = f"ia.{l}"
        spec += [
            (f"{p}.w_r", (d, d)), (f"{p}.b_r", (d,)),
            (f"{p}.w_d", (d, d)), (f"{p}.b_d", (d,)),
            (f"{p}.w_dp", (d, d)), (f"{p}.b_dp", (d,)),
        ]
    spec += _mlp3_spec("ins_head.box", d, 4)
    spec += [("ins_head.cls.w", (d, cfg.L_d + 1)), ("ins_head.cls.b", (cfg.L_d + 1,))]
    spec += [("ins_head.emb.w", (d, cfg.K)), ("ins_head.emb.b", (cfg.K,))]
    spec += _mlp3_spec("int_head.vec", d, 4)
    spec += [("int_head.verb.w", (d, cfg.L)), ("int_head.verb.b", (cfg.L,))]
    spec += [("int_head.emb_h.w", (d, cfg.K)), ("int_head.emb_h.b", (cfg.K,))]
    spec += [("int_head.emb_o.w", (d, cfg.K)), ("int_head.emb_o.b", (cfg.K,))]
    return spec


def init_bound(shape: tuple[int, ...]) -> float:
    fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    tensors: dict = field(repr=False)

    def __post_init__(self):
        expected = dict(weight_spec(self.config))
        missing = expected.keys() - self.tensors.keys()
        extra = self.tensors.keys() - expected.keys()
        if missing or extra:
            raise ShapeError(f"weight set mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"tensor {name} has shape {arr.shape}, config requires {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"tensor {name} has non-finite entries")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def attention(self, prefix: str) -> AttentionWeights:
        return AttentionWeights(*(self.tensors[f"{prefix}.{n}"] for n in _ATTN))

    def replace_tensors(self, **updates) -> "ModelWeights":
        tensors = dict(self.tensors)
        for key, value in updates.items():
            tensors[key.replace("__", ".")] = value
        return ModelWeights(self.config, tensors)

    def with_zero_ia_projection(self) -> "ModelWeights":
        tensors = dict(self.tensors)
        for l in range(1, self.config.n_dec_layers + 1):
            tensors[f"ia.{l}.w_dp"] = np.zeros_like(tensors[f"ia.{l}.w_dp"])
            tensors[f"ia.{l}.b_dp"] = np.zeros_like(tensors[f"ia.{l}.b_dp"])
        return ModelWeights(self.config, tensors)


def init_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Matrices ~ U(-b, b) with b = sqrt(6 / (fan_in + fan_out)), drawn in ``weight_spec`` order
    from one RngStream(seed); biases and layer-norm biases are 0, layer-norm gains are 1."""
    rng = RngStream(seed)
    tensors = {}
    for name, shape in weight_spec(cfg):
        if len(shape) == 2:
            b = init_bound(shape)
            tensors[name] = rng.uniform(shape[0] * shape[1], -b, b).reshape(shape)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# forward pass


def project_and_flatten(grid: FeatureGrid, weights: ModelWeights) -> np.ndarray:
    w = weights["input_proj.w"]
    if grid.channels != w.shape[0]:
        raise ShapeError(f"grid has {grid.channels} channels, projection expects {w.shape[0]}")
    flat = grid.data.reshape(grid.height * grid.width, grid.channels)
    return flat @ w + weights["input_proj.b"]


def positional_encoding_2d(width: int, height: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Sine encoding: first d/2 columns encode the row (y), last d/2 the column (x).

    Positions are normalized to (0, 2*pi]; within each half, even columns are sin
    and odd columns cos of the same frequency.
    """
    if d % 4:
        raise ConfigError(f"positional encoding width {d} must be divisible by 4")
    half = d // 2
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    ys = (np.arange(height) + 1.0) / height * 2 * np.pi
    xs = (np.arange(width) + 1.0) / width * 2 * np.pi

    def encode(pos):
        ang = pos[:, None] / dim_t
        out = np.empty_like(ang)
        out[:, 0::2] = np.sin(ang[:, 0::2])
        out[:, 1::2] = np.cos(ang[:, 1::2])
        return out

    ey = np.repeat(encode(ys), width, axis=0)
    ex = np.tile(encode(xs), (height, 1))
    return np.concatenate([ey, ex], axis=1)


def _ffn(x, weights, prefix):
    return relu(x @ weights[f"{prefix}.w1"] + weights[f"{prefix}.b1"]) @ weights[f"{prefix}.w2"] + weights[f"{prefix}.b2"]


def _norm(x, weights, prefix):
    return layer_norm_rows(x, weights[f"{prefix}.gain"], weights[f"{prefix}.bias"])


def encoder_layer_forward(src, pos, weights: ModelWeights, prefix: str, heads: int) -> np.ndarray:
    qk = src + pos
    src = _norm(src + multi_head_attention(qk, qk, src, weights.attention(f"{prefix}.self_attn"), heads), weights, f"{prefix}.norm1")
    return _norm(src + _ffn(src, weights, f"{prefix}.ffn"), weights, f"{prefix}.norm2")


def encoder_forward(seq, pos, weights: ModelWeights, cfg: ModelConfig) -> np.ndarray:
    if seq.shape != pos.shape or seq.shape[1] != cfg.d:
        raise ShapeError(f"sequence {seq.shape} and positional encoding {pos.shape} must both be (tokens x {cfg.d})")
    for l in range(1, cfg.n_enc_layers + 1):
        seq = encoder_layer_forward(seq, pos, weights, f"enc.{l}", cfg.heads)
    return seq


def decoder_layer_forward(tgt, query_pos, memory, memory_pos, weights: ModelWeights, prefix: str, heads: int):
    """One decoder layer. Returns (output features, head-averaged co-attention map)."""
    if tgt.shape != query_pos.shape or memory.shape != memory_pos.shape or tgt.shape[1] != memory.shape[1]:
        raise ShapeError(f"decoder shapes disagree: tgt {tgt.shape}, query pe {query_pos.shape}, memory {memory.shape}")
    qk = tgt + query_pos
    tgt = _norm(tgt + multi_head_attention(qk, qk, tgt, weights.attention(f"{prefix}.self_attn"), heads), weights, f"{prefix}.norm1")
    co, co_map = multi_head_attention(
        tgt + query_pos, memory + memory_pos, memory, weights.attention(f"{prefix}.cross_attn"), heads, return_attention=True
    )
    tgt = _norm(tgt + co, weights, f"{prefix}.norm2")
    return _norm(tgt + _ffn(tgt, weights, f"{prefix}.ffn"), weights, f"{prefix}.norm3"), co_map


def instance_aware_attention(f_r, f_d, weights: ModelWeights, layer: int):
    """Returns (updated interaction features, attention map M of shape N_r x N_d)."""
    if f_r.shape[1] != f_d.shape[1]:
        raise ShapeError(f"interaction features {f_r.shape} and instance features {f_d.shape} differ in width")
    p = f"ia.{layer}"
    d = f_r.shape[1]
    affinity = (f_r @ weights[f"{p}.w_r"] + weights[f"{p}.b_r"]) @ (f_d @ weights[f"{p}.w_d"] + weights[f"{p}.b_d"]).T / np.sqrt(d)
    m = softmax_rows(affinity)
    return m @ (f_d @ weights[f"{p}.w_dp"] + weights[f"{p}.b_dp"]) + f_r, m


def _mlp3(x, weights, prefix):
    h = relu(x @ weights[f"{prefix}.w1"] + weights[f"{prefix}.b1"])
    h = relu(h @ weights[f"{prefix}.w2"] + weights[f"{prefix}.b2"])
    return h @ weights[f"{prefix}.w3"] + weights[f"{prefix}.b3"]


@dataclass(frozen=True)
class InstancePredictions:
    boxes: np.ndarray  # N_d x 4, (cx, cy, w, h)
    logits: np.ndarray  # N_d x (L_d + 1); last column is no-object
    probs: np.ndarray
    embeddings: np.ndarray  # N_d x K


@dataclass(frozen=True)
class InteractionPredictions:
    vectors: np.ndarray  # N_r x 4, (xh, yh, xo, yo)
    verb_logits: np.ndarray  # N_r x L
    verb_scores: np.ndarray
    emb_h: np.ndarray
    emb_o: np.ndarray


def instance_head(f_d, weights: ModelWeights) -> InstancePredictions:
    logits = f_d @ weights["ins_head.cls.w"] + weights["ins_head.cls.b"]
    return InstancePredictions(
        boxes=sigmoid(_mlp3(f_d, weights, "ins_head.box")),
        logits=logits,
        probs=softmax_rows(logits),
        embeddings=f_d @ weights["ins_head.emb.w"] + weights["ins_head.emb.b"],
    )


def interaction_head(f_r, weights: ModelWeights) -> InteractionPredictions:
    logits = f_r @ weights["int_head.verb.w"] + weights["int_head.verb.b"]
    return InteractionPredictions(
        vectors=sigmoid(_mlp3(f_r, weights, "int_head.vec")),
        verb_logits=logits,
        verb_scores=sigmoid(logits),
        emb_h=f_r @ weights["int_head.emb_h.w"] + weights["int_head.emb_h.b"],
        emb_o=f_r @ weights["int_head.emb_o.w"] + weights["int_head.emb_o.b"],
    )


@dataclass(frozen=True)
class LayerRecord:
    layer: int
    instance_co_attention: np.ndarray  # N_d x WH
    interaction_co_attention: np.ndarray  # N_r x WH
    ia_map: np.ndarray | None  # N_r x N_d when instance-aware attention ran after this layer
    instance_features: np.ndarray
    interaction_features: np.ndarray


@dataclass(frozen=True)
class ForwardOutput:
    instances: InstancePredictions
    interactions: InteractionPredictions
    records: tuple[LayerRecord, ...]
    grid_size: tuple[int, int]  # (width, height)


def forward_full(grid: FeatureGrid, weights: ModelWeights, cfg: ModelConfig | None = None) -> ForwardOutput:
    """``cfg`` may differ from ``weights.config`` only in ``ia_attention_layers``."""
    cfg = cfg or weights.config
    if replace(cfg, ia_attention_layers=weights.config.ia_attention_layers) != weights.config:
        raise ShapeError("model config does not match the weights' config")
    pos = positional_encoding_2d(grid.width, grid.height, cfg.d)
    memory = encoder_forward(project_and_flatten(grid, weights), pos, weights, cfg)

    q_d, q_r = weights["query.instance"], weights["query.interaction"]
    f_d = np.zeros_like(q_d)
    f_r = np.zeros_like(q_r)
    ia_layers = set(cfg.ia_attention_layers)
    records = []
    for l in range(1, cfg.n_dec_layers + 1):
        f_d, co_d = decoder_layer_forward(f_d, q_d, memory, pos, weights, f"ins_dec.{l}", cfg.heads)
        f_r, co_r = decoder_layer_forward(f_r, q_r, memory, pos, weights, f"int_dec.{l}", cfg.heads)
        ia_map = None
        if l in ia_layers:
            f_r, ia_map = instance_aware_attention(f_r, f_d, weights, l)
        records.append(LayerRecord(l, co_d, co_r, ia_map, f_d, f_r))
    return ForwardOutput(instance_head(f_d, weights), interaction_head(f_r, weights), tuple(records), (grid.width, grid.height))


# ---------------------------------------------------------------------------
# weight files: JSON manifest + little-endian float64 blob


def save_weights(weights: ModelWeights, manifest_path) -> None:
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    entries = []
    offset = 0
    tmp_blob = blob_path.with_name(blob_path.name + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for name, shape in weight_spec(weights.config):
            raw = np.ascontiguousarray(weights[name], dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    os.replace(tmp_blob, blob_path)
    doc = {"format": "asnet-weights/1", "dtype": "<f8", "blob": blob_path.name,
           "config": weights.config.to_dict(), "tensors": entries}
    tmp = manifest_path.with_name(manifest_path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, manifest_path)


def load_weights(manifest_path, cfg: ModelConfig | None = None) -> ModelWeights:
    """Loads a weight manifest; ``cfg`` (if given) must agree with every tensor shape."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    file_cfg = ModelConfig.from_dict(doc["config"])
    cfg = cfg or file_cfg
    blob = (manifest_path.parent / doc["blob"]).read_bytes()
    expected = dict(weight_spec(cfg))
    tensors = {}
    for entry in doc["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise ShapeError(f"{manifest_path}: unexpected tensor {name}")
        if shape != expected[name]:
            raise ShapeError(f"{manifest_path}: tensor {name} has shape {shape}, config requires {expected[name]}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != 8 * int(np.prod(shape)) or start + nbytes > len(blob):
            raise ShapeError(f"{manifest_path}: tensor {name} byte range is inconsistent with its shape")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=start).reshape(shape).astype(np.float64)
    return ModelWeights(cfg, tensors)
