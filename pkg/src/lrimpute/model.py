"""The imputation network: input embedding, alternating low-rank attention
blocks, and an MLP readout.

Layout conventions: hidden states are [..., N, T, D] with arbitrary leading
batch dimensions (training stacks windows along the front). The temporal
block runs attention through a learnable C x D projector shared by all
nodes, which factors the implied T x T attention matrix into rank <= C.
The spatial block correlates static node embeddings instead of data, with
softmax applied to each factor separately so aggregation costs O(N) per
time step and the implied N x N matrix has rank <= the embedding key size.

The only channel mixing along the time axis happens inside temporal
attention; the embedding MLP, feed-forward layers, and readout are all
pointwise, so missing-pattern-specific weights cannot be memorized by
position.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import (
    Tensor,
    add,
    broadcast_to,
    concat,
    constant,
    div,
    layer_norm,
    linear,
    matmul,
    mul,
    parameter,
    relu,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    softmax,
    sqrt,
    swap_axes,
    transpose,
)
from .errors import ConfigError, ContractError, DimensionError, ParseError

CHECKPOINT_MAGIC = b"LRIMPCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    window: int = 24
    input_hidden: int = 16
    node_embed_total: int = 96
    node_embed_key_dim: int = 16
    model_dim: int = 64
    projected_dim: int = 6
    n_layers: int = 3
    ffn_hidden: int = 128
    n_heads: int = 1
    steps_per_day: int = 24
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for f in fields(self):
            if f.name == "layer_norm_eps":
                continue
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be > 0")
        if self.projected_dim >= self.window:
            raise ConfigError(
                f"projected_dim ({self.projected_dim}) must be < window ({self.window})")
        if self.node_embed_key_dim >= self.model_dim:
            raise ConfigError(
                f"node_embed_key_dim ({self.node_embed_key_dim}) must be "
                f"< model_dim ({self.model_dim})")
        if self.node_embed_total % self.window:
            raise ConfigError(
                f"node_embed_total ({self.node_embed_total}) must be divisible "
                f"by window ({self.window})")
        if self.model_dim % self.n_heads:
            raise ConfigError(
                f"model_dim ({self.model_dim}) must be divisible by n_heads ({self.n_heads})")

    @property
    def embed_step_dim(self):
        """Per-step width of the reshaped node embedding."""
        return self.node_embed_total // self.window

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, record):
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(record) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**record)


def _glorot(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class ModelParams:
    """Ordered, named set of learnable tensors."""

    def __init__(self, tensors):
        self._tensors = dict(tensors)

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng([seed, 0xA11])
        d, dm, f = cfg.input_hidden, cfg.model_dim, cfg.ffn_hidden
        ew = cfg.embed_step_dim
        p = {}

        def lin(name, fan_in, fan_out):
            p[f"{name}.w"] = _glorot(rng, fan_in, fan_out)
            p[f"{name}.b"] = np.zeros(fan_out)

        lin("input.mlp1", 1, d)
        lin("input.mlp2", d, d)
        lin("input.proj", d + 2 + ew, dm)
        p["node_embed"] = rng.normal(0.0, 0.02, size=(cfg.n_nodes, cfg.node_embed_total))
        for layer in range(cfg.n_layers):
            t = f"layer{layer}.temporal"
            p[f"{t}.projector"] = rng.normal(0.0, 0.02, size=(cfg.projected_dim, dm))
            for gate in ("in", "out"):
                for w in ("wq", "wk", "wv"):
                    p[f"{t}.{gate}.{w}"] = _glorot(rng, dm, dm)
            for block in ("temporal", "spatial"):
                b = f"layer{layer}.{block}"
                for ln in ("ln1", "ln2"):
                    p[f"{b}.{ln}.gain"] = np.ones(dm)
                    p[f"{b}.{ln}.bias"] = np.zeros(dm)
                lin(f"{b}.ffn1", dm, f)
                lin(f"{b}.ffn2", f, dm)
            s = f"layer{layer}.spatial"
            lin(f"{s}.query", ew, cfg.node_embed_key_dim)
            lin(f"{s}.key", ew, cfg.node_embed_key_dim)
        lin("readout.1", dm, f)
        lin("readout.2", f, 1)
        return cls({name: parameter(arr) for name, arr in p.items()})

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def n_params(self):
        return int(sum(t.size for t in self._tensors.values()))

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_arrays(self, arrays):
        for name, t in self._tensors.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise DimensionError(
                    f"parameter {name}: stored shape {src.shape} != expected {t.data.shape}")
            t.data = np.array(src, dtype=np.float64)

    def clone(self):
        return ModelParams({n: parameter(t.data.copy()) for n, t in self._tensors.items()})


# -- forward pieces -----------------------------------------------------------

def time_encoding(day_pos, steps_per_day):
    """[sin, cos] pair of the time-of-day position, shape [..., T, 2]."""
    pos = np.asarray(day_pos, dtype=np.float64)
    if np.any(pos < 0) or np.any(pos >= steps_per_day):
        raise ContractError(
            f"day positions must lie in [0, {steps_per_day}), got range "
            f"[{pos.min()}, {pos.max()}]")
    angle = pos * (2.0 * np.pi / steps_per_day)
    return np.stack([np.sin(angle), np.cos(angle)], axis=-1)


def _node_embedding_steps(params, cfg, t_steps):
    """Node embedding unfolded to per-step rows, tiled cyclically if the
    requested window differs from the training one."""
    emb = reshape(params["node_embed"], (cfg.n_nodes, cfg.window, cfg.embed_step_dim))
    if t_steps == cfg.window:
        return emb
    reps = -(-t_steps // cfg.window)
    tiled = concat([emb] * reps, axis=1)
    return tiled[:, :t_steps, :]


def input_embed(x, mask, day_pos, cfg, params, strict_window=True):
    """Project [..., N, T] observations to hidden states [..., N, T, D'].

    ``x`` must already be zero at non-input cells; ``mask`` marks those
    input cells and is only used to enforce that contract (the mask itself
    is not a model feature).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if mask_arr.shape != x.shape:
        raise DimensionError(f"mask shape {mask_arr.shape} != input shape {x.shape}")
    if np.any(x.data[mask_arr == 0] != 0.0):
        raise ContractError("input values must be exactly zero outside the input mask")
    n, t_steps = x.shape[-2], x.shape[-1]
    if n != cfg.n_nodes:
        raise DimensionError(f"input has {n} nodes, config expects {cfg.n_nodes}")
    if strict_window and t_steps != cfg.window:
        raise ContractError(
            f"window length {t_steps} != configured {cfg.window} "
            "(pass strict_window=False to run anyway)")
    lead = x.shape[:-2]

    h = reshape(x, x.shape + (1,))
    h = relu(linear(h, params["input.mlp1.w"], params["input.mlp1.b"]))
    h = linear(h, params["input.mlp2.w"], params["input.mlp2.b"])

    enc = time_encoding(day_pos, cfg.steps_per_day)
    if enc.shape != lead + (t_steps, 2):
        raise DimensionError(
            f"day positions shape {enc.shape[:-1]} does not match windows {lead + (t_steps,)}")
    enc = np.broadcast_to(enc.reshape(lead + (1, t_steps, 2)), lead + (n, t_steps, 2))
    emb = broadcast_to(_node_embedding_steps(params, cfg, t_steps),
                       lead + (n, t_steps, cfg.embed_step_dim))
    feats = concat([h, constant(enc.copy()), emb], axis=-1)
    return linear(feats, params["input.proj.w"], params["input.proj.b"])


def _split_heads(t, n_heads):
    if n_heads == 1:
        return [t]
    width = t.shape[-1] // n_heads
    return [t[..., i * width:(i + 1) * width] for i in range(n_heads)]


def projected_attention(z, lp, cfg, collect=None):
    """Two-step temporal attention through the projector; pre-residual output.

    Inflow compresses each node's T steps onto the C projector rows; outflow
    redistributes the compressed summary back to all T steps. The implied
    T x T map is the product of a T x C and a C x T row-stochastic factor.
    """
    head_dim = cfg.model_dim // cfg.n_heads
    inv_temp = 1.0 / np.sqrt(head_dim)
    proj = lp["projector"]

    q_in = matmul(proj, lp["in.wq"])
    k_in = matmul(z, lp["in.wk"])
    v_in = matmul(z, lp["in.wv"])
    compressed = []
    in_scores = []
    for qh, kh, vh in zip(_split_heads(q_in, cfg.n_heads),
                          _split_heads(k_in, cfg.n_heads),
                          _split_heads(v_in, cfg.n_heads)):
        s = softmax(scale(matmul(qh, swap_axes(kh, -1, -2)), inv_temp), axis=-1)
        in_scores.append(s)
        compressed.append(matmul(s, vh))
    summary = concat(compressed, axis=-1) if cfg.n_heads > 1 else compressed[0]

    q_out = matmul(z, lp["out.wq"])
    k_out = matmul(proj, lp["out.wk"])
    v_out = matmul(summary, lp["out.wv"])
    outputs = []
    for idx, (qh, kh, vh) in enumerate(zip(_split_heads(q_out, cfg.n_heads),
                                           _split_heads(k_out, cfg.n_heads),
                                           _split_heads(v_out, cfg.n_heads))):
        s = softmax(scale(matmul(qh, swap_axes(kh, -1, -2)), inv_temp), axis=-1)
        if collect is not None:
            collect.append({"kind": "temporal", "head": idx,
                            "outflow": s.data, "inflow": in_scores[idx].data})
        outputs.append(matmul(s, vh))
    return concat(outputs, axis=-1) if cfg.n_heads > 1 else outputs[0]


def _encoder_wrap(z, mixed, lp_prefix, params, cfg):
    eps = cfg.layer_norm_eps
    res = layer_norm(add(z, mixed),
                     params[f"{lp_prefix}.ln1.gain"], params[f"{lp_prefix}.ln1.bias"], eps)
    ffn = linear(relu(linear(res, params[f"{lp_prefix}.ffn1.w"], params[f"{lp_prefix}.ffn1.b"])),
                 params[f"{lp_prefix}.ffn2.w"], params[f"{lp_prefix}.ffn2.b"])
    return layer_norm(add(res, ffn),
                      params[f"{lp_prefix}.ln2.gain"], params[f"{lp_prefix}.ln2.bias"], eps)


def temporal_block(z, layer, cfg, params, collect=None):
    prefix = f"layer{layer}.temporal"
    lp = {key: params[f"{prefix}.{key}"]
          for key in ("projector", "in.wq", "in.wk", "in.wv", "out.wq", "out.wk", "out.wv")}
    mixed = projected_attention(z, lp, cfg, collect=collect)
    return _encoder_wrap(z, mixed, prefix, params, cfg)


def embedding_attention_factors(layer, cfg, params, collect=None):
    """Row-stochastic query factor and column-stochastic key factor, [N, D_emb].

    Queries and keys come from the temporal mean of the unfolded node
    embedding, Frobenius-normalized for stability; softmax is applied to
    each factor on its own axis so their product is row-stochastic.
    """
    prefix = f"layer{layer}.spatial"
    emb = reshape(params["node_embed"], (cfg.n_nodes, cfg.window, cfg.embed_step_dim))
    mean_emb = reduce_mean(emb, axis=1)
    q = linear(mean_emb, params[f"{prefix}.query.w"], params[f"{prefix}.query.b"])
    k = linear(mean_emb, params[f"{prefix}.key.w"], params[f"{prefix}.key.b"])
    q = div(q, sqrt(reduce_sum(mul(q, q))))
    k = div(k, sqrt(reduce_sum(mul(k, k))))
    q_soft = softmax(q, axis=-1)
    k_soft = softmax(k, axis=0)
    if collect is not None:
        collect.append({"kind": "spatial", "query": q_soft.data, "key": k_soft.data})
    return q_soft, k_soft


def embedded_aggregation(z, q_soft, k_soft):
    """A @ Z_t for every step without materializing A: key side first."""
    zt = swap_axes(z, -3, -2)
    pooled = matmul(transpose(k_soft, (1, 0)), zt)
    return swap_axes(matmul(q_soft, pooled), -3, -2)


def spatial_block(z, layer, cfg, params, collect=None):
    """Aggregate across nodes per time step, at O(N) cost per step."""
    q_soft, k_soft = embedding_attention_factors(layer, cfg, params, collect=collect)
    mixed = embedded_aggregation(z, q_soft, k_soft)
    return _encoder_wrap(z, mixed, f"layer{layer}.spatial", params, cfg)


def readout(z, params):
    h = relu(linear(z, params["readout.1.w"], params["readout.1.b"]))
    out = linear(h, params["readout.2.w"], params["readout.2.b"])
    return reshape(out, out.shape[:-1])


def forward_batch(x, mask, day_pos, cfg, params, collect=None, strict_window=True):
    """Full pipeline on [..., N, T] inputs; returns [..., N, T] imputations."""
    h = input_embed(x, mask, day_pos, cfg, params, strict_window=strict_window)
    for layer in range(cfg.n_layers):
        h = temporal_block(h, layer, cfg, params, collect=collect)
        h = spatial_block(h, layer, cfg, params, collect=collect)
    return readout(h, params)


def forward(window, cfg, params, collect=None):
    """Impute one window; output covers every cell, observed ones included."""
    day_pos = (window.start_step + np.arange(window.x.shape[-1])) % cfg.steps_per_day
    return forward_batch(window.x, window.input_mask(), day_pos, cfg, params, collect=collect)


# -- checkpoint io ------------------------------------------------------------

def save_checkpoint(path, cfg, params, norm_mean, norm_std, seed, step):
    """Versioned binary checkpoint; byte-stable for identical state."""
    names = params.names()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "norm_mean": [float(v) for v in np.asarray(norm_mean)],
        "norm_std": [float(v) for v in np.asarray(norm_std)],
        "seed": int(seed),
        "step": int(step),
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        cfg = ModelConfig.from_dict(header["config"])
        tensors = {}
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ParseError(f"{path}: truncated parameter {meta['name']}")
            tensors[meta["name"]] = parameter(
                np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
    params = ModelParams(tensors)
    norm = (np.array(header["norm_mean"]), np.array(header["norm_std"]))
    return cfg, params, norm, header["seed"], header["step"]
