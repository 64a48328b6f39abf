"""Convolutional U-Net with window self-attention and cross-attention skips.

The encoder doubles its filter count at every stage; the deepest skip
connections pass through attention blocks instead of being copied raw:
encoder features are pooled to a token grid, window-partitioned for
multi-head self-attention, fused with the adjacent shallower stage via
cross-attention, pushed through an MLP, and resized to the decoder
resolution. A plain U-Net is the ``num_swin_blocks = 0`` special case.

Everything is functional: parameters live in an ordered name -> Tensor
dict whose shapes are fully derivable from the config, which is what the
checkpoint loader validates against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import config as cfgmod
from . import tensor as T
from .tensor import ShapeError, Tensor


class CheckpointError(ValueError):
    """Checkpoint rejected: bad magic/version or shape mismatch vs its config."""


@dataclass
class NetworkConfig:
    in_channels: int = 3
    base_filters: int = 8
    depth: int = 4
    num_swin_blocks: int = 3
    swin_embed_dims: tuple | None = None  # default: channel counts of the deepest stages
    num_heads: int = 8
    window_size: int = 4
    mlp_ratio: int = 4
    patch_size: int = 1
    swin_pool: int = 2
    cross_attention: bool = True
    concat_raw_skip: bool = False
    dropout: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("encoder depth must be >= 1")
        if not 0 <= self.num_swin_blocks <= self.depth - 1:
            raise ValueError(
                f"num_swin_blocks must be in [0, depth-1] = [0, {self.depth - 1}], got {self.num_swin_blocks}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.swin_embed_dims is not None:
            self.swin_embed_dims = tuple(int(d) for d in self.swin_embed_dims)
            if len(self.swin_embed_dims) != self.num_swin_blocks:
                raise ValueError("swin_embed_dims must have one entry per attention block")
        for dim in self.embed_dims():
            if dim % self.num_heads:
                raise ValueError(f"embed dim {dim} not divisible by {self.num_heads} heads")

    # stage s in 1..depth has stage_channels(s) filters at resolution H / 2^(s-1)
    def stage_channels(self, stage):
        return self.base_filters * (2 ** (stage - 1))

    @property
    def center_channels(self):
        return self.base_filters * (2**self.depth)

    def swin_stages(self):
        """Encoder stages carrying attention skips, deepest first."""
        return tuple(range(self.depth, self.depth - self.num_swin_blocks, -1))

    def embed_dims(self):
        if self.swin_embed_dims is not None:
            return self.swin_embed_dims
        return tuple(self.stage_channels(s) for s in self.swin_stages())

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def token_reduction(self):
        # spatial shrink from a stage map to its token grid
        return self.swin_pool * self.patch_size

    def validate_input(self, h, w):
        div = 2**self.depth
        if h % div or w % div:
            raise ShapeError(f"input {h}x{w} must be divisible by 2^depth = {div}")
        red = self.token_reduction()
        for stage in self.swin_stages():
            hs, ws = h >> (stage - 1), w >> (stage - 1)
            if hs % red or ws % red:
                raise ShapeError(
                    f"stage {stage} map {hs}x{ws} not divisible by token reduction {red}"
                )
            g_h, g_w = hs // red, ws // red
            win = effective_window(self.window_size, min(g_h, g_w))
            if g_h % win or g_w % win:
                raise ShapeError(
                    f"stage {stage} token grid {g_h}x{g_w} not divisible by window {win}"
                )
        if h >> self.depth < 1 or w >> self.depth < 1:
            raise ShapeError(f"input {h}x{w} too small for {self.depth} pooling stages")

    # -- config (de)serialization for checkpoints --------------------------------

    def to_text(self):
        lines = [
            f"net.in_channels = {self.in_channels}",
            f"net.base_filters = {self.base_filters}",
            f"net.depth = {self.depth}",
            f"net.num_swin_blocks = {self.num_swin_blocks}",
            f"net.swin_embed_dims = {', '.join(str(d) for d in self.embed_dims()) if self.num_swin_blocks else 'none'}",
            f"net.num_heads = {self.num_heads}",
            f"net.window_size = {self.window_size}",
            f"net.mlp_ratio = {self.mlp_ratio}",
            f"net.patch_size = {self.patch_size}",
            f"net.swin_pool = {self.swin_pool}",
            f"net.cross_attention = {str(self.cross_attention).lower()}",
            f"net.concat_raw_skip = {str(self.concat_raw_skip).lower()}",
            f"net.dropout = {self.dropout!r}",
            f"net.dtype = {self.dtype}",
        ]
        return "\n".join(lines)

    @classmethod
    def from_mapping(cls, raw):
        dims_text = cfgmod.get_str(raw, "net.swin_embed_dims", "none")
        dims = None if dims_text == "none" else tuple(int(p) for p in dims_text.split(","))
        return cls(
            in_channels=cfgmod.get_int(raw, "net.in_channels", 3),
            base_filters=cfgmod.get_int(raw, "net.base_filters", 8),
            depth=cfgmod.get_int(raw, "net.depth", 4),
            num_swin_blocks=cfgmod.get_int(raw, "net.num_swin_blocks", 3),
            swin_embed_dims=dims,
            num_heads=cfgmod.get_int(raw, "net.num_heads", 8),
            window_size=cfgmod.get_int(raw, "net.window_size", 4),
            mlp_ratio=cfgmod.get_int(raw, "net.mlp_ratio", 4),
            patch_size=cfgmod.get_int(raw, "net.patch_size", 1),
            swin_pool=cfgmod.get_int(raw, "net.swin_pool", 2),
            cross_attention=cfgmod.get_bool(raw, "net.cross_attention", True),
            concat_raw_skip=cfgmod.get_bool(raw, "net.concat_raw_skip", False),
            dropout=cfgmod.get_float(raw, "net.dropout", 0.1),
            dtype=cfgmod.get_str(raw, "net.dtype", "float32", choices=("float32", "float64")),
        )


def effective_window(window_size, grid):
    """Windows shrink to the token grid when the grid is smaller."""
    return max(1, min(window_size, grid))


# -- parameter bookkeeping ---------------------------------------------------------


def parameter_shapes(cfg: NetworkConfig):
    """Ordered name -> shape map for every learnable tensor (checkpoint contract)."""
    shapes = {}

    def conv(prefix, c_in, c_out, k):
        shapes[f"{prefix}.w"] = (c_out, c_in, k, k)
        shapes[f"{prefix}.b"] = (c_out,)

    c_prev = cfg.in_channels
    for s in range(1, cfg.depth + 1):
        c = cfg.stage_channels(s)
        conv(f"enc{s}.conv1", c_prev, c, 3)
        conv(f"enc{s}.conv2", c, c, 3)
        c_prev = c
    conv("center.conv1", c_prev, cfg.center_channels, 3)
    conv("center.conv2", cfg.center_channels, cfg.center_channels, 3)

    p2 = cfg.patch_size * cfg.patch_size
    for idx, (stage, dim) in enumerate(zip(cfg.swin_stages(), cfg.embed_dims())):
        c_stage = cfg.stage_channels(stage)
        hidden = cfg.mlp_ratio * dim
        shapes[f"swin{idx}.embed.w"] = (c_stage * p2, dim)
        shapes[f"swin{idx}.embed.b"] = (dim,)
        shapes[f"swin{idx}.ln1.gamma"] = (dim,)
        shapes[f"swin{idx}.ln1.beta"] = (dim,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"swin{idx}.attn.{name}"] = (dim, dim)
        if cfg.cross_attention:
            shapes[f"swin{idx}.ca.low.w"] = (cfg.stage_channels(stage - 1), dim)
            shapes[f"swin{idx}.ca.low.b"] = (dim,)
            for name in ("wq", "wk", "wv"):
                shapes[f"swin{idx}.ca.{name}"] = (dim, dim)
        shapes[f"swin{idx}.ln2.gamma"] = (dim,)
        shapes[f"swin{idx}.ln2.beta"] = (dim,)
        shapes[f"swin{idx}.mlp.w1"] = (dim, hidden)
        shapes[f"swin{idx}.mlp.b1"] = (hidden,)
        shapes[f"swin{idx}.mlp.w2"] = (hidden, dim)
        shapes[f"swin{idx}.mlp.b2"] = (dim,)

    skip_channels = {}
    embed_by_stage = dict(zip(cfg.swin_stages(), cfg.embed_dims()))
    for s in range(1, cfg.depth + 1):
        if s in embed_by_stage:
            skip_channels[s] = embed_by_stage[s] + (cfg.stage_channels(s) if cfg.concat_raw_skip else 0)
        else:
            skip_channels[s] = cfg.stage_channels(s)

    c_prev = cfg.center_channels
    for t in range(1, cfg.depth + 1):
        s = cfg.depth - t + 1
        c_out = cfg.stage_channels(s)
        conv(f"dec{t}.reduce", c_prev, c_out, 1)
        conv(f"dec{t}.conv1", c_out + skip_channels[s], c_out, 3)
        conv(f"dec{t}.conv2", c_out, c_out, 3)
        c_prev = c_out
    conv("head", cfg.base_filters, 1, 1)
    return shapes


def _he_uniform(shape, fan_in, rng, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _xavier_uniform(shape, rng, dtype):
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(cfg: NetworkConfig, seed=0):
    """He-uniform convs/MLPs, Xavier-uniform attention projections, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2") or name.endswith(".beta"):
            data = np.zeros(shape, dtype=dtype)
        elif name.endswith(".gamma"):
            data = np.ones(shape, dtype=dtype)
        elif ".attn." in name or ".ca." in name or ".embed." in name:
            data = _xavier_uniform(shape, rng, dtype)
        elif len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            data = _he_uniform(shape, fan_in, rng, dtype)
        else:
            data = _he_uniform(shape, shape[0], rng, dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


# -- attention building blocks ------------------------------------------------------


def multihead_attention(query_src, kv_src, wq, wk, wv, num_heads, wo=None, return_weights=False):
    """Scaled dot-product attention over (batch, tokens, dim) tensors.

    ``query_src`` and ``kv_src`` may differ (cross-attention); heads split
    the embedding, attend independently, and concatenate back.
    """
    b, n_q, dim = query_src.shape
    n_kv = kv_src.shape[1]
    dk = dim // num_heads

    def heads(x, w, n):
        proj = T.matmul(x, w)
        return proj.reshape(b, n, num_heads, dk).transpose(0, 2, 1, 3)

    q = heads(query_src, wq, n_q)
    k = heads(kv_src, wk, n_kv)
    v = heads(kv_src, wv, n_kv)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * float(1.0 / np.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    out = out.transpose(0, 2, 1, 3).reshape(b, n_q, dim)
    if wo is not None:
        out = T.matmul(out, wo)
    if return_weights:
        return out, weights
    return out


def window_partition(tokens, grid_h, grid_w, window):
    """(N, grid_h*grid_w, D) -> (N * n_windows, window*window, D)."""
    n, length, dim = tokens.shape
    if length != grid_h * grid_w:
        raise ShapeError(f"token count {length} does not match grid {grid_h}x{grid_w}")
    if grid_h % window or grid_w % window:
        raise ShapeError(f"grid {grid_h}x{grid_w} not divisible by window {window}")
    gh, gw = grid_h // window, grid_w // window
    x = tokens.reshape(n, gh, window, gw, window, dim)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n * gh * gw, window * window, dim)


def window_merge(windows, n, grid_h, grid_w, window):
    """Inverse of ``window_partition``."""
    gh, gw = grid_h // window, grid_w // window
    dim = windows.shape[-1]
    x = windows.reshape(n, gh, gw, window, window, dim)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, grid_h * grid_w, dim)


def w_msa(tokens, grid_h, grid_w, window, wq, wk, wv, wo, num_heads):
    """Window-partitioned multi-head self-attention (no shift, no position bias)."""
    n = tokens.shape[0]
    windows = window_partition(tokens, grid_h, grid_w, window)
    attended = multihead_attention(windows, windows, wq, wk, wv, num_heads, wo=wo)
    return window_merge(attended, n, grid_h, grid_w, window)


def cross_attention(x_high, x_low, wq, wk, wv, num_heads):
    """Queries from deep features, keys/values from shallow features."""
    if x_high.shape[-1] != x_low.shape[-1]:
        raise ShapeError(f"embed dims differ: {x_high.shape[-1]} vs {x_low.shape[-1]}")
    return multihead_attention(x_high, x_low, wq, wk, wv, num_heads)


def _patchify(feature_map, patch):
    """(N, C, H, W) -> (N, (H/p)*(W/p), C*p*p) token tensor."""
    n, c, h, w = feature_map.shape
    gh, gw = h // patch, w // patch
    x = feature_map.reshape(n, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, gh * gw, c * patch * patch), gh, gw


def swin_block(params, cfg: NetworkConfig, idx, stage_feats, low_feats, training=False, rng=None):
    """One attention skip: tokenize, W-MSA, cross-attend to shallower features, MLP.

    Residuals follow z_hat = x + WMSA(LN(x)) and z = z_hat + MLP(LN(CA(z_hat))).
    The output map is resized back to the stage resolution for the decoder.
    """
    p = params
    key = f"swin{idx}"
    n, _, h_s, w_s = stage_feats.shape
    pooled = T.avgpool2d(stage_feats, cfg.swin_pool)
    tokens, gh, gw = _patchify(pooled, cfg.patch_size)
    x = T.linear(tokens, p[f"{key}.embed.w"], p[f"{key}.embed.b"])

    win = effective_window(cfg.window_size, min(gh, gw))
    normed = T.layernorm(x, p[f"{key}.ln1.gamma"], p[f"{key}.ln1.beta"])
    attended = w_msa(
        normed, gh, gw, win,
        p[f"{key}.attn.wq"], p[f"{key}.attn.wk"], p[f"{key}.attn.wv"], p[f"{key}.attn.wo"],
        cfg.num_heads,
    )
    attended = T.dropout(attended, cfg.dropout, training, rng)
    z_hat = x + attended

    if cfg.cross_attention:
        low_pool = T.avgpool2d(low_feats, cfg.token_reduction())
        low_tokens, _, _ = _patchify(low_pool, 1)
        low_embed = T.linear(low_tokens, p[f"{key}.ca.low.w"], p[f"{key}.ca.low.b"])
        fused = cross_attention(
            z_hat, low_embed,
            p[f"{key}.ca.wq"], p[f"{key}.ca.wk"], p[f"{key}.ca.wv"],
            cfg.num_heads,
        )
        fused = T.dropout(fused, cfg.dropout, training, rng)
    else:
        fused = z_hat

    normed2 = T.layernorm(fused, p[f"{key}.ln2.gamma"], p[f"{key}.ln2.beta"])
    hidden = T.relu(T.linear(normed2, p[f"{key}.mlp.w1"], p[f"{key}.mlp.b1"]))
    mlp_out = T.linear(hidden, p[f"{key}.mlp.w2"], p[f"{key}.mlp.b2"])
    mlp_out = T.dropout(mlp_out, cfg.dropout, training, rng)
    z = z_hat + mlp_out

    dim = z.shape[-1]
    spatial = z.reshape(n, gh, gw, dim).transpose(0, 3, 1, 2)
    return T.bilinear_resize(spatial, h_s, w_s)


# -- full network -------------------------------------------------------------------


def _double_conv(x, params, prefix):
    x = T.relu(T.conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], padding=1))
    return T.relu(T.conv2d(x, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], padding=1))


def encoder_block(x, params, stage):
    """Two 3x3 conv + ReLU layers for one encoder stage (pooling happens outside)."""
    return _double_conv(x, params, f"enc{stage}")


def forward(params, cfg: NetworkConfig, x, training=False, rng=None):
    """Image (3,H,W) or batch (N,3,H,W), normalized units, to depth map(s) 1xHxW."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=cfg.np_dtype))
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    n, _, h, w = x.shape
    cfg.validate_input(h, w)
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training-mode forward needs an rng (dropout determinism)")

    enc_feats = []
    cur = x
    for s in range(1, cfg.depth + 1):
        cur = encoder_block(cur, params, s)
        enc_feats.append(cur)
        cur = T.maxpool2d(cur, 2)
    cur = _double_conv(cur, params, "center")

    skips = {}
    for idx, stage in enumerate(cfg.swin_stages()):
        skip = swin_block(params, cfg, idx, enc_feats[stage - 1], enc_feats[stage - 2], training, rng)
        if cfg.concat_raw_skip:
            skip = T.concat([skip, enc_feats[stage - 1]], axis=1)
        skips[stage] = skip

    for t in range(1, cfg.depth + 1):
        s = cfg.depth - t + 1
        target_h, target_w = enc_feats[s - 1].shape[2], enc_feats[s - 1].shape[3]
        cur = T.bilinear_resize(cur, target_h, target_w)
        cur = T.relu(T.conv2d(cur, params[f"dec{t}.reduce.w"], params[f"dec{t}.reduce.b"]))
        skip = skips.get(s, enc_feats[s - 1])
        cur = T.concat([cur, skip], axis=1)
        cur = _double_conv(cur, params, f"dec{t}")

    out = T.conv2d(cur, params["head.w"], params["head.b"])
    return out.reshape(*out.shape[1:]) if squeeze else out


# -- checkpoints --------------------------------------------------------------------

MAGIC = b"SBUN"
VERSION = 1


def save_checkpoint(path, params, cfg: NetworkConfig, extra=None):
    """Binary checkpoint: magic, version, embedded config text, tensor records."""
    lines = [cfg.to_text()]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key} = {value}")
    text = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read, validate against the embedded config, and return (params, cfg, extra)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (text_len,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    raw = cfgmod.parse_config_text(blob[pos : pos + text_len].decode("utf-8"), source=str(path))
    pos += text_len
    cfg = NetworkConfig.from_mapping(raw)
    extra = {k: v for k, v in raw.items() if not k.startswith("net.")}
    expected = parameter_shapes(cfg)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r} for the embedded config")
        if tuple(shape) != expected[name]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tuple(shape)}, config implies {expected[name]}"
            )
        params[name] = Tensor(data.astype(cfg.np_dtype), requires_grad=True)
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:3]}{'...' if len(missing) > 3 else ''}")
    return params, cfg, extra


def micro_config(**overrides):
    """Smallest config that still exercises every architectural feature.

    swin_pool stays 1 so even the deepest block attends over multiple
    tokens (a 1-token window would leave W_Q/W_K without gradient).
    """
    base = dict(
        base_filters=4,
        depth=3,
        num_swin_blocks=2,
        swin_embed_dims=(8, 8),
        num_heads=1,
        window_size=2,
        swin_pool=1,
        dropout=0.0,
    )
    base.update(overrides)
    return NetworkConfig(**base)
