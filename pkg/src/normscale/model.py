"""Desk-scale decoder-only transformer with parameter-free RMSNorm before every linear map.

Parameters live in an ordered ``dict`` of ``(d_out, d_in)`` matrices. The
input embedding is stored in matrix orientation ``(d_model, vocab)``, so the
embedding of token ``t`` is column ``t``; the output projection is
``(vocab, d_model)``. Forward and backward passes are written out by hand in
numpy.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .linalg import row_normalized_gaussian_init, semi_orthogonal_init
from .norms import NormKind
from .scion import DEFAULT_NORMS, LayerGroup, ParamGroup

NORM_EPS = 1e-20
INIT_SCHEMES = ("identity", "total-depth", "relative-depth")
RESIDUAL_SCHEMES = ("identity", "depth-normalized", "completeP")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 4
    d_head: int = 16
    mlp_factor: float = 2.75
    vocab_size: int = 257
    context_len: int = 128
    rope_theta: float = 10000.0
    init_scheme: str = "total-depth"
    residual_scheme: str = "identity"
    ffn_depth_offset: bool = False
    tie_embeddings: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be a multiple of n_kv_heads")
        if self.d_head % 2:
            raise ValueError("d_head must be even for rotary embeddings")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if min(self.d_model, self.n_layers, self.context_len) < 1:
            raise ValueError("dimensions must be positive")
        if self.tie_embeddings:
            raise ValueError("tied embeddings are not supported")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")
        if self.residual_scheme not in RESIDUAL_SCHEMES:
            raise ValueError(f"unknown residual_scheme {self.residual_scheme!r}")

    @property
    def d_ff(self) -> int:
        return int(round(self.mlp_factor * self.d_model))

    @property
    def residual_coeffs(self):
        n2 = 2 * self.n_layers
        if self.residual_scheme == "depth-normalized":
            return (n2 - 1) / n2, 1.0 / n2
        if self.residual_scheme == "completeP":
            return 1.0, 1.0 / n2
        return 1.0, 1.0

    def depth_gain(self, layer: int, branch: str) -> float:
        """Init multiplier for the residual-feeding matrix of ``branch`` in block ``layer``."""
        if self.init_scheme == "total-depth":
            return 1.0 / math.sqrt(2 * self.n_layers)
        if self.init_scheme == "relative-depth":
            depth = 2 * layer + 1
            if branch == "mlp" and not self.ffn_depth_offset:
                depth += 1
            return 1.0 / math.sqrt(2 * depth)
        return 1.0


def _shapes(cfg: ModelConfig):
    d, dh = cfg.d_model, cfg.d_head
    shapes = {"embed": (d, cfg.vocab_size)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn.wq"] = (cfg.n_heads * dh, d)
        shapes[p + "attn.wk"] = (cfg.n_kv_heads * dh, d)
        shapes[p + "attn.wv"] = (cfg.n_kv_heads * dh, d)
        shapes[p + "attn.wo"] = (d, cfg.n_heads * dh)
        shapes[p + "mlp.w1"] = (cfg.d_ff, d)
        shapes[p + "mlp.w3"] = (cfg.d_ff, d)
        shapes[p + "mlp.w2"] = (d, cfg.d_ff)
    shapes["unembed"] = (cfg.vocab_size, d)
    return shapes


def layer_group_of(name: str) -> LayerGroup:
    if name == "embed":
        return LayerGroup.INPUT
    if name == "unembed":
        return LayerGroup.OUTPUT
    return LayerGroup.HIDDEN


def param_groups(params, lr_scales=None) -> dict:
    """Map each parameter name to its ``ParamGroup`` (input, hidden or output)."""
    lr_scales = {LayerGroup(k): v for k, v in (lr_scales or {}).items()}
    groups = {}
    for name in params:
        lg = layer_group_of(name)
        groups[name] = ParamGroup(name, lg, DEFAULT_NORMS[lg], lr_scales.get(lg, 1.0))
    return groups


def build_model(cfg: ModelConfig, rng) -> dict:
    """Initialize parameters.

    Hidden matrices are semi-orthogonal with gain ``sqrt(d_out/d_in)``; the
    attention output and MLP down projections additionally carry the depth
    gain of ``cfg.init_scheme``. The input embedding has unit-RMS token
    columns and the output projection has unit ``RMS -> inf`` norm.
    """
    params = {}
    for name, (d_out, d_in) in _shapes(cfg).items():
        if name == "embed":
            params[name] = row_normalized_gaussian_init(d_in, d_out, 1.0, rng).T.copy()
        elif name == "unembed":
            params[name] = row_normalized_gaussian_init(d_out, d_in, 1.0 / d_in, rng)
        else:
            gain = math.sqrt(d_out / d_in)
            if name.endswith("attn.wo") or name.endswith("mlp.w2"):
                layer = int(name.split(".")[1])
                gain *= cfg.depth_gain(layer, "attn" if "attn" in name else "mlp")
            params[name] = semi_orthogonal_init(d_out, d_in, gain, rng)
    dtype = np.dtype(cfg.dtype)
    return {k: v.astype(dtype) for k, v in params.items()}


# -- building blocks -------------------------------------------------------

def _rmsnorm(x):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x / r, r


def _rmsnorm_bwd(dy, y, r):
    return (dy - y * np.mean(dy * y, axis=-1, keepdims=True)) / r


def _rope_tables(cfg: ModelConfig, T: int, dtype):
    half = cfg.d_head // 2
    inv_freq = cfg.rope_theta ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(T, dtype=np.float64)[:, None] * inv_freq[None, :]
    # broadcast over (B, T, heads, half)
    return np.cos(angles).astype(dtype)[:, None, :], np.sin(angles).astype(dtype)[:, None, :]


def _rope(x, cos, sin):
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_bwd(dy, cos, sin):
    h = dy.shape[-1] // 2
    d1, d2 = dy[..., :h], dy[..., h:]
    return np.concatenate([d1 * cos + d2 * sin, -d1 * sin + d2 * cos], axis=-1)


def _linear(x, W):
    return x @ W.T


def _linear_bwd(dy, x, W):
    d_out = dy.shape[-1]
    dW = dy.reshape(-1, d_out).T @ x.reshape(-1, x.shape[-1])
    return dy @ W, dW


# -- forward / backward ----------------------------------------------------

def forward_loss(params: dict, cfg: ModelConfig, tokens):
    """Mean next-token cross-entropy over a ``(B, T)`` batch of token ids.

    Returns ``(loss, cache)``; the cache feeds ``backward`` and also exposes
    the input of every linear map under ``cache["linear_inputs"]``.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, context), got shape {tokens.shape}")
    B, T = tokens.shape
    if T < 2:
        raise ValueError("need at least two tokens per sequence to predict anything")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range for vocab_size={cfg.vocab_size}")
    dtype = params["embed"].dtype
    H, Hkv, dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
    alpha, beta = cfg.residual_coeffs
    cos, sin = _rope_tables(cfg, T, dtype)
    mask = np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)
    scale = dtype.type(1.0 / math.sqrt(dh))

    x = params["embed"].T[tokens]
    cache = {"tokens": tokens, "layers": [], "linear_inputs": {}}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        lc = {}
        h, h_r = _rmsnorm(x)
        q = _linear(h, params[p + "attn.wq"]).reshape(B, T, H, dh)
        k = _linear(h, params[p + "attn.wk"]).reshape(B, T, Hkv, dh)
        v = _linear(h, params[p + "attn.wv"])
        qn, q_r = _rmsnorm(q)
        kn, k_r = _rmsnorm(k)
        vn, v_r = _rmsnorm(v)
        qh = _rope(qn, cos, sin).transpose(0, 2, 1, 3)
        kh = np.repeat(_rope(kn, cos, sin), H // Hkv, axis=2).transpose(0, 2, 1, 3)
        vh = np.repeat(vn.reshape(B, T, Hkv, dh), H // Hkv, axis=2).transpose(0, 2, 1, 3)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale + mask
        scores -= scores.max(axis=-1, keepdims=True)
        P = np.exp(scores)
        P /= P.sum(axis=-1, keepdims=True)
        o = (P @ vh).transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        on, o_r = _rmsnorm(o)
        a = _linear(on, params[p + "attn.wo"])
        x_mid = alpha * x + beta * a

        h2, h2_r = _rmsnorm(x_mid)
        u = _linear(h2, params[p + "mlp.w1"])
        g = _linear(h2, params[p + "mlp.w3"])
        sig = 0.5 * (1.0 + np.tanh(0.5 * u))
        silu = u * sig
        s = silu * g
        sn, s_r = _rmsnorm(s)
        m = _linear(sn, params[p + "mlp.w2"])
        x = alpha * x_mid + beta * m

        lc.update(h=h, h_r=h_r, qn=qn, q_r=q_r, kn=kn, k_r=k_r, vn=vn, v_r=v_r,
                  qh=qh, kh=kh, vh=vh, P=P, on=on, o_r=o_r,
                  h2=h2, h2_r=h2_r, u=u, g=g, sig=sig, silu=silu, sn=sn, s_r=s_r)
        cache["layers"].append(lc)
        li = cache["linear_inputs"]
        for w in ("wq", "wk", "wv"):
            li[p + "attn." + w] = h
        li[p + "attn.wo"] = on
        li[p + "mlp.w1"] = h2
        li[p + "mlp.w3"] = h2
        li[p + "mlp.w2"] = sn

    hf, hf_r = _rmsnorm(x)
    logits = _linear(hf, params["unembed"])[:, :-1]
    logits = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    logp = logits - logz
    targets = tokens[:, 1:]
    loss = -np.take_along_axis(logp, targets[..., None], axis=-1).mean()
    cache.update(hf=hf, hf_r=hf_r, logp=logp, cos=cos, sin=sin, scale=scale)
    cache["linear_inputs"]["unembed"] = hf
    return float(loss), cache


def backward(params: dict, cfg: ModelConfig, cache) -> dict:
    """Exact gradient of the mean loss for every entry of ``params``.

    Entries the forward pass never touched receive zero gradients.
    """
    grads = {name: np.zeros_like(W) for name, W in params.items()}
    tokens = cache["tokens"]
    B, T = tokens.shape
    H, Hkv, dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
    rep = H // Hkv
    alpha, beta = cfg.residual_coeffs
    cos, sin, scale = cache["cos"], cache["sin"], cache["scale"]

    n_pred = B * (T - 1)
    dlogits = np.exp(cache["logp"])
    np.put_along_axis(
        dlogits, tokens[:, 1:, None],
        np.take_along_axis(dlogits, tokens[:, 1:, None], axis=-1) - 1.0, axis=-1,
    )
    dlogits /= n_pred
    dlogits = np.concatenate([dlogits, np.zeros_like(dlogits[:, :1])], axis=1)
    dhf, grads["unembed"] = _linear_bwd(dlogits, cache["hf"], params["unembed"])
    dx = _rmsnorm_bwd(dhf, cache["hf"], cache["hf_r"])

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]
        # MLP branch
        dm = beta * dx
        dx = alpha * dx
        dsn, grads[p + "mlp.w2"] = _linear_bwd(dm, c["sn"], params[p + "mlp.w2"])
        ds = _rmsnorm_bwd(dsn, c["sn"], c["s_r"])
        dg = ds * c["silu"]
        sig = c["sig"]
        du = ds * c["g"] * (sig + c["u"] * sig * (1.0 - sig))
        dh2a, grads[p + "mlp.w1"] = _linear_bwd(du, c["h2"], params[p + "mlp.w1"])
        dh2b, grads[p + "mlp.w3"] = _linear_bwd(dg, c["h2"], params[p + "mlp.w3"])
        dx = dx + _rmsnorm_bwd(dh2a + dh2b, c["h2"], c["h2_r"])

        # attention branch
        da = beta * dx
        dx = alpha * dx
        don, grads[p + "attn.wo"] = _linear_bwd(da, c["on"], params[p + "attn.wo"])
        do = _rmsnorm_bwd(don, c["on"], c["o_r"])
        do = do.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        P = c["P"]
        dP = do @ c["vh"].transpose(0, 1, 3, 2)
        dvh = P.transpose(0, 1, 3, 2) @ do
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale
        dqh = dS @ c["kh"]
        dkh = dS.transpose(0, 1, 3, 2) @ c["qh"]

        dq = _rope_bwd(dqh.transpose(0, 2, 1, 3), cos, sin)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, Hkv, rep, dh).sum(axis=3)
        dk = _rope_bwd(dk, cos, sin)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, Hkv, rep, dh).sum(axis=3)
        dq = _rmsnorm_bwd(dq, c["qn"], c["q_r"]).reshape(B, T, H * dh)
        dk = _rmsnorm_bwd(dk, c["kn"], c["k_r"]).reshape(B, T, Hkv * dh)
        dv = _rmsnorm_bwd(dv.reshape(B, T, Hkv * dh), c["vn"], c["v_r"])
        dh_q, grads[p + "attn.wq"] = _linear_bwd(dq, c["h"], params[p + "attn.wq"])
        dh_k, grads[p + "attn.wk"] = _linear_bwd(dk, c["h"], params[p + "attn.wk"])
        dh_v, grads[p + "attn.wv"] = _linear_bwd(dv, c["h"], params[p + "attn.wv"])
        dx = dx + _rmsnorm_bwd(dh_q + dh_k + dh_v, c["h"], c["h_r"])

    dembed_t = np.zeros_like(params["embed"].T)
    np.add.at(dembed_t, tokens.ravel(), dx.reshape(-1, cfg.d_model))
    grads["embed"] = dembed_t.T.copy()
    return grads


def loss_and_grads(params, cfg, tokens):
    loss, cache = forward_loss(params, cfg, tokens)
    return loss, backward(params, cfg, cache)


# -- checkpoints -----------------------------------------------------------
#
# Little-endian layout:
#   8 bytes   magic b"NSCKPT01"
#   u32       length of UTF-8 JSON metadata, then the metadata bytes
#   u32       number of tensors
#   per tensor: u16 name length, name bytes, u8 ndim, ndim x u32 dims
#   raw float32 data of every tensor, in header order, row-major

CHECKPOINT_MAGIC = b"NSCKPT01"


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in tensors.values():
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path):
    """Return ``(tensors, meta)`` from a file written by ``save_checkpoint``."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 8
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = []
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        header.append((name, shape))
    tensors = {}
    for name, shape in header:
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    return tensors, meta


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
