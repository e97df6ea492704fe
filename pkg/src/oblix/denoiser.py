"""Miniature U-Net noise predictor, text embedder, and latent decoder.

The network is deliberately small and fully dense: spatial mixing uses an
explicit (tokens x tokens) matrix per block instead of a convolution, which
keeps the FLOPs inventory exact and the whole model a deterministic
function of (config, seed).  Structure per step, operating on latent
tokens h of shape (res*res, width):

    h0   = tokens @ w_in + b_in + time_vector(t)
    down = mix, channel projection + tanh, self-attention, cross-attention
    mid  = channel projection + tanh, self-attention, cross-attention
    up   = (h0 + mid features), mix, projection + tanh, both attentions
    eps  = up @ w_out + b_out

Attention sites follow the gates in `oblix.accel` when an AccelState is
supplied; with ``accel=None`` the gate machinery is bypassed entirely,
which is the reference path the equivalence tests compare against.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import accel as accel_mod
from .accel import AccelState
from .errors import ConfigError, InputError, InternalError, ProtocolError
from .schedule import NoiseSchedule, ddim_step
from .tensor import (
    Rng,
    Tensor,
    active_counter,
    add,
    add_rowvec,
    flops_tag,
    fnv1a64,
    matmul,
    scale,
    softmax_rows,
    stack_rows,
    tanh_map,
)

SITES = ("down.self", "down.cross", "mid.self", "mid.cross", "up.self", "up.cross")

WEIGHTS_MAGIC = b"OBLW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 4
    res: int = 16
    d_text: int = 32
    width: int = 32
    token_capacity: int = 16
    heads: int = 1

    def __post_init__(self):
        for name in ("channels", "res", "d_text", "width", "token_capacity", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.res & (self.res - 1):
            raise ConfigError(f"res must be a power of two, got {self.res}")
        if self.heads != 1:
            raise ConfigError("only a single attention head is supported")

    @property
    def tokens(self) -> int:
        return self.res * self.res


@dataclass(frozen=True)
class TextEmbedding:
    """Token vectors padded to the model's token capacity."""

    matrix: Tensor
    count: int


@dataclass(frozen=True)
class AttnSite:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor


# parameter inventory: name -> (rows, cols) factory, in serialization order
def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    s, c, d, dt = cfg.tokens, cfg.channels, cfg.width, cfg.d_text
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("w_in", (c, d)), ("b_in", (d,)),
        ("mix_down", (s, s)), ("w_down", (d, d)), ("b_down", (d,)),
        ("w_mid", (d, d)), ("b_mid", (d,)),
        ("mix_up", (s, s)), ("w_up", (d, d)), ("b_up", (d,)),
        ("w_out", (d, c)), ("b_out", (c,)),
        ("decoder", (c, 48)),
    ]
    for site in SITES:
        kv_width = dt if site.endswith("cross") else d
        specs += [
            (f"{site}.wq", (d, d)),
            (f"{site}.wk", (kv_width, d)),
            (f"{site}.wv", (kv_width, d)),
            (f"{site}.wo", (d, d)),
            (f"{site}.bo", (d,)),
        ]
    return specs


def _init_param(name: str, shape: tuple[int, ...], seed: int) -> Tensor:
    rng = Rng(fnv1a64(f"{seed}:{name}".encode()))
    if len(shape) == 1:
        return Tensor.zeros(shape)
    fan_in = shape[0]
    std = 1.0 / math.sqrt(fan_in)
    if name == "decoder":
        std *= 0.3  # keeps decoded pixels mostly inside [0, 1] before clamping
    return Tensor(rng.gaussian(shape).to_numpy() * np.float32(std))


class ModelWeights:
    """All projections of the toy model; a pure function of (config, seed)."""

    def __init__(self, cfg: ModelConfig, seed: int, params: dict[str, Tensor]):
        self.cfg = cfg
        self.seed = seed
        self._params = params
        self._sites = {
            site: AttnSite(
                params[f"{site}.wq"], params[f"{site}.wk"],
                params[f"{site}.wv"], params[f"{site}.wo"],
                params[f"{site}.bo"],
            )
            for site in SITES
        }

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "ModelWeights":
        params = {name: _init_param(name, shape, seed)
                  for name, shape in _param_specs(cfg)}
        return cls(cfg, seed, params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def attn(self, site: str) -> AttnSite:
        if site not in self._sites:
            raise InternalError(f"unknown attention site {site!r}")
        return self._sites[site]

    def replace(self, **overrides: Tensor) -> "ModelWeights":
        """Copy with some parameters swapped; used by constructed-weight tests."""
        params = dict(self._params)
        params.update(overrides)
        return ModelWeights(self.cfg, self.seed, params)

    # -- flat binary serialization ---------------------------------------

    def save(self, path: str) -> None:
        cfg = self.cfg
        out = io.BytesIO()
        out.write(WEIGHTS_MAGIC)
        out.write(bytes([WEIGHTS_VERSION]))
        out.write(struct.pack("<6IQ", cfg.channels, cfg.res, cfg.d_text,
                              cfg.width, cfg.token_capacity, cfg.heads,
                              self.seed))
        specs = _param_specs(cfg)
        out.write(struct.pack("<I", len(specs)))
        for name, shape in specs:
            tensor = self._params[name]
            if tensor.shape != shape:
                raise InternalError(f"parameter {name} has shape {tensor.shape}")
            raw = name.encode()
            out.write(struct.pack("<H", len(raw)))
            out.write(raw)
            out.write(struct.pack("<B", len(shape)))
            out.write(struct.pack(f"<{len(shape)}I", *shape))
            out.write(tensor.to_numpy().astype("<f4").tobytes())
        with open(path, "wb") as f:
            f.write(out.getvalue())

    @classmethod
    def load(cls, path: str) -> "ModelWeights":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != WEIGHTS_MAGIC:
            raise ProtocolError("not a weights file (bad magic)", offset=0)
        if len(raw) < 5 or raw[4] != WEIGHTS_VERSION:
            raise ProtocolError("unsupported weights version", offset=4)
        off = 5
        try:
            channels, res, d_text, width, cap, heads, seed = struct.unpack_from(
                "<6IQ", raw, off)
            off += struct.calcsize("<6IQ")
            cfg = ModelConfig(channels, res, d_text, width, cap, heads)
            (count,) = struct.unpack_from("<I", raw, off)
            off += 4
            params: dict[str, Tensor] = {}
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", raw, off)
                off += 2
                name = raw[off:off + name_len].decode("utf-8")
                off += name_len
                (ndim,) = struct.unpack_from("<B", raw, off)
                off += 1
                shape = struct.unpack_from(f"<{ndim}I", raw, off)
                off += 4 * ndim
                n = int(np.prod(shape, dtype=np.int64))
                data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
                off += 4 * n
                params[name] = Tensor(data.reshape(shape))
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"corrupt weights file near offset {off}: {exc}",
                                offset=off) from None
        if off != len(raw):
            raise ProtocolError(
                f"trailing bytes in weights file at offset {off}", offset=off)
        return cls(cfg, seed, params)

    def fingerprint(self) -> int:
        return fnv1a64(b"".join(self._params[n].tobytes()
                                for n, _ in _param_specs(self.cfg)))


# ---------------------------------------------------------------------------
# Text embedding
# ---------------------------------------------------------------------------

_PAD_SEED_TAG = b"\x00oblix-pad\x00"


def embed_prompt(prompt: str, cfg: ModelConfig) -> TextEmbedding:
    """Hash each whitespace token into a seed and expand it to a vector.

    Deterministic, order-preserving, truncated at the token capacity and
    padded with a fixed vector, so prompts differing in one token differ
    in exactly that embedding row.
    """
    tokens = prompt.split()
    if not tokens:
        raise InputError("prompt is empty after whitespace normalization")
    tokens = tokens[:cfg.token_capacity]
    rows = [
        Rng(fnv1a64(tok.encode("utf-8"))).gaussian((cfg.d_text,)).to_numpy()
        for tok in tokens
    ]
    pad = Rng(fnv1a64(_PAD_SEED_TAG)).gaussian((cfg.d_text,)).to_numpy()
    while len(rows) < cfg.token_capacity:
        rows.append(pad)
    return TextEmbedding(Tensor(np.stack(rows)), len(tokens))


def time_vector(t: int, cfg: ModelConfig) -> Tensor:
    """Sinusoidal step conditioning, one vector per iteration index."""
    half = cfg.width // 2
    vec = np.empty(cfg.width, dtype=np.float64)
    for i in range(half):
        freq = 10000.0 ** (-2.0 * i / cfg.width)
        vec[2 * i] = math.sin(t * freq)
        vec[2 * i + 1] = math.cos(t * freq)
    if cfg.width % 2:
        vec[-1] = math.sin(t)
    return Tensor(vec.astype(np.float32))


# ---------------------------------------------------------------------------
# Attention with gate routing
# ---------------------------------------------------------------------------


def attention(q_in: Tensor, kv_in: Tensor, w: ModelWeights, site: str,
              accel: AccelState | None = None, step: int = 1) -> Tensor:
    """Single-row attention for one site, honouring the cache gate.

    Returns the map-times-value product; the output projection is applied
    by the caller so the cached object is exactly the attention output.
    """
    out = _attention_rows([q_in], [kv_in], w, site, accel, step)
    return out[0]


def _attention_rows(q_rows: list[Tensor], kv_rows: list[Tensor], w: ModelWeights,
                    site: str, accel: AccelState | None, step: int,
                    trace: dict | None = None) -> list[Tensor]:
    params = w.attn(site)
    if accel is None:
        rows = [_site_plain(q, kv, params, site) for q, kv in zip(q_rows, kv_rows)]
    elif not accel_mod.should_recompute_attention(step, accel.cfg):
        rows = accel.load_attention(site)
    else:
        if accel_mod.reuse_active(step, accel.cfg) and len(q_rows) > 1:
            rows = accel_mod.reuse_attention_rows(q_rows, kv_rows, w,
                                                  accel.cfg, site)
        else:
            rows = [_site_plain(q, kv, params, site) for q, kv in zip(q_rows, kv_rows)]
        accel.store_attention(site, step, rows)
    if trace is not None:
        trace[(step, site)] = stack_rows(rows)
    return rows


def _site_plain(q_in: Tensor, kv_in: Tensor, params: AttnSite, site: str) -> Tensor:
    width = params.wq.shape[1]
    with flops_tag(f"{site}/map"):
        q = matmul(q_in, params.wq)
        k = matmul(kv_in, params.wk)
        scores = scale(matmul(q, k.transpose2d()), 1.0 / math.sqrt(width))
        attn_map = softmax_rows(scores)
    with flops_tag(f"{site}/value"):
        v = matmul(kv_in, params.wv)
        return matmul(attn_map, v)


# ---------------------------------------------------------------------------
# U-Net forward
# ---------------------------------------------------------------------------


def _tokens_from_latent(latent: Tensor) -> Tensor:
    c = latent.shape[0]
    arr = latent.to_numpy().reshape(c, -1).T  # (tokens, channels)
    return Tensor(arr)


def _latent_from_tokens(tokens: Tensor, cfg: ModelConfig) -> Tensor:
    arr = tokens.to_numpy().T.reshape(cfg.channels, cfg.res, cfg.res)
    return Tensor(arr)


def _attn_block(rows: list[Tensor], kv_rows: list[Tensor], w: ModelWeights,
                site: str, accel, step, trace) -> list[Tensor]:
    outs = _attention_rows(rows, kv_rows, w, site, accel, step, trace)
    params = w.attn(site)
    merged = []
    for h, o in zip(rows, outs):
        with flops_tag(f"{site}/proj"):
            projected = add_rowvec(matmul(o, params.wo), params.bo)
        merged.append(add(h, projected))
    return merged


def unet_forward(latents: Tensor, texts: list[TextEmbedding], t: int,
                 w: ModelWeights, accel: AccelState | None = None,
                 trace: dict | None = None) -> Tensor:
    """Predict per-row noise for a batch of latents at iteration t.

    ``latents`` is (N, channels, res, res) with one text embedding per row.
    When the skip gate fires, down and mid blocks are not executed and the
    cached mid features feed the up block.  All per-row math runs on 2-d
    matrices row by row, so batch composition never changes any row's bits.
    """
    cfg = w.cfg
    n = latents.shape[0]
    if len(texts) != n:
        raise ConfigError(f"{n} latent rows but {len(texts)} embeddings")
    if latents.shape[1:] != (cfg.channels, cfg.res, cfg.res):
        raise ConfigError(
            f"latent shape {latents.shape[1:]} does not match config "
            f"({cfg.channels}, {cfg.res}, {cfg.res})"
        )
    if accel is not None:
        accel.bind(w.fingerprint(), n)

    text_rows = [te.matrix for te in texts]
    tvec = time_vector(t, cfg)
    base: list[Tensor] = []
    for i in range(n):
        tok = _tokens_from_latent(latents.row(i))
        h0 = add_rowvec(matmul(tok, w["w_in"]), w["b_in"])
        base.append(add_rowvec(h0, tvec))

    skip = accel is not None and accel_mod.should_skip_blocks(t, accel.cfg)
    if skip:
        if accel.mid_features is None:
            raise InternalError("skip gate fired with no cached mid features")
        mid = accel.mid_features
    else:
        down = [
            add_rowvec(matmul(matmul(w["mix_down"], h), w["w_down"]), w["b_down"])
            for h in base
        ]
        down = [tanh_map(h) for h in down]
        down = _attn_block(down, down, w, "down.self", accel, t, trace)
        down = _attn_block(down, text_rows, w, "down.cross", accel, t, trace)

        mid = [add_rowvec(matmul(h, w["w_mid"]), w["b_mid"]) for h in down]
        mid = [tanh_map(h) for h in mid]
        mid = _attn_block(mid, mid, w, "mid.self", accel, t, trace)
        mid = _attn_block(mid, text_rows, w, "mid.cross", accel, t, trace)
        if accel is not None:
            accel.mid_features = mid

    up = [add(h0, fm) for h0, fm in zip(base, mid)]
    up = [
        tanh_map(add_rowvec(matmul(matmul(w["mix_up"], h), w["w_up"]), w["b_up"]))
        for h in up
    ]
    up = _attn_block(up, up, w, "up.self", accel, t, trace)
    up = _attn_block(up, text_rows, w, "up.cross", accel, t, trace)

    eps_rows = [
        _latent_from_tokens(add_rowvec(matmul(h, w["w_out"]), w["b_out"]), cfg)
        for h in up
    ]
    return stack_rows(eps_rows)


def run_denoise_steps(latents: Tensor, texts: list[TextEmbedding],
                      sched: NoiseSchedule, w: ModelWeights,
                      first_iter: int, last_iter: int,
                      accel: AccelState | None = None,
                      trace: dict | None = None) -> Tensor:
    """Run iterations [first_iter, last_iter] of the deterministic sampler.

    Iteration i moves the batch from schedule index T-i+1 to T-i.  The
    active FLOPs counter (if any) gets one step bucket per iteration with
    the gate flags that were in force.
    """
    total = sched.steps
    if not 1 <= first_iter <= last_iter <= total:
        raise ConfigError(
            f"iteration range [{first_iter}, {last_iter}] outside [1, {total}]"
        )
    counter = active_counter()
    x = latents
    for i in range(first_iter, last_iter + 1):
        flags = {
            "recompute": accel is None
            or accel_mod.should_recompute_attention(i, accel.cfg),
            "skip": accel is not None and accel_mod.should_skip_blocks(i, accel.cfg),
            "reuse": accel is not None and accel_mod.reuse_active(i, accel.cfg)
            and latents.shape[0] > 1,
        }
        t_sched = total - i + 1
        if counter is not None:
            with counter.step(i, **flags):
                x = _one_step(x, texts, i, t_sched, sched, w, accel, trace)
        else:
            x = _one_step(x, texts, i, t_sched, sched, w, accel, trace)
    return x


def _one_step(x: Tensor, texts, i: int, t_sched: int, sched: NoiseSchedule,
              w: ModelWeights, accel, trace) -> Tensor:
    eps = unet_forward(x, texts, i, w, accel, trace)
    rows = [
        ddim_step(x.row(r), eps.row(r), t_sched, t_sched - 1, sched)
        for r in range(x.shape[0])
    ]
    return stack_rows(rows)


# ---------------------------------------------------------------------------
# Latent decoder
# ---------------------------------------------------------------------------

DECODE_UPSAMPLE = 4


def decode_latent(latent: Tensor, w: ModelWeights) -> Tensor:
    """Project each latent cell to a 4x4 RGB patch and clamp to [0, 1].

    Output shape is (3, 4*res, 4*res); a zero latent maps to mid-gray.
    The projection is strictly per-cell, so a change in one latent cell
    affects exactly one output patch.
    """
    cfg = w.cfg
    if latent.shape != (cfg.channels, cfg.res, cfg.res):
        raise ConfigError(f"latent shape {latent.shape} does not match config")
    # plain numpy on purpose: decode cost stays out of the per-step series
    cells = latent.to_numpy().reshape(cfg.channels, -1).T
    patches = cells @ w["decoder"].to_numpy()         # (res*res, 48)
    up = DECODE_UPSAMPLE
    img = np.empty((3, cfg.res * up, cfg.res * up), dtype=np.float32)
    patches = patches.reshape(cfg.res, cfg.res, 3, up, up)
    for ci in range(3):
        img[ci] = patches[:, :, ci].transpose(0, 2, 1, 3).reshape(
            cfg.res * up, cfg.res * up)
    img = np.clip(img + np.float32(0.5), 0.0, 1.0)
    return Tensor(img)
