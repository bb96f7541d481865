"""Toy streaming encoder with activity-masked speaker injection.

Pipeline: strided-conv subsampling (pre-encode), a speaker-injection module
applied at a configurable block index, a stack of causal blocks (masked
self-attention with limited left context, causal depthwise conv, feedforward,
pre-norm residuals), and a log-softmax output head.

The injection computes feedforward(x * activity) + x, where the activity is
broadcast across the feature dimension; with the default bias-free
feedforward, zero activity leaves the frame bit-identical, so an instance
given an all-zero mask behaves exactly like the plain encoder.

Lookahead semantics: frames are grouped into aligned windows of
(lookahead + 1) encoder frames; every block lets a frame attend up to the
end of its own window, so the total future dependency never exceeds
`lookahead` encoder frames no matter how many blocks are stacked. Offline
and cache-based chunked encoding share one span processor, and chunked
output matches offline output to float rounding for any chunking.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigMismatchError,
    ContractError,
    DimensionError,
    ParseError,
    SessionStateError,
)

ATTN_MASKED = -1e30  # additive mask value; finite so downstream checks stay clean

CHECKPOINT_FORMAT = "ssa-asr-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class FeatureSeq:
    """Acoustic feature frames, (T, d_in), with the frame duration in ms."""

    values: np.ndarray
    frame_ms: float = 10.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError(f"FeatureSeq expects (T, d_in), got shape {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class ActivitySeq:
    """Per-frame speech activity of one speaker, values in [0, 1]."""

    values: np.ndarray
    frame_ms: float = 10.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ContractError("activity values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 16
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    conv_kernel: int = 5
    subsample: int = 4
    left_context: int = 64
    lookahead: int = 0
    d_hidden_inj: int = 128
    vocab_size: int = 32
    injection_site: int = 0
    inj_activation: str = "relu"  # "relu" or "swish"
    inj_bias: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.subsample < 1:
            raise ContractError("subsample factor must be >= 1")
        if self.lookahead < 0:
            raise ContractError("lookahead must be >= 0")
        if not (0 <= self.injection_site <= self.n_blocks):
            raise ContractError(
                f"injection_site {self.injection_site} outside [0, {self.n_blocks}]"
            )
        if self.inj_activation not in ("relu", "swish"):
            raise ContractError(f"unknown injection activation {self.inj_activation!r}")

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


def downsample_activity(y, factor: int):
    """Mean-pool activity over non-overlapping windows of `factor` frames.

    Keeps values inside [0, 1]; output length is floor(T / factor), matching
    the pre-encode frame rate. Accepts an ActivitySeq or a plain array and
    returns the same kind.
    """
    if isinstance(y, ActivitySeq):
        pooled = downsample_activity(y.values, factor)
        return ActivitySeq(pooled, frame_ms=y.frame_ms * factor)
    arr = np.asarray(y, dtype=np.float64).reshape(-1)
    if arr.shape[0] < factor:
        raise ContractError(f"activity of {arr.shape[0]} frames shorter than factor {factor}")
    t_out = arr.shape[0] // factor
    return arr[: t_out * factor].reshape(t_out, factor).mean(axis=1)


class ModelParams:
    """Named trainable tensors plus the config they were built for.

    Weights may be shared read-only across any number of streaming instances;
    mutation is refused while any session holds a lock.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = tensors
        self._locks = 0

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors.keys())

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def lock(self) -> None:
        self._locks += 1

    def unlock(self) -> None:
        if self._locks <= 0:
            raise SessionStateError("unlock without a matching lock")
        self._locks -= 1

    @property
    def locked(self) -> bool:
        return self._locks > 0

    def require_mutable(self, what: str = "parameter update") -> None:
        if self._locks > 0:
            raise ContractError(
                f"{what} refused: weights are locked by {self._locks} open session(s)"
            )

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self._tensors.items()},
        )

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.require_mutable("loading arrays")
        if set(arrays) != set(self._tensors):
            raise ContractError("parameter name sets differ")
        for n, t in self._tensors.items():
            if arrays[n].shape != t.data.shape:
                raise ContractError(f"shape mismatch for {n}: {arrays[n].shape} vs {t.data.shape}")
            t.data = np.asarray(arrays[n], dtype=np.float64).copy()

    def param_bytes(self) -> int:
        return sum(t.data.nbytes for t in self._tensors.values())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, h = config.d_model, config.d_hidden_inj
    v1 = config.vocab_size + 1

    def w(*shape: int) -> Tensor:
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
        return Tensor(rng.normal(0.0, fan_in ** -0.5, size=shape), requires_grad=True)

    def zeros(*shape: int) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape: int) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True)

    p: dict[str, Tensor] = {}
    p["pre.w"] = w(config.subsample, config.d_in, d)
    p["pre.b"] = zeros(d)
    p["inj.w1"] = w(d, h)
    p["inj.w2"] = w(h, d)
    if config.inj_bias:
        p["inj.b1"] = zeros(h)
        p["inj.b2"] = zeros(d)
    for i in range(config.n_blocks):
        pre = f"block{i}."
        p[pre + "attn.ln.g"] = ones(d)
        p[pre + "attn.ln.b"] = zeros(d)
        for proj in ("wq", "wk", "wv", "wo"):
            p[pre + f"attn.{proj}"] = w(d, d)
        p[pre + "attn.bo"] = zeros(d)
        p[pre + "conv.ln.g"] = ones(d)
        p[pre + "conv.ln.b"] = zeros(d)
        p[pre + "conv.dw"] = w(config.conv_kernel, d)
        p[pre + "conv.pw"] = w(d, d)
        p[pre + "conv.b"] = zeros(d)
        p[pre + "ffn.ln.g"] = ones(d)
        p[pre + "ffn.ln.b"] = zeros(d)
        p[pre + "ffn.w1"] = w(d, 2 * d)
        p[pre + "ffn.b1"] = zeros(2 * d)
        p[pre + "ffn.w2"] = w(2 * d, d)
        p[pre + "ffn.b2"] = zeros(d)
    p["final.ln.g"] = ones(d)
    p["final.ln.b"] = zeros(d)
    p["head.w"] = w(d, v1)
    p["head.b"] = zeros(v1)
    return ModelParams(config, p)


@dataclass
class BlockCache:
    k: np.ndarray
    v: np.ndarray
    conv_tail: np.ndarray


@dataclass
class EncoderCache:
    """Streaming state for one encoder instance.

    After consuming a prefix, `blocks[i].k/.v` hold exactly the last
    min(left_context, pos) key/value rows each block produced for that
    prefix, and `pos` counts the encoder frames already emitted.
    """

    fingerprint: str
    pos: int = 0
    input_tail: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    act_tail: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pending_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    pending_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    blocks: list[BlockCache] = field(default_factory=list)
    closed: bool = False

    def cache_bytes(self) -> int:
        n = self.input_tail.nbytes + self.act_tail.nbytes
        n += self.pending_x.nbytes + self.pending_y.nbytes
        for b in self.blocks:
            n += b.k.nbytes + b.v.nbytes + b.conv_tail.nbytes
        return n


def _as_activity_array(activity, expect_len: int | None = None) -> np.ndarray:
    arr = activity.values if isinstance(activity, ActivitySeq) else np.asarray(activity, dtype=np.float64)
    arr = arr.reshape(-1)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError("activity values must lie in [0, 1]")
    if expect_len is not None and arr.shape[0] != expect_len:
        raise ContractError(f"activity length {arr.shape[0]} does not match feature length {expect_len}")
    return arr


class SsaModel:
    """Encoder plus output head; weights live in a ModelParams container."""

    def __init__(self, config: ModelConfig | None = None,
                 params: ModelParams | None = None, seed: int = 0):
        if params is not None:
            self.config = params.config
            self.params = params
            if config is not None and config != params.config:
                raise ConfigMismatchError("explicit config disagrees with params config")
        else:
            self.config = config if config is not None else ModelConfig()
            self.params = init_params(self.config, seed=seed)

    # -- front end --------------------------------------------------------

    def pre_encode(self, features) -> Tensor:
        """Subsample (T, d_in) input frames to (floor(T/S), d_model).

        Output frame t depends only on input rows t*S .. t*S + S - 1.
        """
        x = features.values if isinstance(features, FeatureSeq) else features
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.d_in:
            raise DimensionError(f"pre_encode expects (T, {self.config.d_in}), got {x.shape}")
        if x.shape[0] < self.config.subsample:
            raise ContractError(
                f"input of {x.shape[0]} frames shorter than subsample factor {self.config.subsample}"
            )
        y = ad.conv1d_strided(x, self.params["pre.w"], self.config.subsample)
        return ad.swish(ad.add(y, self.params["pre.b"]))

    def inject(self, x: Tensor, activity) -> Tensor:
        """feedforward(x * activity) + x, activity broadcast across features."""
        x = ad.as_tensor(x)
        y = _as_activity_array(activity)
        if y.shape[0] != x.shape[0]:
            raise ContractError(f"activity length {y.shape[0]} does not match {x.shape[0]} frames")
        mask = Tensor(y.reshape(-1, 1))
        z = ad.mul(x, mask)
        z = ad.matmul(z, self.params["inj.w1"])
        if self.config.inj_bias:
            z = ad.add(z, self.params["inj.b1"])
        z = ad.relu(z) if self.config.inj_activation == "relu" else ad.swish(z)
        z = ad.matmul(z, self.params["inj.w2"])
        if self.config.inj_bias:
            z = ad.add(z, self.params["inj.b2"])
        return ad.add(z, x)

    # -- encoder blocks ----------------------------------------------------

    def _window_end(self, qpos: np.ndarray, last: int) -> np.ndarray:
        la = self.config.lookahead
        if la == 0:
            return np.minimum(qpos, last)
        win = la + 1
        return np.minimum((qpos // win + 1) * win - 1, last)

    def _block(self, idx: int, x: Tensor, qpos: np.ndarray, wend: np.ndarray,
               bc: BlockCache | None) -> tuple[Tensor, BlockCache]:
        cfg = self.config
        P = self.params
        pre = f"block{idx}."
        p = x.shape[0]
        d = cfg.d_model
        dh = d // cfg.n_heads

        z = ad.layer_norm(x, P[pre + "attn.ln.g"], P[pre + "attn.ln.b"])
        q = ad.matmul(z, P[pre + "attn.wq"])
        k_new = ad.matmul(z, P[pre + "attn.wk"])
        v_new = ad.matmul(z, P[pre + "attn.wv"])

        if bc is not None and bc.k.shape[0]:
            c = bc.k.shape[0]
            k_all = Tensor(np.vstack([bc.k, k_new.data]))
            v_all = Tensor(np.vstack([bc.v, v_new.data]))
            kpos = np.arange(qpos[0] - c, qpos[0] + p)
        else:
            k_all, v_all, kpos = k_new, v_new, qpos
        m = k_all.shape[0]

        qh = ad.swapaxes(ad.reshape(q, (p, cfg.n_heads, dh)), 0, 1)
        kh = ad.swapaxes(ad.reshape(k_all, (m, cfg.n_heads, dh)), 0, 1)
        vh = ad.swapaxes(ad.reshape(v_all, (m, cfg.n_heads, dh)), 0, 1)
        scores = ad.scale(ad.matmul(qh, ad.swapaxes(kh, 1, 2)), dh ** -0.5)
        allowed = (kpos[None, :] >= qpos[:, None] - cfg.left_context) & (
            kpos[None, :] <= wend[:, None]
        )
        scores = ad.add(scores, Tensor(np.where(allowed, 0.0, ATTN_MASKED)))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.swapaxes(ad.matmul(attn, vh), 0, 1), (p, d))
        u = ad.add(x, ad.add(ad.matmul(ctx, P[pre + "attn.wo"]), P[pre + "attn.bo"]))

        zc = ad.layer_norm(u, P[pre + "conv.ln.g"], P[pre + "conv.ln.b"])
        tail = bc.conv_tail if bc is not None else np.zeros((cfg.conv_kernel - 1, d))
        conv = ad.conv1d_depthwise_causal(zc, P[pre + "conv.dw"], history=tail)
        conv = ad.swish(conv)
        u = ad.add(u, ad.add(ad.matmul(conv, P[pre + "conv.pw"]), P[pre + "conv.b"]))

        zf = ad.layer_norm(u, P[pre + "ffn.ln.g"], P[pre + "ffn.ln.b"])
        f = ad.swish(ad.add(ad.matmul(zf, P[pre + "ffn.w1"]), P[pre + "ffn.b1"]))
        f = ad.add(ad.matmul(f, P[pre + "ffn.w2"]), P[pre + "ffn.b2"])
        out = ad.add(u, f)

        keep = cfg.left_context
        old_k = bc.k if bc is not None else np.zeros((0, d))
        old_v = bc.v if bc is not None else np.zeros((0, d))
        new_bc = BlockCache(
            k=np.vstack([old_k, k_new.data])[-keep:],
            v=np.vstack([old_v, v_new.data])[-keep:],
            conv_tail=np.vstack([tail, zc.data])[-(cfg.conv_kernel - 1):]
            if cfg.conv_kernel > 1 else np.zeros((0, d)),
        )
        return out, new_bc

    def _stack_forward(self, x: Tensor, y_enc: np.ndarray, start: int,
                       blocks: list[BlockCache] | None,
                       use_injection: bool = True) -> tuple[Tensor, list[BlockCache]]:
        # caller guarantees the span is lookahead-window complete or final
        cfg = self.config
        p = x.shape[0]
        qpos = np.arange(start, start + p)
        wend = self._window_end(qpos, start + p - 1)
        new_blocks: list[BlockCache] = []
        h = x
        for i in range(cfg.n_blocks):
            if use_injection and cfg.injection_site == i:
                h = self.inject(h, y_enc)
            h, bc = self._block(i, h, qpos, wend, blocks[i] if blocks is not None else None)
            new_blocks.append(bc)
        if use_injection and cfg.injection_site == cfg.n_blocks:
            h = self.inject(h, y_enc)
        h = ad.layer_norm(h, self.params["final.ln.g"], self.params["final.ln.b"])
        return h, new_blocks

    # -- public encode paths -----------------------------------------------

    def new_cache(self) -> EncoderCache:
        cfg = self.config
        return EncoderCache(
            fingerprint=cfg.fingerprint(),
            input_tail=np.zeros((0, cfg.d_in)),
            act_tail=np.zeros(0),
            pending_x=np.zeros((0, cfg.d_model)),
            pending_y=np.zeros(0),
        )

    def _check_cache(self, cache: EncoderCache) -> None:
        if cache.fingerprint != self.config.fingerprint():
            raise ConfigMismatchError("encoder cache was built under a different model config")
        if cache.closed:
            raise SessionStateError("encoder cache already flushed")

    def encode(self, features, activity, cache: EncoderCache | None = None,
               use_injection: bool = True) -> tuple[Tensor, EncoderCache]:
        """Encode frames, offline (cache=None) or as a streamed chunk.

        Offline, the whole sequence is one span and the returned cache is
        flushed/closed. With a cache, only lookahead-complete frames are
        emitted; call `flush` for the remainder.
        """
        feats = features.values if isinstance(features, FeatureSeq) else np.asarray(features, dtype=np.float64)
        y = _as_activity_array(activity, expect_len=feats.shape[0])

        if cache is None:
            x = self.pre_encode(feats)
            y_enc = downsample_activity(y, self.config.subsample)
            hidden, blocks = self._stack_forward(x, y_enc, 0, None, use_injection)
            t_out = x.shape[0]
            done = EncoderCache(
                fingerprint=self.config.fingerprint(),
                pos=t_out,
                input_tail=feats[t_out * self.config.subsample:],
                act_tail=y[t_out * self.config.subsample:],
                pending_x=np.zeros((0, self.config.d_model)),
                pending_y=np.zeros(0),
                blocks=blocks,
                closed=True,
            )
            return hidden, done

        self._check_cache(cache)
        cfg = self.config
        buf = np.vstack([cache.input_tail, feats]) if cache.input_tail.size else feats
        abuf = np.concatenate([cache.act_tail, y])
        n_enc = buf.shape[0] // cfg.subsample
        if n_enc:
            x_new = self.pre_encode(buf[: n_enc * cfg.subsample])
            y_new = downsample_activity(abuf[: n_enc * cfg.subsample], cfg.subsample)
            cache.pending_x = np.vstack([cache.pending_x, x_new.data]) if cache.pending_x.size else x_new.data
            cache.pending_y = np.concatenate([cache.pending_y, y_new])
        cache.input_tail = buf[n_enc * cfg.subsample:]
        cache.act_tail = abuf[n_enc * cfg.subsample:]

        win = cfg.lookahead + 1
        avail = (cache.pending_x.shape[0] // win) * win
        return self._emit(cache, avail, use_injection), cache

    def flush(self, cache: EncoderCache) -> Tensor:
        """Process lookahead-buffered frames and close the cache.

        Input frames short of a full subsampling block are dropped, matching
        the offline floor(T/S) output length.
        """
        self._check_cache(cache)
        hidden = self._emit(cache, cache.pending_x.shape[0], True)
        cache.input_tail = np.zeros((0, self.config.d_in))
        cache.act_tail = np.zeros(0)
        cache.closed = True
        return hidden

    def _emit(self, cache: EncoderCache, count: int, use_injection: bool) -> Tensor:
        if count == 0:
            return Tensor(np.zeros((0, self.config.d_model)))
        x_span = Tensor(cache.pending_x[:count])
        y_span = cache.pending_y[:count]
        hidden, new_blocks = self._stack_forward(
            x_span, y_span, cache.pos, cache.blocks if cache.blocks else None, use_injection
        )
        cache.pos += count
        cache.pending_x = cache.pending_x[count:]
        cache.pending_y = cache.pending_y[count:]
        cache.blocks = new_blocks
        return hidden

    # -- output head ---------------------------------------------------------

    def logits(self, hidden: Tensor) -> Tensor:
        """Project encoder states to per-frame log-probs over V tokens + blank."""
        z = ad.add(ad.matmul(hidden, self.params["head.w"]), self.params["head.b"])
        return ad.log_softmax(z, axis=-1)

    def forward_log_probs(self, features, activity, use_injection: bool = True) -> Tensor:
        hidden, _ = self.encode(features, activity, use_injection=use_injection)
        return self.logits(hidden)


# ---------------------------------------------------------------------------
# checkpoint container: canonical JSON with base64 little-endian float64 blobs


def checkpoint_bytes(params: ModelParams) -> bytes:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "params": {
            name: {
                "shape": list(t.data.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                ).decode("ascii"),
            }
            for name, t in params.items()
        },
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, params: ModelParams) -> str:
    blob = checkpoint_bytes(params)
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    try:
        payload = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc}", path=str(path)) from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a checkpoint file (bad format tag)", path=str(path))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {payload.get('version')}", path=str(path))
    try:
        config = ModelConfig(**payload["config"])
    except (TypeError, KeyError) as exc:
        raise ParseError(f"bad checkpoint config: {exc}", path=str(path)) from None

    expected = set(init_params(config, seed=0).names())
    got = set(payload["params"])
    if got != expected:
        raise ParseError(
            f"checkpoint parameters do not match config (missing {sorted(expected - got)}, "
            f"unexpected {sorted(got - expected)})",
            path=str(path),
        )
    tensors: dict[str, Tensor] = {}
    ref = init_params(config, seed=0)
    for name in ref.names():
        entry = payload["params"][name]
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8").astype(np.float64)
        arr = arr.reshape(entry["shape"])
        if tuple(entry["shape"]) != ref[name].data.shape:
            raise ParseError(f"parameter {name} has shape {entry['shape']}, "
                             f"expected {list(ref[name].data.shape)}", path=str(path))
        tensors[name] = Tensor(arr, requires_grad=True)
    return ModelParams(config, tensors)


def checkpoint_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
