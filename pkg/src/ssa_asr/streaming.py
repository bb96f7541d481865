"""Cache-aware chunked inference with one encoder instance per speaker.

A session holds k instances that share one set of weights by reference and
nothing else: each instance owns its encoder cache, its activity stream and
its partial hypothesis. Weights are locked against mutation while any
session is open.

Feature chunks and the k activity chunks arrive together (the diarizer is
assumed upstream and chunk-aligned). Outputs are keyed by activity-stream
index; no speaker identity is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctc import GreedyState, TokenSeq
from .errors import ContractError, SessionStateError
from .model import EncoderCache, ModelParams, SsaModel
from .model import FeatureSeq


@dataclass(frozen=True)
class ChunkConfig:
    chunk_frames: int
    lookahead_frames: int = 0
    frame_ms: float = 10.0
    preset_name: str | None = None

    def __post_init__(self):
        if self.chunk_frames < 1:
            raise ContractError("chunk_frames must be >= 1")
        if self.lookahead_frames < 0:
            raise ContractError("lookahead_frames must be >= 0")


def latency_ms(cfg: ChunkConfig) -> float:
    """Algorithmic latency: audio buffered before a frame can be emitted."""
    return (cfg.chunk_frames + cfg.lookahead_frames) * cfg.frame_ms


# Named presets for the usual latency ladder at 10 ms frames, lookahead 0.
LATENCY_PRESETS: dict[str, ChunkConfig] = {
    "80ms": ChunkConfig(8, 0, 10.0, "80ms"),
    "160ms": ChunkConfig(16, 0, 10.0, "160ms"),
    "560ms": ChunkConfig(56, 0, 10.0, "560ms"),
    "1120ms": ChunkConfig(112, 0, 10.0, "1120ms"),
    "2720ms": ChunkConfig(272, 0, 10.0, "2720ms"),
}


class _Instance:
    __slots__ = ("cache", "decoder", "hidden_parts")

    def __init__(self, cache: EncoderCache, collect_hidden: bool):
        self.cache = cache
        self.decoder = GreedyState()
        self.hidden_parts: list[np.ndarray] | None = [] if collect_hidden else None


class StreamingSession:
    """k parallel per-speaker decoders over shared weights."""

    def __init__(self, params: ModelParams, k: int, cfg: ChunkConfig,
                 collect_hidden: bool = False):
        if k < 1:
            raise ContractError(f"speaker count must be >= 1, got {k}")
        expected_la = params.config.lookahead * params.config.subsample
        if cfg.lookahead_frames != expected_la:
            raise ContractError(
                f"chunk config lookahead_frames {cfg.lookahead_frames} disagrees with the "
                f"model's lookahead ({params.config.lookahead} encoder frames = {expected_la} input frames)"
            )
        self.params = params
        self.model = SsaModel(params=params)
        self.cfg = cfg
        self.k = k
        params.lock()
        self._instances = [_Instance(self.model.new_cache(), collect_hidden) for _ in range(k)]
        self._short_chunk_seen = False
        self._closed = False
        self.frames_consumed = 0
        self.chunks_consumed = 0

    def push_chunk(self, features, activities) -> list[TokenSeq]:
        """Feed one chunk plus the k aligned activity chunks.

        Returns the tokens newly emitted by each instance for this chunk.
        """
        if self._closed:
            raise SessionStateError("push_chunk on a finalized session")
        feats = features.values if isinstance(features, FeatureSeq) else np.asarray(features, dtype=np.float64)
        if len(activities) != self.k:
            raise ContractError(f"expected {self.k} activity chunks, got {len(activities)}")
        n = feats.shape[0]
        if n > self.cfg.chunk_frames:
            raise ContractError(f"chunk of {n} frames exceeds chunk_frames {self.cfg.chunk_frames}")
        if self._short_chunk_seen:
            raise ContractError("only the last chunk may be shorter than chunk_frames")
        if n < self.cfg.chunk_frames:
            self._short_chunk_seen = True

        emitted: list[TokenSeq] = []
        for inst, act in zip(self._instances, activities):
            hidden, _ = self.model.encode(feats, act, cache=inst.cache)
            emitted.append(self._decode(inst, hidden))
        self.frames_consumed += n
        self.chunks_consumed += 1
        return emitted

    def _decode(self, inst: _Instance, hidden) -> TokenSeq:
        if hidden.shape[0] == 0:
            return []
        if inst.hidden_parts is not None:
            inst.hidden_parts.append(hidden.data.copy())
        return inst.decoder.extend(self.model.logits(hidden))

    def finalize(self) -> list[TokenSeq]:
        """Flush lookahead buffers, close caches, return final transcripts
        in activity-stream order."""
        if self._closed:
            raise SessionStateError("session already finalized")
        for inst in self._instances:
            self._decode(inst, self.model.flush(inst.cache))
        self._closed = True
        self.params.unlock()
        return self.hypotheses()

    def hypotheses(self) -> list[TokenSeq]:
        return [list(inst.decoder.tokens) for inst in self._instances]

    def hidden_states(self) -> list[np.ndarray]:
        """Concatenated encoder states per instance (collect_hidden only)."""
        if self._instances[0].hidden_parts is None:
            raise ContractError("session was opened without collect_hidden")
        d = self.params.config.d_model
        return [
            np.vstack(inst.hidden_parts) if inst.hidden_parts else np.zeros((0, d))
            for inst in self._instances
        ]

    def memory_report(self) -> dict:
        """Parameter storage is shared, so it is counted once regardless of k."""
        return {
            "k": self.k,
            "param_bytes": self.params.param_bytes(),
            "cache_bytes": [inst.cache.cache_bytes() for inst in self._instances],
        }


def open_session(params: ModelParams, k: int, cfg: ChunkConfig,
                 collect_hidden: bool = False) -> StreamingSession:
    return StreamingSession(params, k, cfg, collect_hidden=collect_hidden)


def stream_transcribe(params: ModelParams, features, activities, cfg: ChunkConfig,
                      collect_hidden: bool = False):
    """Run one full utterance through a session chunk by chunk.

    activities is one stream per speaker, full length. Returns the final
    transcripts, plus per-instance hidden states when collect_hidden is set.
    """
    feats = features.values if isinstance(features, FeatureSeq) else np.asarray(features, dtype=np.float64)
    acts = [a.values if hasattr(a, "values") else np.asarray(a, dtype=np.float64) for a in activities]
    for a in acts:
        if a.shape[0] != feats.shape[0]:
            raise ContractError("activity stream length does not match features")
    session = open_session(params, len(acts), cfg, collect_hidden=collect_hidden)
    step = cfg.chunk_frames
    for start in range(0, feats.shape[0], step):
        stop = min(start + step, feats.shape[0])
        session.push_chunk(feats[start:stop], [a[start:stop] for a in acts])
    hyps = session.finalize()
    if collect_hidden:
        return hyps, session.hidden_states()
    return hyps
