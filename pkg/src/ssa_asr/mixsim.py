"""Toy overlapped-speech simulator.

Utterances are concatenated per-token feature templates plus a per-speaker
offset vector (the speaker coloration) plus seeded Gaussian noise. All
speakers in a pool share one template bank, so two speakers synthesizing the
same tokens with the same seed differ exactly by their offset vectors.

Mixing happens in the feature domain: delayed, zero-padded sources are summed
frame-wise, which keeps ground-truth activities exact (activity is 1 on every
voiced frame of the shifted source) and makes mixing linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ctc import TokenSeq
from .errors import ContractError
from .model import ActivitySeq, FeatureSeq


@dataclass(frozen=True)
class SimConfig:
    d_in: int = 16
    vocab_size: int = 32
    frames_per_token: int = 8
    frame_ms: float = 10.0
    noise_scale: float = 0.1
    token_len: tuple[int, int] = (5, 15)
    delay_frac: tuple[float, float] = (0.0, 0.5)
    offset_scale: float = 1.0
    speaker_margin: float = 1.0


@dataclass
class ToySpeaker:
    speaker_id: str
    offset_vector: np.ndarray          # (d_in,) speaker coloration
    token_templates: np.ndarray        # (V, F, d_in), shared across the pool
    noise_scale: float = 0.1


@dataclass
class MixtureSample:
    features: FeatureSeq
    activities: list[ActivitySeq]
    references: list[TokenSeq]
    delays: list[int]
    k: int
    speaker_ids: list[str] = field(default_factory=list)
    sample_id: str = ""
    seed: int | None = None


def make_speaker_pool(n: int, cfg: SimConfig = SimConfig(), seed: int = 0) -> list[ToySpeaker]:
    """Build n speakers over one shared template bank.

    Offset vectors are resampled until every pairwise distance exceeds the
    configured margin, so speaker identities stay separable.
    """
    if n < 1:
        raise ContractError("speaker pool needs at least one speaker")
    rng = np.random.default_rng(seed)
    templates = rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.frames_per_token, cfg.d_in))
    offsets: list[np.ndarray] = []
    while len(offsets) < n:
        cand = rng.normal(0.0, cfg.offset_scale, size=cfg.d_in)
        if all(np.linalg.norm(cand - o) > cfg.speaker_margin for o in offsets):
            offsets.append(cand)
    return [
        ToySpeaker(f"spk{i:02d}", offsets[i], templates, cfg.noise_scale)
        for i in range(n)
    ]


def synth_utterance(speaker: ToySpeaker, tokens: Sequence[int], seed: int,
                    frame_ms: float = 10.0) -> tuple[FeatureSeq, ActivitySeq]:
    """Render tokens as template blocks + offset + seeded noise.

    Deterministic given (speaker, tokens, seed); the noise stream depends on
    the seed only, not the speaker.
    """
    tokens = list(tokens)
    if not tokens:
        raise ContractError("synth_utterance needs a non-empty token sequence")
    v = speaker.token_templates.shape[0]
    if any(t < 0 or t >= v for t in tokens):
        raise ContractError(f"token id outside vocabulary [0, {v})")
    rng = np.random.default_rng(seed)
    blocks = speaker.token_templates[tokens]              # (n, F, d_in)
    feats = blocks.reshape(-1, speaker.token_templates.shape[2]) + speaker.offset_vector
    feats = feats + speaker.noise_scale * rng.normal(size=feats.shape)
    activity = np.ones(feats.shape[0])
    return FeatureSeq(feats, frame_ms), ActivitySeq(activity, frame_ms)


def mix(sources: Sequence[tuple[FeatureSeq, ActivitySeq, TokenSeq]],
        delays: Sequence[int]) -> MixtureSample:
    """Sum delay-shifted, zero-padded sources; shift activities identically."""
    k = len(sources)
    if not (1 <= k <= 3):
        raise ContractError(f"mix supports 1 to 3 sources, got {k}")
    if len(delays) != k:
        raise ContractError(f"{k} sources but {len(delays)} delays")
    if any(d < 0 for d in delays):
        raise ContractError("delays must be >= 0")
    frame_ms = sources[0][0].frame_ms
    d_in = sources[0][0].values.shape[1]
    total = max(d + len(f) for (f, _, _), d in zip(sources, delays))

    feats = np.zeros((total, d_in))
    activities: list[ActivitySeq] = []
    references: list[TokenSeq] = []
    for (f, a, toks), d in zip(sources, delays):
        if len(a) != len(f):
            raise ContractError("source activity and features differ in length")
        feats[d:d + len(f)] += f.values
        y = np.zeros(total)
        y[d:d + len(f)] = a.values
        activities.append(ActivitySeq(y, frame_ms))
        references.append(list(toks))
    return MixtureSample(
        features=FeatureSeq(feats, frame_ms),
        activities=activities,
        references=references,
        delays=[int(d) for d in delays],
        k=k,
    )


def sample_mixture(rng: np.random.Generator, ratios: Sequence[float],
                   pool: Sequence[ToySpeaker], cfg: SimConfig = SimConfig()) -> MixtureSample:
    """Draw speaker count by ratio, then speakers, tokens and delays.

    Delays for sources after the first are uniform over the configured
    fraction range of the first utterance's length, so full overlap (delay 0)
    is possible at the default setting.
    """
    ratios = np.asarray(list(ratios), dtype=np.float64)
    if ratios.size != 3 or (ratios < 0).any() or ratios.sum() <= 0:
        raise ContractError("ratios must be 3 non-negative weights, not all zero")
    k = int(rng.choice(np.arange(1, 4), p=ratios / ratios.sum()))
    if len(pool) < k:
        raise ContractError(f"pool of {len(pool)} speakers cannot supply {k} distinct speakers")

    picks = rng.choice(len(pool), size=k, replace=False)
    speakers = [pool[int(i)] for i in picks]
    sources = []
    lens = []
    for spk in speakers:
        n_tok = int(rng.integers(cfg.token_len[0], cfg.token_len[1] + 1))
        toks = [int(t) for t in rng.integers(0, cfg.vocab_size, size=n_tok)]
        seed = int(rng.integers(0, 2 ** 63))
        f, a = synth_utterance(spk, toks, seed, cfg.frame_ms)
        sources.append((f, a, toks))
        lens.append(len(f))
    lo = int(np.floor(cfg.delay_frac[0] * lens[0]))
    hi = int(np.floor(cfg.delay_frac[1] * lens[0]))
    delays = [0] + [int(rng.integers(lo, hi + 1)) for _ in range(k - 1)]
    sample = mix(sources, delays)
    sample.speaker_ids = [s.speaker_id for s in speakers]
    return sample


def sample_fully_overlapped_2mix(rng: np.random.Generator, pool: Sequence[ToySpeaker],
                                 cfg: SimConfig = SimConfig()) -> MixtureSample:
    """2-mix where the second utterance lies entirely inside the first one:
    every frame of the shorter speaker is overlapped speech."""
    if len(pool) < 2:
        raise ContractError("need at least two speakers")
    picks = rng.choice(len(pool), size=2, replace=False)
    spk_a, spk_b = pool[int(picks[0])], pool[int(picks[1])]
    hi = cfg.token_len[1]
    n1 = int(rng.integers(max(cfg.token_len[0] + 2, hi - 4), hi + 1))
    n2 = int(rng.integers(cfg.token_len[0], n1))
    toks1 = [int(t) for t in rng.integers(0, cfg.vocab_size, size=n1)]
    toks2 = [int(t) for t in rng.integers(0, cfg.vocab_size, size=n2)]
    f1, a1 = synth_utterance(spk_a, toks1, int(rng.integers(0, 2 ** 63)), cfg.frame_ms)
    f2, a2 = synth_utterance(spk_b, toks2, int(rng.integers(0, 2 ** 63)), cfg.frame_ms)
    max_delay = len(f1) - len(f2)
    delay = int(rng.integers(min(cfg.frames_per_token, max_delay), max_delay + 1))
    sample = mix([(f1, a1, toks1), (f2, a2, toks2)], [0, delay])
    sample.speaker_ids = [spk_a.speaker_id, spk_b.speaker_id]
    return sample


def degrade_activity(y, severity: float, seed: int):
    """Emulate diarization error on an activity stream.

    severity 0 returns an exact copy. Otherwise the stream is thresholded at
    0.5 and hit with three seeded corruptions, each scaled by severity:
    boundary jitter (segment edges shifted by up to 4 * severity frames),
    erosion (up to 2 * severity frames shaved off each segment end) and
    random frame flips (probability 0.5 * severity per frame).
    """
    if not (0.0 <= severity <= 1.0):
        raise ContractError(f"severity {severity} outside [0, 1]")
    if isinstance(y, ActivitySeq):
        return ActivitySeq(degrade_activity(y.values, severity, seed), frame_ms=y.frame_ms)
    arr = np.asarray(y, dtype=np.float64).reshape(-1)
    if severity == 0.0:
        return arr.copy()

    rng = np.random.default_rng(seed)
    t = arr.shape[0]
    binary = arr >= 0.5

    # segment edges of the thresholded stream
    padded = np.concatenate([[False], binary, [False]])
    onsets = np.flatnonzero(~padded[:-1] & padded[1:])
    offsets = np.flatnonzero(padded[:-1] & ~padded[1:])

    jitter = int(round(4 * severity))
    erosion = int(round(2 * severity))
    out = np.zeros(t, dtype=bool)
    for on, off in zip(onsets, offsets):
        if jitter:
            on = on + int(rng.integers(-jitter, jitter + 1))
            off = off + int(rng.integers(-jitter, jitter + 1))
        on += erosion
        off -= erosion
        on = max(0, on)
        off = min(t, off)
        if off > on:
            out[on:off] = True

    flips = rng.random(t) < 0.5 * severity
    out = out ^ flips
    return out.astype(np.float64)
