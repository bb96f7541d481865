"""File formats: JSON-lines manifests, RTTM, transcript JSON, metric reports.

Manifest (one JSON object per line):
  line 1            {"type": "header", "schema": "ssa-asr.manifest.v1",
                     "reproducibility": {...}}
  following lines   {"type": "sample", "id": str, "k": int, "frame_ms": float,
                     "features": [[...]], "activities": [[...]],
                     "references": [[int]], "delays": [int],
                     "speaker_ids": [str], "seed": int|null}
Floats are emitted with full repr precision, so a write/read round trip is
bit-exact.

RTTM uses the standard 10-column line:
  SPEAKER <file_id> 1 <onset_s> <duration_s> <NA> <NA> <speaker> <NA> <NA>

Transcript JSON ("ssa-asr.transcripts.v1"):
  {"schema": ..., "samples": [{"id": str,
                               "speakers": {label: {"words": [str]}}}]}
"""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError
from .mixsim import MixtureSample
from .model import ActivitySeq, FeatureSeq

MANIFEST_SCHEMA = "ssa-asr.manifest.v1"
TRANSCRIPTS_SCHEMA = "ssa-asr.transcripts.v1"
REPORT_SCHEMA = "ssa-asr.metrics-report.v1"
EVENTS_SCHEMA = "ssa-asr.stream-events.v1"
EMBEDDINGS_SCHEMA = "ssa-asr.embeddings.v1"


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def reproducibility_block(seed=None, config=None, checkpoint_hash=None, command=None) -> dict:
    return {
        "seed": seed,
        "config_hash": config_hash(config) if config is not None else None,
        "checkpoint_hash": checkpoint_hash,
        "command": command,
    }


# -- JSON lines --------------------------------------------------------------


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad JSON: {exc.msg}", path=str(path), line=i) from None
    return out


# -- manifests -----------------------------------------------------------------


def sample_to_record(sample: MixtureSample) -> dict:
    return {
        "type": "sample",
        "id": sample.sample_id,
        "k": sample.k,
        "frame_ms": sample.features.frame_ms,
        "features": sample.features.values.tolist(),
        "activities": [a.values.tolist() for a in sample.activities],
        "references": [list(r) for r in sample.references],
        "delays": list(sample.delays),
        "speaker_ids": list(sample.speaker_ids),
        "seed": sample.seed,
    }


def record_to_sample(rec: Mapping, path=None, line=None) -> MixtureSample:
    required = ("id", "k", "frame_ms", "features", "activities", "references", "delays")
    for key in required:
        if key not in rec:
            raise ParseError(f"sample record missing {key!r}", path=path, line=line)
    frame_ms = float(rec["frame_ms"])
    feats = FeatureSeq(np.array(rec["features"], dtype=np.float64), frame_ms)
    acts = [ActivitySeq(np.array(a, dtype=np.float64), frame_ms) for a in rec["activities"]]
    if len(acts) != rec["k"] or len(rec["references"]) != rec["k"]:
        raise ParseError(f"k={rec['k']} disagrees with activities/references", path=path, line=line)
    for a in acts:
        if len(a) != len(feats):
            raise ParseError("activity length differs from features", path=path, line=line)
    return MixtureSample(
        features=feats,
        activities=acts,
        references=[[int(t) for t in r] for r in rec["references"]],
        delays=[int(d) for d in rec["delays"]],
        k=int(rec["k"]),
        speaker_ids=[str(s) for s in rec.get("speaker_ids", [])],
        sample_id=str(rec["id"]),
        seed=rec.get("seed"),
    )


def write_manifest(path, samples: Sequence[MixtureSample], reproducibility: dict | None = None) -> None:
    header = {"type": "header", "schema": MANIFEST_SCHEMA,
              "reproducibility": reproducibility or {}}
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for s in samples:
            f.write(json.dumps(sample_to_record(s)) + "\n")


def read_manifest(path) -> tuple[list[MixtureSample], dict]:
    records = read_jsonl(path)
    if not records:
        raise ParseError("empty manifest", path=str(path))
    header = records[0]
    if header.get("type") != "header" or header.get("schema") != MANIFEST_SCHEMA:
        raise ParseError(f"expected manifest header with schema {MANIFEST_SCHEMA}",
                         path=str(path), line=1)
    samples = []
    for i, rec in enumerate(records[1:], start=2):
        if rec.get("type") != "sample":
            raise ParseError(f"unexpected record type {rec.get('type')!r}", path=str(path), line=i)
        samples.append(record_to_sample(rec, path=str(path), line=i))
    return samples, header


# -- RTTM ----------------------------------------------------------------------


def activities_to_segments(sample: MixtureSample, threshold: float = 0.5,
                           labels: Sequence[str] | None = None) -> list[tuple[str, str, float, float]]:
    """Dense activities to (file_id, speaker, onset_s, offset_s) segments.

    A frame is active when its value is >= threshold; frame t spans
    [t, t+1) * frame_ms / 1000 seconds.
    """
    dt = sample.features.frame_ms / 1000.0
    segs = []
    for i, act in enumerate(sample.activities):
        label = labels[i] if labels else (sample.speaker_ids[i] if i < len(sample.speaker_ids) else f"spk{i}")
        b = act.values >= threshold
        padded = np.concatenate([[False], b, [False]])
        onsets = np.flatnonzero(~padded[:-1] & padded[1:])
        offsets = np.flatnonzero(padded[:-1] & ~padded[1:])
        for on, off in zip(onsets, offsets):
            segs.append((sample.sample_id, label, on * dt, off * dt))
    return segs


def write_rttm(path, segments: Iterable[tuple[str, str, float, float]]) -> None:
    with open(path, "w") as f:
        for file_id, spk, onset, offset in segments:
            f.write(f"SPEAKER {file_id} 1 {onset:.3f} {offset - onset:.3f} "
                    f"<NA> <NA> {spk} <NA> <NA>\n")


def read_rttm(path) -> dict[str, list[tuple[str, float, float]]]:
    """Returns file_id -> list of (speaker, onset_s, offset_s)."""
    out: dict[str, list[tuple[str, float, float]]] = {}
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith(";"):
                continue
            parts = line.split()
            if len(parts) < 8 or parts[0] != "SPEAKER":
                raise ParseError("malformed RTTM line", path=str(path), line=i)
            try:
                onset = float(parts[3])
                dur = float(parts[4])
            except ValueError:
                raise ParseError("non-numeric RTTM onset/duration", path=str(path), line=i) from None
            out.setdefault(parts[1], []).append((parts[7], onset, onset + dur))
    return out


def segments_to_activities(segments: Sequence[tuple[str, float, float]], n_frames: int,
                           frame_ms: float) -> tuple[list[str], list[np.ndarray]]:
    """Rasterize segments to per-speaker dense activities.

    A frame is active when its midpoint falls inside a segment. Speakers are
    ordered by first onset, then label, which matches the slot order the
    simulator writes.
    """
    by_spk: dict[str, list[tuple[float, float]]] = {}
    first_on: dict[str, float] = {}
    for spk, on, off in segments:
        by_spk.setdefault(spk, []).append((on, off))
        first_on[spk] = min(first_on.get(spk, np.inf), on)
    order = sorted(by_spk, key=lambda s: (first_on[s], s))
    dt = frame_ms / 1000.0
    mids = (np.arange(n_frames) + 0.5) * dt
    acts = []
    for spk in order:
        y = np.zeros(n_frames)
        for on, off in by_spk[spk]:
            y[(mids >= on) & (mids < off)] = 1.0
        acts.append(y)
    return order, acts


# -- transcripts -----------------------------------------------------------------


def write_transcripts(path, samples: Sequence[Mapping]) -> None:
    """samples: [{"id": str, "speakers": {label: {"words": [...]}}}]"""
    payload = {"schema": TRANSCRIPTS_SCHEMA, "samples": list(samples)}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def read_transcripts(path) -> list[dict]:
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad JSON: {exc.msg}", path=str(path), line=exc.lineno) from None
    if payload.get("schema") != TRANSCRIPTS_SCHEMA:
        raise ParseError(f"expected schema {TRANSCRIPTS_SCHEMA}", path=str(path))
    samples = payload.get("samples")
    if not isinstance(samples, list):
        raise ParseError("transcripts: 'samples' must be a list", path=str(path))
    for s in samples:
        if "id" not in s or "speakers" not in s or not isinstance(s["speakers"], dict):
            raise ParseError(f"bad transcript entry {s.get('id')!r}", path=str(path))
        for label, stream in s["speakers"].items():
            if "words" not in stream or not isinstance(stream["words"], list):
                raise ParseError(f"speaker {label!r} lacks a word list", path=str(path))
    return samples


def write_report(path, report: Mapping) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
