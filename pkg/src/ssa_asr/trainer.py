"""Training loop: random target-speaker supervision, AdamW with decoupled
weight decay, Noam schedule, validation tracking and top-5 checkpoint
averaging.

Each step draws a batch of mixtures, picks one target speaker per mixture
uniformly at random, runs the encoder with that speaker's activity (optionally
degraded to emulate diarizer error) and minimizes the CTC loss against that
speaker's transcript. Everything is driven by one seed; two runs with equal
(seed, config) produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .ctc import ctc_loss, greedy_decode
from .errors import ContractError, NumericError, TrainingDivergedError
from .metrics import ErrorCounts, cpwer, edit_ops
from .mixsim import MixtureSample, SimConfig, ToySpeaker, degrade_activity, sample_mixture
from .model import ModelParams, SsaModel


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 6000
    batch_size: int = 4
    ratios: tuple[float, float, float] = (1.0, 3.0, 6.0)
    lr_coeff: float = 5.0
    warmup_steps: int = 1000
    weight_decay: float = 0.001
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    val_every: int = 500
    ckpt_every: int = 500
    val_size: int = 24
    degrade_severity: float = 0.0
    top_k_average: int = 5

    def __post_init__(self):
        if self.steps <= 0:
            raise ContractError("steps must be > 0")
        if self.warmup_steps <= 0:
            raise ContractError("warmup_steps must be > 0")


class OptimizerState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: ModelParams):
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.step = 0


def noam_lr(step: int, d_model: int, warmup: int, coeff: float) -> float:
    """coeff * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ContractError(f"noam_lr needs step >= 1, got {step}")
    return coeff * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adamw_step(params: ModelParams, grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float, wd: float,
               betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-8,
               ) -> tuple[ModelParams, OptimizerState]:
    """Bias-corrected Adam update with decoupled weight decay (decay applied
    straight to the weights, scaled by lr). Mutates params and state."""
    params.require_mutable("adamw_step")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        if g.shape != tensor.data.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, "
                                f"expected {tensor.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        tensor.data = tensor.data - lr * update - lr * wd * tensor.data
    return params, state


def sample_target(rng: np.random.Generator, sample: MixtureSample) -> int:
    """Uniformly pick which speaker's activity and transcript supervise this
    example."""
    if sample.k < 1:
        raise ContractError("mixture has no speakers")
    return int(rng.integers(0, sample.k))


@dataclass
class TrainingExample:
    """Activity and transcript pulled from the same speaker slot, so the
    supervision pairing cannot drift apart."""

    activity: object
    tokens: list[int]
    target_index: int

    @classmethod
    def from_sample(cls, sample: MixtureSample, index: int) -> "TrainingExample":
        return cls(sample.activities[index], list(sample.references[index]), index)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = math.fsum(float((g * g).sum()) for g in grads.values())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def average_checkpoints(param_sets: Sequence[Mapping[str, np.ndarray]],
                        val_wers: Sequence[float],
                        steps: Sequence[int] | None = None,
                        top_k: int = 5) -> dict[str, np.ndarray]:
    """Average the min(top_k, n) checkpoints with the lowest validation score;
    ties go to the later step."""
    n = len(param_sets)
    if n < 1:
        raise ContractError("average_checkpoints needs at least one checkpoint")
    if len(val_wers) != n:
        raise ContractError("one validation score per checkpoint required")
    if steps is None:
        steps = list(range(n))
    names = set(param_sets[0])
    for ps in param_sets[1:]:
        if set(ps) != names or any(ps[k].shape != param_sets[0][k].shape for k in names):
            raise ContractError("checkpoints carry mismatched parameter sets")
    order = sorted(range(n), key=lambda i: (val_wers[i], -steps[i]))
    chosen = order[: min(top_k, n)]
    return {
        name: np.mean([param_sets[i][name] for i in chosen], axis=0)
        for name in names
    }


@dataclass
class CheckpointRecord:
    step: int
    val_wer_1mix: float
    val_cpwer_2mix: float
    arrays: dict[str, np.ndarray]


@dataclass
class TrainResult:
    final_params: ModelParams
    checkpoints: list[CheckpointRecord]
    log: list[dict]
    selected_steps: list[int] = field(default_factory=list)


def _decode_sample(model: SsaModel, sample: MixtureSample) -> list[list[int]]:
    hyps = []
    for act in sample.activities:
        lp = model.forward_log_probs(sample.features, act)
        hyps.append(greedy_decode(lp))
    return hyps


def evaluate_wer_1mix(model: SsaModel, samples: Sequence[MixtureSample]) -> float:
    counts = ErrorCounts()
    for s in samples:
        hyp = _decode_sample(model, s)[0]
        counts = counts + edit_ops(s.references[0], hyp)
    return counts.rate


def evaluate_cpwer(model: SsaModel, samples: Sequence[MixtureSample]) -> float:
    total_err = 0
    total_ref = 0
    for s in samples:
        hyps = _decode_sample(model, s)
        refs = {f"ref{i}": s.references[i] for i in range(s.k)}
        res = cpwer(refs, hyps)
        total_err += res.counts.total
        total_ref += res.counts.ref_words
    return total_err / total_ref


def train(cfg: TrainConfig, model: SsaModel, pool: Sequence[ToySpeaker],
          sim: SimConfig = SimConfig(), log_path=None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the full recipe; returns raw checkpoints plus the averaged result.

    Aborts with TrainingDivergedError (step, lr, grad norm attached) if the
    loss goes non-finite.
    """
    params = model.params
    ss = np.random.SeedSequence(cfg.seed)
    data_rng, target_rng, val_rng, degrade_rng = (np.random.default_rng(s) for s in ss.spawn(4))

    val_1mix = [sample_mixture(val_rng, (1, 0, 0), pool, sim) for _ in range(cfg.val_size)]
    val_2mix = [sample_mixture(val_rng, (0, 1, 0), pool, sim) for _ in range(cfg.val_size)]

    state = OptimizerState(params)
    records: list[CheckpointRecord] = []
    log: list[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None

    try:
        for step in range(1, cfg.steps + 1):
            batch = [sample_mixture(data_rng, cfg.ratios, pool, sim) for _ in range(cfg.batch_size)]
            lr = noam_lr(step, params.config.d_model, cfg.warmup_steps, cfg.lr_coeff)
            params.zero_grad()
            try:
                with ad.tape():
                    losses = []
                    for sample in batch:
                        ex = TrainingExample.from_sample(sample, sample_target(target_rng, sample))
                        act = ex.activity
                        if cfg.degrade_severity > 0:
                            act = degrade_activity(act, cfg.degrade_severity,
                                                   int(degrade_rng.integers(0, 2 ** 63)))
                        lp = model.forward_log_probs(sample.features, act)
                        losses.append(ctc_loss(lp, ex.tokens))
                    loss = ad.scale(ad.add_n(losses), 1.0 / len(losses))
                    loss_val = loss.item()
                    grad_map = ad.backward(loss)
            except NumericError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: {exc}", step=step, lr=lr, grad_norm=float("nan")
                ) from exc

            grads = {name: grad_map.get(t, np.zeros_like(t.data)) for name, t in params.items()}
            grad_norm = clip_gradients(grads, cfg.grad_clip)
            if not math.isfinite(loss_val) or not math.isfinite(grad_norm):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_val} at step {step}", step=step, lr=lr, grad_norm=grad_norm
                )
            adamw_step(params, grads, state, lr, cfg.weight_decay, cfg.betas, cfg.eps)

            entry = {"step": step, "loss": loss_val, "lr": lr, "grad_norm": grad_norm}
            if step % cfg.val_every == 0 or step == cfg.steps:
                entry["val_wer_1mix"] = evaluate_wer_1mix(model, val_1mix)
                entry["val_cpwer_2mix"] = evaluate_cpwer(model, val_2mix)
            if step % cfg.ckpt_every == 0 or step == cfg.steps:
                wer1 = entry.get("val_wer_1mix")
                cp2 = entry.get("val_cpwer_2mix")
                if wer1 is None:
                    wer1 = evaluate_wer_1mix(model, val_1mix)
                    cp2 = evaluate_cpwer(model, val_2mix)
                records.append(CheckpointRecord(step, wer1, cp2, params.as_arrays()))
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
            if progress is not None:
                progress(entry)
    finally:
        if log_file is not None:
            log_file.close()

    # checkpoint selection keys on the 2-mix score; 1-mix WER is logged
    avg = average_checkpoints(
        [r.arrays for r in records],
        [r.val_cpwer_2mix for r in records],
        steps=[r.step for r in records],
        top_k=cfg.top_k_average,
    )
    order = sorted(range(len(records)), key=lambda i: (records[i].val_cpwer_2mix, -records[i].step))
    selected = sorted(records[i].step for i in order[: min(cfg.top_k_average, len(records))])

    final = params.copy()
    final.load_arrays(avg)
    result = TrainResult(final_params=final, checkpoints=records, log=log, selected_steps=selected)

    # soft sanity: averaged model should not be worse than the recent raw ones
    final_model = SsaModel(params=final)
    avg_cp2 = evaluate_cpwer(final_model, val_2mix)
    last5 = [r.val_cpwer_2mix for r in records[-5:]]
    soft = {"averaged_val_cpwer_2mix": avg_cp2,
            "median_last5_cpwer_2mix": float(np.median(last5)),
            "averaged_not_worse": avg_cp2 <= float(np.median(last5))}
    result.log.append({"step": cfg.steps, "checkpoint_average": soft,
                       "selected_steps": selected})
    return result


def train_config_from_dict(d: Mapping) -> TrainConfig:
    """Build a TrainConfig from a parsed key-value config file."""
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise ContractError(f"unknown training config keys: {sorted(unknown)}")
    kwargs = dict(d)
    for key in ("ratios", "betas"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return TrainConfig(**kwargs)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["ratios"] = list(d["ratios"])
    d["betas"] = list(d["betas"])
    return d
