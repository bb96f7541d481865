"""CTC loss (log-space forward-backward) and greedy decoding.

Token ids live in [0, V); the blank id is V, i.e. the last column of the
log-prob table. The loss is registered on the autodiff tape with its
analytic gradient (negative state-occupancy posteriors), so it composes
with the rest of the model under `backward`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor
from .errors import ContractError, InfeasibleTargetError, NumericError

# Fixed toy vocabulary used to render token ids as words (32 entries).
TOY_VOCAB = (
    "time", "year", "way", "day", "man", "thing", "life", "hand",
    "part", "child", "eye", "woman", "place", "work", "week", "case",
    "point", "group", "number", "fact", "night", "home", "water", "room",
    "area", "money", "story", "month", "book", "word", "side", "house",
)

TokenSeq = list[int]

NEG_INF = -np.inf


def tokens_to_words(tokens: Sequence[int]) -> list[str]:
    if any(t < 0 or t >= len(TOY_VOCAB) for t in tokens):
        raise ContractError(f"token id out of toy vocabulary range [0, {len(TOY_VOCAB)})")
    return [TOY_VOCAB[t] for t in tokens]


def words_to_tokens(words: Sequence[str]) -> TokenSeq:
    index = {w: i for i, w in enumerate(TOY_VOCAB)}
    try:
        return [index[w] for w in words]
    except KeyError as exc:
        raise ContractError(f"word {exc.args[0]!r} not in toy vocabulary") from None


def _validate_targets(targets: Sequence[int], blank: int) -> None:
    for t in targets:
        if not (0 <= t < blank):
            raise ContractError(f"target token {t} outside [0, {blank}) (blank id {blank} excluded)")


def min_frames(targets: Sequence[int]) -> int:
    """Fewest frames that admit a valid alignment: one per token plus a blank
    between each adjacent repeated pair."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def _augment(targets: Sequence[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    aug = np.full(2 * len(targets) + 1, blank, dtype=np.int64)
    aug[1::2] = targets
    # skip transition s-2 -> s allowed when label s is not blank and differs from s-2
    skip = np.zeros(len(aug), dtype=bool)
    if len(aug) > 2:
        skip[2:] = (aug[2:] != blank) & (aug[2:] != aug[:-2])
    return aug, skip


def ctc_loss(log_probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Negative log marginal probability of `targets` under a (T, V+1)
    log-prob table, summed over all valid alignments in log space."""
    log_probs = autodiff.as_tensor(log_probs)
    if log_probs.ndim != 2:
        raise ContractError(f"ctc_loss expects a (T, V+1) table, got shape {log_probs.shape}")
    lp = log_probs.data
    t_len, width = lp.shape
    blank = width - 1
    targets = list(targets)
    _validate_targets(targets, blank)
    if t_len < min_frames(targets):
        raise InfeasibleTargetError(
            f"{len(targets)} tokens (min {min_frames(targets)} frames) cannot fit in {t_len} frames"
        )

    aug, skip = _augment(targets, blank)
    n_states = len(aug)

    alpha = np.full((t_len, n_states), NEG_INF)
    alpha[0, 0] = lp[0, aug[0]]
    if n_states > 1:
        alpha[0, 1] = lp[0, aug[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate([[NEG_INF], prev[:-1]])
        move = np.logaddexp(stay, step)
        jump = np.concatenate([[NEG_INF, NEG_INF], prev[:-2]])
        move = np.where(skip, np.logaddexp(move, jump), move)
        alpha[t] = lp[t, aug] + move

    log_p = alpha[-1, -1] if n_states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(log_p):
        raise NumericError("ctc_loss: non-finite alignment probability")
    loss_val = np.asarray(-log_p)

    def bw(g: np.ndarray) -> None:
        if not log_probs.requires_grad:
            return
        beta = np.full((t_len, n_states), NEG_INF)
        beta[-1, -1] = lp[-1, aug[-1]]
        if n_states > 1:
            beta[-1, -2] = lp[-1, aug[-2]]
        for t in range(t_len - 2, -1, -1):
            nxt = beta[t + 1]
            stay = nxt
            step = np.concatenate([nxt[1:], [NEG_INF]])
            move = np.logaddexp(stay, step)
            jump = np.concatenate([nxt[2:], [NEG_INF, NEG_INF]])
            skip_fwd = np.zeros(n_states, dtype=bool)
            skip_fwd[:-2] = skip[2:]
            move = np.where(skip_fwd, np.logaddexp(move, jump), move)
            beta[t] = lp[t, aug] + move
        # occupancy gamma_t(s), one lp factor double-counted between alpha/beta
        occ = np.exp(alpha + beta - lp[:, aug] - log_p)
        post = np.zeros_like(lp)
        np.add.at(post, (np.arange(t_len)[:, None], aug[None, :]), occ)
        autodiff._accumulate(log_probs, -post * g)

    return autodiff._make(loss_val, "ctc_loss", (log_probs,), bw)


def greedy_decode(log_probs) -> TokenSeq:
    """Frame argmax, collapse consecutive repeats, drop blanks.

    Ties break toward the lowest token id (argmax picks the first maximum).
    """
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if lp.ndim != 2:
        raise ContractError(f"greedy_decode expects a (T, V+1) table, got shape {lp.shape}")
    blank = lp.shape[1] - 1
    out: TokenSeq = []
    prev = -1
    for c in np.argmax(lp, axis=1):
        c = int(c)
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out


class GreedyState:
    """Incremental greedy CTC decoding across chunk boundaries."""

    __slots__ = ("prev", "tokens")

    def __init__(self) -> None:
        self.prev = -1
        self.tokens: TokenSeq = []

    def extend(self, log_probs) -> TokenSeq:
        """Consume frames; returns only the newly emitted tokens."""
        lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
        blank = lp.shape[1] - 1
        new: TokenSeq = []
        for c in np.argmax(lp, axis=1):
            c = int(c)
            if c != self.prev and c != blank:
                new.append(c)
            self.prev = c
        self.tokens.extend(new)
        return new
