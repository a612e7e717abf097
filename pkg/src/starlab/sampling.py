"""Path decoding for both paradigms, with unmask-order bookkeeping.

AR decodes greedily left to right. NAR starts from an all-mask target region
and iteratively commits tokens; the step at which each position is committed
is recorded so decoding-order statistics can be aggregated across a test set.
Committed tokens are never revised, and prefix positions are never modified.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .backbone import Backbone
from .errors import ConfigError
from .stargraph import TestSet

POLICIES = ("confidence", "random", "left_to_right", "right_to_left")


@dataclass
class DecodeRecord:
    path: np.ndarray         # predicted target region
    unmask_step: np.ndarray  # step at which each position was committed; -1 = forced hint
    steps_taken: int


@dataclass
class DynamicsMatrix:
    """U[step, position] = fraction of records committing `position` at `step`."""

    U: np.ndarray

    @property
    def steps(self) -> int:
        return self.U.shape[0]

    @property
    def path_len(self) -> int:
        return self.U.shape[1]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "position", "fraction"])
            for s in range(self.steps):
                for p in range(self.path_len):
                    writer.writerow([s, p, f"{self.U[s, p]:.6f}"])
        return path


@torch.no_grad()
def ar_decode_batch(
    model: Backbone,
    prefixes: np.ndarray,
    path_len: int,
    forced: np.ndarray | None = None,
) -> np.ndarray:
    """Greedy left-to-right decoding; `forced` pins the first k gold tokens."""
    model.eval()
    tokens = torch.from_numpy(np.ascontiguousarray(prefixes)).long()
    k = 0 if forced is None else forced.shape[1]
    for j in range(path_len):
        if j < k:
            nxt = torch.from_numpy(np.ascontiguousarray(forced[:, j])).long()
        else:
            logits = model(tokens)
            nxt = logits[:, -1, :].argmax(dim=-1)
        tokens = torch.cat([tokens, nxt[:, None]], dim=1)
    return tokens[:, prefixes.shape[1]:].numpy()


@torch.no_grad()
def nar_decode_batch(
    model: Backbone,
    prefixes: np.ndarray,
    path_len: int,
    mask_id: int,
    steps: int | None = None,
    commit_per_step: int = 1,
    policy: str = "confidence",
    forced: np.ndarray | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Iterative unmasking. Returns (predictions, unmask steps, steps taken).

    Per step, the model runs at time t = 1 - s/steps and `commit_per_step`
    still-masked positions are committed irrevocably with their argmax token.
    Selection follows `policy`; confidence = max softmax probability, ties
    broken toward the lowest position index.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown unmask policy {policy!r}; choose from {POLICIES}")
    model.eval()
    n, plen = prefixes.shape
    k = 0 if forced is None else forced.shape[1]
    todo = path_len - k
    if steps is None:
        steps = max(todo, 1)
    if commit_per_step < 1 or steps < 1:
        raise ConfigError("steps and commit_per_step must be >= 1")
    if commit_per_step * steps < todo:
        raise ConfigError(
            f"cannot commit {todo} positions in {steps} steps at {commit_per_step} per step"
        )
    rng = np.random.default_rng(seed)
    region = np.full((n, path_len), mask_id, dtype=np.int64)
    unmask_step = np.full((n, path_len), -1, dtype=np.int64)
    committed = np.zeros((n, path_len), dtype=bool)
    if forced is not None:
        region[:, :k] = forced
        committed[:, :k] = True
    tokens = torch.from_numpy(np.concatenate([prefixes, region], axis=1)).long()

    steps_taken = 0
    for s in range(steps):
        if committed.all():
            break
        steps_taken = s + 1
        t = 1.0 - s / steps
        logits = model(tokens, t=t)[:, plen:, :]
        probs = logits.softmax(dim=-1).numpy()
        argmax = probs.argmax(axis=-1)
        conf = probs.max(axis=-1)
        if policy == "random":
            score = rng.random(conf.shape)
        elif policy == "left_to_right":
            score = -np.arange(path_len, dtype=float)[None, :].repeat(n, axis=0)
        elif policy == "right_to_left":
            score = np.arange(path_len, dtype=float)[None, :].repeat(n, axis=0)
        else:
            score = conf
        score = np.where(committed, -np.inf, score)
        # stable sort on (-score, position): equal scores resolve to the lowest index
        order = np.argsort(-score, axis=1, kind="stable")
        for row in range(n):
            open_slots = int((~committed[row]).sum())
            for pos in order[row, : min(commit_per_step, open_slots)]:
                committed[row, pos] = True
                unmask_step[row, pos] = s
                tok = int(argmax[row, pos])
                region[row, pos] = tok
                tokens[row, plen + pos] = tok
    return region, unmask_step, steps_taken


def ar_decode(model: Backbone, prefix: np.ndarray, path_len: int) -> DecodeRecord:
    """Greedy AR decode of one instance; unmask_step[i] = i by definition."""
    preds = ar_decode_batch(model, np.asarray(prefix)[None, :], path_len)
    return DecodeRecord(preds[0], np.arange(path_len, dtype=np.int64), path_len)


def nar_decode(
    model: Backbone,
    prefix: np.ndarray,
    path_len: int,
    mask_id: int,
    steps: int | None = None,
    commit_per_step: int = 1,
    policy: str = "confidence",
    seed: int = 0,
) -> DecodeRecord:
    preds, unmask, taken = nar_decode_batch(
        model, np.asarray(prefix)[None, :], path_len, mask_id,
        steps=steps, commit_per_step=commit_per_step, policy=policy, seed=seed,
    )
    return DecodeRecord(preds[0], unmask[0], taken)


def hinted_decode(
    model: Backbone,
    prefix: np.ndarray,
    gold: np.ndarray,
    k: int,
    mask_id: int | None = None,
    steps: int | None = None,
    commit_per_step: int = 1,
    policy: str = "confidence",
    seed: int = 0,
) -> DecodeRecord:
    """Decode with the first k gold tokens pinned; k = len(gold) returns gold."""
    gold = np.asarray(gold)
    path_len = len(gold)
    if k > path_len:
        raise ConfigError(f"hint k={k} exceeds path length {path_len}")
    forced = gold[None, :k] if k else None
    if model.config.mode == "ar":
        preds = ar_decode_batch(model, np.asarray(prefix)[None, :], path_len, forced=forced)
        unmask = np.arange(path_len, dtype=np.int64)
        unmask[:k] = -1
        return DecodeRecord(preds[0], unmask, path_len - k)
    if mask_id is None:
        mask_id = model.config.vocab_size - 1
    preds, unmask, taken = nar_decode_batch(
        model, np.asarray(prefix)[None, :], path_len, mask_id,
        steps=steps, commit_per_step=commit_per_step, policy=policy, forced=forced, seed=seed,
    )
    return DecodeRecord(preds[0], unmask[0], taken)


def decode_testset(
    model: Backbone,
    testset: TestSet,
    eval_size: int | None = None,
    steps: int | None = None,
    commit_per_step: int = 1,
    policy: str = "confidence",
    hint_k: int = 0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[DecodeRecord]]:
    """Decode the first `eval_size` instances. Returns (preds, golds, records)."""
    n = testset.size if eval_size is None else min(eval_size, testset.size)
    prefixes = testset.prefixes[:n]
    golds = testset.regions[:n]
    path_len = golds.shape[1]
    if hint_k > path_len:
        raise ConfigError(f"hint k={hint_k} exceeds region length {path_len}")
    forced = golds[:, :hint_k] if hint_k else None
    if model.config.mode == "ar":
        preds = ar_decode_batch(model, prefixes, path_len, forced=forced)
        base = np.arange(path_len, dtype=np.int64)
        base = np.where(base < hint_k, -1, base)
        records = [DecodeRecord(preds[i], base.copy(), path_len - hint_k) for i in range(n)]
    else:
        mask_id = testset.spec.pool_size
        preds, unmask, taken = nar_decode_batch(
            model, prefixes, path_len, mask_id,
            steps=steps, commit_per_step=commit_per_step, policy=policy, forced=forced, seed=seed,
        )
        records = [DecodeRecord(preds[i], unmask[i], taken) for i in range(n)]
    return preds, golds, records


def dynamics_matrix(records: list[DecodeRecord]) -> DynamicsMatrix:
    """Aggregate per-position commit steps into column-normalized fractions."""
    if not records:
        raise ValueError("no decode records")
    path_len = len(records[0].path)
    steps = max(r.steps_taken for r in records)
    steps = max(steps, int(max(r.unmask_step.max() for r in records)) + 1)
    U = np.zeros((steps, path_len))
    for r in records:
        if len(r.path) != path_len or len(r.unmask_step) != path_len:
            raise ValueError("inconsistent record shapes")
        if (r.unmask_step < 0).any():
            raise ValueError("records with forced (hinted) positions have no full unmask order")
        for pos, s in enumerate(r.unmask_step):
            U[int(s), pos] += 1
    return DynamicsMatrix(U / len(records))


def position_step_spearman(records: list[DecodeRecord]) -> float:
    """Spearman correlation between path position and mean unmask step.

    Negative values indicate anti-causal (target-end first) decoding.
    """
    mean_steps = np.mean([r.unmask_step for r in records], axis=0)
    positions = np.arange(len(mean_steps))
    rho = stats.spearmanr(positions, mean_steps).statistic
    return float(rho)
