"""Streaming single-epoch training for AR and masked-denoising objectives.

Instances are generated on the fly with rejection against the held-out test
set and everything already seen, so no sequence is ever visited twice. Both
paradigms share the optimizer recipe: AdamW with linear warmup followed by
cosine decay to a fixed fraction of the peak rate, with gradient clipping.

Regimes: "conditional" restricts the loss to the target-region tokens (and,
for NAR, never corrupts the prefix); "full_sequence" trains on the entire
sequence. Evaluation always decodes only the target region from a clean
prefix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, init_backbone
from .errors import ConfigError
from .sampling import decode_testset
from .stargraph import InstanceStream, StarSpec, TaskVariant, TestSet, Vocabulary

MODES = ("ar", "nar")
REGIMES = ("conditional", "full_sequence")


@dataclass(frozen=True)
class MaskSchedule:
    """Polynomial corruption schedule: mask rate t**w at time t."""

    w: float = 1.0

    def __post_init__(self):
        if self.w <= 0:
            raise ConfigError(f"schedule exponent must be positive, got {self.w}")

    def rate(self, t):
        return t ** self.w


@dataclass(frozen=True)
class TrainConfig:
    spec: StarSpec
    variant: TaskVariant = TaskVariant.original()
    mode: str = "nar"
    regime: str = "conditional"
    # backbone
    d_model: int = 384
    n_blocks: int = 12
    n_heads: int = 6
    dropout: float = 0.1
    cond_dim: int = 4
    # data / evaluation
    batch_size: int = 256
    max_examples: int = 2_000_000
    eval_every: int | None = None  # examples between evals; None = 50 batches' worth
    eval_size: int = 256
    eval_hinted_k: int | None = None
    early_stop_threshold: float = 0.95
    early_stop_patience: int = 10
    edge_order: str = "shuffled"
    # optimizer
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.03
    warmup_steps: int = 5000
    grad_clip: float = 1.0
    eta_min_ratio: float = 0.01
    # corruption (nar only)
    mask_w: float = 1.0
    t_per_token: bool = False
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_examples < 1:
            raise ConfigError("max_examples must be >= 1")
        MaskSchedule(self.mask_w)

    @property
    def schedule(self) -> MaskSchedule:
        return MaskSchedule(self.mask_w)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.spec.pool_size)

    @property
    def seq_len(self) -> int:
        return self.spec.prefix_len + self.variant.region_len(self.spec.l)

    @property
    def region_len(self) -> int:
        return self.variant.region_len(self.spec.l)

    @property
    def max_steps(self) -> int:
        return math.ceil(self.max_examples / self.batch_size)

    @property
    def eval_every_examples(self) -> int:
        return self.eval_every if self.eval_every is not None else 50 * self.batch_size

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=self.vocab.size,
            max_len=self.seq_len,
            d_model=self.d_model,
            n_blocks=self.n_blocks,
            n_heads=self.n_heads,
            dropout=self.dropout,
            cond_dim=self.cond_dim,
            mode=self.mode,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["spec"] = {"d": self.spec.d, "l": self.spec.l, "pool_size": self.spec.pool_size}
        out["variant"] = self.variant.label
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["spec"] = StarSpec(**data["spec"])
        data["variant"] = TaskVariant.parse(data["variant"])
        return cls(**data)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EvalPoint:
    examples_seen: int
    step: int
    lr: float
    loss: float
    exact_match: float
    per_position: list[float]
    wallclock_s: float
    hinted_exact_match: float | None = None

    def to_json(self) -> dict:
        out = {
            "examples_seen": self.examples_seen,
            "step": self.step,
            "lr": self.lr,
            "loss": self.loss,
            "exact_match": self.exact_match,
            "per_position": self.per_position,
            "wallclock_s": self.wallclock_s,
        }
        if self.hinted_exact_match is not None:
            out["hinted_exact_match"] = self.hinted_exact_match
        return out


@dataclass
class RunRecord:
    examples_seen: int = 0
    step: int = 0
    evals: list[EvalPoint] = field(default_factory=list)
    converged: bool = False
    samples_to_convergence: int | None = None

    def to_dict(self) -> dict:
        return {
            "examples_seen": self.examples_seen,
            "step": self.step,
            "converged": self.converged,
            "samples_to_convergence": self.samples_to_convergence,
            "evals": [e.to_json() for e in self.evals],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        evals = [
            EvalPoint(
                examples_seen=e["examples_seen"], step=e["step"], lr=e["lr"], loss=e["loss"],
                exact_match=e["exact_match"], per_position=e["per_position"],
                wallclock_s=e["wallclock_s"], hinted_exact_match=e.get("hinted_exact_match"),
            )
            for e in data["evals"]
        ]
        return cls(
            examples_seen=data["examples_seen"], step=data["step"], evals=evals,
            converged=data["converged"], samples_to_convergence=data["samples_to_convergence"],
        )


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to eta_min_ratio * peak."""
    peak = config.lr
    floor = peak * config.eta_min_ratio
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return peak * step / config.warmup_steps
    decay_span = max(1, config.max_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / decay_span)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


def ar_loss(logits: torch.Tensor, tokens: torch.Tensor, prefix_len: int, regime: str) -> torch.Tensor:
    """Mean next-token cross-entropy. Conditional mode keeps only target-region
    positions; full_sequence keeps every predictable position (all but the first)."""
    shifted_logits = logits[:, :-1, :]
    targets = tokens[:, 1:]
    losses = torch.nn.functional.cross_entropy(
        shifted_logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    ).view(targets.shape)
    if regime == "conditional":
        losses = losses[:, prefix_len - 1 :]
    return losses.mean()


def nar_corrupt(
    tokens: np.ndarray,
    t: np.ndarray,
    trainable_region: np.ndarray,
    rng: np.random.Generator,
    mask_id: int,
    schedule: MaskSchedule = MaskSchedule(),
    t_per_token: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask each trainable position independently with probability rate(t).

    `t` has one entry per sequence; with t_per_token an independent time is
    drawn per position instead (the sequence-level t is then only the value
    fed to the network). Positions outside `trainable_region` are never
    masked.
    """
    t_eff = rng.random(tokens.shape) if t_per_token else np.asarray(t)[:, None]
    mask = (rng.random(tokens.shape) < schedule.rate(t_eff)) & trainable_region[None, :]
    corrupted = np.where(mask, mask_id, tokens)
    return corrupted, mask


def nar_loss(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; a zero-mask batch yields 0."""
    if not mask.any():
        return logits.sum() * 0.0
    losses = torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), tokens.reshape(-1), reduction="none"
    ).view(tokens.shape)
    return losses[mask].mean()


def _seeds(seed: int) -> dict[str, int]:
    ss = np.random.SeedSequence(seed)
    data, init, torch_seed, eval_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    return {"data": data, "init": init, "torch": torch_seed, "eval": eval_seed}


def evaluate(model: Backbone, config: TrainConfig, testset: TestSet) -> tuple[float, list[float], float | None]:
    """Exact match + per-position accuracy on the fixed eval subset."""
    was_training = model.training
    model.eval()
    preds, golds, _ = decode_testset(model, testset, eval_size=config.eval_size)
    em = float((preds == golds).all(axis=1).mean())
    per_pos = (preds == golds).mean(axis=0).tolist()
    hinted = None
    if config.eval_hinted_k is not None:
        hp, hg, _ = decode_testset(model, testset, eval_size=config.eval_size, hint_k=config.eval_hinted_k)
        hinted = float((hp == hg).all(axis=1).mean())
    if was_training:
        model.train()
    return em, per_pos, hinted


def train(
    config: TrainConfig,
    testset: TestSet,
    run_dir: str | Path | None = None,
    on_eval=None,
    resume: bool = True,
) -> tuple[RunRecord, Backbone]:
    """Run one streaming training job; returns the record and the final model.

    With `run_dir` set, writes metrics.jsonl / manifest.json / status.json and
    checkpoints/last.pt at every evaluation, and resumes from the checkpoint
    when one exists.
    """
    if testset.spec != config.spec:
        raise ConfigError(f"test set spec {testset.spec} does not match config spec {config.spec}")
    if config.eval_size > testset.size:
        raise ConfigError(f"eval_size={config.eval_size} exceeds test set size {testset.size}")
    if config.variant.region_len(config.spec.l) != testset.regions.shape[1]:
        raise ConfigError("test set variant does not match config variant")

    seeds = _seeds(config.seed)
    torch.manual_seed(seeds["torch"])
    model = init_backbone(config.backbone_config(), seeds["init"])
    opt = torch.optim.AdamW(
        model.parameters(), lr=0.0,
        betas=(config.beta1, config.beta2), eps=config.eps, weight_decay=config.weight_decay,
    )
    stream = InstanceStream(
        config.spec, config.variant, seeds["data"],
        forbidden=testset.fingerprint_set, edge_order=config.edge_order,
    )
    data_rng = np.random.default_rng(seeds["data"] + 1)
    record = RunRecord()
    consecutive = 0
    loss_sum, loss_n = 0.0, 0
    t0 = time.monotonic()
    clock_base = 0.0

    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_path = run_dir / "checkpoints" / "last.pt" if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"config": config.to_dict(), "config_hash": config.hash(), "seeds": seeds}
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if resume and ckpt_path.exists():
            state = torch.load(ckpt_path, map_location="cpu", weights_only=False)
            if state["config_hash"] != config.hash():
                raise ConfigError(f"{ckpt_path}: checkpoint belongs to a different config")
            model.load_state_dict(state["params"])
            opt.load_state_dict(state["optimizer"])
            stream.restore(state["stream"])
            data_rng.bit_generator.state = state["data_rng"]
            torch.set_rng_state(state["torch_rng"])
            record = RunRecord.from_dict(state["record"])
            consecutive = state["consecutive"]
            clock_base = state["wallclock_s"]
            # drop metrics lines newer than the checkpoint; they will be replayed
            with open(run_dir / "metrics.jsonl", "w") as f:
                for point in record.evals:
                    f.write(json.dumps(point.to_json()) + "\n")

    region_mask = np.zeros(config.seq_len, dtype=bool)
    region_mask[config.spec.prefix_len:] = True
    trainable = region_mask if config.regime == "conditional" else np.ones(config.seq_len, dtype=bool)
    mask_id = config.vocab.mask_id

    def save_state():
        if not ckpt_path:
            return
        ckpt_path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "config_hash": config.hash(),
                "backbone_config": dataclasses.asdict(config.backbone_config()),
                "params": model.state_dict(),
                "optimizer": opt.state_dict(),
                "stream": stream.state(),
                "data_rng": data_rng.bit_generator.state,
                "torch_rng": torch.get_rng_state(),
                "record": record.to_dict(),
                "consecutive": consecutive,
                "wallclock_s": clock_base + time.monotonic() - t0,
            },
            ckpt_path.parent / "last.tmp",
        )
        (ckpt_path.parent / "last.tmp").replace(ckpt_path)

    if record.converged or record.examples_seen >= config.max_examples:
        if run_dir:
            _write_status(run_dir, "completed", record)
        return record, model  # already finished; resume is a no-op

    if run_dir:
        _write_status(run_dir, "running", record)
    model.train()
    next_eval = (record.examples_seen // config.eval_every_examples + 1) * config.eval_every_examples
    while record.examples_seen < config.max_examples:
        n = min(config.batch_size, config.max_examples - record.examples_seen)
        seqs, _ = stream.next_batch(n)
        tokens = torch.from_numpy(seqs).long()
        record.step += 1
        lr = lr_at(record.step, config)
        for group in opt.param_groups:
            group["lr"] = lr

        if config.mode == "ar":
            logits = model(tokens)
            loss = ar_loss(logits, tokens, config.spec.prefix_len, config.regime)
        else:
            t = data_rng.random(n)
            corrupted, mask = nar_corrupt(
                seqs, t, trainable, data_rng, mask_id, config.schedule, config.t_per_token
            )
            logits = model(torch.from_numpy(corrupted).long(), t=torch.from_numpy(t).float())
            loss = nar_loss(logits, tokens, torch.from_numpy(mask))

        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        record.examples_seen += n
        loss_sum += float(loss.detach())
        loss_n += 1

        if record.examples_seen >= next_eval:
            next_eval += config.eval_every_examples
            em, per_pos, hinted = evaluate(model, config, testset)
            point = EvalPoint(
                examples_seen=record.examples_seen,
                step=record.step,
                lr=lr,
                loss=loss_sum / max(1, loss_n),
                exact_match=em,
                per_position=per_pos,
                wallclock_s=clock_base + time.monotonic() - t0,
                hinted_exact_match=hinted,
            )
            loss_sum, loss_n = 0.0, 0
            record.evals.append(point)
            if run_dir:
                with open(run_dir / "metrics.jsonl", "a") as f:
                    f.write(json.dumps(point.to_json()) + "\n")
            if on_eval:
                on_eval(record, point)
            consecutive = consecutive + 1 if em >= config.early_stop_threshold else 0
            if consecutive >= config.early_stop_patience:
                record.converged = True
                record.samples_to_convergence = record.evals[-config.early_stop_patience].examples_seen
                break
            save_state()

    save_state()
    if run_dir:
        _write_status(run_dir, "completed", record)
    model.eval()
    return record, model


def _write_status(run_dir: Path, state: str, record: RunRecord) -> None:
    status = {
        "state": state,
        "converged": record.converged,
        "examples_seen": record.examples_seen,
        "step": record.step,
        "samples_to_convergence": record.samples_to_convergence,
        "final_exact_match": record.evals[-1].exact_match if record.evals else None,
    }
    (run_dir / "status.json").write_text(json.dumps(status, indent=2) + "\n")
