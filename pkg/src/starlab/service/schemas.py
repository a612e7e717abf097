"""Pydantic request/response models for the experiment service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field

from ..stargraph import StarSpec, TaskVariant
from ..training import TrainConfig


class SpecIn(BaseModel):
    d: int = Field(ge=2)
    l: int = Field(ge=2)
    pool_size: int = 100

    def to_spec(self) -> StarSpec:
        return StarSpec(d=self.d, l=self.l, pool_size=self.pool_size)


class TestsetRequest(BaseModel):
    spec: SpecIn
    size: int = 1000
    seed: int = 123
    variant: str = "original"
    edge_order: str = "shuffled"
    out: str | None = None


class TestsetResponse(BaseModel):
    path: str
    size: int
    seq_len: int
    variant: str


class TrainRequest(BaseModel):
    spec: SpecIn
    variant: str = "original"
    mode: Literal["ar", "nar"] = "nar"
    regime: Literal["conditional", "full_sequence"] = "conditional"
    d_model: int = 384
    n_blocks: int = 12
    n_heads: int = 6
    dropout: float = 0.1
    cond_dim: int = 4
    batch_size: int = 256
    max_examples: int = 2_000_000
    eval_every: int | None = None
    eval_size: int = 256
    eval_hinted_k: int | None = None
    early_stop_threshold: float = 0.95
    early_stop_patience: int = 10
    edge_order: str = "shuffled"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.03
    warmup_steps: int = 5000
    grad_clip: float = 1.0
    eta_min_ratio: float = 0.01
    mask_w: float = 1.0
    t_per_token: bool = False
    seed: int = 0
    name: str = ""
    # orchestration
    output_root: str | None = None
    experiment: str = "adhoc"
    testset_size: int = 1000
    testset_seed: int = 123

    def to_config(self) -> TrainConfig:
        fields = self.model_dump(exclude={"spec", "variant", "output_root", "experiment",
                                          "testset_size", "testset_seed"})
        return TrainConfig(spec=self.spec.to_spec(), variant=TaskVariant.parse(self.variant), **fields)


class JobOut(BaseModel):
    job_id: str
    kind: str
    state: Literal["pending", "running", "completed", "failed"]
    detail: dict = {}
    error: str | None = None


class RunStatusOut(BaseModel):
    run_dir: str
    state: str
    converged: bool | None = None
    examples_seen: int | None = None
    step: int | None = None
    samples_to_convergence: int | None = None
    final_exact_match: float | None = None


class EvalRequest(BaseModel):
    run_dir: str
    eval_size: int = 256
    hint_k: int = 0
    steps: int | None = None
    commit_per_step: int = 1
    policy: str = "confidence"


class EvalResponse(BaseModel):
    exact_match: float
    per_position: list[float]
    eval_size: int
    hint_k: int


class DynamicsRequest(BaseModel):
    run_dir: str
    decode_size: int = 500
    steps: int | None = None
    commit_per_step: int = 1
    policy: str = "confidence"
    out: str | None = None


class DynamicsResponse(BaseModel):
    csv_path: str
    spearman: float


class LatentRequest(BaseModel):
    run_dir: str
    instances: int = 200
    layers: list[int] | None = None
    pool: Literal["role", "vertex"] = "role"
    out: str | None = None


class LatentResponse(BaseModel):
    csv_path: str
    rows: int
    bins_per_layer: int


class SweepRequest(BaseModel):
    name: str
    output_root: str | None = None
    testset_size: int = 1000
    testset_seed: int = 123
    workers: int = 1
    defaults: dict = {}
    sweep: dict = {}
    runs: list[dict] = []


class ExportRequest(BaseModel):
    run_dirs: list[str]
    what: Literal["dynamics", "scaling", "latent", "curves"]
    out: str | None = None
    decode_size: int = 500
    instances: int = 200


class ExportResponse(BaseModel):
    files: list[str]
