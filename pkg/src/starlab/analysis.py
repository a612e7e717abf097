"""Measured quantities: per-position dynamics, convergence scaling, latent probes.

Everything here is pure post-processing over decode outputs, training records
and captured hidden states; nothing feeds back into training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone
from .errors import ConfigError
from .stargraph import Instance, StarSpec
from .training import RunRecord

DEFAULT_CONNECTION_METRIC = "directed_edges"


def per_position_accuracy(preds: np.ndarray, golds: np.ndarray) -> np.ndarray:
    """Elementwise mean of position matches over a prediction set."""
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {golds.shape}")
    return (preds == golds).mean(axis=0)


def assoc_connections(spec: StarSpec, metric: str = DEFAULT_CONNECTION_METRIC) -> int:
    """Graph-complexity proxy used as the scaling-plot x axis.

    The default counts directed edges per instance, d * (l - 1). The metric
    name travels with every ScalingPoint so plots are self-describing.
    """
    if metric == DEFAULT_CONNECTION_METRIC:
        return spec.d * (spec.l - 1)
    if metric == "undirected_edges_both_ways":
        return 2 * spec.d * (spec.l - 1)
    raise ConfigError(f"unknown connection metric {metric!r}")


@dataclass(frozen=True)
class ScalingPoint:
    spec: StarSpec
    mode: str
    assoc_connections: int
    samples: int
    censored: bool
    metric: str = DEFAULT_CONNECTION_METRIC


def samples_to_convergence(record: RunRecord, budget: int) -> tuple[int, bool]:
    """(samples, censored): first examples_seen of the early-stop window, or the
    budget with the censored flag set when the run never converged."""
    if record.converged and record.samples_to_convergence is not None:
        return record.samples_to_convergence, False
    return budget, True


def scaling_point(spec: StarSpec, mode: str, record: RunRecord, budget: int,
                  metric: str = DEFAULT_CONNECTION_METRIC) -> ScalingPoint:
    samples, censored = samples_to_convergence(record, budget)
    return ScalingPoint(spec, mode, assoc_connections(spec, metric), samples, censored, metric)


def write_scaling_csv(points: list[ScalingPoint], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["d", "l", "N", "mode", "assoc_connections", "samples", "censored"])
        for p in points:
            writer.writerow([p.spec.d, p.spec.l, p.spec.pool_size, p.mode,
                             p.assoc_connections, p.samples, str(p.censored).lower()])
    return path


# --- latent probes ----------------------------------------------------------

def _role_label(slot: int, depth: int) -> str:
    return "center" if depth == 0 else f"arm{slot}_d{depth}"


def latent_aggregate(
    model: Backbone,
    instances: list[Instance],
    layers: list[int] | None = None,
    pool: str = "role",
    batch_size: int = 64,
) -> dict[int, list[tuple[str, int, np.ndarray]]]:
    """Mean hidden vectors of vertex tokens, per layer.

    Each instance is run with capture on its full serialized sequence and the
    hidden states of *prefix* occurrences are grouped by vertex and averaged
    within the instance. pool="role" then averages across instances by
    structural role (target arm is slot 0, depth = hops from center), giving
    1 + d*(l-1) bins; pool="vertex" keeps one labelled point per (instance,
    vertex), for identity-clustering views.

    Returns {layer: [(label, depth, vector), ...]}.
    """
    if pool not in ("role", "vertex"):
        raise ConfigError(f"unknown pooling {pool!r}")
    if not instances:
        raise ValueError("no instances to probe")
    n_layers = model.config.n_blocks + 1
    wanted = list(range(n_layers)) if layers is None else list(layers)
    if any(not 0 <= k < n_layers for k in wanted):
        raise ConfigError(f"layer index out of range; model has layers 0..{n_layers - 1}")

    sums: dict[int, dict[str, np.ndarray]] = {k: {} for k in wanted}
    counts: dict[int, dict[str, int]] = {k: {} for k in wanted}
    points: dict[int, list[tuple[str, int, np.ndarray]]] = {k: [] for k in wanted}

    for start in range(0, len(instances), batch_size):
        chunk = instances[start : start + batch_size]
        tokens = torch.from_numpy(np.stack([inst.tokens for inst in chunk])).long()
        with torch.no_grad():
            _, trace = model(tokens, t=0.0, capture=True)
        for i, inst in enumerate(chunk):
            graph = inst.graph
            prefix_len = len(inst.prefix)
            slots = [graph.target_arm] + [a for a in range(graph.d) if a != graph.target_arm]
            vertex_info = {graph.center: ("center", 0)}
            for slot, arm_idx in enumerate(slots):
                for j, v in enumerate(graph.arms[arm_idx]):
                    vertex_info[v] = (_role_label(slot, j + 1), j + 1)
            prefix = inst.prefix
            positions_by_vertex: dict[int, list[int]] = {}
            for pos in range(prefix_len):
                positions_by_vertex.setdefault(int(prefix[pos]), []).append(pos)
            for k in wanted:
                h = trace[k][i].numpy()
                for vertex, positions in positions_by_vertex.items():
                    label, depth = vertex_info[vertex]
                    vec = h[positions].mean(axis=0)
                    if pool == "vertex":
                        points[k].append((f"v{vertex}", depth, vec))
                    else:
                        if label in sums[k]:
                            sums[k][label] += vec
                            counts[k][label] += 1
                        else:
                            sums[k][label] = vec.copy()
                            counts[k][label] = 1

    if pool == "vertex":
        return points
    out: dict[int, list[tuple[str, int, np.ndarray]]] = {}
    for k in wanted:
        rows = []
        for label, total in sums[k].items():
            depth = 0 if label == "center" else int(label.rsplit("_d", 1)[1])
            rows.append((label, depth, total / counts[k][label]))
        rows.sort(key=lambda r: (r[1], r[0]))
        out[k] = rows
    return out


def pca2d(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered projection onto the top-2 principal axes.

    Returns (coords (n, 2), explained_variance (2,)) with eigenvalues of the
    sample covariance in descending order. Axis orientation is pinned by
    forcing the first nonzero loading of each axis positive. Rank-deficient
    inputs get a degenerate second axis with variance exactly 0.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ValueError(f"need at least 3 vectors of dimension >= 2, got {X.shape}")
    n = X.shape[0]
    Xc = X - X.mean(axis=0, keepdims=True)
    cov = Xc.T @ Xc / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    eigvals = np.clip(eigvals, 0.0, None)
    tol = max(1e-12, 1e-9 * (eigvals[0] if eigvals[0] > 0 else 1.0))
    if eigvals[1] < tol:
        eigvals[1] = 0.0
    for j in range(2):
        nonzero = np.nonzero(np.abs(eigvecs[:, j]) > 1e-12)[0]
        if len(nonzero) and eigvecs[nonzero[0], j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    coords = Xc @ eigvecs
    return coords, eigvals


def latent_table(
    model: Backbone,
    instances: list[Instance],
    layers: list[int] | None = None,
    pool: str = "role",
) -> list[dict]:
    """Per-layer 2D projections of the aggregated vertex embeddings.

    PCA axes are fit per layer independently. Rows carry the layer's
    explained variances so panels can be compared.
    """
    aggregated = latent_aggregate(model, instances, layers=layers, pool=pool)
    rows = []
    for layer in sorted(aggregated):
        entries = aggregated[layer]
        vectors = np.stack([vec for _, _, vec in entries])
        coords, var = pca2d(vectors)
        for (label, depth, _), (x, y) in zip(entries, coords):
            rows.append({
                "layer": layer, "vertex_role": label, "depth": depth,
                "pc1": float(x), "pc2": float(y),
                "var1": float(var[0]), "var2": float(var[1]),
            })
    return rows


def write_latent_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["layer", "vertex_role", "depth", "pc1", "pc2", "var1", "var2"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path
