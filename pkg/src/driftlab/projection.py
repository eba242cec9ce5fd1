"""2-D projection of pooled representations before/after continual training.

Principal components come from power iteration with deflation on the
covariance of the stacked point clouds, so the export is deterministic
and checkable against a dense eigendecomposition.
"""

import csv

import numpy as np

from .continual import TrainConfig, model_inputs, pooled_top
from .encoder import EncoderConfig, EncoderModel
from .errors import InputError
from .seeding import rng_stream


def top_components(X: np.ndarray, k: int, iters: int = 500, tol: float = 1e-12,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-k principal directions of centred rows X via power iteration.

    Returns (components (k, d), eigenvalues (k,)). Start vectors are
    drawn from a fixed stream; each found direction is deflated out of
    the covariance before the next iteration.
    """
    n, d = X.shape
    if n < k:
        raise InputError(f"need at least k={k} samples, got {n}")
    cov = (X.T @ X) / max(1, n - 1)
    rng = rng_stream(seed, "pca:start")
    components = np.empty((k, d))
    eigenvalues = np.empty(k)
    for i in range(k):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            if abs(norm - lam) <= tol * max(1.0, abs(lam)) and float(w @ v) > 0.999999:
                v = w
                lam = norm
                break
            v = w
            lam = norm
        components[i] = v
        eigenvalues[i] = lam
        cov -= lam * np.outer(v, v)
    return components, eigenvalues


def pooled_representations(state: dict, config: EncoderConfig, examples,
                           hyper: TrainConfig) -> np.ndarray:
    model = EncoderModel(config, seed=0)
    model.load_state(state)
    chunks = []
    for start in range(0, len(examples), hyper.eval_batch):
        chunk = examples[start:start + hyper.eval_batch]
        ids, lengths = model_inputs(chunk, hyper.max_len)
        chunks.append(pooled_top(model, ids, lengths).data)
    return np.concatenate(chunks, axis=0)


def export_projection(state_a: dict, state_b: dict, config: EncoderConfig,
                      examples, path, k: int = 2,
                      tags: tuple = ("before", "after"),
                      hyper: TrainConfig | None = None) -> dict:
    """Project both checkpoints' pooled representations of the same
    examples onto shared top-k principal components; write them as CSV
    rows of (checkpoint_tag, label, pc1..pck)."""
    hyper = hyper or TrainConfig()
    if len(examples) < k:
        raise InputError(f"need at least k={k} examples, got {len(examples)}")
    reps_a = pooled_representations(state_a, config, examples, hyper)
    reps_b = pooled_representations(state_b, config, examples, hyper)
    stacked = np.concatenate([reps_a, reps_b], axis=0)
    centred = stacked - stacked.mean(axis=0, keepdims=True)
    components, eigenvalues = top_components(centred, k)
    projected = centred @ components.T
    labels = [ex.label for ex in examples]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["checkpoint_tag", "label"] + [f"pc{i+1}" for i in range(k)])
        for row_idx in range(projected.shape[0]):
            tag = tags[0] if row_idx < len(examples) else tags[1]
            label = labels[row_idx % len(examples)]
            writer.writerow([tag, label] + [repr(float(v)) for v in projected[row_idx]])
    return {"eigenvalues": eigenvalues.tolist(),
            "projected_variance": projected.var(axis=0, ddof=1).tolist()}
