"""Layer-wise probing of a frozen encoder.

For each (checkpoint, probing task, layer) triple a small MLP is trained
on the pooled representation at that layer; its best-validation weights
are scored on the task's test split. Encoder parameters are never
touched: features are extracted once per (checkpoint, task) in eval
mode, cached to one file per triple, and classifiers only ever see the
cached arrays.
"""

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import TaskSpec, to_model_tokens
from .encoder import EncoderConfig, EncoderModel
from .errors import CompatibilityError, ConfigurationError, InputError
from .seeding import rng_stream

BASELINE_ID = "*"


@dataclass(frozen=True)
class ProbeConfig:
    hidden_width: int = 64
    hidden_layers: int = 1
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    layers: tuple | None = None      # None probes all L+1; -1 means topmost
    samples_per_class: int = 300
    eval_batch: int = 256
    max_len: int = 64

    def resolve_layers(self, n_layers: int) -> list:
        raw = self.layers if self.layers is not None else tuple(range(n_layers + 1))
        out = []
        for l in raw:
            idx = n_layers if l == -1 else l
            if not (0 <= idx <= n_layers):
                raise ConfigurationError(
                    f"probe layer {l} outside [0, {n_layers}] (use -1 for topmost)")
            out.append(idx)
        return out


@dataclass
class ProbeGrid:
    """Accuracies S[checkpoint, task, layer] in percent, plus task metadata."""

    n_layers: int
    values: dict = field(default_factory=dict)        # (ckpt, task, layer) -> float
    categories: dict = field(default_factory=dict)    # task -> category

    def set(self, ckpt_id: str, task_id: str, layer: int, accuracy: float,
            category: str) -> None:
        self.values[(ckpt_id, task_id, layer)] = float(accuracy)
        self.categories[task_id] = category

    def get(self, ckpt_id: str, task_id: str, layer: int) -> float:
        layer = self.n_layers if layer == -1 else layer
        key = (ckpt_id, task_id, layer)
        if key not in self.values:
            raise InputError(f"probe grid has no cell {key}")
        return self.values[key]

    def checkpoints(self) -> list:
        ids = {k[0] for k in self.values}
        numbered = sorted((i for i in ids if i != BASELINE_ID), key=int)
        return ([BASELINE_ID] if BASELINE_ID in ids else []) + numbered

    def tasks(self) -> list:
        return sorted({k[1] for k in self.values})

    def layers(self) -> list:
        return sorted({k[2] for k in self.values})

    def to_csv(self, path, seed: int) -> None:
        import csv

        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["checkpoint_id", "task_id", "category", "layer",
                             "accuracy", "seed"])
            for (ckpt, task, layer) in sorted(self.values):
                writer.writerow([ckpt, task, self.categories[task], layer,
                                 repr(self.values[(ckpt, task, layer)]), seed])

    @classmethod
    def from_csv(cls, path) -> tuple["ProbeGrid", list]:
        """Read a probes table; returns (grid of seed-mean values, seeds)."""
        import csv

        with open(path, "r", newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise InputError(f"empty probes file {path!r}")
        cells: dict = {}
        categories = {}
        seeds = sorted({int(r["seed"]) for r in rows})
        for r in rows:
            key = (r["checkpoint_id"], r["task_id"], int(r["layer"]))
            cells.setdefault(key, []).append(float(r["accuracy"]))
            categories[r["task_id"]] = r["category"]
        n_layers = max(k[2] for k in cells)
        grid = cls(n_layers=n_layers)
        grid.categories.update(categories)
        for key, vals in cells.items():
            grid.values[key] = float(np.mean(vals))
        return grid, seeds


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


def state_fingerprint(state: dict) -> str:
    digest = hashlib.sha256()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state[name]).tobytes())
    return digest.hexdigest()[:16]


def extract_features(model: EncoderModel, task: TaskSpec, cfg: ProbeConfig,
                     layers: list, cache_dir=None) -> dict:
    """Pooled features at each requested layer for every split.

    Returns {layer: {split: (X, y)}}. One forward pass per example batch
    yields all layers at once; per-triple cache files keep re-probing
    cheap and writers contention-free.
    """
    fingerprint = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        fingerprint = state_fingerprint(model.state_dict())

    def cache_path(layer):
        return os.path.join(cache_dir,
                            f"feat_{fingerprint}_{task.task_id}_L{layer}.npz")

    out = {l: {} for l in layers}
    missing = layers
    if cache_dir is not None:
        missing = []
        for l in layers:
            path = cache_path(l)
            if os.path.exists(path):
                data = np.load(path)
                for split in ("train", "validation", "test"):
                    out[l][split] = (data[f"X_{split}"], data[f"y_{split}"])
            else:
                missing.append(l)
    if missing:
        computed = {l: {} for l in missing}
        for split in ("train", "validation", "test"):
            examples = task.split(split)
            feats = {l: [] for l in missing}
            for start in range(0, len(examples), cfg.eval_batch):
                chunk = examples[start:start + cfg.eval_batch]
                from .continual import pad_batch

                ids, lengths = pad_batch(
                    [to_model_tokens(ex, cfg.max_len) for ex in chunk])
                states = model.forward_hidden(ids, lengths)
                for l in missing:
                    feats[l].append(states[l].data[:, 0].copy())
            y = np.asarray([ex.label - task.label_base for ex in examples],
                           dtype=np.int64)
            for l in missing:
                computed[l][split] = (np.concatenate(feats[l], axis=0), y)
        for l in missing:
            out[l] = computed[l]
            if cache_dir is not None:
                arrays = {}
                for split in ("train", "validation", "test"):
                    X, y = computed[l][split]
                    arrays[f"X_{split}"] = X
                    arrays[f"y_{split}"] = y
                np.savez(cache_path(l), **arrays)
    return out


def _subsample_balanced(X: np.ndarray, y: np.ndarray, per_class: int,
                        rng: np.random.Generator):
    """At most `per_class` rows per class, balanced within one example."""
    keep = []
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) > per_class:
            idx = rng.permutation(idx)[:per_class]
        keep.append(np.sort(idx))
    keep = np.concatenate(keep)
    keep.sort()
    return X[keep], y[keep]


# ---------------------------------------------------------------------------
# the probing classifier
# ---------------------------------------------------------------------------


class _ProbeClassifier:
    """MLP with `hidden_layers` tanh layers, trained with Adam."""

    def __init__(self, d_in: int, n_classes: int, cfg: ProbeConfig,
                 rng: np.random.Generator):
        self.params = []
        widths = [d_in] + [cfg.hidden_width] * cfg.hidden_layers + [n_classes]
        self.weights = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(a)
            w = nm.Parameter(f"probe.w{i}", rng.uniform(-bound, bound, size=(a, b)))
            bias = nm.Parameter(f"probe.b{i}", np.zeros(b))
            self.weights.append((w, bias))
            self.params.extend((w, bias))

    def logits(self, x: nm.Tensor) -> nm.Tensor:
        h = x
        for i, (w, b) in enumerate(self.weights):
            h = nm.linear(h, w, b)
            if i < len(self.weights) - 1:
                h = nm.tanh(h)
        return h

    def accuracy(self, X: np.ndarray, y: np.ndarray) -> float:
        pred = self.logits(nm.constant(X)).data.argmax(axis=1)
        return 100.0 * float((pred == y).mean())

    def snapshot(self):
        return [p.data.copy() for p in self.params]

    def restore(self, snap):
        for p, arr in zip(self.params, snap):
            np.copyto(p.data, arr)


def _train_probe(features: dict, n_classes: int, cfg: ProbeConfig,
                 seed: int) -> float:
    rng = rng_stream(seed, "probe:init")
    order_rng = rng_stream(seed, "probe:order")
    X_train, y_train = features["train"]
    X_train, y_train = _subsample_balanced(
        X_train, y_train, cfg.samples_per_class, rng_stream(seed, "probe:subsample"))
    X_val, y_val = features["validation"]
    X_test, y_test = features["test"]
    clf = _ProbeClassifier(X_train.shape[1], n_classes, cfg, rng)
    adam = nm.AdamState(lr=cfg.lr)
    best_val = -1.0
    best = clf.snapshot()
    n = len(X_train)
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            take = perm[start:start + cfg.batch_size]
            for p in clf.params:
                p.zero_grad()
            with nm.GradTape() as tape:
                loss = nm.cross_entropy(clf.logits(nm.constant(X_train[take])),
                                        y_train[take])
                tape.backward(loss)
            nm.adam_step(clf.params, adam)
        val = clf.accuracy(X_val, y_val)
        if val > best_val:
            best_val = val
            best = clf.snapshot()
    clf.restore(best)
    return clf.accuracy(X_test, y_test)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def probe_layer(model: EncoderModel, task: TaskSpec, layer: int,
                cfg: ProbeConfig, seed: int, cache_dir=None,
                ckpt_id: str = "") -> float:
    """Probing accuracy of one frozen checkpoint at one layer, percent."""
    layer = model.config.n_layers if layer == -1 else layer
    if not (0 <= layer <= model.config.n_layers):
        raise ConfigurationError(
            f"layer {layer} outside [0, {model.config.n_layers}]")
    features = extract_features(model, task, cfg, [layer], cache_dir=cache_dir)
    probe_seed = _triple_seed(seed, ckpt_id or "adhoc", task.task_id, layer)
    return _train_probe(features[layer], task.n_classes, cfg, probe_seed)


def _triple_seed(seed: int, ckpt_id: str, task_id: str, layer: int) -> int:
    from .seeding import derive_seed

    return derive_seed(seed, f"probe:{ckpt_id}:{task_id}:{layer}")


def probe_all(checkpoint_states: dict, config: EncoderConfig, tasks,
              cfg: ProbeConfig, seed: int, cache_dir=None) -> ProbeGrid:
    """Probe every checkpoint (id -> encoder state dict) over every task
    and layer. Include the untrained model under the id "*"."""
    grid = ProbeGrid(n_layers=config.n_layers)
    layers = cfg.resolve_layers(config.n_layers)
    model = EncoderModel(config, seed=0)
    for ckpt_id, state in checkpoint_states.items():
        if set(state) != set(model.params):
            raise CompatibilityError(
                f"checkpoint {ckpt_id!r} does not match the encoder config")
        for name, arr in state.items():
            if model.params[name].data.shape != arr.shape:
                raise CompatibilityError(
                    f"checkpoint {ckpt_id!r} parameter {name!r} has shape "
                    f"{arr.shape}, expected {model.params[name].data.shape}")
        model.load_state(state)
        for task in tasks:
            features = extract_features(model, task, cfg, layers,
                                        cache_dir=cache_dir)
            for layer in layers:
                acc = _train_probe(features[layer], task.n_classes, cfg,
                                   _triple_seed(seed, ckpt_id, task.task_id, layer))
                grid.set(ckpt_id, task.task_id, layer, acc, task.category)
    return grid
