"""Task-incremental training under FT / ER / LwF / DERPP strategies.

One trainer owns a model, a head per task, per-task-id RNG streams, and
(for rehearsal variants) a memory buffer. Strategy randomness lives on
its own streams so that a disabled strategy replays fine-tuning's
trajectory bit for bit. After each task the best-validation weights are
restored, the model state is snapshotted, and every earlier task is
re-evaluated with its own head to fill one row of the accuracy matrix.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import TaskSequence, TaskSpec, to_model_tokens
from .encoder import ClassifierHead, EncoderConfig, EncoderModel, all_parameters
from .errors import (
    ConfigurationError,
    InputError,
    ShapeError,
    TrainingDivergedError,
    TrainingError,
)
from .seeding import rng_stream

STRATEGY_VARIANTS = ("ft", "er", "lwf", "derpp")


@dataclass(frozen=True)
class StrategyConfig:
    variant: str = "ft"
    buffer_per_task: int = 50
    replay_batch: int = 8       # 0 disables replay entirely
    replay_every: int = 1
    lwf_lambda: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.variant not in STRATEGY_VARIANTS:
            raise ConfigurationError(
                f"unknown strategy {self.variant!r}; have {STRATEGY_VARIANTS}")
        if self.variant in ("er", "derpp"):
            if self.buffer_per_task < 1:
                raise ConfigurationError("buffer_per_task must be >= 1")
            if self.replay_every < 1:
                raise ConfigurationError("replay_every must be >= 1")
            if self.replay_batch < 0:
                raise ConfigurationError("replay_batch must be >= 0")
        if self.variant == "lwf" and self.lwf_lambda < 0:
            raise ConfigurationError("lwf_lambda must be >= 0")
        if self.variant == "derpp" and (self.alpha < 0 or self.beta < 0):
            raise ConfigurationError("alpha and beta must be >= 0")

    @property
    def uses_buffer(self) -> bool:
        return self.variant in ("er", "derpp")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 3e-4
    patience: int = 3
    scheduler: str = "linear"   # "linear" | "constant"
    eval_batch: int = 128
    max_len: int = 64

    def __post_init__(self):
        if self.scheduler not in ("linear", "constant"):
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigurationError("bad training hyperparameters")


class MemoryBuffer:
    """Stored examples grouped by source task; DERPP slots also keep the
    logits the model produced when the example was stored."""

    def __init__(self):
        self.slots: dict[str, dict] = {}

    def store(self, task: TaskSpec, examples, logits: np.ndarray | None) -> None:
        if task.task_id in self.slots:
            raise TrainingError(f"buffer already holds task {task.task_id!r}")
        self.slots[task.task_id] = {
            "examples": list(examples),
            "labels": np.asarray([ex.label for ex in examples], dtype=np.int64),
            "logits": None if logits is None else np.array(logits, dtype=np.float64),
        }

    def __len__(self):
        return sum(len(s["examples"]) for s in self.slots.values())

    def count(self, task_id: str) -> int:
        return len(self.slots[task_id]["examples"]) if task_id in self.slots else 0

    def sample(self, n: int, rng: np.random.Generator):
        """Uniform over all stored entries; yields (task_id, index) pairs."""
        flat = [(task_id, i) for task_id, slot in self.slots.items()
                for i in range(len(slot["examples"]))]
        picks = rng.integers(0, len(flat), size=n)
        return [flat[p] for p in picks]

    def manifest(self) -> dict:
        return {task_id: {"count": len(slot["examples"]),
                          "has_logits": slot["logits"] is not None}
                for task_id, slot in self.slots.items()}


@dataclass
class AccuracyMatrix:
    """Lower-triangular R[m, j]: test accuracy (percent) on task j after
    finishing training task m."""

    task_ids: list
    values: np.ndarray  # N x N, NaN above the diagonal

    @classmethod
    def empty(cls, task_ids) -> "AccuracyMatrix":
        n = len(task_ids)
        return cls(task_ids=list(task_ids), values=np.full((n, n), np.nan))

    def set(self, m: int, j: int, accuracy: float) -> None:
        if j > m:
            raise InputError("accuracy matrix is defined for j <= m only")
        self.values[m, j] = accuracy

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.values).copy()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["after_task"] + self.task_ids)
            for m, task_id in enumerate(self.task_ids):
                row = [task_id]
                for j in range(len(self.task_ids)):
                    v = self.values[m, j]
                    row.append("" if np.isnan(v) else repr(float(v)))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "AccuracyMatrix":
        with open(path, "r", newline="") as f:
            rows = list(csv.reader(f))
        task_ids = rows[0][1:]
        values = np.full((len(task_ids), len(task_ids)), np.nan)
        for m, row in enumerate(rows[1:]):
            for j, cell in enumerate(row[1:]):
                if cell:
                    values[m, j] = float(cell)
        return cls(task_ids=task_ids, values=values)


@dataclass
class TrainResult:
    task_ids: list
    matrix: AccuracyMatrix
    checkpoint_states: list      # per task: {"params": {...}, "heads": {...meta}}
    buffer: MemoryBuffer
    batch_losses: list           # per task: list of float total losses
    heads: dict


def pad_batch(token_lists):
    """Stack ragged token lists into (ids, lengths) padded with PAD."""
    from .corpus import PAD_ID

    lengths = np.asarray([len(t) for t in token_lists], dtype=np.int64)
    width = int(lengths.max())
    ids = np.full((len(token_lists), width), PAD_ID, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
    return ids, lengths


def model_inputs(examples, max_len: int):
    return pad_batch([to_model_tokens(ex, max_len) for ex in examples])


def pooled_top(model: EncoderModel, ids, lengths, train=False, drop_rng=None) -> nm.Tensor:
    states = model.forward_hidden(ids, lengths, train=train, drop_rng=drop_rng)
    return nm.take_position(states[-1], 0)


def evaluate_accuracy(model: EncoderModel, head: ClassifierHead, examples,
                      hyper: TrainConfig) -> float:
    """Percent accuracy of `head` over `examples`, eval mode."""
    if not examples:
        raise TrainingError("cannot evaluate on an empty split")
    correct = 0
    for start in range(0, len(examples), hyper.eval_batch):
        chunk = examples[start:start + hyper.eval_batch]
        ids, lengths = model_inputs(chunk, hyper.max_len)
        logits = head.logits(pooled_top(model, ids, lengths)).data
        pred = logits.argmax(axis=1) + head.label_base
        correct += int(sum(int(p == ex.label) for p, ex in zip(pred, chunk)))
    return 100.0 * correct / len(examples)


def lwf_regularizer(z_current: nm.Tensor, z_previous: nm.Tensor) -> nm.Tensor:
    """Frobenius norm of the representation drift on the current batch."""
    if z_current.data.shape != z_previous.data.shape:
        raise ShapeError(
            f"representation shapes differ: {z_current.data.shape} vs "
            f"{z_previous.data.shape}")
    return nm.frobenius_norm(nm.sub(z_current, z_previous))


def derpp_regularizer(current_logits: nm.Tensor, stored_logits: np.ndarray,
                      stored_labels, label_base: int, alpha: float,
                      beta: float) -> nm.Tensor:
    """alpha * mean squared logit drift + beta * replay cross-entropy.

    The squared term follows the MSE convention: mean over every logit
    entry of the squared difference against the stored copy.
    """
    stored = np.asarray(stored_logits, dtype=np.float64)
    if current_logits.data.shape != stored.shape:
        raise ShapeError(
            f"logit widths differ: {current_logits.data.shape} vs {stored.shape}")
    diff = nm.sub(current_logits, nm.constant(stored))
    term = nm.scale(nm.mean_all(nm.mul(diff, diff)), alpha)
    if beta != 0.0:
        local = [int(lab) - label_base for lab in stored_labels]
        term = nm.add(term, nm.scale(nm.cross_entropy(current_logits, local), beta))
    return term


def store_to_buffer(buffer: MemoryBuffer, task: TaskSpec, model: EncoderModel,
                    k: int, rng: np.random.Generator, hyper: TrainConfig,
                    head: ClassifierHead | None = None) -> None:
    """Sample min(k, |train|) examples once, right after finishing a task.

    With a `head`, the model's eval-mode logits are frozen alongside the
    examples (the DERPP convention); they never move again, however much
    later training drifts the encoder.
    """
    n = len(task.train)
    take = min(k, n)
    order = rng.permutation(n)[:take]
    examples = [task.train[i] for i in sorted(order.tolist())]
    logits = None
    if head is not None:
        chunks = []
        for start in range(0, len(examples), hyper.eval_batch):
            chunk = examples[start:start + hyper.eval_batch]
            ids, lengths = model_inputs(chunk, hyper.max_len)
            chunks.append(head.logits(pooled_top(model, ids, lengths)).data)
        logits = np.concatenate(chunks, axis=0)
    buffer.store(task, examples, logits)


def er_step(model: EncoderModel, heads, buffer: MemoryBuffer,
            strategy: StrategyConfig, hyper: TrainConfig,
            drop_rng=None, replay_rng=None) -> nm.Tensor | None:
    """One replay term over a uniformly sampled buffer batch.

    ER contributes replay cross-entropy through each entry's source-task
    head; DERPP contributes its alpha/beta regularizer instead. An empty
    buffer (task 1) is a silent no-op returning None.
    """
    if len(buffer) == 0 or strategy.replay_batch == 0:
        return None
    picks = buffer.sample(strategy.replay_batch, replay_rng)
    by_task: dict[str, list] = {}
    for task_id, idx in picks:
        by_task.setdefault(task_id, []).append(idx)
    n_total = len(picks)
    total = None
    for task_id in sorted(by_task):
        idxs = by_task[task_id]
        slot = buffer.slots[task_id]
        examples = [slot["examples"][i] for i in idxs]
        head = heads[task_id]
        ids, lengths = model_inputs(examples, hyper.max_len)
        train_mode = drop_rng is not None
        pooled = pooled_top(model, ids, lengths, train=train_mode, drop_rng=drop_rng)
        logits = head.logits(pooled)
        weight = len(idxs) / n_total
        if strategy.variant == "derpp":
            term = nm.scale(
                derpp_regularizer(logits, slot["logits"][idxs], slot["labels"][idxs],
                                  head.label_base, strategy.alpha, strategy.beta),
                weight)
        else:
            local = [ex.label - head.label_base for ex in examples]
            term = nm.scale(nm.cross_entropy(logits, local), weight)
        total = term if total is None else nm.add(total, term)
    return total


class SequenceTrainer:
    """Runs one strategy over one task sequence, deterministically."""

    def __init__(self, model: EncoderModel, seq: TaskSequence,
                 strategy: StrategyConfig, hyper: TrainConfig, seed: int):
        self.model = model
        self.seq = seq
        self.strategy = strategy
        self.hyper = hyper
        self.seed = seed
        self.heads = {
            t.task_id: ClassifierHead(t.task_id, model.config.d_model,
                                      t.n_classes, t.label_base, seed=seed)
            for t in seq.tasks
        }
        self.buffer = MemoryBuffer()

    # -- loss assembly -------------------------------------------------------

    def _batch_loss(self, task, head, examples, frozen_prev, drop_rng,
                    replay_rng, step: int) -> nm.Tensor:
        st = self.strategy
        ids, lengths = model_inputs(examples, self.hyper.max_len)
        pooled = pooled_top(self.model, ids, lengths, train=True, drop_rng=drop_rng)
        local = [ex.label - head.label_base for ex in examples]
        loss = nm.cross_entropy(head.logits(pooled), local)
        if st.variant == "lwf" and frozen_prev is not None and st.lwf_lambda > 0.0:
            prev_ids, prev_lengths = ids, lengths
            z_prev = pooled_top(frozen_prev, prev_ids, prev_lengths)  # eval mode
            loss = nm.add(loss, nm.scale(
                lwf_regularizer(pooled, nm.constant(z_prev.data)), st.lwf_lambda))
        if (st.uses_buffer and st.replay_batch > 0 and len(self.buffer) > 0
                and step % st.replay_every == 0):
            replay = er_step(self.model, self.heads, self.buffer, st, self.hyper,
                             drop_rng=drop_rng, replay_rng=replay_rng)
            if replay is not None:
                loss = nm.add(loss, replay)
        return loss

    # -- snapshots -----------------------------------------------------------

    def _snapshot(self) -> dict:
        state = {"params": self.model.state_dict(), "heads": {}}
        for task_id, head in self.heads.items():
            state["heads"][task_id] = {
                "w": head.w.data.copy(), "b": head.b.data.copy(),
                "n_classes": head.n_classes, "label_base": head.label_base,
            }
        return state

    def _restore(self, state: dict) -> None:
        self.model.load_state(state["params"])
        for task_id, hs in state["heads"].items():
            np.copyto(self.heads[task_id].w.data, hs["w"])
            np.copyto(self.heads[task_id].b.data, hs["b"])

    def _store_task(self, task: TaskSpec) -> None:
        st = self.strategy
        rng = rng_stream(self.seed, f"strategy:store:{task.task_id}")
        head = self.heads[task.task_id] if st.variant == "derpp" else None
        store_to_buffer(self.buffer, task, self.model, st.buffer_per_task,
                        rng, self.hyper, head=head)

    # -- the training loop ---------------------------------------------------

    def run(self) -> TrainResult:
        hyper = self.hyper
        matrix = AccuracyMatrix.empty(self.seq.task_ids)
        checkpoints = []
        all_losses = []
        params = all_parameters(self.model, self.heads)
        frozen_prev = None
        for m, task in enumerate(self.seq.tasks):
            if not task.train or not task.validation or not task.test:
                raise TrainingError(f"task {task.task_id!r} has an empty split")
            head = self.heads[task.task_id]
            order_rng = rng_stream(self.seed, f"order:{task.task_id}")
            drop_rng = rng_stream(self.seed, f"dropout:{task.task_id}")
            replay_rng = rng_stream(self.seed, f"strategy:replay:{task.task_id}")
            adam = nm.AdamState(lr=hyper.lr)
            n_train = len(task.train)
            steps_per_epoch = (n_train + hyper.batch_size - 1) // hyper.batch_size
            total_steps = max(1, hyper.epochs * steps_per_epoch)
            losses = []
            best_val = -1.0
            best_state = self._snapshot()
            patience_left = hyper.patience
            step = 0
            for epoch in range(hyper.epochs):
                perm = order_rng.permutation(n_train)
                for start in range(0, n_train, hyper.batch_size):
                    batch = [task.train[i] for i in perm[start:start + hyper.batch_size]]
                    if hyper.scheduler == "linear":
                        lr_t = hyper.lr * max(0.0, 1.0 - step / total_steps)
                    else:
                        lr_t = hyper.lr
                    for p in params:
                        p.zero_grad()
                    with nm.GradTape() as tape:
                        loss = self._batch_loss(task, head, batch, frozen_prev,
                                                drop_rng, replay_rng, step)
                        tape.backward(loss)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingDivergedError(
                            f"non-finite loss at task {task.task_id!r} step {step}")
                    losses.append(value)
                    nm.adam_step(params, adam, lr=lr_t)
                    step += 1
                val_acc = evaluate_accuracy(self.model, head, task.validation, hyper)
                if val_acc > best_val:
                    best_val = val_acc
                    best_state = self._snapshot()
                    patience_left = hyper.patience
                else:
                    patience_left -= 1
                    if patience_left == 0:
                        break
            self._restore(best_state)
            all_losses.append(losses)
            if self.strategy.uses_buffer:
                self._store_task(task)
            if self.strategy.variant == "lwf":
                frozen_prev = EncoderModel(self.model.config, seed=self.seed)
                frozen_prev.load_state(self.model.state_dict())
            checkpoints.append(self._snapshot())
            for j in range(m + 1):
                prev = self.seq.tasks[j]
                acc = evaluate_accuracy(self.model, self.heads[prev.task_id],
                                        prev.test, hyper)
                matrix.set(m, j, acc)
        return TrainResult(task_ids=self.seq.task_ids, matrix=matrix,
                           checkpoint_states=checkpoints, buffer=self.buffer,
                           batch_losses=all_losses, heads=self.heads)


def train_sequence(model: EncoderModel, seq: TaskSequence, strategy: StrategyConfig,
                   hyper: TrainConfig, seed: int) -> TrainResult:
    return SequenceTrainer(model, seq, strategy, hyper, seed).run()


def train_single(config: EncoderConfig, task: TaskSpec, hyper: TrainConfig,
                 seed: int) -> float:
    """Accuracy of a fresh model trained on one task alone.

    Head initialisation draws from a per-task-id stream, so this matches
    the head the same task gets inside any continual sequence.
    """
    model = EncoderModel(config, seed=seed)
    result = train_sequence(model, TaskSequence(tasks=[task]),
                            StrategyConfig(variant="ft"), hyper, seed)
    return float(result.matrix.values[0, 0])


def representation_drift(config: EncoderConfig, state_a: dict, state_b: dict,
                         examples, hyper: TrainConfig) -> float:
    """Mean distance between the two states' pooled top-layer representations
    of held-out examples."""
    model_a = EncoderModel(config, seed=0)
    model_a.load_state(state_a["params"] if "params" in state_a else state_a)
    model_b = EncoderModel(config, seed=0)
    model_b.load_state(state_b["params"] if "params" in state_b else state_b)
    dists = []
    for start in range(0, len(examples), hyper.eval_batch):
        chunk = examples[start:start + hyper.eval_batch]
        ids, lengths = model_inputs(chunk, hyper.max_len)
        za = pooled_top(model_a, ids, lengths).data
        zb = pooled_top(model_b, ids, lengths).data
        dists.append(np.linalg.norm(za - zb, axis=1))
    return float(np.concatenate(dists).mean())


def write_buffer_manifest(buffer: MemoryBuffer, path) -> None:
    with open(path, "w") as f:
        json.dump(buffer.manifest(), f, indent=2, sort_keys=True)
