"""A small multi-head self-attention encoder with per-layer hidden states.

The model exposes every layer's output (embedding output counts as layer
0) and pools a sentence into the hidden state at position 0, where a
reserved start-of-sentence token sits. Classification heads are one
linear layer per task. Checkpoints are a flat binary format: magic,
version, a JSON config block, then raw float64 parameter records.
"""

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .errors import (
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    ShapeError,
    VocabularyError,
)
from .seeding import rng_stream

CHECKPOINT_MAGIC = b"DRFT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    dropout: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, field) <= 0:
                raise ConfigurationError(f"{field} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.max_len < 4:
            raise ConfigurationError("max_len must be at least 4")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError("dropout must lie in [0, 1)")


@dataclass
class LayerStates:
    """All L+1 hidden states for one sequence, plus their pooled rows."""

    hidden: list  # L+1 arrays of shape (seq_len, d_model)
    pooled: list  # L+1 arrays of shape (d_model,), each == hidden[l][0]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EncoderModel:
    """Token + position embeddings followed by `n_layers` post-norm blocks."""

    def __init__(self, config: EncoderConfig, seed: int):
        self.config = config
        self.seed = seed
        self.params: dict[str, nm.Parameter] = {}
        rng = rng_stream(seed, "init:encoder")
        d, dff = config.d_model, config.d_ff
        self._add("emb.tok", _uniform(rng, (config.vocab_size, d), d))
        self._add("emb.pos", _uniform(rng, (config.max_len, d), d))
        for i in range(config.n_layers):
            p = f"block{i}."
            for w in ("wq", "wk", "wv", "wo"):
                self._add(p + "attn." + w, _uniform(rng, (d, d), d))
            # no key bias: softmax cancels any constant shared by all keys
            for b in ("bq", "bv", "bo"):
                self._add(p + "attn." + b, np.zeros(d))
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            self._add(p + "ff.w1", _uniform(rng, (d, dff), d))
            self._add(p + "ff.b1", np.zeros(dff))
            self._add(p + "ff.w2", _uniform(rng, (dff, d), dff))
            self._add(p + "ff.b2", np.zeros(d))
            self._add(p + "ln2.g", np.ones(d))
            self._add(p + "ln2.b", np.zeros(d))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = nm.Parameter(name, value)

    def parameters(self) -> list:
        return list(self.params.values())

    def forward_hidden(self, ids: np.ndarray, lengths: np.ndarray,
                       train: bool = False,
                       drop_rng: np.random.Generator | None = None) -> list:
        """Run a padded batch; return L+1 hidden tensors of shape (B, T, d).

        `ids` is (B, T) int, padded past each row's length; padded key
        positions are masked out of attention so they never influence
        real positions.
        """
        cfg = self.config
        B, T = ids.shape
        if T > cfg.max_len:
            raise ShapeError(f"sequence length {T} exceeds max_len {cfg.max_len}")
        if ids.max(initial=0) >= cfg.vocab_size or ids.min(initial=0) < 0:
            raise VocabularyError(
                f"token id {int(ids.max())} outside vocabulary of size {cfg.vocab_size}"
            )
        p_drop = cfg.dropout if train else 0.0
        if p_drop > 0.0 and drop_rng is None:
            raise ConfigurationError("training-mode forward needs a dropout rng")

        key_mask = np.zeros((B, 1, 1, T))
        cols = np.arange(T)[None, :]
        key_mask[:, 0, 0, :] = np.where(cols < lengths[:, None], 0.0, -1e30)

        h = nm.add(nm.embedding(self.params["emb.tok"], ids),
                   nm.embedding(self.params["emb.pos"], np.arange(T)))
        if p_drop > 0.0:
            h = nm.dropout(h, p_drop, drop_rng)
        states = [h]
        H = cfg.n_heads
        for i in range(cfg.n_layers):
            p = self.params
            pre = f"block{i}."

            def proj(w, b):
                bias = p[pre + "attn." + b] if b else None
                return nm.linear(h, p[pre + "attn." + w], bias)

            ctx = nm.attention_heads(proj("wq", "bq"), proj("wk", None),
                                     proj("wv", "bv"), key_mask, H)
            out = nm.linear(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"])
            if p_drop > 0.0:
                out = nm.dropout(out, p_drop, drop_rng)
            h1 = nm.layer_norm(nm.add(h, out), p[pre + "ln1.g"], p[pre + "ln1.b"], cfg.ln_eps)
            ff = nm.linear(nm.gelu(nm.linear(h1, p[pre + "ff.w1"], p[pre + "ff.b1"])),
                           p[pre + "ff.w2"], p[pre + "ff.b2"])
            if p_drop > 0.0:
                ff = nm.dropout(ff, p_drop, drop_rng)
            h = nm.layer_norm(nm.add(h1, ff), p[pre + "ln2.g"], p[pre + "ln2.b"], cfg.ln_eps)
            states.append(h)
        return states

    def encode(self, tokens) -> LayerStates:
        """Deterministic eval-mode pass over one sequence."""
        tokens = list(tokens)
        if not tokens:
            raise ShapeError("encode() needs a non-empty token sequence")
        if len(tokens) > self.config.max_len:
            raise ShapeError(
                f"sequence length {len(tokens)} exceeds max_len {self.config.max_len}; "
                "truncate before encoding"
            )
        ids = np.asarray([tokens], dtype=np.int64)
        states = self.forward_hidden(ids, np.asarray([len(tokens)]), train=False)
        hidden = [s.data[0].copy() for s in states]
        return LayerStates(hidden=hidden, pooled=[h[0].copy() for h in hidden])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ShapeError("state dict does not match model parameters")
        for name, arr in state.items():
            np.copyto(self.params[name].data, arr)


class ClassifierHead:
    """One linear layer mapping a pooled vector to a task's label range."""

    def __init__(self, task_id: str, d_model: int, n_classes: int,
                 label_base: int, seed: int):
        self.task_id = task_id
        self.n_classes = n_classes
        self.label_base = label_base
        rng = rng_stream(seed, f"init:head:{task_id}")
        self.w = nm.Parameter(f"head.{task_id}.w", _uniform(rng, (d_model, n_classes), d_model))
        self.b = nm.Parameter(f"head.{task_id}.b", np.zeros(n_classes))

    def parameters(self) -> list:
        return [self.w, self.b]

    def logits(self, pooled: nm.Tensor) -> nm.Tensor:
        """Batched logits for pooled representations of shape (B, d)."""
        return nm.linear(pooled, self.w, self.b)


def classify(head: ClassifierHead, pooled: np.ndarray) -> np.ndarray:
    """Logits of width n_classes for one pooled vector."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (head.w.data.shape[0],):
        raise ShapeError(
            f"pooled vector shape {pooled.shape} does not match head input width "
            f"{head.w.data.shape[0]}"
        )
    return pooled @ head.w.data + head.b.data


def all_parameters(model: EncoderModel, heads) -> list:
    params = model.parameters()
    for head in heads.values():
        params.extend(head.parameters())
    return params


def parameter_hash(model: EncoderModel, heads=None) -> str:
    """SHA-256 over every parameter's name and raw bytes."""
    digest = hashlib.sha256()
    items = list(model.params.items())
    if heads:
        for head in heads.values():
            items.append((head.w.name, head.w))
            items.append((head.b.name, head.b))
    for name, p in sorted(items):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def save_checkpoint(model: EncoderModel, heads, path) -> None:
    """Write model + heads to `path` in the DRFT binary format."""
    head_meta = [
        {"task_id": h.task_id, "n_classes": h.n_classes, "label_base": h.label_base}
        for h in heads.values()
    ]
    config_block = json.dumps(
        {"config": asdict(model.config), "seed": model.seed, "heads": head_meta},
        sort_keys=True,
    ).encode("utf-8")
    records = list(model.params.items())
    for h in heads.values():
        records.append((h.w.name, h.w))
        records.append((h.b.name, h.b))
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(config_block)))
    buf.write(config_block)
    for name, p in records:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(
            f"checkpoint ended early: wanted {n} bytes, got {len(data)}"
        )
    return data


def load_checkpoint(path):
    """Read a DRFT checkpoint; returns (model, heads dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})"
            )
        (config_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, config_len).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            raw = f.read(4)
            if not raw:
                break
            if len(raw) != 4:
                raise CheckpointTruncatedError("checkpoint ended inside a record header")
            (name_len,) = struct.unpack("<I", raw)
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            count = int(np.prod(shape)) if rank else 1
            payload = _read_exact(f, 8 * count)
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()

    config = EncoderConfig(**meta["config"])
    model = EncoderModel(config, seed=meta["seed"])
    expected = set(model.params)
    heads: dict[str, ClassifierHead] = {}
    for hm in meta["heads"]:
        head = ClassifierHead(hm["task_id"], config.d_model, hm["n_classes"],
                              hm["label_base"], seed=meta["seed"])
        heads[hm["task_id"]] = head
        expected.add(head.w.name)
        expected.add(head.b.name)
    missing = expected - set(tensors)
    if missing:
        raise CheckpointTruncatedError(
            f"checkpoint missing {len(missing)} parameter records "
            f"(first: {sorted(missing)[0]!r})"
        )
    for name, p in model.params.items():
        np.copyto(p.data, tensors[name])
    for head in heads.values():
        np.copyto(head.w.data, tensors[head.w.name])
        np.copyto(head.b.data, tensors[head.b.name])
    return model, heads
