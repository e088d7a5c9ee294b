"""Adam optimization, the two training phases, batching, and checkpoints."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .encoding import TagLabel
from .model import AdrModel
from .numerics import NumericalError, Parameter

CHECKPOINT_MAGIC = b"ADRCKPT1"


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or incompatible."""


@dataclass
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


@dataclass
class TrainConfig:
    phase: str = "supervised"
    batch_size: int = 1
    epochs: int = 5
    max_len: int = 40
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def pretrain_config(**kw) -> TrainConfig:
    kw.setdefault("phase", "pretrain")
    kw.setdefault("batch_size", 128)
    kw.setdefault("epochs", 30)
    return TrainConfig(**kw)


def supervised_config(**kw) -> TrainConfig:
    kw.setdefault("phase", "supervised")
    kw.setdefault("batch_size", 1)
    kw.setdefault("epochs", 5)
    return TrainConfig(**kw)


def adam_step(param: Parameter, config: AdamConfig, t: int) -> None:
    """One bias-corrected Adam update; zeroes the gradient afterwards."""
    if t < 1:
        raise ValueError("step index must be >= 1")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient for parameter {param.name}")
    param.adam_m *= config.beta1
    param.adam_m += (1.0 - config.beta1) * g
    param.adam_v *= config.beta2
    param.adam_v += (1.0 - config.beta2) * g * g
    m_hat = param.adam_m / (1.0 - config.beta1**t)
    v_hat = param.adam_v / (1.0 - config.beta2**t)
    param.value -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    param.zero_grad()


class Adam:
    """Tracks the shared step counter for a fixed parameter group."""

    def __init__(self, params: Sequence[Parameter], config: AdamConfig = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.t = 0

    def step(self):
        self.t += 1
        for p in self.params:
            adam_step(p, self.config, self.t)


def pad_batch(
    examples: Sequence[Sequence[int]], max_len: int, pad_index: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad (or truncate) index sequences into a (B, max_len) matrix."""
    if any(len(e) == 0 for e in examples):
        raise ValueError("cannot pad an empty example")
    B = len(examples)
    out = np.full((B, max_len), pad_index, dtype=np.int64)
    lengths = np.empty(B, dtype=np.int64)
    for i, seq in enumerate(examples):
        trimmed = list(seq)[:max_len]
        out[i, : len(trimmed)] = trimmed
        lengths[i] = len(trimmed)
    return out, lengths


def heldout_split(ids: Sequence[str], fraction_denominator: int = 10):
    """Deterministic ~1/denominator held-out split keyed on a stable hash of
    the example id (independent of corpus order and process salt)."""
    train, held = [], []
    for i, sid in enumerate(ids):
        digest = hashlib.md5(str(sid).encode("utf-8")).digest()
        (held if digest[0] % fraction_denominator == 0 else train).append(i)
    return train, held


PretrainExample = Tuple[List[int], int, str]  # token indices, drug label, tweet id
TagExample = Tuple[List[int], List[int], str]  # token indices, tag ids, tweet id


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def pretrain(
    examples: Sequence[PretrainExample],
    model: AdrModel,
    config: TrainConfig,
) -> List[dict]:
    """Phase 1: minimize masked-drug prediction cross-entropy.

    Trains the encoder and the drug head; the tag head is untouched. Returns
    one log record per epoch with the held-out drug accuracy.
    """
    if not examples:
        raise ValueError("pretraining corpus is empty")
    if model.drug_count < 2:
        raise ValueError("drug catalog must contain at least 2 names")
    rng = np.random.default_rng(config.seed)
    train_idx, held_idx = heldout_split([e[2] for e in examples])
    if not train_idx:
        train_idx, held_idx = list(range(len(examples))), []
    optimizer = Adam(model.drug_parameters(), config.adam)
    log = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_idx))
        total_loss = 0.0
        total_n = 0
        for batch in _batches(order, config.batch_size):
            chosen = [examples[train_idx[i]] for i in batch]
            idx, lengths = pad_batch([c[0] for c in chosen], config.max_len)
            labels = np.array([c[1] for c in chosen])
            loss, cache = model.drug_loss(idx, lengths, labels)
            model.backward_drug(cache)
            optimizer.step()
            total_loss += loss * len(chosen)
            total_n += len(chosen)
        record = {
            "phase": "pretrain",
            "epoch": epoch,
            "mean_loss": total_loss / max(total_n, 1),
            "accuracy": _drug_accuracy(model, examples, held_idx, config.max_len),
            "wall_time": time.perf_counter() - t0,
        }
        log.append(record)
    return log


def _drug_accuracy(model, examples, indices, max_len) -> Optional[float]:
    if not indices:
        return None
    correct = 0
    for start in range(0, len(indices), 64):
        chosen = [examples[i] for i in indices[start : start + 64]]
        idx, lengths = pad_batch([c[0] for c in chosen], max_len)
        probs = model.predict_drug_batch(idx, lengths)
        correct += int((probs.argmax(axis=1) == [c[1] for c in chosen]).sum())
    return correct / len(indices)


def train_supervised(
    data: Sequence[TagExample],
    model: AdrModel,
    config: TrainConfig,
) -> List[dict]:
    """Phase 2: minimize the summed per-token tagging cross-entropy.

    Reuses (and mutates) the same encoder parameter objects phase 1 trained;
    the drug head is untouched. Optimizer moments start fresh.
    """
    if not data:
        raise ValueError("labeled training set is empty")
    for ids, tags, sid in data:
        if len(ids) != len(tags):
            raise ValueError(f"token/tag misalignment in record {sid!r}")
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.tag_parameters(), config.adam)
    log = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(data))
        total_loss = 0.0
        correct = 0
        scored = 0
        for batch in _batches(order, config.batch_size):
            chosen = [data[i] for i in batch]
            idx, lengths = pad_batch([c[0] for c in chosen], config.max_len)
            tags, _ = pad_batch(
                [c[1] for c in chosen], config.max_len, pad_index=int(TagLabel.PAD)
            )
            loss, cache = model.tag_loss(idx, lengths, tags)
            pred = cache.probs.argmax(axis=2)
            hit = (pred == tags) * (cache.valid > 0)
            correct += int(hit.sum())
            scored += int(cache.valid.sum())
            model.backward_tags(cache)
            optimizer.step()
            total_loss += loss * len(chosen)
        log.append(
            {
                "phase": "supervised",
                "epoch": epoch,
                "mean_loss": total_loss / len(data),
                "accuracy": correct / max(scored, 1),
                "wall_time": time.perf_counter() - t0,
            }
        )
    return log


def write_log(path, records: Sequence[dict]) -> None:
    """Line-delimited JSON training log."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints: magic, json header (shapes, seed, metadata), raw float64 bytes.
# The format is fully deterministic, so identical models produce identical
# files byte for byte.
# ---------------------------------------------------------------------------


def _model_arrays(model: AdrModel):
    arrays = [("embeddings", model.embeddings)]
    for p in model.all_parameters():
        arrays.append((p.name, p.value))
    return arrays


def save_checkpoint(model: AdrModel, path) -> None:
    arrays = _model_arrays(model)
    header = {
        "version": 1,
        "seed": model.seed,
        "hidden": model.hidden,
        "emb": model.emb,
        "drug_count": model.drug_count,
        "pooling": model.pooling,
        "gate_biases": model.gate_biases,
        "vocab_tokens": model.vocab_tokens,
        "drug_names": model.drug_names,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=np.float64).tobytes())


def load_checkpoint(path, expected_hidden: Optional[int] = None) -> AdrModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    hlen = int.from_bytes(data[pos : pos + 8], "little")
    pos += 8
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos += hlen
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    if expected_hidden is not None and header["hidden"] != expected_hidden:
        raise CheckpointError(
            f"{path}: checkpoint hidden size {header['hidden']} != expected {expected_hidden}"
        )
    arrays = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = n * 8
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            data[pos : pos + nbytes], dtype=np.float64
        ).reshape(entry["shape"]).copy()
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after arrays")

    model = AdrModel(
        arrays["embeddings"],
        hidden=header["hidden"],
        drug_count=header["drug_count"],
        seed=header["seed"],
        gate_biases=header["gate_biases"],
        pooling=header["pooling"],
        vocab_tokens=header["vocab_tokens"],
        drug_names=header["drug_names"],
    )
    for p in model.all_parameters():
        if p.name not in arrays:
            raise CheckpointError(f"{path}: missing array {p.name}")
        if arrays[p.name].shape != p.value.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {p.name}: "
                f"{arrays[p.name].shape} vs {p.value.shape}"
            )
        p.value[...] = arrays[p.name]
    return model
