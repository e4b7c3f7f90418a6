"""Training loop: Adam, global-norm clipping, dropout, scheduled sampling, checkpoints."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .corpus import EncodedPair, Vocab, atomic_write_text, batch_iterator
from .errors import CheckpointError, ConfigError, ContractError, TrainingDivergenceError
from .model import ModelConfig, Seq2Seq
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lyricgen-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 16
    dropout_rate: float = 0.3
    clip_norm: float = 1.0
    sampling_prob: float = 0.1
    hidden: int = 128
    embedding: int = 128
    layers: int = 4
    seed: int = 0
    epochs: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TrainConfig":
        for name in ("dropout_rate", "sampling_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"must be within [0, 1], got {v}")
        if self.dropout_rate >= 1.0:
            raise ConfigError("dropout_rate", "must be below 1")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm", f"must be positive, got {self.clip_norm}")
        for name in ("batch_size", "hidden", "embedding", "layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, f"must be a positive integer, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be non-negative")
        if self.lr < 0:
            raise ConfigError("lr", "must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, "must be within [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience", "must be at least 1")
        return self

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]

    def model_config(self, vocab_size: int, use_structure: bool = True) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, embedding=self.embedding, hidden=self.hidden,
                           layers=self.layers, use_structure=use_structure)


# --------------------------------------------------------------------------
# optimisation primitives


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"non-finite gradient for {name!r} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter {p.data.shape} for {name}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.lr, self.beta1, self.beta2, self.eps = (state[k] for k in ("lr", "beta1", "beta2", "eps"))
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def adam_step(opt: Adam, params: dict, grads: dict) -> Adam:
    opt.step(params, grads)
    return opt


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict, max_norm: float):
    """Rescale all gradients together when their global L2 norm exceeds ``max_norm``.

    Returns ``(grads, norm_before_clipping)``.
    """
    if not max_norm > 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def apply_dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity at inference or for rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return T.mul_const(x, keep / (1.0 - rate))


def make_dropout(rate: float, rng: np.random.Generator) -> Callable | None:
    if rate == 0.0:
        return None
    return lambda x: apply_dropout(x, rate, True, rng)


# --------------------------------------------------------------------------
# epochs


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def batch_loss(model: Seq2Seq, batch, sampling_prob=0.0, rng=None, dropout=None) -> Tensor:
    loss, _ = model.forward_teacher_forced(
        batch.structure if model.use_structure else None,
        batch.condition, batch.target, sampling_prob=sampling_prob, rng=rng, dropout=dropout,
        content_mask=batch.condition_mask, target_mask=batch.target_mask,
    )
    return loss


def train_epoch(model: Seq2Seq, pairs: Sequence[EncodedPair], config: TrainConfig, opt: Adam,
                epoch: int = 0) -> dict:
    """One shuffled pass: forward, backward, clip, Adam step per batch.

    Every random choice (batch order, dropout masks, scheduled sampling)
    derives from ``(config.seed, epoch)``, so resuming from a checkpoint
    replays the same stream as an uninterrupted run.
    """
    if not pairs:
        raise ContractError("cannot train on an empty pair list")
    rng = np.random.default_rng([config.seed, epoch, 1])
    dropout = make_dropout(config.dropout_rate, rng)
    params = model.parameters()
    total_loss, total_tokens, norms = 0.0, 0, []
    for batch in batch_iterator(pairs, config.batch_size, seed=_epoch_seed(config.seed, epoch)):
        model.zero_grad()
        loss = batch_loss(model, batch, config.sampling_prob, rng, dropout)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"loss became {value} in epoch {epoch}")
        T.backward(loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        grads, norm = clip_gradients(grads, config.clip_norm)
        opt.step(params, grads)
        norms.append(norm)
        total_loss += value * batch.num_tokens
        total_tokens += batch.num_tokens
    model.zero_grad()
    return {
        "epoch": epoch,
        "mean_loss": total_loss / total_tokens,
        "grad_norm": {"mean": float(np.mean(norms)), "min": float(np.min(norms)),
                      "max": float(np.max(norms))},
        "batches": len(norms),
    }


def evaluation_loss(model: Seq2Seq, pairs: Sequence[EncodedPair], batch_size: int = 16) -> float:
    """Token-weighted teacher-forced loss without dropout or sampling."""
    total, tokens = 0.0, 0
    with T.no_grad():
        for batch in batch_iterator(pairs, batch_size, shuffle=False):
            total += batch_loss(model, batch).item() * batch.num_tokens
            tokens += batch.num_tokens
    return total / tokens


def train(model: Seq2Seq, pairs: Sequence[EncodedPair], config: TrainConfig, opt: Adam | None = None,
          start_epoch: int = 0, val_pairs: Sequence[EncodedPair] | None = None,
          target_loss: float | None = None, on_epoch: Callable[[dict], None] | None = None,
          checkpoint_path=None, vocab: Vocab | None = None, extra: dict | None = None):
    """Run ``config.epochs`` epochs; returns ``(history, optimizer)``.

    Stops early when the training loss drops below ``target_loss`` or, with
    validation pairs, after ``config.patience`` epochs without improvement.
    With ``checkpoint_path`` a checkpoint is written after every epoch so a
    divergence can point at the last good one.
    """
    opt = opt or Adam(config.lr, config.beta1, config.beta2, config.eps)
    history = []
    best_val, stale = np.inf, 0
    last_good = None
    for epoch in range(start_epoch, start_epoch + config.epochs):
        try:
            metrics = train_epoch(model, pairs, config, opt, epoch)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(str(exc), last_good_checkpoint=last_good) from exc
        if val_pairs:
            metrics["val_loss"] = evaluation_loss(model, val_pairs, config.batch_size)
        history.append(metrics)
        log.info("epoch %d loss %.5f", epoch, metrics["mean_loss"])
        if not all(np.all(np.isfinite(p.data)) for p in model.parameters().values()):
            raise TrainingDivergenceError(f"non-finite parameters after epoch {epoch}",
                                          last_good_checkpoint=last_good)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, opt, vocab=vocab,
                            extra={**(extra or {}), "epoch": epoch + 1})
            last_good = str(checkpoint_path)
        if on_epoch is not None:
            on_epoch(metrics)
        if target_loss is not None and metrics["mean_loss"] < target_loss:
            break
        if val_pairs:
            if metrics["val_loss"] < best_val:
                best_val, stale = metrics["val_loss"], 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return history, opt


# --------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(d["shape"])


@dataclass
class Checkpoint:
    model: Seq2Seq
    optimizer: Adam | None
    vocab: Vocab | None
    extra: dict


def save_checkpoint(path, model: Seq2Seq, opt: Adam | None = None, vocab: Vocab | None = None,
                    extra: dict | None = None) -> None:
    """Write a self-describing JSON checkpoint atomically.

    Arrays are stored as base64 little-endian float64, so a round trip is
    bit-exact, and the payload carries a SHA-256 digest for corruption checks.
    """
    payload = {
        "model_config": model.config.to_dict(),
        "params": {k: _encode_array(p.data) for k, p in model.parameters().items()},
        "vocab": vocab.to_list() if vocab is not None else None,
        "extra": extra or {},
        "optimizer": None,
    }
    if opt is not None:
        st = opt.state_dict()
        payload["optimizer"] = {
            "lr": st["lr"], "beta1": st["beta1"], "beta2": st["beta2"], "eps": st["eps"], "t": st["t"],
            "m": {k: _encode_array(v) for k, v in sorted(st["m"].items())},
            "v": {k: _encode_array(v) for k, v in sorted(st["v"].items())},
        }
    body = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(body.encode("utf-8")).hexdigest(),
        "payload": payload,
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True, ensure_ascii=False))


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a lyricgen checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )
    payload = doc.get("payload")
    body = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != doc.get("sha256"):
        raise CheckpointError(f"checkpoint {path} failed its integrity check")
    try:
        model = Seq2Seq(ModelConfig.from_dict(payload["model_config"]))
        params = model.parameters()
        stored = payload["params"]
        if set(stored) != set(params):
            raise CheckpointError("checkpoint parameters do not match the model layout")
        for k, p in params.items():
            arr = _decode_array(stored[k])
            if arr.shape != p.data.shape:
                raise CheckpointError(f"parameter {k} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr
        opt = None
        if payload.get("optimizer") is not None:
            o = payload["optimizer"]
            opt = Adam()
            opt.load_state_dict({
                **{k: o[k] for k in ("lr", "beta1", "beta2", "eps", "t")},
                "m": {k: _decode_array(v) for k, v in o["m"].items()},
                "v": {k: _decode_array(v) for k, v in o["v"].items()},
            })
        vocab = Vocab.from_list(payload["vocab"]) if payload.get("vocab") is not None else None
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return Checkpoint(model=model, optimizer=opt, vocab=vocab, extra=payload.get("extra", {}))


def write_log(path, history: Sequence[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(h, sort_keys=True) + "\n" for h in history))


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
