"""Two-class feed-forward heads over sentence embeddings, trained with Adam.

Variants::

    default      logits = W x + b
    alternative  logits = W2 dropout(ReLU(W1 x + b1)) + b2

Class probabilities are the softmax of the logits; index 1 is "abnormal".
Everything is plain numpy and deterministic for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from selfscreen.data import Label
from selfscreen.embed import DIM
from selfscreen.errors import DegenerateDataError, NumericError, ValidationError
from selfscreen.metrics import f1_score
from selfscreen.sampling import upsample_minority

logger = logging.getLogger(__name__)

DEFAULT = "default"
ALTERNATIVE = "alternative"
N_CLASSES = 2
MODEL_FORMAT = "selfscreen-ffnn/1"


@dataclass(eq=False)
class FfnnParams:
    variant: str
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        if self.variant not in (DEFAULT, ALTERNATIVE):
            raise ValidationError(f"unknown variant {self.variant!r}")
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in self.arrays.items()}
        expected = ("W", "b") if self.variant == DEFAULT else ("W1", "b1", "W2", "b2")
        if tuple(self.arrays) != expected:
            raise ValidationError(f"{self.variant} head needs arrays {expected}, got {tuple(self.arrays)}")
        a = self.arrays
        if self.variant == DEFAULT:
            ok = a["W"].ndim == 2 and a["W"].shape[0] == N_CLASSES and a["b"].shape == (N_CLASSES,)
        else:
            h, d = a["W1"].shape if a["W1"].ndim == 2 else (0, 0)
            ok = (h >= 1 and a["b1"].shape == (h,) and a["W2"].shape == (N_CLASSES, h)
                  and a["b2"].shape == (N_CLASSES,))
        if not ok:
            shapes = {k: v.shape for k, v in a.items()}
            raise ValidationError(f"inconsistent {self.variant} parameter shapes {shapes}")
        if not all(np.all(np.isfinite(v)) for v in a.values()):
            raise NumericError("non-finite parameter values")

    @property
    def input_dim(self) -> int:
        return self.arrays["W" if self.variant == DEFAULT else "W1"].shape[1]

    @property
    def hidden_units(self) -> int | None:
        return self.arrays["W1"].shape[0] if self.variant == ALTERNATIVE else None

    def weight_names(self) -> tuple[str, ...]:
        return ("W",) if self.variant == DEFAULT else ("W1", "W2")

    def copy(self) -> "FfnnParams":
        return FfnnParams(self.variant, {k: v.copy() for k, v in self.arrays.items()})

    def __eq__(self, other):
        if not isinstance(other, FfnnParams):
            return NotImplemented
        return (self.variant == other.variant and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()))


def init_params(
    variant: str = DEFAULT,
    hidden_units: int | None = None,
    dim: int = DIM,
    seed: int | np.random.Generator = 0,
) -> FfnnParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def layer(fan_out, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

    if variant == DEFAULT:
        W, b = layer(N_CLASSES, dim)
        return FfnnParams(DEFAULT, {"W": W, "b": b})
    if variant != ALTERNATIVE:
        raise ValidationError(f"unknown variant {variant!r}")
    if hidden_units is None or hidden_units < 1:
        raise ValidationError("alternative head needs hidden_units >= 1")
    W1, b1 = layer(hidden_units, dim)
    W2, b2 = layer(N_CLASSES, hidden_units)
    return FfnnParams(ALTERNATIVE, {"W1": W1, "b1": b1, "W2": W2, "b2": b2})


def _as_batch(params: FfnnParams, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValidationError(f"input has shape {np.shape(x)}, head expects {params.input_dim} features")
    return X, single


def _forward(params: FfnnParams, X: np.ndarray, keep_mask=None, dropout_p: float = 0.0):
    a = params.arrays
    if params.variant == DEFAULT:
        return X @ a["W"].T + a["b"], None
    pre = X @ a["W1"].T + a["b1"]
    hidden = np.maximum(pre, 0.0)
    if keep_mask is not None:
        hidden = hidden * np.broadcast_to(keep_mask, hidden.shape) / (1.0 - dropout_p)
    return hidden @ a["W2"].T + a["b2"], (pre, hidden)


def forward(params: FfnnParams, x, keep_mask=None, dropout_p: float = 0.0) -> np.ndarray:
    """Logits for one input (shape (2,)) or a batch (shape (n, 2)).

    ``keep_mask`` (0/1 over hidden units) applies inverted dropout to the
    post-ReLU activations; only meaningful for the alternative head.
    """
    if keep_mask is not None and params.variant != ALTERNATIVE:
        raise ValidationError("dropout only applies to the alternative head")
    if not 0.0 <= dropout_p < 1.0:
        raise ValidationError("dropout_p must be in [0, 1)")
    X, single = _as_batch(params, x)
    logits, _ = _forward(params, X, keep_mask, dropout_p)
    return logits[0] if single else logits


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params: FfnnParams, x) -> np.ndarray:
    return softmax(forward(params, x))


def p_abnormal(params: FfnnParams, x) -> float | np.ndarray:
    p = predict_proba(params, x)
    return float(p[1]) if p.ndim == 1 else p[:, 1]


def decide(p_abn: float, threshold: float = 0.5) -> Label:
    """Positive iff the abnormal probability is strictly above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must be in (0, 1)")
    return Label.POSITIVE if p_abn > threshold else Label.NEGATIVE


def classify(params: FfnnParams, x, threshold: float = 0.5) -> Label:
    return decide(p_abnormal(params, x), threshold)


def screen_vector(params: FfnnParams, x) -> tuple[float, Label]:
    """The single scoring path shared by evaluation and serving."""
    p = p_abnormal(params, np.asarray(x, dtype=np.float64).reshape(-1))
    return p, decide(p)


def l2_penalty(params: FfnnParams, l2_factor: float) -> tuple[float, dict[str, np.ndarray]]:
    """``l2_factor * sum ||W||^2`` over weight matrices (biases excluded) and its gradient."""
    loss = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    for name in params.weight_names():
        w = params.arrays[name]
        loss += l2_factor * float(np.sum(w * w))
        grads[name] = 2.0 * l2_factor * w
    return loss, grads


def loss_and_grads(
    params: FfnnParams,
    X,
    y: Sequence[int],
    l2_factor: float = 0.0,
    keep_mask=None,
    dropout_p: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy plus L2 penalty, with backpropagated gradients."""
    X, _ = _as_batch(params, X)
    y = np.asarray(y, dtype=int)
    n = X.shape[0]
    if n == 0 or y.shape != (n,):
        raise ValidationError("batch must be non-empty with one label per row")
    logits, cache = _forward(params, X, keep_mask, dropout_p)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    ce = float(np.mean(log_norm - shifted[np.arange(n), y]))
    reg, grads = l2_penalty(params, l2_factor)
    loss = ce + reg
    if not math.isfinite(loss):
        raise NumericError(f"loss is not finite (cross-entropy={ce}, l2={reg}); max |logit|={np.abs(logits).max()}")

    d_logits = np.exp(shifted - log_norm[:, None])
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    a = params.arrays
    if params.variant == DEFAULT:
        grads["W"] += d_logits.T @ X
        grads["b"] += d_logits.sum(axis=0)
    else:
        pre, hidden = cache
        grads["W2"] += d_logits.T @ hidden
        grads["b2"] += d_logits.sum(axis=0)
        d_hidden = d_logits @ a["W2"]
        if keep_mask is not None:
            d_hidden = d_hidden * np.broadcast_to(keep_mask, d_hidden.shape) / (1.0 - dropout_p)
        d_pre = d_hidden * (pre > 0)
        grads["W1"] += d_pre.T @ X
        grads["b1"] += d_pre.sum(axis=0)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    return loss, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: FfnnParams) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.arrays.items()},
                   {k: np.zeros_like(p) for k, p in params.arrays.items()})


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 15
    batch_size: int = 2
    l2_factor: float = 1e-4
    val_fraction: float = 0.10
    variant: str = DEFAULT
    hidden_units: int | None = None
    dropout_p: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    upsample: bool = True
    upsample_before_split: bool = False
    val_split: str = "sample"  # "sample" | "subject"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must be in [0, 1)")
        if self.variant not in (DEFAULT, ALTERNATIVE):
            raise ValidationError(f"unknown variant {self.variant!r}")
        if self.variant == ALTERNATIVE and (self.hidden_units is None or self.hidden_units < 1):
            raise ValidationError("alternative head needs hidden_units >= 1")
        if self.val_split not in ("sample", "subject"):
            raise ValidationError("val_split must be 'sample' or 'subject'")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def adam_step(
    params: FfnnParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[FfnnParams, AdamState]:
    """One bias-corrected Adam update. Returns new objects; inputs are untouched."""
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_arrays, new_m, new_v = {}, {}, {}
    for k, p in params.arrays.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_arrays[k] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
        new_m[k], new_v[k] = m, v
    return FfnnParams(params.variant, new_arrays), AdamState(new_m, new_v, t)


def _adam_update_inplace(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                         cfg: TrainConfig, scratch: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
    """``adam_step`` without the copies; same arithmetic, so the same numbers."""
    state.t += 1
    b1, b2, t = cfg.adam_beta1, cfg.adam_beta2, state.t
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for k, p in arrays.items():
        g, m, v = grads[k], state.m[k], state.v[k]
        if k not in scratch:
            scratch[k] = (np.empty_like(p), np.empty_like(p))
        step, denom = scratch[k]
        m *= b1
        np.multiply(1.0 - b1, g, out=step)
        m += step
        v *= b2
        np.multiply(1.0 - b2, g, out=step)
        step *= g
        v += step
        np.divide(v, c2, out=denom)
        np.sqrt(denom, out=denom)
        denom += cfg.adam_epsilon
        np.divide(m, c1, out=step)
        step *= cfg.learning_rate
        step /= denom
        p -= step


def _unchecked(variant: str, arrays: dict[str, np.ndarray]) -> FfnnParams:
    # view over arrays that are already validated; skips the per-step checks
    obj = object.__new__(FfnnParams)
    obj.variant, obj.arrays = variant, arrays
    return obj


@dataclass
class TrainReport:
    best_epoch: int  # 1-based
    train_loss: list[float]
    val_f1: list[float]
    params: FfnnParams
    n_train: int = 0
    n_val: int = 0
    selected_by: str = "val_f1"  # or "last_epoch" when there was no validation set
    epoch_params: list[FfnnParams] = field(default_factory=list, repr=False)


def _validation_indices(n: int, cfg: TrainConfig, rng: np.random.Generator, groups) -> np.ndarray:
    n_val = int(math.floor(cfg.val_fraction * n + 0.5))
    if n_val == 0:
        return np.array([], dtype=int)
    if cfg.val_split == "sample" or groups is None:
        return np.sort(rng.permutation(n)[:n_val])
    groups = np.asarray(groups)
    chosen = []
    for g in rng.permutation(np.unique(groups)):
        if len(chosen) >= n_val:
            break
        chosen.extend(np.flatnonzero(groups == g).tolist())
    return np.sort(np.array(chosen, dtype=int))


def train(X, y: Sequence[int], cfg: TrainConfig, groups: Sequence[str] | None = None,
          keep_snapshots: bool = False) -> TrainReport:
    """Train a head and keep the epoch snapshot with the best validation F1.

    ``val_fraction`` of the rows is held out at random for validation (by
    subject when ``cfg.val_split == "subject"`` and ``groups`` is given). With
    ``cfg.upsample`` the minority class of the remaining training rows is
    upsampled. Ties in validation F1 go to the earliest epoch. When the
    validation split is empty or holds no positive sample, F1 cannot rank the
    epochs and the last epoch is kept (``selected_by == "last_epoch"``).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError("X must be (n, d) with one label per row")
    if X.shape[0] < 2:
        raise DegenerateDataError("training needs at least 2 samples")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.variant, cfg.hidden_units, X.shape[1], rng)

    if cfg.upsample and cfg.upsample_before_split:
        rows = np.array([i for i, _ in upsample_minority(list(zip(range(len(y)), y)), rng)])
        X, y = X[rows], y[rows]
        groups = None if groups is None else np.asarray(groups)[rows]

    val_idx = _validation_indices(len(y), cfg, rng, groups)
    train_mask = np.ones(len(y), dtype=bool)
    train_mask[val_idx] = False
    train_idx = np.flatnonzero(train_mask)
    if len(np.unique(y[train_idx])) < 2:
        raise DegenerateDataError(
            f"training portion has a single class ({len(train_idx)} rows, classes {sorted(set(y[train_idx].tolist()))})"
        )
    if cfg.upsample and not cfg.upsample_before_split:
        train_idx = np.array([i for i, _ in upsample_minority(list(zip(train_idx.tolist(), y[train_idx])), rng)])
    # F1 is undefined without positives (recall = 0/0), so such a split cannot rank epochs
    rank_by_val = len(val_idx) > 0 and bool(np.any(y[val_idx] == 1))
    if len(val_idx) == 0:
        logger.warning("validation split is empty at val_fraction=%s; keeping the last epoch", cfg.val_fraction)
    elif not rank_by_val:
        logger.warning("validation split (%d rows) has no positive sample; F1 cannot rank epochs, "
                       "keeping the last epoch", len(val_idx))

    state = AdamState.zeros_like(params)
    scratch: dict = {}
    work = _unchecked(params.variant, {k: v.copy() for k, v in params.arrays.items()})
    keep_p = 1.0 - cfg.dropout_p
    use_dropout = cfg.variant == ALTERNATIVE and cfg.dropout_p > 0
    h = params.hidden_units
    losses, val_f1s, snapshots = [], [], []
    best, best_f1 = 0, -1.0
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            mask = (rng.random((len(rows), h)) < keep_p).astype(np.float64) if use_dropout else None
            loss, grads = loss_and_grads(work, X[rows], y[rows], cfg.l2_factor, mask, cfg.dropout_p)
            _adam_update_inplace(work.arrays, grads, state, cfg, scratch)
            total += loss * len(rows)
            count += len(rows)
        losses.append(total / count)
        params = work.copy()
        snapshots.append(params)
        if len(val_idx):
            preds = (p_abnormal(params, X[val_idx]) > 0.5).astype(int)
            f1 = f1_score(y[val_idx], preds)
            val_f1s.append(f1)
        if not rank_by_val:
            best = epoch
        elif f1 > best_f1:
            best, best_f1 = epoch, f1

    return TrainReport(
        best_epoch=best + 1,
        train_loss=losses,
        val_f1=val_f1s,
        params=snapshots[best],
        n_train=len(train_idx),
        n_val=len(val_idx),
        selected_by="val_f1" if rank_by_val else "last_epoch",
        epoch_params=snapshots if keep_snapshots else [],
    )


def model_to_dict(params: FfnnParams, cfg: TrainConfig | None = None) -> dict:
    return {
        "format": MODEL_FORMAT,
        "variant": params.variant,
        "h": params.hidden_units,
        "dims": {k: list(v.shape) for k, v in params.arrays.items()},
        "input_dim": params.input_dim,
        "seed": cfg.seed if cfg else None,
        "config_digest": cfg.digest() if cfg else None,
        "params": {k: v.tolist() for k, v in params.arrays.items()},
    }


def save_model(params: FfnnParams, path: str | Path, cfg: TrainConfig | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(params, cfg), fh)
        fh.write("\n")


def load_model(path: str | Path, input_dim: int = DIM) -> FfnnParams:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not a model file ({exc.msg})") from None
    if doc.get("format") != MODEL_FORMAT:
        raise ValidationError(f"{path}: unsupported model format {doc.get('format')!r}")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in doc["params"].items()}
    for k, shape in doc["dims"].items():
        if list(arrays[k].shape) != list(shape):
            raise ValidationError(f"{path}: {k} has shape {arrays[k].shape}, header says {shape}")
    params = FfnnParams(doc["variant"], arrays)
    if params.input_dim != input_dim:
        raise ValidationError(f"{path}: model expects {params.input_dim}-d input, need {input_dim}")
    return params


def model_version(path: str | Path) -> str:
    return "ffnn-" + hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
