"""A small numpy MLP with hand-written backprop and plain SGD."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_HEADER = "CLHPO-MLP-1"


class ShapeError(ValueError):
    pass


@dataclass
class MLP:
    """ReLU hidden layers, identity output. ``weights[l]`` has shape (out, in)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MLP":
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __eq__(self, other):
        if not isinstance(other, MLP) or self.layer_dims != other.layer_dims:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters()))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: MLP) -> "Gradients":
        return cls([np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, factor: float) -> "Gradients":
        return Gradients([factor * w for w in self.weights], [factor * b for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def init_mlp(layer_dims: list[int], seed: int) -> MLP:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    layer_dims = list(layer_dims)
    if len(layer_dims) < 2:
        raise ValueError(f"need at least input and output dims, got {layer_dims}")
    if any(int(d) != d or d < 1 for d in layer_dims):
        raise ValueError(f"layer dims must be positive integers, got {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


def _check_input(model: MLP, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.layer_dims[0]:
        raise ShapeError(f"expected inputs of shape (n, {model.layer_dims[0]}), got {X.shape}")
    return X


def forward_cached(model: MLP, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the per-layer inputs needed by :func:`backward`."""
    a = _check_input(model, X)
    acts = [a]
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        a = z if l == last else np.maximum(z, 0.0)
        if l != last:
            acts.append(a)
    return a, acts


def forward(model: MLP, X: np.ndarray) -> np.ndarray:
    return forward_cached(model, X)[0]


def features(model: MLP, X: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations (the raw input for a single-layer model)."""
    return forward_cached(model, X)[1][-1]


def backward(model: MLP, acts: list[np.ndarray], dlogits: np.ndarray) -> Gradients:
    n_layers = len(model.weights)
    dW: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = dlogits
    for l in range(n_layers - 1, -1, -1):
        dW[l] = delta.T @ acts[l]
        db[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l]) * (acts[l] > 0)
    return Gradients(dW, db)


def _mask_vector(n_outputs: int, class_mask) -> np.ndarray | None:
    if class_mask is None:
        return None
    keep = np.zeros(n_outputs, dtype=bool)
    keep[sorted(class_mask)] = True
    return keep


def _log_softmax(logits: np.ndarray, keep: np.ndarray | None) -> np.ndarray:
    if keep is not None:
        logits = np.where(keep, logits, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_example_ce(logits: np.ndarray, y: np.ndarray, class_mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and softmax probabilities (zero outside the mask)."""
    keep = _mask_vector(logits.shape[1], class_mask)
    if keep is not None and len(y) and not keep[y].all():
        bad = sorted(set(y[~keep[y]].tolist()))
        raise ValueError(f"labels {bad} fall outside the class mask")
    logp = _log_softmax(logits, keep)
    losses = -logp[np.arange(len(y)), y]
    return losses, np.exp(logp)


def _zero_loss(model: MLP) -> tuple[float, Gradients]:
    return 0.0, Gradients.zeros_like(model)


def loss_and_grad(model: MLP, X, y, class_mask=None, sample_weight=None) -> tuple[float, Gradients]:
    """Mean softmax cross-entropy, optionally restricted to ``class_mask``.

    ``sample_weight`` multiplies each row's loss and is treated as a constant.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        return _zero_loss(model)
    logits, acts = forward_cached(model, X)
    losses, probs = per_example_ce(logits, y, class_mask)
    n = len(y)
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    if sample_weight is None:
        loss = losses.mean()
        dlogits /= n
    else:
        w = np.asarray(sample_weight, dtype=np.float64)
        loss = (w * losses).mean()
        dlogits *= (w / n)[:, None]
    return float(loss), backward(model, acts, dlogits)


def soft_ce_loss_and_grad(model: MLP, X, target_probs, class_mask=None) -> tuple[float, Gradients]:
    """Cross-entropy against soft targets: mean_i -sum_c t_ic log p_ic."""
    target_probs = np.asarray(target_probs, dtype=np.float64)
    if len(target_probs) == 0:
        return _zero_loss(model)
    logits, acts = forward_cached(model, X)
    if target_probs.shape != logits.shape:
        raise ShapeError(f"targets {target_probs.shape} do not match logits {logits.shape}")
    keep = _mask_vector(logits.shape[1], class_mask)
    logp = _log_softmax(logits, keep)
    n = len(logits)
    # masked-out columns carry zero target mass; avoid 0 * -inf
    loss = -(target_probs * np.where(np.isfinite(logp), logp, 0.0)).sum() / n
    dlogits = (np.exp(logp) - target_probs) / n
    return float(loss), backward(model, acts, dlogits)


def mse_logit_loss_and_grad(model: MLP, X, target_logits) -> tuple[float, Gradients]:
    """Mean over all entries of (logit - target)^2."""
    target_logits = np.asarray(target_logits, dtype=np.float64)
    X = _check_input(model, X)
    if target_logits.shape != (len(X), model.n_outputs):
        raise ShapeError(f"targets {target_logits.shape} do not match logits {(len(X), model.n_outputs)}")
    if len(X) == 0:
        return _zero_loss(model)
    logits, acts = forward_cached(model, X)
    diff = logits - target_logits
    loss = float(np.mean(diff ** 2))
    return loss, backward(model, acts, 2.0 * diff / diff.size)


def sgd_step(model: MLP, grads: Gradients, lr: float) -> MLP:
    """In-place ``theta -= lr * g``; no momentum or weight decay. Returns ``model``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    for p, g in zip(model.parameters(), grads.parameters()):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    for p, g in zip(model.parameters(), grads.parameters()):
        p -= lr * g
    return model


def predict(model: MLP, X, class_mask=None) -> np.ndarray:
    logits = forward(model, X)
    keep = _mask_vector(logits.shape[1], class_mask)
    if keep is not None:
        logits = np.where(keep, logits, -np.inf)
    return logits.argmax(axis=1)


def finite_difference_grads(loss_fn, model: MLP, eps: float = 1e-4) -> Gradients:
    """Central differences of ``loss_fn(model)`` for every parameter."""
    probe = model.copy()
    out = Gradients.zeros_like(model)
    for p, g in zip(probe.parameters(), out.parameters()):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            plus = loss_fn(probe)
            p[idx] = orig - eps
            minus = loss_fn(probe)
            p[idx] = orig
            g[idx] = (plus - minus) / (2 * eps)
    return out


def max_relative_error(a: Gradients, b: Gradients, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor) over all parameters."""
    worst = 0.0
    for x, y in zip(a.parameters(), b.parameters()):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def min_relu_margin(model: MLP, X) -> float:
    """Smallest |pre-activation| over hidden units; small values mean a kink is near."""
    a = _check_input(model, X)
    margin = np.inf
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ W.T + b
        margin = min(margin, float(np.abs(z).min()))
        a = np.maximum(z, 0.0)
    return margin


def save_mlp(model: MLP, path) -> None:
    """Text checkpoint: header, layer dims, then each W and b row-major, one per line."""
    lines = [CHECKPOINT_HEADER, " ".join(str(d) for d in model.layer_dims)]
    for p in model.parameters():
        lines.append(" ".join(repr(float(v)) for v in p.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mlp(path) -> MLP:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER} checkpoint")
    dims = [int(t) for t in lines[1].split()]
    n_layers = len(dims) - 1
    if len(lines) != 2 + 2 * n_layers:
        raise ValueError(f"{path}: expected {2 * n_layers} parameter lines, found {len(lines) - 2}")
    weights, biases = [], []
    for l in range(n_layers):
        w = np.array([float(t) for t in lines[2 + 2 * l].split()]).reshape(dims[l + 1], dims[l])
        b = np.array([float(t) for t in lines[3 + 2 * l].split()]).reshape(dims[l + 1])
        weights.append(w)
        biases.append(b)
    return MLP(weights, biases)


def random_gradient_cases(n_cases: int, seed: int = 0, margin: float = 1e-3):
    """Yield (model, X, y) triples whose hidden pre-activations stay ``margin`` away from ReLU kinks."""
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < n_cases:
        dims = [int(rng.integers(2, 6))] + [int(rng.integers(2, 7)) for _ in range(int(rng.integers(0, 3)))] + [int(rng.integers(2, 6))]
        model = init_mlp(dims, int(rng.integers(2**31)))
        for b in model.biases:
            b += rng.uniform(-0.5, 0.5, size=b.shape)
        n = int(rng.integers(1, 9))
        X = rng.standard_normal((n, dims[0]))
        if len(dims) > 2 and min_relu_margin(model, X) < margin:
            continue
        y = rng.integers(0, dims[-1], size=n)
        produced += 1
        yield model, X, y


def gradient_check(n_cases: int = 50, seed: int = 0, eps: float = 1e-4) -> dict[str, float]:
    """Worst analytic-vs-central-difference relative error per loss family."""
    rng = np.random.default_rng(seed + 1)
    worst = {"cross_entropy": 0.0, "masked_cross_entropy": 0.0, "mse_logit": 0.0}
    for model, X, y in random_gradient_cases(n_cases, seed):
        n_out = model.n_outputs
        extra = rng.choice(n_out, size=int(rng.integers(0, n_out)), replace=False)
        mask = set(y.tolist()) | set(extra.tolist())
        targets = rng.standard_normal((len(y), n_out))
        checks = {
            "cross_entropy": lambda m: loss_and_grad(m, X, y),
            "masked_cross_entropy": lambda m: loss_and_grad(m, X, y, class_mask=mask),
            "mse_logit": lambda m: mse_logit_loss_and_grad(m, X, targets),
        }
        for name, fn in checks.items():
            analytic = fn(model)[1]
            numeric = finite_difference_grads(lambda m: fn(m)[0], model, eps)
            worst[name] = max(worst[name], max_relative_error(analytic, numeric))
    return worst
