"""Loss functions with analytic gradients and certifiable convexity constants.

Three families cover the simulator's needs:

  - :class:`QuadraticModel`: F(v) = 0.5 (v - a)^T A (v - a) with A symmetric
    positive definite.  Closed-form everything; the workhorse for
    convergence-bound validation.
  - :class:`LogisticModel`: ridge-regularized binary logistic regression,
    strongly convex with mu = ridge and L = ridge + lambda_max(X^T X / n) / 4.
  - :class:`MlpModel`: small tanh multi-layer perceptron with a single
    logistic output.  Smooth but non-convex; used for behavioral
    experiments only and rejected by :func:`convexity_constants`.

Parameters are bare 1-D float64 arrays (``ParamVector``); gradients are
computed by hand so the whole stack stays inside numpy.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import DataShard
from .seeding import MODEL_GEN, substream

ParamVector = np.ndarray


@dataclass
class QuadraticModel:
    """F(v) = 0.5 (v - center)^T matrix (v - center); data-free."""

    matrix: np.ndarray
    center: np.ndarray

    kind = "quadratic"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.center = np.asarray(self.center, dtype=float)
        d = self.center.shape[0]
        if self.matrix.shape != (d, d):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match center length {d}")
        if not np.allclose(self.matrix, self.matrix.T, atol=1e-12):
            raise ValueError("quadratic matrix must be symmetric")

    @property
    def dim(self) -> int:
        return self.center.shape[0]


@dataclass
class LogisticModel:
    """Binary logistic regression with an L2 ridge term (labels in {0, 1})."""

    dim: int
    ridge: float = 0.1

    kind = "logistic_l2"

    def __post_init__(self):
        if self.ridge <= 0:
            raise ValueError("ridge must be positive for strong convexity")


@dataclass
class MlpModel:
    """Tanh MLP with layer widths (input, hidden..., out).

    Output width 1 is a binary logit trained with logistic loss; width
    C >= 2 is a softmax head trained with cross-entropy on labels 0..C-1.
    """

    widths: tuple

    kind = "mlp"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ValueError("widths must include at least input and output layers")
        if any(w < 1 for w in self.widths):
            raise ValueError("all layer widths must be positive")

    @property
    def n_classes(self) -> int:
        return 2 if self.widths[-1] == 1 else self.widths[-1]

    @property
    def dim(self) -> int:
        return sum(w_out * w_in + w_out for w_in, w_out in zip(self.widths[:-1], self.widths[1:]))

    def unpack(self, params: np.ndarray):
        """Split a flat parameter vector into per-layer (W, b) views."""
        layers = []
        pos = 0
        for w_in, w_out in zip(self.widths[:-1], self.widths[1:]):
            w = params[pos : pos + w_out * w_in].reshape(w_out, w_in)
            pos += w_out * w_in
            b = params[pos : pos + w_out]
            pos += w_out
            layers.append((w, b))
        return layers


def _check_params(spec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.dim,):
        raise ValueError(f"params length {params.shape} does not match model dimension {spec.dim}")
    return params


def _check_batch(spec, batch: DataShard, signed: bool = True) -> tuple[np.ndarray, np.ndarray]:
    if batch is None or batch.n == 0:
        raise ValueError(f"{spec.kind} model requires a nonempty batch")
    x = batch.features
    if spec.kind == "logistic_l2" and x.shape[1] != spec.dim:
        raise ValueError(f"feature width {x.shape[1]} does not match model dimension {spec.dim}")
    if spec.kind == "mlp" and x.shape[1] != spec.widths[0]:
        raise ValueError(f"feature width {x.shape[1]} does not match mlp input width {spec.widths[0]}")
    if signed:
        return x, 2.0 * np.asarray(batch.labels, dtype=float) - 1.0  # {0,1} -> {-1,+1}
    return x, np.asarray(batch.labels, dtype=np.int64)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def loss(spec, params: np.ndarray, batch: DataShard | None = None) -> float:
    """Mean loss of `spec` at `params` over `batch` (ignored for quadratics)."""
    params = _check_params(spec, params)
    if spec.kind == "quadratic":
        diff = params - spec.center
        return 0.5 * float(diff @ spec.matrix @ diff)
    if spec.kind == "logistic_l2":
        x, y = _check_batch(spec, batch)
        margins = y * (x @ params)
        return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * spec.ridge * params @ params)
    if spec.kind == "mlp":
        if spec.widths[-1] == 1:
            x, y = _check_batch(spec, batch)
            logits = _mlp_forward(spec, params, x)[-1][:, 0]
            return float(np.mean(np.logaddexp(0.0, -y * logits)))
        x, y = _check_batch(spec, batch, signed=False)
        logits = _mlp_forward(spec, params, x)[-1]
        lse = _logsumexp(logits)
        return float(np.mean(lse - logits[np.arange(len(y)), y]))
    raise ValueError(f"unknown model kind {spec.kind!r}")


def grad(spec, params: np.ndarray, batch: DataShard | None = None) -> np.ndarray:
    """Exact analytic gradient of :func:`loss`."""
    params = _check_params(spec, params)
    if spec.kind == "quadratic":
        return spec.matrix @ (params - spec.center)
    if spec.kind == "logistic_l2":
        x, y = _check_batch(spec, batch)
        coef = -y * _sigmoid(-y * (x @ params))  # d/dz log(1 + e^{-yz})
        return x.T @ coef / x.shape[0] + spec.ridge * params
    if spec.kind == "mlp":
        return _mlp_grad(spec, params, batch)
    raise ValueError(f"unknown model kind {spec.kind!r}")


def _mlp_forward(spec: MlpModel, params: np.ndarray, x: np.ndarray):
    """Activations per layer; last entry is the (n, 1) pre-activation logit."""
    acts = [x]
    layers = spec.unpack(params)
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        acts.append(z if i == len(layers) - 1 else np.tanh(z))
    return acts


def _logsumexp(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return (zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True)))[:, 0]


def _mlp_grad(spec: MlpModel, params: np.ndarray, batch: DataShard) -> np.ndarray:
    signed = spec.widths[-1] == 1
    x, y = _check_batch(spec, batch, signed=signed)
    n = x.shape[0]
    acts = _mlp_forward(spec, params, x)
    layers = spec.unpack(params)
    if signed:
        # dL/dlogit for mean logistic loss.
        delta = (-y * _sigmoid(-y * acts[-1][:, 0]) / n)[:, None]
    else:
        z = acts[-1]
        probs = np.exp(z - z.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), y] -= 1.0
        delta = probs / n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((delta.T @ acts[i], delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w) * (1.0 - acts[i] ** 2)  # tanh'
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
    return flat


def convexity_constants(spec, data: DataShard | None = None) -> tuple[float, float]:
    """Certified (mu, L) for strongly convex model kinds.

    Quadratics use the exact eigenvalue range of the curvature matrix.
    Logistic models return (ridge, ridge + lambda_max(X^T X / n) / 4) with
    the top eigenvalue found by power iteration on the Gram matrix.
    """
    if spec.kind == "quadratic":
        eigs = np.linalg.eigvalsh(spec.matrix)
        return float(eigs[0]), float(eigs[-1])
    if spec.kind == "logistic_l2":
        if data is None or data.n == 0:
            raise ValueError("logistic constants require the design matrix")
        gram = data.features.T @ data.features / data.n
        lam_max = _power_iteration(gram)
        return float(spec.ridge), float(spec.ridge + 0.25 * lam_max)
    raise ValueError(f"convexity constants undefined for model kind {spec.kind!r}")


def _power_iteration(mat: np.ndarray, iters: int = 500, tol: float = 1e-14) -> float:
    v = np.ones(mat.shape[0]) / np.sqrt(mat.shape[0])
    lam = 0.0
    for _ in range(iters):
        mv = mat @ v
        norm = np.linalg.norm(mv)
        if norm == 0.0:
            return 0.0
        v = mv / norm
        lam_new = float(v @ mat @ v)
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam


def predict(spec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Predicted integer labels for classification kinds."""
    params = _check_params(spec, params)
    if spec.kind == "logistic_l2":
        scores = features @ params
    elif spec.kind == "mlp":
        logits = _mlp_forward(spec, params, features)[-1]
        if logits.shape[1] > 1:
            return np.argmax(logits, axis=1)
        scores = logits[:, 0]
    else:
        raise ValueError(f"prediction undefined for model kind {spec.kind!r}")
    return (scores > 0.0).astype(np.int64)


def accuracy(spec, params: np.ndarray, shard: DataShard) -> float:
    return float(np.mean(predict(spec, params, shard.features) == shard.labels))


def random_quadratic(
    dim: int, eig_range: tuple[float, float], center_scale: float, rng: np.random.Generator
) -> QuadraticModel:
    """Random SPD quadratic: eigenvalues uniform in `eig_range`, Gaussian center."""
    lo, hi = eig_range
    if not 0 < lo <= hi:
        raise ValueError("eigenvalue range must satisfy 0 < lo <= hi")
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))  # fix the sign convention
    eigs = rng.uniform(lo, hi, size=dim)
    matrix = (q * eigs) @ q.T
    matrix = 0.5 * (matrix + matrix.T)
    center = center_scale * rng.normal(size=dim) / np.sqrt(dim)
    return QuadraticModel(matrix=matrix, center=center)


def quadratic_ensemble(
    n_clients: int,
    dim: int,
    eig_range: tuple[float, float] = (0.5, 2.0),
    center_scale: float = 1.0,
    seed: int = 0,
) -> list:
    """Per-client random quadratics; client k's spec depends only on (seed, k)."""
    return [
        random_quadratic(dim, eig_range, center_scale, substream(seed, MODEL_GEN, k))
        for k in range(n_clients)
    ]
