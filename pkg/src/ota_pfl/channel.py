"""Analog over-the-air gradient aggregation.

Models the uplink of a federated edge round: each client modulates its
gradient entry-by-entry onto a shared set of orthonormal baseband
waveforms, all clients transmit simultaneously, the superposed signal
picks up per-client flat fading plus additive Gaussian receiver noise,
and a matched-filter bank recovers the (distorted) aggregated gradient

    g_t = (1/K) * sum_k h_k * grad_k + xi_t.

Two equivalent computation paths are provided: ``waveform`` walks through
the full modulate / superpose / matched-filter chain, ``vector`` applies
the equation above directly.  Both are pure functions of an explicit
:class:`ChannelRealization`, so they agree per coordinate and are safe to
call concurrently.

Conventions:
  - ``noise_var`` is the variance of xi_t per *output* coordinate, i.e.
    after matched filtering and the 1/K receiver normalization.  In the
    waveform path the noise is synthesized in signal space (pre-scaled by
    K) so that both paths produce the same aggregate.
  - Transmit power is assumed to precompensate large-scale path loss; it
    therefore never scales the update and only enters the theory module's
    error-floor expressions.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import CHANNEL, substream

logger = logging.getLogger(__name__)

BASIS_KINDS = ("identity", "hadamard", "fourier")
FADING_KINDS = ("rayleigh", "constant", "gaussian_abs")

# Rayleigh with mean mu has variance (4/pi - 1) * mu^2.
_RAYLEIGH_VAR_FACTOR = 4.0 / math.pi - 1.0


@dataclass
class WaveformBasis:
    """Discretized orthonormal waveform set; row i is u_i sampled at S points."""

    dimension: int
    samples_per_symbol: int
    basis: np.ndarray  # (dimension, samples_per_symbol)

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=float)
        if self.basis.shape != (self.dimension, self.samples_per_symbol):
            raise ValueError(
                f"basis shape {self.basis.shape} does not match "
                f"({self.dimension}, {self.samples_per_symbol})"
            )
        if self.samples_per_symbol < self.dimension:
            raise ValueError(
                f"need at least as many samples as dimensions "
                f"({self.samples_per_symbol} < {self.dimension})"
            )

    def gram_error(self) -> float:
        """Max absolute deviation of the row Gram matrix from identity."""
        gram = self.basis @ self.basis.T
        return float(np.max(np.abs(gram - np.eye(self.dimension))))


@dataclass
class ChannelModel:
    """Fading/noise description of the multiple-access uplink.

    ``fading_mean``/``fading_var`` parametrize the per-client fading gain
    h_k.  For ``rayleigh`` the scale is derived from the mean and the
    implied variance overrides whatever the caller supplied; ``constant``
    has zero variance by definition; ``gaussian_abs`` draws |N(mean, var)|
    and its effective moments are exposed via :meth:`fading_moments`.
    """

    kind: str = "rayleigh"
    fading_mean: float = 1.0
    fading_var: float = 0.0
    noise_var: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in FADING_KINDS:
            raise ValueError(f"unknown fading kind {self.kind!r}, expected one of {FADING_KINDS}")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        if self.power <= 0:
            raise ValueError("power must be positive")
        if self.kind == "rayleigh":
            implied = _RAYLEIGH_VAR_FACTOR * self.fading_mean**2
            if self.fading_var and not math.isclose(self.fading_var, implied, rel_tol=1e-9):
                logger.info(
                    "rayleigh fading variance is determined by the mean; "
                    "ignoring supplied %.6g in favor of %.6g",
                    self.fading_var,
                    implied,
                )
            self.fading_var = implied
        elif self.kind == "constant":
            if self.fading_var:
                logger.info("constant fading has zero variance; ignoring supplied %.6g", self.fading_var)
            self.fading_var = 0.0
        elif self.fading_var < 0:
            raise ValueError("fading_var must be nonnegative")

    def fading_moments(self) -> tuple[float, float]:
        """Exact (mean, variance) of the fading gain distribution."""
        if self.kind in ("rayleigh", "constant"):
            return self.fading_mean, self.fading_var
        # folded normal |N(mu, sigma^2)|
        mu, var = self.fading_mean, self.fading_var
        if var == 0.0:
            return abs(mu), 0.0
        sigma = math.sqrt(var)
        mean = sigma * math.sqrt(2.0 / math.pi) * math.exp(-mu * mu / (2.0 * var)) + mu * math.erf(
            mu / (sigma * math.sqrt(2.0))
        )
        return mean, mu * mu + var - mean * mean


@dataclass
class ChannelRealization:
    """One round's channel draw: per-client fadings and the output noise vector."""

    round_index: int
    fadings: np.ndarray  # (K,)
    noise: np.ndarray  # (d,)

    def __post_init__(self):
        self.fadings = np.asarray(self.fadings, dtype=float)
        self.noise = np.asarray(self.noise, dtype=float)


def make_basis(d: int, samples: int, kind: str = "identity") -> WaveformBasis:
    """Construct an orthonormal waveform basis of `d` rows over `samples` points.

    ``identity`` embeds the canonical basis, ``hadamard`` uses normalized
    Sylvester-Hadamard rows (samples must be a power of two), ``fourier``
    uses the real trigonometric basis.  All are orthonormal by
    construction; ``fourier`` is exact up to floating-point summation.
    """
    if d < 1 or samples < 1:
        raise ValueError("d and samples must be positive")
    if samples < d:
        raise ValueError(f"need samples >= d for orthogonality ({samples} < {d})")
    if kind == "identity":
        mat = np.eye(d, samples)
    elif kind == "hadamard":
        if samples & (samples - 1):
            raise ValueError(f"hadamard basis requires a power-of-two sample count, got {samples}")
        had = np.ones((1, 1))
        while had.shape[0] < samples:
            had = np.block([[had, had], [had, -had]])
        mat = had[:d] / math.sqrt(samples)
    elif kind == "fourier":
        mat = _fourier_rows(d, samples)
    else:
        raise ValueError(f"unknown basis kind {kind!r}, expected one of {BASIS_KINDS}")
    return WaveformBasis(dimension=d, samples_per_symbol=samples, basis=mat)


def _fourier_rows(d: int, samples: int) -> np.ndarray:
    """First d rows of the real DFT orthonormal basis on `samples` points."""
    n = np.arange(samples)
    rows = [np.full(samples, 1.0 / math.sqrt(samples))]
    k = 1
    while len(rows) < d:
        ang = 2.0 * math.pi * k * n / samples
        if 2 * k == samples:  # Nyquist row: cos(pi n) = (-1)^n with norm sqrt(S)
            rows.append(np.cos(ang) / math.sqrt(samples))
        else:
            rows.append(math.sqrt(2.0 / samples) * np.cos(ang))
            if len(rows) < d:
                rows.append(math.sqrt(2.0 / samples) * np.sin(ang))
        k += 1
    return np.vstack(rows[:d])


def modulate(gradient: np.ndarray, basis: WaveformBasis) -> np.ndarray:
    """Map a d-vector onto the analog signal x(s) = <u(s), gradient>."""
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != (basis.dimension,):
        raise ValueError(f"gradient length {gradient.shape} does not match basis dimension {basis.dimension}")
    return gradient @ basis.basis


def demodulate(signal: np.ndarray, basis: WaveformBasis) -> np.ndarray:
    """Matched-filter bank: correlate the signal with every basis row."""
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (basis.samples_per_symbol,):
        raise ValueError(
            f"signal length {signal.shape} does not match basis sample count {basis.samples_per_symbol}"
        )
    return basis.basis @ signal


def sample_realization(
    model: ChannelModel, n_clients: int, d: int, round_index: int, seed: int
) -> ChannelRealization:
    """Draw one round's fadings and noise, deterministic in (seed, round_index)."""
    if n_clients < 1 or d < 1:
        raise ValueError("n_clients and d must be positive")
    rng = substream(seed, CHANNEL, round_index)
    if model.kind == "constant":
        fadings = np.full(n_clients, model.fading_mean)
    elif model.kind == "rayleigh":
        scale = model.fading_mean * math.sqrt(2.0 / math.pi)
        fadings = rng.rayleigh(scale, size=n_clients)
    else:  # gaussian_abs
        fadings = np.abs(rng.normal(model.fading_mean, math.sqrt(model.fading_var), size=n_clients))
    if model.noise_var > 0.0:
        noise = rng.normal(0.0, math.sqrt(model.noise_var), size=d)
    else:
        noise = np.zeros(d)
    return ChannelRealization(round_index=round_index, fadings=fadings, noise=noise)


def aggregate_ota(
    gradients,
    realization: ChannelRealization,
    mode: str = "vector",
    basis: WaveformBasis | None = None,
) -> np.ndarray:
    """Aggregate client gradients through the analog channel.

    Returns (1/K) sum_k h_k grad_k + xi.  ``vector`` mode evaluates this
    directly; ``waveform`` mode modulates every gradient, superposes the
    faded signals, injects receiver noise in signal space, matched-filters
    and normalizes.  Both agree to ~1e-12 per coordinate.
    """
    grads = np.asarray(gradients, dtype=float)
    if grads.ndim != 2:
        raise ValueError("gradients must be a list of equal-length vectors")
    n_clients, d = grads.shape
    if realization.fadings.shape != (n_clients,):
        raise ValueError(
            f"realization has {realization.fadings.shape[0]} fadings for {n_clients} gradients"
        )
    if realization.noise.shape != (d,):
        raise ValueError(f"realization noise length {realization.noise.shape[0]} != gradient length {d}")
    if mode == "vector":
        return (realization.fadings @ grads) / n_clients + realization.noise
    if mode != "waveform":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if basis is None:
        raise ValueError("waveform mode requires a basis")
    if basis.dimension != d:
        raise ValueError(f"basis dimension {basis.dimension} does not match gradient length {d}")
    signal = realization.fadings @ (grads @ basis.basis)
    # Receiver-referred noise: pre-scale by K so the 1/K normalization below
    # leaves exactly the realization's noise vector, matching vector mode.
    signal = signal + modulate(n_clients * realization.noise, basis)
    return demodulate(signal, basis) / n_clients
