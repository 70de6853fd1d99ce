"""Closed-form convergence predictions and their empirical validation.

For strongly convex client objectives trained through the noisy analog
aggregate, the expected global error contracts geometrically down to a
noise floor:

    E||w_t - w*||^2  <=  c^t r0^2
        + lr^2/(1-c) * ( fading_var * diam * Lmax^2 (2+diam) / K
                         + d * noise_var / (P^2 K^2) )

with contraction factor

    c = 1 - 2 lr mu_h mu L/(mu+L) + lr^2 fading_var Lmax^2 (1+2 diam)/K

valid whenever the global step size stays below :func:`max_global_lr`.
The personal models obey a coupled one-step recursion
(:func:`personal_recursion_bound`) driven by the global error, and under a
decaying local-rate schedule their error is dominated by any envelope g(t)
satisfying g(t+1)/g(t) >= 1 - g(t)/A (:func:`check_rate_envelope`).

The validation drivers at the bottom run seeded Monte-Carlo ensembles on
quadratic client sets and compare the measured trajectories against these
expressions at 3-standard-error tolerance.  The set diameter is measured
from the simulated ensemble (max observed parameter norm, doubled), with
step sizes chosen from a conservative a-priori diameter so the comparison
stays honest.
"""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import models
from .channel import ChannelModel
from .training import EnsembleResult, TrainerConfig, run_ensemble

MANN_KENDALL_Z_05 = 1.6448536269514722  # one-sided 5% normal quantile


@dataclass
class TheoryConstants:
    """Problem constants feeding every closed-form expression."""

    mu: float  # strong convexity shared by all clients
    smoothness: float  # gradient Lipschitz constant of the global objective
    smoothness_max: float  # max per-client gradient Lipschitz constant
    diameter: float  # diameter of the compact set containing all iterates
    optima_radius: float  # max_k ||z_k* - w*||
    r0_sq: float  # squared distance of the initial global model from w*
    fading_mean: float
    fading_var: float
    noise_var: float
    power: float
    dim: int
    n_clients: int

    def __post_init__(self):
        if self.mu <= 0 or self.smoothness < self.mu:
            raise ValueError("need 0 < mu <= smoothness")
        for name in ("diameter", "optima_radius", "r0_sq", "fading_var", "noise_var"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.fading_mean <= 0 or self.power <= 0:
            raise ValueError("fading_mean and power must be positive")


@dataclass
class ClientOptima:
    """Global, per-client, and personal minimizers of the bi-level objective."""

    w_star: np.ndarray
    z_star: np.ndarray  # (K, d): per-client local minimizers
    v_star: np.ndarray  # (K, d): minimizers of the personal objective at w_star


def max_global_lr(c: TheoryConstants) -> float:
    """Largest admissible global step size for geometric contraction."""
    first = 2.0 / (c.fading_mean * (c.mu + c.smoothness))
    if c.fading_var == 0.0:
        return first
    second = (
        2.0
        * c.fading_mean
        * c.mu
        * c.smoothness
        * c.n_clients
        / (c.fading_var * c.smoothness_max**2 * (1.0 + 2.0 * c.diameter) * (c.mu + c.smoothness))
    )
    return min(first, second)


def contraction_factor(c: TheoryConstants, global_lr: float) -> float:
    """Per-round decay factor of the expected squared global error."""
    if global_lr <= 0:
        raise ValueError("global_lr must be positive")
    value = (
        1.0
        - 2.0 * global_lr * c.fading_mean * c.mu * c.smoothness / (c.mu + c.smoothness)
        + global_lr**2 * c.fading_var * c.smoothness_max**2 * (1.0 + 2.0 * c.diameter) / c.n_clients
    )
    if not 0.0 < value < 1.0:
        raise ValueError(
            f"contraction factor {value:.6g} outside (0, 1); "
            f"global_lr {global_lr:.6g} violates the step-size condition "
            f"(max admissible {max_global_lr(c):.6g})"
        )
    return value


def error_floor(c: TheoryConstants, global_lr: float) -> float:
    """Steady-state term of the global error bound."""
    factor = contraction_factor(c, global_lr)
    return (
        global_lr**2
        / (1.0 - factor)
        * (
            c.fading_var * c.diameter * c.smoothness_max**2 * (2.0 + c.diameter) / c.n_clients
            + c.dim * c.noise_var / (c.power**2 * c.n_clients**2)
        )
    )


def global_error_bound(c: TheoryConstants, global_lr: float, t) -> np.ndarray | float:
    """Expected squared global error bound at round(s) t."""
    factor = contraction_factor(c, global_lr)
    floor = error_floor(c, global_lr)
    t_arr = np.asarray(t)
    values = factor**t_arr * c.r0_sq + floor
    return float(values) if np.isscalar(t) else values


def personal_recursion_bound(
    prev: float, w_err: float, c: TheoryConstants, lam: float, local_lr: float
) -> float:
    """One step of the personal-model error recursion.

    Maps a bound `prev` on E||v_t - v*||^2 and a bound `w_err` on
    E||w_t - w*||^2 to a bound on E||v_{t+1} - v*||^2.
    """
    if prev < 0 or w_err < 0:
        raise ValueError("prev and w_err must be nonnegative")
    if local_lr * c.mu > 1.0:
        warnings.warn(
            f"local_lr {local_lr:.6g} exceeds 1/mu; the personal recursion loses contraction",
            stacklevel=2,
        )
    m = c.optima_radius
    return (
        (1.0 - c.mu * local_lr) * prev
        + local_lr**2 * lam**2 * m**2
        + local_lr**2 * lam**2 * w_err
        + 2.0 * local_lr**2 * lam**2 * m * math.sqrt(w_err)
        + 2.0 * local_lr * lam * math.sqrt(prev * w_err)
    )


def personal_bound_curve(
    v0_err: float, w_err_curve: np.ndarray, c: TheoryConstants, lam: float, local_lr: float
) -> np.ndarray:
    """Iterate the personal recursion along a global-error envelope."""
    out = np.empty(len(w_err_curve))
    out[0] = v0_err
    for t in range(len(w_err_curve) - 1):
        out[t + 1] = personal_recursion_bound(out[t], float(w_err_curve[t]), c, lam, local_lr)
    return out


def envelope_coefficient(envelope: np.ndarray) -> float:
    """Largest A with g(t+1)/g(t) >= 1 - g(t)/A along the whole envelope."""
    g = np.asarray(envelope, dtype=float)
    if np.any(g <= 0):
        raise ValueError("envelope must be positive")
    diffs = g[:-1] - g[1:]
    if np.any(diffs <= 0):
        raise ValueError("envelope must be strictly decreasing")
    return float(np.min(g[:-1] ** 2 / diffs))


def bound_envelope(c: TheoryConstants, global_lr: float, rounds: int) -> tuple[np.ndarray, float]:
    """Global error bound as a rate envelope, with its admissible coefficient.

    Returns (g, A) where g(t) = c^t r0^2 + floor and A is the largest value
    satisfying g(t+1)/g(t) >= 1 - g(t)/A over the horizon.  A is evaluated
    from the geometric form directly, so it stays exact even where the
    transient term falls below floating-point resolution of the floor.
    """
    factor = contraction_factor(c, global_lr)
    floor = error_floor(c, global_lr)
    transients = c.r0_sq * factor ** np.arange(rounds + 1)
    g = floor + transients
    # g(t) - g(t+1) = transient(t) * (1 - factor), cancellation-free.
    ratios = (floor + transients[:-1]) ** 2 / (transients[:-1] * (1.0 - factor))
    return g, float(np.min(ratios))


def envelope_lr_schedule(envelope: np.ndarray, coeff: float, mu: float):
    """Local-rate schedule local_lr(t) = 2 g(t) / (A mu)."""
    g = np.asarray(envelope, dtype=float)

    def schedule(t: int) -> float:
        return 2.0 * g[min(t, len(g) - 1)] / (coeff * mu)

    return schedule


@dataclass
class RateCheck:
    """Outcome of fitting a trajectory under a decaying envelope."""

    c_fit: float
    holds: bool
    trend_z: float


def check_rate_envelope(
    trajectory: np.ndarray,
    envelope: np.ndarray,
    coeff: float,
    mu: float,
    local_lr_schedule=None,
) -> RateCheck:
    """Fit C = max_t trajectory/envelope and test the ratio for upward drift.

    `holds` requires a finite fit and no significant (5%, one-sided
    Mann-Kendall) upward trend in the ratio sequence.  When the schedule
    used to generate the trajectory is supplied, it is verified to equal
    2 g(t) / (A mu).

    The envelope must be positive and decreasing; a tail that has
    saturated at its floor within floating-point resolution is accepted
    as non-increasing.
    """
    traj = np.asarray(trajectory, dtype=float)
    g = np.asarray(envelope, dtype=float)
    if traj.shape != g.shape:
        raise ValueError(f"trajectory length {traj.shape} does not match envelope {g.shape}")
    if np.any(g <= 0):
        raise ValueError("envelope must be positive")
    if np.any(g[1:] > g[:-1]) or g[-1] >= g[0]:
        raise ValueError("envelope must be decreasing")
    if local_lr_schedule is not None:
        expected = 2.0 * g / (coeff * mu)
        actual = np.array([float(local_lr_schedule(t)) for t in range(len(g))])
        if not np.allclose(actual, expected, rtol=1e-9, atol=0.0):
            raise ValueError("local-rate schedule does not match 2 g(t) / (A mu)")
    ratio = traj / g
    c_fit = float(np.max(ratio))
    trend_z = _mann_kendall_z(ratio)
    holds = bool(math.isfinite(c_fit) and trend_z <= MANN_KENDALL_Z_05)
    return RateCheck(c_fit=c_fit, holds=holds, trend_z=trend_z)


def _mann_kendall_z(x: np.ndarray) -> float:
    """Mann-Kendall trend statistic, normal-approximated, tie-corrected."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 3:
        return 0.0
    s = 0.0
    for i in range(n - 1):
        s += np.sign(x[i + 1 :] - x[i]).sum()
    _, counts = np.unique(x, return_counts=True)
    ties = counts[counts > 1]
    var = (n * (n - 1) * (2 * n + 5) - np.sum(ties * (ties - 1) * (2 * ties + 5))) / 18.0
    if var <= 0:
        return 0.0
    if s > 0:
        return float((s - 1.0) / math.sqrt(var))
    if s < 0:
        return float((s + 1.0) / math.sqrt(var))
    return 0.0


def compute_optima(specs: list, lam: float, shards: list | None = None) -> ClientOptima:
    """Global, local, and personal minimizers of the ensemble.

    Quadratics use closed forms; other convex kinds are solved by
    deterministic full-gradient descent to gradient norm below 1e-10.
    """
    if all(s.kind == "quadratic" for s in specs):
        mats = np.stack([s.matrix for s in specs])
        centers = np.stack([s.center for s in specs])
        w_star = np.linalg.solve(mats.sum(axis=0), np.einsum("kij,kj->i", mats, centers))
        z_star = centers.copy()
        dim = centers.shape[1]
        v_star = np.stack(
            [
                np.linalg.solve(s.matrix + lam * np.eye(dim), s.matrix @ s.center + lam * w_star)
                for s in specs
            ]
        )
        return ClientOptima(w_star=w_star, z_star=z_star, v_star=v_star)
    if any(s.kind == "mlp" for s in specs):
        raise ValueError("optima are only defined for convex model kinds")
    if shards is None:
        raise ValueError("non-quadratic optima require the client shards")
    consts = [models.convexity_constants(s, d) for s, d in zip(specs, shards)]
    mu = min(m for m, _ in consts)
    lip = max(l for _, l in consts)

    def mean_grad(w):
        return np.mean([models.grad(s, w, d) for s, d in zip(specs, shards)], axis=0)

    dim = specs[0].dim
    w_star = _descend(mean_grad, np.zeros(dim), mu, lip)
    z_star, v_star = [], []
    for spec, shard, (mu_k, lip_k) in zip(specs, shards, consts):
        z_star.append(_descend(lambda w: models.grad(spec, w, shard), np.zeros(dim), mu_k, lip_k))
        v_star.append(
            _descend(
                lambda v: models.grad(spec, v, shard) + lam * (v - w_star),
                w_star.copy(),
                mu_k + lam,
                lip_k + lam,
            )
        )
    return ClientOptima(w_star=w_star, z_star=np.stack(z_star), v_star=np.stack(v_star))


def _descend(grad_fn, x0, mu, lip, tol=1e-10, max_iter=500_000):
    x = np.asarray(x0, dtype=float).copy()
    step = 2.0 / (mu + lip)
    for _ in range(max_iter):
        g = grad_fn(x)
        if np.linalg.norm(g) < tol:
            return x
        x -= step * g
    raise RuntimeError(f"gradient descent did not reach tolerance {tol:g} in {max_iter} iterations")


def safe_radius(optima: ClientOptima, w0: np.ndarray) -> float:
    """A-priori ball radius provably containing w0, w*, all z_k* and v_k*."""
    r0 = float(np.linalg.norm(np.asarray(w0) - optima.w_star))
    reach = float(np.linalg.norm(optima.w_star)) + r0
    z_max = float(np.max(np.linalg.norm(optima.z_star, axis=1)))
    return 2.0 * max(reach, z_max)


def ensemble_constants(
    specs: list,
    channel: ChannelModel,
    w0: np.ndarray,
    *,
    shards: list | None = None,
    lam: float = 0.0,
    diameter: float | None = None,
    optima: ClientOptima | None = None,
) -> TheoryConstants:
    """Assemble :class:`TheoryConstants` for a convex client ensemble.

    With ``diameter=None`` a conservative a-priori diameter (twice the
    :func:`safe_radius` ball) is used; validation drivers later tighten it
    to twice the largest norm actually observed.
    """
    if optima is None:
        optima = compute_optima(specs, lam, shards)
    consts = [models.convexity_constants(s, d) for s, d in zip(specs, shards or [None] * len(specs))]
    mu = min(m for m, _ in consts)
    smoothness_max = max(l for _, l in consts)
    if all(s.kind == "quadratic" for s in specs):
        mean_mat = np.mean(np.stack([s.matrix for s in specs]), axis=0)
        smoothness = float(np.linalg.eigvalsh(mean_mat)[-1])
    else:
        # Mean of per-client constants upper-bounds the global one.
        smoothness = float(np.mean([l for _, l in consts]))
    smoothness = max(smoothness, mu)
    fading_mean, fading_var = channel.fading_moments()
    w0 = np.asarray(w0, dtype=float)
    if diameter is None:
        diameter = 2.0 * safe_radius(optima, w0)
    return TheoryConstants(
        mu=mu,
        smoothness=smoothness,
        smoothness_max=smoothness_max,
        diameter=diameter,
        optima_radius=float(np.max(np.linalg.norm(optima.z_star - optima.w_star, axis=1))),
        r0_sq=float(np.sum((w0 - optima.w_star) ** 2)),
        fading_mean=fading_mean,
        fading_var=fading_var,
        noise_var=channel.noise_var,
        power=channel.power,
        dim=specs[0].dim,
        n_clients=len(specs),
    )


# ---------------------------------------------------------------------------
# Monte-Carlo validation drivers
# ---------------------------------------------------------------------------


@dataclass
class GlobalBoundReport:
    """Measured-vs-predicted global error for one quadratic ensemble."""

    constants: TheoryConstants  # measured-diameter constants (used for the bound)
    prior_constants: TheoryConstants  # a-priori constants (used to pick the step size)
    optima: ClientOptima
    global_lr: float
    local_lr: float
    lam: float
    contraction: float
    bound: np.ndarray
    ensemble: EnsembleResult
    passed: bool

    @property
    def mse(self) -> np.ndarray:
        return self.ensemble.w_mean

    @property
    def stderr(self) -> np.ndarray:
        return self.ensemble.w_stderr


def default_local_lr(prior: TheoryConstants, lam: float) -> float:
    """A local rate inside both the step-size condition and stability."""
    return min(0.5 * max_global_lr(prior), 0.5 / (prior.smoothness_max + lam))


def validate_global_bound(
    specs: list,
    channel: ChannelModel,
    *,
    rounds: int = 200,
    n_seeds: int = 200,
    lr_frac: float = 0.5,
    global_lr: float | None = None,
    w0: np.ndarray | None = None,
    lam: float = 1.0,
    local_lr: float | None = None,
    seed0: int = 0,
    tolerance_se: float = 3.0,
) -> GlobalBoundReport:
    """Monte-Carlo check that the mean squared global error obeys the bound.

    Runs `n_seeds` seeded trajectories (full batch, one personal step per
    round so the personal recursion applies verbatim), measures the set
    diameter from the observed iterates, and tests
    mse(t) <= bound(t) + tolerance_se * stderr(t) for every t.  The step
    size defaults to `lr_frac` times the admissible maximum.
    """
    optima = compute_optima(specs, lam)
    w0 = np.zeros(specs[0].dim) if w0 is None else np.asarray(w0, dtype=float)
    prior = ensemble_constants(specs, channel, w0, lam=lam, optima=optima)
    if global_lr is None:
        global_lr = lr_frac * max_global_lr(prior)
    if local_lr is None:
        local_lr = default_local_lr(prior, lam)
    cfg = TrainerConfig(
        n_clients=len(specs),
        rounds=rounds,
        global_lr=global_lr,
        local_lr=local_lr,
        lam=lam,
        local_steps=1,
        algorithm="personalized_aota",
        projection_radius=prior.diameter / 2.0,
        record_metrics=False,
    )
    ensemble = run_ensemble(
        cfg,
        specs,
        None,
        channel,
        range(seed0, seed0 + n_seeds),
        w0=w0,
        w_star=optima.w_star,
        v_star=optima.v_star,
    )
    measured = 2.0 * max(
        ensemble.max_param_norm,
        float(np.max(np.linalg.norm(optima.z_star, axis=1))),
        float(np.linalg.norm(optima.w_star)),
    )
    constants = replace(prior, diameter=min(measured, prior.diameter))
    bound = global_error_bound(constants, global_lr, np.arange(rounds + 1))
    passed = bool(np.all(ensemble.w_mean <= bound + tolerance_se * ensemble.w_stderr))
    return GlobalBoundReport(
        constants=constants,
        prior_constants=prior,
        optima=optima,
        global_lr=global_lr,
        local_lr=local_lr,
        lam=lam,
        contraction=contraction_factor(constants, global_lr),
        bound=bound,
        ensemble=ensemble,
        passed=passed,
    )


@dataclass
class PersonalBoundReport:
    """Measured personal-model error against the coupled recursion."""

    lam: float
    local_lr: float
    recursion: np.ndarray  # (rounds+1, K)
    v_mse: np.ndarray
    v_stderr: np.ndarray
    passed: bool


def validate_personal_bound(report: GlobalBoundReport, tolerance_se: float = 3.0) -> PersonalBoundReport:
    """Check the simulated personal error against the recursion driven by the bound."""
    ens = report.ensemble
    if ens.v_mean is None:
        raise ValueError("ensemble was run without personal-model tracking")
    rounds_plus1, n_clients = ens.v_mean.shape
    recursion = np.empty((rounds_plus1, n_clients))
    for k in range(n_clients):
        # Personal models start at w0 deterministically, so the seed-average
        # at t=0 is the exact initial error ||w0 - v_k*||^2.
        v0_err = float(ens.v_mean[0, k])
        recursion[:, k] = personal_bound_curve(
            v0_err, report.bound, report.constants, report.lam, report.local_lr
        )
    passed = bool(np.all(ens.v_mean <= recursion + tolerance_se * ens.v_stderr))
    return PersonalBoundReport(
        lam=report.lam,
        local_lr=report.local_lr,
        recursion=recursion,
        v_mse=ens.v_mean,
        v_stderr=ens.v_stderr,
        passed=passed,
    )


@dataclass
class RateEnvelopeReport:
    """Per-client rate-envelope fits under the decaying local-rate schedule."""

    coeff: float
    envelope: np.ndarray
    checks: list
    c_fit_max: float
    all_hold: bool
    lr_start: float


def validate_rate_envelope(
    specs: list,
    channel: ChannelModel,
    *,
    rounds: int = 200,
    n_seeds: int = 100,
    lr_frac: float = 0.5,
    global_lr: float | None = None,
    w0: np.ndarray | None = None,
    lam: float = 1.0,
    seed0: int = 0,
) -> RateEnvelopeReport:
    """Run the decaying-local-rate schedule and fit the personal error envelope.

    The envelope is the (a-priori) global error bound; its admissible
    coefficient A is computed from the curve, and the personal models are
    trained with local_lr(t) = 2 g(t) / (A mu).  The configuration must
    leave the initial local rate inside the stable region.
    """
    optima = compute_optima(specs, lam)
    w0 = np.zeros(specs[0].dim) if w0 is None else np.asarray(w0, dtype=float)
    prior = ensemble_constants(specs, channel, w0, lam=lam, optima=optima)
    if global_lr is None:
        global_lr = lr_frac * max_global_lr(prior)
    envelope, coeff = bound_envelope(prior, global_lr, rounds)
    schedule = envelope_lr_schedule(envelope, coeff, prior.mu)
    lr_start = schedule(0)
    if lr_start * (prior.smoothness_max + lam) > 1.8:
        raise ValueError(
            f"initial local rate {lr_start:.4g} is unstable for this ensemble "
            f"(needs <= {1.8 / (prior.smoothness_max + lam):.4g}); "
            "increase the error floor or shrink r0"
        )
    if lr_start * prior.mu > 1.0:
        raise ValueError(f"initial local rate {lr_start:.4g} exceeds 1/mu")
    cfg = TrainerConfig(
        n_clients=len(specs),
        rounds=rounds,
        global_lr=global_lr,
        local_lr=schedule,
        lam=lam,
        local_steps=1,
        algorithm="personalized_aota",
        projection_radius=prior.diameter / 2.0,
        record_metrics=False,
    )
    ensemble = run_ensemble(
        cfg,
        specs,
        None,
        channel,
        range(seed0, seed0 + n_seeds),
        w0=w0,
        w_star=optima.w_star,
        v_star=optima.v_star,
    )
    checks = [
        check_rate_envelope(ensemble.v_mean[:, k], envelope, coeff, prior.mu, schedule)
        for k in range(len(specs))
    ]
    return RateEnvelopeReport(
        coeff=coeff,
        envelope=envelope,
        checks=checks,
        c_fit_max=max(c.c_fit for c in checks),
        all_hold=all(c.holds for c in checks),
        lr_start=lr_start,
    )


def export_bound_curves(report: GlobalBoundReport, path) -> None:
    """Write the trajectory-vs-bound comparison in the metrics CSV schema."""
    from .training import MetricsTable

    table = MetricsTable(
        header={
            "n_clients": report.constants.n_clients,
            "dim": report.constants.dim,
            "global_lr": report.global_lr,
            "lambda": report.lam,
            "local_lr": report.local_lr,
            "n_seeds": report.ensemble.n_seeds,
            "diameter": report.constants.diameter,
            "passed": report.passed,
        },
        columns=(
            "round",
            "global_loss",
            "mean_personal_loss",
            "mean_personal_acc",
            "generic_acc",
            "w_dist_sq",
            "w_dist_stderr",
            "bound_t",
            "c_const",
            "eta_g_max",
        ),
    )
    lr_max = max_global_lr(report.constants)
    for t in range(len(report.bound)):
        table.append(
            round=t,
            w_dist_sq=float(report.ensemble.w_mean[t]),
            w_dist_stderr=float(report.ensemble.w_stderr[t]),
            bound_t=float(report.bound[t]),
            c_const=report.contraction,
            eta_g_max=lr_max,
        )
    table.write(path)
