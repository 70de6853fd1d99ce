"""The federated round loop: personalized A-OTA training plus OTA baselines.

One global round proceeds as: every client evaluates its local gradient at
the freshly received global model, personalized clients additionally run a
few proximal SGD steps on their private model, the gradients are
aggregated through the analog channel, and the server applies a plain
gradient step.  Personal models never leave the clients.

Randomness layout (all via :mod:`ota_pfl.seeding`):
  - channel draws:      (channel_seed, CHANNEL, round)
  - global-grad batch:  (seed, GLOBAL_BATCH, client_id, round)
  - personal batches:   (seed, LOCAL_BATCH, client_id, round), consumed
    sequentially across the local steps of that round.

Because every stream is keyed by client id and round, trajectories are
bit-reproducible under any client ordering or parallel schedule; the
aggregate itself is summed in client-id order.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .channel import ChannelModel, aggregate_ota, sample_realization
from .data import DataShard
from .seeding import GLOBAL_BATCH, LOCAL_BATCH, substream

ALGORITHMS = ("personalized_aota", "ota_fedavg", "ota_fedprox")

# Global-model norm beyond which the run is declared divergent.
DIVERGENCE_NORM = 1e12

METRIC_COLUMNS = (
    "round",
    "global_loss",
    "mean_personal_loss",
    "mean_personal_acc",
    "generic_acc",
    "w_dist_sq",
)


class DivergenceError(RuntimeError):
    """Raised when an iterate leaves the finite / norm-bounded regime."""

    def __init__(self, message: str, round_index: int, client_id: int | None = None):
        super().__init__(message)
        self.round_index = round_index
        self.client_id = client_id


@dataclass
class TrainerConfig:
    """Hyperparameters of one training run."""

    n_clients: int
    rounds: int
    global_lr: float
    local_lr: object = 0.01  # float or callable round -> rate
    lam: float = 1.0
    local_steps: int = 5
    batch_size: int | None = None  # None = full batch
    algorithm: str = "personalized_aota"
    mu_prox: float = 0.0
    seed: int = 0
    channel_seed: int | None = None  # defaults to seed
    projection_radius: float | None = None
    record_metrics: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}, expected one of {ALGORITHMS}")
        if self.n_clients < 1 or self.rounds < 0 or self.local_steps < 1:
            raise ValueError("n_clients and local_steps must be >= 1 and rounds >= 0")
        if self.global_lr <= 0:
            raise ValueError("global_lr must be positive")
        if not callable(self.local_lr) and self.local_lr <= 0:
            raise ValueError("local_lr must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive when set")
        if self.projection_radius is not None and self.projection_radius <= 0:
            raise ValueError("projection_radius must be positive when set")

    def local_lr_at(self, round_index: int) -> float:
        return float(self.local_lr(round_index)) if callable(self.local_lr) else float(self.local_lr)


@dataclass
class ClientState:
    """Client k's model spec, local shard and private personal model."""

    client_id: int
    spec: object
    shard: DataShard | None
    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)


@dataclass
class GlobalState:
    """Server-side state: current round, global model, per-round history."""

    round_index: int
    w: np.ndarray
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)


def personal_grad(spec, v: np.ndarray, w: np.ndarray, lam: float, batch=None) -> np.ndarray:
    """Gradient of the personal objective F_k(v) + lam/2 ||v - w||^2."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape != w.shape:
        raise ValueError(f"personal model shape {v.shape} does not match global {w.shape}")
    g = models.grad(spec, v, batch)
    return g + lam * (v - w) if lam != 0.0 else g


def _project(vec: np.ndarray, radius: float | None) -> np.ndarray:
    if radius is None:
        return vec
    norm = float(np.linalg.norm(vec))
    return vec * (radius / norm) if norm > radius else vec


def _draw_batch(shard: DataShard, batch_size: int | None, rng) -> DataShard | None:
    if shard is None or batch_size is None or batch_size >= shard.n:
        return shard
    return shard.subset(rng.choice(shard.n, size=batch_size, replace=False))


def personal_step(client: ClientState, w: np.ndarray, cfg: TrainerConfig, round_index: int) -> ClientState:
    """Run cfg.local_steps proximal SGD steps on the client's personal model."""
    v = client.v.copy()
    rate = cfg.local_lr_at(round_index)
    rng = None
    if cfg.batch_size is not None and client.shard is not None:
        rng = substream(cfg.seed, LOCAL_BATCH, client.client_id, round_index)
    for step in range(cfg.local_steps):
        batch = _draw_batch(client.shard, cfg.batch_size, rng)
        v -= rate * personal_grad(client.spec, v, w, cfg.lam, batch)
        v = _project(v, cfg.projection_radius)
        if not np.all(np.isfinite(v)):
            raise DivergenceError(
                f"personal model of client {client.client_id} became non-finite "
                f"at round {round_index}, local step {step}",
                round_index=round_index,
                client_id=client.client_id,
            )
    return replace(client, v=v)


def _transmit_gradient(client: ClientState, w: np.ndarray, cfg: TrainerConfig, round_index: int) -> np.ndarray:
    """Gradient the client uploads for the global update, evaluated at w.

    For ota_fedprox the local objective carries a proximal pull toward the
    round's anchor; with the gradient taken at the anchor itself (the
    freshly received w) that pull contributes exactly zero, so the upload
    coincides with ota_fedavg's.
    """
    batch = client.shard
    if cfg.batch_size is not None and client.shard is not None:
        rng = substream(cfg.seed, GLOBAL_BATCH, client.client_id, round_index)
        batch = _draw_batch(client.shard, cfg.batch_size, rng)
    return models.grad(client.spec, w, batch)


def global_round(
    state: GlobalState,
    clients: list[ClientState],
    channel: ChannelModel,
    cfg: TrainerConfig,
) -> tuple[GlobalState, list[ClientState]]:
    """Advance the system by one round; returns the new state and clients."""
    t = state.round_index
    order = sorted(range(len(clients)), key=lambda i: clients[i].client_id)
    grads = np.empty((len(clients), state.w.shape[0]))
    new_clients = list(clients)
    for i in order:
        client = clients[i]
        try:
            grads[i] = _transmit_gradient(client, state.w, cfg, t)
            if cfg.algorithm == "personalized_aota":
                new_clients[i] = personal_step(client, state.w, cfg, t)
        except DivergenceError:
            raise
        except Exception as exc:
            raise RuntimeError(f"client {client.client_id} failed at round {t}: {exc}") from exc
    realization = sample_realization(
        channel,
        len(clients),
        state.w.shape[0],
        t,
        cfg.channel_seed if cfg.channel_seed is not None else cfg.seed,
    )
    agg = aggregate_ota(grads[order], realization, mode="vector")
    w_new = _project(state.w - cfg.global_lr * agg, cfg.projection_radius)
    norm = float(np.linalg.norm(w_new))
    if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
        raise DivergenceError(
            f"global model diverged at round {t} (norm {norm:.3e})", round_index=t
        )
    history = state.history
    if cfg.record_metrics:
        row = {"round": t + 1, "global_loss": _global_loss(new_clients, w_new)}
        row["mean_personal_loss"] = (
            _mean_personal_loss(new_clients) if cfg.algorithm == "personalized_aota" else None
        )
        history = history + [row]
    return GlobalState(round_index=t + 1, w=w_new, history=history), new_clients


def _global_loss(clients, w) -> float:
    return float(np.mean([models.loss(c.spec, w, c.shard) for c in clients]))


def _mean_personal_loss(clients) -> float:
    return float(np.mean([models.loss(c.spec, c.v, c.shard) for c in clients]))


class MetricsTable:
    """Per-round metrics with a '#'-commented config header, serialized as CSV."""

    def __init__(self, header: dict | None = None, columns=METRIC_COLUMNS):
        self.header = dict(header or {})
        self.columns = tuple(columns)
        self.rows: list[dict] = []

    def append(self, **row):
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.rows])

    def to_text(self) -> str:
        lines = [f"# {key} = {_fmt_header_value(val)}" for key, val in self.header.items()]
        lines.append(",".join(self.columns))
        for row in self.rows:
            lines.append(",".join(_fmt_cell(row.get(col)) for col in self.columns))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        from .persist import atomic_write_text

        atomic_write_text(path, self.to_text())


def _fmt_header_value(val) -> str:
    if isinstance(val, float):
        return f"{val:.17g}"
    if isinstance(val, (list, tuple)):
        return "[" + ", ".join(_fmt_header_value(v) for v in val) + "]"
    return str(val)


def _fmt_cell(val) -> str:
    if val is None:
        return ""
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    return f"{float(val):.17g}"


@dataclass
class ExperimentResult:
    """Everything a run produces: final state, metrics and diagnostics."""

    state: GlobalState
    clients: list
    metrics: MetricsTable
    diverged: bool
    rounds_completed: int
    max_param_norm: float
    w_dist_sq: np.ndarray | None = None  # (rounds+1,)
    v_dist_sq: np.ndarray | None = None  # (rounds+1, K)


def init_clients(specs, shards, v0) -> list[ClientState]:
    if shards is None:
        shards = [None] * len(specs)
    if len(specs) != len(shards):
        raise ValueError(f"{len(specs)} specs for {len(shards)} shards")
    return [
        ClientState(client_id=k, spec=spec, shard=shard, v=np.array(v0[k], dtype=float))
        for k, (spec, shard) in enumerate(zip(specs, shards))
    ]


def run_experiment(
    cfg: TrainerConfig,
    specs: list,
    shards: list | None,
    channel: ChannelModel,
    *,
    w0: np.ndarray | None = None,
    v0=None,
    w_star: np.ndarray | None = None,
    v_star: np.ndarray | None = None,
    test_shards: list | None = None,
) -> ExperimentResult:
    """Run cfg.rounds global rounds and collect per-round metrics.

    ``w_star`` / ``v_star`` (when the optima are known) enable the squared
    distance trajectories used by the bound-validation machinery;
    ``test_shards`` enables per-client accuracy columns.  A divergence
    aborts the loop and returns the partial metrics with ``diverged=True``.
    """
    if len(specs) != cfg.n_clients:
        raise ValueError(f"config expects {cfg.n_clients} clients, got {len(specs)} specs")
    dim = specs[0].dim
    w = np.zeros(dim) if w0 is None else np.asarray(w0, dtype=float).copy()
    if v0 is None:
        v0 = [w.copy() for _ in specs]
    elif isinstance(v0, np.ndarray) and v0.ndim == 1:
        v0 = [v0.copy() for _ in specs]
    clients = init_clients(specs, shards, v0)
    state = GlobalState(round_index=0, w=w)

    track_w = w_star is not None
    track_v = v_star is not None
    w_dist = np.full(cfg.rounds + 1, np.nan) if track_w else None
    v_dist = np.full((cfg.rounds + 1, cfg.n_clients), np.nan) if track_v else None
    metrics = MetricsTable(header=config_header(cfg, channel))
    max_norm = _param_norm(state, clients)

    def snapshot(t: int):
        if track_w:
            w_dist[t] = float(np.sum((state.w - w_star) ** 2))
        if track_v:
            for k, c in enumerate(clients):
                v_dist[t][k] = float(np.sum((c.v - v_star[k]) ** 2))
        if cfg.record_metrics:
            row = state.history[-1] if t > 0 else {"round": 0, "global_loss": _global_loss(clients, state.w)}
            if t == 0 and cfg.algorithm == "personalized_aota":
                row["mean_personal_loss"] = _mean_personal_loss(clients)
            if test_shards is not None:
                row["generic_acc"] = float(
                    np.mean([models.accuracy(c.spec, state.w, ts) for c, ts in zip(clients, test_shards)])
                )
                if cfg.algorithm == "personalized_aota":
                    row["mean_personal_acc"] = float(
                        np.mean([models.accuracy(c.spec, c.v, ts) for c, ts in zip(clients, test_shards)])
                    )
            if track_w:
                row["w_dist_sq"] = w_dist[t]
            metrics.append(**row)

    snapshot(0)
    diverged = False
    completed = 0
    for t in range(cfg.rounds):
        try:
            state, clients = global_round(state, clients, channel, cfg)
        except DivergenceError:
            diverged = True
            break
        completed = t + 1
        max_norm = max(max_norm, _param_norm(state, clients))
        snapshot(completed)
    return ExperimentResult(
        state=state,
        clients=clients,
        metrics=metrics,
        diverged=diverged,
        rounds_completed=completed,
        max_param_norm=max_norm,
        w_dist_sq=w_dist[: completed + 1] if track_w else None,
        v_dist_sq=v_dist[: completed + 1] if track_v else None,
    )


def _param_norm(state: GlobalState, clients) -> float:
    norm = float(np.linalg.norm(state.w))
    for c in clients:
        norm = max(norm, float(np.linalg.norm(c.v)))
    return norm


def config_header(cfg: TrainerConfig, channel: ChannelModel | None = None) -> dict:
    """Flat key/value echo of the run configuration for CSV headers."""
    header = {
        "algorithm": cfg.algorithm,
        "n_clients": cfg.n_clients,
        "rounds": cfg.rounds,
        "global_lr": cfg.global_lr,
        "local_lr": "schedule" if callable(cfg.local_lr) else cfg.local_lr,
        "lambda": cfg.lam,
        "local_steps": cfg.local_steps,
        "batch_size": cfg.batch_size,
        "mu_prox": cfg.mu_prox,
        "seed": cfg.seed,
        "channel_seed": cfg.channel_seed if cfg.channel_seed is not None else cfg.seed,
        "projection_radius": cfg.projection_radius,
    }
    if channel is not None:
        header.update(
            {
                "channel_kind": channel.kind,
                "fading_mean": channel.fading_mean,
                "fading_var": channel.fading_var,
                "noise_var": channel.noise_var,
                "power": channel.power,
            }
        )
    return header


@dataclass
class EnsembleResult:
    """Seed-averaged trajectories from repeated runs of one configuration."""

    seeds: list
    w_mean: np.ndarray  # (rounds+1,)
    w_stderr: np.ndarray
    v_mean: np.ndarray | None  # (rounds+1, K)
    v_stderr: np.ndarray | None
    max_param_norm: float

    @property
    def n_seeds(self) -> int:
        return len(self.seeds)


def run_ensemble(
    cfg: TrainerConfig,
    specs: list,
    shards: list | None,
    channel: ChannelModel,
    seeds,
    *,
    w0: np.ndarray | None = None,
    w_star: np.ndarray,
    v_star: np.ndarray | None = None,
) -> EnsembleResult:
    """Repeat a run across seeds and average the squared-error trajectories.

    Every seed reuses the same initial models, so the ensemble mean
    estimates expectations over channel randomness alone.  All runs must
    complete the full horizon (a divergence raises).
    """
    seeds = sorted(int(s) for s in seeds)
    w_curves, v_curves = [], []
    max_norm = 0.0
    for s in seeds:
        run_cfg = replace(cfg, seed=s, channel_seed=s, record_metrics=False)
        result = run_experiment(
            run_cfg, specs, shards, channel, w0=w0, w_star=w_star, v_star=v_star
        )
        if result.diverged:
            raise DivergenceError(
                f"ensemble member with seed {s} diverged", round_index=result.rounds_completed
            )
        w_curves.append(result.w_dist_sq)
        if v_star is not None:
            v_curves.append(result.v_dist_sq)
        max_norm = max(max_norm, result.max_param_norm)
    w_all = np.stack(w_curves)
    n = w_all.shape[0]
    result = EnsembleResult(
        seeds=seeds,
        w_mean=w_all.mean(axis=0),
        w_stderr=w_all.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(w_all.shape[1]),
        v_mean=None,
        v_stderr=None,
        max_param_norm=max_norm,
    )
    if v_star is not None:
        v_all = np.stack(v_curves)
        result.v_mean = v_all.mean(axis=0)
        result.v_stderr = (
            v_all.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(v_all.shape[1:])
        )
    return result
