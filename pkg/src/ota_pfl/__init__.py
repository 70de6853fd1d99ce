"""Personalized federated edge learning over an analog over-the-air channel.

A discrete-round simulator: clients hold heterogeneous local objectives,
upload gradients through a fading multiple-access channel that sums them
in the air, the server applies noisy global steps, and every client keeps
a private personal model pulled toward the global one.  The theory module
evaluates the closed-form convergence predictions and validates them
against seeded Monte-Carlo trajectories.
"""

from .channel import (
    ChannelModel,
    ChannelRealization,
    WaveformBasis,
    aggregate_ota,
    demodulate,
    make_basis,
    modulate,
    sample_realization,
)
from .data import (
    DataShard,
    NoiseMeta,
    PartitionPlan,
    apply_partition,
    dirichlet_partition,
    iid_partition,
    inject_label_noise,
    load_csv,
    pool_shards,
    synth_clustered,
    synth_clustered_multiclass,
    train_test_split,
    write_csv,
)
from .models import (
    LogisticModel,
    MlpModel,
    QuadraticModel,
    accuracy,
    convexity_constants,
    grad,
    loss,
    quadratic_ensemble,
    random_quadratic,
)
from .persist import load_models, save_models
from .theory import (
    ClientOptima,
    TheoryConstants,
    check_rate_envelope,
    compute_optima,
    contraction_factor,
    ensemble_constants,
    envelope_coefficient,
    global_error_bound,
    max_global_lr,
    personal_recursion_bound,
    validate_global_bound,
    validate_personal_bound,
    validate_rate_envelope,
)
from .training import (
    ClientState,
    DivergenceError,
    ExperimentResult,
    GlobalState,
    MetricsTable,
    TrainerConfig,
    global_round,
    personal_grad,
    personal_step,
    run_ensemble,
    run_experiment,
)

__version__ = "0.1.0"
