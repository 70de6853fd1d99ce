import time

import numpy as np

import ota_pfl as op


def build_task(seed, K=20, d=5, n_per_client=200, het=3.0, alpha=0.5,
               noisy_ratio=0.0, lb=0.5, test_fraction=0.25):
    shards = op.synth_clustered(K, d, n_per_client, het, seed=seed, intercept=True)
    features, labels = op.pool_shards(shards)
    plan = op.dirichlet_partition(labels, K, alpha, seed=seed)
    shards = op.apply_partition(features, labels, plan)
    pairs = [op.train_test_split(s, test_fraction, seed=seed) for s in shards]
    train = [p[0] for p in pairs]
    test = [p[1] for p in pairs]
    if noisy_ratio > 0:
        train = op.inject_label_noise(train, noisy_ratio, lb, seed=seed, class_count=2)
    return train, test


def run_one(seed, lam, eta_g, eta_l, T, local_steps, noisy_ratio=0.0, ridge=0.01,
            K=20, d=5, noise_var=0.01):
    train, test = build_task(seed, K=K, d=d, noisy_ratio=noisy_ratio)
    specs = [op.LogisticModel(dim=d + 1, ridge=ridge) for _ in range(K)]
    ch = op.ChannelModel(kind="rayleigh", fading_mean=1.0, noise_var=noise_var)
    cfg = op.TrainerConfig(
        n_clients=K, rounds=T, global_lr=eta_g, local_lr=eta_l, lam=lam,
        local_steps=local_steps, algorithm="personalized_aota", seed=seed,
    )
    res = op.run_experiment(cfg, specs, train, ch, test_shards=test)
    last = res.metrics.rows[-1]
    return last["mean_personal_acc"], last["generic_acc"]


def gap_curve(lam, eta_g, eta_l, T, local_steps, ratios, seeds=range(5)):
    for ratio in ratios:
        pa, ga = [], []
        for s in seeds:
            p, g = run_one(s, lam, eta_g, eta_l, T, local_steps, noisy_ratio=ratio)
            pa.append(p)
            ga.append(g)
        print(
            f"  ratio={ratio:.1f} personal={np.mean(pa):.4f} generic={np.mean(ga):.4f} "
            f"gap={100*(np.mean(pa)-np.mean(ga)):+.2f}pp"
        )


if __name__ == "__main__":
    t0 = time.perf_counter()
    print("criterion 7 sweep (no noise): gap must be >= 2pp")
    for lam in (0.1, 0.5, 1.0):
        for eta_g, eta_l, T, ls in ((0.5, 0.1, 120, 5),):
            pa, ga = [], []
            for s in range(5):
                p, g = run_one(s, lam, eta_g, eta_l, T, ls)
                pa.append(p)
                ga.append(g)
            print(f"lam={lam} eta_g={eta_g} eta_l={eta_l} T={T} ls={ls}: "
                  f"personal={np.mean(pa):.4f} generic={np.mean(ga):.4f} "
                  f"gap={100*(np.mean(pa)-np.mean(ga)):+.2f}pp  ({time.perf_counter()-t0:.0f}s)")

    print("criterion 8 curves (ratios 0/0.2/0.4/0.6):")
    for lam in (0.5, 1.0):
        print(f" lam={lam}")
        gap_curve(lam, 0.5, 0.1, 120, 5, (0.0, 0.2, 0.4, 0.6))
        print(f"  ({time.perf_counter()-t0:.0f}s)")
