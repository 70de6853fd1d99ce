import time

import numpy as np

import ota_pfl as op


def build_task(seed, K=20, d=5, n_per_client=240, n_classes=6, het=3.0, alpha=0.5,
               noisy_ratio=0.0, lb=0.5, test_fraction=0.25):
    shards = op.synth_clustered_multiclass(K, d, n_per_client, n_classes, het,
                                           seed=seed, intercept=True)
    features, labels = op.pool_shards(shards)
    plan = op.dirichlet_partition(labels, K, alpha, seed=seed)
    shards = op.apply_partition(features, labels, plan)
    pairs = [op.train_test_split(s, test_fraction, seed=seed) for s in shards]
    train = [p[0] for p in pairs]
    test = [p[1] for p in pairs]
    if noisy_ratio > 0:
        train = op.inject_label_noise(train, noisy_ratio, lb, seed=seed,
                                      class_count=n_classes)
    return train, test


def run_one_het(seed, lam, eta_g, eta_l, T, local_steps, noisy_ratio, het,
                n_classes=6, K=20, d=5, noise_var=0.01, n_per_client=300):
    return run_one(seed, lam, eta_g, eta_l, T, local_steps, noisy_ratio,
                   n_classes=n_classes, K=K, d=d, noise_var=noise_var, het=het,
                   n_per_client=n_per_client)


def run_one(seed, lam, eta_g, eta_l, T, local_steps, noisy_ratio, n_classes=6, K=20, d=5,
            noise_var=0.01, het=3.0, n_per_client=240):
    train, test = build_task(seed, K=K, d=d, n_classes=n_classes, noisy_ratio=noisy_ratio,
                             het=het, n_per_client=n_per_client)
    specs = [op.MlpModel(widths=(d + 1, n_classes)) for _ in range(K)]
    ch = op.ChannelModel(kind="rayleigh", fading_mean=1.0, noise_var=noise_var)
    cfg = op.TrainerConfig(
        n_clients=K, rounds=T, global_lr=eta_g, local_lr=eta_l, lam=lam,
        local_steps=local_steps, algorithm="personalized_aota", seed=seed,
    )
    res = op.run_experiment(cfg, specs, train, ch, test_shards=test)
    last = res.metrics.rows[-1]
    # also split clean/noisy personal acc
    import ota_pfl.models as m
    accs = [m.accuracy(c.spec, c.v, ts) for c, ts in zip(res.clients, test)]
    noisy = [i for i, s in enumerate(train) if s.noise_meta is not None]
    clean = [i for i in range(K) if i not in noisy]
    pc = np.mean([accs[i] for i in clean]) if clean else float("nan")
    pn = np.mean([accs[i] for i in noisy]) if noisy else float("nan")
    return last["mean_personal_acc"], last["generic_acc"], pc, pn


if __name__ == "__main__":
    t0 = time.perf_counter()
    for lam, het, nc in ((1.5, 1.5, 10), (2.0, 1.5, 10), (1.0, 1.5, 10), (2.0, 3.0, 10)):
        eta_g, eta_l, T, ls = 0.8, 0.15, 150, 5
        print(f"lam={lam} het={het} classes={nc} eta_g={eta_g} eta_l={eta_l} T={T} ls={ls}")
        gaps = []
        for ratio in (0.0, 0.2, 0.4, 0.6):
            pa, ga, pcs, pns = [], [], [], []
            for s in range(5):
                p, g, pc, pn = run_one_het(s, lam, eta_g, eta_l, T, ls, ratio, het,
                                           n_classes=nc)
                pa.append(p)
                ga.append(g)
                pcs.append(pc)
                pns.append(pn)
            gap = 100 * (np.mean(pa) - np.mean(ga))
            gaps.append(gap)
            print(f"  ratio={ratio:.1f} personal={np.mean(pa):.4f} generic={np.mean(ga):.4f} "
                  f"gap={gap:+.2f}pp  "
                  f"clean_p={np.nanmean(pcs):.3f} noisy_p={np.nanmean(pns) if pns else float('nan'):.3f}  "
                  f"({time.perf_counter()-t0:.0f}s)")
        diffs = np.diff(gaps)
        ok = np.sum(diffs < -0.5) == 0 or (np.sum(diffs < 0) <= 1 and min(diffs) > -0.5)
        print(f"  -> diffs {np.round(diffs,2)} nondecreasing-ok={ok}")
