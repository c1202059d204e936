"""Scout texture-task variants for the head-ordering margin."""
import numpy as np
from quic.data import SplitDataset, stratified_split
from quic import TrainConfig, train, HeadKind, BackboneSpec


def motif(kind, m):
    ii, jj = np.indices((m, m))
    if kind == 0:
        return ((ii + jj) % 2 * 2 - 1).astype(np.float64)  # checkerboard
    if kind == 1:
        return (jj % 2 * 2 - 1).astype(np.float64)          # vertical stripes
    return (ii % 2 * 2 - 1).astype(np.float64)              # horizontal stripes


def gen(pair_types, per_class, size, msize, noise, amp_lo, amp_hi, seed):
    rng = np.random.default_rng(seed)
    k = len(pair_types)
    images, labels = [], []
    for _ in range(per_class):
        for label in range(k):
            img = rng.normal(0, noise, (size, size))
            pos = []
            for t in pair_types[label]:
                while True:
                    r0 = int(rng.integers(0, size - msize + 1))
                    c0 = int(rng.integers(0, size - msize + 1))
                    if all(abs(r0 - r1) >= msize or abs(c0 - c1) >= msize for r1, c1 in pos):
                        break
                pos.append((r0, c0))
                amp = rng.uniform(amp_lo, amp_hi)
                img[r0:r0 + msize, c0:c0 + msize] += amp * motif(t, msize)
            images.append(img.astype(np.float32))
            labels.append(label)
    inputs = np.stack(images)[:, None, :, :]
    labels = np.asarray(labels, dtype=np.int64)
    tr, te = stratified_split(labels, 0.8, seed)
    return SplitDataset(inputs, labels, k, tr, te, {})


VARIANTS = {
    "v1_same2motif_hard": dict(pair_types=((0, 0), (0, 1), (1, 1)), per_class=120,
                               size=20, msize=5, noise=0.6, amp_lo=0.35, amp_hi=0.95),
    "v2_same2motif_mid": dict(pair_types=((0, 0), (0, 1), (1, 1)), per_class=120,
                              size=20, msize=5, noise=0.5, amp_lo=0.7, amp_hi=1.3),
    "v3_distinct3motif": dict(pair_types=((0, 1), (0, 2), (1, 2)), per_class=120,
                              size=20, msize=5, noise=0.5, amp_lo=0.5, amp_hi=1.1),
    "v4_distinct3motif_hard": dict(pair_types=((0, 1), (0, 2), (1, 2)), per_class=120,
                                   size=20, msize=5, noise=0.6, amp_lo=0.35, amp_hi=0.9),
}

if __name__ == "__main__":
    import sys
    names = sys.argv[1:] or list(VARIANTS)
    seeds = range(2)
    for name in names:
        kw = VARIANTS[name]
        accs = {h: [] for h in ("quic", "gap", "se")}
        for seed in seeds:
            data = gen(seed=seed, **kw)
            for head in (HeadKind.QUIC, HeadKind.GAP, HeadKind.SE):
                cfg = TrainConfig(head=head, backbone=BackboneSpec(kind="tiny_cnn"),
                                  epochs=30, seed=seed)
                r = train(data, cfg)
                accs[head.value].append(r.log[-1].test_top1)
        means = {h: float(np.mean(v)) for h, v in accs.items()}
        print(f"{name}: quic={means['quic']:.3f} gap={means['gap']:.3f} "
              f"se={means['se']:.3f}  (quic-gap={means['quic']-means['gap']:+.3f})",
              flush=True)
