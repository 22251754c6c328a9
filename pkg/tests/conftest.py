import numpy as np

from i2x import artifact_store as store


def synthetic_archive(n=30, m=4, checkpoints=(0, 10, 20), feature_shape=(3, 3, 5),
                      seed=0, drift=0.3):
    """Valid random run archive; consecutive confidences drift so the
    analysis stages have signal."""
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w, d = feature_shape
    confs = []
    sals = []
    logits = rng.random((n, m))
    for _ in checkpoints:
        conf = logits / logits.sum(axis=1, keepdims=True)
        confs.append(conf.astype("<f4"))
        sal = rng.random((n, h, w))
        sal /= sal.max(axis=(1, 2), keepdims=True)
        sals.append(sal.astype("<f4"))
        logits = logits + drift * rng.random((n, m))
    return store.RunArchive(
        dataset_id="synthetic",
        sample_ids=np.arange(n, dtype=np.int64),
        labels=(np.arange(n) % m).astype(np.int64),
        class_count=m,
        feature_shape=feature_shape,
        checkpoints=list(checkpoints),
        confidences=confs,
        saliency=sals,
        features=rng.random((n, h, w, d)).astype("<f4"),
    )
