"""Shared fixtures: small hand-built circuits and the trained desk-scale models.

The desk-scale models are session-scoped because training them takes tens of
seconds; every acceptance criterion that needs a trained model shares them.
All randomness is seeded, so fixture contents are identical across runs.
"""

from __future__ import annotations

import numpy as np
import pytest

from circuq import (
    Dataset,
    RatConfig,
    TrainConfig,
    build_manual,
    build_rat,
    fit,
    synth_blobs,
)

TWO_LEAF_SUM = """
# a two-component mixture on one binary variable
a categorical 0 0.5 0.5
b categorical 0 0.25 0.75
s sum 0.6 a 0.4 b
root s
"""

# Three variables, alternating sums and products over Gaussian leaves; the
# canonical hand-written fixture shape used across the moment tests.
THREE_VAR_TREE = """
g1 gaussian 0 0.0 1.0
g2 gaussian 1 0.5 1.0
g3 gaussian 0 -0.5 0.8
g4 gaussian 1 0.2 1.2
g5 gaussian 1 -0.3 1.0
g6 gaussian 2 0.0 0.9
g7 gaussian 1 0.4 1.1
g8 gaussian 2 -0.2 1.0
g9 gaussian 0 0.3 1.0
g10 gaussian 2 0.1 1.0
p3 product g1 g2
p4 product g3 g4
s2 sum 0.7 p3 0.3 p4
p1 product s2 g6
p5 product g5 g8
p6 product g7 g10
s3 sum 0.45 p5 0.55 p6
p2 product g9 s3
s1 sum 0.35 p1 0.65 p2
root s1
"""


def rel_err(a: float, b: float, floor: float = 1e-30) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture(scope="session")
def two_leaf_sum():
    return build_manual(TWO_LEAF_SUM)


@pytest.fixture(scope="session")
def three_var_tree():
    return build_manual(THREE_VAR_TREE)


# ---------------------------------------------------------------------------
# Desk-scale synthetic data


def band_code_images(
    num_classes: int = 5,
    side: int = 8,
    rows_per_class: int = 240,
    amp: float = 0.6,
    noise: float = 0.15,
    seed: int = 7,
) -> Dataset:
    """Images whose classes are vertical brightness-band codes.

    Band codes are balanced (same number of bright bands per class), so a
    rotation-scrambled image stays ambiguous between classes instead of
    collapsing onto whichever class matches its mean gray level.  Band
    structure is one-dimensional, so rotation damage grows with the angle
    without lattice re-alignments.
    """
    rng = np.random.default_rng(seed)
    col_band = np.arange(side) // 2
    codes = [np.array(c) for c in ((1, 1, 0, 0), (1, 0, 1, 0), (1, 0, 0, 1),
                                   (0, 1, 1, 0), (0, 0, 1, 1))][:num_classes]
    base = 0.5 - amp / 2
    protos = [np.tile(base + amp * c[col_band], (side, 1)) for c in codes]
    feats, labels = [], []
    for c, proto in enumerate(protos):
        imgs = proto[None] + rng.normal(0, noise, size=(rows_per_class, side, side))
        feats.append(np.clip(imgs, 0, 1).reshape(rows_per_class, -1))
        labels.append(np.full(rows_per_class, c))
    return Dataset(np.concatenate(feats), np.concatenate(labels), "band_code_images")


@pytest.fixture(scope="session")
def blob_model():
    """RAT circuit trained on a 5-class blob split, with held-out-class OOD data."""
    data = synth_blobs(num_classes=10, num_vars=16, rows_per_class=300, separation=6.0, seed=42)
    id_mask = data.labels < 5
    X_id, y_id = data.features[id_mask], data.labels[id_mask]
    X_ood = data.features[~id_mask]
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(y_id))
    X_tr, y_tr = X_id[perm[:1000]], y_id[perm[:1000]]
    X_te, y_te = X_id[perm[1000:]], y_id[perm[1000:]]
    circuit = build_rat(
        RatConfig(num_sums=5, num_input_dists=5, depth=3, num_repetitions=2,
                  num_classes=5, num_variables=16, rng_seed=1)
    )
    trained, history = fit(
        circuit, X_tr, y_tr,
        TrainConfig(epochs=60, batch_size=100, learning_rate=2e-2, rng_seed=0),
    )
    return {
        "circuit": trained,
        "history": history,
        "train": Dataset(X_tr, y_tr, "blobs-train"),
        "id_test": Dataset(X_te, y_te, "blobs-id"),
        "ood": Dataset(X_ood[:1000], None, "blobs-ood"),
    }


@pytest.fixture(scope="session")
def image_model():
    """RAT circuit trained on the band-code images, for rotation/corruption runs."""
    ds = band_code_images()
    rng = np.random.default_rng(3)
    perm = rng.permutation(ds.num_rows)
    train = Dataset(ds.features[perm[:900]], ds.labels[perm[:900]], "images-train")
    test = Dataset(ds.features[perm[900:]], ds.labels[perm[900:]], "images-test")
    circuit = build_rat(
        RatConfig(num_sums=5, num_input_dists=5, depth=3, num_repetitions=2,
                  num_classes=5, num_variables=64, rng_seed=11)
    )
    trained, history = fit(
        circuit, train.features, train.labels,
        TrainConfig(epochs=100, batch_size=100, learning_rate=2e-2, rng_seed=0),
    )
    return {"circuit": trained, "history": history, "train": train, "test": test,
            "side": 8}
