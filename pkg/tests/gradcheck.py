"""Central-difference checks for every differentiable op and the full two-tower loss.

Each ``check_*`` returns the worst relative error (L2 norm based) over the
parameters and inputs it covers.
"""

import numpy as np

from oracles import numeric_grad, rel_err
from stylerec.datamodel import Vocabulary
from stylerec.encoding import DENSE, DENSE_WEIGHTED, MULTIHOT, ONEHOT, EncodedBatch, FeatureSchema, FeatureSpec
from stylerec.model import ModelConfig, TowerConfig, TwoTowerModel, symmetric_ce_loss, symmetric_ce_loss_and_grad
from stylerec.nn import CrossLayer, Dense, Embedding

H = 1e-6
# the full model has a larger loss scale, so a wider step keeps roundoff below the tolerance
H_MODEL = 1e-5


def _away_from_kink(z, margin=1e-3):
    return np.all(np.abs(z) > margin)


def check_embedding(seed: int) -> float:
    rng = np.random.default_rng(seed)
    emb = Embedding("e", 7, 5, rng)
    idx = rng.integers(0, 7, size=(4, 3))
    w = rng.uniform(0, 1, size=(4, 3))
    R = rng.normal(size=(4, 5))
    out, cache = emb.forward(idx, w)
    emb.backward(cache, R)
    num = numeric_grad(lambda: float((emb.forward(idx, w)[0] * R).sum()), emb.table.values, H)
    return rel_err(emb.table.grad, num)


def check_embedding_dense(seed: int) -> float:
    rng = np.random.default_rng(seed)
    emb = Embedding("c", 6, 4, rng)
    x = rng.dirichlet(np.ones(6), size=3)
    R = rng.normal(size=(3, 4))
    _, cache = emb.forward_dense(x)
    emb.backward_dense(cache, R)
    num = numeric_grad(lambda: float((emb.forward_dense(x)[0] * R).sum()), emb.table.values, H)
    return rel_err(emb.table.grad, num)


def check_dense(seed: int, activation: str) -> float:
    rng = np.random.default_rng(seed)
    layer = Dense("d", 6, 5, rng, activation)
    x = rng.normal(size=(4, 6))
    while activation == "relu" and not _away_from_kink(layer.forward(x)[1][1]):
        x = rng.normal(size=(4, 6))
    R = rng.normal(size=(4, 5))
    out, cache = layer.forward(x)
    dx = layer.backward(cache, R)
    f = lambda: float((layer.forward(x)[0] * R).sum())  # noqa: E731
    errs = [
        rel_err(layer.W.grad, numeric_grad(f, layer.W.values, H)),
        rel_err(layer.b.grad, numeric_grad(f, layer.b.values, H)),
        rel_err(dx, numeric_grad(f, x, H)),
    ]
    return max(errs)


def check_cross(seed: int) -> float:
    rng = np.random.default_rng(seed)
    layer = CrossLayer("x", 9, rng)  # rank ceil(9/4) = 3
    x0 = rng.normal(size=(4, 9))
    x = rng.normal(size=(4, 9))
    R = rng.normal(size=(4, 9))
    _, cache = layer.forward(x0, x)
    dx0, dx = layer.backward(cache, R)
    f = lambda: float((layer.forward(x0, x)[0] * R).sum())  # noqa: E731
    errs = [rel_err(p.grad, numeric_grad(f, p.values, H)) for p in layer.parameters]
    errs += [rel_err(dx0, numeric_grad(f, x0, H)), rel_err(dx, numeric_grad(f, x, H))]
    return max(errs)


def check_loss(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    S = rng.normal(scale=2.0, size=(n, n))
    _, dS = symmetric_ce_loss_and_grad(S)
    return rel_err(dS, numeric_grad(lambda: symmetric_ce_loss(S), S, H))


def tiny_model(seed: int, cross: int = 1, placement: str = "parallel") -> tuple[TwoTowerModel, EncodedBatch, EncodedBatch]:
    """A small model with every feature kind, plus aligned batches of 4 pairs."""
    rng = np.random.default_rng(seed)
    onehot = Vocabulary("org_id", ("a", "b", "c"), 2, 0)
    multi = Vocabulary("categories", ("x", "y", "z"), 1, 0)
    colors = Vocabulary("colors", ("c0", "c1", "c2", "c3"), 0, 0)
    schema = FeatureSchema(
        (FeatureSpec("org_id", ONEHOT, 3, onehot),),
        (FeatureSpec("categories", MULTIHOT, 3, multi),
         FeatureSpec("colors", DENSE_WEIGHTED, 2, colors, 4),
         FeatureSpec("deep_features", DENSE, 3, None, 3)),
    )
    config = ModelConfig(
        TowerConfig([6], output_dim=4),
        TowerConfig([6, 5], cross_layer_count=cross, cross_placement=placement, output_dim=4),
        seed=seed,
    )
    model = TwoTowerModel(schema, config)
    n = 4
    users = EncodedBatch({"org_id": (rng.integers(0, 5, size=(n, 1)), np.ones((n, 1)))}, n, model.schema_hash)
    images = EncodedBatch({
        "categories": (rng.integers(0, 4, size=(n, 2)), np.full((n, 2), 0.5)),
        "colors": rng.dirichlet(np.ones(4), size=n),
        "deep_features": rng.normal(size=(n, 3)),
    }, n, model.schema_hash)
    # larger values so the loss is not flat around ln n
    for p in model.parameters:
        p.values *= 3.0
    return model, users, images


def check_two_tower(seed: int, cross: int = 1, placement: str = "parallel") -> float:
    model, users, images = tiny_model(seed, cross, placement)
    model.zero_grad()
    model.loss_and_backward(users, images)
    f = lambda: model.loss(users, images)  # noqa: E731
    return max(rel_err(p.grad, numeric_grad(f, p.values, H_MODEL)) for p in model.parameters)


OPS = {
    "embedding": check_embedding,
    "embedding_dense": check_embedding_dense,
    "dense_relu": lambda s: check_dense(s, "relu"),
    "dense_identity": lambda s: check_dense(s, "identity"),
    "cross_layer": check_cross,
    "symmetric_ce": check_loss,
    "two_tower_parallel": lambda s: check_two_tower(s, 1, "parallel"),
    "two_tower_stacked2": lambda s: check_two_tower(s, 2, "stacked"),
    "two_tower_mlp": lambda s: check_two_tower(s, 0, "stacked"),
}
