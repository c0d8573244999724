"""Two-tower model: user MLP tower, image MLP + cross-network tower, joint
128-d dot-product space, in-batch symmetric cross-entropy objective."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .encoding import (
    DENSE,
    DENSE_WEIGHTED,
    EncodedBatch,
    EncodedExample,
    FeatureSchema,
    FeatureSpec,
    encode_images,
    encode_users,
    stack_examples,
)
from .nn import CrossLayer, Dense, Embedding, Parameter, load_parameters, read_checkpoint, save_parameters

EMBEDDING_DIM = 128
PLACEMENTS = ("stacked", "parallel")


class SchemaMismatchError(ValueError):
    pass


@dataclass
class TowerConfig:
    mlp_widths: list[int] = field(default_factory=lambda: [256, 128])
    cross_layer_count: int = 0
    cross_placement: str = "parallel"
    output_dim: int = EMBEDDING_DIM

    def __post_init__(self):
        if self.cross_placement not in PLACEMENTS:
            raise ValueError(f"cross_placement must be one of {PLACEMENTS}")
        if self.cross_layer_count < 0:
            raise ValueError("cross_layer_count must be >= 0")


@dataclass
class ModelConfig:
    user: TowerConfig = field(default_factory=TowerConfig)
    image: TowerConfig = field(default_factory=lambda: TowerConfig(cross_layer_count=1, cross_placement="parallel"))
    seed: int = 0

    def __post_init__(self):
        if self.user.output_dim != self.image.output_dim:
            raise ValueError("both towers must project into the same embedding dimension")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(TowerConfig(**d["user"]), TowerConfig(**d["image"]), int(d.get("seed", 0)))


# Image-tower layouts compared in the cross-layer study.
CROSS_VARIANTS = {
    "MLP": (0, "stacked"),
    "1 CL stacked": (1, "stacked"),
    "2 CL stacked": (2, "stacked"),
    "1 CL in parallel": (1, "parallel"),
    "2 CL in parallel": (2, "parallel"),
}


class Tower:
    """concat(feature representations) -> [cross] -> MLP -> linear head.

    With ``parallel`` placement the cross branch runs next to the MLP and the
    two outputs are concatenated before the head.
    """

    def __init__(self, name: str, specs: Sequence[FeatureSpec], config: TowerConfig, rng: np.random.Generator):
        self.name = name
        self.specs = tuple(specs)
        self.config = config
        self.embeddings: dict[str, Embedding] = {}
        for s in self.specs:
            if s.kind != DENSE:
                self.embeddings[s.name] = Embedding(f"{name}.{s.name}", s.input_rows, s.embedding_dim, rng)
        self.input_dim = sum(s.output_dim for s in self.specs)
        self.cross = [CrossLayer(f"{name}.cross{i}", self.input_dim, rng) for i in range(config.cross_layer_count)]
        self.mlp = []
        width = self.input_dim
        for i, w in enumerate(config.mlp_widths):
            self.mlp.append(Dense(f"{name}.mlp{i}", width, w, rng, "relu"))
            width = w
        if self.cross and config.cross_placement == "parallel":
            width += self.input_dim
        self.head = Dense(f"{name}.head", width, config.output_dim, rng, "identity")

    @property
    def parameters(self) -> list[Parameter]:
        ps = []
        for e in self.embeddings.values():
            ps += e.parameters
        for layer in self.cross:
            ps += layer.parameters
        for layer in self.mlp:
            ps += layer.parameters
        return ps + self.head.parameters

    @property
    def parallel(self) -> bool:
        return bool(self.cross) and self.config.cross_placement == "parallel"

    def _cross_chain(self, z):
        caches = []
        x = z
        for layer in self.cross:
            x, c = layer.forward(z, x)
            caches.append(c)
        return x, caches

    def _cross_chain_backward(self, caches, dout):
        dz = np.zeros_like(dout)
        dx = dout
        for layer, c in zip(reversed(self.cross), reversed(caches)):
            dx0, dx = layer.backward(c, dx)
            dz += dx0
        return dz + dx

    def forward(self, batch: EncodedBatch):
        parts, feat_caches = [], []
        for s in self.specs:
            val = batch.features.get(s.name)
            if val is None:
                raise SchemaMismatchError(f"{self.name}: batch lacks feature {s.name!r}")
            if s.kind == DENSE:
                if val.shape[1] != s.dense_dim:
                    raise SchemaMismatchError(f"{s.name}: expected {s.dense_dim} dims, got {val.shape[1]}")
                parts.append(val)
                feat_caches.append(None)
            elif s.kind == DENSE_WEIGHTED:
                out, c = self.embeddings[s.name].forward_dense(val)
                parts.append(out)
                feat_caches.append(c)
            else:
                out, c = self.embeddings[s.name].forward(*val)
                parts.append(out)
                feat_caches.append(c)
        z = np.concatenate(parts, axis=1)

        cross_out, cross_caches = None, []
        h = z
        if self.cross and not self.parallel:
            h, cross_caches = self._cross_chain(z)
        mlp_caches = []
        for layer in self.mlp:
            h, c = layer.forward(h)
            mlp_caches.append(c)
        if self.parallel:
            cross_out, cross_caches = self._cross_chain(z)
            h = np.concatenate([h, cross_out], axis=1)
        out, head_cache = self.head.forward(h)
        return out, (feat_caches, cross_caches, mlp_caches, head_cache)

    def backward(self, cache, dout: np.ndarray) -> None:
        feat_caches, cross_caches, mlp_caches, head_cache = cache
        dh = self.head.backward(head_cache, dout)
        dz = None
        if self.parallel:
            mlp_out = self.mlp[-1].n_out if self.mlp else self.input_dim
            dh, dcross = dh[:, :mlp_out], dh[:, mlp_out:]
            dz = self._cross_chain_backward(cross_caches, dcross)
        for layer, c in zip(reversed(self.mlp), reversed(mlp_caches)):
            dh = layer.backward(c, dh)
        if self.cross and not self.parallel:
            dh = self._cross_chain_backward(cross_caches, dh)
        dz = dh if dz is None else dz + dh

        offset = 0
        for s, c in zip(self.specs, feat_caches):
            width = s.output_dim
            g = dz[:, offset: offset + width]
            offset += width
            if s.kind == DENSE:
                continue
            if s.kind == DENSE_WEIGHTED:
                self.embeddings[s.name].backward_dense(c, g)
            else:
                self.embeddings[s.name].backward(c, g)


class TwoTowerModel:
    def __init__(self, schema: FeatureSchema, config: ModelConfig | None = None):
        self.schema = schema
        self.config = config or ModelConfig()
        self.schema_hash = schema.hash
        rng = np.random.default_rng(self.config.seed)
        self.user_tower = Tower("user", schema.user, self.config.user, rng)
        self.image_tower = Tower("image", schema.image, self.config.image, rng)

    @property
    def user_parameters(self) -> list[Parameter]:
        return self.user_tower.parameters

    @property
    def image_parameters(self) -> list[Parameter]:
        return self.image_tower.parameters

    @property
    def parameters(self) -> list[Parameter]:
        return self.user_parameters + self.image_parameters

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters}

    # encoding helpers stamp batches with this model's schema hash
    def encode_users(self, users) -> EncodedBatch:
        b = encode_users(list(users), self.schema.user)
        return EncodedBatch(b.features, b.size, self.schema_hash)

    def encode_images(self, images) -> EncodedBatch:
        b = encode_images(list(images), self.schema.image)
        return EncodedBatch(b.features, b.size, self.schema_hash)

    def _as_batch(self, x, specs) -> EncodedBatch:
        if isinstance(x, EncodedExample):
            b = stack_examples([x], specs)
            return EncodedBatch(b.features, 1, self.schema_hash)
        if x.schema_hash and x.schema_hash != self.schema_hash:
            raise SchemaMismatchError("encoded batch was produced under a different feature schema")
        return x

    def user_embeddings(self, batch) -> np.ndarray:
        return self.user_tower.forward(self._as_batch(batch, self.schema.user))[0]

    def image_embeddings(self, batch) -> np.ndarray:
        return self.image_tower.forward(self._as_batch(batch, self.schema.image))[0]

    def loss_and_backward(self, user_batch: EncodedBatch, image_batch: EncodedBatch,
                          freeze_image_tower: bool = False) -> float:
        """Forward both towers on N aligned pairs, accumulate gradients, return the loss."""
        u, ucache = self.user_tower.forward(self._as_batch(user_batch, self.schema.user))
        v, vcache = self.image_tower.forward(self._as_batch(image_batch, self.schema.image))
        S = similarity_matrix(u, v)
        loss, dS = symmetric_ce_loss_and_grad(S)
        self.user_tower.backward(ucache, dS @ v)
        if not freeze_image_tower:
            self.image_tower.backward(vcache, dS.T @ u)
        return loss

    def loss(self, user_batch: EncodedBatch, image_batch: EncodedBatch) -> float:
        u = self.user_embeddings(user_batch)
        v = self.image_embeddings(image_batch)
        return symmetric_ce_loss(similarity_matrix(u, v))

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()

    def copy(self) -> "TwoTowerModel":
        clone = TwoTowerModel(self.schema, self.config)
        clone.load_state(self.state_dict())
        return clone

    def state_dict(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {p.name: (p.values.copy(), p.state.copy()) for p in self.parameters}

    def load_state(self, state) -> None:
        for p in self.parameters:
            values, acc = state[p.name]
            p.values[...] = values
            p.state[...] = acc
            p.zero_grad()

    def save(self, path) -> None:
        save_parameters(path, self.parameters, {
            "schema_hash": self.schema_hash,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
        })

    @classmethod
    def load(cls, path, schema: FeatureSchema) -> "TwoTowerModel":
        header, _, _ = read_checkpoint(path)
        if header.get("schema_hash") != schema.hash:
            raise SchemaMismatchError(
                f"checkpoint schema {header.get('schema_hash', '?')[:12]} != {schema.hash[:12]}"
            )
        model = cls(schema, ModelConfig.from_dict(header["config"]))
        load_parameters(path, model.parameters)
        return model

    def config_json(self) -> str:
        return json.dumps({"model": self.config.to_dict(), "schema_hash": self.schema_hash}, indent=2, sort_keys=True)


def user_forward(model: TwoTowerModel, encoded_user) -> np.ndarray:
    out = model.user_embeddings(encoded_user)
    return out[0] if isinstance(encoded_user, EncodedExample) else out


def image_forward(model: TwoTowerModel, encoded_image) -> np.ndarray:
    out = model.image_embeddings(encoded_image)
    return out[0] if isinstance(encoded_image, EncodedExample) else out


def similarity_matrix(user_embs: np.ndarray, image_embs: np.ndarray) -> np.ndarray:
    """``S[i, j] = <u_i, v_j>``; the diagonal holds the clicked pairs."""
    if user_embs.ndim != 2 or user_embs.shape != image_embs.shape:
        raise ValueError(f"shape mismatch: users {user_embs.shape}, images {image_embs.shape}")
    return user_embs @ image_embs.T


def _check_scores(S: np.ndarray) -> None:
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise ValueError(f"expected a non-empty square matrix, got {S.shape}")
    if not np.all(np.isfinite(S)):
        raise FloatingPointError("non-finite similarity scores")


def _softmax_ce(S: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (axis=1) or per-column (axis=0) CE against the diagonal, plus the softmax."""
    m = S.max(axis=axis, keepdims=True)
    e = np.exp(S - m)
    z = e.sum(axis=axis, keepdims=True)
    lse = (m + np.log(z)).ravel()
    return lse - np.diag(S), e / z


def symmetric_ce_loss(S: np.ndarray) -> float:
    """Mean of row-wise and column-wise softmax cross-entropy with diagonal targets."""
    _check_scores(S)
    rows, _ = _softmax_ce(S, 1)
    cols, _ = _softmax_ce(S, 0)
    return float(0.5 * (rows.mean() + cols.mean()))


def symmetric_ce_loss_and_grad(S: np.ndarray) -> tuple[float, np.ndarray]:
    _check_scores(S)
    n = S.shape[0]
    rows, p_rows = _softmax_ce(S, 1)
    cols, p_cols = _softmax_ce(S, 0)
    dS = p_rows + p_cols
    dS[np.diag_indices(n)] -= 2.0
    dS *= 0.5 / n
    return float(0.5 * (rows.mean() + cols.mean())), dS


def copy_shared_parameters(src: TwoTowerModel, dst: TwoTowerModel) -> list[str]:
    """Copy every same-named, same-shaped tensor from ``src`` into ``dst``."""
    theirs = src.named_parameters()
    copied = []
    for name, p in dst.named_parameters().items():
        q = theirs.get(name)
        if q is not None and q.shape == p.shape:
            p.values[...] = q.values
            copied.append(name)
    return copied
