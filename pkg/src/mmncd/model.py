"""Per-modality encoders, attention-based feature fusion, and output heads.

Each modality has its own small encoder producing a fixed-width feature
vector; a missing modality contributes an exact zero vector. The fusion
stage splits the modality features into two groups (zero-padded to an even
count), runs multi-head self-attention over each group to produce two view
vectors, then fuses those two views with a final attention block into the
global feature ("action") vector used for classification, value prediction,
clustering, and retrieval.

All forward paths are batched: sample collections run through shared weight
matrices in single matrix operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import MultiModalSample
from .errors import ShapeError
from .seeding import substream
from .tensor import Parameter, Tensor


class AffineLayer:
    # small positive bias keeps a fully-dead relu row from collapsing the
    # downstream view vectors to exact zero, which the contrastive loss rejects
    BIAS_INIT = 0.01

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        scale = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(f"{name}.weight", rng.normal(size=(d_in, d_out)) * scale)
        self.bias = Parameter(f"{name}.bias", np.full(d_out, self.BIAS_INIT))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class ModalityEncoder:
    """Two affine layers with a relu in between, mapping one modality's raw
    vectors to the shared feature width."""

    def __init__(self, modality_id: int, in_dim: int, feature_dim: int, rng: np.random.Generator):
        self.modality_id = modality_id
        self.in_dim = in_dim
        self.feature_dim = feature_dim
        name = f"encoder{modality_id}"
        self.layer1 = AffineLayer(f"{name}.layer1", in_dim, feature_dim, rng)
        self.layer2 = AffineLayer(f"{name}.layer2", feature_dim, feature_dim, rng)

    def encode(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ShapeError(f"modality {self.modality_id} expects rows of dim "
                             f"{self.in_dim}, got shape {x.data.shape}")
        return self.layer2(T.relu(self.layer1(x)))

    def parameters(self) -> list[Parameter]:
        return self.layer1.parameters() + self.layer2.parameters()


def split_feature_groups(features: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    """Split modality features into two equally sized token groups.

    An odd count gets one zero token appended first; even indices of the
    padded sequence form group A, odd indices group B.
    """
    if not features:
        raise ShapeError("cannot group an empty feature list")
    padded = list(features)
    if len(padded) % 2 == 1:
        padded.append(T.constant(np.zeros_like(features[0].data)))
    return padded[0::2], padded[1::2]


class AttentionFuser:
    """Multi-head self-attention over a token set, mean-pooled and projected.

    Head count must divide the feature width; each head attends with
    dot-product scores scaled by 1/sqrt(key_dim).
    """

    def __init__(self, name: str, feature_dim: int, heads: int, rng: np.random.Generator):
        if feature_dim % heads != 0:
            raise ShapeError(f"feature_dim {feature_dim} not divisible by {heads} heads")
        self.feature_dim = feature_dim
        self.heads = heads
        self.key_dim = feature_dim // heads
        scale = 1.0 / math.sqrt(feature_dim)
        self.projections: list[tuple[Parameter, Parameter, Parameter]] = []
        for h in range(heads):
            wq = Parameter(f"{name}.head{h}.query", rng.normal(size=(feature_dim, self.key_dim)) * scale)
            wk = Parameter(f"{name}.head{h}.key", rng.normal(size=(feature_dim, self.key_dim)) * scale)
            wv = Parameter(f"{name}.head{h}.value", rng.normal(size=(feature_dim, self.key_dim)) * scale)
            self.projections.append((wq, wk, wv))
        self.out = AffineLayer(f"{name}.out", feature_dim, feature_dim, rng)

    def attend(self, tokens: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Run attention over a (batch, tokens, dim) tensor.

        Returns the per-token fused tensor (batch, tokens, dim) and the
        per-head attention weights (each (batch, tokens, tokens)).
        """
        if tokens.data.ndim != 3 or tokens.data.shape[2] != self.feature_dim:
            raise ShapeError(f"attention expects (batch, tokens, {self.feature_dim}), "
                             f"got shape {tokens.data.shape}")
        outputs = []
        weights = []
        inv_sqrt_dk = 1.0 / math.sqrt(self.key_dim)
        for wq, wk, wv in self.projections:
            q = T.matmul(tokens, wq)
            k = T.matmul(tokens, wk)
            v = T.matmul(tokens, wv)
            scores = T.mul(T.matmul(q, T.swap_last_axes(k)), inv_sqrt_dk)
            attn = T.softmax_rows(scores)
            outputs.append(T.matmul(attn, v))
            weights.append(attn)
        return T.concat(outputs, axis=-1), weights

    def fuse(self, tokens: list[Tensor]) -> Tensor:
        """Fuse a token list into one vector per batch row.

        Accepts per-token tensors of shape (batch, dim), or 1-D (dim,)
        vectors for a single sample (returned as a 1-D vector again).
        """
        if not tokens:
            raise ShapeError("cannot fuse an empty token list")
        single = all(t.data.ndim == 1 for t in tokens)
        if single:
            tokens = [T.reshape(t, (1, -1)) for t in tokens]
        stacked = T.stack(tokens, axis=1)
        fused, _ = self.attend(stacked)
        pooled = fused.mean(axis=1)
        out = self.out(pooled)
        return T.reshape(out, (-1,)) if single else out

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for wq, wk, wv in self.projections:
            params.extend((wq, wk, wv))
        params.extend(self.out.parameters())
        return params


class PredictionHeads:
    """Classification head (softmax over all classes) and a scalar value head
    squashed to (0, 1), both reading the fused feature vector."""

    def __init__(self, feature_dim: int, num_classes: int, rng: np.random.Generator):
        self.num_classes = num_classes
        self.class_head = AffineLayer("heads.classify", feature_dim, num_classes, rng)
        self.value_head = AffineLayer("heads.value", feature_dim, 1, rng)

    def classify(self, fused: Tensor) -> Tensor:
        return T.softmax_rows(self.class_head(fused))

    def value(self, fused: Tensor) -> Tensor:
        squashed = T.sigmoid(self.value_head(fused))
        return T.reshape(squashed, (-1,))

    def parameters(self) -> list[Parameter]:
        return self.class_head.parameters() + self.value_head.parameters()


@dataclass
class ForwardResult:
    modal_features: list[Tensor]   # per modality, (batch, dim)
    view_a: Tensor                 # first group fusion, (batch, dim)
    view_b: Tensor                 # second group fusion, (batch, dim)
    action: Tensor                 # global fused feature, (batch, dim)
    probs: Tensor                  # class probabilities, (batch, classes)
    value: Tensor                  # predicted reward probability, (batch,)


class FusionNetwork:
    def __init__(self, modality_dims: tuple[int, ...], num_classes: int,
                 feature_dim: int = 64, heads: int = 4, seed: int = 0):
        rng = substream(seed, "init")
        self.modality_dims = tuple(modality_dims)
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.heads = heads
        self.encoders = [ModalityEncoder(j, dim, feature_dim, rng)
                         for j, dim in enumerate(self.modality_dims)]
        self.fuse_a = AttentionFuser("fuse_a", feature_dim, heads, rng)
        self.fuse_b = AttentionFuser("fuse_b", feature_dim, heads, rng)
        self.fuse_final = AttentionFuser("fuse_final", feature_dim, heads, rng)
        self.heads_out = PredictionHeads(feature_dim, num_classes, rng)

    def encode_batch(self, samples: list[MultiModalSample]) -> list[Tensor]:
        """Per-modality feature matrices for a batch; missing modalities
        become exact zero rows."""
        n = len(samples)
        features = []
        for enc in self.encoders:
            j = enc.modality_id
            present = [i for i, s in enumerate(samples) if s.vectors.get(j) is not None]
            if not present:
                features.append(T.constant(np.zeros((n, self.feature_dim))))
                continue
            x = T.constant(np.stack([samples[i].vectors[j] for i in present]))
            encoded = enc.encode(x)
            if len(present) == n:
                features.append(encoded)
            else:
                features.append(T.scatter_rows(encoded, present, n))
        return features

    def forward(self, samples: list[MultiModalSample]) -> ForwardResult:
        modal_features = self.encode_batch(samples)
        group_a, group_b = split_feature_groups(modal_features)
        view_a = self.fuse_a.fuse(group_a)
        view_b = self.fuse_b.fuse(group_b)
        action = self.fuse_final.fuse([view_a, view_b])
        probs = self.heads_out.classify(action)
        value = self.heads_out.value(action)
        return ForwardResult(modal_features, view_a, view_b, action, probs, value)

    def infer_actions(self, samples: list[MultiModalSample]) -> np.ndarray:
        """Fused feature matrix without graph construction (evaluation path)."""
        with T.no_grad():
            return self.forward(samples).action.data

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for enc in self.encoders:
            params.extend(enc.parameters())
        params.extend(self.fuse_a.parameters())
        params.extend(self.fuse_b.parameters())
        params.extend(self.fuse_final.parameters())
        params.extend(self.heads_out.parameters())
        return params
