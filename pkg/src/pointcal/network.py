"""Per-point embedding network: shared trunk, mean/variance/factor heads.

The trunk is a tanh MLP over 7 local-context features per point. Three
output branches hang off the last hidden layer: the mean head is L2
normalized row-wise, the variance head goes through softplus (strictly
positive by construction), and the factor head combines a tanh direction
with a softplus magnitude so covariance factors can carry either sign. A
linear classifier head (and, for the sampled-logit baseline, a logit
variance head) reads the same trunk features.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .embeddings import DiagGaussianEmbeddings, LowRankGaussianEmbeddings, PointCloud
from .numerics import inverse_softplus
from .rng import Rng
from .sampling import knn_indices

N_POINT_FEATURES = 7
VAR_HEAD_INIT = 0.1  # initial variance scale: softplus(bias) = 0.1

# fixed input standardization: the local-context columns are an order of
# magnitude smaller than the centered coordinates, which would otherwise
# starve them of influence through the tanh trunk. Constants measured once
# on reference scenes and frozen (never fit per cloud).
FEATURE_SHIFT = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.08])
FEATURE_SCALE = np.array([0.4, 0.4, 0.2, 0.03, 0.03, 0.02, 0.04])

BRANCHES = ("trunk", "mean", "var", "factor", "classifier", "classifier_var")
MODES = ("deterministic", "cue", "cue_plus")


@dataclass(frozen=True)
class NetConfig:
    embed_dim: int = 16
    hidden: tuple = (64, 64, 64)
    num_classes: Optional[int] = None
    rank: int = 1
    dropout: float = 0.0
    context_neighbors: int = 8
    # hidden widths of the variance/factor branches; the mean and classifier
    # branches stay single linear maps on trunk features
    head_hidden: tuple = (32,)

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if not self.hidden:
            raise ValueError("hidden widths must be nonempty")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.num_classes is not None and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class NetParams:
    """Named parameter tensors (autodiff leaves) plus the frozen-branch set."""

    config: NetConfig
    tensors: dict = field(default_factory=dict)
    heads: frozenset = frozenset()
    frozen: frozenset = frozenset()

    def leaf_map(self) -> dict:
        return dict(self.tensors)

    def trainable(self) -> dict:
        return {name: v for name, v in self.tensors.items()
                if name.split(".")[0] not in self.frozen}

    def param_count(self) -> int:
        return int(sum(v.value.size for v in self.tensors.values()))

    def state_arrays(self) -> dict:
        return {name: v.value for name, v in self.tensors.items()}


def _glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -bound, bound)


def _linear_tensors(rng: Rng, prefix: str, fan_in: int, fan_out: int,
                    bias_init: float = 0.0) -> dict:
    # each tensor draws from its own name-derived stream, so adding or removing
    # heads never perturbs the init of the others
    w = _glorot(rng.derive(prefix + ".w"), fan_in, fan_out)
    b = np.full(fan_out, bias_init, dtype=np.float64)
    return {prefix + ".w": ad.Var(w), prefix + ".b": ad.Var(b)}


def build_params(config: NetConfig, rng: Rng, heads) -> NetParams:
    """Create trunk + requested head tensors ('mean', 'var', 'factor',
    'classifier', 'classifier_var')."""
    heads = frozenset(heads)
    unknown = heads - set(BRANCHES)
    if unknown:
        raise ValueError(f"unknown heads: {sorted(unknown)}")
    if ("classifier" in heads or "classifier_var" in heads) and config.num_classes is None:
        raise ValueError("classifier heads need num_classes in the config")
    tensors = {}
    fan_in = N_POINT_FEATURES
    for i, width in enumerate(config.hidden):
        tensors.update(_linear_tensors(rng, f"trunk.{i}", fan_in, width))
        fan_in = width
    d, k = config.embed_dim, config.rank
    if "mean" in heads:
        tensors.update(_linear_tensors(rng, "mean.out", fan_in, d))
    if "var" in heads:
        width = fan_in
        for i, hw in enumerate(config.head_hidden):
            tensors.update(_linear_tensors(rng, f"var.{i}", width, hw))
            width = hw
        tensors.update(_linear_tensors(rng, "var.out", width, d,
                                       bias_init=inverse_softplus(VAR_HEAD_INIT)))
    if "factor" in heads:
        width = fan_in
        for i, hw in enumerate(config.head_hidden):
            tensors.update(_linear_tensors(rng, f"factor.{i}", width, hw))
            width = hw
        tensors.update(_linear_tensors(rng, "factor.dir", width, d * k))
        tensors.update(_linear_tensors(rng, "factor.mag", width, d * k,
                                       bias_init=inverse_softplus(VAR_HEAD_INIT)))
    if "classifier" in heads:
        tensors.update(_linear_tensors(rng, "classifier.out", fan_in,
                                       config.num_classes))
    if "classifier_var" in heads:
        tensors.update(_linear_tensors(rng, "classifier_var.out", fan_in,
                                       config.num_classes))
    return NetParams(config=config, tensors=tensors, heads=heads)


def point_features(cloud: PointCloud, k_ctx: int) -> np.ndarray:
    """(N, 7) per-point descriptor: cloud-centered xyz, offset from the
    local k-NN mean, and the mean neighbor distance."""
    n = cloud.n_points
    if k_ctx >= n:
        raise ValueError(f"k_ctx={k_ctx} must be < N={n}")
    coords = cloud.coords
    centered = coords - coords.mean(axis=0)
    nb = knn_indices(coords, k_ctx)
    nb_coords = coords[nb]                                  # (N, k, 3)
    offset = coords - nb_coords.mean(axis=1)
    nn_dist = np.sqrt(((coords[:, None, :] - nb_coords) ** 2).sum(axis=2))
    return np.concatenate([centered, offset, nn_dist.mean(axis=1, keepdims=True)],
                          axis=1)


def _linear(tensors, prefix: str, h):
    return h @ tensors[prefix + ".w"] + tensors[prefix + ".b"]


def trunk_features(params: NetParams, features: np.ndarray,
                   dropout_p: float = 0.0, dropout_rng: Optional[Rng] = None):
    """Run the tanh trunk; optional inverted dropout after each hidden layer."""
    if not isinstance(features, ad.Var):
        features = ad.Var((features - FEATURE_SHIFT) / FEATURE_SCALE)
    h = features
    for i in range(len(params.config.hidden)):
        h = ad.tanh(_linear(params.tensors, f"trunk.{i}", h))
        if dropout_p > 0.0:
            if dropout_rng is None:
                raise ValueError("dropout requires an rng")
            mask = (dropout_rng.uniform(h.value.shape) >= dropout_p)
            h = h * (mask / (1.0 - dropout_p))
    return h


def head_outputs(params: NetParams, h, mode: str, with_classifier: bool = False) -> dict:
    """Evaluate the heads a mode needs; returns Var outputs by name."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cfg = params.config
    need = {"mean"}
    if mode in ("cue", "cue_plus"):
        need.add("var")
    if mode == "cue_plus":
        need.add("factor")
    if with_classifier:
        need.add("classifier")
    missing = need - params.heads
    if missing:
        raise ValueError(f"params lack heads {sorted(missing)} required by mode {mode!r}")

    out = {}
    mean_pre = _linear(params.tensors, "mean.out", h)
    sumsq = ad.clip_min((mean_pre * mean_pre).sum(axis=1, keepdims=True), 1e-16)
    out["mean"] = mean_pre * sumsq ** -0.5
    if "var" in need:
        hv = h
        for i in range(len(cfg.head_hidden)):
            hv = ad.tanh(_linear(params.tensors, f"var.{i}", hv))
        out["var"] = ad.softplus(_linear(params.tensors, "var.out", hv))
    if "factor" in need:
        hf = h
        for i in range(len(cfg.head_hidden)):
            hf = ad.tanh(_linear(params.tensors, f"factor.{i}", hf))
        direction = ad.tanh(_linear(params.tensors, "factor.dir", hf))
        magnitude = ad.softplus(_linear(params.tensors, "factor.mag", hf))
        n = h.value.shape[0]
        out["factor"] = (direction * magnitude).reshape(n, cfg.embed_dim, cfg.rank)
    if "classifier" in need:
        out["classifier"] = _linear(params.tensors, "classifier.out", h)
    return out


def forward(params: NetParams, cloud: PointCloud, mode: str):
    """Embeddings (and logits when a classifier head exists) for a cloud.

    Returns (embeddings, logits): a DiagGaussianEmbeddings for mode 'cue',
    a LowRankGaussianEmbeddings for 'cue_plus', and the bare unit-norm
    mean matrix for 'deterministic'.
    """
    feats = point_features(cloud, params.config.context_neighbors)
    h = trunk_features(params, feats)
    with_cls = "classifier" in params.heads
    out = head_outputs(params, h, mode, with_classifier=with_cls)
    logits = out["classifier"].value if with_cls else None
    mean = out["mean"].value
    if mode == "deterministic":
        return mean, logits
    if mode == "cue":
        return DiagGaussianEmbeddings(mean, out["var"].value), logits
    return LowRankGaussianEmbeddings(mean, out["var"].value, out["factor"].value), logits


def forward_dropout(params: NetParams, cloud: PointCloud, p_drop: float,
                    rng: Rng) -> np.ndarray:
    """Stochastic classifier logits with dropout active (one pass)."""
    if not 0.0 < p_drop < 1.0:
        raise ValueError("p_drop must be in (0, 1)")
    feats = point_features(cloud, params.config.context_neighbors)
    h = trunk_features(params, feats, dropout_p=p_drop, dropout_rng=rng)
    return _linear(params.tensors, "classifier.out", h).value


def cross_entropy(logits, labels: np.ndarray):
    """Mean negative log-likelihood of integer labels under softmax logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.value.shape if isinstance(logits, ad.Var) else logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    if isinstance(logits, ad.Var):
        shift = logits.value.max(axis=1, keepdims=True)
        lse = ad.log(ad.exp(logits - shift).sum(axis=1)) + shift[:, 0]
        picked = (logits * onehot).sum(axis=1)
        return (lse - picked).mean()
    shift = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    picked = (logits * onehot).sum(axis=1)
    return float((lse - picked).mean())


def softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - shift)
    return e / e.sum(axis=-1, keepdims=True)


def freeze(params: NetParams, branches) -> NetParams:
    """Mark branches as excluded from optimizer updates."""
    branches = frozenset(branches)
    unknown = branches - set(BRANCHES)
    if unknown:
        raise ValueError(f"unknown branches: {sorted(unknown)}")
    return replace(params, frozen=params.frozen | branches)


def sgd_step(params: NetParams, grads: dict, state: dict, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """Momentum SGD: v <- m v + g;  w <- w - lr (v + wd w). Frozen branches
    keep their tensors bit-identical."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    for name, var in params.tensors.items():
        if name.split(".")[0] in params.frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(var.value)
        if g.shape != var.value.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        v = state.get(name)
        v = momentum * v + g if v is not None else np.array(g, copy=True)
        state[name] = v
        var.value = var.value - lr * (v + weight_decay * var.value)
