"""Reference hierarchical forecasters.

Only leaves are forecast by the network. Every leaf sees its own context plus
the contexts of its ancestors (nearest first), all standardized with training
statistics, and a weight set shared across leaves maps those features to the
horizon. Internal nodes are produced bottom-up with the tree's summing matrix,
so point forecasts are coherent by construction.

Forecast outputs are in raw units; inputs (and therefore gradients and
attributions) live in standardized space.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .hierarchy import HierarchyTree
from .panel import SeriesPanel, TrainView

log = logging.getLogger(__name__)

KINDS = ("linear_ar", "mlp")
HEADS = ("point", "gaussian", "quantile")
COMPONENTS = ("point", "mu", "sigma", "quantile")
SIGMA_FLOOR = 1e-4
CHECKPOINT_FORMAT = "hierexplain-checkpoint"


class ForecasterError(ValueError):
    pass


class ShapeMismatchError(ForecasterError):
    pass


class InvalidSelectorError(ForecasterError):
    pass


class NotProbabilisticError(ForecasterError):
    def __init__(self, head):
        super().__init__(f"not probabilistic: model has a {head!r} head")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


@dataclass(frozen=True)
class ForecasterSpec:
    kind: str = "linear_ar"
    context_length: int = 12
    horizon: int = 12
    hidden_width: int = 16
    head: str = "point"
    quantile_levels: Tuple[float, ...] = (0.75, 0.9, 0.95)
    seed: int = 0
    # ``mse`` or ``mae``; only read by the point head
    loss: str = "mse"
    # ancestors fed to each leaf; None means all of them
    ancestor_levels: Optional[int] = None
    epochs: Optional[int] = None
    learning_rate: Optional[float] = None
    batch_size: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ForecasterError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.head not in HEADS:
            raise ForecasterError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.context_length < 1 or self.horizon < 1:
            raise ForecasterError("context_length and horizon must be positive")
        if self.hidden_width < 1:
            raise ForecasterError("hidden_width must be >= 1")
        levels = tuple(float(q) for q in self.quantile_levels)
        object.__setattr__(self, "quantile_levels", levels)
        if self.head == "quantile":
            if not levels:
                raise ForecasterError("quantile head needs at least one level")
            if any(not 0 < q < 1 for q in levels):
                raise ForecasterError("quantile levels must lie in (0, 1)")
            if any(b <= a for a, b in zip(levels, levels[1:])):
                raise ForecasterError("quantile levels must be strictly increasing")
        if self.loss not in ("mse", "mae"):
            raise ForecasterError("loss must be 'mse' or 'mae'")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 1000 if self.kind == "linear_ar" else 150

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.02 if self.kind == "linear_ar" else 0.005

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantile_levels"] = list(self.quantile_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ForecasterSpec":
        d = dict(d)
        if "quantile_levels" in d:
            d["quantile_levels"] = tuple(d["quantile_levels"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ForecasterError(f"unknown forecaster fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class OutputTarget:
    """Selects one scalar forecast output: node, horizon step and head component."""

    node: int
    step: int = 0
    component: str = "point"
    level: Optional[float] = None

    def with_node(self, node: int) -> "OutputTarget":
        return OutputTarget(int(node), self.step, self.component, self.level)

    @property
    def label(self) -> str:
        if self.component == "quantile":
            return f"q{self.level:g}"
        return self.component


@dataclass
class ForecastOutput:
    point: np.ndarray
    mu: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    quantiles: Optional[np.ndarray] = None
    levels: Tuple[float, ...] = ()

    @property
    def gaussian(self):
        return None if self.mu is None else (self.mu, self.sigma)


@dataclass
class Scaler:
    """Per-(node, variable) standardization from training statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n_nodes: int, n_vars: int) -> "Scaler":
        return cls(np.zeros((n_nodes, n_vars)), np.ones((n_nodes, n_vars)))

    @classmethod
    def fit(cls, data: np.ndarray) -> "Scaler":
        with np.errstate(invalid="ignore"):
            mean = np.nanmean(data, axis=2)
            std = np.nanstd(data, axis=2)
        mean = np.where(np.isfinite(mean), mean, 0.0)
        std = np.where(np.isfinite(std) & (std > 1e-12), std, 1.0)
        return cls(mean, std)

    def transform(self, raw: np.ndarray) -> np.ndarray:
        """Standardize; NaN (masked) cells become 0, the training mean."""
        z = (np.asarray(raw, dtype=float) - self.mean[..., None]) / self.std[..., None]
        return np.where(np.isfinite(z), z, 0.0)


def _gaussian_z(level: float) -> float:
    return NormalDist().inv_cdf(level)


def pinball_loss(pred: np.ndarray, target: np.ndarray, level: float) -> float:
    e = np.asarray(target) - np.asarray(pred)
    return float(np.mean(np.maximum(level * e, (level - 1.0) * e)))


class Forecaster:
    """A trained (or hand-set) reference forecaster bound to one hierarchy.

    The object is immutable after construction and safe to share across threads.
    """

    def __init__(
        self,
        spec: ForecasterSpec,
        tree: HierarchyTree,
        n_variables: int,
        params: Dict[str, np.ndarray],
        scaler: Optional[Scaler] = None,
        metadata: Optional[dict] = None,
        variables: Optional[Sequence[str]] = None,
    ):
        self.spec = spec
        self.tree = tree
        self.n_variables = int(n_variables)
        self.variables = tuple(variables) if variables is not None else tuple(
            ["target"] + [f"ext{i}" for i in range(1, n_variables)]
        )
        self.scaler = scaler or Scaler.identity(tree.n_nodes, n_variables)
        self.metadata = dict(metadata or {})

        leaves = np.array(tree.leaves)
        depth_in = 1 + (tree.depth - 1 if spec.ancestor_levels is None else spec.ancestor_levels)
        idx = np.zeros((len(leaves), depth_in), dtype=int)
        mask = np.zeros((len(leaves), depth_in))
        for k, leaf in enumerate(leaves):
            chain = [int(leaf)] + tree.ancestors(int(leaf))
            chain = chain[:depth_in]
            idx[k, : len(chain)] = chain
            mask[k, : len(chain)] = 1.0
        self._leaves = leaves
        self._gather = idx
        self._gather_mask = mask[:, :, None, None]
        self.n_features = depth_in * self.n_variables * spec.context_length

        S = tree.summing_matrix()
        self._sub_leaves = []
        self._sub_weights = []
        for u in tree.nodes:
            pos = np.flatnonzero(S[u] != 0.0)
            self._sub_leaves.append(pos)
            self._sub_weights.append(S[u, pos])

        expected = self.param_shapes()
        for name, shape in expected.items():
            if name not in params:
                raise ForecasterError(f"missing parameter {name!r}")
            if tuple(np.shape(params[name])) != shape:
                raise ShapeMismatchError(
                    f"parameter {name!r} has shape {np.shape(params[name])}, expected {shape}"
                )
        self.params = {k: np.array(params[k], dtype=float) for k in expected}
        for arr in self.params.values():
            if not np.all(np.isfinite(arr)):
                raise ForecasterError("parameters must be finite")
            arr.setflags(write=False)

        H = spec.horizon
        Q = len(spec.quantile_levels)
        self._tri = np.triu(np.ones((Q, Q))) if Q else None
        self._n_out = {"point": H, "gaussian": 2 * H, "quantile": H * Q}[spec.head]

    # structure

    @property
    def context_shape(self) -> Tuple[int, int, int]:
        return (self.tree.n_nodes, self.n_variables, self.spec.context_length)

    @property
    def is_probabilistic(self) -> bool:
        return self.spec.head != "point"

    @property
    def train_mean_context(self) -> np.ndarray:
        """The training-mean context, i.e. zeros in standardized space."""
        return np.zeros(self.context_shape)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return param_shapes(self.spec, self.n_features)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_shapes()])

    def standardize(self, raw_context: np.ndarray) -> np.ndarray:
        return self.scaler.transform(raw_context)

    # forward pass

    def _net(self, P, feats):
        if self.spec.kind == "linear_ar":
            return feats @ P["W"] + P["b"]
        hidden = ad.tanh(feats @ P["W1"] + P["b1"])
        return hidden @ P["W2"] + P["b2"]

    def _features(self, x, leaf_pos):
        """Gather ``(B, N, V, L)`` contexts into ``(B, n_leaves, features)``."""
        g = x.take(self._gather[leaf_pos], axis=1) * self._gather_mask[leaf_pos][None]
        B = x.shape[0]
        return g.reshape(B, len(leaf_pos), self.n_features)

    def _heads(self, raw_out):
        """Map raw network outputs (standardized units) to named head tensors."""
        spec = self.spec
        H = spec.horizon
        if spec.head == "point":
            return {"point": raw_out}
        if spec.head == "gaussian":
            mu = raw_out[..., :H]
            sigma = ad.softplus(raw_out[..., H:]) + SIGMA_FLOOR
            return {"mu": mu, "sigma": sigma}
        Q = len(spec.quantile_levels)
        shp = raw_out.shape[:-1] + (H, Q)
        z = raw_out.reshape(*shp)
        if Q > 1:
            z = ad.concat([z[..., :1], ad.softplus(z[..., 1:])], axis=-1)
        return {"quantile": z @ self._tri}

    def _leaf_outputs(self, x, leaf_pos, P):
        feats = self._features(x, leaf_pos)
        heads = self._heads(self._net(P, feats))
        leaves = self._leaves[leaf_pos]
        m = self.scaler.mean[leaves, 0]
        s = self.scaler.std[leaves, 0]
        out = {}
        for name, t in heads.items():
            if name == "sigma":
                out[name] = t * s[None, :, None]
            elif name == "quantile":
                out[name] = t * s[None, :, None, None] + m[None, :, None, None]
            else:
                out[name] = t * s[None, :, None] + m[None, :, None]
        return out

    def _check_target(self, target: OutputTarget) -> None:
        spec = self.spec
        if not 0 <= target.node < self.tree.n_nodes:
            raise InvalidSelectorError(f"node {target.node} not in tree")
        if not 0 <= target.step < spec.horizon:
            raise InvalidSelectorError(f"horizon step {target.step} outside 0..{spec.horizon - 1}")
        c = target.component
        if c not in COMPONENTS:
            raise InvalidSelectorError(f"unknown head component {c!r}")
        if c in ("mu", "sigma") and spec.head != "gaussian":
            raise InvalidSelectorError(f"component {c!r} needs a gaussian head")
        if c == "quantile":
            if target.level is None or not 0 < target.level < 1:
                raise InvalidSelectorError("quantile component needs a level in (0, 1)")
            if spec.head == "point":
                raise InvalidSelectorError("quantile component needs a probabilistic head")
            if spec.head == "quantile" and not _has_level(spec.quantile_levels, target.level):
                raise InvalidSelectorError(
                    f"level {target.level} not among trained levels {spec.quantile_levels}"
                )

    def _scalar(self, x, target: OutputTarget, P):
        """Selected output as a ``(B,)`` tensor, computed from the leaves under the node only."""
        pos = self._sub_leaves[target.node]
        w = self._sub_weights[target.node]
        leaf = self._leaf_outputs(x, pos, P)
        h, c = target.step, target.component
        if self.spec.head == "point":
            return leaf["point"][:, :, h] @ w
        if self.spec.head == "gaussian":
            mu = leaf["mu"][:, :, h] @ w
            if c in ("point", "mu"):
                return mu
            sigma = ad.sqrt(ad.square(leaf["sigma"][:, :, h]) @ (w * w))
            if c == "sigma":
                return sigma
            return mu + sigma * _gaussian_z(target.level)
        levels = self.spec.quantile_levels
        k = _level_index(levels, 0.5 if c == "point" else target.level)
        return leaf["quantile"][:, :, h, k] @ w

    def _as_batch(self, contexts) -> Tuple[np.ndarray, bool]:
        arr = np.asarray(contexts, dtype=float)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1:] != self.context_shape:
            raise ShapeMismatchError(
                f"context shape {arr.shape[-3:] if arr.ndim >= 3 else arr.shape} "
                f"does not match model {self.context_shape}"
            )
        return arr, single

    def predict(self, contexts, target: OutputTarget) -> np.ndarray:
        """Scalar output for each context in a ``(B, N, V, L)`` batch."""
        self._check_target(target)
        x, single = self._as_batch(contexts)
        P = self.params
        out = self._scalar(ad.Tensor(x), target, P).data
        return out[0] if single else out

    def grad(self, contexts, target: OutputTarget) -> np.ndarray:
        """Exact gradient of the selected output w.r.t. every input cell, per batch item."""
        self._check_target(target)
        x, single = self._as_batch(contexts)
        xt = ad.Tensor(x, requires_grad=True)
        y = self._scalar(xt, target, self.params)
        y.backward(np.ones_like(y.data))
        g = xt.grad if xt.grad is not None else np.zeros_like(x)
        return g[0] if single else g

    def gradient(self, context, target: OutputTarget) -> np.ndarray:
        context = np.asarray(context, dtype=float)
        if context.shape != self.context_shape:
            raise ShapeMismatchError(f"context shape {context.shape} != {self.context_shape}")
        return self.grad(context, target)

    def forecast(self, context) -> ForecastOutput:
        """All heads for every node and horizon step of one context."""
        x, _ = self._as_batch(context)
        if x.shape[0] != 1:
            raise ShapeMismatchError("forecast() takes a single context")
        all_pos = np.arange(len(self._leaves))
        leaf = {k: v.data[0] for k, v in self._leaf_outputs(ad.Tensor(x), all_pos, self.params).items()}
        S = self.tree.summing_matrix()
        spec = self.spec
        if spec.head == "point":
            return ForecastOutput(point=S @ leaf["point"])
        if spec.head == "gaussian":
            mu = S @ leaf["mu"]
            sigma = np.sqrt((S * S) @ (leaf["sigma"] ** 2))
            return ForecastOutput(point=mu, mu=mu, sigma=sigma)
        q = np.einsum("nk,khq->nhq", S, leaf["quantile"])
        if np.any(S < 0):
            q = np.sort(q, axis=-1)
        k = _level_index(spec.quantile_levels, 0.5)
        return ForecastOutput(point=q[:, :, k], quantiles=q, levels=spec.quantile_levels)

    # predictive sampling

    def _leaf_noise(self, seed: int, step: int, n_samples: int) -> np.ndarray:
        # one stream per (seed, step) over all leaves: common random numbers across contexts
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(step)])
        if self.spec.head == "gaussian":
            return rng.standard_normal((len(self._leaves), n_samples))
        return rng.uniform(size=(len(self._leaves), n_samples))

    def _leaf_samples(self, leaf, pos, h, noise):
        if self.spec.head == "gaussian":
            mu = leaf["mu"].data[:, :, h]
            sigma = leaf["sigma"].data[:, :, h]
            return mu[..., None] + sigma[..., None] * noise[pos][None]
        q = leaf["quantile"].data[:, :, h, :]
        return _quantile_inverse_cdf(q, self.spec.quantile_levels, noise[pos])

    def sample_node(self, contexts, node: int, step: int, n_samples: int, seed: int) -> np.ndarray:
        """``(B, n_samples)`` draws of one node's forecast at one step, coherent over leaves."""
        if not self.is_probabilistic:
            raise NotProbabilisticError(self.spec.head)
        self._check_target(OutputTarget(node, step))
        x, single = self._as_batch(contexts)
        if n_samples == 0:
            out = np.zeros((x.shape[0], 0))
            return out[0] if single else out
        pos = self._sub_leaves[node]
        w = self._sub_weights[node]
        leaf = self._leaf_outputs(ad.Tensor(x), pos, self.params)
        noise = self._leaf_noise(seed, step, n_samples)
        draws = self._leaf_samples(leaf, pos, step, noise)
        out = np.einsum("bks,k->bs", draws, w)
        return out[0] if single else out

    def sample_predictive(self, context, n_samples: int, seed: int) -> np.ndarray:
        """``(node, horizon_step, sample)`` draws. The same seed reuses the same noise for any context."""
        if not self.is_probabilistic:
            raise NotProbabilisticError(self.spec.head)
        x, _ = self._as_batch(context)
        N, H = self.tree.n_nodes, self.spec.horizon
        if n_samples == 0:
            return np.zeros((N, H, 0))
        all_pos = np.arange(len(self._leaves))
        leaf = self._leaf_outputs(ad.Tensor(x[:1]), all_pos, self.params)
        S = self.tree.summing_matrix()
        out = np.empty((N, H, n_samples))
        for h in range(H):
            noise = self._leaf_noise(seed, h, n_samples)
            draws = self._leaf_samples(leaf, all_pos, h, noise)[0]
            out[:, h, :] = S @ draws
        return out

    # persistence

    def save(self, path, extra: Optional[dict] = None) -> None:
        shapes = self.param_shapes()
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "spec": self.spec.to_dict(),
            "seed": self.spec.seed,
            "tree": self.tree.to_dict(),
            "n_variables": self.n_variables,
            "variables": list(self.variables),
            "params": [{"name": k, "shape": list(v)} for k, v in shapes.items()],
            "scaler_shape": list(self.scaler.mean.shape),
            "metadata": {**self.metadata, **(extra or {})},
            "dtype": "<f8",
        }
        block = np.concatenate(
            [self.flat_params(), self.scaler.mean.ravel(), self.scaler.std.ravel()]
        ).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(block.tobytes())

    @classmethod
    def load(cls, path) -> "Forecaster":
        with open(path, "rb") as fh:
            line = fh.readline()
            payload = fh.read()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ForecasterError(f"unreadable checkpoint header: {exc}") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ForecasterError("not a forecaster checkpoint")
        block = np.frombuffer(payload, dtype="<f8").astype(float)
        params, offset = {}, 0
        for item in header["params"]:
            size = int(np.prod(item["shape"], dtype=int))
            params[item["name"]] = block[offset : offset + size].reshape(item["shape"])
            offset += size
        sshape = tuple(header["scaler_shape"])
        size = int(np.prod(sshape))
        mean = block[offset : offset + size].reshape(sshape)
        std = block[offset + size : offset + 2 * size].reshape(sshape)
        if offset + 2 * size != block.size:
            raise ForecasterError("checkpoint parameter block has the wrong length")
        return cls(
            ForecasterSpec.from_dict(header["spec"]),
            HierarchyTree.from_dict(header["tree"]),
            header["n_variables"],
            params,
            Scaler(mean, std),
            header.get("metadata"),
            header.get("variables"),
        )


def _has_level(levels: Sequence[float], level: float) -> bool:
    return any(abs(q - level) < 1e-9 for q in levels)


def _level_index(levels: Sequence[float], level: float) -> int:
    return int(np.argmin([abs(q - level) for q in levels]))


def _quantile_inverse_cdf(q: np.ndarray, levels: Sequence[float], u: np.ndarray) -> np.ndarray:
    """Piecewise-linear inverse CDF through ``(level, q)`` knots, linear past the end knots.

    ``q`` is ``(B, K, Q)``, ``u`` is ``(K, S)``; returns ``(B, K, S)``.
    """
    levels = np.asarray(levels)
    if len(levels) == 1:
        return np.broadcast_to(q[..., :1], q.shape[:2] + (u.shape[-1],)).copy()
    seg = np.clip(np.searchsorted(levels, u) - 1, 0, len(levels) - 2)
    lo, hi = levels[seg], levels[seg + 1]
    frac = (u - lo) / (hi - lo)
    qlo = np.take_along_axis(q, np.broadcast_to(seg, q.shape[:1] + seg.shape), axis=2)
    qhi = np.take_along_axis(q, np.broadcast_to(seg + 1, q.shape[:1] + seg.shape), axis=2)
    return qlo + frac[None] * (qhi - qlo)


def param_shapes(spec: ForecasterSpec, n_features: int) -> Dict[str, Tuple[int, ...]]:
    H = spec.horizon
    n_out = {"point": H, "gaussian": 2 * H, "quantile": H * len(spec.quantile_levels)}[spec.head]
    if spec.kind == "linear_ar":
        return {"W": (n_features, n_out), "b": (n_out,)}
    return {
        "W1": (n_features, spec.hidden_width),
        "b1": (spec.hidden_width,),
        "W2": (spec.hidden_width, n_out),
        "b2": (n_out,),
    }


def _init_params(spec: ForecasterSpec, n_features: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    shapes = param_shapes(spec, n_features)
    H = spec.horizon
    p = {}
    if spec.kind == "linear_ar":
        p["W"] = np.zeros(shapes["W"])
        p["b"] = np.zeros(shapes["b"])
        out_bias = p["b"]
    else:
        p["W1"] = rng.normal(0.0, 1.0 / math.sqrt(n_features), shapes["W1"])
        p["b1"] = np.zeros(shapes["b1"])
        p["W2"] = rng.normal(0.0, 0.1 / math.sqrt(spec.hidden_width), shapes["W2"])
        p["b2"] = np.zeros(shapes["b2"])
        out_bias = p["b2"]
    if spec.head == "gaussian":
        out_bias[H:] = math.log(math.e - 1.0)  # softplus^-1(1)
    elif spec.head == "quantile":
        z = [_gaussian_z(q) for q in spec.quantile_levels]
        init = [z[0]] + [math.log(math.expm1(max(b - a, 1e-3))) for a, b in zip(z, z[1:])]
        out_bias[:] = np.tile(init, H)
    return p


def training_windows(
    tree: HierarchyTree, data: np.ndarray, mask: np.ndarray, scaler: Scaler, L: int, H: int
):
    """Standardized ``(W, N, V, L)`` contexts, ``(W, leaves, H)`` leaf targets and target weights."""
    z = scaler.transform(np.where(mask, np.nan, data))
    leaves = np.array(tree.leaves)
    T = data.shape[2]
    starts = range(0, T - L - H + 1)
    X = np.stack([z[:, :, s : s + L] for s in starts]) if len(starts) else np.zeros((0,) + z.shape[:2] + (L,))
    Y = np.stack([z[leaves, 0, s + L : s + L + H] for s in starts]) if len(starts) else np.zeros((0, len(leaves), H))
    Wt = np.stack([~mask[leaves, 0, s + L : s + L + H] for s in starts]).astype(float) if len(starts) else np.zeros_like(Y)
    return X, Y, Wt


class _Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _loss(model: Forecaster, P, feats, Y, Wt):
    out = model._heads(model._net(P, feats))
    spec = model.spec
    denom = max(float(Wt.sum()), 1.0)
    if spec.head == "point":
        e = out["point"] - Y
        per = ad.square(e) if spec.loss == "mse" else ad.absolute(e)
        return (per * Wt).sum() * (1.0 / denom)
    if spec.head == "gaussian":
        mu, sigma = out["mu"], out["sigma"]
        r = (ad.as_tensor(Y) - mu) / sigma
        nll = ad.log(sigma) + ad.square(r) * 0.5
        return (nll * Wt).sum() * (1.0 / denom)
    q = out["quantile"]
    levels = np.asarray(spec.quantile_levels)
    e = ad.as_tensor(Y[..., None]) - q
    slope = levels - (e.data < 0).astype(float)
    return (e * (slope * Wt[..., None])).sum() * (1.0 / (denom * len(levels)))


def train(spec: ForecasterSpec, train_view, tree: Optional[HierarchyTree] = None) -> Forecaster:
    """Fit a reference forecaster on the training range of a panel.

    ``train_view`` is a :class:`TrainView` or a :class:`SeriesPanel` (whole range used).
    Linear models use full-batch Adam; MLPs use seeded minibatches.
    """
    if isinstance(train_view, TrainView):
        panel = train_view.panel
        data, mask = train_view.data, train_view.missing_mask
    elif isinstance(train_view, SeriesPanel):
        panel = train_view
        data, mask = panel.data, panel.missing_mask
    else:
        raise TypeError("train() needs a TrainView or SeriesPanel")
    tree = tree or panel.tree
    scaler = Scaler.fit(np.where(mask, np.nan, data))
    L, H = spec.context_length, spec.horizon
    X, Y, Wt = training_windows(tree, data, mask, scaler, L, H)
    if X.shape[0] < 1:
        raise ForecasterError("training range holds no full (context, horizon) window")

    rng = np.random.default_rng(spec.seed)
    shell = Forecaster(
        spec, tree, panel.n_variables,
        {k: np.zeros(s) for k, s in param_shapes(spec, _n_features(spec, tree, panel.n_variables)).items()},
        scaler,
    )
    params = _init_params(spec, shell.n_features, rng)
    all_pos = np.arange(len(tree.leaves))
    feats_all = shell._features(ad.Tensor(X), all_pos).data
    opt = _Adam(params, spec.lr)
    n_windows = X.shape[0]
    batch = n_windows if spec.kind == "linear_ar" else min(spec.batch_size, n_windows)
    history: List[float] = []
    for epoch in range(spec.n_epochs):
        order = np.arange(n_windows) if batch == n_windows else rng.permutation(n_windows)
        losses, weights = [], []
        for start in range(0, n_windows, batch):
            sel = order[start : start + batch]
            P = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = _loss(shell, P, feats_all[sel], Y[sel], Wt[sel])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, value)
            loss.backward()
            grads = {k: (P[k].grad if P[k].grad is not None else np.zeros_like(v)) for k, v in params.items()}
            opt.step(params, grads)
            losses.append(value)
            weights.append(len(sel))
        epoch_loss = float(np.average(losses, weights=weights))
        history.append(epoch_loss)
    # loss of the returned parameters on the full training set
    P = {k: ad.Tensor(v) for k, v in params.items()}
    final = float(_loss(shell, P, feats_all, Y, Wt).data)
    if not math.isfinite(final):
        raise TrainingDivergedError(spec.n_epochs, final)
    log.info("trained %s/%s: loss %.5g -> %.5g", spec.kind, spec.head, history[0], final)
    meta = {
        "loss_history": history,
        "final_loss": final,
        "n_windows": int(n_windows),
        "input_space": "standardized",
    }
    return Forecaster(spec, tree, panel.n_variables, params, scaler, meta, panel.variables)


def _n_features(spec: ForecasterSpec, tree: HierarchyTree, n_vars: int) -> int:
    depth_in = 1 + (tree.depth - 1 if spec.ancestor_levels is None else spec.ancestor_levels)
    return depth_in * n_vars * spec.context_length
