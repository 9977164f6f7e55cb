"""Feed-forward network with batch-norm layers split into statistics and affine parts.

The network is a feature extractor (linear -> batch norm -> relu blocks), a
linear classifier on top, and a projection head mapping features onto the
unit sphere for contrastive alignment. Parameters are partitioned into
``bn-affine`` (per-feature scale/shift), ``projection`` (head weights), and
``frozen`` (everything else); only the first two are ever updated once the
model is deployed on a test stream.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BatchTooSmallError, ShapeError

BNMode = Literal["batch", "collect", "running"]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Linear:
    """Affine map ``x @ weight + bias`` with He-scaled random weights."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / in_dim)
        self.weight = Tensor(rng.normal(0.0, std, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class BatchNorm:
    """Per-feature normalization with trainable affine scale and shift.

    Three forward modes:

    - ``"batch"``: normalize with the current batch's mean and population
      variance. Running statistics are never read on this path.
    - ``"collect"``: same normalization as ``"batch"``, additionally folding
      the batch statistics into the running record (source training only).
    - ``"running"``: normalize with the stored running statistics
      (no-adaptation inference only).
    """

    def __init__(self, num_features: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x: Tensor, mode: BNMode) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.num_features:
            raise ShapeError(
                f"batch norm over {self.num_features} features got input {x.data.shape}"
            )
        if mode == "running":
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            normalized = ad.multiply(ad.subtract(x, self.running_mean), inv)
        elif mode in ("batch", "collect"):
            n = x.data.shape[0]
            if n < 2:
                raise BatchTooSmallError(f"batch statistics need >= 2 samples, got {n}")
            mean = ad.tmean(x, axis=0)
            centered = ad.subtract(x, mean)
            var = ad.tmean(ad.multiply(centered, centered), axis=0)
            inv = ad.power(ad.add(var, self.eps), -0.5)
            normalized = ad.multiply(centered, inv)
            if mode == "collect":
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * mean.data
                self.running_var = (1.0 - m) * self.running_var + m * var.data
        else:
            raise ValueError(f"unknown batch-norm mode {mode!r}")
        return ad.add(ad.multiply(normalized, self.gamma), self.beta)


class Model:
    """Feature extractor + frozen classifier + projection head.

    ``n_blocks`` repetitions of (linear -> batch norm -> relu) produce
    ``hidden_dim``-wide features; a linear classifier maps them to class
    logits and the projection head maps them to unit-norm ``embed_dim``
    vectors.
    """

    def __init__(
        self,
        input_dim: int,
        n_classes: int,
        hidden_dim: int = 32,
        embed_dim: int = 16,
        n_blocks: int = 2,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.n_classes = n_classes
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.n_blocks = n_blocks
        self.blocks: list[tuple[Linear, BatchNorm]] = []
        prev = input_dim
        for _ in range(n_blocks):
            self.blocks.append((Linear(prev, hidden_dim, rng), BatchNorm(hidden_dim)))
            prev = hidden_dim
        self.classifier = Linear(prev, n_classes, rng)
        self.proj_hidden = Linear(prev, hidden_dim, rng)
        self.proj_out = Linear(hidden_dim, embed_dim, rng)

    # -- forward ----------------------------------------------------------

    def features(self, x, bn_mode: BNMode = "batch") -> Tensor:
        h = ad.as_tensor(x)
        if h.data.ndim != 2 or h.data.shape[1] != self.input_dim:
            raise ShapeError(
                f"model expects (n, {self.input_dim}) inputs, got {h.data.shape}"
            )
        for linear, bn in self.blocks:
            h = ad.relu(bn.forward(linear(h), bn_mode))
        return h

    def logits(self, feats: Tensor) -> Tensor:
        return self.classifier(feats)

    def predict_proba(self, x, bn_mode: BNMode = "batch") -> Tensor:
        return ad.softmax(self.logits(self.features(x, bn_mode)))

    def project(self, feats) -> Tensor:
        h = ad.relu(self.proj_hidden(ad.as_tensor(feats)))
        return ad.l2_normalize(self.proj_out(h))

    # -- parameter bookkeeping ---------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (linear, bn) in enumerate(self.blocks):
            out[f"block{i}.linear.weight"] = linear.weight
            out[f"block{i}.linear.bias"] = linear.bias
            out[f"block{i}.bn.gamma"] = bn.gamma
            out[f"block{i}.bn.beta"] = bn.beta
        out["classifier.weight"] = self.classifier.weight
        out["classifier.bias"] = self.classifier.bias
        out["projection.hidden.weight"] = self.proj_hidden.weight
        out["projection.hidden.bias"] = self.proj_hidden.bias
        out["projection.out.weight"] = self.proj_out.weight
        out["projection.out.bias"] = self.proj_out.bias
        return out

    def partition(self) -> dict[str, str]:
        """Label every parameter as bn-affine, projection, or frozen."""
        labels = {}
        for name in self.named_params():
            if ".bn." in name:
                labels[name] = "bn-affine"
            elif name.startswith("projection."):
                labels[name] = "projection"
            else:
                labels[name] = "frozen"
        return labels

    def trainable_params(self) -> list[Tensor]:
        """Parameters updated during adaptation: BN affine + projection head."""
        partition = self.partition()
        return [t for name, t in self.named_params().items() if partition[name] != "frozen"]

    def bn_affine_params(self) -> list[Tensor]:
        partition = self.partition()
        return [t for name, t in self.named_params().items() if partition[name] == "bn-affine"]

    def trainable_param_count(self) -> int:
        return sum(t.data.size for t in self.trainable_params())

    def set_requires_grad(self, names_to_flags: dict[str, bool]) -> None:
        params = self.named_params()
        for name, flag in names_to_flags.items():
            params[name].requires_grad = flag

    def freeze_for_adaptation(self) -> None:
        """Restrict differentiation to the adaptation partition."""
        partition = self.partition()
        for name, tensor in self.named_params().items():
            tensor.requires_grad = partition[name] != "frozen"

    def set_all_trainable(self) -> None:
        for tensor in self.named_params().values():
            tensor.requires_grad = True

    def reinit_projection(self, rng: np.random.Generator) -> None:
        """Fresh random projection head (deployment-time initialization)."""
        self.proj_hidden = Linear(self.hidden_dim, self.hidden_dim, rng)
        self.proj_out = Linear(self.hidden_dim, self.embed_dim, rng)

    # -- state -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_params().items()}
        for i, (_, bn) in enumerate(self.blocks):
            state[f"block{i}.bn.running_mean"] = bn.running_mean.copy()
            state[f"block{i}.bn.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        for name, tensor in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.data.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != {tensor.data.shape}")
            tensor.data = value.copy()
            tensor.grad = None
        for i, (_, bn) in enumerate(self.blocks):
            bn.running_mean = np.asarray(state[f"block{i}.bn.running_mean"], dtype=np.float64).copy()
            bn.running_var = np.asarray(state[f"block{i}.bn.running_var"], dtype=np.float64).copy()

    def clone(self) -> "Model":
        twin = Model(
            self.input_dim,
            self.n_classes,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            n_blocks=self.n_blocks,
            rng=np.random.default_rng(0),
        )
        twin.load_state_dict(self.state_dict())
        return twin

    def snapshot(self) -> "Model":
        """Frozen deep copy: all outputs are constants in any graph."""
        twin = self.clone()
        for tensor in twin.named_params().values():
            tensor.requires_grad = False
        return twin

    def save(self, path) -> None:
        """Write parameters and running statistics as a flat key->array file."""
        meta = {
            "meta.input_dim": np.array(self.input_dim),
            "meta.n_classes": np.array(self.n_classes),
            "meta.hidden_dim": np.array(self.hidden_dim),
            "meta.embed_dim": np.array(self.embed_dim),
            "meta.n_blocks": np.array(self.n_blocks),
        }
        np.savez(path, **self.state_dict(), **meta)

    @classmethod
    def load(cls, path) -> "Model":
        with np.load(path) as stored:
            state = {k: stored[k] for k in stored.files}
        model = cls(
            int(state.pop("meta.input_dim")),
            int(state.pop("meta.n_classes")),
            hidden_dim=int(state.pop("meta.hidden_dim")),
            embed_dim=int(state.pop("meta.embed_dim")),
            n_blocks=int(state.pop("meta.n_blocks")),
            rng=np.random.default_rng(0),
        )
        model.load_state_dict(state)
        return model


def state_checksum(state: dict[str, np.ndarray]) -> bytes:
    """Order-independent fingerprint of a state dict (testing aid)."""
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state[name]).tobytes())
    return digest.digest()
