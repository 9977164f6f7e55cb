"""Estimator-style adapters: fit a source model, then adapt on test batches.

``TTAClassifier`` follows the scikit-learn estimator conventions
(constructor stores hyperparameters verbatim, ``fit``/``predict``/
``get_params`` work as usual, fitted state lives in trailing-underscore
attributes) with one streaming extension: :meth:`adapt` consumes one
unlabeled test batch, updates the adaptation partition according to the
chosen policy, and returns predictions computed before the update landed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .errors import ConfigError
from .losses import build_view_batch, cross_entropy, entropy_loss, sata_loss
from .nn import Model
from .optim import Adam, make_optimizer
from .prototypes import PrototypeBank, compute_prototypes
from .validation import as_label_vector, as_sample_matrix, check_feature_dim

logger = logging.getLogger(__name__)

POLICIES = ("source", "bn_stats", "tent", "sata")

_AUGMENT_KEY = 0xA46


@dataclass
class SourceBundle:
    """Everything the deployment needs from source training."""

    state: dict[str, np.ndarray]
    prototypes: np.ndarray
    classes: np.ndarray
    input_dim: int
    n_classes: int
    hidden_dim: int
    embed_dim: int
    n_blocks: int
    seed: int

    def build_model(self) -> Model:
        model = Model(
            self.input_dim,
            self.n_classes,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            n_blocks=self.n_blocks,
            rng=np.random.default_rng(0),
        )
        model.load_state_dict(self.state)
        return model

    def save(self, path) -> None:
        arrays = {f"state.{k}": v for k, v in self.state.items()}
        arrays["prototypes"] = self.prototypes
        arrays["classes"] = self.classes
        arrays["meta"] = np.array(
            [self.input_dim, self.n_classes, self.hidden_dim, self.embed_dim, self.n_blocks, self.seed]
        )
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "SourceBundle":
        with np.load(path) as stored:
            state = {k[len("state."):]: stored[k] for k in stored.files if k.startswith("state.")}
            meta = stored["meta"]
            return cls(
                state=state,
                prototypes=stored["prototypes"],
                classes=stored["classes"],
                input_dim=int(meta[0]),
                n_classes=int(meta[1]),
                hidden_dim=int(meta[2]),
                embed_dim=int(meta[3]),
                n_blocks=int(meta[4]),
                seed=int(meta[5]),
            )


def train_source_model(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    hidden_dim: int = 32,
    embed_dim: int = 16,
    n_blocks: int = 2,
    epochs: int = 20,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
) -> Model:
    """Fit the feature extractor and classifier on labeled source data.

    Batch-norm layers run in collect mode so the running statistics record
    the source distribution. The projection head is re-initialized at the
    end: it plays no role until deployment.
    """
    init_rng, shuffle_rng, proj_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    model = Model(
        X.shape[1], n_classes, hidden_dim=hidden_dim, embed_dim=embed_dim,
        n_blocks=n_blocks, rng=init_rng,
    )
    model.set_all_trainable()
    params = [
        t for name, t in model.named_params().items() if not name.startswith("projection.")
    ]
    optimizer = Adam(params, lr=lr)
    n = X.shape[0]
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if idx.size < 2:
                continue
            probs = model.predict_proba(X[idx], bn_mode="collect")
            loss = cross_entropy(probs, y[idx])
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()
    model.reinit_projection(proj_rng)
    return model


def _source_features(model: Model, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Features of the source data under batch-statistics normalization.

    Chunks are fixed-order and fixed-size (a lone trailing sample joins the
    previous chunk) so the result is deterministic; running statistics are
    left untouched.
    """
    n = X.shape[0]
    parts = []
    start = 0
    while start < n:
        stop = min(start + chunk, n)
        if n - stop == 1:
            stop = n
        parts.append(model.features(X[start:stop], bn_mode="batch").data)
        start = stop
    return np.concatenate(parts, axis=0)


def build_source_bundle(
    X: np.ndarray,
    y: np.ndarray,
    classes: np.ndarray,
    hidden_dim: int = 32,
    embed_dim: int = 16,
    n_blocks: int = 2,
    train_epochs: int = 20,
    train_batch_size: int = 128,
    train_lr: float = 1e-3,
    seed: int = 0,
) -> SourceBundle:
    """Train the source model and compute its class prototypes."""
    n_classes = len(classes)
    model = train_source_model(
        X, y, n_classes,
        hidden_dim=hidden_dim, embed_dim=embed_dim, n_blocks=n_blocks,
        epochs=train_epochs, batch_size=train_batch_size, lr=train_lr, seed=seed,
    )
    feats = _source_features(model, X)
    bank = compute_prototypes(feats, y, n_classes)
    return SourceBundle(
        state=model.state_dict(),
        prototypes=np.array(bank.prototypes),
        classes=np.asarray(classes),
        input_dim=X.shape[1],
        n_classes=n_classes,
        hidden_dim=hidden_dim,
        embed_dim=embed_dim,
        n_blocks=n_blocks,
        seed=seed,
    )


class TTAClassifier(BaseEstimator, ClassifierMixin):
    """Continual test-time adaptation over a frozen source model.

    Parameters
    ----------
    policy : {"sata", "tent", "bn_stats", "source"}, default="sata"
        What happens on each test batch. ``source`` predicts with the
        frozen model and its stored running statistics; ``bn_stats``
        predicts with current-batch statistics but changes no parameters;
        ``tent`` minimizes prediction entropy over the BN affine
        parameters; ``sata`` minimizes the anchoring + alignment objective
        over BN affine and projection parameters.
    optimizer : {"adam", "sgd"}, default="adam"
    lr : float, default=1e-3
        Adaptation learning rate (one gradient step per batch by default).
    tau : float, default=0.1
        Contrastive temperature.
    steps_per_batch : int, default=1
    disable_ta, disable_prototypes, disable_augmented_view : bool
        Ablation switches for the ``sata`` policy.
    hidden_dim, embed_dim, n_blocks : int
        Architecture of the feature extractor and projection head.
    train_epochs, train_batch_size, train_lr :
        Source-training hyperparameters used by :meth:`fit`.
    seed : int, default=0
        Drives source training, deployment initialization, and the
        augmentation stream; identical seeds reproduce runs bit-exactly.

    The streaming entry point is :meth:`adapt`, which mutates only the
    policy's declared parameter partition. ``predict``/``predict_proba``
    never adapt. :meth:`reset` returns the live model to its deployment
    state so a fitted estimator can serve multiple independent runs.
    """

    def __init__(
        self,
        policy: str = "sata",
        optimizer: str = "adam",
        lr: float = 1e-3,
        tau: float = 0.1,
        steps_per_batch: int = 1,
        disable_ta: bool = False,
        disable_prototypes: bool = False,
        disable_augmented_view: bool = False,
        hidden_dim: int = 32,
        embed_dim: int = 16,
        n_blocks: int = 2,
        train_epochs: int = 20,
        train_batch_size: int = 128,
        train_lr: float = 1e-3,
        seed: int = 0,
    ):
        self.policy = policy
        self.optimizer = optimizer
        self.lr = lr
        self.tau = tau
        self.steps_per_batch = steps_per_batch
        self.disable_ta = disable_ta
        self.disable_prototypes = disable_prototypes
        self.disable_augmented_view = disable_augmented_view
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.n_blocks = n_blocks
        self.train_epochs = train_epochs
        self.train_batch_size = train_batch_size
        self.train_lr = train_lr
        self.seed = seed

    # -- setup --------------------------------------------------------------

    def _validate_hyperparams(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}, expected one of {POLICIES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.steps_per_batch < 1:
            raise ConfigError("steps_per_batch must be >= 1")
        if (
            self.policy == "sata"
            and not self.disable_ta
            and self.disable_prototypes
            and self.disable_augmented_view
        ):
            raise ConfigError(
                "target alignment needs the augmented view or prototypes; "
                "disable_ta to drop it entirely"
            )

    def fit(self, X, y) -> "TTAClassifier":
        """Train the source model on labeled source-domain data."""
        self._validate_hyperparams()
        X = as_sample_matrix(X)
        y = as_label_vector(y, n_rows=X.shape[0])
        classes, y_idx = np.unique(y, return_inverse=True)
        if classes.size < 2:
            raise ConfigError("need at least two classes")
        bundle = build_source_bundle(
            X, y_idx, classes,
            hidden_dim=self.hidden_dim, embed_dim=self.embed_dim, n_blocks=self.n_blocks,
            train_epochs=self.train_epochs, train_batch_size=self.train_batch_size,
            train_lr=self.train_lr, seed=self.seed,
        )
        return self.attach_source(bundle)

    def attach_source(self, bundle: SourceBundle) -> "TTAClassifier":
        """Deploy from an existing source bundle instead of training one."""
        self._validate_hyperparams()
        self.bundle_ = bundle
        self.classes_ = np.asarray(bundle.classes)
        self.n_features_in_ = bundle.input_dim
        snapshot_base = bundle.build_model()
        self.snapshot_ = snapshot_base.snapshot()
        self.bank_ = PrototypeBank(bundle.prototypes)
        self.reset()
        return self

    def reset(self) -> None:
        """Restore the live model and optimizer to the deployment state."""
        model = self.bundle_.build_model()
        model.freeze_for_adaptation()
        self.model_ = model
        if self.policy == "tent":
            params = model.bn_affine_params()
        elif self.policy == "sata":
            params = model.trainable_params()
        else:
            params = []
        self.optimizer_ = make_optimizer(self.optimizer, params, self.lr) if params else None
        self.adapt_rng_ = np.random.default_rng(
            np.random.SeedSequence(entropy=self.bundle_.seed, spawn_key=(_AUGMENT_KEY,))
        )
        self.n_batches_adapted_ = 0
        self.n_batches_skipped_ = 0

    # -- inference ------------------------------------------------------------

    def _inference_mode(self) -> str:
        return "running" if self.policy == "source" else "batch"

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities without any adaptation.

        Uses the policy's normalization (running statistics for ``source``,
        current-batch statistics otherwise); single-sample inputs fall back
        to running statistics.
        """
        X = as_sample_matrix(X)
        check_feature_dim(X, self.n_features_in_)
        mode = self._inference_mode() if X.shape[0] >= 2 else "running"
        return self.model_.predict_proba(X, bn_mode=mode).data

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def n_adaptation_params(self) -> int:
        if self.optimizer_ is None:
            return 0
        return sum(p.data.size for p in self.optimizer_.params)

    # -- streaming ------------------------------------------------------------

    def adapt(self, X) -> np.ndarray:
        """Consume one unlabeled test batch: adapt, then return predictions.

        Predictions come from the forward pass that produced the loss, i.e.
        before the parameter update lands. Batches with fewer than two
        samples are scored with running statistics and skipped for
        adaptation.
        """
        X = as_sample_matrix(X)
        check_feature_dim(X, self.n_features_in_)
        if X.shape[0] < 2:
            logger.warning("batch of %d samples scored without adaptation", X.shape[0])
            self.n_batches_skipped_ += 1
            probs = self.model_.predict_proba(X, bn_mode="running").data
            return self.classes_[np.argmax(probs, axis=1)]

        if self.policy == "source":
            probs = self.model_.predict_proba(X, bn_mode="running").data
        elif self.policy == "bn_stats":
            probs = self.model_.predict_proba(X, bn_mode="batch").data
        elif self.policy == "tent":
            probs = self._tent_step(X)
        else:
            probs = self._sata_step(X)
        self.n_batches_adapted_ += 1
        return self.classes_[np.argmax(probs, axis=1)]

    def _tent_step(self, X: np.ndarray) -> np.ndarray:
        first_probs = None
        for _ in range(self.steps_per_batch):
            probs = self.model_.predict_proba(X, bn_mode="batch")
            if first_probs is None:
                first_probs = probs.data
            loss = entropy_loss(probs)
            self.optimizer_.zero_grad()
            ad.backward(loss)
            self.optimizer_.step()
        return first_probs

    def _sata_step(self, X: np.ndarray) -> np.ndarray:
        batch = build_view_batch(self.snapshot_, X, self.adapt_rng_)
        first_probs = None
        for _ in range(self.steps_per_batch):
            loss, probs = sata_loss(
                self.model_,
                batch,
                self.bank_,
                tau=self.tau,
                use_target_alignment=not self.disable_ta,
                use_prototypes=not self.disable_prototypes,
                use_augmented_view=not self.disable_augmented_view,
            )
            if first_probs is None:
                first_probs = probs.data
            self.optimizer_.zero_grad()
            ad.backward(loss)
            self.optimizer_.step()
        return first_probs
