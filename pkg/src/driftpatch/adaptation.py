"""Patching variants, transfer-learning baselines and their shared plumbing.

The frozen base network M is tapped at an engagement layer.  A patch P is
trained on those activations after a drift is signaled, and an optional
error estimator E decides per instance whether M or P classifies it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .seeding import derive_seed
from .streams import LabeledImages

log = logging.getLogger(__name__)

INCLUSIVE, SEMI, EXCLUSIVE = "inclusive", "semi_exclusive", "exclusive"
BASE_EE, PATCH_EE = "base", "patch"

RANDOM_INIT, PRETRAINED_INIT = "random_glorot", "pretrained_on_old_concept"
REHEARSAL_SUFFIX = "+rehearsal"


class AdaptationError(Exception):
    """Bad model configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0

    def make(self) -> nn.Optimizer:
        if self.kind == "adam":
            return nn.Adam(self.lr, self.beta1, self.beta2, self.eps)
        if self.kind == "sgd":
            return nn.SGD(self.lr, self.momentum)
        raise AdaptationError(f"unknown optimizer {self.kind!r}")


@dataclass(frozen=True)
class PatchConfig:
    """Patch / estimator shape and training knobs.

    ``engagement_layer`` is a layer index, a layer name, or "auto" for the
    architecture's default.
    """
    engagement_layer: int | str = "auto"
    tap_point: str = nn.POST
    hidden: tuple = (512,)
    dropout_in: float = 0.25
    dropout_hidden: float = 0.5
    init: str = RANDOM_INIT
    epochs_per_chunk: int = 1
    minibatch: int = 64
    threshold: float = 0.5
    estimator_first: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if not all(int(w) > 0 for w in self.hidden):
            raise AdaptationError(f"hidden widths must be positive, got {self.hidden}")
        for d in (self.dropout_in, self.dropout_hidden):
            if not 0.0 <= d < 1.0:
                raise AdaptationError(f"dropout must lie in [0, 1), got {d}")
        if self.init not in (RANDOM_INIT, PRETRAINED_INIT):
            raise AdaptationError(f"unknown patch init {self.init!r}")
        if self.tap_point not in ("pre", "post", nn.PRE, nn.POST):
            raise AdaptationError(f"unknown tap point {self.tap_point!r}")
        if self.epochs_per_chunk < 1 or self.minibatch < 1:
            raise AdaptationError("epochs_per_chunk and minibatch must be >= 1")

    @property
    def tap(self) -> str:
        return nn._TAP_ALIASES[self.tap_point]


@dataclass(frozen=True)
class VariantSpec:
    training_scheme: str
    error_target: str | None
    rehearsal: bool = False

    def __post_init__(self):
        if self.training_scheme not in (INCLUSIVE, SEMI, EXCLUSIVE):
            raise AdaptationError(f"unknown training scheme {self.training_scheme!r}")
        if self.error_target not in (None, BASE_EE, PATCH_EE):
            raise AdaptationError(f"unknown error target {self.error_target!r}")
        if self.training_scheme == SEMI and self.error_target is None:
            raise AdaptationError("semi-exclusive training needs an error estimator")
        if self.rehearsal and self.error_target is None:
            raise AdaptationError("rehearsal applies to the error estimator; pick a variant with one")


VARIANTS = {
    "incl_noEE": VariantSpec(INCLUSIVE, None),
    "incl_baseEE": VariantSpec(INCLUSIVE, BASE_EE),
    "semi_baseEE": VariantSpec(SEMI, BASE_EE),
    "excl_baseEE": VariantSpec(EXCLUSIVE, BASE_EE),
    "incl_patchEE": VariantSpec(INCLUSIVE, PATCH_EE),
    "semi_patchEE": VariantSpec(SEMI, PATCH_EE),
    "excl_patchEE": VariantSpec(EXCLUSIVE, PATCH_EE),
}
BASELINES = ("freezing", "base_update", "baseline")
MODEL_IDS = tuple(VARIANTS) + BASELINES


def parse_model_id(model_id: str) -> tuple[str, bool]:
    """Split an identifier like ``incl_baseEE+rehearsal`` into (name, rehearsal)."""
    name, rehearsal = model_id, False
    if model_id.endswith(REHEARSAL_SUFFIX):
        name, rehearsal = model_id[: -len(REHEARSAL_SUFFIX)], True
    if name not in MODEL_IDS:
        raise AdaptationError(f"unknown model id {model_id!r}; choose from {', '.join(MODEL_IDS)}")
    if rehearsal and name not in VARIANTS:
        raise AdaptationError(f"{name} does not support rehearsal")
    return name, rehearsal


# ---------------------------------------------------------------------------
# base networks
# ---------------------------------------------------------------------------

FCNN, CNN = "fcnn", "cnn"


def fcnn_layers(input_shape=(28, 28), classes: int = 10) -> list:
    return [nn.Input(tuple(input_shape)), nn.Flatten(), nn.Dropout(0.2),
            nn.Dense(2048), nn.Dense(1024), nn.Dense(1024), nn.Dense(512), nn.Dense(128),
            nn.Dropout(0.5), nn.SoftmaxOutput(classes)]


def cnn_layers(input_shape=(28, 28), classes: int = 10) -> list:
    return [nn.Input(tuple(input_shape)), nn.Conv2D(32, 3, 1), nn.Conv2D(64, 3, 1), nn.MaxPool(2, 2),
            nn.Dropout(0.25), nn.Flatten(), nn.Dense(128), nn.Dropout(0.5), nn.SoftmaxOutput(classes)]


ARCHITECTURES = {FCNN: fcnn_layers, CNN: cnn_layers}


def arch_of(net: nn.Network) -> str:
    return CNN if any(isinstance(s, nn.Conv2D) for s in net.layers) else FCNN


def build_base(arch: str, init_set: LabeledImages, num_classes: int, epochs: int = 10,
               minibatch: int = 64, seed: int = 0, optimizer: OptimizerConfig | None = None,
               stagnation: tuple[int, float] | None = None, max_retries: int = 3,
               trainer: Callable = nn.train_epochs) -> nn.Network:
    """Train a base classifier on the init set.

    With ``stagnation=(window, tol)`` a run whose epoch losses flatten out is
    discarded and retried from a fresh seed, up to ``max_retries`` times.  The
    seeds tried and their loss histories end up in ``net.training_log``.
    """
    if arch not in ARCHITECTURES:
        raise AdaptationError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    if len(init_set) == 0:
        raise AdaptationError("init set is empty")
    optimizer = optimizer or OptimizerConfig()
    attempts = []
    attempt_seed = seed
    for attempt in range(max_retries + 1):
        net = nn.Network(ARCHITECTURES[arch](init_set.images.shape[1:], num_classes),
                         rng_seed=derive_seed(attempt_seed, "base", arch))
        history = trainer(net, init_set.images, init_set.labels, epochs, minibatch,
                          optimizer.make(), np.random.default_rng(derive_seed(attempt_seed, "base-train")))
        attempts.append((attempt_seed, list(history)))
        if stagnation is None or not nn.detect_stagnation(history, *stagnation):
            break
        new_seed = derive_seed(attempt_seed, "retry", attempt)
        log.warning("base training stagnated (seed %d, losses %s); reinitializing with seed %d",
                    attempt_seed, [round(h, 4) for h in history[-stagnation[0]:]], new_seed)
        attempt_seed = new_seed
    net.training_log = attempts
    return net


@dataclass(frozen=True)
class EngagementChoice:
    candidates: tuple
    default: str
    tap_point: str = nn.POST


def default_engagement_layer(arch: str) -> EngagementChoice:
    """Heuristic engagement layers for the two base architectures."""
    if arch == FCNN:
        return EngagementChoice(("fc1", "fc2"), "fc1")
    if arch == CNN:
        return EngagementChoice(("conv2", "pool1"), "pool1")
    raise AdaptationError(f"no engagement heuristic for architecture {arch!r}")


def resolve_engagement(base: nn.Network, layer: int | str) -> int:
    if layer == "auto":
        layer = default_engagement_layer(arch_of(base)).default
    idx = base.layer_index(layer)
    if isinstance(base.layers[idx], (nn.Dropout, nn.Flatten)):
        raise nn.InvalidLayerError(f"layer {base.names[idx]} does not produce its own output")
    return idx


def engagement_features(base: nn.Network, layer: int) -> int:
    return int(np.prod(base.shapes[nn.resolve_tap(base, layer)]))


def _head_layers(features: int, cfg: PatchConfig, outputs: int) -> list:
    layers = [nn.Input((features,))]
    if cfg.dropout_in > 0:
        layers.append(nn.Dropout(cfg.dropout_in))
    layers += [nn.Dense(int(w)) for w in cfg.hidden]
    if cfg.dropout_hidden > 0:
        layers.append(nn.Dropout(cfg.dropout_hidden))
    layers.append(nn.SoftmaxOutput(outputs))
    return layers


def build_patch(base: nn.Network, cfg: PatchConfig, num_classes: int, seed: int) -> nn.Network:
    """Input-Dropout(d1)-FC(w)...-Dropout(d2)-Softmax over the engagement output."""
    layer = resolve_engagement(base, cfg.engagement_layer)
    return nn.Network(_head_layers(engagement_features(base, layer), cfg, num_classes),
                      rng_seed=derive_seed(seed, "patch"))


def build_estimator(base: nn.Network, cfg: PatchConfig, seed: int) -> nn.Network:
    """Same shape as the patch with two outputs: 0 = no error, 1 = error."""
    layer = resolve_engagement(base, cfg.engagement_layer)
    return nn.Network(_head_layers(engagement_features(base, layer), cfg, 2),
                      rng_seed=derive_seed(seed, "estimator"))


def frozen(net: nn.Network) -> nn.Network:
    """A view of ``net`` sharing its parameter arrays with every layer frozen."""
    return nn.Network(net.layers, net.params, [False] * len(net.layers), net.rng_seed, net.names)


# ---------------------------------------------------------------------------
# training sets and diversion
# ---------------------------------------------------------------------------

@dataclass
class ErrorRegionLabels:
    true_base_error: np.ndarray
    estimated_base_error: np.ndarray
    true_patch_error: np.ndarray
    estimated_patch_error: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=bool) for a in
                  (self.true_base_error, self.estimated_base_error, self.true_patch_error, self.estimated_patch_error)]
        if len({len(a) for a in arrays}) != 1:
            raise AdaptationError("error-region label arrays differ in length")
        (self.true_base_error, self.estimated_base_error,
         self.true_patch_error, self.estimated_patch_error) = arrays

    def __len__(self) -> int:
        return len(self.true_base_error)


def select_training_set(scheme: str, labels: ErrorRegionLabels, error_target: str | None) -> np.ndarray:
    """Sorted instance indices the patch trains on for this chunk."""
    n = len(labels)
    if scheme == INCLUSIVE:
        return np.arange(n)
    if scheme == EXCLUSIVE:
        return np.flatnonzero(labels.true_base_error)
    if scheme == SEMI:
        if error_target == BASE_EE:
            return np.flatnonzero(labels.true_base_error | labels.estimated_base_error)
        if error_target == PATCH_EE:
            return np.flatnonzero(labels.true_base_error | ~labels.estimated_patch_error)
        raise AdaptationError("semi-exclusive training needs an error estimator")
    raise AdaptationError(f"unknown training scheme {scheme!r}")


def divert_to_patch(error_target: str | None, error_prob: np.ndarray | None, n: int,
                    threshold: float = 0.5) -> np.ndarray:
    """Boolean mask of instances the patch classifies.

    ``error_prob`` is E's probability for class 1 (error).  At the default
    threshold this is plain argmax with ties going to class 0.
    """
    if error_target is None:
        return np.ones(n, dtype=bool)
    says_error = np.asarray(error_prob) > threshold
    if error_target == BASE_EE:
        return says_error
    return ~says_error


def perfect_ensemble_accuracy(base_preds, patch_preds, labels) -> float:
    """Fraction of instances where base or patch is right."""
    base_preds, patch_preds, labels = map(np.asarray, (base_preds, patch_preds, labels))
    if not len(base_preds) == len(patch_preds) == len(labels):
        raise AdaptationError("prediction and label arrays differ in length")
    if len(labels) == 0:
        raise AdaptationError("no instances")
    return float(np.mean((base_preds == labels) | (patch_preds == labels)))


def choose_patch_init(base_acc_after_drift: float, threshold: float = 0.5) -> str:
    """Keep pre-trained patch weights only if the base still beats ``threshold``."""
    if not 0.0 <= base_acc_after_drift <= 1.0:
        raise AdaptationError("base accuracy must lie in [0, 1]")
    return "pretrained" if base_acc_after_drift > threshold else "reinitialize"


# ---------------------------------------------------------------------------
# per-chunk activation cache
# ---------------------------------------------------------------------------

class ChunkView:
    """Images of one chunk plus memoized activations of frozen networks.

    Entries are keyed by the identity of the parameter arrays involved, so
    every wrapper around the same frozen base shares them.  Only activations
    that cannot change (all layers up to the tap frozen) are cached.
    """

    def __init__(self, images: np.ndarray, batch_size: int = 500):
        self.images = np.asarray(images, dtype=nn.real_type)
        self.batch_size = batch_size
        self._taps: dict = {}
        self._preds: dict = {}

    def __len__(self) -> int:
        return len(self.images)

    @staticmethod
    def _key(net: nn.Network, upto: int):
        return tuple(id(p) for p in net.params[: upto + 1] if p is not None) + (upto,)

    def prefetch(self, net: nn.Network, taps: Sequence[tuple[int, str]] = ()) -> None:
        """One batched forward pass of ``net`` collecting predictions and taps."""
        taps = [(int(l), nn._TAP_ALIASES[p]) for l, p in taps]
        probs, collected = [], {t: [] for t in taps}
        for lo in range(0, len(self.images), self.batch_size):
            tr = nn._run(net, self.images[lo:lo + self.batch_size], "infer", None)
            probs.append(tr.post[-1])
            for layer, point in taps:
                collected[(layer, point)].append(nn.tap_from_trace(net, tr, layer, point))
        preds = np.concatenate(probs).argmax(axis=1) if probs else np.zeros(0, dtype=np.int64)
        if not any(net.trainable):
            self._preds[self._key(net, len(net.layers) - 1)] = preds
        for (layer, point), parts in collected.items():
            feats = np.concatenate(parts) if parts else np.zeros((0, 0), dtype=nn.real_type)
            if net.frozen_through() >= layer:
                self._taps[(self._key(net, layer), point)] = feats
        self._last = (preds, {t: np.concatenate(v) for t, v in collected.items() if v})

    def predictions(self, net: nn.Network) -> np.ndarray:
        key = self._key(net, len(net.layers) - 1)
        if key in self._preds:
            return self._preds[key]
        if len(self.images) == 0:
            return np.zeros(0, dtype=np.int64)
        self.prefetch(net)
        return self._last[0]

    def features(self, net: nn.Network, layer: int, point: str = nn.POST) -> np.ndarray:
        point = nn._TAP_ALIASES[point]
        key = (self._key(net, layer), point)
        if key in self._taps:
            return self._taps[key]
        if net.frozen_through() >= layer:
            feats = nn.activation_at(net, layer, self.images, point, self.batch_size)
            self._taps[key] = feats
            return feats
        return nn.activation_at(net, layer, self.images, point, self.batch_size)


# ---------------------------------------------------------------------------
# adaptive models
# ---------------------------------------------------------------------------

class AdaptiveModel:
    """Common interface driven by the prequential harness."""

    model_id: str = "model"
    uses_patch = False

    def __init__(self, base: nn.Network, seed: int):
        self.base = frozen(base)
        self.seed = int(seed)
        self.rng = np.random.default_rng(derive_seed(self.seed, "model-rng"))
        self.drift_seen = False

    def required_taps(self) -> list[tuple[int, str]]:
        """Base taps this model will ask for on every chunk."""
        return []

    def classify(self, view: ChunkView) -> tuple[np.ndarray, np.ndarray | None]:
        """Predictions for the chunk and, for patching models, the diversion mask."""
        return view.predictions(self.base), None

    def signal_drift(self, chunk_index: int) -> None:
        self.drift_seen = True

    def train_on_chunk(self, view: ChunkView, labels: np.ndarray) -> None:
        pass


class FrozenBaseline(AdaptiveModel):
    """The base classifier left untouched."""

    model_id = "baseline"


class FreezingModel(AdaptiveModel):
    """Fine-tunes the layers after the engagement layer; the prefix stays frozen.

    Before the first drift the unmodified base classifies.
    """

    model_id = "freezing"

    def __init__(self, base: nn.Network, engagement_layer: int | str, tail_init: str = "transfer",
                 seed: int = 0, cfg: PatchConfig | None = None):
        super().__init__(base, seed)
        if tail_init not in ("transfer", "random"):
            raise AdaptationError(f"tail_init must be transfer or random, got {tail_init!r}")
        self.cfg = cfg or PatchConfig()
        self.layer = resolve_engagement(base, engagement_layer)
        self.tail_init = tail_init
        self.net = nn.freeze_prefix(base.copy(), self.layer)
        if tail_init == "random":
            rng = np.random.default_rng(derive_seed(self.seed, "freezing-tail"))
            for i in range(self.layer + 1, len(self.net.layers)):
                p = self.net.params[i]
                if p is not None:
                    p["W"] = nn.glorot_uniform_init(p["W"].shape, rng)
                    p["b"] = np.zeros_like(p["b"])
        self.opt = self.cfg.optimizer.make()

    def required_taps(self):
        return []

    def _prefix(self, view: ChunkView) -> np.ndarray:
        feats = view.features(self.net, self.layer, nn.POST)
        return feats.reshape((len(feats),) + tuple(self.net.shapes[self.layer]))

    def classify(self, view):
        if not self.drift_seen:
            return view.predictions(self.base), None
        return nn.predict(self.net, self._prefix(view), start=self.layer + 1), None

    def train_on_chunk(self, view, labels):
        if self.drift_seen and len(labels):
            nn.train_epochs(self.net, self._prefix(view), labels, self.cfg.epochs_per_chunk,
                            self.cfg.minibatch, self.opt, self.rng, start=self.layer + 1)


def build_freezing(base: nn.Network, engagement_layer: int | str, tail_init: str = "transfer",
                   seed: int = 0, cfg: PatchConfig | None = None) -> FreezingModel:
    return FreezingModel(base, engagement_layer, tail_init, seed, cfg)


class BaseUpdateModel(AdaptiveModel):
    """Keeps training a full copy of the base after the first drift."""

    model_id = "base_update"

    def __init__(self, base: nn.Network, seed: int = 0, cfg: PatchConfig | None = None):
        super().__init__(base, seed)
        self.cfg = cfg or PatchConfig()
        self.net = base.copy()
        self.net.trainable = [True] * len(self.net.layers)
        self.opt = self.cfg.optimizer.make()

    def classify(self, view):
        if not self.drift_seen:
            return view.predictions(self.base), None
        return nn.predict(self.net, view.images), None

    def train_on_chunk(self, view, labels):
        if self.drift_seen and len(labels):
            nn.train_epochs(self.net, view.images, labels, self.cfg.epochs_per_chunk,
                            self.cfg.minibatch, self.opt, self.rng)


@dataclass
class RehearsalBuffer:
    """Stored pre-drift chunk; arrays are read-only."""
    images: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None
    base_error: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.array(self.images, dtype=nn.real_type)
        self.labels = np.array(self.labels)
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)


class PatchingModel(AdaptiveModel):
    """NN-Patching: base M, patch P and optional error estimator E."""

    uses_patch = True

    def __init__(self, base: nn.Network, variant: VariantSpec, cfg: PatchConfig | None = None,
                 num_classes: int | None = None, seed: int = 0, model_id: str | None = None):
        super().__init__(base, seed)
        self.variant = variant
        self.cfg = cfg or PatchConfig()
        self.layer = resolve_engagement(base, self.cfg.engagement_layer)
        self.num_classes = num_classes or base.num_classes
        self.model_id = model_id or _variant_name(variant)
        self.patch: nn.Network | None = None
        self.estimator: nn.Network | None = None
        self.buffer: RehearsalBuffer | None = None
        self._last_chunk: tuple | None = None
        self._fresh_drift = False
        self.train_log: list[dict] = []
        if self.cfg.init == PRETRAINED_INIT:
            self._init_patch()

    # -- construction -----------------------------------------------------
    def _init_patch(self):
        self.patch = build_patch(self.base, replace(self.cfg, engagement_layer=self.layer),
                                 self.num_classes, self.seed)
        self.patch_opt = self.cfg.optimizer.make()

    def _init_estimator(self):
        self.estimator = build_estimator(self.base, replace(self.cfg, engagement_layer=self.layer), self.seed)
        self.estimator_opt = self.cfg.optimizer.make()

    def required_taps(self):
        return [(self.layer, self.cfg.tap)]

    def features(self, view: ChunkView) -> np.ndarray:
        return view.features(self.base, self.layer, self.cfg.tap)

    # -- protocol ---------------------------------------------------------
    def classify(self, view):
        base_preds = view.predictions(self.base)
        if not self.drift_seen:
            return base_preds, np.zeros(len(view), dtype=bool)
        feats = self.features(view)
        patch_preds = nn.predict(self.patch, feats)
        err = nn.predict_proba(self.estimator, feats)[:, 1] if self.estimator is not None else None
        mask = divert_to_patch(self.variant.error_target, err, len(view), self.cfg.threshold)
        return np.where(mask, patch_preds, base_preds), mask

    def signal_drift(self, chunk_index):
        if self.drift_seen:
            return
        self.drift_seen = True
        self._fresh_drift = True
        if self.patch is None:
            self._init_patch()
        if self.variant.error_target is not None:
            self._init_estimator()
        if self.variant.rehearsal:
            if self._last_chunk is None:
                raise AdaptationError("rehearsal needs a full pre-drift chunk before the first change point")
            images, labels = self._last_chunk
            self.buffer = RehearsalBuffer(images, labels)
            self.buffer.features = nn.activation_at(self.base, self.layer, self.buffer.images, self.cfg.tap)
            self.buffer.features.flags.writeable = False
            self.buffer.base_error = nn.predict(self.base, self.buffer.images) != self.buffer.labels
        self._last_chunk = None

    def error_labels(self, view: ChunkView, labels: np.ndarray) -> ErrorRegionLabels:
        """True and estimated error regions on the chunk, before this chunk's updates."""
        feats = self.features(view)
        base_err = view.predictions(self.base) != labels
        patch_err = nn.predict(self.patch, feats) != labels
        if self.estimator is not None:
            est = nn.predict_proba(self.estimator, feats)[:, 1] > self.cfg.threshold
        else:
            est = np.zeros(len(labels), dtype=bool)
        est_base = est if self.variant.error_target == BASE_EE else np.zeros_like(est)
        est_patch = est if self.variant.error_target == PATCH_EE else np.zeros_like(est)
        return ErrorRegionLabels(base_err, est_base, patch_err, est_patch)

    def estimator_targets(self, regions: ErrorRegionLabels) -> np.ndarray:
        err = regions.true_base_error if self.variant.error_target == BASE_EE else regions.true_patch_error
        return err.astype(np.int64)

    def _rehearsal_mix(self, feats, targets):
        buf = self.buffer
        n = len(targets)
        reps = -(-n // len(buf))
        pick = np.concatenate([self.rng.permutation(len(buf)) for _ in range(reps)])[:n]
        if self.variant.error_target == BASE_EE:
            buf_err = buf.base_error
        else:
            buf_err = nn.predict(self.patch, buf.features) != buf.labels
        x = np.concatenate([feats, buf.features[pick]])
        y = np.concatenate([targets, buf_err[pick].astype(np.int64)])
        order = self.rng.permutation(len(y))
        return x[order], y[order]

    def _train_patch(self, feats, labels, regions):
        if self.cfg.init == PRETRAINED_INIT and self._fresh_drift:
            acc = 1.0 - float(np.mean(regions.true_base_error))
            if choose_patch_init(acc) == "reinitialize":
                self._init_patch()
        idx = select_training_set(self.variant.training_scheme, regions, self.variant.error_target)
        if len(idx):
            nn.train_epochs(self.patch, feats[idx], labels[idx], self.cfg.epochs_per_chunk,
                            self.cfg.minibatch, self.patch_opt, self.rng)
        return len(idx)

    def _train_estimator(self, feats, regions):
        x, y = feats, self.estimator_targets(regions)
        if self.buffer is not None:
            x, y = self._rehearsal_mix(x, y)
        nn.train_epochs(self.estimator, x, y, self.cfg.epochs_per_chunk, self.cfg.minibatch,
                        self.estimator_opt, self.rng)
        return len(y)

    def train_on_chunk(self, view, labels):
        labels = np.asarray(labels)
        if not self.drift_seen:
            if self.variant.rehearsal:
                self._last_chunk = (view.images, labels)
            if self.cfg.init == PRETRAINED_INIT and len(labels):
                nn.train_epochs(self.patch, self.features(view), labels, self.cfg.epochs_per_chunk,
                                self.cfg.minibatch, self.patch_opt, self.rng)
            return
        if len(labels) == 0:
            return
        feats = self.features(view)
        regions = self.error_labels(view, labels)
        entry = {}
        if self.estimator is not None and self.cfg.estimator_first:
            entry["estimator_n"] = self._train_estimator(feats, regions)
        entry["patch_n"] = self._train_patch(feats, labels, regions)
        if self.estimator is not None and not self.cfg.estimator_first:
            entry["estimator_n"] = self._train_estimator(feats, regions)
        self.train_log.append(entry)
        self._fresh_drift = False


def _variant_name(variant: VariantSpec) -> str:
    for name, spec in VARIANTS.items():
        if spec.training_scheme == variant.training_scheme and spec.error_target == variant.error_target:
            return name + (REHEARSAL_SUFFIX if variant.rehearsal else "")
    return f"{variant.training_scheme}_{variant.error_target or 'noEE'}"


def build_model(model_id: str, base: nn.Network, cfg: PatchConfig | None = None,
                num_classes: int | None = None, seed: int = 0,
                freezing_tail: str = "transfer") -> AdaptiveModel:
    """Instantiate a model from its identifier (see ``MODEL_IDS``)."""
    name, rehearsal = parse_model_id(model_id)
    cfg = cfg or PatchConfig()
    if name == "baseline":
        return FrozenBaseline(base, seed)
    if name == "base_update":
        return BaseUpdateModel(base, seed, cfg)
    if name == "freezing":
        return FreezingModel(base, cfg.engagement_layer, freezing_tail, seed, cfg)
    variant = replace(VARIANTS[name], rehearsal=rehearsal)
    return PatchingModel(base, variant, cfg, num_classes, seed, model_id)


def classify(model: AdaptiveModel, images: np.ndarray) -> np.ndarray:
    """Predictions of ``model`` for a batch of raw images."""
    return model.classify(ChunkView(images))[0]


def train_on_chunk(model: AdaptiveModel, chunk: LabeledImages) -> AdaptiveModel:
    model.train_on_chunk(ChunkView(chunk.images), chunk.labels)
    return model
