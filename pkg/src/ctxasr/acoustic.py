"""Frame-level acoustic DNNs adapted to utterance context.

Three-stage adaptive training:

1. train a speaker/context independent DNN on normalized frames;
2. freeze it and learn an adaptation network that maps an utterance's
   context vector to a 40-d shift added to every frame of that utterance;
3. freeze the adaptation network and re-update the DNN in the shifted
   feature space.

A concatenation baseline (context appended to every frame) is trained from
scratch for comparison.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import tensors_hash
from .errors import ContractError, DataError, NumericalError, ShapeError
from .nncore import (DenseLayer, Mlp, Optimizer, clip_gradients, cross_entropy,
                     cross_entropy_grad, global_norm)

log = logging.getLogger(__name__)

FEATURE_DIM = 40
STAGES = ("si", "adapt-net-trained", "vat-retrained")


@dataclass
class Utterance:
    utt_id: str
    frames: np.ndarray  # T x D
    labels: np.ndarray  # T
    transcript: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"utterance {self.utt_id}: frames must be T x D with T >= 1")
        if self.labels.shape[0] != self.frames.shape[0]:
            raise DataError(
                f"utterance {self.utt_id}: {self.labels.shape[0]} labels for "
                f"{self.frames.shape[0]} frames"
            )


@dataclass
class FeatureNorm:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: np.ndarray) -> "FeatureNorm":
        std = frames.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(frames.mean(axis=0), std)

    def apply(self, frames):
        return (frames - self.mean) / self.std


@dataclass
class AmConfig:
    seed: int = 0
    epochs: int = 20
    lr: float = 0.02
    batch: int = 64
    optimizer: str = "adagrad"
    hidden: int = 128
    layers: int = 5
    n_classes: Optional[int] = None
    adapt_hidden: Tuple[int, ...] = (64, 64)
    adapt_epochs: Optional[int] = None
    adapt_lr: Optional[float] = None
    vat_epochs: Optional[int] = None
    vat_lr: Optional[float] = None
    adapt_passes: int = 1
    adapt_optimizer: str = "sgd"
    adapt_clip: Optional[float] = 1.0  # global-norm clipping of stage-2 gradients

    # later stages fine-tune, so they default to a tenth of the stage-1 rate
    @property
    def stage2_lr(self):
        return self.adapt_lr if self.adapt_lr is not None else 0.1 * self.lr

    @property
    def stage3_lr(self):
        return self.vat_lr if self.vat_lr is not None else 0.1 * self.lr

    @property
    def stage2_epochs(self):
        return self.adapt_epochs if self.adapt_epochs is not None else self.epochs

    @property
    def stage3_epochs(self):
        return self.vat_epochs if self.vat_epochs is not None else self.epochs


class AcousticDnn:
    """ReLU hidden stack with a softmax output over frame classes.

    ``context_dim`` is 0 for the plain model and the appended context size
    for the concatenation baseline.
    """

    def __init__(self, mlp: Mlp, norm: FeatureNorm, context_dim: int = 0):
        self.mlp = mlp
        self.norm = norm
        self.context_dim = context_dim
        self.history: Dict[str, list] = {}
        if mlp.n_in != norm.mean.shape[0] + context_dim:
            raise ShapeError(
                f"DNN input {mlp.n_in} != feature dim {norm.mean.shape[0]} + context {context_dim}"
            )

    @classmethod
    def init(cls, rng, norm: FeatureNorm, n_classes: int, hidden: int = 128, layers: int = 5,
             context_dim: int = 0):
        sizes = [norm.mean.shape[0] + context_dim] + [hidden] * layers + [n_classes]
        return cls(Mlp.build(rng, sizes, "relu", "softmax"), norm, context_dim)

    @property
    def n_classes(self) -> int:
        return self.mlp.n_out

    @property
    def feature_dim(self) -> int:
        return self.norm.mean.shape[0]

    def params(self):
        return self.mlp.params()

    def tensors(self, prefix="dnn."):
        out = {prefix + k: v for k, v in self.mlp.params().items()}
        out[prefix + "norm.mean"] = self.norm.mean
        out[prefix + "norm.std"] = self.norm.std
        out[prefix + "context_dim"] = np.array([float(self.context_dim)])
        return out

    @classmethod
    def from_tensors(cls, tensors, prefix="dnn."):
        mlp = _mlp_from_tensors(tensors, prefix, "relu", "softmax")
        norm = FeatureNorm(tensors[prefix + "norm.mean"].reshape(-1),
                           tensors[prefix + "norm.std"].reshape(-1))
        return cls(mlp, norm, int(tensors[prefix + "context_dim"].reshape(-1)[0]))


class AdaptationNetwork:
    """Maps a context vector to a feature-space shift; output layer is linear."""

    def __init__(self, mlp: Mlp):
        if mlp.layers[-1].activation != "linear":
            raise ContractError("adaptation network output layer must be linear")
        self.mlp = mlp

    @classmethod
    def init(cls, rng, context_dim: int, hidden=(64, 64), out_dim: int = FEATURE_DIM):
        # zero output layer: the untrained network is the identity on features
        sizes = [context_dim, *hidden, out_dim]
        return cls(Mlp.build(rng, sizes, "tanh", "linear", zero_output=True))

    @property
    def context_dim(self) -> int:
        return self.mlp.n_in

    @property
    def out_dim(self) -> int:
        return self.mlp.n_out

    def params(self):
        return self.mlp.params()

    def shift(self, contexts):
        return self.mlp.forward(np.asarray(contexts, dtype=np.float64))

    def tensors(self, prefix="adapt."):
        return {prefix + k: v for k, v in self.mlp.params().items()}

    @classmethod
    def from_tensors(cls, tensors, prefix="adapt."):
        return cls(_mlp_from_tensors(tensors, prefix, "tanh", "linear"))


@dataclass
class VatModel:
    dnn: AcousticDnn
    adaptnet: AdaptationNetwork
    stage: str = "adapt-net-trained"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown VAT stage {self.stage!r}")
        if self.adaptnet.out_dim != self.dnn.feature_dim:
            raise ShapeError(
                f"adaptation output {self.adaptnet.out_dim} != DNN feature dim {self.dnn.feature_dim}"
            )

    @property
    def context_dim(self) -> int:
        return self.adaptnet.context_dim

    def tensors(self):
        out = {**self.dnn.tensors(), **self.adaptnet.tensors()}
        out["stage"] = np.array([float(STAGES.index(self.stage))])
        return out

    @classmethod
    def from_tensors(cls, tensors):
        stage = STAGES[int(tensors["stage"].reshape(-1)[0])]
        return cls(AcousticDnn.from_tensors(tensors), AdaptationNetwork.from_tensors(tensors), stage)


def _mlp_from_tensors(tensors, prefix, hidden_act, out_act):
    n = 0
    while f"{prefix}l{n}.W" in tensors:
        n += 1
    if n == 0:
        raise DataError(f"checkpoint has no layers under prefix {prefix!r}")
    layers = [
        DenseLayer(tensors[f"{prefix}l{k}.W"], tensors[f"{prefix}l{k}.b"].reshape(-1),
                   out_act if k == n - 1 else hidden_act)
        for k in range(n)
    ]
    return Mlp(layers)


def load_am_model(tensors):
    """Rebuild either a plain/concat DNN or a VAT model from checkpoint tensors."""
    if "stage" in tensors and any(k.startswith("adapt.") for k in tensors):
        return VatModel.from_tensors(tensors)
    return AcousticDnn.from_tensors(tensors)


def am_model_tensors(model):
    if isinstance(model, VatModel):
        return model.tensors()
    out = model.tensors()
    out["stage"] = np.array([0.0])
    return out


# --------------------------------------------------------------------------
# Shifts
# --------------------------------------------------------------------------


def _ctx_values(ctx):
    return np.asarray(getattr(ctx, "values", ctx), dtype=np.float64).reshape(-1)


def apply_shift(adaptnet: AdaptationNetwork, context, frames) -> np.ndarray:
    """Add one utterance-level shift, computed from ``context``, to every frame."""
    values = _ctx_values(context)
    frames = np.asarray(frames, dtype=np.float64)
    if values.shape[0] != adaptnet.context_dim:
        raise ShapeError(
            f"context dimension {values.shape[0]} != adaptation input {adaptnet.context_dim}"
        )
    if frames.ndim != 2 or frames.shape[1] != adaptnet.out_dim:
        raise ShapeError(f"frames shape {frames.shape} != (T, {adaptnet.out_dim})")
    return frames + adaptnet.shift(values[None, :])[0]


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _stack(corpus: Sequence[Utterance]):
    if not corpus:
        raise ContractError("acoustic corpus is empty")
    dims = {u.frames.shape[1] for u in corpus}
    if len(dims) != 1:
        raise DataError(f"utterances disagree on feature dimension: {sorted(dims)}")
    x = np.concatenate([u.frames for u in corpus])
    y = np.concatenate([u.labels for u in corpus])
    utt = np.concatenate([np.full(len(u.labels), k) for k, u in enumerate(corpus)])
    return x, y, utt


def _contexts_for(corpus, contexts):
    if contexts is None:
        raise ContractError("this stage requires a context table")
    missing = sorted(u.utt_id for u in corpus if u.utt_id not in contexts)
    if missing:
        raise DataError(f"missing context vectors for utterances: {', '.join(missing)}")
    return np.stack([_ctx_values(contexts[u.utt_id]) for u in corpus])


def _n_classes(corpus, config):
    k = int(max(u.labels.max() for u in corpus)) + 1
    if config.n_classes is not None:
        if k > config.n_classes:
            raise DataError(f"label {k - 1} outside configured class count {config.n_classes}")
        return config.n_classes
    return k


def _epoch_batches(n, batch, seed, stage, epoch):
    rng = np.random.default_rng([seed, stage, epoch])
    order = rng.permutation(n)
    return [order[s:s + batch] for s in range(0, n, batch)]


def _dnn_loss(dnn: AcousticDnn, inputs, labels) -> float:
    return cross_entropy(dnn.mlp.forward(inputs), labels)


def _fit_dnn(dnn: AcousticDnn, inputs, labels, epochs, lr, config, stage_code):
    """Minibatch cross-entropy training of all DNN parameters on fixed inputs."""
    opt = Optimizer(config.optimizer, lr)
    params = dnn.params()
    losses = [_dnn_loss(dnn, inputs, labels)]
    for epoch in range(epochs):
        for idx in _epoch_batches(len(labels), config.batch, config.seed, stage_code, epoch):
            probs, caches = dnn.mlp.forward_train(inputs[idx])
            _, grads = dnn.mlp.backward(caches, cross_entropy_grad(probs, labels[idx]),
                                        from_logits=True)
            opt.step(params, grads)
        loss = _dnn_loss(dnn, inputs, labels)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite training loss at epoch {epoch}")
        losses.append(loss)
        log.info("stage %d epoch %d loss %.6f", stage_code, epoch, loss)
    return losses


def train_si_dnn(corpus: Sequence[Utterance], config: AmConfig) -> AcousticDnn:
    x, y, _ = _stack(corpus)
    k = _n_classes(corpus, config)
    norm = FeatureNorm.fit(x)
    rng = np.random.default_rng([config.seed, 1])
    dnn = AcousticDnn.init(rng, norm, k, config.hidden, config.layers)
    dnn.history["loss"] = _fit_dnn(dnn, norm.apply(x), y, config.epochs, config.lr, config, 1)
    return dnn


def train_concat_baseline(corpus, contexts, config: AmConfig) -> AcousticDnn:
    x, y, utt = _stack(corpus)
    ctx = _contexts_for(corpus, contexts)
    k = _n_classes(corpus, config)
    norm = FeatureNorm.fit(x)
    rng = np.random.default_rng([config.seed, 4])
    dnn = AcousticDnn.init(rng, norm, k, config.hidden, config.layers, context_dim=ctx.shape[1])
    inputs = np.hstack([norm.apply(x), ctx[utt]])
    dnn.history["loss"] = _fit_dnn(dnn, inputs, y, config.epochs, config.lr, config, 4)
    return dnn


def _shifted_loss(dnn, adaptnet, xn, y, utt, ctx):
    return cross_entropy(dnn.mlp.forward(xn + adaptnet.shift(ctx)[utt]), y)


def adaptation_loss_and_grads(dnn: AcousticDnn, adaptnet: AdaptationNetwork, xn, y, utt, ctx):
    """Cross-entropy of the frozen DNN on shifted frames and its gradient
    with respect to the adaptation network parameters only.

    ``utt`` indexes each frame's row in ``ctx``.
    """
    uniq, inv = np.unique(utt, return_inverse=True)
    shifts, a_caches = adaptnet.mlp.forward_train(ctx[uniq])
    probs, d_caches = dnn.mlp.forward_train(xn + shifts[inv])
    loss = cross_entropy(probs, y)
    dx, _ = dnn.mlp.backward(d_caches, cross_entropy_grad(probs, y), from_logits=True)
    dshift = np.zeros_like(shifts)
    np.add.at(dshift, inv, dx)
    _, grads = adaptnet.mlp.backward(a_caches, dshift)
    return loss, grads


def train_adaptation_net(si: AcousticDnn, corpus, contexts, config: AmConfig,
                         adaptnet: Optional[AdaptationNetwork] = None) -> VatModel:
    """Learn context-to-shift mapping against a frozen DNN (stage 2).

    Returns a :class:`VatModel` in stage ``adapt-net-trained`` that shares
    the (unchanged) DNN object.
    """
    if si.context_dim != 0:
        raise ContractError("stage 2 needs a plain DNN, not a concatenation model")
    x, y, utt = _stack(corpus)
    ctx = _contexts_for(corpus, contexts)
    if adaptnet is None:
        rng = np.random.default_rng([config.seed, 2])
        adaptnet = AdaptationNetwork.init(rng, ctx.shape[1], config.adapt_hidden, si.feature_dim)
    before = tensors_hash(si.tensors())
    xn = si.norm.apply(x)
    opt = Optimizer(config.adapt_optimizer, config.stage2_lr)
    params = adaptnet.params()
    losses = [_shifted_loss(si, adaptnet, xn, y, utt, ctx)]
    norms = []
    for epoch in range(config.stage2_epochs):
        for idx in _epoch_batches(len(y), config.batch, config.seed, 2, epoch):
            _, grads = adaptation_loss_and_grads(si, adaptnet, xn[idx], y[idx], utt[idx], ctx)
            norms.append(global_norm(grads))
            if config.adapt_clip is not None:
                grads = clip_gradients(grads, config.adapt_clip)
            opt.step(params, grads)
        loss = _shifted_loss(si, adaptnet, xn, y, utt, ctx)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite adaptation loss at epoch {epoch}")
        losses.append(loss)
        log.info("stage 2 epoch %d loss %.6f", epoch, loss)
    if tensors_hash(si.tensors()) != before:
        raise ContractError("stage 2 modified the frozen SI-DNN parameters")
    model = VatModel(si, adaptnet, "adapt-net-trained")
    model.history = {"loss": losses, "grad_norms": norms}
    return model


def retrain_vat_dnn(model: VatModel, corpus, contexts, config: AmConfig) -> VatModel:
    """Re-update a copy of the DNN in the shifted feature space (stage 3)."""
    if model.stage != "adapt-net-trained":
        raise ContractError(f"stage 3 requires stage 'adapt-net-trained', got {model.stage!r}")
    x, y, utt = _stack(corpus)
    ctx = _contexts_for(corpus, contexts)
    before = tensors_hash(model.adaptnet.tensors())
    dnn = copy.deepcopy(model.dnn)
    dnn.history = {}
    inputs = dnn.norm.apply(x) + model.adaptnet.shift(ctx)[utt]
    losses = _fit_dnn(dnn, inputs, y, config.stage3_epochs, config.stage3_lr, config, 3)
    if tensors_hash(model.adaptnet.tensors()) != before:
        raise ContractError("stage 3 modified the frozen adaptation network")
    out = VatModel(dnn, model.adaptnet, "vat-retrained")
    out.history = {"loss": losses}
    return out


def train_vat(corpus, contexts, config: AmConfig, si: Optional[AcousticDnn] = None) -> VatModel:
    """Run stages 1-3; stages 2 and 3 alternate ``config.adapt_passes`` times."""
    if si is None:
        si = train_si_dnn(corpus, config)
    model = train_adaptation_net(si, corpus, contexts, config)
    model = retrain_vat_dnn(model, corpus, contexts, config)
    for _ in range(config.adapt_passes - 1):
        model = train_adaptation_net(model.dnn, corpus, contexts, config,
                                     adaptnet=copy.deepcopy(model.adaptnet))
        model = retrain_vat_dnn(model, corpus, contexts, config)
    return model


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def predict_proba(model, corpus, contexts=None) -> np.ndarray:
    x, _, utt = _stack(corpus)
    if isinstance(model, VatModel):
        ctx = _contexts_for(corpus, contexts)
        inputs = model.dnn.norm.apply(x) + model.adaptnet.shift(ctx)[utt]
        return model.dnn.mlp.forward(inputs)
    inputs = model.norm.apply(x)
    if model.context_dim:
        inputs = np.hstack([inputs, _contexts_for(corpus, contexts)[utt]])
    return model.mlp.forward(inputs)


def frame_accuracy(model, corpus, contexts=None) -> float:
    """Fraction of frames whose argmax class equals the label (ties -> lowest index)."""
    probs = predict_proba(model, corpus, contexts)
    _, y, _ = _stack(corpus)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def corpus_loss(model, corpus, contexts=None) -> float:
    _, y, _ = _stack(corpus)
    return cross_entropy(predict_proba(model, corpus, contexts), y)


# --------------------------------------------------------------------------
# Corpus files
# --------------------------------------------------------------------------


def write_am_corpus(path, corpus: Sequence[Utterance], n_classes: int):
    with open(path, "w") as fh:
        for u in corpus:
            t, d = u.frames.shape
            fh.write(f"{u.utt_id} {t} {d} {n_classes}\n")
            for row in u.frames.tolist():
                fh.write(" ".join(map(repr, row)) + "\n")
            fh.write(" ".join(str(int(v)) for v in u.labels) + "\n")
            fh.write(" ".join(u.transcript) + "\n")


def read_am_corpus(path) -> Tuple[List[Utterance], int]:
    """Returns the utterances and the class count declared in the headers."""
    try:
        lines = open(path).read().split("\n")
    except OSError as exc:
        raise DataError(f"cannot read acoustic corpus {path}: {exc}") from exc
    out, k_seen = [], set()
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        head = lines[pos].split()
        if len(head) != 4:
            raise DataError(f"{path}:{pos + 1}: expected header 'utt_id T D K'")
        utt, t, d, k = head[0], int(head[1]), int(head[2]), int(head[3])
        if pos + t + 2 >= len(lines) + 1:
            raise DataError(f"{path}: utterance {utt} is truncated")
        try:
            frames = np.array([[float(v) for v in lines[pos + 1 + r].split()] for r in range(t)])
            labels = np.array([int(v) for v in lines[pos + 1 + t].split()])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: utterance {utt}: {exc}") from exc
        if frames.shape != (t, d):
            raise DataError(f"{path}: utterance {utt}: frames shape {frames.shape} != ({t}, {d})")
        if labels.shape[0] != t or (t and (labels.min() < 0 or labels.max() >= k)):
            raise DataError(f"{path}: utterance {utt}: bad label line")
        transcript = lines[pos + 2 + t].split() if pos + 2 + t < len(lines) else []
        out.append(Utterance(utt, frames, labels, transcript))
        k_seen.add(k)
        pos += t + 3
    if len(k_seen) > 1:
        raise DataError(f"{path}: utterances disagree on class count {sorted(k_seen)}")
    return out, (k_seen.pop() if k_seen else 0)
