"""Feed-forward T2-distribution estimators written directly in numpy.

Three architectures share one implementation:

* ``miml`` -- signal only, ``n_hidden`` ReLU layers, SoftMax output.
* ``p2t2-fc`` -- signal concatenated with the echo times (in seconds).
* ``p2t2-convfc`` -- a (2 x 1) convolution folds the (signal, echo time)
  pair of each echo into one value, followed by the ``miml`` stack.

Gradients are computed by hand and trained with Adam.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConvergenceError, ParameterError

log = logging.getLogger(__name__)

KINDS = ("miml", "p2t2-fc", "p2t2-convfc")
_ALIASES = {
    "miml": "miml",
    "p2t2-fc": "p2t2-fc",
    "p2t2fc": "p2t2-fc",
    "p2t2-convfc": "p2t2-convfc",
    "p2t2-conv-fc": "p2t2-convfc",
    "p2t2convfc": "p2t2-convfc",
}
DEFAULT_HIDDEN = {"miml": 6, "p2t2-fc": 12, "p2t2-convfc": 6}
TE_SCALE_MS = 1000.0


def canonical_kind(kind: str) -> str:
    try:
        return _ALIASES[kind.lower().replace("_", "-")]
    except KeyError:
        raise ParameterError(f"unknown model kind {kind!r}; expected one of {KINDS}") from None


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_echoes: int = 20
    hidden_width: int = 256
    n_hidden: int | None = None
    n_out: int = 60
    output_bias: bool = False
    hidden_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if self.n_hidden is None:
            object.__setattr__(self, "n_hidden", DEFAULT_HIDDEN[self.kind])
        for name in ("n_echoes", "hidden_width", "n_hidden", "n_out"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ParameterError(f"{name} must be a positive integer, got {v}")

    @property
    def input_dim(self) -> int:
        return 2 * self.n_echoes if self.kind == "p2t2-fc" else self.n_echoes

    @property
    def uses_echo_times(self) -> bool:
        return self.kind != "miml"

    def layer_dims(self) -> list[tuple[int, int, bool]]:
        """(fan_in, fan_out, has_bias) for each linear layer in order."""
        dims = [self.input_dim] + [self.hidden_width] * self.n_hidden
        layers = [(a, b, self.hidden_bias) for a, b in zip(dims[:-1], dims[1:])]
        layers.append((dims[-1], self.n_out, self.output_bias))
        return layers

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        if self.kind == "p2t2-convfc":
            shapes += [(2,), (1,)]
        for fan_in, fan_out, bias in self.layer_dims():
            shapes.append((fan_in, fan_out))
            if bias:
                shapes.append((fan_out,))
        return shapes


def count_parameters(spec: ModelSpec) -> int:
    """Closed-form count of trainable scalars."""
    n = 3 if spec.kind == "p2t2-convfc" else 0
    for fan_in, fan_out, bias in spec.layer_dims():
        n += fan_in * fan_out + (fan_out if bias else 0)
    return n


class Model:
    """Parameters of one network plus forward/backward passes.

    ``params`` is a flat list ordered as the checkpoint payload: the
    convolution kernel and bias (conv models only), then for every linear
    layer its weight matrix ``(fan_in, fan_out)`` followed by its bias.
    """

    def __init__(self, spec: ModelSpec, params: list[np.ndarray]):
        shapes = spec.param_shapes()
        if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
            raise ParameterError("parameter shapes do not match the model spec")
        self.spec = spec
        self.params = params
        self._layout = self._build_layout()

    def _build_layout(self):
        i = 0
        conv = None
        if self.spec.kind == "p2t2-convfc":
            conv = (0, 1)
            i = 2
        layers = []
        for _, _, bias in self.spec.layer_dims():
            layers.append((i, i + 1 if bias else None))
            i += 2 if bias else 1
        return conv, layers

    @property
    def dtype(self):
        return self.params[0].dtype

    def astype(self, dtype) -> "Model":
        return Model(self.spec, [p.astype(dtype) for p in self.params])

    def copy(self) -> "Model":
        return Model(self.spec, [p.copy() for p in self.params])

    # -- passes -------------------------------------------------------------

    def _forward(self, x: np.ndarray, keep: bool):
        conv, layers = self._layout
        cache = []
        h = x
        if conv is not None:
            k, b = self.params[conv[0]], self.params[conv[1]]
            cache.append(h)
            h = k[0] * h[:, 0, :] + k[1] * h[:, 1, :] + b[0]
        last = len(layers) - 1
        for li, (wi, bi) in enumerate(layers):
            if keep:
                cache.append(h)
            z = h @ self.params[wi]
            if bi is not None:
                z += self.params[bi]
            if li < last:
                h = np.maximum(z, 0)
            else:
                h = z
        z = h - h.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, cache

    def predict_raw(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        return self._forward(x, keep=False)[0]

    def backward(self, cache, p: np.ndarray, dp: np.ndarray) -> list[np.ndarray]:
        """Gradients of a scalar loss given ``dL/dp`` at the SoftMax output."""
        conv, layers = self._layout
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        dz = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
        offset = 1 if conv is not None else 0
        for li in range(len(layers) - 1, -1, -1):
            wi, bi = layers[li]
            h = cache[offset + li]
            grads[wi] = h.T @ dz
            if bi is not None:
                grads[bi] = dz.sum(axis=0)
            if li > 0 or conv is not None:
                dh = dz @ self.params[wi].T
                if li > 0:
                    dz = dh * (h > 0)
                else:
                    dz = dh
        if conv is not None:
            x = cache[0]
            grads[conv[0]] = np.array([np.sum(dz * x[:, 0, :]), np.sum(dz * x[:, 1, :])],
                                      dtype=dz.dtype)
            grads[conv[1]] = np.array([dz.sum()], dtype=dz.dtype)
        return grads


def build_model(spec: ModelSpec, rng: np.random.Generator | int = 0,
                dtype=np.float64) -> Model:
    """Uniform fan-in initialisation, bound ``sqrt(6 / fan_in)``; biases start at zero."""
    rng = np.random.default_rng(rng)
    params = []
    if spec.kind == "p2t2-convfc":
        bound = np.sqrt(6.0 / 2)
        params += [rng.uniform(-bound, bound, 2), np.zeros(1)]
    for fan_in, fan_out, bias in spec.layer_dims():
        bound = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        if bias:
            params.append(np.zeros(fan_out))
    return Model(spec, [p.astype(dtype) for p in params])


def prepare_input(spec: ModelSpec, signals, echo_times_ms=None, dtype=np.float64) -> np.ndarray:
    """Network input for first-echo-normalised signals ``(B, n_echoes)``."""
    s = np.asarray(signals, dtype=dtype)
    if s.ndim == 1:
        s = s[None]
    if s.shape[1] != spec.n_echoes:
        raise ParameterError(f"model expects {spec.n_echoes} echoes, got {s.shape[1]}")
    if not spec.uses_echo_times:
        return np.ascontiguousarray(s)
    if echo_times_ms is None:
        raise ParameterError(f"{spec.kind} needs per-sample echo times")
    te = np.broadcast_to(np.asarray(echo_times_ms, dtype=dtype), s.shape) / TE_SCALE_MS
    if spec.kind == "p2t2-fc":
        return np.ascontiguousarray(np.concatenate([s, te], axis=1))
    return np.ascontiguousarray(np.stack([s, te], axis=1))


# -- loss -------------------------------------------------------------------


def loss_terms(pred: np.ndarray, ref: np.ndarray):
    """Per-sample MSE and normalised-position W1 for ``(B, n)`` arrays."""
    n = pred.shape[1]
    diff = pred - ref
    mse = np.mean(diff * diff, axis=1)
    cdf = np.cumsum(diff, axis=1)[:, :-1]
    w1 = np.abs(cdf).sum(axis=1) / (n - 1)
    return mse, w1, diff, cdf


def loss(pred, ref, lambda_w: float = 1.0) -> float:
    """MSE plus ``lambda_w`` times W1, averaged over the batch."""
    from .core import T2Distribution

    if isinstance(pred, T2Distribution) or isinstance(ref, T2Distribution):
        if pred.grid != ref.grid:
            raise ParameterError("prediction and reference use different grids")
        pred, ref = pred.weights, ref.weights
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if pred.shape != ref.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {ref.shape}")
    mse, w1, _, _ = loss_terms(pred, ref)
    return float(np.mean(mse + lambda_w * w1))


def loss_and_grad(model: Model, x: np.ndarray, ref: np.ndarray, lambda_w: float):
    """Mean batch loss and its gradient with respect to every parameter."""
    p, cache = model._forward(x, keep=True)
    b, n = p.shape
    mse, w1, diff, cdf = loss_terms(p, ref)
    value = float(np.mean(mse + lambda_w * w1))
    dp = (2.0 / n) * diff
    if lambda_w:
        sgn = np.sign(cdf)
        # adjoint of the cumulative sum is a reversed cumulative sum
        rev = np.cumsum(sgn[:, ::-1], axis=1)[:, ::-1]
        dp[:, :-1] += (lambda_w / (n - 1)) * rev
    dp /= b
    return value, model.backward(cache, p, dp)


def backward(model: Model, batch, lambda_w: float = 1.0) -> list[np.ndarray]:
    """Gradient set for a ``(inputs, refs)`` batch."""
    x, ref = batch
    return loss_and_grad(model, np.asarray(x, dtype=model.dtype),
                         np.asarray(ref, dtype=model.dtype), lambda_w)[1]


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 50
    batch_size: int = 256
    loss_lambda_w: float = 1.0
    validation_fraction: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    blas_threads: int = 1

    def validate(self) -> None:
        if not (self.learning_rate > 0 and self.epochs >= 1 and self.batch_size >= 1):
            raise ParameterError("learning rate, epochs and batch size must be positive")
        if self.loss_lambda_w < 0:
            raise ParameterError("loss_lambda_w must be non-negative")
        if not (0 < self.validation_fraction <= 0.5):
            raise ParameterError("validation_fraction must lie in (0, 0.5]")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"unsupported dtype {self.dtype!r}")


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: list[np.ndarray]
    metadata: dict = field(default_factory=dict)

    def model(self, dtype=np.float64) -> Model:
        return Model(self.spec, [np.asarray(p, dtype=dtype) for p in self.params])


def dataset_inputs(spec: ModelSpec, dataset, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    if dataset.n_echoes != spec.n_echoes:
        raise ParameterError(f"model expects {spec.n_echoes} echoes, data has {dataset.n_echoes}")
    x = prepare_input(spec, dataset.signals, dataset.echo_times_ms, dtype)
    refs = np.asarray(dataset.refs, dtype=np.float64)
    refs = (refs / refs.sum(axis=1, keepdims=True)).astype(dtype)
    return x, refs


def _mean_loss(model: Model, x, ref, lambda_w, chunk=4096) -> float:
    total = 0.0
    for i in range(0, len(x), chunk):
        p = model.predict_raw(x[i:i + chunk])
        mse, w1, _, _ = loss_terms(p.astype(np.float64), ref[i:i + chunk].astype(np.float64))
        total += float(np.sum(mse + lambda_w * w1))
    return total / len(x)


def train(spec: ModelSpec, dataset, config: TrainConfig | None = None,
          progress=None) -> Checkpoint:
    """Fit a model and return the parameters of the best validation epoch.

    Raises :class:`ConvergenceError` as soon as a batch loss is non-finite.
    """
    from threadpoolctl import threadpool_limits

    config = config or TrainConfig()
    config.validate()
    if len(dataset) < 2:
        raise ParameterError("training needs at least two samples")
    dtype = np.dtype(config.dtype)
    x, ref = dataset_inputs(spec, dataset, dtype)
    n = len(x)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if tr_idx.size == 0:
        raise ParameterError("validation split leaves no training samples")
    x_val, ref_val = x[val_idx], ref[val_idx]
    model = build_model(spec, rng, dtype=dtype)
    state = AdamState.zeros_like(model.params)
    lr = dtype.type(config.learning_rate)
    lam = config.loss_lambda_w

    with threadpool_limits(limits=config.blas_threads):
        best_val = _mean_loss(model, x_val, ref_val, lam)
        best_params = [p.copy() for p in model.params]
        best_epoch = 0
        history = [{"epoch": 0, "train_loss": None, "val_loss": best_val}]
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = tr_idx[rng.permutation(tr_idx.size)]
            running = 0.0
            for start in range(0, order.size, config.batch_size):
                bi = order[start:start + config.batch_size]
                value, grads = loss_and_grad(model, x[bi], ref[bi], lam)
                if not np.isfinite(value):
                    raise ConvergenceError(
                        f"non-finite loss at epoch {epoch}, batch starting {start}: {value}"
                    )
                adam_step(model.params, grads, state, lr)
                running += value * bi.size
            val = _mean_loss(model, x_val, ref_val, lam)
            if not np.isfinite(val):
                raise ConvergenceError(f"non-finite validation loss at epoch {epoch}")
            rec = {"epoch": epoch, "train_loss": running / order.size, "val_loss": val,
                   "seconds": time.perf_counter() - t0}
            history.append(rec)
            log.info("epoch %d train %.6g val %.6g", epoch, rec["train_loss"], val)
            if progress is not None:
                progress(rec)
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_params = [p.copy() for p in model.params]

    meta = {
        "epoch": best_epoch,
        "seed": config.seed,
        "validation_loss": best_val,
        "loss_lambda_w": lam,
        "learning_rate": config.learning_rate,
        "train_config": asdict(config),
        "n_train": int(tr_idx.size),
        "n_val": int(n_val),
        "history": [{k: v for k, v in h.items() if k != "seconds"} for h in history],
        "dataset_meta": copy.deepcopy(getattr(dataset, "meta", {})),
    }
    return Checkpoint(spec, [p.astype(np.float64) for p in best_params], meta)


def forward(model: Model, sample, grid=None):
    """Predicted distribution for one :class:`~t2dist.phantom.Sample1D`."""
    from .core import T2Distribution, inference_grid

    grid = grid or inference_grid()
    if len(grid) != model.spec.n_out:
        raise ParameterError("output grid size differs from the model output")
    train_ = sample.echo_train
    x = prepare_input(model.spec, sample.signal.values, train_.echo_times, model.dtype)
    w = model.predict_raw(x)[0].astype(np.float64)
    return T2Distribution(grid, w / w.sum())


class NetworkPredictor:
    """Adapter exposing a checkpoint through the evaluation predictor protocol."""

    def __init__(self, checkpoint: Checkpoint, dtype=np.float64, chunk: int = 8192):
        self.model = checkpoint.model(dtype)
        self.spec = checkpoint.spec
        self.n_echoes = checkpoint.spec.n_echoes
        self.chunk = chunk

    def predict(self, signals, echo_times_ms, flip_angles=None) -> np.ndarray:
        s = np.asarray(signals)
        te = np.broadcast_to(np.asarray(echo_times_ms, dtype=np.float64), s.shape)
        out = np.empty((len(s), self.spec.n_out))
        for i in range(0, len(s), self.chunk):
            x = prepare_input(self.spec, s[i:i + self.chunk], te[i:i + self.chunk],
                              self.model.dtype)
            out[i:i + self.chunk] = self.model.predict_raw(x)
        return out / out.sum(axis=1, keepdims=True)
