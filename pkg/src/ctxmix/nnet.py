"""Minimal dense / 1-D convolutional network kernel.

Float64 end to end, deterministic initialization, manual backpropagation,
and SGD with momentum. Just enough machinery to express the gate and
expert architectures used by the mixture: stacked valid (unpadded)
convolutions over the time axis, rectifier hidden activations, dense
layers, and a softmax head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DimensionError, TrainingError

Array = np.ndarray


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture template.

    ``conv_layers`` holds ``(out_channels, kernel_width, stride)`` triples
    applied over the time axis with no padding; ``dense_widths`` are the
    hidden dense layer sizes; ``output_units`` is the softmax dimension.
    Hidden conv and dense layers use a rectifier activation.
    """

    conv_layers: tuple[tuple[int, int, int], ...]
    dense_widths: tuple[int, ...]
    output_units: int

    def __post_init__(self):
        for i, (oc, kw, st) in enumerate(self.conv_layers):
            if oc < 1 or kw < 1 or st < 1:
                raise ContractError(f"conv layer {i} has non-positive extent {(oc, kw, st)}")
        for i, w in enumerate(self.dense_widths):
            if w < 1:
                raise ContractError(f"dense layer {i} has non-positive width {w}")
        if self.output_units < 1:
            raise ContractError(f"output_units must be >= 1, got {self.output_units}")

    @property
    def n_layers(self) -> int:
        return len(self.conv_layers) + len(self.dense_widths) + 1

    def conv_output_length(self, in_length: int) -> int:
        """Time extent after the full conv stack (valid convolution)."""
        t = in_length
        for i, (_, kw, st) in enumerate(self.conv_layers):
            if t < kw:
                raise DimensionError(
                    f"conv layer {i}: input length {t} shorter than kernel {kw}", layer=i
                )
            t = (t - kw) // st + 1
        return t

    def with_output_units(self, k: int) -> "NetworkSpec":
        return replace(self, output_units=k)


def default_template(
    output_units: int,
    conv_channels: tuple[int, ...] = (16, 16, 16),
    kernel_width: int = 5,
    stride: int = 1,
    dense_widths: tuple[int, ...] = (64, 64),
) -> NetworkSpec:
    """Three conv layers followed by three dense layers (two hidden + head)."""
    conv = tuple((c, kernel_width, stride) for c in conv_channels)
    return NetworkSpec(conv_layers=conv, dense_widths=tuple(dense_widths), output_units=output_units)


@dataclass(frozen=True)
class Parameters:
    """Per-layer weight and bias arrays, plus the input contract they were built for.

    Arrays are read-only; training steps return fresh ``Parameters``.
    Layer order: conv layers, then hidden dense layers, then the output layer.
    Conv weights have shape ``(out_channels, in_channels, kernel_width)``;
    dense weights ``(out_dim, in_dim)``.
    """

    weights: tuple[Array, ...]
    biases: tuple[Array, ...]
    init_seed: int
    in_channels: int
    in_length: int

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def _freeze(a: Array) -> Array:
    a.flags.writeable = False
    return a


def layer_dims(spec: NetworkSpec, in_channels: int, in_length: int) -> list[tuple]:
    """Weight shapes for every layer, conv first.

    Raises DimensionError if the conv stack exhausts the time axis.
    """
    dims: list[tuple] = []
    c, t = in_channels, in_length
    for i, (oc, kw, st) in enumerate(spec.conv_layers):
        if t < kw:
            raise DimensionError(
                f"conv layer {i}: input length {t} shorter than kernel {kw}", layer=i
            )
        dims.append((oc, c, kw))
        c, t = oc, (t - kw) // st + 1
    flat = c * t
    widths = [flat, *spec.dense_widths, spec.output_units]
    for din, dout in zip(widths[:-1], widths[1:]):
        dims.append((dout, din))
    return dims


def init_parameters(spec: NetworkSpec, in_channels: int, in_length: int, seed: int) -> Parameters:
    """Deterministic scaled-uniform init: W ~ U[-s, s], s = sqrt(6/(fan_in+fan_out)).

    For conv layers fan_in = in_channels*kernel_width and
    fan_out = out_channels*kernel_width. Biases start at zero. The draw
    order is fixed (layers in order, weights only), so a given
    (spec, in_channels, in_length, seed) always yields identical arrays.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for shape in layer_dims(spec, in_channels, in_length):
        if len(shape) == 3:
            oc, ic, kw = shape
            fan_in, fan_out = ic * kw, oc * kw
        else:
            fan_out, fan_in = shape
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(_freeze(rng.uniform(-s, s, size=shape)))
        biases.append(_freeze(np.zeros(shape[0])))
    return Parameters(
        weights=tuple(weights),
        biases=tuple(biases),
        init_seed=int(seed),
        in_channels=in_channels,
        in_length=in_length,
    )


def parameter_count(spec: NetworkSpec, in_channels: int, in_length: int) -> int:
    return sum(int(np.prod(s)) + s[0] for s in layer_dims(spec, in_channels, in_length))


def softmax(logits: Array) -> Array:
    """Row-wise stable softmax (subtract row max)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _conv_cols(x: Array, kw: int, stride: int) -> Array:
    """im2col over the time axis: (B, C, T) -> (B, T_out, C*kw)."""
    win = np.lib.stride_tricks.sliding_window_view(x, kw, axis=2)
    win = win[:, :, ::stride, :]  # (B, C, T_out, kw)
    b, c, t_out, _ = win.shape
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b, t_out, c * kw)


@dataclass
class ForwardCache:
    """Activation record produced by ``forward`` and consumed by ``backward``."""

    params: Parameters
    conv_cols: list[Array] = field(default_factory=list)
    conv_pre: list[Array] = field(default_factory=list)
    conv_in_shapes: list[tuple[int, ...]] = field(default_factory=list)
    conv_geometry: list[tuple[int, int]] = field(default_factory=list)  # (kernel, stride)
    dense_inputs: list[Array] = field(default_factory=list)
    dense_pre: list[Array] = field(default_factory=list)
    logits: Array | None = None
    probs: Array | None = None


def _check_batch(spec: NetworkSpec, params: Parameters, batch: Array) -> Array:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3:
        raise DimensionError(f"batch must be 3-D (B, C, T), got shape {batch.shape}", layer=0)
    if batch.shape[1] != params.in_channels or batch.shape[2] != params.in_length:
        raise DimensionError(
            f"layer 0: batch channels/time {batch.shape[1:]} do not match the "
            f"({params.in_channels}, {params.in_length}) contract",
            layer=0,
        )
    if batch.size and not np.isfinite(batch).all():
        raise ContractError("batch contains non-finite values")
    expected = len(layer_dims(spec, params.in_channels, params.in_length))
    if params.n_layers != expected:
        raise DimensionError(
            f"parameters hold {params.n_layers} layers but spec requires {expected}", layer=0
        )
    return batch


def forward(spec: NetworkSpec, params: Parameters, batch: Array) -> tuple[Array, ForwardCache]:
    """Run the network; returns row-stochastic probabilities and the cache."""
    x = _check_batch(spec, params, batch)
    cache = ForwardCache(params=params)
    nc = len(spec.conv_layers)
    for i, (oc, kw, st) in enumerate(spec.conv_layers):
        w, b = params.weights[i], params.biases[i]
        if x.shape[1] != w.shape[1]:
            raise DimensionError(
                f"conv layer {i}: {x.shape[1]} input channels, weights expect {w.shape[1]}",
                layer=i,
            )
        cols = _conv_cols(x, kw, st)
        z = (cols @ w.reshape(oc, -1).T + b).transpose(0, 2, 1)  # (B, OC, T_out)
        cache.conv_cols.append(cols)
        cache.conv_pre.append(z)
        cache.conv_in_shapes.append(x.shape)
        cache.conv_geometry.append((kw, st))
        x = np.maximum(z, 0.0)
    x = x.reshape(x.shape[0], int(np.prod(x.shape[1:])))
    for j in range(len(spec.dense_widths) + 1):
        w, b = params.weights[nc + j], params.biases[nc + j]
        if x.shape[1] != w.shape[1]:
            raise DimensionError(
                f"dense layer {nc + j}: input dim {x.shape[1]}, weights expect {w.shape[1]}",
                layer=nc + j,
            )
        cache.dense_inputs.append(x)
        z = x @ w.T + b
        if j < len(spec.dense_widths):
            cache.dense_pre.append(z)
            x = np.maximum(z, 0.0)
        else:
            cache.logits = z
    cache.probs = softmax(cache.logits)
    return cache.probs, cache


def backward(cache: ForwardCache, grad_logits: Array) -> list[tuple[Array, Array]]:
    """Backpropagate d(loss)/d(logits) to per-layer (dW, db) gradients."""
    params = cache.params
    if cache.logits is None or cache.probs is None:
        raise ContractError("cache was not produced by a completed forward pass")
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != cache.logits.shape:
        raise ContractError(
            f"grad shape {grad_logits.shape} does not match logits {cache.logits.shape}"
        )
    nc = len(cache.conv_cols)
    grads: list[tuple[Array, Array]] = [None] * params.n_layers  # type: ignore[list-item]

    dz = grad_logits
    for j in range(len(cache.dense_inputs) - 1, -1, -1):
        w = params.weights[nc + j]
        x = cache.dense_inputs[j]
        grads[nc + j] = (dz.T @ x, dz.sum(axis=0))
        dz = dz @ w
        if j > 0:
            dz = dz * (cache.dense_pre[j - 1] > 0)

    for i in range(nc - 1, -1, -1):
        w = params.weights[i]
        pre = cache.conv_pre[i]  # (B, OC, T_out)
        b_sz, oc, t_out = pre.shape
        dz = dz.reshape(b_sz, oc, t_out) * (pre > 0)
        dzt = dz.transpose(0, 2, 1)  # (B, T_out, OC)
        cols = cache.conv_cols[i]
        dw = np.tensordot(dzt, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        db = dz.sum(axis=(0, 2))
        grads[i] = (dw, db)
        dcols = dzt @ w.reshape(oc, -1)  # (B, T_out, C*kw)
        _, c_in, t_in = cache.conv_in_shapes[i]
        kw, st = cache.conv_geometry[i]
        dx = np.zeros((b_sz, c_in, t_in))
        dfold = dcols.reshape(b_sz, t_out, c_in, kw)
        for t in range(t_out):
            dx[:, :, t * st : t * st + kw] += dfold[:, t]
        dz = dx
    return grads


@dataclass
class SgdState:
    """SGD-with-momentum state: v <- m*v - lr*g; w <- w + v."""

    learning_rate: float = 0.001
    momentum: float = 0.9
    velocity: list[tuple[Array, Array]] | None = None


def sgd_step(params: Parameters, grads: list[tuple[Array, Array]], opt: SgdState) -> Parameters:
    """One momentum step; mutates ``opt.velocity`` and returns fresh parameters."""
    if len(grads) != params.n_layers:
        raise ContractError(f"{len(grads)} gradients for {params.n_layers} layers")
    if opt.velocity is None:
        opt.velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]
    new_w, new_b = [], []
    for i, ((dw, db), (vw, vb)) in enumerate(zip(grads, opt.velocity)):
        if dw.shape != params.weights[i].shape or db.shape != params.biases[i].shape:
            raise ContractError(f"gradient shape mismatch at layer {i}")
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise TrainingError(f"non-finite gradient in layer {i}")
        vw = opt.momentum * vw - opt.learning_rate * dw
        vb = opt.momentum * vb - opt.learning_rate * db
        opt.velocity[i] = (vw, vb)
        new_w.append(_freeze(params.weights[i] + vw))
        new_b.append(_freeze(params.biases[i] + vb))
    return replace(params, weights=tuple(new_w), biases=tuple(new_b))


def one_hot(labels: Array, k: int) -> Array:
    out = np.zeros((len(labels), k))
    if len(labels):
        out[np.arange(len(labels)), labels] = 1.0
    return out


def xent_loss(cache: ForwardCache, labels: Array, weights: Array | None = None) -> float:
    """Mean (optionally per-sample weighted) cross-entropy from a forward cache."""
    logp = log_softmax(cache.logits)
    nll = -logp[np.arange(len(labels)), labels]
    if weights is not None:
        nll = nll * weights
    return float(nll.mean()) if len(labels) else 0.0

def xent_logit_grad(probs: Array, labels: Array, weights: Array | None = None) -> Array:
    """d(mean cross-entropy)/d(logits) = (probs - onehot)/B, optionally weighted."""
    g = (probs - one_hot(labels, probs.shape[1])) / max(len(labels), 1)
    if weights is not None:
        g = g * weights[:, None]
    return g


def iter_batches(order: Array, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo : lo + batch_size]


def train_network(
    spec: NetworkSpec,
    params: Parameters,
    inputs: Array,
    labels: Array,
    *,
    epochs: int,
    batch_size: int,
    opt: SgdState,
    shuffle_seeds: list,
) -> Parameters:
    """Plain SGD cross-entropy training.

    ``shuffle_seeds`` supplies one seed per epoch for the batch order,
    making the whole run reproducible and letting callers align schedules
    across different training drivers.
    """
    if len(shuffle_seeds) != epochs:
        raise ContractError(f"need {epochs} shuffle seeds, got {len(shuffle_seeds)}")
    labels = np.asarray(labels)
    for e in range(epochs):
        order = np.random.default_rng(shuffle_seeds[e]).permutation(len(labels))
        for idx in iter_batches(order, batch_size):
            probs, cache = forward(spec, params, inputs[idx])
            grads = backward(cache, xent_logit_grad(probs, labels[idx]))
            params = sgd_step(params, grads, opt)
    return params


def conv_features(spec: NetworkSpec, params: Parameters, batch: Array) -> Array:
    """Flattened, rectified output of the final conv layer: (B, C_last*T_last)."""
    x = _check_batch(spec, params, batch)
    for i, (oc, kw, st) in enumerate(spec.conv_layers):
        w, b = params.weights[i], params.biases[i]
        cols = _conv_cols(x, kw, st)
        x = np.maximum((cols @ w.reshape(oc, -1).T + b).transpose(0, 2, 1), 0.0)
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


def penultimate_features(spec: NetworkSpec, params: Parameters, batch: Array) -> Array:
    """Representation feeding the output layer (rectified last hidden dense)."""
    x = conv_features(spec, params, batch)
    nc = len(spec.conv_layers)
    for j in range(len(spec.dense_widths)):
        w, b = params.weights[nc + j], params.biases[nc + j]
        x = np.maximum(x @ w.T + b, 0.0)
    return x


@dataclass(frozen=True)
class GradientCheckReport:
    max_rel_error: float
    n_parameters: int
    n_checked: int
    n_skipped: int


def _forward_stages(spec: NetworkSpec, params: Parameters, batch: Array) -> list[Array]:
    """Input activation of every layer (conv inputs 3-D, dense inputs 2-D)."""
    stages = []
    x = batch
    for i, (oc, kw, st) in enumerate(spec.conv_layers):
        stages.append(x)
        w, b = params.weights[i], params.biases[i]
        z = (_conv_cols(x, kw, st) @ w.reshape(oc, -1).T + b).transpose(0, 2, 1)
        x = np.maximum(z, 0.0)
    x = x.reshape(x.shape[0], int(np.prod(x.shape[1:])))
    nc = len(spec.conv_layers)
    for j in range(len(spec.dense_widths) + 1):
        stages.append(x)
        w, b = params.weights[nc + j], params.biases[nc + j]
        z = x @ w.T + b
        if j < len(spec.dense_widths):
            x = np.maximum(z, 0.0)
    return stages


def _loss_from_layer(spec, params, stage_input, start, labels):
    """Loss plus downstream rectifier pattern, resuming at layer ``start``.

    Central differences are only valid where the loss is smooth on the
    probed interval; a pattern change between the two probes marks a
    rectifier kink crossing, and such quotients are excluded by the check.
    Layers before ``start`` are untouched by the probe, so only the
    downstream pattern needs comparing.
    """
    x = stage_input
    bits = []
    nc = len(spec.conv_layers)
    for i in range(start, nc):
        oc, kw, st = spec.conv_layers[i]
        w, b = params.weights[i], params.biases[i]
        z = (_conv_cols(x, kw, st) @ w.reshape(oc, -1).T + b).transpose(0, 2, 1)
        m = z > 0
        bits.append(m.tobytes())
        x = z * m
    if start <= nc or x.ndim == 3:
        x = x.reshape(x.shape[0], int(np.prod(x.shape[1:])))
    for j in range(max(start - nc, 0), len(spec.dense_widths)):
        w, b = params.weights[nc + j], params.biases[nc + j]
        z = x @ w.T + b
        m = z > 0
        bits.append(m.tobytes())
        x = z * m
    w, b = params.weights[-1], params.biases[-1]
    logits = x @ w.T + b
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    return loss, b"".join(bits)


def gradient_check(
    spec: NetworkSpec,
    seed: int,
    n_samples: int,
    *,
    in_channels: int = 2,
    in_length: int = 16,
    step: float = 1e-5,
) -> GradientCheckReport:
    """Compare analytic gradients against central finite differences.

    Relative error per scalar parameter is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12); the report
    carries the max over all checked parameters. Quotients spanning a
    rectifier kink (activation pattern differs between the two probes)
    are counted as skipped rather than compared.
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    params = init_parameters(spec, in_channels, in_length, seed=int(rng.integers(2**63)))
    batch = rng.standard_normal((n_samples, in_channels, in_length))
    labels = rng.integers(spec.output_units, size=n_samples)

    probs, cache = forward(spec, params, batch)
    grads = backward(cache, xent_logit_grad(probs, labels))

    work = replace(
        params,
        weights=tuple(w.copy() for w in params.weights),
        biases=tuple(b.copy() for b in params.biases),
    )
    stages = _forward_stages(spec, work, batch)
    max_rel, checked, skipped = 0.0, 0, 0
    for li in range(params.n_layers):
        stage = stages[li]
        for arr, ana in ((work.weights[li], grads[li][0]), (work.biases[li], grads[li][1])):
            flat, aflat = arr.ravel(), ana.ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                lo_p, pat_p = _loss_from_layer(spec, work, stage, li, labels)
                flat[j] = orig - step
                lo_m, pat_m = _loss_from_layer(spec, work, stage, li, labels)
                flat[j] = orig
                if pat_p != pat_m:
                    skipped += 1
                    continue
                num = (lo_p - lo_m) / (2.0 * step)
                rel = abs(aflat[j] - num) / max(abs(aflat[j]), abs(num), 1e-12)
                max_rel = max(max_rel, rel)
                checked += 1
    n_params = parameter_count(spec, in_channels, in_length)
    return GradientCheckReport(max_rel, n_params, checked, skipped)
