"""Gate/expert mixture: likelihood, variational bound, alternating trainer.

One gate network emits a distribution over contexts per window; each
context owns an expert network over activities. Prediction mixes expert
outputs with gate weights. Training alternates gate-only and expert-only
SGD phases on the negative variational bound of the mixture
log-likelihood, with the gate realizing the variational distribution and
a fixed (uniform) context prior supplying the prior term. Context labels
are never consumed by training.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nnet
from .data import LabeledDataset
from .errors import ContractError, TrainingError
from .nnet import NetworkSpec, Parameters, SgdState

Array = np.ndarray

GATE_PHASE, EXPERT_PHASE = 0, 1


@dataclass
class MixtureModel:
    """Gate plus expert bank sharing one architecture template."""

    gate_spec: NetworkSpec
    gate_params: Parameters
    expert_spec: NetworkSpec
    expert_params: tuple[Parameters, ...]
    context_prior: Array

    def __post_init__(self):
        n = len(self.expert_params)
        if n < 1:
            raise ContractError("mixture needs at least one expert")
        if self.gate_spec.output_units != n:
            raise ContractError(
                f"gate has {self.gate_spec.output_units} outputs for {n} experts"
            )
        if len(self.context_prior) != n or abs(self.context_prior.sum() - 1.0) > 1e-9:
            raise ContractError("context_prior must be a length-n_contexts probability vector")

    @property
    def n_contexts(self) -> int:
        return len(self.expert_params)

    @property
    def n_activities(self) -> int:
        return self.expert_spec.output_units


def new_mixture(
    n_contexts: int,
    template: NetworkSpec,
    in_channels: int,
    in_length: int,
    seed: int,
) -> MixtureModel:
    """Fresh mixture with a uniform context prior; expert ``template`` keeps
    its activity output count while the gate gets ``n_contexts`` outputs."""
    if n_contexts < 1:
        raise ContractError("n_contexts must be >= 1")
    seeds = np.random.default_rng(seed).integers(2**63, size=n_contexts + 1)
    gate_spec = template.with_output_units(n_contexts)
    return MixtureModel(
        gate_spec=gate_spec,
        gate_params=nnet.init_parameters(gate_spec, in_channels, in_length, int(seeds[0])),
        expert_spec=template,
        expert_params=tuple(
            nnet.init_parameters(template, in_channels, in_length, int(seeds[1 + c]))
            for c in range(n_contexts)
        ),
        context_prior=np.full(n_contexts, 1.0 / n_contexts),
    )


def gate_probs(model: MixtureModel, batch: Array) -> Array:
    probs, _ = nnet.forward(model.gate_spec, model.gate_params, batch)
    return probs


def expert_log_probs(model: MixtureModel, batch: Array) -> Array:
    """log p(activity | context, x) for every context: (B, N_c, K)."""
    out = []
    for params in model.expert_params:
        _, cache = nnet.forward(model.expert_spec, params, batch)
        out.append(nnet.log_softmax(cache.logits))
    return np.stack(out, axis=1)


def _label_log_probs(model: MixtureModel, batch: Array, labels: Array) -> Array:
    """log p(y_n | c, x_n) as a (B, N_c) matrix."""
    lp = expert_log_probs(model, batch)
    return lp[np.arange(len(labels)), :, labels]


def mixture_predict(model: MixtureModel, batch: Array) -> tuple[Array, Array]:
    """Gate-weighted activity distribution and argmax labels (ties -> lowest id)."""
    gates = gate_probs(model, batch)
    experts = np.exp(expert_log_probs(model, batch))
    probs = np.einsum("bc,bck->bk", gates, experts)
    return probs, probs.argmax(axis=1)


def log_likelihood(model: MixtureModel, batch: Array, labels: Array) -> float:
    """Exact mixture log-likelihood under the context prior (log-sum-exp form)."""
    a = _label_log_probs(model, batch, labels) + np.log(model.context_prior)[None, :]
    m = a.max(axis=1, keepdims=True)
    return float((m[:, 0] + np.log(np.exp(a - m).sum(axis=1))).sum())


def posterior_responsibilities(model: MixtureModel, batch: Array, labels: Array) -> Array:
    """Per-sample posterior over contexts given the label and the prior."""
    a = _label_log_probs(model, batch, labels) + np.log(model.context_prior)[None, :]
    return nnet.softmax(a)


def _xlogx(q: Array) -> Array:
    out = np.zeros_like(q)
    pos = q > 0
    out[pos] = q[pos] * np.log(q[pos])
    return out


def evidence_lower_bound(model: MixtureModel, q: Array, batch: Array, labels: Array) -> float:
    """Jensen bound on the mixture log-likelihood for a variational q.

    Sum over samples of sum_c q(c) [log p(y|c,x) + log prior(c) - log q(c)],
    with 0*log 0 taken as 0. Equals the exact log-likelihood when q is the
    posterior under the configured prior.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(labels), model.n_contexts):
        raise ContractError(f"q must be (B, {model.n_contexts}), got {q.shape}")
    if (q < -1e-12).any() or np.abs(q.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
        raise ContractError("q rows must be probability vectors")
    slp = _label_log_probs(model, batch, labels)
    weighted = q * (slp + np.log(model.context_prior)[None, :])
    weighted[q == 0] = 0.0  # 0 * (-inf) guard for impossible contexts
    return float((weighted - _xlogx(q)).sum())


@dataclass(frozen=True)
class EmConfig:
    em_rounds: int = 10
    e_epochs: int = 2
    m_epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 0.001
    momentum: float = 0.9
    gate_learning_rate: float | None = None  # defaults to learning_rate
    seed: int = 0
    balance_coeff: float = 0.0  # optional gate load-balance penalty (E-phase)

    def __post_init__(self):
        if self.em_rounds < 0:
            raise ContractError("em_rounds must be >= 0")
        for name in ("e_epochs", "m_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    @property
    def gate_lr(self) -> float:
        return self.learning_rate if self.gate_learning_rate is None else self.gate_learning_rate


@dataclass
class TrainTrace:
    """One loss entry per completed phase plus per-round summaries."""

    phase_losses: list[tuple[int, str, float]] = field(default_factory=list)
    round_accuracy: list[float] = field(default_factory=list)
    gate_usage: list[Array] = field(default_factory=list)


def shuffle_seed(seed: int, round_idx: int, phase: int, epoch: int) -> list[int]:
    """Composite seed for one epoch's batch order; shared with the plain
    trainer so degenerate single-expert runs replay the same schedule."""
    return [seed, round_idx, phase, epoch]


def _negative_bound(model: MixtureModel, X: Array, y: Array, batch_size: int = 256) -> float:
    total = 0.0
    for lo in range(0, len(y), batch_size):
        xb, yb = X[lo : lo + batch_size], y[lo : lo + batch_size]
        q = gate_probs(model, xb)
        total += -evidence_lower_bound(model, q, xb, yb)
    return total / max(len(y), 1)


def gate_phase_grad(
    q: Array, log_q: Array, label_logp: Array, log_prior: Array, balance_coeff: float
) -> Array:
    """d(mean negative bound)/d(gate logits) for one batch.

    The bound's gate entropy term is part of the objective, so its optimum
    sits at the label posterior; the optional balance penalty adds the
    gradient of coeff * KL(batch mean gate || uniform). ``log_q`` comes from
    log-softmax on the gate logits, which stays finite when a saturated
    softmax underflows q itself to zero.
    """
    b = len(q)
    bracket = log_q - label_logp - log_prior[None, :]
    inner = (q * bracket).sum(axis=1, keepdims=True)
    dlogits = q * (bracket - inner) / b
    if balance_coeff > 0.0:
        m = np.maximum(q.mean(axis=0), 1e-12)  # floor: penalty only steers mass away from 0
        t = np.log(m * len(m))
        dlogits += (balance_coeff / b) * q * (t[None, :] - (q * t[None, :]).sum(axis=1, keepdims=True))
    return dlogits


def run_gate_phase(
    model: MixtureModel, X: Array, y: Array, cfg: EmConfig, opt: SgdState, round_idx: int
) -> MixtureModel:
    """E-phase: gate-only SGD; expert parameters stay untouched."""
    log_prior = np.log(model.context_prior)
    gate_params = model.gate_params
    for epoch in range(cfg.e_epochs):
        order = np.random.default_rng(
            shuffle_seed(cfg.seed, round_idx, GATE_PHASE, epoch)
        ).permutation(len(y))
        for idx in nnet.iter_batches(order, cfg.batch_size):
            xb, yb = X[idx], y[idx]
            slp = _label_log_probs(model, xb, yb)  # experts are frozen here
            q, cache = nnet.forward(model.gate_spec, gate_params, xb)
            log_q = nnet.log_softmax(cache.logits)
            dlogits = gate_phase_grad(q, log_q, slp, log_prior, cfg.balance_coeff)
            gate_params = nnet.sgd_step(gate_params, nnet.backward(cache, dlogits), opt)
    return replace(model, gate_params=gate_params)


def run_expert_phase(
    model: MixtureModel,
    X: Array,
    y: Array,
    cfg: EmConfig,
    opts: list[SgdState],
    round_idx: int,
) -> MixtureModel:
    """M-phase: expert-only SGD with gate responsibilities as sample weights."""
    expert_params = list(model.expert_params)
    for epoch in range(cfg.m_epochs):
        order = np.random.default_rng(
            shuffle_seed(cfg.seed, round_idx, EXPERT_PHASE, epoch)
        ).permutation(len(y))
        for idx in nnet.iter_batches(order, cfg.batch_size):
            xb, yb = X[idx], y[idx]
            q = gate_probs(model, xb)  # gate is frozen here
            for c in range(model.n_contexts):
                probs, cache = nnet.forward(model.expert_spec, expert_params[c], xb)
                dlogits = nnet.xent_logit_grad(probs, yb, weights=q[:, c])
                expert_params[c] = nnet.sgd_step(
                    expert_params[c], nnet.backward(cache, dlogits), opts[c]
                )
    return replace(model, expert_params=tuple(expert_params))


def em_train(
    model: MixtureModel, dataset: LabeledDataset, cfg: EmConfig
) -> tuple[MixtureModel, TrainTrace]:
    """Alternate gate and expert phases for ``em_rounds`` rounds.

    Context labels on the dataset, if any, are ignored. With
    ``em_rounds=0`` the model is returned unchanged with an empty trace.
    """
    if len(dataset) == 0:
        raise ContractError("em_train needs a nonempty dataset")
    trace = TrainTrace()
    if cfg.em_rounds == 0:
        return model, trace
    X, y = dataset.stack(), dataset.activities()
    gate_opt = SgdState(cfg.gate_lr, cfg.momentum)
    expert_opts = [SgdState(cfg.learning_rate, cfg.momentum) for _ in model.expert_params]
    # Experts first: they always enter cold, while the gate may carry a
    # pretrained routing that an immediate gate phase (tracking the posterior
    # of untrained experts) would erase.
    for r in range(cfg.em_rounds):
        for phase_name, runner in (
            ("experts", lambda m: run_expert_phase(m, X, y, cfg, expert_opts, r)),
            ("gate", lambda m: run_gate_phase(m, X, y, cfg, gate_opt, r)),
        ):
            try:
                model = runner(model)
            except TrainingError as err:
                raise TrainingError(f"round {r} {phase_name} phase: {err}") from err
            loss = _negative_bound(model, X, y)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss after {phase_name} phase of round {r}"
                )
            trace.phase_losses.append((r, phase_name, loss))
        _, pred = mixture_predict(model, X)
        trace.round_accuracy.append(float((pred == y).mean()))
        trace.gate_usage.append(gate_probs(model, X).mean(axis=0))
    return model, trace


# ---------------------------------------------------------------------------
# Checkpoints: a zip of raw .npy arrays plus a JSON meta entry. Zip entry
# timestamps are pinned so identical models serialize to identical bytes.
# ---------------------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "conv_layers": [list(t) for t in spec.conv_layers],
        "dense_widths": list(spec.dense_widths),
        "output_units": spec.output_units,
    }


def _spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        conv_layers=tuple(tuple(t) for t in d["conv_layers"]),
        dense_widths=tuple(d["dense_widths"]),
        output_units=d["output_units"],
    )


def _params_entries(tag: str, params: Parameters) -> dict[str, Array]:
    out = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{tag}_w{i}"] = w
        out[f"{tag}_b{i}"] = b
    return out


def save_checkpoint(
    path,
    model: MixtureModel,
    *,
    activity_names: dict[int, str] | None = None,
    context_names: dict[int, str] | None = None,
    fingerprint: str = "",
    extra: dict | None = None,
) -> None:
    """Serialize the model with label dictionaries and the creating config
    fingerprint; float arrays round-trip bit-exactly."""
    arrays = {"context_prior": model.context_prior}
    arrays.update(_params_entries("gate", model.gate_params))
    for c, params in enumerate(model.expert_params):
        arrays.update(_params_entries(f"expert{c}", params))
    meta = {
        "format": "ctxmix-checkpoint-v1",
        "gate_spec": _spec_to_dict(model.gate_spec),
        "expert_spec": _spec_to_dict(model.expert_spec),
        "n_contexts": model.n_contexts,
        "in_channels": model.gate_params.in_channels,
        "in_length": model.gate_params.in_length,
        "init_seeds": {
            "gate": model.gate_params.init_seed,
            "experts": [p.init_seed for p in model.expert_params],
        },
        "activity_names": {str(k): v for k, v in (activity_names or {}).items()},
        "context_names": {str(k): v for k, v in (context_names or {}).items()},
        "config_fingerprint": fingerprint,
        "extra": extra or {},
    }
    path = Path(path)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(
            zipfile.ZipInfo("meta.json", date_time=_EPOCH),
            json.dumps(meta, sort_keys=True, indent=1),
        )
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), buf.getvalue())


def _read_params(zf: zipfile.ZipFile, tag: str, seed: int, in_channels: int, in_length: int) -> Parameters:
    weights, biases, i = [], [], 0
    names = set(zf.namelist())
    while f"{tag}_w{i}.npy" in names:
        weights.append(np.lib.format.read_array(io.BytesIO(zf.read(f"{tag}_w{i}.npy"))))
        biases.append(np.lib.format.read_array(io.BytesIO(zf.read(f"{tag}_b{i}.npy"))))
        i += 1
    for a in (*weights, *biases):
        a.flags.writeable = False
    return Parameters(
        weights=tuple(weights),
        biases=tuple(biases),
        init_seed=seed,
        in_channels=in_channels,
        in_length=in_length,
    )


def load_checkpoint(path) -> tuple[MixtureModel, dict]:
    with zipfile.ZipFile(Path(path)) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != "ctxmix-checkpoint-v1":
            raise ContractError(f"{path}: not a ctxmix checkpoint")
        ic, il = meta["in_channels"], meta["in_length"]
        gate = _read_params(zf, "gate", meta["init_seeds"]["gate"], ic, il)
        experts = tuple(
            _read_params(zf, f"expert{c}", meta["init_seeds"]["experts"][c], ic, il)
            for c in range(meta["n_contexts"])
        )
        prior = np.lib.format.read_array(io.BytesIO(zf.read("context_prior.npy")))
    model = MixtureModel(
        gate_spec=_spec_from_dict(meta["gate_spec"]),
        gate_params=gate,
        expert_spec=_spec_from_dict(meta["expert_spec"]),
        expert_params=experts,
        context_prior=prior,
    )
    meta["activity_names"] = {int(k): v for k, v in meta["activity_names"].items()}
    meta["context_names"] = {int(k): v for k, v in meta["context_names"].items()}
    return model, meta
