"""Alignment upper bound objective and its cooperative (min-min) trainer.

The loss for flows ``T_j``, shared density ``Q`` and weights ``w`` is

    L = sum_j w_j * mean_i [ -log|det J_{T_j}(x_ij)| - log Q(T_j(x_ij)) ]

``Q`` is fitted to the pooled latents (Q-steps) and every ``T_j`` is pushed
towards ``Q`` (T-steps).  Freezing ``Q`` at N(0, I) gives AlignFlow without
adversarial terms; freezing ``T_2`` at the identity with k = 2 gives LRMF.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .density import Density, FixedStandardNormal
from .flows import Flow, IdentityFlow
from .numeric import NonFiniteError, ParameterStore, make_optimizer, make_rng

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    AUB = "aub"
    ALIGNFLOW_MLE = "alignflow_mle"
    LRMF = "lrmf"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, message):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


class AlignmentModel:
    """k flows, one shared density and a probability weight vector.

    All parameters live in one :class:`ParameterStore`: the flows first (in
    domain order), then the density.
    """

    def __init__(self, flows: list[Flow], density: Density, weights=None):
        if len(flows) < 1:
            raise ValueError("need at least one flow")
        if any(f.dim != density.dim for f in flows):
            raise ValueError("all flows must share the density's dimension")
        k = len(flows)
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (k,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a strictly positive probability vector of length k")
        self.flows = list(flows)
        self.density = density
        self.weights = w
        named = [(f"flow{j}", f) for j, f in enumerate(self.flows)] + [("density", density)]
        self.store = ParameterStore.attach(named)
        self.n_flow_params = sum(f.n_params for f in self.flows)

    @property
    def k(self) -> int:
        return len(self.flows)

    @property
    def dim(self) -> int:
        return self.density.dim

    @property
    def flow_range(self) -> tuple[int, int]:
        return (0, self.n_flow_params)

    @property
    def density_range(self) -> tuple[int, int]:
        return (self.n_flow_params, len(self.store))

    def flow_param_range(self, j: int) -> tuple[int, int]:
        return self.store.segment_range(f"flow{j}.")

    def spec(self) -> dict:
        return {
            "flows": [f.spec() for f in self.flows],
            "density": self.density.spec(),
            "weights": self.weights.tolist(),
        }


def _per_sample_terms(model, j, x):
    z, logdet = model.flows[j].forward(x)
    lp = model.density.log_prob(z)
    return -logdet - lp


def _check_batches(model, batches):
    if len(batches) != model.k:
        raise ValueError(f"expected {model.k} batches, got {len(batches)}")
    for j, b in enumerate(batches):
        b = np.asarray(b)
        if b.ndim != 2 or b.shape[0] == 0 or b.shape[1] != model.dim:
            raise ValueError(f"batch {j} must be a non-empty (n, {model.dim}) matrix, got {b.shape}")


def _raise_nonfinite(terms, j):
    bad = int(np.flatnonzero(~np.isfinite(terms))[0])
    raise NonFiniteError(f"non-finite loss term in domain {j}, sample {bad}")


def domain_losses(model: AlignmentModel, batches) -> np.ndarray:
    """Per-domain mean of ``-logdet - log Q(T_j(x))`` (unweighted)."""
    _check_batches(model, batches)
    out = np.empty(model.k)
    for j, x in enumerate(batches):
        terms = _per_sample_terms(model, j, x)
        if not np.all(np.isfinite(terms)):
            _raise_nonfinite(terms, j)
        out[j] = terms.sum() / x.shape[0]
    return out


def aub_loss(model: AlignmentModel, batches) -> float:
    """Weighted AUB loss with expectations replaced by batch means."""
    return float(np.dot(model.weights, domain_losses(model, batches)))


def aub_metric(model: AlignmentModel, test_sets, chunk: int = 65536) -> float:
    """Test AUB in nats: the AUB loss on held-out data, no parameters touched."""
    _check_batches(model, test_sets)
    means = np.empty(model.k)
    for j, x in enumerate(test_sets):
        s = 0.0
        for start in range(0, x.shape[0], chunk):
            terms = _per_sample_terms(model, j, x[start:start + chunk])
            if not np.all(np.isfinite(terms)):
                _raise_nonfinite(terms, j)
            s += terms.sum()
        means[j] = s / x.shape[0]
    return float(np.dot(model.weights, means))


def accumulate_gradients(model: AlignmentModel, batches, wrt=("flows", "density")) -> float:
    """Add d(aub_loss)/d(params) into ``model.store.grads`` and return the loss.

    ``wrt`` picks which blocks receive gradients; the others are untouched.
    """
    return _accumulate(model, batches, wrt)[0]


def _accumulate(model, batches, wrt):
    _check_batches(model, batches)
    want_flows = "flows" in wrt
    want_density = "density" in wrt
    loss = 0.0
    logq = 0.0
    for j, x in enumerate(batches):
        n = x.shape[0]
        coef = model.weights[j] / n
        flow = model.flows[j]
        if want_flows:
            z, logdet, fcache = flow.forward_cached(x)
        else:
            z, logdet = flow.forward(x)
        lp, dcache = model.density.log_prob_cached(z)
        terms = -logdet - lp
        if not np.all(np.isfinite(terms)):
            _raise_nonfinite(terms, j)
        loss += model.weights[j] * terms.mean()
        logq += model.weights[j] * lp.mean()
        g = np.full(n, -coef)
        if want_flows:
            gz = model.density.backward(dcache, g, accumulate=want_density)
            flow.backward(fcache, gz, g)
        elif want_density:
            model.density.backward(dcache, g, accumulate=True)
    return float(loss), float(logq)


def analytic_gradient(model: AlignmentModel, batches) -> np.ndarray:
    """Full gradient of :func:`aub_loss` w.r.t. every stored parameter."""
    model.store.zero_grads()
    accumulate_gradients(model, batches)
    g = model.store.grads.copy()
    model.store.zero_grads()
    return g


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 128
    lr_q: float = 1e-3
    lr_t: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    mode: Mode = Mode.AUB
    patience: int | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if self.lr_q <= 0 or self.lr_t <= 0:
            raise ValueError("learning rates must be positive")


def validate_mode(model: AlignmentModel, config: TrainConfig) -> None:
    """Enforce the structural rules of the special-case modes."""
    if config.mode is Mode.ALIGNFLOW_MLE and not isinstance(model.density, FixedStandardNormal):
        raise ValueError("alignflow_mle mode requires a fixed standard normal density")
    if config.mode is Mode.LRMF:
        if model.k != 2:
            raise ValueError(f"lrmf mode requires exactly 2 domains, got {model.k}")
        if not isinstance(model.flows[1], IdentityFlow):
            raise ValueError("lrmf mode requires flows[1] to be the identity")


class Trainer:
    """Holds optimizer state for the Q-steps and T-steps of one model."""

    def __init__(self, model: AlignmentModel, config: TrainConfig):
        validate_mode(model, config)
        self.model = model
        self.config = config
        d0, d1 = model.density_range
        f0, f1 = model.flow_range
        self.q_opt = make_optimizer(config.optimizer, config.lr_q, d0, d1) if d1 > d0 else None
        self.t_opt = make_optimizer(config.optimizer, config.lr_t, f0, f1) if f1 > f0 else None

    @property
    def q_frozen(self) -> bool:
        return self.config.mode is Mode.ALIGNFLOW_MLE or self.q_opt is None

    def q_step(self, batches) -> float:
        """One density update with flows frozen; returns the weighted mean log Q."""
        model = self.model
        if self.q_frozen:
            return _accumulate(model, batches, wrt=())[1]
        model.store.zero_grads()
        logq = _accumulate(model, batches, wrt=("density",))[1]
        self.q_opt.step(model.store)
        model.store.zero_grads()
        return logq

    def t_step(self, batches) -> float:
        """One flow update with the density frozen; returns the pre-update loss."""
        model = self.model
        if self.t_opt is None:
            return aub_loss(model, batches)
        model.store.zero_grads()
        loss = accumulate_gradients(model, batches, wrt=("flows",))
        self.t_opt.step(model.store)
        model.store.zero_grads()
        return loss


@dataclass
class EpochRecord:
    epoch: int
    train_aub: float
    val_aub: float
    q_loglik: float
    wall_time: float


@dataclass
class TrainTrace:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_aub: float = float("inf")
    # parameters after the last epoch, before the best epoch is restored
    final_values: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainTrace":
        trace = cls()
        for line in text.splitlines():
            if line.strip():
                trace.records.append(EpochRecord(**json.loads(line)))
        if trace.records:
            best = min(trace.records, key=lambda r: r.val_aub)
            trace.best_epoch, trace.best_val_aub = best.epoch, best.val_aub
        return trace


def _split_batches(sizes, batch_size, rng):
    n_batches = max(1, int(np.ceil(min(sizes) / batch_size)))
    perms = [rng.permutation(n) for n in sizes]
    return [[chunk for chunk in np.array_split(p, n_batches)] for p in perms], n_batches


def train(model: AlignmentModel, train_sets, val_sets, config: TrainConfig, callback=None):
    """Alternating Q-pass / T-pass training; keeps the best validation epoch.

    Each epoch shuffles every domain, cuts all domains into the same number
    of batches, runs a full pass of Q-steps and then a full pass of T-steps
    over those batch tuples.  A domain smaller than ``batch_size`` is used
    whole.  Returns ``(model, trace)`` with the best parameters restored.
    """
    if len(train_sets) != model.k or len(val_sets) != model.k:
        raise ValueError(f"expected {model.k} train and validation sets")
    for j, x in enumerate(train_sets):
        if x.shape[0] == 0:
            raise ValueError(f"domain {j} has an empty training set")
    trainer = Trainer(model, config)
    rng = make_rng(config.seed)
    trace = TrainTrace()
    best_values = model.store.clone_values()
    since_best = 0
    sizes = [x.shape[0] for x in train_sets]
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        index_batches, n_batches = _split_batches(sizes, config.batch_size, rng)
        tuples = [[train_sets[j][index_batches[j][b]] for j in range(model.k)] for b in range(n_batches)]
        try:
            q_ll = [trainer.q_step(bt) for bt in tuples]
            t_loss = [trainer.t_step(bt) for bt in tuples]
            val = aub_metric(model, val_sets)
        except (NonFiniteError, FloatingPointError) as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        train_aub = float(np.mean(t_loss))
        if not np.isfinite(train_aub) or not np.isfinite(val):
            raise TrainingDiverged(epoch, "non-finite AUB")
        rec = EpochRecord(epoch, train_aub, val, float(np.mean(q_ll)), time.perf_counter() - t0)
        trace.records.append(rec)
        if val < trace.best_val_aub:
            trace.best_val_aub = val
            trace.best_epoch = epoch
            best_values = model.store.clone_values()
            since_best = 0
        else:
            since_best += 1
        if callback is not None:
            callback(rec)
        log.debug("epoch %d train %.5f val %.5f", epoch, train_aub, val)
        if config.patience is not None and since_best >= config.patience:
            break
    trace.final_values = model.store.clone_values()
    model.store.load_values(best_values)
    return model, trace
