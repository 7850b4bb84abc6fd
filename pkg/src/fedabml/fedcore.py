"""Federated training loop: client sampling, local bi-level updates, server aggregation.

Every random choice is drawn from a generator keyed by a tuple such as
``(seed, round, client_id, tag)``, so a run is a pure function of its config
and does not depend on client execution order or thread count.
"""

from __future__ import annotations

import enum
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import metrics
from .bnn import Batch, ModelSpec, elbo_loss, init_prior, nll_and_grad
from .tasks import ClientShard
from .varinf import NU_MIN, AggregationStrategy, MeanFieldGaussian, aggregate, kl_grad_wrt_p, kl_grad_wrt_p_sampled

INIT_TAG = 0x1417
SELECT_TAG = 0x5E1E
CLIENT_TAG = 0xC11E
THETA_TAG = 0x7E7A
FINETUNE_TAG = 0xF17E

DIVERGENCE_LIMIT = 1e12


class Mode(str, enum.Enum):
    FEDABML = "fedabml"
    FEDAVG = "fedavg"
    PERFEDAVG = "perfedavg"
    PFEDME = "pfedme"


class ClientDivergence(RuntimeError):
    def __init__(self, client_id, round_index, loss):
        super().__init__(f"client {client_id} diverged in round {round_index} (loss={loss!r})")
        self.client_id = client_id
        self.round_index = round_index
        self.loss = loss


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 20
    participation: float = 0.1
    rounds: int = 100
    local_epochs: int = 5
    inner_steps: int = 5
    lr_phi: float = 1e-3
    lr_theta: float = 1e-3
    kl_weight: float = 1.0
    mc_samples: int = 5
    batch_size: int = 50
    mode: Mode = Mode.FEDABML
    aggregation: AggregationStrategy = AggregationStrategy.ORACLE
    seed: int = 0
    size_weighted: bool = False
    kl_scale: float = 1.0
    theta_grad: str = "closed_form"
    freeze_log_std: bool = False
    init_log_std: float = math.log(0.1)
    per_fedavg_alpha: float = 1e-3
    pfedme_lambda: float = 15.0
    pfedme_log_std: float = NU_MIN
    eval_every: int = 0
    eval_finetune_epochs: int = 1
    eval_samples: int = 5

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "aggregation", AggregationStrategy(self.aggregation))
        checks = [
            ("n_clients", self.n_clients >= 1),
            ("participation", 0.0 < self.participation <= 1.0),
            ("rounds", self.rounds >= 1),
            ("local_epochs", self.local_epochs >= 1),
            ("inner_steps", self.inner_steps >= 1),
            ("mc_samples", self.mc_samples >= 1),
            ("batch_size", self.batch_size >= 1),
            ("lr_phi", self.lr_phi > 0),
            ("lr_theta", self.lr_theta >= 0),
            ("kl_weight", self.kl_weight >= 0),
            ("kl_scale", self.kl_scale > 0),
            ("theta_grad", self.theta_grad in ("closed_form", "sampled")),
            ("per_fedavg_alpha", self.per_fedavg_alpha > 0),
            ("pfedme_lambda", self.pfedme_lambda >= 0),
            ("eval_every", self.eval_every >= 0),
            ("eval_finetune_epochs", self.eval_finetune_epochs >= 0),
            ("eval_samples", self.eval_samples >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid value for {name}: {getattr(self, name)!r}")

    @property
    def clients_per_round(self) -> int:
        # tolerance keeps e.g. 0.3 * 10 from rounding up to 4
        return max(1, min(self.n_clients, math.ceil(self.participation * self.n_clients - 1e-9)))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, enum.Enum) else v
        return out


@dataclass
class FederatedTask:
    spec: ModelSpec
    train: list[ClientShard]
    test: list[ClientShard] | None = None
    target: np.ndarray | None = None  # closed-form global optimum, when known

    def __post_init__(self):
        ids = [s.client_id for s in self.train]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate client ids")
        for s in self.train:
            if s.features.shape[1] != self.spec.n_in:
                raise ValueError(f"client {s.client_id} has {s.features.shape[1]} features, model expects {self.spec.n_in}")


@dataclass
class ClientResult:
    client_id: int
    theta: MeanFieldGaussian
    phi: MeanFieldGaussian
    loss: float
    steps: int


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, client_id, CLIENT_TAG])


def theta_snapshot_id(theta: MeanFieldGaussian) -> str:
    h = hashlib.sha256(theta.mean.tobytes() + theta.log_std.tobytes())
    return h.hexdigest()[:16]


def init_theta(spec: ModelSpec, cfg: FedConfig) -> MeanFieldGaussian:
    log_std = NU_MIN if cfg.mode in (Mode.FEDAVG, Mode.PERFEDAVG) else cfg.init_log_std
    if cfg.mode is Mode.PFEDME:
        log_std = cfg.pfedme_log_std
    return init_prior(spec, np.random.default_rng([cfg.seed, INIT_TAG]), log_std)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _guard(loss: float, client_id, round_index):
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise ClientDivergence(client_id, round_index, loss)


# ---------------------------------------------------------------------------
# per-mode local losses


def point_nll_grad(spec: ModelSpec, w, batch: Batch, n_total: int) -> tuple[float, np.ndarray]:
    """Plain NLL of a point estimate, rescaled to the full local dataset."""
    value, grad = nll_and_grad(spec, w, batch)
    scale = n_total / len(batch)
    return value * scale, grad * scale


def per_fedavg_update(theta, shard: ClientShard | Batch, alpha: float, spec: ModelSpec, steps: int = 1) -> np.ndarray:
    """Personalized point estimate ``theta - alpha * grad[-log p(D|w)]``, repeated ``steps`` times."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    batch = shard.batch() if isinstance(shard, ClientShard) else shard
    w = np.array(theta, dtype=np.float64)
    for _ in range(steps):
        _, g = nll_and_grad(spec, w, batch)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in per_fedavg_update")
        w = w - alpha * g
    return w


def pfedme_mode_loss(
    phi_mean,
    theta_mean,
    batch: Batch | ClientShard,
    spec: ModelSpec,
    lam_reg: float,
    log_std: float,
    s: int,
    rng: np.random.Generator | None = None,
    *,
    noise=None,
    n_total: int | None = None,
) -> tuple[float, np.ndarray]:
    """Expected NLL under N(phi_mean, exp(log_std)^2 I) plus ``lam_reg/2 * ||phi - theta||^2``.

    With a shared fixed variance, the KL between the two isotropic Gaussians
    is this quadratic term up to a factor and a constant, so the gradient
    equals the Fed-ELBO mean gradient at ``lam = lam_reg * exp(2 log_std)``.
    """
    if isinstance(batch, ClientShard):
        batch = batch.batch()
    phi_mean = np.asarray(phi_mean, dtype=np.float64)
    theta_mean = np.asarray(theta_mean, dtype=np.float64)
    if phi_mean.shape != theta_mean.shape or phi_mean.size != spec.d:
        raise ValueError(f"dimension mismatch: phi {phi_mean.shape}, theta {theta_mean.shape}, model d={spec.d}")
    if lam_reg < 0:
        raise ValueError("lam_reg must be nonnegative")
    q = MeanFieldGaussian.isotropic(phi_mean, log_std)
    data = elbo_loss(q, q, batch, spec, s=s, lam=0.0, rng=rng, noise=noise, n_total=n_total)
    diff = phi_mean - theta_mean
    return data.loss + 0.5 * lam_reg * float(diff @ diff), data.grad_phi[0] + lam_reg * diff


def theta_gradient(phi, theta, cfg: FedConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the weighted KL term w.r.t. the prior (the only term that depends on it)."""
    weight = cfg.kl_weight * cfg.kl_scale
    if cfg.theta_grad == "sampled":
        gm, gs = kl_grad_wrt_p_sampled(phi, theta, rng.standard_normal((cfg.mc_samples, phi.d)))
    else:
        gm, gs = kl_grad_wrt_p(phi, theta)
    return weight * gm, weight * gs


def _local_epoch(theta, phi, shard, cfg, spec, rng, update_theta, client_id=None, round_index=None):
    """One pass over the shard in minibatches. Returns (theta, phi, losses)."""
    losses = []
    freeze = cfg.freeze_log_std
    for idx in _minibatches(shard.n, cfg.batch_size, rng):
        batch = shard.batch(idx)
        if cfg.mode is Mode.FEDABML:
            for _ in range(cfg.inner_steps):
                val = elbo_loss(
                    phi, theta, batch, spec, s=cfg.mc_samples, lam=cfg.kl_weight, kl_scale=cfg.kl_scale,
                    rng=rng, n_total=shard.n,
                )
                _guard(val.loss, client_id, round_index)
                phi = phi.step(*val.grad_phi, cfg.lr_phi, update_log_std=not freeze)
                losses.append(val.loss)
            if update_theta:
                gm, gs = theta_gradient(phi, theta, cfg, rng)
                theta = theta.step(gm, gs, cfg.lr_theta, update_log_std=not freeze)
        elif cfg.mode is Mode.FEDAVG:
            loss, g = point_nll_grad(spec, phi.mean, batch, shard.n)
            _guard(loss, client_id, round_index)
            phi = MeanFieldGaussian(phi.mean - cfg.lr_phi * g, phi.log_std)
            losses.append(loss)
        elif cfg.mode is Mode.PERFEDAVG:
            _, g_inner = point_nll_grad(spec, phi.mean, batch, shard.n)
            adapted = phi.mean - cfg.per_fedavg_alpha * g_inner
            loss, g = point_nll_grad(spec, adapted, batch, shard.n)
            _guard(loss, client_id, round_index)
            if update_theta:
                phi = MeanFieldGaussian(phi.mean - cfg.lr_phi * g, phi.log_std)
            else:
                phi = MeanFieldGaussian(adapted, phi.log_std)
            losses.append(loss)
        else:
            for _ in range(cfg.inner_steps):
                loss, g = pfedme_mode_loss(
                    phi.mean, theta.mean, batch, spec, cfg.pfedme_lambda, cfg.pfedme_log_std, cfg.mc_samples,
                    rng, n_total=shard.n,
                )
                _guard(loss, client_id, round_index)
                phi = MeanFieldGaussian(phi.mean - cfg.lr_phi * g, phi.log_std)
                losses.append(loss)
            if update_theta:
                theta = MeanFieldGaussian(
                    theta.mean - cfg.lr_theta * cfg.pfedme_lambda * (theta.mean - phi.mean), theta.log_std
                )
    if cfg.mode in (Mode.FEDAVG, Mode.PERFEDAVG) and update_theta:
        theta = phi
    return theta, phi, losses


def client_update(
    theta_t: MeanFieldGaussian,
    shard: ClientShard,
    cfg: FedConfig,
    spec: ModelSpec,
    rng: np.random.Generator,
    round_index: int | None = None,
) -> ClientResult:
    """Local work of one selected client: start phi and the local prior at
    ``theta_t`` and run ``cfg.local_epochs`` passes of (k phi-steps, 1 prior
    step) per minibatch. Point-estimate modes train a single vector instead.
    """
    if theta_t.d != spec.d:
        raise ValueError(f"theta has d={theta_t.d}, model expects {spec.d}")
    theta, phi = theta_t, theta_t
    losses = []
    for _ in range(cfg.local_epochs):
        theta, phi, epoch_losses = _local_epoch(
            theta, phi, shard, cfg, spec, rng, True, shard.client_id, round_index
        )
        losses = epoch_losses
    return ClientResult(shard.client_id, theta, phi, float(np.mean(losses)), cfg.local_epochs)


def select_clients(cfg: FedConfig, round_index: int, client_ids: Sequence[int]) -> list[int]:
    rng = np.random.default_rng([cfg.seed, round_index, SELECT_TAG])
    chosen = rng.choice(len(client_ids), size=cfg.clients_per_round, replace=False)
    return sorted(int(client_ids[i]) for i in chosen)


@dataclass
class RoundOutput:
    theta: MeanFieldGaussian
    selected: list[int]
    results: dict[int, ClientResult]


def server_round(
    theta_t: MeanFieldGaussian,
    clients: Sequence[ClientShard],
    cfg: FedConfig,
    spec: ModelSpec,
    round_index: int,
    threads: int = 1,
) -> RoundOutput:
    if not clients:
        raise ValueError("no clients")
    if round_index < 0:
        raise ValueError("round_index must be nonnegative")
    by_id = {c.client_id: c for c in clients}
    if len(by_id) != cfg.n_clients:
        raise ValueError(f"config expects {cfg.n_clients} clients, task has {len(by_id)}")
    selected = select_clients(cfg, round_index, sorted(by_id))

    def work(cid):
        return client_update(theta_t, by_id[cid], cfg, spec, client_rng(cfg.seed, round_index, cid), round_index)

    if threads > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(work, selected))
    else:
        outs = [work(cid) for cid in selected]
    results = {r.client_id: r for r in outs}

    members = [results[cid].theta for cid in selected]
    if cfg.size_weighted:
        sizes = np.array([by_id[cid].n for cid in selected], dtype=np.float64)
        weights = sizes / sizes.sum()
    else:
        weights = None
    return RoundOutput(aggregate(members, weights, cfg.aggregation), selected, results)


# ---------------------------------------------------------------------------
# personalization and evaluation


def personalize_phi(theta: MeanFieldGaussian, shard: ClientShard, epochs: int, cfg: FedConfig, spec: ModelSpec, rng):
    """Adapt a client model from ``theta`` with the prior held fixed; yields phi after each epoch."""
    phi = theta
    for _ in range(epochs):
        _, phi, _ = _local_epoch(theta, phi, shard, cfg, spec, rng, False, shard.client_id)
        yield phi


def _eval_model(phi: MeanFieldGaussian, cfg: FedConfig) -> MeanFieldGaussian:
    # point-estimate modes are evaluated at the point itself
    if cfg.mode is Mode.FEDABML:
        return phi
    return phi.with_log_std(NU_MIN)


def personalize(
    theta_star: MeanFieldGaussian,
    new_shard: ClientShard,
    epochs: int,
    cfg: FedConfig,
    spec: ModelSpec,
    test_shard: ClientShard | None = None,
    seed: int | None = None,
) -> tuple[MeanFieldGaussian, list[dict]]:
    """Fine-tune on a (possibly unseen) client and evaluate after every epoch.

    The returned list has ``epochs + 1`` entries; entry 0 is the untouched
    ``theta_star``.
    """
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    if new_shard is None or new_shard.n < 1:
        raise ValueError("empty shard")
    seed = cfg.seed if seed is None else seed
    test = test_shard if test_shard is not None else new_shard
    rng = np.random.default_rng([seed, new_shard.client_id, FINETUNE_TAG])

    def score(epoch, phi):
        acc, mse, mean_nll, ent = metrics.evaluate_one(
            spec, _eval_model(phi, cfg), test.features, test.targets, cfg.eval_samples,
            metrics.eval_rng(seed, new_shard.client_id),
        )
        return {"epoch": epoch, "accuracy": acc, "mse": mse, "nll": mean_nll, "entropy": ent}

    phi = theta_star
    out = [score(0, phi)]
    for e, phi in enumerate(personalize_phi(theta_star, new_shard, epochs, cfg, spec, rng), start=1):
        out.append(score(e, phi))
    return phi, out


def personalized_models(theta, shards, cfg: FedConfig, spec: ModelSpec, round_index: int, epochs: int | None = None):
    """Amortized per-client posteriors: ``epochs`` of local adaptation from ``theta``."""
    epochs = cfg.eval_finetune_epochs if epochs is None else epochs
    out = {}
    for sh in shards:
        phi = theta
        if cfg.mode is not Mode.FEDAVG:
            rng = np.random.default_rng([cfg.seed, round_index, sh.client_id, FINETUNE_TAG])
            for phi in personalize_phi(theta, sh, epochs, cfg, spec, rng):
                pass
        out[sh.client_id] = _eval_model(phi, cfg)
    return out


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainState:
    theta: MeanFieldGaussian
    phis: dict[int, MeanFieldGaussian] = field(default_factory=dict)
    history: metrics.TrainingHistory = field(default_factory=metrics.TrainingHistory)
    next_round: int = 0


def _should_eval(cfg: FedConfig, t: int) -> bool:
    return cfg.eval_every > 0 and (t + 1) % cfg.eval_every == 0


def run_training(
    cfg: FedConfig,
    task: FederatedTask,
    state: TrainState | None = None,
    rounds: int | None = None,
    threads: int = 1,
    callback=None,
) -> TrainState:
    """Run ``rounds`` server rounds (default ``cfg.rounds``), optionally continuing ``state``.

    Continuing a state for b rounds after a rounds gives bitwise the same
    result as a single run of a + b rounds, because each round's randomness
    is keyed by its index.
    """
    spec = task.spec
    if state is None:
        state = TrainState(init_theta(spec, cfg))
    if state.theta.d != spec.d:
        raise ValueError(f"state has d={state.theta.d}, model expects {spec.d}")
    rounds = cfg.rounds if rounds is None else rounds
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    total = state.next_round + rounds
    theta = state.theta
    phis = dict(state.phis)
    history = metrics.TrainingHistory(list(state.history.records))
    for t in range(state.next_round, total):
        out = server_round(theta, task.train, cfg, spec, t, threads)
        for cid, res in out.results.items():
            phis[cid] = res.phi
        theta = out.theta
        losses = np.array([out.results[c].loss for c in out.selected])
        rec = metrics.RoundRecord(
            round=t,
            mode=cfg.mode.value,
            selected=out.selected,
            mean_loss=float(losses.mean()),
            std_loss=float(losses.std()),
            theta_id=theta_snapshot_id(theta),
        )
        if task.target is not None:
            rec.dist_to_target = metrics.distance_to_target(theta, task.target)
        if task.test and _should_eval(cfg, t):
            personal = personalized_models(theta, task.train, cfg, spec, t)
            report = metrics.evaluate_clients(spec, personal, task.test, cfg.eval_samples, seed=cfg.seed)
            glob = metrics.evaluate_clients(
                spec, {s.client_id: _eval_model(theta, cfg) for s in task.test}, task.test, cfg.eval_samples,
                seed=cfg.seed,
            )
            rec.mean_acc, rec.std_acc = report.mean_acc, report.std_acc
            rec.global_acc = glob.mean_acc
            rec.per_client = report.per_client()
        history.append(rec)
        if callback is not None:
            callback(rec)
    return TrainState(theta, phis, history, total)
