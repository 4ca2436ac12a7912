"""Round-based federated orchestration with FedAvg aggregation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .nn.network import DenseNet, init_net
from .nn.tensor import ParamTensor, ShapeError, check_compatible, params_digest
from .trainer import DeviceModel, DeviceModelTriple, DeviceShard, LossSummary, device_update

__all__ = [
    "DeviceModelTriple",
    "FLConfig",
    "RoundRecord",
    "ServerState",
    "child_rng",
    "fed_avg",
    "init_federation",
    "num_sampled",
    "run_round",
    "run_training",
    "sample_devices",
]

# stream tags keep the seed-derived RNG families apart
_SERVER, _DEVICE, _INIT_THETA, _INIT_PSI, _INIT_OMEGA, _UPLOAD, _PRETRAIN = range(7)

UploadTransform = Callable[[list[ParamTensor], int, int], list[ParamTensor]]


def child_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, path)])


def device_rng(seed: int, device_id: int, round_index: int) -> np.random.Generator:
    """Shuffle stream for one device in one round."""
    return child_rng(seed, _DEVICE, device_id, round_index)


def upload_rng(seed: int, device_id: int, round_index: int) -> np.random.Generator:
    """Stream reserved for upload-time transforms such as DP noise."""
    return child_rng(seed, _UPLOAD, device_id, round_index)


@dataclass(frozen=True)
class FLConfig:
    num_devices: int = 100
    rho: float = 0.1
    rounds: int = 20
    local_epochs: int = 10
    batch_size: int = 10
    lr_psi: float = 0.01
    lr_omega: float = 0.01
    lr_theta: float = 0.01
    lambdas: tuple[float, ...] = (0.5,)
    seed: int = 0
    weighted_avg: bool = False
    train_only_sampled: bool = False
    theta_privacy_sign: str = "eq7"
    sequential_refresh: bool = False
    pretrain_epochs: int = 0

    def __post_init__(self) -> None:
        lambdas = tuple(float(v) for v in np.atleast_1d(self.lambdas))
        if len(lambdas) == 1:
            lambdas = lambdas * self.num_devices
        object.__setattr__(self, "lambdas", lambdas)
        if self.num_devices < 1:
            raise ValueError("need at least one device")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if num_sampled(self.num_devices, self.rho) < 1:
            raise ValueError(f"rho={self.rho} samples no device out of {self.num_devices}")
        if min(self.lr_psi, self.lr_omega, self.lr_theta) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 2:
            raise ValueError("need rounds >= 0, local_epochs >= 1 and batch_size >= 2")
        if len(lambdas) != self.num_devices:
            raise ValueError(f"{len(lambdas)} lambdas for {self.num_devices} devices")
        if any(not 0.0 <= v <= 1.0 for v in lambdas):
            raise ValueError("every lambda must lie in [0, 1]")
        if self.theta_privacy_sign not in ("eq7", "alg1"):
            raise ValueError(f"theta_privacy_sign must be 'eq7' or 'alg1', got {self.theta_privacy_sign!r}")

    @property
    def sampled_per_round(self) -> int:
        return num_sampled(self.num_devices, self.rho)


@dataclass(frozen=True)
class Architecture:
    """Layer widths (excluding input/output) and activations of the three nets."""

    theta_hidden: tuple[int, ...] = (64, 128)
    theta_activations: tuple[str, ...] = ("relu", "sigmoid")
    psi_hidden: tuple[int, ...] = (64, 128, 4)
    omega_hidden: tuple[int, ...] = (128, 128, 64)

    @property
    def rep_dim(self) -> int:
        return self.theta_hidden[-1]

    def theta_spec(self, x_dim: int):
        return [x_dim, *self.theta_hidden], list(self.theta_activations)

    def psi_spec(self, arity: int):
        widths = [self.rep_dim, *self.psi_hidden, arity]
        return widths, ["relu"] * len(self.psi_hidden) + ["identity"]

    def omega_spec(self, x_dim: int, arity: int):
        widths = [x_dim + self.rep_dim + arity, *self.omega_hidden, 1]
        return widths, ["relu"] * len(self.omega_hidden) + ["identity"]


PAPER_OMEGA_HIDDEN = (16, 32, 128, 128, 256, 256, 256, *([512] * 6), 4096, 512)


@dataclass(frozen=True)
class ServerState:
    global_theta: DenseNet
    round_index: int
    seed: int

    def digest(self) -> str:
        return params_digest(self.global_theta.params())


@dataclass
class RoundRecord:
    round: int
    sampled: list[int]
    mean_ce_loss: float
    mean_jsd_loss: float
    wall_ms: float
    start_digests: dict[int, str] = field(default_factory=dict)


def num_sampled(num_devices: int, rho: float) -> int:
    """``round(rho * M)`` with halves rounded up."""
    return int(math.floor(rho * num_devices + 0.5))


def sample_devices(num_devices: int, rho: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample of K device ids without replacement, ascending."""
    k = num_sampled(num_devices, rho)
    if not 1 <= k <= num_devices:
        raise ValueError(f"sample size {k} outside [1, {num_devices}]")
    return sorted(int(i) for i in rng.choice(num_devices, size=k, replace=False))


def fed_avg(thetas: Sequence[Sequence[ParamTensor]], weights: Optional[Sequence[float]] = None) -> list[ParamTensor]:
    """Elementwise weighted mean of parameter sets.

    Computed as ``first + sum_k w_k (theta_k - first)`` so that a single
    model, or identical models, come back bit-for-bit.
    """
    if len(thetas) == 0:
        raise ValueError("fed_avg needs at least one parameter set")
    for other in thetas[1:]:
        check_compatible(thetas[0], other)
    if weights is None:
        w = np.full(len(thetas), 1.0 / len(thetas))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(thetas),):
            raise ShapeError(f"{len(w)} weights for {len(thetas)} parameter sets")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        w = w / w.sum()
    out = []
    for j, ref in enumerate(thetas[0]):
        acc = ref.data.copy()
        for k in range(1, len(thetas)):
            acc += w[k] * (thetas[k][j].data - ref.data)
        out.append(ref.with_data(acc))
    return out


def init_federation(cfg: FLConfig, arch: Architecture, x_dim: int, arity: int) -> tuple[ServerState, list[DeviceModel]]:
    """Global extractor plus per-device adversary and critic, all seed-derived."""
    theta = init_net(*arch.theta_spec(x_dim), seed=[cfg.seed, _INIT_THETA], prefix="theta.")
    devices = []
    for i in range(cfg.num_devices):
        psi = init_net(*arch.psi_spec(arity), seed=[cfg.seed, _INIT_PSI, i], prefix="psi.")
        omega = init_net(*arch.omega_spec(x_dim, arity), seed=[cfg.seed, _INIT_OMEGA, i], prefix="omega.")
        devices.append(DeviceModel(theta, psi, omega, cfg.lambdas[i], i))
    return ServerState(theta, 0, cfg.seed), devices


def _check_shards(devices: Sequence[DeviceModel], shards: Sequence[DeviceShard]) -> None:
    if len(devices) != len(shards):
        raise ValueError(f"{len(devices)} devices but {len(shards)} shards")
    for model, shard in zip(devices, shards):
        if len(shard) < 2:
            raise ValueError(f"device {model.device_id}: shard needs at least two samples")
        model.check_data_width(shard.x.shape[1])


def _train_one(args):
    model, shard, cfg, rng = args
    return device_update(model, shard, cfg, rng)


def run_round(server: ServerState, devices: Sequence[DeviceModel], shards: Sequence[DeviceShard],
              cfg: FLConfig, upload: Optional[UploadTransform] = None,
              map_fn: Callable = map) -> tuple[ServerState, list[DeviceModel], RoundRecord]:
    """One global round: broadcast, local training, sampling, aggregation.

    ``upload`` transforms each sampled device's extractor parameters on
    their way to the server (defenses); device-local copies are untouched.
    ``map_fn`` may be a parallel map; results are consumed in device order.
    """
    _check_shards(devices, shards)
    start = time.perf_counter()
    t = server.round_index
    sampled = sample_devices(cfg.num_devices, cfg.rho, child_rng(cfg.seed, _SERVER, t))
    trained = set(sampled) if cfg.train_only_sampled else set(range(cfg.num_devices))

    devices = [replace(d, theta=server.global_theta) for d in devices]
    digests = {d.device_id: params_digest(d.theta.params()) for d in devices}
    jobs = [(d, shards[d.device_id], cfg, device_rng(cfg.seed, d.device_id, t))
            for d in devices if d.device_id in trained]
    results = list(map_fn(_train_one, jobs))

    new_devices = list(devices)
    summaries: list[LossSummary] = []
    for (model, _, _, _), (updated, summary) in zip(jobs, results):
        new_devices[model.device_id] = updated
        summaries.append(summary)

    uploads, weights = [], []
    for i in sampled:
        params = new_devices[i].theta.params()
        if upload is not None:
            params = upload(params, i, t)
        uploads.append(params)
        weights.append(float(len(shards[i])))
    averaged = fed_avg(uploads, weights if cfg.weighted_avg else None)
    new_server = ServerState(server.global_theta.with_params(averaged), t + 1, server.seed)

    record = RoundRecord(
        round=t,
        sampled=sampled,
        mean_ce_loss=float(np.mean([s.mean_ce for s in summaries])),
        mean_jsd_loss=float(np.mean([s.mean_jsd for s in summaries])),
        wall_ms=(time.perf_counter() - start) * 1000.0,
        start_digests=digests,
    )
    return new_server, new_devices, record


def pretrain(server: ServerState, devices: Sequence[DeviceModel], shards: Sequence[DeviceShard],
             cfg: FLConfig) -> tuple[ServerState, list[DeviceModel]]:
    """Utility-only warm-up of every device, averaged into the starting extractor."""
    warmed = []
    for d in devices:
        model = replace(d, theta=server.global_theta, lam=0.0)
        model, _ = device_update(model, shards[d.device_id], cfg, child_rng(cfg.seed, _PRETRAIN, d.device_id),
                                 epochs=cfg.pretrain_epochs)
        warmed.append(replace(model, lam=d.lam))
    averaged = fed_avg([d.theta.params() for d in warmed])
    return replace(server, global_theta=server.global_theta.with_params(averaged)), warmed


def run_training(server: ServerState, devices: Sequence[DeviceModel], shards: Sequence[DeviceShard],
                 cfg: FLConfig, upload: Optional[UploadTransform] = None, map_fn: Callable = map,
                 on_round: Optional[Callable[[RoundRecord, ServerState], None]] = None,
                 ) -> tuple[ServerState, list[DeviceModel], list[RoundRecord]]:
    """Optional warm-up followed by ``cfg.rounds`` global rounds."""
    _check_shards(devices, shards)
    devices = list(devices)
    if cfg.pretrain_epochs > 0:
        server, devices = pretrain(server, devices, shards, cfg)
    records = []
    for _ in range(cfg.rounds):
        server, devices, record = run_round(server, devices, shards, cfg, upload, map_fn)
        records.append(record)
        if on_round is not None:
            on_round(record, server)
    return server, devices, records


def iter_digests(devices: Iterable[DeviceModel]) -> dict[int, tuple[str, str]]:
    """(adversary, critic) parameter digests per device."""
    return {d.device_id: (params_digest(d.psi.params()), params_digest(d.omega.params())) for d in devices}
