"""Training loop: sampler, encoder, losses, optimizer, schedule, checkpoints.

The loop is single threaded and fully deterministic for a fixed config and
corpus; a checkpoint restores every piece of mutable state (parameters,
optimizer moments, sampler tables, rng), so an interrupted run continues
bit-identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_container, write_container
from .data import ObjectTable, ScaleGroups, partition_by_scale
from .encoder import EncoderConfig, Params, StudentNet, TeacherNet, ema_update
from .losses import LossConfig, total_loss
from .sampling import Batch, CentroidBank, NeighborTable, assemble_batch, refresh


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch: int = 120
    groups: int = 4
    clusters: int = 100
    knn: int = 5
    refresh_period: int = 1000
    n_shared: int = 6
    kmeans_iters: int = 20
    lr: float = 3e-4
    weight_decay: float = 0.01
    ema_momentum: float = 0.999
    seed: int = 0
    hidden_dim: int = 256
    trunk_layers: int = 2
    student_dim: int = 512
    teacher_dim: int = 1024
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        for name in ("batch", "groups", "clusters", "knn", "refresh_period",
                     "kmeans_iters", "hidden_dim", "trunk_layers",
                     "student_dim", "teacher_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.n_shared < 0:
            raise ValueError("lr must be positive; decay and n_shared non-negative")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")

    def encoder_config(self, feature_dim: int) -> EncoderConfig:
        return EncoderConfig(
            feature_dim=feature_dim,
            groups=self.groups,
            hidden_dim=self.hidden_dim,
            trunk_layers=self.trunk_layers,
            student_dim=self.student_dim,
            teacher_dim=self.teacher_dim,
        )


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
    ).hexdigest()


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class OptState:
    """First/second moment accumulators for one flat parameter vector."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size, dtype=np.float64)
        self.v = np.zeros(size, dtype=np.float64)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def optimizer_step(
    params: Params,
    grads: Params,
    lr: float,
    weight_decay: float,
    state: OptState,
) -> Params:
    """Adaptive-moment update with bias correction and decoupled decay.

    Aborts without touching any state if the gradient is not finite.
    """
    g = grads.data
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient; optimizer step aborted")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    params.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.data -= lr * weight_decay * params.data
    return params


@dataclass
class TrainState:
    cfg: TrainConfig
    student: StudentNet
    teacher: TeacherNet
    opt: OptState
    bank: CentroidBank | None
    ntable: NeighborTable | None
    rng: np.random.Generator
    step: int


def init_state(cfg: TrainConfig, feature_dim: int) -> TrainState:
    student = StudentNet.init(cfg.encoder_config(feature_dim), seed=cfg.seed)
    teacher = TeacherNet.from_student(student, seed=cfg.seed + 1)
    return TrainState(
        cfg=cfg,
        student=student,
        teacher=teacher,
        opt=OptState(student.params.data.size),
        bank=None,
        ntable=None,
        rng=np.random.default_rng(cfg.seed),
        step=0,
    )


def _block_features(provider, batch: Batch, groups: ScaleGroups, m: int) -> np.ndarray:
    """Group rows at their own scale, shared rows at the group's median area."""
    own = provider.base_features(batch.group_ids[m])
    if batch.shared_ids.size == 0:
        return own
    shared = provider.features_at(batch.shared_ids, groups.median_area(m))
    return np.vstack([own, shared])


def train_step(state: TrainState, groups: ScaleGroups, provider) -> str:
    """Run one optimization step and return its loss-log line."""
    cfg = state.cfg
    state.bank, state.ntable = refresh(
        state.step, cfg.refresh_period, state.teacher, groups, provider,
        state.bank, state.ntable, n_clusters=cfg.clusters,
        k_neighbors=cfg.knn, kmeans_iters=cfg.kmeans_iters, seed=cfg.seed,
    )
    batch = assemble_batch(groups, state.ntable, state.rng, cfg.batch, cfg.n_shared)
    f_h, f_l, f_t, caches = [], [], [], []
    for m in range(cfg.groups):
        feats = _block_features(provider, batch, groups, m)
        f_t.append(state.teacher.embed(feats))
        h, l, cache = state.student.forward_cached(feats, m)
        f_h.append(h)
        f_l.append(l)
        caches.append(cache)
    cents = [state.bank.centroids] * cfg.groups
    total, parts, d_fh, d_fl = total_loss(f_h, f_l, f_t, cents, cfg.n_shared, cfg.loss)
    grads = state.student.params.zeros_like()
    for m in range(cfg.groups):
        state.student.backward(caches[m], d_fh[m], d_fl[m], grads)
    lr = cosine_lr(state.step, cfg.steps, cfg.lr)
    optimizer_step(state.student.params, grads, lr, cfg.weight_decay, state.opt)
    ema_update(state.teacher, state.student, cfg.ema_momentum)
    line = "\t".join(
        [str(state.step), repr(lr), repr(total)]
        + [repr(parts[key]) for key in ("self", "con_h", "con_l", "ckd")]
    )
    state.step += 1
    return line


def train(
    cfg: TrainConfig,
    table: ObjectTable,
    provider,
    state: TrainState | None = None,
    log=None,
    checkpoint_path=None,
):
    """Train until ``cfg.steps``; returns ``(state, loss_log_lines)``.

    Pass a loaded state to continue a run.  If ``checkpoint_path`` is set,
    the state is saved there on normal completion and on abort.
    """
    groups = partition_by_scale(table, cfg.groups)
    if state is None:
        state = init_state(cfg, provider.base_features(table.ids[:1]).shape[1])
    elif config_digest(state.cfg) != config_digest(cfg):
        raise ValueError("resume config differs from checkpoint config")
    lines: list[str] = []
    try:
        while state.step < cfg.steps:
            line = train_step(state, groups, provider)
            lines.append(line)
            if log is not None:
                log.write(line + "\n")
    except BaseException:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state)
        raise
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state, lines


def save_checkpoint(path, state: TrainState) -> None:
    cfg = state.cfg
    header = {
        "format": "train-state",
        "config": json.dumps(dataclasses.asdict(cfg), sort_keys=True),
        "config_hash": config_digest(cfg),
        "feature_dim": str(state.student.cfg.feature_dim),
        "step": str(state.step),
        "rng_state": json.dumps(state.rng.bit_generator.state),
    }
    blobs = {
        "student.data": state.student.params.data,
        "teacher.data": state.teacher.params.data,
        "opt.m": state.opt.m,
        "opt.v": state.opt.v,
        "opt.t": np.array(float(state.opt.t)),
    }
    if state.bank is not None:
        blobs["bank.centroids"] = state.bank.centroids
        blobs["bank.step"] = np.array(float(state.bank.last_refresh_step))
    if state.ntable is not None:
        ids = np.array(sorted(state.ntable.neighbors), dtype=np.float64)
        width = max((len(v) for v in state.ntable.neighbors.values()), default=0)
        rows = np.full((ids.size, width), -1.0)
        for i, oid in enumerate(ids):
            nb = state.ntable.neighbors[int(oid)]
            rows[i, : len(nb)] = nb
        blobs["nt.ids"] = ids
        blobs["nt.rows"] = rows
        blobs["nt.step"] = np.array(float(state.ntable.last_refresh_step))
    write_container(path, header, blobs)


def load_checkpoint(path) -> TrainState:
    header, blobs = read_container(path)
    if header.get("format") != "train-state":
        raise ValueError(f"{path}: not a training checkpoint")
    raw = json.loads(header["config"])
    raw["loss"] = LossConfig(**raw["loss"])
    cfg = TrainConfig(**raw)
    feature_dim = int(header["feature_dim"])
    state = init_state(cfg, feature_dim)
    state.student.params.data[:] = blobs["student.data"]
    state.teacher.params.data[:] = blobs["teacher.data"]
    state.opt.m = blobs["opt.m"].copy()
    state.opt.v = blobs["opt.v"].copy()
    state.opt.t = int(blobs["opt.t"])
    if "bank.centroids" in blobs:
        state.bank = CentroidBank(
            centroids=blobs["bank.centroids"].copy(),
            last_refresh_step=int(blobs["bank.step"]),
        )
    if "nt.ids" in blobs:
        neighbors = {}
        for oid, row in zip(blobs["nt.ids"], blobs["nt.rows"]):
            neighbors[int(oid)] = row[row >= 0].astype(np.int64)
        state.ntable = NeighborTable(
            neighbors=neighbors, last_refresh_step=int(blobs["nt.step"])
        )
    state.rng.bit_generator.state = json.loads(header["rng_state"])
    state.step = int(header["step"])
    return state
