"""Federated orchestration: style pooling, server pre-training, per-round
client adaptation, clustered layer-aware aggregation, and teacher refresh
with an optional running-average (SWA-style) teacher.

The flow per run: extract client mean styles -> cluster them -> pre-train on
the labeled source with style augmentation -> T rounds of {sample clients,
local self-training with KD, aggregate global/cluster-specific slices,
refresh teachers} -> evaluate with style-routed cluster models.

Everything is deterministic given the config seed; weighted reductions run
in ascending client-id order regardless of worker count.
"""

from __future__ import annotations

import enum
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import clustering, model, spectral
from .clustering import ClusterPartition, StylePoint
from .model import ArchConfig, ParamSet
from .spectral import Style
from .synthdata import ClientData, World

__all__ = [
    "FederationConfig",
    "ClusterModels",
    "RoundRecord",
    "RunResult",
    "Transport",
    "MessageKind",
    "server_pretrain",
    "client_update",
    "aggregate",
    "teacher_refresh",
    "evaluate",
    "run",
]

logger = logging.getLogger(__name__)


class MessageKind(enum.Enum):
    """The only client-to-server payload types the protocol permits."""

    STYLE = "style"
    UPDATE = "update"


@dataclass
class Transport:
    """In-process stand-in for the client/server channel; records every message
    kind so the privacy surface can be audited."""

    log: list[tuple[MessageKind, object]] = field(default_factory=list)

    def send(self, kind: MessageKind, client_id, payload):
        self.log.append((kind, client_id))
        return payload

    def kinds(self) -> set[MessageKind]:
        return {k for k, _ in self.log}


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 40
    clients_per_round: int = 5
    local_epochs: int = 1
    lr: float = 0.0125
    lr_schedule: str = "fixed"  # "fixed" or "power"
    lr_exponent: float = 0.5
    lambda_kd: float = 1.0
    teacher_period: int = 1  # refresh teachers every this many rounds
    swat_start: int = 24  # first round of running-average teachers
    cluster_groups: frozenset[str] = frozenset({"norm"})
    pretrain_steps: int = 3000
    pretrain_lr: float = 0.02
    pretrain_decay_steps: int = 300  # sqrt-decay horizon; 0 disables decay
    p_plain: float = 0.2  # chance a pre-training image skips stylization
    conf_threshold: float = 0.95
    class_fraction: float = 0.5
    style_window: int = 3
    fda_pretrain: bool = True
    cluster_h_min: int = 2
    cluster_h_max: int = 9  # exclusive; clipped to the client count
    cluster_restarts: int = 10
    arch: ArchConfig = field(default_factory=ArchConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.teacher_period < 1:
            raise ValueError("teacher_period must be >= 1")
        if self.rounds < 0 or self.swat_start < 0:
            raise ValueError("rounds and swat_start must be non-negative")

    def lr_at(self, t: int) -> float:
        if self.lr_schedule == "fixed":
            return self.lr
        if self.lr_schedule == "power":
            return self.lr * (t + 1) ** (-self.lr_exponent)
        raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class ClusterModels:
    """Global slice phi, per-cluster slices theta_c, per-cluster teachers and
    their running-average counters."""

    arch: ArchConfig
    cluster_groups: frozenset[str]
    phi: dict[str, np.ndarray]
    thetas: list[dict[str, np.ndarray]]
    teachers: list[ParamSet]
    counters: list[int]

    @property
    def num_clusters(self) -> int:
        return len(self.thetas)

    def cluster_model(self, c: int) -> ParamSet:
        return model.merge_params(self.arch, self.thetas[c], self.phi)

    @staticmethod
    def initial(params: ParamSet, num_clusters: int, cluster_groups: frozenset[str]) -> "ClusterModels":
        theta, phi = model.split_params(params, set(cluster_groups))
        return ClusterModels(
            arch=params.arch,
            cluster_groups=cluster_groups,
            phi={k: v.copy() for k, v in phi.items()},
            thetas=[{k: v.copy() for k, v in theta.items()} for _ in range(num_clusters)],
            teachers=[params.copy() for _ in range(num_clusters)],
            counters=[0] * num_clusters,
        )


@dataclass
class RoundRecord:
    round: int
    sampled_clients: list[str]
    mean_loss_pseudo: float
    mean_loss_kd: float
    miou: float
    per_class_iou: list[float]
    wallclock_ms: float

    def to_public_dict(self) -> dict:
        """JSON-lines payload; wallclock is kept out so reruns are byte-identical."""
        d = asdict(self)
        d.pop("wallclock_ms")
        return d


@dataclass
class RunResult:
    records: list[RoundRecord]
    models: ClusterModels
    partition: ClusterPartition
    pretrained: ParamSet
    final_miou: float
    final_per_class_iou: list[float]
    client_styles: dict[str, Style]


def _client_mean_style(client: ClientData, l_s: int) -> Style:
    styles = [spectral.extract_style(img, l_s) for img in client.images]
    return spectral.mean_style(styles)


def server_pretrain(
    source, style_pool: list[Style], cfg: FederationConfig, seed: int | None = None
) -> ParamSet:
    """Supervised pre-training on the labeled source, each step stylizing the
    image with a pool style (or leaving it plain with probability p_plain).

    An empty pool degrades to plain pre-training with a warning.
    """
    if len(source) == 0:
        raise ValueError("source dataset is empty")
    if not style_pool:
        logger.warning("empty style pool: pre-training without style augmentation")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = model.init_params(cfg.arch, seed=int(rng.integers(2**31)))
    velocity = None
    for t in range(cfg.pretrain_steps):
        lr = cfg.pretrain_lr
        if cfg.pretrain_decay_steps > 0:
            lr = lr / np.sqrt(1.0 + t / cfg.pretrain_decay_steps)
        idx = int(rng.integers(len(source)))
        img, labels = source[idx]
        use_plain = (not style_pool) or (rng.random() < cfg.p_plain)
        if not use_plain:
            style = style_pool[int(rng.integers(len(style_pool)))]
            img = spectral.apply_style(img, style, clamp=True)
        _, grad = model.ce_loss_grad(params, img, labels)
        params, velocity = model.sgd_step(params, grad, lr, velocity)
    return params


def client_update(
    f_k: ParamSet,
    teacher: ParamSet,
    pretrained: ParamSet,
    data: list[np.ndarray],
    cfg: FederationConfig,
    lr: float,
    seed: int,
    pre_logits: list[np.ndarray] | None = None,
) -> tuple[ParamSet, float, float]:
    """E local epochs of SGD on L = L_pseudo(teacher) + lambda_kd * L_kd(pretrained).

    Teacher and pretrained parameters are read only. The pre-trained model's
    logits may be passed in (they are constant for a whole run). Returns the
    updated params and the mean pseudo/KD losses over all steps taken.
    """
    params = f_k.copy()
    rng = np.random.default_rng(seed)
    # Teacher predictions are constant within the round.
    plabel_maps = []
    for img in data:
        t_logits = model.forward(teacher, img)
        plabel_maps.append(model.pseudo_label(t_logits, cfg.conf_threshold, cfg.class_fraction))
    if pre_logits is None:
        pre_logits = [model.forward(pretrained, img) for img in data]
    if all(np.all(pl == model.IGNORE) for pl in plabel_maps):
        logger.info("all pseudo-labels rejected; KD-only update")

    velocity = None
    losses_p: list[float] = []
    losses_kd: list[float] = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(data))
        for i in order:
            loss_p, loss_kd, grad = model.self_training_loss_grad(
                params, data[i], plabel_maps[i], pre_logits[i], cfg.lambda_kd
            )
            params, velocity = model.sgd_step(params, grad, lr, velocity)
            losses_p.append(loss_p)
            losses_kd.append(loss_kd)
    mean_p = float(np.mean(losses_p)) if losses_p else 0.0
    mean_kd = float(np.mean(losses_kd)) if losses_kd else 0.0
    return params, mean_p, mean_kd


def aggregate(
    updates: list[tuple[str, ParamSet, int]],
    partition: ClusterPartition,
    cluster_groups: frozenset[str],
    prev: ClusterModels,
) -> ClusterModels:
    """Sample-weighted averaging: phi over all selected clients, theta_c within
    each cluster. Clusters with no selected member keep their previous theta_c.
    Reduction order is ascending client id."""
    if not updates:
        raise ValueError("aggregate requires at least one update")
    updates = sorted(updates, key=lambda u: str(u[0]))
    total = sum(n for _, _, n in updates)

    phi_acc = {k: np.zeros_like(v) for k, v in prev.phi.items()}
    for _, params, n in updates:
        _, phi_k = model.split_params(params, set(cluster_groups))
        for k in phi_acc:
            phi_acc[k] += (n / total) * phi_k[k]

    thetas = [{k: v.copy() for k, v in th.items()} for th in prev.thetas]
    for c in range(prev.num_clusters):
        members = [
            (cid, params, n)
            for cid, params, n in updates
            if partition.assignments[cid] == c
        ]
        if not members:
            continue
        c_total = sum(n for _, _, n in members)
        acc = {k: np.zeros_like(v) for k, v in prev.thetas[c].items()}
        for _, params, n in members:
            theta_k, _ = model.split_params(params, set(cluster_groups))
            for k in acc:
                acc[k] += (n / c_total) * theta_k[k]
        thetas[c] = acc

    return ClusterModels(
        arch=prev.arch,
        cluster_groups=cluster_groups,
        phi=phi_acc,
        thetas=thetas,
        teachers=[t.copy() for t in prev.teachers],
        counters=list(prev.counters),
    )


def teacher_refresh(models: ClusterModels, t: int, cfg: FederationConfig) -> ClusterModels:
    """Every teacher_period rounds: hard-copy the cluster model into the teacher
    before swat_start, afterwards fold it into a running arithmetic mean with
    counter n = (t - swat_start) / teacher_period."""
    if t % cfg.teacher_period != 0:
        return models
    teachers = []
    counters = []
    for c in range(models.num_clusters):
        w_c = models.cluster_model(c)
        if t < cfg.swat_start:
            teachers.append(w_c)
            counters.append(0)
        else:
            n = (t - cfg.swat_start) // cfg.teacher_period
            avg = model.combine([(n / (n + 1), models.teachers[c]), (1.0 / (n + 1), w_c)])
            teachers.append(avg)
            counters.append(n + 1)
    return ClusterModels(
        arch=models.arch,
        cluster_groups=models.cluster_groups,
        phi=models.phi,
        thetas=models.thetas,
        teachers=teachers,
        counters=counters,
    )


def _iou_from_confusion(confusion: np.ndarray) -> tuple[list[float], float]:
    q = confusion.shape[0]
    ious = []
    for c in range(q):
        tp = confusion[c, c]
        denom = confusion[c, :].sum() + confusion[:, c].sum() - tp
        ious.append(float(tp / denom) if denom > 0 else float("nan"))
    miou = float(np.nanmean(ious))
    return ious, miou


def evaluate(
    models: ClusterModels,
    partition: ClusterPartition,
    test: list[tuple[np.ndarray, np.ndarray, str]],
    style_window: int,
) -> tuple[list[float], float]:
    """Style-routed evaluation: each test image picks the nearest-centroid
    cluster model; IoU comes from one pooled confusion matrix."""
    if not test:
        raise ValueError("test set is empty")
    q = models.arch.classes
    confusion = np.zeros((q, q), dtype=np.int64)
    for img, labels, _ in test:
        style = spectral.extract_style(img, style_window)
        c = clustering.assign_by_style(style, partition)
        logits = model.forward(models.cluster_model(c), img)
        pred = logits.argmax(axis=-1)
        np.add.at(confusion, (labels.reshape(-1), pred.reshape(-1)), 1)
    return _iou_from_confusion(confusion)


def _trivial_partition(points: list[StylePoint]) -> ClusterPartition:
    vectors = {p.client_id: p.vector for p in points}
    centroid = np.mean([p.vector for p in points], axis=0)
    return ClusterPartition(
        assignments={p.client_id: 0 for p in points},
        centroids=[centroid],
        points=vectors,
        silhouette=0.0,
    )


def _worker_count() -> int:
    env = os.environ.get("FEDSTYLE_THREADS", "1")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def run(
    cfg: FederationConfig,
    world: World,
    transport: Transport | None = None,
    pretrained: ParamSet | None = None,
) -> RunResult:
    """Full pipeline: styles -> clustering -> pre-training -> T adaptation rounds.

    `pretrained` warm-starts the run with an already pre-trained model; by
    determinism it must equal what server_pretrain would produce for the same
    seed and pre-training settings, so configs differing only in adaptation
    toggles can share it.
    """
    transport = transport if transport is not None else Transport()
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    cluster_seed = int(seeds[0].generate_state(1)[0])
    pretrain_seed = int(seeds[1].generate_state(1)[0])
    sample_rng = np.random.default_rng(seeds[2])
    client_seed_root = seeds[3]

    clients = sorted(world.clients, key=lambda c: c.client_id)
    styles = {
        c.client_id: transport.send(
            MessageKind.STYLE, c.client_id, _client_mean_style(c, cfg.style_window)
        )
        for c in clients
    }
    points = [StylePoint(cid, styles[cid].values) for cid in sorted(styles)]

    h_max = min(cfg.cluster_h_max, len(points))
    if len(points) < 2 or cfg.cluster_h_min >= h_max:
        partition = _trivial_partition(points)
    else:
        partition = clustering.select_clustering(
            points, m=cfg.cluster_h_min, n=h_max, N=cfg.cluster_restarts, base_seed=cluster_seed
        )

    style_pool = [styles[cid] for cid in sorted(styles)] if cfg.fda_pretrain else []
    if pretrained is None:
        pretrained = server_pretrain(world.source, style_pool, cfg, seed=pretrain_seed)
    # The source dataset is only needed for pre-training; drop the handle.
    source = None  # noqa: F841

    models = ClusterModels.initial(pretrained, partition.num_clusters, cfg.cluster_groups)
    records: list[RoundRecord] = []
    n_workers = _worker_count()
    client_index = {c.client_id: i for i, c in enumerate(clients)}
    round_seeds = client_seed_root.spawn(cfg.rounds * len(clients)) if cfg.rounds else []
    pre_logits_cache: dict[str, list[np.ndarray]] = {}

    for t in range(cfg.rounds):
        t0 = time.perf_counter()
        n_sample = min(cfg.clients_per_round, len(clients))
        chosen_idx = sample_rng.choice(len(clients), size=n_sample, replace=False)
        chosen = sorted((clients[i] for i in chosen_idx), key=lambda c: c.client_id)
        lr = cfg.lr_at(t)

        def _update(client, models=models, t=t, lr=lr):
            c = partition.assignments[client.client_id]
            f_k = models.cluster_model(c)
            seed_idx = t * len(clients) + client_index[client.client_id]
            seed = int(round_seeds[seed_idx].generate_state(1)[0])
            if client.client_id not in pre_logits_cache:
                pre_logits_cache[client.client_id] = [
                    model.forward(pretrained, img) for img in client.images
                ]
            params, loss_p, loss_kd = client_update(
                f_k, models.teachers[c], pretrained, client.images, cfg, lr, seed,
                pre_logits=pre_logits_cache[client.client_id],
            )
            return client.client_id, params, len(client.images), loss_p, loss_kd

        tasks = list(chosen)
        if n_workers > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                results = list(pool.map(_update, tasks))
        else:
            results = [_update(task) for task in tasks]

        updates = []
        losses_p, losses_kd = [], []
        for cid, params, n, loss_p, loss_kd in results:
            transport.send(MessageKind.UPDATE, cid, params)
            updates.append((cid, params, n))
            losses_p.append(loss_p)
            losses_kd.append(loss_kd)

        models = aggregate(updates, partition, cfg.cluster_groups, models)
        models = teacher_refresh(models, t, cfg)
        per_class, miou = evaluate(models, partition, world.test, cfg.style_window)
        records.append(
            RoundRecord(
                round=t,
                sampled_clients=[c.client_id for c in chosen],
                mean_loss_pseudo=float(np.mean(losses_p)),
                mean_loss_kd=float(np.mean(losses_kd)),
                miou=miou,
                per_class_iou=per_class,
                wallclock_ms=(time.perf_counter() - t0) * 1e3,
            )
        )

    final_per_class, final_miou = evaluate(models, partition, world.test, cfg.style_window)
    return RunResult(
        records=records,
        models=models,
        partition=partition,
        pretrained=pretrained,
        final_miou=final_miou,
        final_per_class_iou=final_per_class,
        client_styles=styles,
    )
