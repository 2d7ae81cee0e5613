"""Round engine: local training, FedAvg aggregation, prior exchange, evaluation."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, apply_variant
from .dataset import (
    ClientPartition,
    LabeledDataset,
    dirichlet_partition,
    generate_synthetic,
    longtail_counts,
    strong_augment,
    weak_augment,
)
from .losses import AdjustedSoftmaxParams, adjusted_log_softmax, cross_entropy, normalize, total_loss
from .metrics import RoundMetrics, feature_similarity, grouped_accuracy, nc_angles, prior_l2
from .model import AggregationError, MLPClassifier, ModelParams, class_prototypes, save_checkpoint
from .prior import RunningPrior, aggregate_global_prior, ema_update, fuse

log = logging.getLogger(__name__)

# purpose keys for derived random streams
DATA, TEST, PARTITION, INIT, SAMPLING, SHUFFLE, AUGMENT, EVAL = range(1, 9)

LOG_COLUMNS = (
    "round", "algorithm", "loss_total", "loss_dla", "loss_asd",
    "acc_all", "acc_many", "acc_medium", "acc_few",
    "nc_min_angle", "nc_max_angle", "nc_mean_angle",
    "prior_l2", "feat_cos_global_local",
)


def stream(seed, purpose, *keys):
    return np.random.default_rng([int(seed), purpose, *(int(k) for k in keys)])


@dataclass
class Environment:
    train: LabeledDataset
    test: LabeledDataset
    partition: ClientPartition
    oracle_prior: np.ndarray
    probe: np.ndarray
    template: MLPClassifier


def build_environment(cfg):
    d, t = cfg.data, cfg.train
    counts = longtail_counts(d.num_classes, d.n_max, d.imbalance)
    train = generate_synthetic(d.num_classes, counts, d.in_dim, d.class_sep, [cfg.seed, DATA])
    test = generate_synthetic(d.num_classes, np.full(d.num_classes, d.test_per_class), d.in_dim,
                              d.class_sep, [cfg.seed, TEST], means=train.means)
    partition = dirichlet_partition(train, d.num_clients, d.alpha, [cfg.seed, PARTITION])
    probe_idx = np.sort(stream(cfg.seed, EVAL).choice(len(test), size=min(t.probe_size, len(test)), replace=False))
    template = MLPClassifier(d.in_dim, d.num_classes, t.hidden, t.feature_dim, rng=stream(cfg.seed, INIT))
    return Environment(train, test, partition, counts / counts.sum(), test.inputs[probe_idx], template)


@dataclass
class ClientState:
    cid: int
    indices: np.ndarray
    counts: np.ndarray
    prior_state: np.ndarray | None = None

    @property
    def size(self):
        return int(self.indices.size)


@dataclass
class ServerState:
    params: ModelParams
    prior: np.ndarray
    round: int = 0


@dataclass
class LocalResult:
    cid: int
    params: ModelParams
    size: int
    estimate: object = None
    losses: dict = field(default_factory=dict)
    epoch_losses: list = field(default_factory=list)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def mixing_prior(client, pi_g, cfg, env):
    t = cfg.train
    c = cfg.data.num_classes
    if t.prior_mode == "uniform":
        return np.full(c, 1.0 / c)
    if t.prior_mode == "counts":
        return fuse(env.oracle_prior, normalize(client.counts), t.gamma)
    local = client.prior_state if client.prior_state is not None else np.full(c, 1.0 / c)
    return fuse(pi_g, local, t.gamma)


def local_train_fedyoyo(client, global_params, pi_g, cfg, env, round_idx):
    """Weak/strong two-view training with the fused-prior objective.

    Returns ``None`` for a client without data.
    """
    if client.size == 0:
        return None
    t = cfg.train
    aug = cfg.augment_config()
    model = env.template.clone()
    model.load_params(global_params)
    params = model.parameters()
    adjust = AdjustedSoftmaxParams(mixing_prior(client, pi_g, cfg, env), t.temperature)
    x = env.train.inputs[client.indices]
    y = env.train.labels[client.indices]
    shuffle_rng = stream(cfg.seed, SHUFFLE, round_idx, client.cid)
    aug_rng = stream(cfg.seed, AUGMENT, round_idx, client.cid)
    c = cfg.data.num_classes

    epoch_losses = []
    running = None
    for _ in range(t.local_epochs):
        base = model.forward_features(weak_augment(x, aug, aug_rng)).values
        protos = np.zeros((c, base.shape[1]))
        for k, v in class_prototypes(base, y).items():
            protos[k] = v
        running = RunningPrior(protos, c)
        sums = np.zeros(3)
        batches = _batches(len(y), t.batch_size, shuffle_rng)
        for idx in batches:
            xb, yb = x[idx], y[idx]
            views = {"weak": weak_augment(xb, aug, aug_rng), "strong": strong_augment(xb, aug, aug_rng)}
            with ad.Tape():
                feats = model.forward_features(views["weak"])
                weak_logits = model.logits_from_features(feats)
                strong_logits = model.forward_logits(views["strong"])
                logits = {"weak": weak_logits, "strong": strong_logits}
                total, dla, asd = total_loss(
                    weak_logits, strong_logits, yb, adjust, t.lam, return_terms=True,
                    teacher_logits=logits[t.teacher_view], student_logits=logits[t.student_view],
                    normalizer=t.asd_normalizer, filter_teachers=t.teacher_filter,
                )
                total.backward()
            running.update(feats.values, yb)
            ad.sgd_step(params, t.lr)
            sums += (total.item(), dla.item(), asd.item())
        epoch_losses.append(sums / len(batches))
    mean = np.mean(epoch_losses, axis=0)
    return LocalResult(
        client.cid, model.flatten(), client.size, running.estimate(),
        {"total": float(mean[0]), "dla": float(mean[1]), "asd": float(mean[2])},
        [float(e[0]) for e in epoch_losses],
    )


def local_train_baseline(client, global_params, cfg, env, round_idx):
    """Unaugmented local SGD for fedavg, fedprox and local balanced softmax."""
    if client.size == 0:
        return None
    t = cfg.train
    model = env.template.clone()
    model.load_params(global_params)
    params = model.parameters()
    anchors = [p.values.copy() for p in params]
    x = env.train.inputs[client.indices]
    y = env.train.labels[client.indices]
    shuffle_rng = stream(cfg.seed, SHUFFLE, round_idx, client.cid)
    adjust = None
    if t.algorithm == "fedavg_bsm":
        adjust = AdjustedSoftmaxParams(normalize(client.counts), t.temperature)

    epoch_losses = []
    for _ in range(t.local_epochs):
        total_sum = 0.0
        batches = _batches(len(y), t.batch_size, shuffle_rng)
        for idx in batches:
            xb, yb = x[idx], y[idx]
            with ad.Tape():
                logits = model.forward_logits(xb)
                if adjust is None:
                    loss = cross_entropy(logits, yb)
                else:
                    logp = ad.clamp_min(adjusted_log_softmax(logits, adjust), float(np.log(ad.EPS)))
                    loss = ad.scale(ad.sum(ad.pick(logp, yb)), -1.0 / len(yb))
                if t.algorithm == "fedprox":
                    loss = ad.add(loss, proximal_penalty(params, anchors, t.prox_mu))
                loss.backward()
            ad.sgd_step(params, t.lr)
            total_sum += loss.item()
        epoch_losses.append(total_sum / len(batches))
    return LocalResult(client.cid, model.flatten(), client.size, None,
                       {"total": float(np.mean(epoch_losses))}, epoch_losses)


def proximal_penalty(params, anchors, mu):
    """``mu / 2 * sum ||w - w_global||^2`` on the tape."""
    terms = None
    for p, a in zip(params, anchors):
        d = ad.sub(p, ad.Tensor(a))
        sq = ad.sum(ad.mul(d, d))
        terms = sq if terms is None else ad.add(terms, sq)
    return ad.scale(terms, 0.5 * mu)


def fedavg_aggregate(params_list, weights):
    """Coordinate-wise weighted mean of parameter vectors."""
    if not params_list:
        raise AggregationError("nothing to aggregate")
    manifest = params_list[0].manifest
    for p in params_list[1:]:
        if p.manifest != manifest:
            raise AggregationError("parameter manifests differ between clients")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(params_list),) or np.any(w < 0) or not w.sum() > 0:
        raise AggregationError("weights must be nonnegative with a positive sum")
    w = w / w.sum()
    anchor = params_list[0].vector
    # written relative to the first client so identical inputs come back unchanged
    delta = np.zeros_like(anchor)
    for wk, p in zip(w, params_list):
        delta += wk * (p.vector - anchor)
    return ModelParams(anchor + delta, manifest)


def make_clients(env):
    part = env.partition
    return [ClientState(k, part.indices[k], part.counts[k]) for k in range(part.num_clients)]


def evaluate(model, cfg, env, round_idx, server_prior):
    t = cfg.train
    acc = grouped_accuracy(model.predict(env.test.inputs), env.test.labels,
                           env.train.class_counts, t.group_thresholds)
    rng = stream(cfg.seed, EVAL, round_idx, 1)
    feats = model.forward_features(weak_augment(env.train.inputs, cfg.augment_config(), rng)).values
    angles = nc_angles(class_prototypes(feats, env.train.labels))
    return RoundMetrics(
        round=round_idx, acc_all=acc["all"], acc_many=acc["many"], acc_medium=acc["medium"],
        acc_few=acc["few"], nc_min_angle=angles.min, nc_max_angle=angles.max,
        nc_mean_angle=angles.mean, prior_l2=prior_l2(server_prior, env.oracle_prior),
    )


def _train_client(args):
    client, server, cfg, env, round_idx = args
    if cfg.train.algorithm == "fedyoyo":
        return local_train_fedyoyo(client, server.params, server.prior, cfg, env, round_idx)
    return local_train_baseline(client, server.params, cfg, env, round_idx)


def run_round(server, clients, cfg, env, executor=None):
    """One round: sample, train locally, aggregate models and priors, evaluate."""
    t = cfg.train
    round_idx = server.round + 1
    k = len(clients)
    chosen = np.sort(stream(cfg.seed, SAMPLING, round_idx).choice(k, size=t.clients_per_round, replace=False))
    jobs = [(clients[i], server, cfg, env, round_idx) for i in chosen]
    results = list(executor.map(_train_client, jobs)) if executor else [_train_client(j) for j in jobs]
    results = [r for r in results if r is not None]

    new_params = server.params
    new_prior = server.prior
    if results:
        new_params = fedavg_aggregate([r.params for r in results], [r.size for r in results])
        if t.algorithm == "fedyoyo" and t.prior_mode == "estimated":
            for r in results:
                client = clients[r.cid]
                fresh = r.estimate.normalized
                client.prior_state = fresh if client.prior_state is None else ema_update(
                    client.prior_state, fresh, t.ema_m)
            new_prior = aggregate_global_prior([clients[r.cid].prior_state for r in results],
                                               [r.size for r in results])
    new_server = ServerState(new_params, new_prior, round_idx)

    model = env.template.clone()
    model.load_params(new_params)
    metrics = evaluate(model, cfg, env, round_idx, new_prior)
    client_models = []
    for r in results:
        m = env.template.clone()
        m.load_params(r.params)
        client_models.append(m)
    metrics.feat_cos_global_local = feature_similarity(model, client_models, env.probe)
    if results:
        keys = results[0].losses.keys()
        metrics.losses = {key: float(np.mean([r.losses[key] for r in results])) for key in keys}
    return new_server, metrics, results


@dataclass
class ExperimentResult:
    name: str
    config: ExperimentConfig
    records: list
    params: ModelParams
    env: Environment = field(repr=False, default=None)

    @property
    def final(self):
        return self.records[-1]


def run_experiment(cfg, name=None, out_dir=None, env=None):
    """Build data, run every round, optionally write logs and a checkpoint."""
    cfg.validate()
    name = name or cfg.train.algorithm
    env = env or build_environment(cfg)
    c = cfg.data.num_classes
    server = ServerState(env.template.flatten(), np.full(c, 1.0 / c), 0)
    clients = make_clients(env)
    records = [evaluate(env.template, cfg, env, 0, server.prior)]
    executor = ThreadPoolExecutor(max_workers=cfg.parallel_clients) if cfg.parallel_clients > 0 else None
    try:
        for _ in range(cfg.train.rounds):
            server, metrics, _ = run_round(server, clients, cfg, env, executor)
            records.append(metrics)
            log.debug("%s round %d acc=%.4f", name, metrics.round, metrics.acc_all)
    finally:
        if executor:
            executor.shutdown()
    result = ExperimentResult(name, cfg, records, server.params, env)
    if out_dir is not None:
        write_result(result, out_dir)
    return result


def run_variant(base_cfg, variant, out_dir=None, env=None):
    return run_experiment(apply_variant(base_cfg, variant), name=variant, out_dir=out_dir, env=env)


def train_centralized(cfg, env=None):
    """The FedYoYo/baseline local routine run on the pooled data with no server.

    The prior state is smoothed exactly as on a client and fed back as the
    global prior, which is what a single-client federation reduces to.
    """
    env = env or build_environment(cfg)
    c = cfg.data.num_classes
    n = len(env.train)
    client = ClientState(0, np.arange(n, dtype=np.int64), env.train.class_counts)
    params = env.template.flatten()
    prior = np.full(c, 1.0 / c)
    t = cfg.train
    for r in range(1, t.rounds + 1):
        if t.algorithm == "fedyoyo":
            res = local_train_fedyoyo(client, params, prior, cfg, env, r)
            if t.prior_mode == "estimated":
                fresh = res.estimate.normalized
                client.prior_state = fresh if client.prior_state is None else ema_update(
                    client.prior_state, fresh, t.ema_m)
                prior = aggregate_global_prior([client.prior_state], [n])
        else:
            res = local_train_baseline(client, params, cfg, env, r)
        params = res.params
    return params


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def record_row(name, m):
    row = {
        "round": m.round, "algorithm": name,
        "loss_total": m.losses.get("total"), "loss_dla": m.losses.get("dla"), "loss_asd": m.losses.get("asd"),
        "acc_all": m.acc_all, "acc_many": m.acc_many, "acc_medium": m.acc_medium, "acc_few": m.acc_few,
        "nc_min_angle": m.nc_min_angle, "nc_max_angle": m.nc_max_angle, "nc_mean_angle": m.nc_mean_angle,
        "prior_l2": m.prior_l2, "feat_cos_global_local": m.feat_cos_global_local,
    }
    return row


def format_csv(name, records):
    lines = [",".join(LOG_COLUMNS)]
    for m in records:
        row = record_row(name, m)
        lines.append(",".join(_fmt(row[c]) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def format_jsonl(name, records):
    return "".join(json.dumps(record_row(name, m)) + "\n" for m in records)


def write_result(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, result.name)
    with open(base + ".csv", "w") as fh:
        fh.write(format_csv(result.name, result.records))
    with open(base + ".jsonl", "w") as fh:
        fh.write(format_jsonl(result.name, result.records))
    save_checkpoint(base + ".ckpt", result.params)
