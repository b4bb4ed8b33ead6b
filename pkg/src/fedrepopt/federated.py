"""Federated orchestration: partitioning, client sampling, local training,
weighted averaging, and per-round evaluation.

Aggregation weights are client sample counts normalized over the
*participating* clients (with partial participation a global-total
normalization would shrink the model every round).  Client updates are
summed in client-id order around the first client's state, which makes
the average exactly permutation-invariant and exactly idempotent for
identical inputs.

Clients whose local training produces a non-finite loss or gradient are
dropped from the round and logged; a round with no survivors keeps the
previous global model, and two consecutive such rounds abort the run.
"""

import concurrent.futures
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import ops, optim
from .errors import AggregationError, NumericalError, ShapeError
from .models import Model
from .rng import stream_rng, stream_seed

logger = logging.getLogger("fedrepopt")

PARTITIONS = ("iid", "dirichlet")


@dataclass
class FederatedConfig:
    num_clients: int
    rounds: int
    local_epochs: int = 1
    participation: float = 1.0  # int -> K clients per round, float -> fraction C
    partition: str = "iid"
    alpha: float = 0.5
    seed: int = 0
    optimizer: optim.OptimConfig = field(default_factory=lambda: optim.OptimConfig(lr=0.05))
    eval_every: int = 1
    batch_size: int = 64
    augment: bool = False
    augment_pad: int = 2

    def __post_init__(self):
        if self.num_clients < 1:
            raise ShapeError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.rounds < 1:
            raise ShapeError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ShapeError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if isinstance(self.participation, bool) or not isinstance(self.participation, (int, float)):
            raise ShapeError(f"participation must be an int count or float fraction, got {self.participation!r}")
        if isinstance(self.participation, int):
            if not 1 <= self.participation <= self.num_clients:
                raise ShapeError(f"client count {self.participation} outside [1, {self.num_clients}]")
        elif not 0.0 < self.participation <= 1.0:
            raise ShapeError(f"participation fraction {self.participation} outside (0, 1]")
        if self.partition not in PARTITIONS:
            raise ShapeError(f"partition must be one of {PARTITIONS}, got {self.partition!r}")
        if self.alpha <= 0:
            raise ShapeError(f"dirichlet alpha must be positive, got {self.alpha}")
        if self.eval_every < 1:
            raise ShapeError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.batch_size < 1:
            raise ShapeError(f"batch_size must be >= 1, got {self.batch_size}")

    def clients_per_round(self) -> int:
        if isinstance(self.participation, int):
            return self.participation
        return max(1, math.ceil(self.participation * self.num_clients))


@dataclass
class ClientPartition:
    client_id: int
    indices: np.ndarray

    @property
    def n_k(self) -> int:
        return int(self.indices.shape[0])


@dataclass
class RoundMetrics:
    round: int
    top1: float
    top5: float
    loss: float
    clients: list
    seconds: float


def partition_iid(labels, num_clients, seed):
    """Random permutation split into near-equal shards."""
    n = len(labels)
    if num_clients <= 0:
        raise ShapeError(f"num_clients must be positive, got {num_clients}")
    if n < num_clients:
        raise ShapeError(f"{n} samples cannot cover {num_clients} clients")
    perm = np.random.default_rng(seed).permutation(n)
    return [
        ClientPartition(k, np.sort(chunk))
        for k, chunk in enumerate(np.array_split(perm, num_clients))
    ]


def partition_dirichlet(labels, num_clients, alpha, seed):
    """Per-class Dirichlet(alpha) allocation; empty clients are repaired by
    stealing one sample from the currently largest client."""
    if alpha <= 0:
        raise ShapeError(f"alpha must be positive, got {alpha}")
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < num_clients:
        raise ShapeError(f"{n} samples cannot cover {num_clients} clients")
    rng = np.random.default_rng(seed)
    assigned = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(proportions)[:-1] * idx.shape[0]).astype(int)
        for k, chunk in enumerate(np.split(idx, cuts)):
            assigned[k].extend(chunk.tolist())
    counts = np.array([len(a) for a in assigned])
    while (counts == 0).any():
        empty = int(np.argmin(counts))
        donor = int(np.argmax(counts))
        assigned[empty].append(assigned[donor].pop())
        counts[empty] += 1
        counts[donor] -= 1
    return [ClientPartition(k, np.sort(np.asarray(a, dtype=np.int64))) for k, a in enumerate(assigned)]


def make_partitions(labels, cfg: FederatedConfig):
    seed = stream_seed(cfg.seed, "partition")
    if cfg.partition == "iid":
        return partition_iid(labels, cfg.num_clients, seed)
    return partition_dirichlet(labels, cfg.num_clients, cfg.alpha, seed)


def partition_label_entropy(partitions, labels):
    """Mean per-client label entropy in nats."""
    labels = np.asarray(labels)
    entropies = []
    for part in partitions:
        counts = np.bincount(labels[part.indices])
        p = counts[counts > 0] / part.n_k
        entropies.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(entropies))


def sample_clients(round_idx, cfg: FederatedConfig):
    """Uniform sample without replacement, deterministic in (seed, round)."""
    k = cfg.clients_per_round()
    rng = stream_rng(cfg.seed, f"sample.round.{round_idx}")
    chosen = rng.choice(cfg.num_clients, size=k, replace=False)
    return sorted(int(c) for c in chosen)


def make_replica(spec, variant, dtype, state):
    structure = variant
    with_bias = any(pid.endswith(("conv/b", "dw/b")) for pid in state)
    model = Model(spec, structure, seed=0, dtype=dtype, with_bias=with_bias)
    model.load_state_dict(state)
    return model


def local_train(k, global_state, epochs, gm, cfg: FederatedConfig, part: ClientPartition,
                dataset, *, spec, variant, dtype, round_idx):
    """Train one client from the broadcast state for ``epochs`` full local
    passes. Returns (state, n_k, mean_loss)."""
    model = make_replica(spec, variant, dtype, global_state)
    if epochs == 0:
        return model.state_dict(), part.n_k, float("nan")
    opt_state = optim.OptimState()
    losses = []
    for epoch in range(epochs):
        order = stream_seed(cfg.seed, f"client.{k}.round.{round_idx}.epoch.{epoch}")
        for bi, (x, y) in enumerate(data_mod.batches(dataset, cfg.batch_size, order, indices=part.indices)):
            if cfg.augment:
                aug_seed = stream_seed(cfg.seed, f"client.{k}.round.{round_idx}.epoch.{epoch}.batch.{bi}.aug")
                x = data_mod.augment_crop_flip(x, cfg.augment_pad, aug_seed)
            model.zero_grad()
            logits = model.forward(x, mode="train")
            loss, dlogits = ops.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NumericalError(f"client {k} produced a non-finite loss in round {round_idx}")
            model.backward(dlogits)
            optim.step(model.parameter_list(), gm, cfg.optimizer, opt_state)
            losses.append(loss)
    return model.state_dict(), part.n_k, float(np.mean(losses))


def fedavg(updates):
    """Sample-count weighted mean of client states.

    ``updates`` is a list of (client_id, state_dict, n_k).  Summation runs
    in client-id order around the first client's state, so reordering the
    argument list cannot change the result, and aggregating identical
    states returns them bit for bit.
    """
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u[0])
    ids = [u[0] for u in ordered]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate client ids in aggregation: {ids}")
    total = sum(u[2] for u in ordered)
    if total <= 0:
        raise AggregationError("total sample count must be positive")
    keys = list(ordered[0][1])
    for cid, state, _ in ordered:
        if list(state) != keys:
            raise ShapeError(f"client {cid} state keys differ from client {ids[0]}")
    base = ordered[0][1]
    out = {}
    for pid in keys:
        ref = base[pid]
        acc = np.zeros_like(ref)
        for _, state, n_k in ordered:
            if state[pid].shape != ref.shape:
                raise ShapeError(f"client states disagree on {pid}: {state[pid].shape} vs {ref.shape}")
            acc += (n_k / total) * (state[pid] - ref)
        out[pid] = ref + acc
    return out


def evaluate(model, testset, batch=256):
    """(top1, top5, mean loss) on the test set; ties break to the lowest
    class index."""
    if len(testset) == 0:
        raise ShapeError("cannot evaluate on an empty test set")
    top1_hits = 0
    top5_hits = 0
    loss_sum = 0.0
    for i in range(0, len(testset), batch):
        x = testset.images[i : i + batch]
        y = testset.labels[i : i + batch]
        logits = model.forward(x, mode="eval")
        loss, _ = ops.softmax_cross_entropy(logits, y)
        loss_sum += loss * len(y)
        ranked = np.argsort(-logits, axis=1, kind="stable")
        top1_hits += int((ranked[:, 0] == y).sum())
        top5_hits += int((ranked[:, : min(5, logits.shape[1])] == y[:, None]).any(axis=1).sum())
    n = len(testset)
    return top1_hits / n, top5_hits / n, loss_sum / n


def initial_global_state(spec, variant, cfg: FederatedConfig, hs, dtype):
    """Round-0 global model state per the six-step pipeline: the repopt and
    csla variants continue from the hyperparameter-search output."""
    from .models import build_model

    init_seed = stream_seed(cfg.seed, "init")
    if variant == "repopt":
        if hs is None:
            raise ShapeError("the repopt variant requires a hyperparameter-search result")
        # built by fusing the same-seed csla model, so the freshly drawn
        # classifier head matches the csla run's head exactly
        model = build_model(spec, "repopt", init_seed, dtype=dtype)
        state = model.state_dict()
        _merge_hs(state, hs.fused, spec)
        return state, hs.grad_mult
    model = Model(spec, variant, seed=init_seed, dtype=dtype)
    state = model.state_dict()
    if variant == "csla" and hs is not None:
        _merge_hs(state, hs.csla_params, spec)
    return state, None


def _merge_hs(state, hs_params, spec):
    unknown = set(hs_params) - set(state)
    if unknown:
        raise ShapeError(f"hyperparameter-search result does not match spec {spec}: unexpected {sorted(unknown)[:4]}")
    for pid, arr in hs_params.items():
        if state[pid].shape != np.asarray(arr).shape:
            raise ShapeError(f"hyperparameter-search parameter {pid} has shape {np.asarray(arr).shape}, model expects {state[pid].shape}")
        state[pid] = np.asarray(arr).astype(state[pid].dtype)


def run_federated(cfg: FederatedConfig, spec, variant, hs, dataset, testset,
                  dtype="fp64", threads=1, checkpoint_dir=None):
    """Run R federated rounds; returns (list of RoundMetrics, final global state)."""
    from .checkpoint import save_checkpoint

    global_state, gm = initial_global_state(spec, variant, cfg, hs, dtype)
    partitions = make_partitions(dataset.labels, cfg)
    eval_model = make_replica(spec, variant, dtype, global_state)
    metrics = []
    consecutive_aborts = 0

    def train_one(k, round_idx):
        return local_train(
            k, global_state, cfg.local_epochs, gm, cfg, partitions[k], dataset,
            spec=spec, variant=variant, dtype=dtype, round_idx=round_idx,
        )

    for round_idx in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        selected = sample_clients(round_idx, cfg)
        updates, losses, failed = [], [], []
        if threads > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
                futures = {pool.submit(train_one, k, round_idx): k for k in selected}
                results = {}
                for fut in concurrent.futures.as_completed(futures):
                    k = futures[fut]
                    try:
                        results[k] = fut.result()
                    except NumericalError as exc:
                        results[k] = exc
            outcomes = [(k, results[k]) for k in selected]
        else:
            outcomes = []
            for k in selected:
                try:
                    outcomes.append((k, train_one(k, round_idx)))
                except NumericalError as exc:
                    outcomes.append((k, exc))
        for k, result in outcomes:
            if isinstance(result, NumericalError):
                failed.append(k)
                logger.warning("round %d: client %d failed and was dropped: %s", round_idx, k, result)
                continue
            state, n_k, mean_loss = result
            updates.append((k, state, n_k))
            losses.append((n_k, mean_loss))

        if not updates:
            consecutive_aborts += 1
            logger.warning("round %d aborted: all %d clients failed; keeping previous global model", round_idx, len(selected))
            if consecutive_aborts >= 2:
                raise AggregationError(f"rounds {round_idx - 1} and {round_idx} both lost every client")
            continue
        consecutive_aborts = 0
        global_state = fedavg(updates)

        if round_idx % cfg.eval_every == 0:
            eval_model.load_state_dict(global_state)
            top1, top5, eval_loss = evaluate(eval_model, testset)
            total_n = sum(n for n, _ in losses)
            train_loss = sum(n * l for n, l in losses) / total_n
            elapsed = time.perf_counter() - started
            metrics.append(RoundMetrics(round_idx, top1, top5, train_loss, sorted(u[0] for u in updates), elapsed))
            logger.info("round %d: top1=%.4f top5=%.4f loss=%.4f (%.1fs)", round_idx, top1, top5, train_loss, elapsed)
            if checkpoint_dir is not None:
                save_checkpoint(f"{checkpoint_dir}/global_round{round_idx}.ckpt", global_state)
    if checkpoint_dir is not None:
        save_checkpoint(f"{checkpoint_dir}/global_final.ckpt", global_state)
    return metrics, global_state
