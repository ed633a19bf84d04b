"""Round loop of co-clustered federated recommendation.

Each round the sampled participants train locally and upload their item
embeddings. The server averages them into a global model, clusters its rows
into item categories, picks a core participant and a category, splits the
participants at the elbow of their similarity to the core and averages the
similar group into the group model, which only that group downloads. Every
participant downloads the item membership.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import clustering, evaluation, partition
from .dataset import (
    EvalCandidates,
    InteractionDataset,
    VirtualRatings,
    build_eval_candidates,
    inject_virtual_ratings,
    sample_train_negatives,
)
from .model import (
    DivergenceError,
    LossConfig,
    ScoreFunction,
    init_embeddings,
    init_score_function,
    local_train,
    make_batches,
)

_logger = logging.getLogger(__name__)

ABLATION_MODES = ("origin", "user_p", "item_s", "item_sc", "full")

# SeedSequence spawn keys for the independent random streams of a run
STREAM_INIT, STREAM_EVAL, STREAM_VIRTUAL, STREAM_SERVER, STREAM_CLIENT, STREAM_DIAGNOSE = range(6)


@dataclass(frozen=True)
class RoundConfig:
    total_rounds: int = 100
    participant_fraction: float = 1.0
    num_clusters: int = 30
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 256
    num_negatives: int = 4
    embedding_dim: int = 32
    init_std: float = 0.01
    # "group": similar group downloads V_s; "global": every participant downloads V_g
    distribution: str = "group"
    virtual_ratio: float = 0.0
    eval_every: int = 1
    eval_mode: str = "sampled"
    top_k: int = 10
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    workers: int = 1
    keep_best_models: bool = True

    def __post_init__(self):
        if self.total_rounds < 0:
            raise ValueError("total_rounds must be >= 0")
        if not 0.0 < self.participant_fraction <= 1.0:
            raise ValueError("participant_fraction must lie in (0, 1]")
        if self.distribution not in ("group", "global"):
            raise ValueError("distribution must be 'group' or 'global'")
        if self.eval_mode not in ("sampled", "full_rank"):
            raise ValueError("eval_mode must be 'sampled' or 'full_rank'")
        if self.num_clusters < 1 or self.batch_size < 1 or self.eval_every < 1 or self.workers < 1:
            raise ValueError("num_clusters, batch_size, eval_every and workers must be positive")


def ablation_mode(cfg: RoundConfig, mode: str) -> RoundConfig:
    """Config for one ablation arm.

    ``origin``: global model to everyone, no structure term. ``user_p``:
    co-clustering without a structure term. ``item_s`` / ``item_sc``: global
    model with the cosine / contrastive item term. ``full``: unchanged.
    """
    if mode == "full":
        return cfg
    if mode == "origin":
        return replace(cfg, distribution="global", loss=cfg.loss.with_(lam=0.0, scl_variant="none"))
    if mode == "user_p":
        return replace(cfg, distribution="group", loss=cfg.loss.with_(lam=0.0, scl_variant="none"))
    if mode == "item_s":
        return replace(cfg, distribution="global", loss=cfg.loss.with_(scl_variant="item_s"))
    if mode == "item_sc":
        return replace(cfg, distribution="global", loss=cfg.loss.with_(scl_variant="supcontrast"))
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


@dataclass
class ClientState:
    client_id: int
    embeddings: np.ndarray
    score_fn: ScoreFunction
    # latest model downloaded from the server, consumed at the next participation
    received: np.ndarray | None = None
    participation_count: int = 0
    similar_group_count: int = 0

    def start_model(self) -> np.ndarray:
        return self.embeddings if self.received is None else self.received


@dataclass
class ServerState:
    """Everything the server holds. Never references client-private state."""

    config: RoundConfig
    round: int
    V0: np.ndarray
    V_s: np.ndarray
    V_g: np.ndarray | None = None
    membership: clustering.ItemMembership | None = None
    rng: np.random.Generator | None = None


@dataclass
class RoundRecord:
    round: int
    participants: int
    failed: list[int]
    train_loss: float
    core: int | None = None
    category: int | None = None
    split: dict | None = None
    fallback: bool = False
    kmeans_objective: float | None = None
    bytes_up: int = 0
    bytes_down: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    history: list[dict]
    rounds: list[RoundRecord]
    best_round: int
    best_validation: dict
    best_test: dict
    participation_counts: np.ndarray
    similar_counts: np.ndarray
    best_models: list[tuple[np.ndarray, ScoreFunction]] | None = None
    final_server: ServerState | None = None

    def metric_records(self) -> list[dict]:
        return list(self.history)


def _client_seed(root: np.random.SeedSequence, round_: int, client: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(root.entropy, spawn_key=(STREAM_CLIENT, round_, client))


class Federation:
    """One simulated deployment: dataset, server and every client's state."""

    def __init__(self, dataset: InteractionDataset, cfg: RoundConfig, seed: int = 0,
                 candidates: EvalCandidates | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.seed = seed
        self.root = np.random.SeedSequence(seed)
        streams = {k: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
                   for k in (STREAM_INIT, STREAM_EVAL, STREAM_VIRTUAL, STREAM_SERVER)}

        if dataset.num_users * cfg.participant_fraction < 2 and dataset.num_users >= 2:
            _logger.warning("participant fraction yields fewer than 2 clients; using 2")
        d, n_items = cfg.embedding_dim, dataset.num_items
        V0 = init_embeddings(n_items, d, streams[STREAM_INIT], cfg.init_std)
        # one shared initial score function; each client's copy then evolves privately
        theta0 = init_score_function(d, streams[STREAM_INIT], cfg.init_std)
        self.clients = {u: ClientState(u, V0, theta0.copy()) for u in range(dataset.num_users)}
        self.server = ServerState(cfg, 0, V0, V0, rng=streams[STREAM_SERVER])
        self.candidates = candidates if candidates is not None else build_eval_candidates(
            dataset, cfg.eval_mode, streams[STREAM_EVAL])
        self.virtual: list[VirtualRatings] | None = None
        if cfg.virtual_ratio > 0:
            self.virtual = inject_virtual_ratings(dataset, cfg.virtual_ratio, streams[STREAM_VIRTUAL])
        self.records: list[RoundRecord] = []

    # -- client side -------------------------------------------------------

    def _client_update(self, u: int, round_: int, membership):
        """Local round of client ``u``; returns (V, theta, loss) or raises DivergenceError."""
        cfg = self.cfg
        client = self.clients[u]
        rng = np.random.default_rng(_client_seed(self.root, round_, u))
        train = self.dataset.train[u]
        pos_items, neg_explicit = train, np.empty(0, dtype=np.int64)
        exclude = None
        if self.virtual is not None and len(self.virtual[u].items):
            vr = self.virtual[u]
            pos_items = np.concatenate((train, vr.items[vr.labels == 1]))
            neg_explicit = vr.items[vr.labels == 0]
            exclude = vr.items
        negs = sample_train_negatives(self.dataset, u, cfg.num_negatives, rng, exclude=exclude,
                                      num_positives=len(pos_items))
        items = np.concatenate((pos_items, neg_explicit, negs.items))
        labels = np.concatenate((np.ones(len(pos_items)), np.zeros(len(neg_explicit) + len(negs.items))))
        batches = make_batches(items, labels, cfg.batch_size, rng)
        return local_train(client.start_model(), client.score_fn, batches, membership, cfg.loss, rng,
                           train_items=train)

    # -- server side -------------------------------------------------------

    def round_step(self) -> RoundRecord:
        cfg, server, ds = self.cfg, self.server, self.dataset
        server.round += 1
        t = server.round
        rng = server.rng
        n_part = min(ds.num_users, max(2, int(round(cfg.participant_fraction * ds.num_users))))
        participants = np.sort(rng.choice(ds.num_users, size=n_part, replace=False)).tolist()

        membership = server.membership
        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                futures = {u: pool.submit(self._client_update, u, t, membership) for u in participants}
                outcomes = {}
                for u in participants:
                    try:
                        outcomes[u] = futures[u].result()
                    except DivergenceError as exc:
                        outcomes[u] = exc
        else:
            outcomes = {}
            for u in participants:
                try:
                    outcomes[u] = self._client_update(u, t, membership)
                except DivergenceError as exc:
                    outcomes[u] = exc

        failed = [u for u in participants if isinstance(outcomes[u], DivergenceError)]
        ok = [u for u in participants if u not in set(failed)]
        for u in failed:
            _logger.warning("round %d: client %d diverged; excluded from aggregation", t, u)
        losses = []
        for u in ok:
            res = outcomes[u]
            c = self.clients[u]
            c.embeddings, c.score_fn, c.received = res.embeddings, res.score_fn, None
            c.participation_count += 1
            losses.append(res.loss)

        rec = RoundRecord(t, len(participants), failed, float(np.mean(losses)) if losses else float("nan"))
        if not ok:
            self.records.append(rec)
            return rec

        # uploads: V_u of every participant that finished its round
        uploads = {u: self.clients[u].embeddings for u in ok}
        itemsize = 8
        n_items, d = ds.num_items, cfg.embedding_dim
        rec.bytes_up = len(participants) * n_items * d * itemsize

        server.V_g = partition.global_aggregate(uploads)
        km = clustering.kmeans(server.V_g, min(cfg.num_clusters, n_items), rng,
                               cfg.kmeans_max_iters, cfg.kmeans_tol)
        server.membership = km.membership
        rec.kmeans_objective = km.objective
        member_bytes = len(participants) * n_items * km.membership.labels.itemsize

        receivers: list[int]
        if cfg.distribution == "global":
            server.V_s = server.V_g
            receivers = ok
        else:
            sizes = km.membership.sizes()
            eligible = np.flatnonzero(sizes >= 2)
            if len(eligible) == 0 or len(ok) < 2:
                _logger.warning("round %d: no usable category; falling back to global aggregation", t)
                rec.fallback = True
                server.V_s = server.V_g
                receivers = ok
            else:
                core = int(ok[int(rng.integers(len(ok)))])
                k = int(eligible[int(rng.integers(len(eligible)))])
                items = clustering.category_items(km.membership, k)
                scores = partition.similarity_scores(
                    uploads[core], [(u, uploads[u]) for u in ok], items, core_id=core, category=k)
                split = partition.elbow_split(scores)
                server.V_s = partition.group_aggregate({u: uploads[u] for u in split.similar})
                receivers = split.similar
                rec.core, rec.category = core, k
                rec.split = split.record(similar=split.similar)
                for u in split.similar:
                    self.clients[u].similar_group_count += 1
        for u in receivers:
            self.clients[u].received = server.V_s
        rec.bytes_down = len(receivers) * n_items * d * itemsize + member_bytes
        self.records.append(rec)
        return rec

    # -- evaluation --------------------------------------------------------

    def models(self) -> list[tuple[np.ndarray, ScoreFunction]]:
        return [(self.clients[u].embeddings, self.clients[u].score_fn) for u in range(self.dataset.num_users)]

    def evaluate(self, split: str = "test") -> dict:
        res = evaluation.evaluate(self.dataset, self.candidates, self.models(), split, self.cfg.top_k)
        return {"hr": res["hr"], "ndcg": res["ndcg"]}

    def metrics_record(self) -> dict:
        rec = {"round": self.server.round, "mode": self.cfg.eval_mode}
        if self.dataset.validation is not None:
            v = self.evaluate("validation")
            rec["val_hr"], rec["val_ndcg"] = v["hr"], v["ndcg"]
        t = self.evaluate("test")
        rec["test_hr"], rec["test_ndcg"] = t["hr"], t["ndcg"]
        return rec

    def run(self, on_round=None, on_metrics=None) -> RunReport:
        """Evaluate the initial models, then run every round.

        ``on_round(federation, record)`` is called after each round and
        ``on_metrics(record)`` for each metrics record as it is produced.
        """
        cfg = self.cfg
        history = [self.metrics_record()]
        if on_metrics is not None:
            on_metrics(history[0])
        best = history[0]
        best_models = self._snapshot() if cfg.keep_best_models else None
        for _ in range(cfg.total_rounds):
            rec = self.round_step()
            if self.server.round % cfg.eval_every == 0 or self.server.round == cfg.total_rounds:
                m = self.metrics_record()
                m["train_loss"] = rec.train_loss
                m["bytes_up"], m["bytes_down"] = rec.bytes_up, rec.bytes_down
                if rec.split is not None:
                    m["similar_size"] = rec.split["similar_size"]
                history.append(m)
                if on_metrics is not None:
                    on_metrics(m)
                if _key(m) > _key(best):
                    best = m
                    if cfg.keep_best_models:
                        best_models = self._snapshot()
            if on_round is not None:
                on_round(self, rec)
        ids = range(self.dataset.num_users)
        return RunReport(
            history=history,
            rounds=list(self.records),
            best_round=best["round"],
            best_validation={"hr": best.get("val_hr"), "ndcg": best.get("val_ndcg")},
            best_test={"hr": best["test_hr"], "ndcg": best["test_ndcg"]},
            participation_counts=np.array([self.clients[u].participation_count for u in ids]),
            similar_counts=np.array([self.clients[u].similar_group_count for u in ids]),
            best_models=best_models,
            final_server=self.server,
        )

    def _snapshot(self):
        return [(V.copy(), th.copy()) for V, th in self.models()]


def _key(m: dict) -> tuple:
    # best validation HR, then NDCG; earlier rounds win ties
    if "val_hr" in m:
        return (m["val_hr"], m["val_ndcg"])
    return (m["test_hr"], m["test_ndcg"])


def run(dataset: InteractionDataset, cfg: RoundConfig, seed: int = 0, on_round=None) -> RunReport:
    """Simulate ``cfg.total_rounds`` rounds and report the validation-best round."""
    return Federation(dataset, cfg, seed).run(on_round)


def diagnose_client_kmeans(clients, K: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Cluster sizes from K-Means on flattened client embedding matrices.

    ``clients`` may be ClientStates, (V, theta) pairs or bare matrices.
    """
    mats = []
    for c in clients:
        if isinstance(c, ClientState):
            mats.append(c.embeddings)
        elif isinstance(c, tuple):
            mats.append(c[0])
        else:
            mats.append(c)
    if len(mats) < K:
        raise ValueError("need at least K clients")
    X = np.stack([np.asarray(V).ravel() for V in mats])
    res = clustering.kmeans(X, K, rng if rng is not None else np.random.default_rng(0))
    return np.sort(res.membership.sizes())[::-1]
