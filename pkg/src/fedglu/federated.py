"""Local, central and federated training regimes plus per-patient HH fine-tuning.

Federated training is simulated in-process: every round the server's flat
parameter vector is handed to each client, which trains a few epochs with a
fresh Adam state and returns its weights; the server then takes the
sample-count weighted mean. Only parameter vectors cross the client/server
boundary.
"""

from __future__ import annotations

import json
import logging
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cgm_data import SampleSet
from .evaluation import clip_predictions, region_masks, region_rmse
from .loss import MSE, HhParams, LossSpec
from .nn_core import (ARCHITECTURE, AdamState, EmptyDataset, MlpModel, TrainConfig, init_model,
                      model_to_dict, predict_mgdl, train)

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 1.0)
FALLBACK_ALPHA = 0.5


class NoClients(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NoExcursionsInTrainData(UserWarning):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from ints and strings (strings via CRC32)."""
    words = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


@dataclass
class ClientState:
    patient_id: str
    train: SampleSet
    val: Optional[SampleSet] = None
    params: Optional[np.ndarray] = None
    optimizer: Optional[AdamState] = None
    last_loss: Optional[float] = None

    def __post_init__(self):
        if len(self.train) == 0:
            raise EmptyDataset(f"client {self.patient_id} has no training samples")

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 500
    client_lr: float = 0.001
    server_lr: float = 1.0
    rng_seed: int = 0
    max_workers: int = 1

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be non-negative")
        if self.batch_size < 1 or self.client_lr <= 0 or self.server_lr <= 0:
            raise ValueError("batch_size, client_lr and server_lr must be positive")


@dataclass
class ServerState:
    params: np.ndarray
    round: int = 0
    server_lr: float = 1.0
    trace: list = field(default_factory=list)


@dataclass
class ClientReturn:
    patient_id: str
    n_k: int
    params: np.ndarray


@dataclass
class RoundRecord:
    round: int
    client_ids: list
    n_k: list
    client_params: list
    aggregated: np.ndarray
    mean_client_loss: Optional[float]
    global_train_mse: Optional[float]

    @property
    def n(self) -> int:
        return sum(self.n_k)

    def to_dict(self) -> dict:
        return {"round": self.round, "client_ids": self.client_ids, "n_k": self.n_k, "n": self.n,
                "mean_client_loss": self.mean_client_loss, "global_train_mse": self.global_train_mse}


@dataclass
class RoundLedger:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> RoundRecord:
        return self.records[i]

    def to_dict(self) -> dict:
        return {"rounds": [r.to_dict() for r in self.records]}


def client_update(client: ClientState, global_params: np.ndarray, cfg: FedConfig, round_index: int = 0,
                  layer_dims: Sequence[int] = ARCHITECTURE) -> np.ndarray:
    """Run ``cfg.local_epochs`` epochs of MSE/Adam training from the global weights."""
    if cfg.local_epochs == 0:
        client.params = np.array(global_params, copy=True)
        return client.params.copy()
    model = MlpModel(layer_dims, global_params)
    tcfg = TrainConfig(learning_rate=cfg.client_lr, batch_size=cfg.batch_size, max_epochs=cfg.local_epochs,
                       patience=cfg.local_epochs, rng_seed=derive_seed(cfg.rng_seed, round_index, client.patient_id))
    result = train(model, client.train, MSE, tcfg)
    client.params = result.model.flatten()
    client.optimizer = result.optimizer
    client.last_loss = result.train_trace[-1]
    return client.params.copy()


def aggregate(server: ServerState, returns: Sequence[ClientReturn]) -> ServerState:
    """Sample-weighted mean of client vectors followed by the server step.

    Clients are summed in ascending patient-id order so the result does not
    depend on the order of ``returns``. With a server learning rate of 1 the
    new global vector is the weighted mean itself.
    """
    if not returns:
        raise NoClients("aggregate needs at least one client return")
    ordered = sorted(returns, key=lambda r: r.patient_id)
    shape = server.params.shape
    for r in ordered:
        if r.params.shape != shape:
            raise ShapeMismatch(f"client {r.patient_id} returned {r.params.shape}, server holds {shape}")
        if r.n_k <= 0:
            raise ValueError(f"client {r.patient_id} reported n_k={r.n_k}")
    n = sum(r.n_k for r in ordered)
    w_avg = np.zeros(shape)
    for r in ordered:
        w_avg += (r.n_k / n) * r.params
    if server.server_lr == 1.0:
        new = w_avg
    else:
        new = server.params - server.server_lr * (server.params - w_avg)
    return ServerState(new, server.round + 1, server.server_lr, list(server.trace))


def _global_train_mse(model: MlpModel, clients: Sequence[ClientState]) -> float:
    total, n = 0.0, 0
    for c in clients:
        err = c.train.y - predict_mgdl(model, c.train.X)
        total += float(err @ err)
        n += len(err)
    return total / n


def run_federated(clients: Sequence[ClientState], cfg: FedConfig, init_params: Optional[np.ndarray] = None,
                  layer_dims: Sequence[int] = ARCHITECTURE, snapshot_dir=None,
                  track_global_loss: bool = True) -> tuple[ServerState, RoundLedger]:
    """FedAvg with full participation for ``cfg.rounds`` rounds.

    If ``snapshot_dir`` is given, ``rounds/round_<t>.json`` checkpoints and a
    ``ledger.json`` are written there.
    """
    if not clients:
        raise NoClients("run_federated needs at least one client")
    if init_params is None:
        init_params = init_model(derive_seed(cfg.rng_seed, "init"), layer_dims).params
    server = ServerState(np.array(init_params, dtype=np.float64, copy=True), 0, cfg.server_lr)
    ledger = RoundLedger()
    clients = sorted(clients, key=lambda c: c.patient_id)
    if snapshot_dir is not None:
        (Path(snapshot_dir) / "rounds").mkdir(parents=True, exist_ok=True)

    pool = ThreadPoolExecutor(cfg.max_workers) if cfg.max_workers > 1 else None
    try:
        for t in range(cfg.rounds):
            w_t = server.params

            def update(c, w_t=w_t, t=t):
                return client_update(c, w_t, cfg, t, layer_dims)

            vectors = list(pool.map(update, clients)) if pool else [update(c) for c in clients]
            returns = [ClientReturn(c.patient_id, c.n_k, v) for c, v in zip(clients, vectors)]
            server = aggregate(server, returns)
            losses = [c.last_loss for c in clients if c.last_loss is not None]
            mean_loss = float(np.mean(losses)) if losses else None
            g_mse = _global_train_mse(MlpModel(layer_dims, server.params), clients) if track_global_loss else None
            if g_mse is not None:
                server.trace.append(g_mse)
            ledger.records.append(RoundRecord(t + 1, [c.patient_id for c in clients], [c.n_k for c in clients],
                                              vectors, server.params.copy(), mean_loss, g_mse))
            logger.debug("round %d: mean client loss %s, global train mse %s", t + 1, mean_loss, g_mse)
            if snapshot_dir is not None:
                path = Path(snapshot_dir) / "rounds" / f"round_{t + 1}.json"
                path.write_text(json.dumps(model_to_dict(MlpModel(layer_dims, server.params))), encoding="utf-8")
    finally:
        if pool:
            pool.shutdown()
    if snapshot_dir is not None:
        (Path(snapshot_dir) / "ledger.json").write_text(json.dumps(ledger.to_dict(), indent=1), encoding="utf-8")
    return server, ledger


# ---------------------------------------------------------------------------
# personalisation and baselines

def local_finetune(client: ClientState, global_params: np.ndarray, hh: HhParams, cfg: TrainConfig,
                   layer_dims: Sequence[int] = ARCHITECTURE) -> np.ndarray:
    """Personalise the global weights on one client's data with the HH loss."""
    model = MlpModel(layer_dims, global_params)
    result = train(model, client.train, LossSpec("hh", hh), cfg, val=client.val)
    return result.model.flatten()


def excursion_score(model: MlpModel, samples: SampleSet) -> Optional[float]:
    """hypo RMSE + hyper RMSE of clipped predictions; None if a region is empty."""
    return region_rmse(samples.y, clip_predictions(predict_mgdl(model, samples.X))).combined


@dataclass
class AlphaSelection:
    alpha: float
    scores: dict
    model: Optional[MlpModel] = None
    fallback: bool = False


def select_alpha(train_fn: Callable[[float], MlpModel], candidate_alphas: Sequence[float], samples: SampleSet,
                 score_fn: Callable[[MlpModel, SampleSet], float] = excursion_score) -> AlphaSelection:
    """Train once per candidate and keep the alpha with the lowest score.

    Ties go to the larger alpha. If the training data lacks hypo or hyper
    samples the score is undefined and alpha 0.5 is returned untrained.
    """
    candidates = list(dict.fromkeys(float(a) for a in candidate_alphas))
    if not candidates:
        raise ValueError("empty alpha grid")
    hypo, _, hyper = region_masks(samples.y)
    if len(candidates) > 1 and not (hypo.any() and hyper.any()):
        warnings.warn("training data has no hypo or no hyper samples; using alpha=0.5",
                      NoExcursionsInTrainData, stacklevel=2)
        return AlphaSelection(FALLBACK_ALPHA, {}, None, fallback=True)
    best_alpha, best_score, best_model, scores = None, np.inf, None, {}
    for a in candidates:
        model = train_fn(a)
        score = score_fn(model, samples)
        score = np.inf if score is None else float(score)
        scores[a] = score
        if best_alpha is None or score < best_score or (score == best_score and a > best_alpha):
            best_alpha, best_score, best_model = a, score, model
    return AlphaSelection(best_alpha, scores, best_model)


def train_local(client: ClientState, loss: LossSpec, cfg: TrainConfig, init: Optional[MlpModel] = None,
                layer_dims: Sequence[int] = ARCHITECTURE) -> MlpModel:
    """Model trained on a single patient's data only."""
    model = init if init is not None else init_model(derive_seed(cfg.rng_seed, "init"), layer_dims)
    return train(model, client.train, loss, cfg, val=client.val).model


def train_central(sample_sets: Sequence[SampleSet], loss: LossSpec, cfg: TrainConfig,
                  init: Optional[MlpModel] = None, layer_dims: Sequence[int] = ARCHITECTURE) -> MlpModel:
    """One model on every patient's training samples pooled together."""
    sets = [s for s in sample_sets if len(s)]
    if not sets:
        raise EmptyDataset("no training samples in any patient")
    model = init if init is not None else init_model(derive_seed(cfg.rng_seed, "init"), layer_dims)
    return train(model, SampleSet.concat(sets), loss, cfg).model
