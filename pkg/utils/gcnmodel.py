"""
Shared-parameter graph Q-network.

Each node type has its own sigmoid input encoder into the common width d.
The encoded node table is propagated through N layers of
H <- sigmoid(A_hat H W) and the TSC rows of the last layer are the agent
embeddings psi. One linear head maps psi (or psi * phi(tau) for the
quantile variant) to the two action values.
"""
from dataclasses import dataclass

import numpy as np

from logger import setup_logger
from utils import autodiff as ad
from utils.obsgraph import FEATURE_DIMS, NODE_TYPES

logger = setup_logger("gcnmodel")

N_ACTIONS = 2


@dataclass(frozen=True)
class GCNConfig:
    layers: int = 3
    hidden: int = 32
    quantile_embedding: int = 64
    quantile_samples: int = 8
    target_quantile_samples: int = 8
    eval_quantiles: int = 32
    huber_threshold: float = 1.0
    head_hidden: bool = False

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError(f"GCNConfig.layers must be >= 2, got {self.layers}")
        for name in ("hidden", "quantile_embedding", "quantile_samples", "target_quantile_samples", "eval_quantiles"):
            if getattr(self, name) < 1:
                raise ValueError(f"GCNConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.huber_threshold <= 0:
            raise ValueError(f"GCNConfig.huber_threshold must be > 0, got {self.huber_threshold}")

    @classmethod
    def from_config(cls, cfg):
        model = cfg.get("model", {})
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in model.items() if k in fields})


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: GCNConfig, seed) -> ad.ParamStore:
    rng = np.random.default_rng(seed)
    d = config.hidden
    params = ad.ParamStore()
    for node_type in NODE_TYPES:
        params.add(f"enc.{node_type}.W", _glorot(rng, FEATURE_DIMS[node_type], d))
        params.add(f"enc.{node_type}.b", np.zeros((1, d)))
    for n in range(config.layers):
        params.add(f"gcn.W{n}", _glorot(rng, d, d))
    if config.head_hidden:
        params.add("head.hidden.W", _glorot(rng, d, d))
        params.add("head.hidden.b", np.zeros((1, d)))
    params.add("head.W", _glorot(rng, d, N_ACTIONS))
    params.add("head.b", np.zeros((1, N_ACTIONS)))
    params.add("quantile.w", _glorot(rng, config.quantile_embedding, d))
    params.add("quantile.b", np.zeros((1, d)))
    logger.debug(f"Initialized {params.n_parameters()} parameters (seed {seed})")
    return params


def layer_count(params):
    return sum(1 for name in params.names() if name.startswith("gcn.W"))


def embed(graph, params):
    """psi for the graph's focus TSC rows, shape (n_focus, d)."""
    blocks = []
    for node_type in NODE_TYPES:
        x = graph.features[node_type]
        W = params[f"enc.{node_type}.W"]
        if x.shape[1] != W.shape[0]:
            raise ValueError(f"{node_type} features have width {x.shape[1]}, encoder expects {W.shape[0]}")
        blocks.append(ad.sigmoid(ad.add(ad.matmul(ad.Tensor(x), W), params[f"enc.{node_type}.b"])))
    h = ad.concat_rows(blocks)
    if graph.a_hat.shape[0] != h.shape[0]:
        raise ValueError(f"Adjacency has {graph.a_hat.shape[0]} rows for {h.shape[0]} nodes")
    for n in range(layer_count(params)):
        h = ad.sigmoid(ad.matmul(ad.spmm(graph.a_hat, h), params[f"gcn.W{n}"]))
    return ad.take_rows(h, graph.focus_rows)


def head(x, params):
    if "head.hidden.W" in params:
        x = ad.relu(ad.add(ad.matmul(x, params["head.hidden.W"]), params["head.hidden.b"]))
    return ad.add(ad.matmul(x, params["head.W"]), params["head.b"])


def q_values(psi, params):
    """Deterministic action values, shape (n_tsc, 2): column 0 prolong, column 1 switch."""
    return head(psi, params)


def quantile_embedding(taus, params):
    """phi(tau)_j = ReLU(sum_i cos(pi i tau) w_ij + b_j), i = 0..n-1; one row per tau."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float)).reshape(-1)
    if np.any((taus < 0.0) | (taus > 1.0)) or not np.all(np.isfinite(taus)):
        raise ValueError("Quantile levels must lie within [0, 1]")
    w = params["quantile.w"]
    i = np.arange(w.shape[0])
    basis = np.cos(np.pi * taus[:, None] * i[None, :])
    return ad.relu(ad.add(ad.matmul(ad.Tensor(basis), w), params["quantile.b"]))


def _tau_matrix(taus, batch):
    taus = np.asarray(taus, dtype=float)
    if taus.ndim <= 1:
        return np.tile(taus.reshape(1, -1), (batch, 1))
    if taus.shape[0] != batch:
        raise ValueError(f"Got quantile levels for {taus.shape[0]} rows, expected {batch}")
    return taus


def z_values(psi, taus, params):
    """Quantile values Z_tau(s, .) for every (row, tau); returns ((B*M, 2) tensor, (B, M) taus).

    ``taus`` is either one shared set of levels or a (B, M) matrix; output
    rows are ordered by psi row, then tau.
    """
    batch = psi.shape[0]
    taus = _tau_matrix(taus, batch)
    m = taus.shape[1]
    if params["quantile.w"].shape[1] != psi.shape[1]:
        raise ValueError(f"psi width {psi.shape[1]} does not match quantile embedding width "
                         f"{params['quantile.w'].shape[1]}")
    phi = quantile_embedding(taus.reshape(-1), params)
    psi_rep = ad.take_rows(psi, np.repeat(np.arange(batch), m))
    return head(ad.mul(psi_rep, phi), params), taus


def midpoint_taus(k):
    return (np.arange(1, k + 1) - 0.5) / k


def q_from_quantiles(psi, params, k, rng=None):
    """Mean of Z over k quantile levels: the fixed midpoint grid, or uniform draws when ``rng`` is given."""
    if k < 1:
        raise ValueError("k must be >= 1")
    taus = rng.random((psi.shape[0], k)) if rng is not None else midpoint_taus(k)
    z, _ = z_values(psi, taus, params)
    return ad.group_mean(z, k)


# ─────────────────────────────────────────────────────────────────────────────
# Fixed-width MLP used by the independent DQN sanity mode

def init_mlp_params(input_dim, config: GCNConfig, seed) -> ad.ParamStore:
    rng = np.random.default_rng(seed)
    d = config.hidden
    params = ad.ParamStore()
    params.add("mlp.W0", _glorot(rng, input_dim, d))
    params.add("mlp.b0", np.zeros((1, d)))
    params.add("mlp.W1", _glorot(rng, d, d))
    params.add("mlp.b1", np.zeros((1, d)))
    params.add("head.W", _glorot(rng, d, N_ACTIONS))
    params.add("head.b", np.zeros((1, N_ACTIONS)))
    return params


def mlp_q_values(x, params):
    h = ad.relu(ad.add(ad.matmul(ad.as_tensor(x), params["mlp.W0"]), params["mlp.b0"]))
    h = ad.relu(ad.add(ad.matmul(h, params["mlp.W1"]), params["mlp.b1"]))
    return head(h, params)
