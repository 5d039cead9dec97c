"""From-scratch GRU sequence regressor with BPTT, Adam and early stopping.

Maps a short window of iteration features (duals and consensus values of
the first K ADMM steps) to the predicted converged values.  Gate
convention: z and r are sigmoid gates and

    h_t = (1 - z) * h_{t-1} + z * h_tilde.

The recurrent cell keeps its standard sigmoid/tanh gates; ReLU is applied
only to the dense layer before the linear output heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

WEIGHT_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "W_d", "W_o")
BIAS_NAMES = ("b_z", "b_r", "b_h", "b_d", "b_o")
PARAM_NAMES = WEIGHT_NAMES + BIAS_NAMES

MODEL_FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    l2_coeff: float = 1e-4
    patience: int = 5
    max_epochs: int = 50
    batch_size: int = 32
    validation_fraction: float = 0.1
    seed: int = 0
    hidden: int = 128
    dense: int = 64

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ModelError("validation_fraction must be in (0, 1)")


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        flat = values.reshape(-1, values.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std[std < 1e-12] = 1.0    # constant features pass through unscaled
        return cls(mean, std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def _glorot(rng, rows, cols):
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class ModelParams:
    """GRU layer + ReLU dense layer + linear output heads."""
    params: dict[str, np.ndarray]
    n_features: int
    n_outputs: int
    n_lambda: int            # first block of the output: predicted duals

    @classmethod
    def init(cls, n_features: int, n_outputs: int, n_lambda: int,
             hidden: int = 128, dense: int = 64,
             rng: np.random.Generator | None = None) -> "ModelParams":
        rng = rng or np.random.default_rng(0)
        p = {
            "W_z": _glorot(rng, hidden, n_features),
            "W_r": _glorot(rng, hidden, n_features),
            "W_h": _glorot(rng, hidden, n_features),
            "U_z": _glorot(rng, hidden, hidden),
            "U_r": _glorot(rng, hidden, hidden),
            "U_h": _glorot(rng, hidden, hidden),
            "b_z": np.zeros(hidden),
            "b_r": np.zeros(hidden),
            "b_h": np.zeros(hidden),
            "W_d": _glorot(rng, dense, hidden),
            "b_d": np.zeros(dense),
            "W_o": _glorot(rng, n_outputs, dense),
            "b_o": np.zeros(n_outputs),
        }
        return cls(p, n_features, n_outputs, n_lambda)

    @property
    def hidden(self) -> int:
        return self.params["b_z"].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.params.items()},
                           self.n_features, self.n_outputs, self.n_lambda)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_cell(p: dict, x_t: np.ndarray, h_prev: np.ndarray):
    """One GRU step; returns (h_t, cache for backprop)."""
    z = _sigmoid(x_t @ p["W_z"].T + h_prev @ p["U_z"].T + p["b_z"])
    r = _sigmoid(x_t @ p["W_r"].T + h_prev @ p["U_r"].T + p["b_r"])
    rh = r * h_prev
    hh = np.tanh(x_t @ p["W_h"].T + rh @ p["U_h"].T + p["b_h"])
    h = (1.0 - z) * h_prev + z * hh
    return h, (x_t, h_prev, z, r, rh, hh)


def forward(m: ModelParams, seq: np.ndarray, return_cache: bool = False):
    """Forward pass over (B, K, F) or (K, F) input; returns (B, out) or (out,)."""
    single = seq.ndim == 2
    batch = seq[None] if single else seq
    if batch.shape[-1] != m.n_features:
        raise ModelError(
            f"expected {m.n_features} input features, got {batch.shape[-1]}")
    p = m.params
    h = np.zeros((batch.shape[0], m.hidden))
    caches = []
    for t in range(batch.shape[1]):
        h, cache = gru_cell(p, batch[:, t, :], h)
        caches.append(cache)
    pre_d = h @ p["W_d"].T + p["b_d"]
    d = np.maximum(pre_d, 0.0)
    out = d @ p["W_o"].T + p["b_o"]
    if return_cache:
        return out, (caches, h, pre_d, d)
    return out[0] if single else out


def loss(m: ModelParams, inputs: np.ndarray, targets: np.ndarray,
         l2_coeff: float = 0.0) -> float:
    pred = forward(m, inputs)
    mse = float(np.mean((pred - targets) ** 2))
    if l2_coeff:
        mse += l2_coeff * sum(float(np.sum(m.params[k] ** 2))
                              for k in WEIGHT_NAMES)
    return mse


def backward(m: ModelParams, inputs: np.ndarray, targets: np.ndarray,
             l2_coeff: float = 0.0):
    """Gradients of `loss` w.r.t. every parameter; returns (loss, grads)."""
    p = m.params
    out, (caches, h_last, pre_d, d) = forward(m, inputs, return_cache=True)
    B = inputs.shape[0]
    diff = out - targets
    value = float(np.mean(diff ** 2))
    g = {k: np.zeros_like(v) for k, v in p.items()}
    dout = 2.0 * diff / diff.size
    g["W_o"] = dout.T @ d
    g["b_o"] = dout.sum(axis=0)
    dd = dout @ p["W_o"]
    dpre = dd * (pre_d > 0)
    g["W_d"] = dpre.T @ h_last
    g["b_d"] = dpre.sum(axis=0)
    dh = dpre @ p["W_d"]
    for cache in reversed(caches):
        x_t, h_prev, z, r, rh, hh = cache
        dz = dh * (hh - h_prev)
        dhh = dh * z
        dh_prev = dh * (1.0 - z)
        da_h = dhh * (1.0 - hh ** 2)
        g["W_h"] += da_h.T @ x_t
        g["U_h"] += da_h.T @ rh
        g["b_h"] += da_h.sum(axis=0)
        drh = da_h @ p["U_h"]
        dr = drh * h_prev
        dh_prev += drh * r
        da_z = dz * z * (1.0 - z)
        g["W_z"] += da_z.T @ x_t
        g["U_z"] += da_z.T @ h_prev
        g["b_z"] += da_z.sum(axis=0)
        dh_prev += da_z @ p["U_z"]
        da_r = dr * r * (1.0 - r)
        g["W_r"] += da_r.T @ x_t
        g["U_r"] += da_r.T @ h_prev
        g["b_r"] += da_r.sum(axis=0)
        dh_prev += da_r @ p["U_r"]
        dh = dh_prev
    if l2_coeff:
        value += l2_coeff * sum(float(np.sum(p[k] ** 2)) for k in WEIGHT_NAMES)
        for k in WEIGHT_NAMES:
            g[k] += 2.0 * l2_coeff * p[k]
    return value, g


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """Bias-corrected Adam update, in place."""
    if not state.m:
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for k, gk in grads.items():
        state.m[k] = b1 * state.m[k] + (1 - b1) * gk
        state.v[k] = b2 * state.v[k] + (1 - b2) * gk ** 2
        m_hat = state.m[k] / (1 - b1 ** t)
        v_hat = state.v[k] / (1 - b2 ** t)
        params[k] -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def train(inputs: np.ndarray, targets: np.ndarray, n_lambda: int,
          config: TrainConfig | None = None):
    """Mini-batch Adam with early stopping on validation MSE.

    inputs: (N, K, F) raw iterate features; targets: (N, out) raw converged
    values.  Normalization statistics are fit on the training split and
    stored with the model.  Returns (model, in_norm, out_norm, history)
    where history rows are (epoch, train_loss, val_loss).
    """
    config = config or TrainConfig()
    n = inputs.shape[0]
    if n == 0:
        raise ModelError("empty dataset")
    if n < config.batch_size:
        raise ModelError(
            f"dataset of {n} samples is smaller than one batch "
            f"({config.batch_size})")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * config.validation_fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    in_norm = Normalizer.fit(inputs[train_idx])
    out_norm = Normalizer.fit(targets[train_idx])
    x_tr = in_norm.transform(inputs[train_idx])
    y_tr = out_norm.transform(targets[train_idx])
    x_va = in_norm.transform(inputs[val_idx])
    y_va = out_norm.transform(targets[val_idx])

    model = ModelParams.init(inputs.shape[2], targets.shape[1], n_lambda,
                             hidden=config.hidden, dense=config.dense, rng=rng)
    opt = AdamState(learning_rate=config.learning_rate)
    best = model.copy()
    best_val = np.inf
    stagnant = 0
    history = []
    n_tr = train_idx.size
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_tr)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n_tr, config.batch_size):
            sel = order[start:start + config.batch_size]
            value, grads = backward(model, x_tr[sel], y_tr[sel],
                                    config.l2_coeff)
            adam_step(model.params, grads, opt)
            epoch_loss += value
            batches += 1
        val = loss(model, x_va, y_va)
        history.append((epoch, epoch_loss / batches, val))
        if val < best_val - 1e-12:
            best_val = val
            best = model.copy()
            stagnant = 0
        else:
            stagnant += 1
            if stagnant > config.patience:
                break
    return best, in_norm, out_norm, history


# ---------------------------------------------------------------------------
# persistence

@dataclass
class TrainedModel:
    model: ModelParams
    in_norm: Normalizer
    out_norm: Normalizer
    window: int              # K, number of input iterations
    fingerprint: str         # consensus layout fingerprint

    def predict(self, seq: np.ndarray) -> np.ndarray:
        """Raw iterate window (K, F) -> denormalized converged prediction."""
        if seq.shape[0] != self.window:
            raise ModelError(
                f"expected a window of {self.window} iterations, got {seq.shape[0]}")
        return self.out_norm.inverse(forward(self.model, self.in_norm.transform(seq)))


def save_model(path, trained: TrainedModel):
    meta = {
        "version": MODEL_FORMAT_VERSION,
        "window": trained.window,
        "fingerprint": trained.fingerprint,
        "n_features": trained.model.n_features,
        "n_outputs": trained.model.n_outputs,
        "n_lambda": trained.model.n_lambda,
    }
    arrays = {f"param_{k}": v for k, v in trained.model.params.items()}
    arrays.update(in_mean=trained.in_norm.mean, in_std=trained.in_norm.std,
                  out_mean=trained.out_norm.mean, out_std=trained.out_norm.std,
                  meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path, expected_fingerprint: str | None = None) -> TrainedModel:
    try:
        data = np.load(path)
        meta = json.loads(bytes(data["meta"]))
    except Exception as exc:
        raise ModelError(f"cannot read model file {path}: {exc}") from exc
    if meta.get("version") != MODEL_FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {meta.get('version')}")
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise ModelError(
            "model was trained for a different consensus layout "
            f"({meta['fingerprint']} != {expected_fingerprint})")
    params = {k[len("param_"):]: data[k] for k in data.files
              if k.startswith("param_")}
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise ModelError(f"model file missing parameters: {sorted(missing)}")
    model = ModelParams(params, meta["n_features"], meta["n_outputs"],
                        meta["n_lambda"])
    return TrainedModel(model,
                        Normalizer(data["in_mean"], data["in_std"]),
                        Normalizer(data["out_mean"], data["out_std"]),
                        meta["window"], meta["fingerprint"])


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e},{tr:.17g},{va:.17g}" for e, tr, va in history]
    return "\n".join(lines) + "\n"
