"""Training loop, checkpoints and evaluation against the Liu estimator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import LIU_FEATURE, Dataset, Scaler, window_means
from .metrics import ErrorMetrics, error_metrics, mad
from .model import ModelConfig, ModelParams, init_model, model_forward, model_from_params, model_loss_and_grads
from .nn.optim import OptState, optimizer_step
from .nn.params import ParamSet


class DivergenceDetected(RuntimeError):
    def __init__(self, message: str, checkpoint: ParamSet | None = None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    l2: float = 1e-4
    dropout: float = 0.2
    optimizer: str = "adam"
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    arrival_rate_range: tuple[float, float] = (0.2, 0.6)  # veh/s, for data generation

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")
        if self.learning_rate < 0 or self.l2 < 0:
            raise ValueError("learning rate and L2 strength must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Predictor:
    """A model plus the input and target scaling it was trained with."""

    model: ModelParams
    x_scaler: Scaler
    y_scaler: Scaler
    features: tuple[str, ...]
    train_max_nveh: float = 0.0

    def predict(self, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        Z = model_forward(self.model, self.x_scaler.transform(X), A)
        return self.y_scaler.inverse(Z)

    def save(self, path, history=None) -> None:
        extra = {
            "model_config": asdict(self.model.config),
            "x_scaler": self.x_scaler.to_dict(),
            "y_scaler": self.y_scaler.to_dict(),
            "features": list(self.features),
            "train_max_nveh": self.train_max_nveh,
            "history": history or [],
        }
        self.model.params.save(path, extra)

    @classmethod
    def load(cls, path) -> tuple["Predictor", list]:
        ps, extra = ParamSet.load(path)
        model = model_from_params(ModelConfig(**extra["model_config"]), ps)
        p = cls(model, Scaler.from_dict(extra["x_scaler"]), Scaler.from_dict(extra["y_scaler"]),
                tuple(extra["features"]), float(extra["train_max_nveh"]))
        return p, extra.get("history", [])


@dataclass
class TrainResult:
    predictor: Predictor
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _val_loss(m: ModelParams, X: np.ndarray, Y: np.ndarray, A) -> float:
    if len(X) == 0:
        return float("nan")
    return float(np.mean((model_forward(m, X, A) - Y) ** 2))


def train(
    model: ModelParams | ModelConfig | None,
    train_set: Dataset,
    val_set: Dataset,
    A: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    log=None,
) -> TrainResult:
    """One simulation per gradient step, cycled in a seeded order each epoch.

    The parameters with the lowest validation loss are kept. ``train_loss`` in
    the history is the mean step loss of the epoch (MSE on standardized targets
    plus the L2 term).
    """
    if train_set.X.shape[2] != A.shape[0] or val_set.X.shape[2:] != train_set.X.shape[2:]:
        raise ValueError("datasets and adjacency disagree on lanes or features")
    if model is None or isinstance(model, ModelConfig):
        config = model or ModelConfig(in_features=train_set.X.shape[-1])
        model = init_model(config, cfg.seed)
    if model.config.in_features != train_set.X.shape[-1]:
        raise ValueError("model input width does not match the dataset features")
    rng = np.random.default_rng(cfg.seed)
    xs, ys = Scaler.fit(train_set.X), Scaler.fit(train_set.Y)
    Xtr, Ytr = xs.transform(train_set.X), ys.transform(train_set.Y)
    Xva, Yva = xs.transform(val_set.X), ys.transform(val_set.Y)
    state = OptState(cfg.optimizer, cfg.learning_rate)
    best = (math.inf, model.params.copy(), 0)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for i in rng.permutation(len(Xtr)):
            loss, grads = model_loss_and_grads(model, Xtr[i], Ytr[i], A, cfg.l2, cfg.dropout, rng)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                model.params.load_values(best[1])
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}", best[1], history)
            optimizer_step(model.params, grads, state)
            losses.append(loss)
        val = _val_loss(model, Xva, Yva, A)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val})
        if log:
            log(history[-1])
        score = val if math.isfinite(val) else history[-1]["train_loss"]
        if score < best[0]:
            best = (score, model.params.copy(), epoch)
    model.params.load_values(best[1])
    nveh = float(train_set.Y[..., 1].max()) if train_set.Y.size else 0.0
    pred = Predictor(model, xs, ys, train_set.features, nveh)
    return TrainResult(pred, history, best[2])


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    lanes: list[str]
    dl_queue: list[ErrorMetrics]
    liu_queue: list[ErrorMetrics]
    dl_nveh: list[ErrorMetrics]
    instability_count: int
    unstable_lanes: list[str] = field(default_factory=list)

    @staticmethod
    def _mean(values) -> float:
        v = np.asarray(values, dtype=float)
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else float("nan")

    @property
    def network_mae_dl(self) -> float:
        return self._mean([m.mae for m in self.dl_queue])

    @property
    def network_mae_liu(self) -> float:
        return self._mean([m.mae for m in self.liu_queue])

    @property
    def network_mape_dl(self) -> float:
        return self._mean([m.mape for m in self.dl_queue])

    @property
    def network_mape_liu(self) -> float:
        return self._mean([m.mape for m in self.liu_queue])

    @property
    def network_mae_nveh(self) -> float:
        return self._mean([m.mae for m in self.dl_nveh])

    @property
    def mad_dl(self) -> float:
        return mad([m.mae for m in self.dl_queue])

    @property
    def mad_liu(self) -> float:
        return mad([m.mae for m in self.liu_queue])

    @property
    def mad_nveh(self) -> float:
        return mad([m.mae for m in self.dl_nveh])

    def comparison(self) -> list[dict]:
        rows = []
        for lane, d, l, n in zip(self.lanes, self.dl_queue, self.liu_queue, self.dl_nveh):
            rows.append({
                "lane": lane,
                "dl_mape": d.mape, "dl_mae": d.mae,
                "liu_mape": l.mape, "liu_mae": l.mae,
                "nveh_mape": n.mape, "nveh_mae": n.mae,
            })
        return rows

    def to_dict(self) -> dict:
        return {
            "network": {
                "dl_queue_mae": self.network_mae_dl,
                "liu_queue_mae": self.network_mae_liu,
                "dl_queue_mape": self.network_mape_dl,
                "liu_queue_mape": self.network_mape_liu,
                "dl_nveh_mae": self.network_mae_nveh,
                "dl_queue_mad": self.mad_dl,
                "liu_queue_mad": self.mad_liu,
                "dl_nveh_mad": self.mad_nveh,
            },
            "instability_count": self.instability_count,
            "unstable_lanes": self.unstable_lanes,
            "lanes": self.comparison(),
        }

    def save(self, path) -> None:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x

        Path(path).write_text(json.dumps(clean(self.to_dict()), indent=1))


def liu_windows(ds: Dataset) -> np.ndarray:
    """Window-mean Liu estimate (sims, T, N), from the kept 1 Hz series when present."""
    T = ds.X.shape[1]
    if ds.liu_1hz is not None:
        return np.moveaxis(window_means(ds.liu_1hz, ds.window), -1, 1)[:, :T]
    if "liuEstimate" in ds.features:
        return ds.X[..., LIU_FEATURE]
    raise ValueError("dataset carries no Liu estimates")


def approach_lanes(ds: Dataset) -> list[int]:
    """Lanes with a signal phase (tls feature below 1 somewhere)."""
    tls = ds.features.index("tlsGreen")
    return [i for i in range(ds.X.shape[2]) if (ds.X[..., i, tls] < 1).any()]


def evaluate(
    predictions: np.ndarray, test_set: Dataset, liu: np.ndarray | None = None,
    train_max_nveh: float | None = None,
) -> EvalReport:
    """Per-lane errors of DL predictions (sims, T, N, 2) and of the Liu series (sims, T, N).

    Queue errors are taken over signalised approach lanes; the same lanes are
    used for the vehicle-count target and the instability count.
    """
    pred = np.asarray(predictions, dtype=float)
    if pred.shape != test_set.Y.shape:
        raise ValueError(f"predictions {pred.shape} vs targets {test_set.Y.shape}")
    liu = liu_windows(test_set) if liu is None else np.asarray(liu, dtype=float)
    lanes = approach_lanes(test_set)
    cap = None if train_max_nveh is None else 1.5 * train_max_nveh
    dl_q, liu_q, dl_n, unstable = [], [], [], []
    for lane in lanes:
        truth = test_set.Y[:, :, lane, 0]
        dl_q.append(error_metrics(truth, pred[:, :, lane, 0]))
        liu_q.append(error_metrics(truth, liu[:, :, lane]))
        dl_n.append(error_metrics(test_set.Y[:, :, lane, 1], pred[:, :, lane, 1]))
        nveh = pred[:, :, lane, 1]
        if (nveh < 0).any() or (cap is not None and (nveh > cap).any()):
            unstable.append(test_set.lane_ids[lane])
    return EvalReport(
        [test_set.lane_ids[i] for i in lanes], dl_q, liu_q, dl_n, len(unstable), unstable
    )


def save_plot_rows(path, predictions: np.ndarray, test_set: Dataset, liu: np.ndarray | None = None) -> None:
    """Long-format CSV of truth, DL and Liu per run, window and approach lane."""
    liu = liu_windows(test_set) if liu is None else liu
    rows = []
    for s in range(test_set.n_sims):
        run = test_set.runs[s] if test_set.runs else str(s)
        for lane in approach_lanes(test_set):
            for t in range(test_set.Y.shape[1]):
                rows.append((run, t * test_set.window, test_set.lane_ids[lane],
                             test_set.Y[s, t, lane, 0], predictions[s, t, lane, 0], liu[s, t, lane],
                             test_set.Y[s, t, lane, 1], predictions[s, t, lane, 1]))
    pd.DataFrame(rows, columns=["run", "time", "lane", "queue_true", "queue_dl", "queue_liu",
                                "nveh_true", "nveh_dl"]).to_csv(path, index=False)
