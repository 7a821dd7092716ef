"""Design and target tensors from simulation runs, splits and feature scaling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .liu import LaneEstimates
from .metrics import LengthMismatch
from .sim import SimulationOutput, cycle_ground_truth

FEATURES = (
    "stopCount", "stopOccupancy", "stopSpeed",
    "advCount", "advOccupancy", "advSpeed",
    "tlsGreen", "liuEstimate",
)
TARGETS = ("maxQueueLengthMeters", "nVehSeen")
LIU_FEATURE = FEATURES.index("liuEstimate")


class TooFewSimulations(ValueError):
    pass


@dataclass
class Interpolated:
    values: np.ndarray
    empty: bool = False  # no knots: the series is all zeros


def liu_interpolate(points: Sequence[tuple[float, float]], duration: int) -> Interpolated:
    """Piecewise-linear 1 Hz series through ``(time, value)`` knots.

    Values before the first and after the last knot are held constant.
    """
    t = np.arange(int(duration), dtype=float)
    if len(points) == 0:
        return Interpolated(np.zeros(len(t)), empty=True)
    pts = np.asarray(points, dtype=float)
    if np.any(np.diff(pts[:, 0]) < 0):
        raise ValueError("knots must be time-ordered")
    return Interpolated(np.interp(t, pts[:, 0], pts[:, 1]))


def window_means(series: np.ndarray, window: int) -> np.ndarray:
    """Mean over consecutive ``window``-second blocks of the last axis; a ragged tail is dropped."""
    series = np.asarray(series, dtype=float)
    n = series.shape[-1] // window
    return series[..., : n * window].reshape(series.shape[:-1] + (n, window)).mean(axis=-1)


def ground_truth_mode(out: SimulationOutput) -> str:
    # started halts overcount under stop-and-go, so realistic runs use the jam maximum
    return "jam" if out.tls_mode == "realistic" else "halts"


def liu_points(est: LaneEstimates) -> list[tuple[float, float]]:
    pts = sorted((e.T_max, e.L_max) for e in est.estimates)
    return [(float(t), float(v)) for t, v in pts]


def lane_series(
    out: SimulationOutput, liu: dict[int, list[tuple[float, float]]], truth_mode: str | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """1 Hz feature (N, 8, duration) and target (N, 2, duration) streams of one run."""
    d = out.duration
    streams = [out.stop_count, out.stop_occupancy, out.stop_speed,
               out.adv_count, out.adv_occupancy, out.adv_speed, out.tls_green]
    for s in streams:
        if s.shape != (len(out.lane_ids), d):
            raise LengthMismatch(f"stream shape {s.shape} vs ({len(out.lane_ids)}, {d})")
    n = len(out.lane_ids)
    liu_series = np.zeros((n, d))
    truth = np.zeros((n, d))
    nveh = np.zeros((n, d))
    mode = truth_mode or ground_truth_mode(out)
    for lane in range(n):
        if lane in liu:
            liu_series[lane] = liu_interpolate(liu[lane], d).values
        # fringe exit lanes have no signal; they stay in the graph with zero targets
        if (out.tls_green[lane] == 0).any():
            truth[lane] = liu_interpolate(cycle_ground_truth(out, lane, mode), d).values
            nveh[lane] = out.n_veh_seen[lane]
    feats = np.stack(streams + [liu_series], axis=1)
    targets = np.stack([truth, nveh], axis=1)
    return feats, targets


@dataclass
class Dataset:
    X: np.ndarray  # sims x T x N x F
    Y: np.ndarray  # sims x T x N x 2
    lane_ids: list[str]
    features: tuple[str, ...] = FEATURES
    window: int = 10
    runs: list[str] = field(default_factory=list)
    # 1 Hz interpolated Liu series per run (sims x N x duration); kept for evaluation
    liu_1hz: np.ndarray | None = None
    truth_1hz: np.ndarray | None = None

    def __post_init__(self):
        if self.X.shape[:3] != self.Y.shape[:3]:
            raise LengthMismatch(f"X {self.X.shape} vs Y {self.Y.shape}")
        if self.X.shape[-1] != len(self.features):
            raise LengthMismatch("feature axis does not match the feature names")

    @property
    def n_sims(self) -> int:
        return self.X.shape[0]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(
            self.X[idx], self.Y[idx], self.lane_ids, self.features, self.window,
            [self.runs[i] for i in idx] if self.runs else [],
            None if self.liu_1hz is None else self.liu_1hz[idx],
            None if self.truth_1hz is None else self.truth_1hz[idx],
        )

    def save(self, path) -> None:
        extra = {}
        if self.liu_1hz is not None:
            extra["liu_1hz"] = self.liu_1hz
        if self.truth_1hz is not None:
            extra["truth_1hz"] = self.truth_1hz
        with open(path, "wb") as fh:  # file handle keeps numpy from appending ".npz"
            np.savez_compressed(
                fh, X=self.X, Y=self.Y, lane_ids=np.array(self.lane_ids),
                features=np.array(self.features), window=self.window,
                runs=np.array(self.runs, dtype=str), **extra,
            )

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(
                z["X"], z["Y"], [str(s) for s in z["lane_ids"]],
                tuple(str(s) for s in z["features"]), int(z["window"]),
                [str(s) for s in z["runs"]],
                z["liu_1hz"] if "liu_1hz" in z else None,
                z["truth_1hz"] if "truth_1hz" in z else None,
            )


def build_design_tensors(
    outputs: Sequence[SimulationOutput],
    liu: Sequence[dict[int, list[tuple[float, float]]]],
    window: int = 10,
    truth_mode: str | None = None,
    runs: Sequence[str] = (),
) -> Dataset:
    """Window-averaged (X, Y) over runs that share one network and duration.

    ``liu[k]`` maps lane index to that lane's ``(T_max, L_max)`` knots in run ``k``.
    """
    if window < 1:
        raise ValueError("window must be at least one second")
    if len(outputs) != len(liu):
        raise LengthMismatch("one Liu estimate set is needed per run")
    if not outputs:
        raise TooFewSimulations("no runs")
    ref = outputs[0]
    Xs, Ys, L1, T1 = [], [], [], []
    for out, est in zip(outputs, liu):
        if out.lane_ids != ref.lane_ids or out.duration != ref.duration:
            raise LengthMismatch("runs differ in lanes or duration")
        feats, targets = lane_series(out, est, truth_mode)
        Xs.append(np.moveaxis(window_means(feats, window), -1, 0))
        Ys.append(np.moveaxis(window_means(targets, window), -1, 0))
        L1.append(feats[:, LIU_FEATURE])
        T1.append(targets[:, 0])
    return Dataset(
        np.stack(Xs), np.stack(Ys), list(ref.lane_ids), FEATURES, window,
        list(runs) or [str(o.seed) for o in outputs], np.stack(L1), np.stack(T1),
    )


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    n_val = int(round(f[1] * n))
    n_test = int(round(f[2] * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise TooFewSimulations(f"{n} simulations cannot fill splits {tuple(f)}")
    return n_train, n_val, n_test


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    n_train, n_val, _ = split_counts(n, fractions)
    order = np.random.default_rng(seed).permutation(n).tolist()
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/validation/test sets along the simulation axis."""
    tr, va, te = split_indices(ds.n_sims, fractions, seed)
    return ds.subset(tr), ds.subset(va), ds.subset(te)


def ablate_liu_feature(ds: Dataset) -> Dataset:
    if ds.features != FEATURES:
        raise ValueError("ablation needs the full 8-feature dataset")
    keep = [i for i in range(len(FEATURES)) if i != LIU_FEATURE]
    return Dataset(
        ds.X[..., keep], ds.Y, ds.lane_ids, tuple(FEATURES[i] for i in keep), ds.window,
        ds.runs, ds.liu_1hz, ds.truth_1hz,
    )


@dataclass
class Scaler:
    """Per-feature standardization; constant features keep unit scale."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Scaler":
        flat = X.reshape(-1, X.shape[-1])
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return Z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def read_liu_csv(path, lane_ids: Sequence[str]) -> dict[int, list[tuple[float, float]]]:
    """Knots per lane index from a Liu estimate CSV (columns lane, T_max, L_max)."""
    df = pd.read_csv(path)
    index = {lid: i for i, lid in enumerate(lane_ids)}
    result: dict[int, list[tuple[float, float]]] = {}
    for lane, grp in df.groupby("lane", sort=False):
        if lane not in index:
            raise LengthMismatch(f"lane {lane} is not part of the run")
        g = grp.sort_values("T_max")
        result[index[lane]] = list(zip(g["T_max"].astype(float), g["L_max"].astype(float)))
    return result


def run_dirs(root) -> list[Path]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no simulation runs under {root}")
    return dirs
