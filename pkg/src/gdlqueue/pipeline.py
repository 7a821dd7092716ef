"""End-to-end helpers: batches of simulations, their Liu estimates and datasets."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dataset import Dataset, build_design_tensors, ground_truth_mode, liu_points
from .liu import LiuConfig, estimate_output
from .network import RoadNetwork, adjacency_matrix, lane_graph
from .sim import SimParams, SimulationOutput, cycle_ground_truth, run_simulation


@dataclass(frozen=True)
class DataGenConfig:
    n_sims: int = 10
    duration: int = 600
    tls_mode: str = "realistic"
    rate_range: tuple[float, float] = (0.2, 0.6)
    seed: int = 0
    lane_changing: bool = True
    workers: int = 1  # processes for the independent runs


def liu_config_for(network: RoadNetwork, **overrides) -> LiuConfig:
    """Estimator settings matching the network's detector placement and vehicle length."""
    base = LiuConfig(detector_distance=network.detector_distance,
                     jam_density=SimParams().jam_density)
    return replace(base, **overrides)


def liu_knots(out: SimulationOutput, cfg: LiuConfig) -> dict[int, list[tuple[float, float]]]:
    return {lane: liu_points(res) for lane, res in estimate_output(out, cfg).items()}


def simulate_batch(network: RoadNetwork, gen: DataGenConfig) -> list[SimulationOutput]:
    """Runs with arrival rates drawn uniformly from ``gen.rate_range``; run k uses seed ``seed + k``."""
    rng = np.random.default_rng(gen.seed)
    rates = rng.uniform(*gen.rate_range, size=gen.n_sims)
    params = SimParams(lane_changing=gen.lane_changing)
    jobs = [(network, gen.tls_mode, float(r), gen.duration, gen.seed + k, params) for k, r in enumerate(rates)]
    if gen.workers <= 1:
        return [run_simulation(*job) for job in jobs]
    with ProcessPoolExecutor(gen.workers) as pool:
        return list(pool.map(run_simulation, *zip(*jobs)))


def dataset_from_outputs(
    network: RoadNetwork, outputs: Sequence[SimulationOutput], window: int = 10,
    liu_cfg: LiuConfig | None = None,
) -> Dataset:
    cfg = liu_cfg or liu_config_for(network)
    knots = [liu_knots(o, cfg) for o in outputs]
    return build_design_tensors(outputs, knots, window, runs=[f"run{k:03d}" for k in range(len(outputs))])


def network_adjacency(network: RoadNetwork) -> np.ndarray:
    return adjacency_matrix(lane_graph(network))


@dataclass
class CyclePairs:
    """Per-cycle (truth, estimate) pairs of one lane, in metres."""

    lane: int
    truth: np.ndarray
    estimate: np.ndarray
    methods: list[str]


def cycle_pairs(out: SimulationOutput, cfg: LiuConfig, truth_mode: str | None = None,
                lanes: Sequence[int] | None = None) -> list[CyclePairs]:
    """Liu L_max next to the simulator's per-cycle ground truth for every approach lane."""
    mode = truth_mode or ground_truth_mode(out)
    result = []
    for lane, res in estimate_output(out, cfg, lanes).items():
        truth = dict(zip((c[1] for c in out.cycles(lane)), (v for _, v in cycle_ground_truth(out, lane, mode))))
        pairs = [(truth[o.green_start], e.L_max, e.method)
                 for o, e in zip(res.observations, res.estimates) if o.green_start in truth]
        t, e, m = zip(*pairs) if pairs else ((), (), ())
        result.append(CyclePairs(lane, np.asarray(t, float), np.asarray(e, float), list(m)))
    return result
