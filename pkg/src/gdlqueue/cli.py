"""Command-line entry point: ``gdlqueue <command> ...``.

Errors are reported as one JSON object on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import (
    Dataset, ablate_liu_feature, build_design_tensors, liu_interpolate, read_liu_csv, run_dirs,
    split_dataset,
)
from .liu import LiuConfig, estimate_output, save_estimates_csv
from .model import ModelConfig
from .network import RoadNetwork, adjacency_matrix, build_grid_network, lane_graph, save_adjacency_csv
from .sim import SimParams, load_output, run_simulation, save_output
from .training import Predictor, TrainConfig, evaluate, liu_windows, save_plot_rows, train

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _network_for_run(run_dir: Path) -> RoadNetwork | None:
    net = run_dir / "net.json"
    return RoadNetwork.load(net) if net.exists() else None


def cmd_gen_net(a) -> dict:
    net = build_grid_network(a.rows, a.cols, a.lane_len, a.lanes_per_dir, a.detector_distance)
    net.save(a.out)
    adj = Path(a.out).with_suffix(".adjacency.csv")
    save_adjacency_csv(adjacency_matrix(lane_graph(net)), adj, net.lane_ids)
    return {"out": a.out, "lanes": len(net.lane_ids), "adjacency": str(adj)}


def cmd_simulate(a) -> dict:
    net = RoadNetwork.load(a.net)
    params = SimParams(lane_changing=a.lane_changing)
    out = run_simulation(net, a.tls, a.rate, a.duration, a.seed, params, green=a.green)
    d = save_output(out, a.out)
    net.save(d / "net.json")  # keep the geometry next to the run
    return {"out": str(d), "entered": out.entered, "exited": out.exited}


def _liu_cfg(a, net: RoadNetwork | None) -> LiuConfig:
    variant = {"c": "C", "cprime": "C'"}[a.variant]
    short = {"io": "inputOutput", "expansion": "expansionOnStopBar"}[a.short_queue]
    ld = net.detector_distance if net is not None else a.detector_distance
    return LiuConfig(detector_distance=ld, jam_density=SimParams().jam_density,
                     c_variant=variant, short_queue_method=short, long_queue_model=a.model)


def cmd_liu(a) -> dict:
    run = Path(a.run)
    out = load_output(run)
    cfg = _liu_cfg(a, _network_for_run(run))
    results = estimate_output(out, cfg)
    save_estimates_csv(results, a.out)
    return {"out": a.out, "lanes": len(results)}


def cmd_dataset(a) -> dict:
    outputs, knots, names = [], [], []
    for d in run_dirs(a.runs):
        out = load_output(d)
        liu_csv = Path(a.liu) / f"{d.name}.csv"
        if not liu_csv.exists():
            raise FileNotFoundError(f"missing Liu estimates {liu_csv}")
        outputs.append(out)
        knots.append(read_liu_csv(liu_csv, out.lane_ids))
        names.append(d.name)
    ds = build_design_tensors(outputs, knots, a.window, runs=names)
    ds.save(a.out)
    return {"out": a.out, "X": list(ds.X.shape), "Y": list(ds.Y.shape)}


def _adjacency_for(ds: Dataset, path: str | None, runs: str | None) -> np.ndarray:
    if path:
        A = pd.read_csv(path, index_col=0).to_numpy(dtype=float)
    else:
        net_file = None
        for root in filter(None, [runs]):
            for d in run_dirs(root):
                if (d / "net.json").exists():
                    net_file = d / "net.json"
                    break
        if net_file is None:
            raise FileNotFoundError("no adjacency: pass --adjacency or --runs with a saved net.json")
        A = adjacency_matrix(lane_graph(RoadNetwork.load(net_file)))
    if A.shape != (len(ds.lane_ids),) * 2:
        raise ValueError(f"adjacency {A.shape} does not match {len(ds.lane_ids)} lanes")
    return A


def cmd_train(a) -> dict:
    ds = Dataset.load(a.data)
    A = _adjacency_for(ds, a.adjacency, a.runs)
    cfg = TrainConfig(learning_rate=a.lr, epochs=a.epochs, l2=a.l2, dropout=a.dropout, seed=a.seed)
    tr, va, te = split_dataset(ds, cfg.split, cfg.seed)
    mc = ModelConfig(in_features=ds.X.shape[-1], gat_width=a.width, dense_width=a.width, hidden=a.width)
    log = (lambda h: print(json.dumps(h), file=sys.stderr)) if a.verbose else None
    res = train(mc, tr, va, A, cfg, log)
    res.predictor.save(a.out, res.history)
    return {"out": a.out, "best_epoch": res.best_epoch, "history": res.history[-1],
            "test_runs": te.runs}


def cmd_eval(a) -> dict:
    pred, _ = Predictor.load(a.model)
    ds = Dataset.load(a.data)
    if ds.features != pred.features:
        raise ValueError("dataset features do not match the checkpoint")
    if a.all_runs:
        test = ds
    else:
        _, _, test = split_dataset(ds, (0.8, 0.1, 0.1), a.seed)
    if a.liu:
        # re-read estimates so a different Liu configuration can be compared
        liu_1hz = []
        dur = test.liu_1hz.shape[-1] if test.liu_1hz is not None else test.X.shape[1] * test.window
        for run in test.runs:
            knots = read_liu_csv(Path(a.liu) / f"{run}.csv", test.lane_ids)
            liu_1hz.append([liu_interpolate(knots.get(i, []), dur).values for i in range(len(test.lane_ids))])
        test.liu_1hz = np.asarray(liu_1hz)
    A = _adjacency_for(test, a.adjacency, a.runs)
    Yhat = pred.predict(test.X, A)
    report = evaluate(Yhat, test, liu_windows(test), pred.train_max_nveh)
    report.save(a.report)
    if a.plots:
        save_plot_rows(a.plots, Yhat, test)
    return {"report": a.report, **{k: v for k, v in report.to_dict()["network"].items()}}


def cmd_ablate(a) -> dict:
    if not a.drop_liu:
        raise ValueError("nothing to ablate: pass --drop-liu")
    ds = ablate_liu_feature(Dataset.load(a.data))
    ds.save(a.out)
    return {"out": a.out, "features": list(ds.features)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdlqueue", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-net", help="build a grid network")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--cols", type=int, required=True)
    s.add_argument("--lane-len", type=float, required=True)
    s.add_argument("--lanes-per-dir", type=int, required=True)
    s.add_argument("--detector-distance", type=float, default=122.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_net)

    s = sub.add_parser("simulate", help="run the microscopic simulator")
    s.add_argument("--net", required=True)
    s.add_argument("--rate", type=float, required=True)
    s.add_argument("--duration", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tls", choices=("simplified", "realistic"), default="simplified")
    s.add_argument("--green", type=float, default=30.0)
    s.add_argument("--lane-changing", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("liu", help="shockwave queue estimates for one run")
    s.add_argument("--run", required=True)
    s.add_argument("--variant", choices=("c", "cprime"), default="cprime")
    s.add_argument("--short-queue", choices=("io", "expansion"), default="io")
    s.add_argument("--model", choices=("expansion", "basic"), default="expansion")
    s.add_argument("--detector-distance", type=float, default=122.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_liu)

    s = sub.add_parser("dataset", help="window-averaged design and target tensors")
    s.add_argument("--runs", required=True)
    s.add_argument("--liu", required=True)
    s.add_argument("--window", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dataset)

    s = sub.add_parser("train", help="train the graph model")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--l2", type=float, default=1e-4)
    s.add_argument("--dropout", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--adjacency")
    s.add_argument("--runs")
    s.add_argument("--verbose", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="compare model and Liu estimates on held-out runs")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--liu")
    s.add_argument("--report", required=True)
    s.add_argument("--plots")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--all-runs", action="store_true")
    s.add_argument("--adjacency")
    s.add_argument("--runs")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="drop the Liu input feature")
    s.add_argument("--data", required=True)
    s.add_argument("--drop-liu", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        print(json.dumps({"error": "UsageError", "message": "invalid arguments"}), file=sys.stderr)
        return EXIT_USAGE
    try:
        result = args.fn(args)
    except Exception as exc:  # every failure becomes a JSON error record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
