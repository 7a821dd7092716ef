"""Train the graph model on simulated runs and compare it with the shockwave estimator."""

import argparse
import json

from gdlqueue.dataset import split_dataset
from gdlqueue.model import ModelConfig
from gdlqueue.network import build_grid_network
from gdlqueue.pipeline import DataGenConfig, dataset_from_outputs, network_adjacency, simulate_batch
from gdlqueue.training import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sims", type=int, default=30)
    ap.add_argument("--duration", type=int, default=600)
    ap.add_argument("--lanes-per-dir", type=int, default=1)
    ap.add_argument("--tls", default="realistic")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--report", default="dl_vs_liu.json")
    a = ap.parse_args()

    net = build_grid_network(2, 2, 300.0, a.lanes_per_dir, 122.0)
    outs = simulate_batch(net, DataGenConfig(n_sims=a.sims, duration=a.duration, tls_mode=a.tls,
                                             seed=a.seed, workers=a.workers))
    ds = dataset_from_outputs(net, outs)
    A = network_adjacency(net)
    tr, va, te = split_dataset(ds, seed=a.seed)
    res = train(ModelConfig(), tr, va, A, TrainConfig(epochs=a.epochs, seed=a.seed),
                log=lambda h: print(json.dumps(h), flush=True))
    rep = evaluate(res.predictor.predict(te.X, A), te, train_max_nveh=res.predictor.train_max_nveh)
    rep.save(a.report)
    print(json.dumps(rep.to_dict()["network"], indent=1))


if __name__ == "__main__":
    main()
