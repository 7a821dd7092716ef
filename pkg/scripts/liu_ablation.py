"""Train with and without the shockwave estimate as an input feature and compare test errors."""

import argparse

import pandas as pd

from gdlqueue.dataset import ablate_liu_feature, split_dataset
from gdlqueue.model import ModelConfig
from gdlqueue.network import build_grid_network
from gdlqueue.pipeline import DataGenConfig, dataset_from_outputs, network_adjacency, simulate_batch
from gdlqueue.training import TrainConfig, evaluate, liu_windows, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sims", type=int, default=30)
    ap.add_argument("--duration", type=int, default=600)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="liu_ablation.csv")
    a = ap.parse_args()

    net = build_grid_network(2, 2, 300.0, 1, 122.0)
    A = network_adjacency(net)
    ds = dataset_from_outputs(net, simulate_batch(net, DataGenConfig(n_sims=a.sims, duration=a.duration,
                                                                     workers=a.workers)))
    rows = []
    for name, data in (("8 features", ds), ("7 features", ablate_liu_feature(ds))):
        tr, va, te = split_dataset(data)
        res = train(ModelConfig(in_features=data.X.shape[-1]), tr, va, A, TrainConfig(epochs=a.epochs))
        rep = evaluate(res.predictor.predict(te.X, A), te, liu_windows(te), res.predictor.train_max_nveh)
        rows.append({"inputs": name, "dl_mae": rep.network_mae_dl, "dl_mad": rep.mad_dl,
                     "liu_mae": rep.network_mae_liu, "nveh_mae": rep.network_mae_nveh,
                     "best_epoch": res.best_epoch})
    df = pd.DataFrame(rows)
    df.to_csv(a.out, index=False)
    print(df.round(2).to_string(index=False))


if __name__ == "__main__":
    main()
