"""Short HCVRP training run that prints the held-out greedy objective per epoch.

    python demos/train_small.py --epochs 10 --out runs/small
"""
import argparse

from parallel_ar.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--instances", type=int, default=640, help="instances per epoch")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = TrainConfig(epochs=args.epochs, instances_per_epoch=args.instances, seed=args.seed)
    log = lambda row: print(f"epoch {row['epoch']:3d}  reward {float(row['mean_reward']):8.4f}  "
                            f"conflicts {float(row['conflict_rate']):.3f}  "
                            f"eval {float(row['eval_objective']):.4f}", flush=True)
    res = train(cfg, out_dir=args.out, log=log)
    print(f"untrained eval {res.initial_eval:.4f} -> trained {float(res.metrics[-1]['eval_objective']):.4f}")


if __name__ == "__main__":
    main()
