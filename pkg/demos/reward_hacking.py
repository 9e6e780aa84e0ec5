"""What the token-wise KL term buys: rank-only training against full RRPO.

With alpha = 0 the model is free to push up the differing phrases while the
rest of the preferred response loses probability. Printed drops are the mean
loss of log-probability (nats) on held-out preferred responses.

    python demos/reward_hacking.py --seed 1
"""

import argparse

from rrpo.experiments import ExperimentSetup, build_world, hacking_run


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    r = hacking_run(args.seed, world=build_world(ExperimentSetup(seed=args.seed)))
    print(f"rank-only  drop {r.drop_rank_only:8.3f}  tkl {r.tkl_rank_only:.3f}")
    print(f"full rrpo  drop {r.drop_full:8.3f}  tkl {r.tkl_full:.3f}")


if __name__ == "__main__":
    main()
