"""Divergence against accuracy: DPO at a small learning rate, RRPO at 10x.

Builds one toy world (SFT base, self-generated pairs, held-out tasks), aligns
it both ways and prints how far each model drifted from the base.

    python demos/tradeoff.py --seed 0
"""

import argparse

from rrpo.experiments import ExperimentSetup, build_world, tradeoff_run


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=500)
    args = p.parse_args()

    world = build_world(ExperimentSetup(seed=args.seed))
    print(f"pairs: {world.summary}")
    r = tradeoff_run(args.seed, steps=args.steps, world=world)
    print(f"base accuracy  {r.acc_base:.3f}")
    print(f"dpo   lr 1e-3  kl {r.kl_dpo:.4f}  accuracy {r.acc_dpo:.3f}")
    print(f"rrpo  lr 1e-2  kl {r.kl_rrpo:.4f}  accuracy {r.acc_rrpo:.3f}")
    print(f"kl ratio {r.kl_ratio:.2f}")


if __name__ == "__main__":
    main()
