"""End-to-end toy experiments: base model, pair data, aligned variants.

Every run is a pure function of its seed. Task ids carry a prefix per split
(``sft``, ``pair``, ``test``) so held-out tasks never overlap training data.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .datagen import PerturbConfig, build_pairs, generate_tasks
from .evaluation import accuracy, divergence, hacking_probe, make_probes, pref_loglik_drop
from .losses import LossConfig
from .rng import derive_seed
from .toylm import ToyLM, ToyModelConfig
from .trainer import TrainConfig, Trainer, pretrain


@dataclass(frozen=True)
class ExperimentSetup:
    seed: int = 0
    sft_tasks: int = 600
    sft_steps: int = 400
    sft_lr: float = 3e-3
    pair_tasks: int = 400
    test_tasks: int = 150
    model: ToyModelConfig = field(default_factory=ToyModelConfig)


@dataclass
class World:
    setup: ExperimentSetup
    base: ToyLM
    pairs: list
    held_out_pairs: list
    test: list
    probes: list
    summary: dict


def build_world(setup):
    """SFT a base model on clean tasks and build its preference data."""
    s = setup.seed
    base = ToyLM(ToyModelConfig(**{**asdict(setup.model), "seed": derive_seed(s, "init") % 2**31}))
    pretrain(base, generate_tasks(setup.sft_tasks, derive_seed(s, "sft-tasks"), prefix="sft"),
             steps=setup.sft_steps, lr=setup.sft_lr, seed=derive_seed(s, "sft"))
    pairs, summary = build_pairs(
        generate_tasks(setup.pair_tasks, derive_seed(s, "pair-tasks"), prefix="pair"),
        PerturbConfig(seed=derive_seed(s, "perturb")))
    held, _ = build_pairs(
        generate_tasks(setup.test_tasks, derive_seed(s, "held-pairs"), prefix="heldpair"),
        PerturbConfig(seed=derive_seed(s, "perturb-held")))
    test = generate_tasks(setup.test_tasks, derive_seed(s, "test-tasks"), prefix="test")
    return World(setup, base, pairs, held, test, make_probes(test), summary.as_dict())


def align(world, loss, lr, steps, batch_size=8, warmup_ratio=0.03, seed=0):
    model = world.base.copy()
    cfg = TrainConfig(loss=loss, lr_max=lr, steps=steps, batch_size=batch_size,
                      warmup_ratio=warmup_ratio, seed=seed)
    tr = Trainer(model, world.pairs, cfg)
    tr.run()
    return model, tr.metrics


@dataclass
class TradeoffResult:
    seed: int
    kl_dpo: float
    kl_rrpo: float
    acc_dpo: float
    acc_rrpo: float
    acc_base: float

    @property
    def kl_ratio(self):
        return self.kl_dpo / self.kl_rrpo

    @property
    def holds(self):
        return self.kl_ratio >= 3.0 and self.acc_rrpo >= self.acc_dpo - 0.02


TRADEOFF_DEFAULTS = dict(lr=1e-3, lr_mult=10.0, steps=500, alpha=0.5, beta=0.1)


def tradeoff_run(seed, lr=1e-3, lr_mult=10.0, steps=500, alpha=0.5, beta=0.1, world=None):
    """DPO at ``lr`` against RRPO at ``lr_mult * lr`` for the same number of steps."""
    world = world or build_world(ExperimentSetup(seed=seed))
    train_ids = {p.id for p in world.pairs}
    out = {}
    for name, loss, rate in (("dpo", LossConfig("DPO", beta=beta), lr),
                             ("rrpo", LossConfig("RRPO", alpha=alpha, beta=beta), lr * lr_mult)):
        model, _ = align(world, loss, rate, steps, seed=seed)
        out[name] = (divergence(model, world.base, world.probes),
                     accuracy(model, world.test, exclude_ids=train_ids))
    return TradeoffResult(seed, out["dpo"][0], out["rrpo"][0], out["dpo"][1], out["rrpo"][1],
                          accuracy(world.base, world.test))


@dataclass
class HackingResult:
    seed: int
    drop_rank_only: float
    drop_full: float
    tkl_rank_only: float
    tkl_full: float

    @property
    def holds(self):
        return self.drop_rank_only > self.drop_full


HACKING_DEFAULTS = dict(lr=1e-2, steps=300, alpha=0.5, beta=0.1)


def hacking_run(seed, lr=1e-2, steps=300, alpha=0.5, beta=0.1, world=None):
    """Rank-only (alpha = 0) against full RRPO from the same base and data."""
    world = world or build_world(ExperimentSetup(seed=seed))
    rank_only, _ = align(world, LossConfig("RRPO", alpha=0.0, beta=beta), lr, steps, seed=seed)
    full, _ = align(world, LossConfig("RRPO", alpha=alpha, beta=beta), lr, steps, seed=seed)
    rep = hacking_probe(rank_only, full, world.base, world.held_out_pairs)
    return HackingResult(seed, rep.drop_rank_only, rep.drop_full, rep.tkl_rank_only, rep.tkl_full)


__all__ = ["ExperimentSetup", "World", "build_world", "align", "tradeoff_run", "hacking_run",
           "TradeoffResult", "HackingResult", "pref_loglik_drop"]
