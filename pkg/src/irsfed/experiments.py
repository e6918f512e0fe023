"""Desk-scale comparison of centralized and federated training.

One call to :func:`desk_trial` generates a dataset, trains the CNN under
each requested regime, and scores every model on fresh test channels next
to the LS and LMMSE baselines.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

from irsfed.acquisition import generate_dataset
from irsfed.cli import evaluate
from irsfed.config import ExperimentConfig
from irsfed.errors import NumericFailure
from irsfed.federation import train
from irsfed.nn import CNN

DESK = ExperimentConfig(
    rounds=200,
    learning_rate=1e-4,
    local_batch=32,
    trials=100,
    test_snr_grid=(0.0, 10.0, 20.0),
    test_m_bar_grid=(8,),
)

# name -> overrides applied to the base config for that training run
REGIMES = {
    "cl": dict(mode="centralized", rounds=20),
    "fl": dict(mode="federated"),
    "fl_5db": dict(mode="federated", snr_theta_db=5.0, snr_convention="per_coordinate"),
}


@dataclass
class TrialResult:
    seed: int
    nmse: dict[str, dict[float, float]] = field(default_factory=dict)  # method -> snr -> NMSE
    diverged: dict[str, int] = field(default_factory=dict)  # regime -> round of failure
    seconds: dict[str, float] = field(default_factory=dict)


def desk_trial(seed: int, base: ExperimentConfig = DESK, regimes: dict[str, dict] | None = None) -> TrialResult:
    """Train every regime on one dataset and evaluate at the base pilot count.

    A regime whose training diverges gets NMSE ``inf`` at every SNR and its
    failing round recorded in ``diverged``.
    """
    regimes = REGIMES if regimes is None else regimes
    base = base.with_overrides(seed=seed)
    ds = generate_dataset(base.geometry, base.pilots, base.switch, base.snr_levels, base.n_realizations, base.g_reps, seed)
    out = TrialResult(seed)
    baselines_done = False
    for name, overrides in regimes.items():
        cfg = base.with_overrides(**overrides)
        net = CNN(cfg.network_spec())
        start = time.perf_counter()
        try:
            theta = train(ds, net, cfg.train).theta
        except NumericFailure as exc:
            out.diverged[name] = exc.round_index
            out.nmse[name] = {snr: math.inf for snr in cfg.test_snr_grid}
            continue
        finally:
            out.seconds[name] = time.perf_counter() - start
        for snr, m_bar, rep in evaluate(cfg, ds, net, theta):
            if rep.method == "cnn":
                out.nmse.setdefault(name, {})[snr] = rep.nmse
            elif not baselines_done and m_bar == cfg.m_bar:
                out.nmse.setdefault(rep.method, {})[snr] = rep.nmse
        baselines_done = True
    return out
