"""Command-line entry point: ``irsfed {generate,train,evaluate,overhead} --config PATH``.

Exit codes: 0 success, 2 configuration problem, 3 I/O failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys

import numpy as np

from irsfed import baselines, streams
from irsfed.acquisition import (
    Dataset,
    acquire,
    build_input,
    generate_dataset,
    label_to_sigma,
    pilot_matrix,
)
from irsfed.channel import static_bs_irs_channel, user_realization
from irsfed.config import ExperimentConfig
from irsfed.errors import ConfigDatasetConflict, ConfigError, DatasetTooLarge, DegenerateSignal, NumericFailure
from irsfed.federation import train, write_round_log
from irsfed.nn import CNN, load_checkpoint, parameter_count, save_checkpoint, storage_count

log = logging.getLogger("irsfed")

RESULT_COLUMNS = ["method", "snr_db", "m_bar", "nmse", "trials", "seed"]
OVERHEAD_COLUMNS = ["P", "storage_count", "D", "T_CL", "T_FL", "ratio"]


def config_header(cfg: ExperimentConfig) -> dict[str, str]:
    return {f"config.{line.split(' = ', 1)[0]}": line.split(" = ", 1)[1] for line in cfg.to_lines()}


def config_from_header(header: dict[str, str]) -> ExperimentConfig:
    """Recover the configuration echoed into a dataset or checkpoint header."""
    return ExperimentConfig.from_mapping({k[len("config.") :]: v for k, v in header.items() if k.startswith("config.")})


def _write_csv(path, columns, rows, cfg: ExperimentConfig):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in cfg.to_lines():
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def _load_dataset(path) -> Dataset:
    try:
        return Dataset.load(path)
    except ValueError as exc:
        raise OSError(f"unreadable dataset: {exc}") from exc


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise OSError(f"unreadable checkpoint: {exc}") from exc


def _check_dataset(cfg: ExperimentConfig, ds: Dataset):
    for key, have in (("M", ds.geometry.M), ("L", ds.geometry.L), ("K", ds.geometry.K), ("m_bar", ds.pilots.M_bar)):
        if getattr(cfg, key) != have:
            raise ConfigDatasetConflict(key, f"config says {getattr(cfg, key)}, dataset has {have}")


# -- subcommands ---------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> Dataset:
    ds = generate_dataset(
        cfg.geometry, cfg.pilots, cfg.switch, cfg.snr_levels, cfg.n_realizations, cfg.g_reps, cfg.seed, cfg.max_dataset_bytes
    )
    ds.extra = config_header(cfg)
    ds.save(cfg.dataset)
    print(f"|D| = {len(ds)}")
    for k in range(cfg.K):
        print(f"  user {k}: {ds.per_user} samples")
    return ds


def cmd_train(cfg: ExperimentConfig):
    ds = _load_dataset(cfg.dataset)
    _check_dataset(cfg, ds)
    net = CNN(cfg.network_spec())
    result = train(ds, net, cfg.train)
    extra = config_header(cfg)
    extra["dataset_seed"] = ds.seed
    save_checkpoint(cfg.checkpoint, net, result.theta, result.velocity, extra)
    write_round_log(cfg.train_log, result.records, cfg.train, cfg.to_lines(), wall_time=cfg.log_wall_time)
    last = result.records[-1]
    print(f"{cfg.mode}: {len(result.records)} rounds, final loss {last.loss:.6g}, val RMSE {last.val_rmse:.6g}")
    return net, result


def _training_covariances(ds: Dataset, val_fraction: float):
    train_idx, _ = ds.split(val_fraction)
    block = len(ds.snr_levels) * ds.g_reps  # samples per channel realization
    picks = np.concatenate([idx[(idx - idx[0]) % block == 0] for idx in train_idx])
    sigmas = label_to_sigma(np.asarray(ds.labels[picks], dtype=float), ds.geometry.M, ds.geometry.L)
    return baselines.channel_covariances(sigmas)


def evaluate(cfg: ExperimentConfig, ds: Dataset, net: CNN | None, theta, oracle: bool = False) -> list[tuple[float, int, baselines.EstimateReport]]:
    """NMSE of LS, LMMSE and the CNN over fresh test channels for every (SNR, M_bar) point."""
    geo = cfg.geometry
    H = static_bs_irs_channel(geo, ds.seed)
    R_h, R_v = _training_covariances(ds, cfg.val_fraction)
    trials = [[user_realization(geo, H, k, streams.substream(cfg.seed, streams.TEST_CHANNEL, i, k)) for k in range(geo.K)] for i in range(cfg.trials)]
    truth = np.array([[np.column_stack([r.h_bs, r.G]) for r in row] for row in trials])  # (J, K, M, L+1)
    reports = []
    for s_idx, snr in enumerate(cfg.test_snr_grid):
        snr_arg = None if snr == math.inf else snr
        for m_idx, m_bar in enumerate(cfg.test_m_bar_grid):
            S = pilot_matrix(geo.M, m_bar)
            est = {"ls": [], "mmse": []}
            inputs = []
            for i, row in enumerate(trials):
                for k, real in enumerate(row):
                    rng = streams.substream(cfg.seed, streams.TEST_MEASUREMENT, i, k, s_idx, m_idx)
                    y_d, Y_c = acquire(real, S, cfg.switch, snr_arg, rng)
                    est["ls"].append(baselines.ls_sigma(y_d, Y_c, S, cfg.eps_on))
                    est["mmse"].append(baselines.mmse_sigma(y_d, Y_c, S, R_h, R_v, snr_arg, cfg.eps_on))
                    inputs.append(build_input(y_d, Y_c))
            shape = truth.shape
            if net is not None and m_bar == net.spec.input_shape[1]:
                pred = net.predict(theta, np.asarray(inputs, dtype=np.float32))
                est["cnn"] = label_to_sigma(pred, geo.M, geo.L)
            if oracle:
                est["oracle"] = truth.reshape((-1,) + shape[2:])
            for method, values in est.items():
                terms = baselines.nmse_terms(truth.reshape((-1,) + shape[2:]), np.asarray(values)).reshape(shape[:2])
                reports.append(
                    (
                        snr,
                        m_bar,
                        baselines.EstimateReport(
                            method=method, nmse=float(terms.mean()), per_user=tuple(terms.mean(axis=0)), trials=cfg.trials
                        ),
                    )
                )
    return reports


def cmd_evaluate(cfg: ExperimentConfig, oracle: bool = False):
    ds = _load_dataset(cfg.dataset)
    _check_dataset(cfg, ds)
    net, theta, _, _ = _load_checkpoint(cfg.checkpoint)
    if net.spec != cfg.network_spec():
        raise ConfigDatasetConflict("checkpoint", f"network {net.spec} does not match config {cfg.network_spec()}")
    reports = evaluate(cfg, ds, net, theta, oracle)
    rows = [[rep.method, repr(float(snr)), m_bar, repr(rep.nmse), rep.trials, cfg.seed] for snr, m_bar, rep in reports]
    _write_csv(cfg.results, RESULT_COLUMNS, rows, cfg)
    for row in rows:
        print(f"{row[0]:>6}  snr={float(row[1]):6.1f} dB  m_bar={row[2]:3d}  nmse={float(row[3]):.4e}")
    return reports


def overhead(cfg: ExperimentConfig) -> dict[str, float]:
    spec = cfg.network_spec()
    P = parameter_count(spec)
    D = cfg.n_samples
    t_cl = baselines.overhead_cl(cfg.m_bar, cfg.M, cfg.L, D)
    t_fl = baselines.overhead_fl(P, cfg.rounds, cfg.K)
    return {"P": P, "storage_count": storage_count(spec), "D": D, "T_CL": t_cl, "T_FL": t_fl, "ratio": t_cl / t_fl}


def cmd_overhead(cfg: ExperimentConfig) -> dict[str, float]:
    report = overhead(cfg)
    for key in OVERHEAD_COLUMNS:
        value = report[key]
        print(f"{key:>13} = {value:.4f}" if isinstance(value, float) else f"{key:>13} = {value:,} ({value:.2e})")
    _write_csv(cfg.overhead_csv, OVERHEAD_COLUMNS, [[report[k] if k != "ratio" else repr(report[k]) for k in OVERHEAD_COLUMNS]], cfg)
    return report


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irsfed", description="Federated channel estimation for IRS-assisted MIMO")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("generate", "simulate channels and pilots, write the dataset file"),
        ("train", "train the CNN (centralized or federated), write checkpoint and round log"),
        ("evaluate", "NMSE of CNN / LS / MMSE over held-out trials, write results CSV"),
        ("overhead", "parameter count and transmission overhead of CL vs FL"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="key = value configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if name == "evaluate":
            p.add_argument("--oracle", action="store_true", help="also score the true channels as an estimate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, oracle=args.oracle)
        else:
            cmd_overhead(cfg)
    except (ConfigError, DatasetTooLarge) as exc:
        log.error("configuration: %s", exc)
        return 2
    except (NumericFailure, DegenerateSignal) as exc:
        log.error("numeric failure: %s", exc)
        return 4
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
