"""The round loop, persistence, and reporting.

Each round: broadcast the global model, train every client locally with
the rank it was fed back last round, attack the received (pre-
aggregation) client models, estimate curvature and fresh ranks, then
aggregate under the configured strategy. Models crossing the
client/server boundary are rounded to the float32 wire grid, so a saved
checkpoint holds exactly the parameters the attack saw.

Determinism contract: identical (config, seed) gives byte-identical
rounds.csv and summary.json for any worker count. Wall-clock timings go
to a separate timings.csv, which is exempt.
"""

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedfair import attack, client, config as config_mod, curvature, data, metrics, nn, rng, server
from fedfair.errors import CheckpointError, DataError

CSV_NAME = "rounds.csv"
TIMINGS_NAME = "timings.csv"
SUMMARY_NAME = "summary.json"
CONFIG_ECHO_NAME = "config_resolved.txt"
PARTITION_NAME = "partition.json"
TARGETS_NAME = "targets.json"
CHECKPOINT_DIR = "checkpoints"

PER_CLIENT_COLUMNS = ("rho", "lambda", "htrace", "p", "w", "sia_acc", "target_loss",
                      "train_loss", "jnorm")
SCALAR_COLUMNS = (
    "round", "train_acc", "test_acc", "mean_sia", "max_sia", "cov_sia", "fi_sia",
    "cov_loss", "fi_loss", "eod", "objective", "agg_fallback", "diverged_clients",
)


@dataclass
class RoundRecord:
    round: int  # 1-based
    rho: np.ndarray  # ranks computed from this round's client models
    lambda_max: np.ndarray
    htrace: np.ndarray
    p: Optional[np.ndarray]
    weights: np.ndarray
    sia: attack.SiaRoundResult
    row: metrics.MetricsRow
    train_loss: np.ndarray  # per-client final-epoch mean loss
    jacobian_norm: np.ndarray  # per-client |J| measured after training
    diverged: list
    agg_fallback: bool
    objective: Optional[float]
    timings: dict = field(default_factory=dict)
    model_hashes: list = field(default_factory=list)  # sha256 of wire bytes at attack time


@dataclass
class ExperimentResult:
    config: config_mod.ExperimentConfig
    records: list
    summary: dict
    partition: data.Partition
    targets: attack.TargetSet


def _build_data(cfg: config_mod.ExperimentConfig):
    """(train dataset, test dataset, partition over the train split)."""
    if cfg.dataset == "synthetic":
        ds = data.synth_gaussian_mixture(
            cfg.classes, cfg.dim, cfg.n_per_class, cfg.separation,
            rng.substream(cfg.seed, rng.DATA),
        )
    elif cfg.dataset == "csv":
        ds = data.load_csv(cfg.csv_path)
    else:  # csv_per_client: one file per client, partition given by files
        paths = [p.strip() for p in cfg.csv_paths.split(",") if p.strip()]
        if len(paths) != cfg.clients:
            raise DataError(f"csv_paths lists {len(paths)} files for {cfg.clients} clients")
        trains, tests, shards, offset = [], [], [], 0
        width = None
        for k, path in enumerate(paths):
            ds_k = data.load_csv(path)
            if width is None:
                width = ds_k.features.shape[1]
            elif ds_k.features.shape[1] != width:
                raise DataError(
                    f"{path}: {ds_k.features.shape[1]} feature columns, "
                    f"other client files have {width}"
                )
            tr, te = data.train_test_split(ds_k, cfg.test_fraction,
                                           rng.substream(cfg.seed, rng.SPLIT, k))
            trains.append(tr)
            tests.append(te)
            shards.append(np.arange(offset, offset + len(tr), dtype=np.int64))
            offset += len(tr)
        class_count = max(t.class_count for t in trains + tests)
        train = data.Dataset(np.concatenate([t.features for t in trains]),
                             np.concatenate([t.labels for t in trains]), class_count)
        test = data.Dataset(np.concatenate([t.features for t in tests]),
                            np.concatenate([t.labels for t in tests]), class_count)
        return train, test, data.Partition(shards)

    train, test = data.train_test_split(ds, cfg.test_fraction, rng.substream(cfg.seed, rng.SPLIT))
    if cfg.partition == "equal":
        part = data.equal_partition(train, cfg.clients)
    else:
        part = data.dirichlet_partition(train, cfg.clients, cfg.alpha,
                                        rng.substream(cfg.seed, rng.PARTITION))
    return train, test, part


def _shard_batches(train: data.Dataset, part: data.Partition):
    return [nn.Batch(train.features[idx], train.labels[idx]) for idx in part.shards]


def _parallel_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _wire_hash(model: nn.MLP) -> str:
    return hashlib.sha256(model.wire_bytes()).hexdigest()


def aggregate_phase(mode: str, client_models, global_model, rho, sizes,
                    force_uniform: bool = False):
    """One aggregation step as the round loop runs it.

    mode is 'fedavg' | 'pca' | 'ala'. Returns (new_global, weights, p,
    objective, fallback); p/objective are None outside pca mode.
    """
    K = len(client_models)
    p = None
    objective = None
    fallback = False
    if mode == "pca":
        updates = np.stack([m.flat - global_model.flat for m in client_models])
        p = server.pca_distances(updates)
        weights = server.adaptive_weights(p)
        objective = server.finp_server_objective(p)
    elif mode == "ala":
        weights, fallback = server.ala_weights(rho)
    else:
        weights = server.fedavg_weights(sizes)
    if force_uniform:
        weights = np.full(K, 1.0 / K)
    new_global = server.weighted_aggregate(client_models, weights).quantize_wire()
    return new_global, weights, p, objective, fallback


def run_experiment(cfg: config_mod.ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run the full federated loop; optionally write per-round checkpoints."""
    train, test, part = _build_data(cfg)
    shards = _shard_batches(train, part)
    sizes = part.sizes()
    targets = attack.select_targets(shards, cfg.n_per_client, rng.substream(cfg.seed, rng.TARGETS))

    sizes_model = [train.features.shape[1]] + cfg.hidden_sizes + [train.class_count]
    global_model = nn.MLP.init(
        sizes_model, cfg.activation, rng.substream(cfg.seed, rng.INIT),
        seed_lineage=f"seed={cfg.seed}",
    ).quantize_wire()

    states = [client.ClientState(id=k, shard=shards[k], model=global_model.copy())
              for k in range(cfg.clients)]
    client_cfg = client.ClientConfig(
        beta=cfg.effective_beta, local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size, lr=cfg.lr, power_iters=cfg.power_iters,
        optimizer=cfg.optimizer,
    )

    ckpt_root = None
    if out_dir is not None and cfg.save_checkpoints:
        ckpt_root = os.path.join(out_dir, CHECKPOINT_DIR)
        os.makedirs(ckpt_root, exist_ok=True)

    train_batch = nn.Batch(train.features, train.labels)
    test_batch = nn.Batch(test.features, test.labels)

    records = []
    rho_feedback = np.zeros(cfg.clients)  # round 1 trains without rank information
    for rnd in range(1, cfg.rounds + 1):
        # 1) broadcast + 2) local training
        for state in states:
            state.model = global_model.copy()
            state.rho = float(rho_feedback[state.id])

        def _train(state):
            return client.local_train(
                state, client_cfg,
                rng.substream(cfg.seed, rng.SHUFFLE, rnd, state.id),
                rng.substream(cfg.seed, rng.PENALTY, rnd, state.id),
            )

        t0 = time.perf_counter()
        stats = _parallel_map(_train, states, cfg.workers)
        for state in states:
            state.model.quantize_wire()  # client -> server communication
        t_train = time.perf_counter() - t0

        client_models = [state.model for state in states]

        # 3) attack the received models, before any aggregation
        t0 = time.perf_counter()
        tiebreak = (rng.substream(cfg.seed, rng.TIEBREAK, rnd)
                    if cfg.sia_random_tiebreak else None)
        sia = attack.sia_round(client_models, targets, tiebreak)
        hashes = [_wire_hash(m) for m in client_models]
        t_attack = time.perf_counter() - t0

        # 4) curvature and fresh overfitting ranks
        def _curv(state):
            return curvature.estimate_client_curvature(
                state.model, state.shard,
                rng.substream(cfg.seed, rng.CURVATURE, rnd, state.id),
                cfg.curvature_iters, cfg.curvature_tol,
                cfg.curvature_probes, cfg.curvature_subsample,
            )

        t0 = time.perf_counter()
        estimates = _parallel_map(_curv, states, cfg.workers)
        lams = np.array([e[0] for e in estimates])
        traces = np.array([e[1] for e in estimates])
        rho = curvature.overfitting_ranks(lams, traces)
        if cfg.force_equal_rho:
            rho = np.full(cfg.clients, 0.5)
        t_curvature = time.perf_counter() - t0

        # 5) aggregate
        t0 = time.perf_counter()
        global_model, weights, p, objective, fallback = aggregate_phase(
            cfg.aggregation, client_models, global_model, rho, sizes,
            cfg.force_uniform_weights,
        )
        t_aggregate = time.perf_counter() - t0

        # 6) metrics on the new global model
        row = metrics.MetricsRow(
            round=rnd,
            cov_sia=None, fi_sia=None, cov_loss=None, fi_loss=None, eod=None,
            mean_sia=None, max_sia=None,
            train_acc=nn.accuracy(global_model, train_batch),
            test_acc=nn.accuracy(global_model, test_batch),
        )
        if not sia.undefined:
            row.cov_sia, row.fi_sia = metrics.safe_cov_fi(sia.sia_acc)
            row.cov_loss, row.fi_loss = metrics.safe_cov_fi(sia.per_client_loss)
            row.eod = metrics.eod(sia.sia_acc)
            row.mean_sia = float(sia.sia_acc.mean())
            row.max_sia = float(sia.sia_acc.max())

        records.append(RoundRecord(
            round=rnd, rho=rho, lambda_max=lams, htrace=traces,
            p=p, weights=weights, sia=sia, row=row,
            train_loss=np.array([s.epoch_losses[-1] for s in stats]),
            jacobian_norm=np.array([s.jacobian_norm for s in stats]),
            diverged=[state.id for state, s in zip(states, stats) if s.diverged],
            agg_fallback=fallback, objective=objective,
            timings={"train": t_train, "curvature": t_curvature,
                     "attack": t_attack, "aggregate": t_aggregate},
            model_hashes=hashes,
        ))

        # 7) persist checkpoints; feed ranks back for the next round
        if ckpt_root is not None:
            rdir = os.path.join(ckpt_root, f"round_{rnd:04d}")
            os.makedirs(rdir, exist_ok=True)
            for state in states:
                nn.save_model(state.model, os.path.join(rdir, f"client_{state.id:04d}{nn.CHECKPOINT_SUFFIX}"))
            nn.save_model(global_model, os.path.join(rdir, f"global{nn.CHECKPOINT_SUFFIX}"))
        rho_feedback = rho

    summary = _summarize(cfg, records)
    return ExperimentResult(cfg, records, summary, part, targets)


def _mean_defined(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def _summarize(cfg, records) -> dict:
    rows = [r.row for r in records]
    test_series = [r.test_acc for r in rows]
    diverged_rounds = [r.round for r in records if r.diverged]
    if diverged_rounds:
        conv, censored = None, False
    else:
        conv, censored = metrics.convergence_round(test_series, cfg.convergence_delta)
    sia_defined = [r for r in records if not r.sia.undefined]
    all_acc = np.concatenate([r.sia.sia_acc for r in sia_defined]) if sia_defined else None
    final = rows[-1]
    return {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "clients": cfg.clients,
        "final_train_accuracy": final.train_acc,
        "final_test_accuracy": final.test_acc,
        "mean_sia_acc": float(all_acc.mean()) if all_acc is not None else None,
        "max_sia_acc": float(all_acc.max()) if all_acc is not None else None,
        "final": {
            "cov_sia": final.cov_sia, "fi_sia": final.fi_sia,
            "cov_loss": final.cov_loss, "fi_loss": final.fi_loss,
            "eod": final.eod,
        },
        "mean_over_rounds": {
            "cov_sia": _mean_defined([r.cov_sia for r in rows]),
            "fi_sia": _mean_defined([r.fi_sia for r in rows]),
            "cov_loss": _mean_defined([r.cov_loss for r in rows]),
            "fi_loss": _mean_defined([r.fi_loss for r in rows]),
            "eod": _mean_defined([r.eod for r in rows]),
        },
        "convergence_round": None if conv is None else conv + 1,  # 1-based in reports
        "convergence_censored": censored,
        "diverged": bool(diverged_rounds),
        "diverged_rounds": diverged_rounds,
    }


# -- reporting ----------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_header(K: int) -> str:
    cols = list(SCALAR_COLUMNS)
    for name in PER_CLIENT_COLUMNS:
        cols.extend(f"{name}_{k}" for k in range(K))
    return ",".join(cols)


def _record_cells(rec: RoundRecord, K: int):
    row = rec.row
    cells = [
        rec.round, row.train_acc, row.test_acc, row.mean_sia, row.max_sia,
        row.cov_sia, row.fi_sia, row.cov_loss, row.fi_loss, row.eod,
        rec.objective, rec.agg_fallback,
        ";".join(str(i) for i in rec.diverged),
    ]
    per_client = {
        "rho": rec.rho,
        "lambda": rec.lambda_max,
        "htrace": rec.htrace,
        "p": rec.p if rec.p is not None else [None] * K,
        "w": rec.weights,
        "sia_acc": rec.sia.sia_acc if not rec.sia.undefined else [None] * K,
        "target_loss": rec.sia.per_client_loss if not rec.sia.undefined else [None] * K,
        "train_loss": rec.train_loss,
        "jnorm": rec.jacobian_norm,
    }
    for name in PER_CLIENT_COLUMNS:
        cells.extend(per_client[name])
    return cells


def emit_report(result: ExperimentResult, out_dir) -> None:
    """Write rounds.csv, timings.csv, summary.json, config echo, and the
    partition/target manifests. Reruns overwrite deterministically."""
    if not result.records:
        raise ValueError("no round records to report")
    os.makedirs(out_dir, exist_ok=True)
    K = result.config.clients
    with open(os.path.join(out_dir, CSV_NAME), "w", encoding="utf-8") as fh:
        fh.write(csv_header(K) + "\n")
        for rec in result.records:
            fh.write(",".join(_fmt(c) for c in _record_cells(rec, K)) + "\n")
    with open(os.path.join(out_dir, TIMINGS_NAME), "w", encoding="utf-8") as fh:
        fh.write("round,t_train,t_curvature,t_attack,t_aggregate\n")
        for rec in result.records:
            t = rec.timings
            fh.write(",".join([str(rec.round)] + [repr(t[k]) for k in
                                                  ("train", "curvature", "attack", "aggregate")]))
            fh.write("\n")
    _write_summary(result.summary, os.path.join(out_dir, SUMMARY_NAME))
    with open(os.path.join(out_dir, CONFIG_ECHO_NAME), "w", encoding="utf-8") as fh:
        fh.write(config_mod.config_echo_text(result.config))
    result.partition.save(os.path.join(out_dir, PARTITION_NAME))
    result.targets.save(os.path.join(out_dir, TARGETS_NAME))


def _write_summary(summary: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- offline attack replay ----------------------------------------------


def replay_attack(checkpoint_dir, target_manifest):
    """Recompute SIA results from saved checkpoints.

    Returns [(round_number, SiaRoundResult)]. Values are identical to the
    in-run ones for the same targets: checkpoints hold the exact wire
    parameters the in-run attack evaluated.
    """
    try:
        round_dirs = sorted(
            d for d in os.listdir(checkpoint_dir)
            if d.startswith("round_") and os.path.isdir(os.path.join(checkpoint_dir, d))
        )
    except OSError as exc:
        raise CheckpointError(f"cannot list {checkpoint_dir}: {exc}") from exc
    if not round_dirs:
        raise CheckpointError(f"no round_* directories under {checkpoint_dir}")
    try:
        targets = attack.TargetSet.load(target_manifest)
    except OSError as exc:
        raise DataError(f"cannot read target manifest {target_manifest}: {exc}") from exc
    results = []
    for dname in round_dirs:
        rdir = os.path.join(checkpoint_dir, dname)
        client_files = sorted(f for f in os.listdir(rdir)
                              if f.startswith("client_") and f.endswith(nn.CHECKPOINT_SUFFIX))
        if len(client_files) < 2:
            raise CheckpointError(f"{rdir} holds {len(client_files)} client checkpoints, need >= 2")
        models = [nn.load_model(os.path.join(rdir, f)) for f in client_files]
        results.append((int(dname.split("_")[1]), attack.sia_round(models, targets)))
    return results


def write_replay_csv(results, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    K = results[0][1].sia_acc.shape[0]
    header = ["round"] + [f"sia_acc_{k}" for k in range(K)] + [f"target_loss_{k}" for k in range(K)]
    with open(os.path.join(out_dir, "sia_replay.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for rnd, res in results:
            cells = [str(rnd)]
            if res.undefined:
                cells += [""] * (2 * K)
            else:
                cells += [repr(float(x)) for x in res.sia_acc]
                cells += [repr(float(x)) for x in res.per_client_loss]
            fh.write(",".join(cells) + "\n")


# -- summary re-rendering from CSVs --------------------------------------


def _parse_cell(cell: str):
    if cell == "":
        return None
    if cell == "true":
        return True
    if cell == "false":
        return False
    return float(cell)


def render_summary(run_dir) -> dict:
    """Rebuild summary.json content from rounds.csv + the config echo."""
    cfg = config_mod.load_config(os.path.join(run_dir, CONFIG_ECHO_NAME))
    with open(os.path.join(run_dir, CSV_NAME), encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
    K = cfg.clients

    def col(name):
        return [_parse_cell(r[name]) for r in rows]

    test_series = col("test_acc")
    diverged_rounds = [int(float(r["round"])) for r in rows if r["diverged_clients"] != ""]
    if diverged_rounds:
        conv, censored = None, False
    else:
        conv, censored = metrics.convergence_round(test_series, cfg.convergence_delta)
    all_acc = []  # round-major, client-minor: same summation order as the run
    for r in rows:
        vals = [_parse_cell(r[f"sia_acc_{k}"]) for k in range(K)]
        if all(v is not None for v in vals):
            all_acc.extend(vals)
    final = rows[-1]
    return {
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "clients": cfg.clients,
        "final_train_accuracy": _parse_cell(final["train_acc"]),
        "final_test_accuracy": _parse_cell(final["test_acc"]),
        "mean_sia_acc": float(np.mean(all_acc)) if all_acc else None,
        "max_sia_acc": float(np.max(all_acc)) if all_acc else None,
        "final": {name: _parse_cell(final[name])
                  for name in ("cov_sia", "fi_sia", "cov_loss", "fi_loss", "eod")},
        "mean_over_rounds": {name: _mean_defined(col(name))
                             for name in ("cov_sia", "fi_sia", "cov_loss", "fi_loss", "eod")},
        "convergence_round": None if conv is None else conv + 1,
        "convergence_censored": censored,
        "diverged": bool(diverged_rounds),
        "diverged_rounds": diverged_rounds,
    }
