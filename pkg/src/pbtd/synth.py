"""Ground-truth BTD data and the simulation protocols built on it."""

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import BtdConfig, ConfigError, NumericalError, fit, map_tasks, reconstruct
from .tensor import multilinear_reconstruct

DEFAULT_SNR_GRID = tuple(-20 + 2.5 * k for k in range(21))
FULL_STRUCTURES = ((12, 1), (6, 2), (4, 3), (3, 4), (2, 6), (1, 12))
DESK_STRUCTURES = ((4, 1), (2, 2), (1, 4))


@dataclass
class GroundTruth:
    signal: np.ndarray
    noisy: np.ndarray
    config: BtdConfig
    true_tau: float
    seed: int
    factors: list
    cores: list


def derive_seed(base_seed, *key):
    """Independent 32-bit seed for the cell identified by ``key``."""
    return int(np.random.SeedSequence([int(base_seed), *map(int, key)]).generate_state(1)[0])


def generate_btd(cfg, snr_db, seed):
    """Sample ``X = M_true + E`` with ``10 log10(|M|^2 / |E|^2) == snr_db``.

    Concatenated factors are jointly orthonormal per mode, core entries are
    standard normal and the noise is white Gaussian rescaled to the exact SNR.
    ``snr_db = inf`` gives noiseless data.
    """
    if not cfg.jointly_orthonormal():
        raise ConfigError(
            f"block ranks {cfg.block_ranks} do not fit jointly orthonormal factors in {cfg.data_dims}"
        )
    rng = np.random.default_rng(seed)
    factors = [[None] * cfg.order for _ in range(cfg.num_blocks)]
    for n, dim in enumerate(cfg.data_dims):
        widths = [ranks[n] for ranks in cfg.block_ranks]
        q, r = np.linalg.qr(rng.standard_normal((dim, sum(widths))))
        q = q * np.sign(np.diag(r))
        edges = np.cumsum([0] + widths)
        for t in range(cfg.num_blocks):
            factors[t][n] = q[:, edges[t]:edges[t + 1]]
    cores = [rng.standard_normal(ranks) for ranks in cfg.block_ranks]
    signal = sum(multilinear_reconstruct(g, us) for g, us in zip(cores, factors))
    noise = rng.standard_normal(cfg.data_dims)
    if math.isinf(snr_db) and snr_db > 0:
        scale = 0.0
    else:
        scale = np.linalg.norm(signal) / np.linalg.norm(noise) * 10 ** (-snr_db / 20)
    true_tau = math.inf if scale == 0 else 1.0 / scale**2
    return GroundTruth(
        signal=signal,
        noisy=signal + scale * noise,
        config=cfg,
        true_tau=true_tau,
        seed=int(seed),
        factors=factors,
        cores=cores,
    )


def relative_error(estimate, truth):
    """``||truth - estimate|| / ||truth||``."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ValueError("relative error against an all-zero truth is undefined")
    return float(np.linalg.norm(truth - estimate) / denom)


def _key(text):
    # Stable nonnegative integer for seeding from a label or a real value.
    return zlib.crc32(text.encode())


def _snr_key(snr_db):
    return _key(f"{float(snr_db):.6g}")


@dataclass
class SweepRow:
    """One restart of one fit on one synthetic data set."""

    snr_db: float
    truth: str
    method: str
    replicate: int
    restart: int
    seed: int
    relative_error: float = math.nan
    elbo: float = math.nan
    iterations: int = 0
    wall_time: float = 0.0
    noise_precision: float = math.nan
    status: str = "ok"
    best: bool = False

    FIELDS = (
        "snr_db", "truth", "method", "replicate", "restart", "seed", "relative_error",
        "elbo", "iterations", "wall_time", "noise_precision", "status", "best",
    )

    def key(self):
        return (self.snr_db, self.truth, self.method, self.replicate, self.restart)


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def best_rows(self):
        """The best-ELBO restart of every (snr, truth, method, replicate) cell."""
        return [r for r in self.rows if r.best]

    def failed_rows(self):
        return [r for r in self.rows if r.status != "ok"]

    def cells(self):
        return sorted({r.key()[:4] for r in self.rows})


def _fit_cell(task):
    x, signal, cfg, row = task
    try:
        state, report = fit(x, cfg)
    except (NumericalError, ConfigError) as exc:
        row.status = f"failed: {exc}"
        return row
    row.relative_error = relative_error(reconstruct(state), signal)
    row.elbo = report.final_elbo
    row.iterations = report.iterations
    row.wall_time = report.wall_time_seconds
    row.noise_precision = report.noise_precision_mean
    return row


def _mark_best(rows):
    cells = {}
    for row in rows:
        if row.status != "ok":
            continue
        cur = cells.get(row.key()[:4])
        if cur is None or row.elbo > cur.elbo:
            cells[row.key()[:4]] = row
    for row in cells.values():
        row.best = True


def _run_cells(jobs, restarts, base_seed, threads, shuffle_seed):
    """Fit every (truth config, fit config, snr, replicate) job ``restarts`` times.

    Data and fit seeds depend only on the job's identity, never on the order
    of execution; ``shuffle_seed`` permutes that order (to check exactly this).
    """
    tasks = []
    data_cache = {}
    for truth_cfg, fit_cfg, snr, rep in jobs:
        truth, method = truth_cfg.label(), fit_cfg.label()
        data_id = (truth, snr, rep)
        if data_id not in data_cache:
            seed = derive_seed(base_seed, 0, _key(truth), _snr_key(snr), rep)
            gt = generate_btd(truth_cfg, snr, seed)
            data_cache[data_id] = gt
        gt = data_cache[data_id]
        for r in range(restarts):
            seed = derive_seed(base_seed, 1, _key(truth), _key(method), _snr_key(snr), rep, r)
            row = SweepRow(snr_db=float(snr), truth=truth, method=method, replicate=rep, restart=r, seed=seed)
            tasks.append((gt.noisy, gt.signal, fit_cfg.replace(seed=seed), row))
    order = np.arange(len(tasks))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(tasks))
    done = map_tasks(_fit_cell, [tasks[i] for i in order], threads)
    rows = sorted(done, key=lambda r: (r.snr_db, r.truth, r.method, r.replicate, r.restart))
    _mark_best(rows)
    return SweepResult(rows=rows)


def run_snr_sweep(truth_cfg, fit_cfgs, snr_grid, restarts, base_seed, replicates=1, threads=1,
                  shuffle_seed=None):
    """Error of each fit configuration across noise levels.

    Every (snr, replicate) pair gets one fresh ground truth from ``truth_cfg``
    that all fit configurations and restarts share. Fit failures become rows
    with a ``failed`` status instead of aborting the sweep.
    """
    fit_cfgs = list(fit_cfgs)
    snr_grid = list(snr_grid)
    if not fit_cfgs or not snr_grid:
        raise ConfigError("the fit configurations and the SNR grid must be nonempty")
    if restarts < 1 or replicates < 1:
        raise ConfigError("restarts and replicates must be positive")
    jobs = [(truth_cfg, f, snr, rep) for snr in snr_grid for rep in range(replicates) for f in fit_cfgs]
    return _run_cells(jobs, restarts, base_seed, threads, shuffle_seed)


def scaled_elbo(row):
    """Divide a row of ELBOs so that its best entry becomes exactly 1.

    With a positive best the row is ``elbo / best``; with a negative best it is
    ``best / elbo``. Either way every entry is at most 1 and larger is better.
    """
    row = np.asarray(row, dtype=np.float64)
    top = np.nanmax(row)
    if top > 0:
        return row / top
    return top / row


@dataclass
class GridResult:
    structures: list
    sweep: SweepResult
    elbo: np.ndarray
    error: np.ndarray

    @property
    def scaled(self):
        """Replicate-averaged scaled-ELBO matrix (rows: truth, columns: fit)."""
        per = np.stack([
            np.stack([scaled_elbo(r) if np.any(np.isfinite(r)) else r for r in rep]) for rep in self.elbo
        ])
        return per.mean(axis=0)

    def winners(self):
        """Index of the best-ELBO fit structure, per replicate and truth row."""
        filled = np.where(np.isnan(self.elbo), -np.inf, self.elbo)
        return np.argmax(filled, axis=2)


def run_structure_grid(structures, snr_db, restarts, base_seed, dims=(15, 15, 15), replicates=1,
                       threads=1, shuffle_seed=None, truth_structures=None):
    """Fit every candidate ``(C, D)`` structure to data from every structure.

    Returns a :class:`GridResult` whose ``elbo`` and ``error`` arrays are
    indexed ``[replicate, truth, fit]`` and hold the best restart of each cell.
    ``truth_structures`` restricts which rows are simulated; the other rows
    stay NaN.
    """
    structures = [tuple(int(v) for v in s) for s in structures]
    if not structures:
        raise ConfigError("no structures given")
    if restarts < 1 or replicates < 1:
        raise ConfigError("restarts and replicates must be positive")
    cfgs = [BtdConfig.uniform(dims, c, d) for c, d in structures]
    rows = cfgs
    if truth_structures is not None:
        wanted = {tuple(int(v) for v in s) for s in truth_structures}
        if not wanted <= set(structures):
            raise ConfigError("truth structures must be among the candidate structures")
        rows = [c for c, s in zip(cfgs, structures) if s in wanted]
    jobs = [(tc, fc, snr_db, rep) for rep in range(replicates) for tc in rows for fc in cfgs]
    sweep = _run_cells(jobs, restarts, base_seed, threads, shuffle_seed)
    index = {c.label(): i for i, c in enumerate(cfgs)}
    elbo = np.full((replicates, len(cfgs), len(cfgs)), np.nan)
    error = np.full_like(elbo, np.nan)
    for row in sweep.best_rows():
        k = (row.replicate, index[row.truth], index[row.method])
        elbo[k] = row.elbo
        error[k] = row.relative_error
    return GridResult(structures=structures, sweep=sweep, elbo=elbo, error=error)
