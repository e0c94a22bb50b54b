"""Variational Bayesian block term decomposition.

The model is a sum of ``T`` Tucker blocks ``G_t x_1 U_t1 ... x_N U_tN`` plus
homoscedastic Gaussian noise with precision ``tau``. Every factor ``U_tn`` has
orthonormal columns with a uniform (vMF, zero concentration) prior; every core
has a zero-mean Gaussian prior whose precisions are Gamma distributed with
one of three structures:

``scale``     one precision per block
``sparsity``  one precision per core element
``ard``       one precision per (mode, slice) of each core; an element's
              precision is the product over modes

The mean-field posterior keeps a vMF per factor, a diagonal Gaussian per core
(orthonormal factors decouple the core elements), and Gamma distributions for
the precisions and for ``tau``. Inference is coordinate ascent on the ELBO.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment

from .stiefel import DiagGaussian, GammaDist, _mean_resultant_sv, vmf_moments
from .tensor import matricize, multilinear_reconstruct

PRIORS = ("scale", "sparsity", "ard")
INITS = ("subspace", "random")
PSI_CAP = 1e12
VARIANCE_FLOOR = 1e-15
INIT_DAMPING = 0.9
PRUNE_RATIO = 1e3


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class BtdConfig:
    """Block structure, priors and stopping rule of a fit.

    ``block_ranks[t][n]`` is the size of mode ``n`` of core ``t``. Fitting only
    needs ``block_ranks[t][n] <= data_dims[n]``; sampling a jointly orthonormal
    ground truth additionally needs the per-mode sums to fit.
    """

    data_dims: tuple
    block_ranks: tuple
    prior: str = "sparsity"
    alpha_tau: float = 1e-3
    beta_tau: float = 1e-3
    alpha_psi: float = 1e-3
    beta_psi: float = 1e-3
    max_iter: int = 500
    elbo_rel_tol: float = 1e-8
    seed: int = 0
    init: str = "subspace"

    def __post_init__(self):
        self.data_dims = tuple(int(d) for d in self.data_dims)
        self.block_ranks = tuple(tuple(int(r) for r in ranks) for ranks in self.block_ranks)
        self.validate()

    @classmethod
    def uniform(cls, data_dims, num_blocks, rank, **kwargs):
        """``BTD(C, D)``: ``num_blocks`` cubic cores of size ``rank``."""
        ranks = ((rank,) * len(data_dims),) * num_blocks
        return cls(data_dims=data_dims, block_ranks=ranks, **kwargs)

    @property
    def num_blocks(self):
        return len(self.block_ranks)

    @property
    def order(self):
        return len(self.data_dims)

    def validate(self):
        if len(self.data_dims) < 1 or any(d < 1 for d in self.data_dims):
            raise ConfigError(f"invalid data dimensions {self.data_dims}")
        if self.num_blocks < 1:
            raise ConfigError("at least one block is required")
        for t, ranks in enumerate(self.block_ranks):
            if len(ranks) != self.order:
                raise ConfigError(f"block {t} has {len(ranks)} ranks for a {self.order}-way tensor")
            for n, (r, dim) in enumerate(zip(ranks, self.data_dims)):
                if not 1 <= r <= dim:
                    raise ConfigError(f"block {t}, mode {n}: rank {r} not in [1, {dim}]")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}; expected one of {INITS}")
        if self.prior not in PRIORS:
            raise ConfigError(f"unknown prior {self.prior!r}; expected one of {PRIORS}")
        for name in ("alpha_tau", "beta_tau", "alpha_psi", "beta_psi", "elbo_rel_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def jointly_orthonormal(self):
        """True when every mode's concatenated factor can have orthonormal columns."""
        return all(
            sum(ranks[n] for ranks in self.block_ranks) <= dim
            for n, dim in enumerate(self.data_dims)
        )

    def label(self):
        ranks = set(self.block_ranks)
        if len(ranks) == 1:
            (r,) = ranks
            if len(set(r)) == 1:
                return f"({self.num_blocks},{r[0]})"
        return ";".join(",".join(map(str, r)) for r in self.block_ranks)

    def to_dict(self):
        d = asdict(self)
        d["data_dims"] = list(self.data_dims)
        d["block_ranks"] = [list(r) for r in self.block_ranks]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return type(self).from_dict(d)


@dataclass
class FitReport:
    final_elbo: float
    iterations: int
    converged: bool
    noise_precision_mean: float
    pruned_core_fraction: float
    wall_time_seconds: float


@dataclass
class ModelState:
    """Mean-field posterior.

    ``precisions[t]`` is a list of :class:`GammaDist` whose arrays broadcast
    against core ``t``; the precision of a core element is the product of the
    broadcast entries (a single factor unless the prior is ``ard``).
    """

    config: BtdConfig
    concentrations: list
    factors: list
    log_normalizers: list
    cores: list
    precisions: list
    noise: GammaDist
    data_norm_sq: float
    elbo_trace: list = field(default_factory=list)
    blocks: list = field(default_factory=list, repr=False)
    total: np.ndarray = field(default=None, repr=False)

    @property
    def num_blocks(self):
        return len(self.cores)

    def _refresh_block(self, t):
        new = multilinear_reconstruct(self.cores[t].mean, self.factors[t])
        self.total += new - self.blocks[t]
        self.blocks[t] = new

    def _recompute_total(self):
        self.total = np.sum(self.blocks, axis=0)

    def copy(self):
        return ModelState(
            config=self.config,
            concentrations=[[f.copy() for f in fs] for fs in self.concentrations],
            factors=[[u.copy() for u in us] for us in self.factors],
            log_normalizers=[list(ls) for ls in self.log_normalizers],
            cores=[DiagGaussian(c.mean.copy(), c.variance.copy()) for c in self.cores],
            precisions=[[GammaDist(g.shape.copy(), g.rate.copy()) for g in gs] for gs in self.precisions],
            noise=GammaDist(self.noise.shape.copy(), self.noise.rate.copy()),
            data_norm_sq=self.data_norm_sq,
            elbo_trace=list(self.elbo_trace),
            blocks=[b.copy() for b in self.blocks],
            total=self.total.copy(),
        )


def expected_precision(state, t):
    """``<psi>`` of every element of core ``t``, capped at ``PSI_CAP``."""
    out = np.ones(state.cores[t].mean.shape)
    for g in state.precisions[t]:
        out = out * g.mean
    return np.minimum(out, PSI_CAP)


def expected_log_precision(state, t):
    out = np.zeros(state.cores[t].mean.shape)
    for g in state.precisions[t]:
        out = out + g.mean_log
    return out


def _prior_precisions(cfg, ranks):
    a, b = cfg.alpha_psi, cfg.beta_psi
    if cfg.prior == "scale":
        return [GammaDist(np.full((), a), np.full((), b))]
    if cfg.prior == "sparsity":
        return [GammaDist(np.full(ranks, a), np.full(ranks, b))]
    gammas = []
    for n, d in enumerate(ranks):
        shape = [1] * len(ranks)
        shape[n] = d
        gammas.append(GammaDist(np.full(shape, a), np.full(shape, b)))
    return gammas


@lru_cache(maxsize=None)
def _damped_concentration(dim, rank, damping=INIT_DAMPING):
    """Scale ``s`` with ``E[U] = damping * Q`` under vMF(s * Q), Q orthonormal."""
    b = 0.5 * dim

    def gap(s):
        return _mean_resultant_sv(np.full(rank, s), b)[0] - damping

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2
    return brentq(gap, 1e-12, hi, xtol=1e-14, rtol=1e-15)


def _orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def _random_frames(cfg, rng):
    T = cfg.num_blocks
    frames = [[None] * cfg.order for _ in range(T)]
    for n, dim in enumerate(cfg.data_dims):
        widths = [ranks[n] for ranks in cfg.block_ranks]
        if sum(widths) <= dim:
            q = _orthonormal(rng, dim, sum(widths))
            edges = np.cumsum([0] + widths)
            for t in range(T):
                frames[t][n] = q[:, edges[t]:edges[t + 1]]
        else:
            for t in range(T):
                frames[t][n] = _orthonormal(rng, dim, widths[t])
    return frames


def _shares(widths, total):
    """Split ``total`` leading directions among blocks proportionally to ``widths``."""
    widths = np.asarray(widths)
    if widths.sum() <= total:
        return widths.copy()
    exact = widths * total / widths.sum()
    out = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - out), kind="stable")[: total - out.sum()]:
        out[i] += 1
    return out


def _block_masks(labels, T):
    """Boolean masks, one per block, over the cells of a core labelled by ``labels``."""
    masks = []
    for t in range(T):
        mask = np.ones([lab.size for lab in labels], dtype=bool)
        for axis, lab in enumerate(labels):
            shape = [1] * len(labels)
            shape[axis] = -1
            mask = mask & (lab == t).reshape(shape)
        masks.append(mask)
    return masks


def captured_energy(core, labels, T):
    """Energy of ``core`` on the hyper-diagonal blocks given by ``labels``."""
    return float(sum(np.sum(core[m] ** 2) for m in _block_masks(labels, T)))


def _block_diagonalize(core, bases, labels, T, max_sweeps=30, tol=1e-9):
    """Rotate each mode's basis so the core concentrates on the labelled blocks.

    Jacobi sweeps apply, to every pair of coordinates of a mode that sit in
    different blocks, the plane rotation maximizing the captured block energy.
    Along a rotation by ``theta`` that energy is
    ``a + b cos(2 theta) + c sin(2 theta)``, so the optimal angle is explicit.
    """
    order = core.ndim
    core = core.copy()
    bases = [b.copy() for b in bases]
    total = float(np.sum(core**2)) + 1e-300
    for _ in range(max_sweeps):
        gained = 0.0
        for n in range(order):
            lab = labels[n]
            slabs = np.moveaxis(core, n, 0)
            rest = slabs.shape[1:]
            slabs = slabs.reshape(lab.size, -1)
            others = [labels[m] for m in range(order) if m != n]
            grams = []
            for mask in _block_masks(others, T):
                sub = slabs[:, mask.ravel()]
                grams.append(sub @ sub.T)
            for i in range(lab.size):
                for j in range(i + 1, lab.size):
                    a, b = lab[i], lab[j]
                    if a == b:
                        continue
                    p, q = grams[a], grams[b]
                    half = 0.5 * (p[i, i] + q[j, j] - p[j, j] - q[i, i])
                    cross = p[i, j] - q[i, j]
                    gain = np.hypot(half, cross) - half
                    if gain <= tol * total:
                        continue
                    theta = 0.5 * np.arctan2(cross, half)
                    c, s = np.cos(theta), np.sin(theta)
                    rot = np.array([[c, s], [-s, c]])
                    idx = [i, j]
                    slabs[idx] = rot @ slabs[idx]
                    bases[n][:, idx] = bases[n][:, idx] @ rot.T
                    for g in grams:
                        g[idx] = rot @ g[idx]
                        g[:, idx] = g[:, idx] @ rot.T
                    gained += gain
            core = np.moveaxis(slabs.reshape((lab.size,) + rest), 0, n)
        if gained <= tol * total:
            break
    return core, bases


def _random_block_grams(core, n, rng, count):
    """Gram matrices of random contractions of ``core`` that keep mode ``n``.

    All but one other mode are contracted with Gaussian vectors. If the core
    is block diagonal, every such Gram matrix is block diagonal along mode n.
    """
    slabs = np.moveaxis(core, n, 0)
    grams = []
    for _ in range(count):
        s = slabs
        keep = rng.integers(1, s.ndim) if s.ndim > 2 else 1
        for axis in range(s.ndim - 1, 0, -1):
            if axis != keep:
                s = np.tensordot(s, rng.standard_normal(s.shape[axis]), axes=(axis, 0))
        grams.append(s @ s.T)
    return grams


def _group_by_coupling(weights, sizes, rng, starts=10):
    """Split items into groups of the given sizes maximizing within-group weight."""
    best, best_value = None, -np.inf
    ids = np.arange(len(sizes))
    for _ in range(starts):
        lab = rng.permutation(np.repeat(ids, sizes))
        improved = True
        while improved:
            improved = False
            for i in range(lab.size):
                for j in range(i + 1, lab.size):
                    a, b = lab[i], lab[j]
                    if a == b:
                        continue
                    gain = (
                        weights[i, lab == b].sum() + weights[j, lab == a].sum()
                        - weights[i, lab == a].sum() - weights[j, lab == b].sum()
                        - 2 * weights[i, j]
                    )
                    if gain > 1e-12:
                        lab[i], lab[j] = b, a
                        improved = True
        value = sum(weights[np.ix_(lab == t, lab == t)].sum() for t in ids)
        if value > best_value:
            best, best_value = lab.copy(), value
    return best


def _coupling_labels(core, n, sizes, rng, count=16):
    grams = _random_block_grams(core, n, rng, count)
    weights = sum(g * g for g in grams)
    d = np.sqrt(np.maximum(np.diag(weights), 1e-300))
    weights = weights / np.outer(d, d)
    np.fill_diagonal(weights, 0.0)
    return _group_by_coupling(weights, sizes, rng)


def _match_modes(core, labels, shares):
    """Relabel modes 1.. so their groups line up with the groups of mode 0."""
    T = len(shares[0])
    labels = [lab.copy() for lab in labels]
    energy = core**2
    for n in range(1, core.ndim):
        link = np.zeros((T, T))
        e = np.moveaxis(energy, n, 1)
        for a in range(T):
            rows = e[labels[0] == a]
            for b in range(T):
                link[a, b] = rows[:, labels[n] == b].sum()
        # Only groups with matching sizes may be paired.
        sizes_ok = shares[n][:, None] == shares[n][None, :]
        link = np.where(sizes_ok, link, -1e300)
        rows_idx, cols_idx = linear_sum_assignment(-link)
        relabel = np.empty(T, dtype=int)
        relabel[cols_idx] = rows_idx
        labels[n] = relabel[labels[n]]
    return labels


def _localized_basis(core, bases, n, rng, count=8):
    """Rotate mode ``n`` onto the eigenvectors of a random block-diagonal mix."""
    grams = _random_block_grams(core, n, rng, count)
    mix = sum(c * g for c, g in zip(rng.standard_normal(count), grams))
    vecs = np.linalg.eigh(mix)[1]
    return bases[n] @ vecs


def _group_directions(x, bases, shares, rng, rounds=2):
    """Rotate and group the leading directions of every mode into blocks.

    Each mode's basis is rotated onto directions that belong to single blocks,
    directions are grouped by how strongly random contractions couple them,
    groups are matched across modes and the result is polished by Jacobi
    rotations. A few regrouping rounds keep the best captured block energy.
    """
    T = len(shares[0])
    order = len(bases)
    core = multilinear_reconstruct(x, bases, transpose=True)
    if T == 1:
        return bases, [np.zeros(b.shape[1], dtype=int) for b in bases]
    if order < 3:
        labels = [rng.permutation(np.repeat(np.arange(T), shares[n])) for n in range(order)]
        core, bases = _block_diagonalize(core, bases, labels, T)
        return bases, labels
    bases = [_localized_basis(core, bases, n, rng) for n in range(order)]
    core = multilinear_reconstruct(x, bases, transpose=True)
    best = None
    for _ in range(rounds + 1):
        labels = [_coupling_labels(core, n, shares[n], rng) for n in range(order)]
        labels = _match_modes(core, labels, shares)
        new_core, new_bases = _block_diagonalize(core, bases, labels, T)
        energy = captured_energy(new_core, labels, T)
        if best is not None and energy <= best[0] * (1 + 1e-9):
            break
        best = (energy, new_bases, labels)
        core, bases = new_core, new_bases
    return best[1], best[2]


def _subspace_frames(x, cfg, rng):
    """Frames built from the leading singular vectors of each unfolding.

    Blocks that are mutually orthogonal make the data a block-diagonal core
    in some rotation of the leading singular subspaces. That rotation and the
    grouping of its directions into blocks are searched for directly. Blocks
    wider than their share of directions are completed with random
    orthonormal columns.
    """
    T = cfg.num_blocks
    bases, shares = [], []
    for n, dim in enumerate(cfg.data_dims):
        widths = [ranks[n] for ranks in cfg.block_ranks]
        k = min(sum(widths), dim)
        left = np.linalg.svd(matricize(x, n), full_matrices=False)[0]
        bases.append(left[:, :k])
        shares.append(_shares(widths, k))
    bases, labels = _group_directions(x, bases, shares, rng)
    frames = [[None] * cfg.order for _ in range(T)]
    for n, dim in enumerate(cfg.data_dims):
        for t in range(T):
            chosen = bases[n][:, labels[n] == t]
            missing = cfg.block_ranks[t][n] - chosen.shape[1]
            if missing:
                extra = rng.standard_normal((dim, missing))
                extra -= chosen @ (chosen.T @ extra)
                chosen = np.hstack([chosen, _orthonormal_columns(extra)])
            frames[t][n] = chosen
    return frames


def _orthonormal_columns(a):
    q, r = np.linalg.qr(a)
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def init_state(x, cfg):
    """Deterministic starting posterior for ``cfg.seed``.

    Factor means start at orthonormal frames damped by 0.9 (the vMF
    concentration is scaled so that ``E[U] = 0.9 Q``). With ``init="subspace"``
    the frames come from a block-diagonalizing rotation of the leading
    singular subspaces of the data; with ``init="random"`` they are QR frames
    of Gaussian draws, jointly orthonormal across blocks when the ranks
    allow it. Cores start at the projection of the data onto the frames with
    unit variance, precisions at their prior, and the noise at the posterior
    implied by the residual of that starting reconstruction.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != cfg.data_dims:
        raise ConfigError(f"data of shape {x.shape} does not match config dimensions {cfg.data_dims}")
    if not np.all(np.isfinite(x)):
        raise ConfigError("data contains non-finite values")
    rng = np.random.default_rng(cfg.seed)
    if cfg.init == "random":
        frames = _random_frames(cfg, rng)
    else:
        frames = _subspace_frames(x, cfg, rng)

    concentrations, factors, log_normalizers, cores, precisions, blocks = [], [], [], [], [], []
    for t, ranks in enumerate(cfg.block_ranks):
        fs, us, ls = [], [], []
        for n, q in enumerate(frames[t]):
            f = _damped_concentration(cfg.data_dims[n], ranks[n]) * q
            u, logc = vmf_moments(f)
            fs.append(f)
            us.append(u)
            ls.append(logc)
        concentrations.append(fs)
        factors.append(us)
        log_normalizers.append(ls)
        mean = multilinear_reconstruct(x, frames[t], transpose=True)
        cores.append(DiagGaussian(mean, np.ones(ranks)))
        precisions.append(_prior_precisions(cfg, ranks))
        blocks.append(multilinear_reconstruct(mean, us))

    state = ModelState(
        config=cfg,
        concentrations=concentrations,
        factors=factors,
        log_normalizers=log_normalizers,
        cores=cores,
        precisions=precisions,
        noise=GammaDist(cfg.alpha_tau, cfg.beta_tau),
        data_norm_sq=float(np.sum(x * x)),
        blocks=blocks,
    )
    state._recompute_total()
    # The noise starts from the plug-in residual of the frames. Folding the
    # unit core variances in here would make tau tiny and collapse the factor
    # concentrations on the first sweep.
    fitted = sum(multilinear_reconstruct(c.mean, fr) for c, fr in zip(cores, frames))
    rate = cfg.beta_tau + 0.5 * float(np.sum((x - fitted) ** 2))
    state.noise = GammaDist(cfg.alpha_tau + 0.5 * x.size, rate)
    return state


def _partial_residual(state, x, t):
    return x - (state.total - state.blocks[t])


def update_factor(state, x, t, n):
    """Refresh the vMF posterior of factor ``(t, n)`` given everything else."""
    tau = float(state.noise.mean)
    y = _partial_residual(state, x, t)
    projected = multilinear_reconstruct(y, state.factors[t], skip=n, transpose=True)
    f = tau * matricize(projected, n) @ matricize(state.cores[t].mean, n).T
    u, logc = vmf_moments(f)
    state.concentrations[t][n] = f
    state.factors[t][n] = u
    state.log_normalizers[t][n] = logc
    state._refresh_block(t)
    return state


def update_core(state, x, t):
    """Refresh the diagonal Gaussian posterior of core ``t``."""
    tau = float(state.noise.mean)
    y = _partial_residual(state, x, t)
    projected = multilinear_reconstruct(y, state.factors[t], transpose=True)
    variance = np.maximum(1.0 / (expected_precision(state, t) + tau), VARIANCE_FLOOR)
    state.cores[t] = DiagGaussian(variance * tau * projected, variance)
    state._refresh_block(t)
    return state


def update_core_precision(state, t):
    """Refresh the Gamma posteriors of the core precisions of block ``t``."""
    cfg = state.config
    core = state.cores[t]
    m2 = core.mean**2 + core.variance
    a, b = cfg.alpha_psi, cfg.beta_psi
    if cfg.prior == "scale":
        state.precisions[t] = [GammaDist(a + 0.5 * m2.size, b + 0.5 * m2.sum())]
    elif cfg.prior == "sparsity":
        state.precisions[t] = [GammaDist(np.full(m2.shape, a + 0.5), b + 0.5 * m2)]
    else:
        gammas = state.precisions[t]
        for n in range(m2.ndim):
            others = np.ones(m2.shape)
            for k, g in enumerate(gammas):
                if k != n:
                    others = others * g.mean
            axes = tuple(k for k in range(m2.ndim) if k != n)
            rate = b + 0.5 * np.sum(m2 * others, axis=axes, keepdims=True)
            shape = np.full(rate.shape, a + 0.5 * m2.size / m2.shape[n])
            gammas[n] = GammaDist(shape, rate)
    return state


def expected_residual(state, x):
    """``E_Q ||x - sum_t M_t||^2``.

    Orthonormal factors make ``E[||M_t||^2] = E[g_t^T g_t]``, and independent
    posteriors make cross-block terms depend on the means only.
    """
    resid = x - state.total
    out = float(np.sum(resid * resid))
    for core, block in zip(state.cores, state.blocks):
        out += float(np.sum(core.mean**2 + core.variance) - np.sum(block * block))
    return out


def update_noise(state, x):
    cfg = state.config
    rate = cfg.beta_tau + 0.5 * expected_residual(state, x)
    if not np.isfinite(rate) or rate <= 0:
        raise NumericalError(f"noise rate became {rate}")
    state.noise = GammaDist(cfg.alpha_tau + 0.5 * x.size, rate)
    return state


def compute_elbo(state, x):
    cfg = state.config
    tau = state.noise
    tau_mean, tau_log = float(tau.mean), float(tau.mean_log)
    elbo = 0.5 * x.size * (tau_log - np.log(2 * np.pi)) - 0.5 * tau_mean * expected_residual(state, x)
    elbo += float(tau.expected_log_pdf(cfg.alpha_tau, cfg.beta_tau) + tau.entropy)
    for t, core in enumerate(state.cores):
        m2 = core.mean**2 + core.variance
        elbo += 0.5 * float(
            np.sum(expected_log_precision(state, t) - expected_precision(state, t) * m2 - np.log(2 * np.pi))
        )
        elbo += float(np.sum(core.entropy))
        for g in state.precisions[t]:
            elbo += float(np.sum(g.expected_log_pdf(cfg.alpha_psi, cfg.beta_psi) + g.entropy))
        for f, u, logc in zip(state.concentrations[t], state.factors[t], state.log_normalizers[t]):
            # Uniform prior contributes zero; this is the vMF entropy.
            elbo += logc - float(np.sum(f * u))
    return float(elbo)


def sweep(state, x):
    """One full round of coordinate updates (without the ELBO)."""
    N = state.config.order
    for t in range(state.num_blocks):
        for n in range(N):
            update_factor(state, x, t, n)
        update_core(state, x, t)
    for t in range(state.num_blocks):
        update_core_precision(state, t)
    update_noise(state, x)
    return state


def pruned_core_fraction(state):
    """Fraction of core elements whose ``<psi>`` exceeds 1e3 times the smallest one.

    The smallest precision belongs to the most relevant element. Measuring
    against the median instead breaks down exactly when pruning is strong:
    once most elements are pruned the median is itself a pruned precision.
    """
    psi = np.concatenate([expected_precision(state, t).ravel() for t in range(state.num_blocks)])
    return float(np.mean(psi > PRUNE_RATIO * psi.min()))


def fit(x, cfg):
    """Run coordinate-ascent VB from :func:`init_state` until the ELBO settles.

    Returns
    -------
    state : ModelState
    report : FitReport
    """
    start = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    state = init_state(x, cfg)
    converged = False
    previous = None
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        sweep(state, x)
        elbo = compute_elbo(state, x)
        if not np.isfinite(elbo):
            raise NumericalError(f"ELBO became {elbo} at iteration {iterations}")
        state.elbo_trace.append(elbo)
        if previous is not None and abs(elbo - previous) / (abs(elbo) + 1e-12) < cfg.elbo_rel_tol:
            converged = True
            break
        previous = elbo
    report = FitReport(
        final_elbo=state.elbo_trace[-1],
        iterations=iterations,
        converged=converged,
        noise_precision_mean=float(state.noise.mean),
        pruned_core_fraction=pruned_core_fraction(state),
        wall_time_seconds=time.perf_counter() - start,
    )
    return state, report


def reconstruct(state):
    """Posterior-mean model ``sum_t <G_t> x_1 <U_t1> ... x_N <U_tN>``."""
    return sum(
        multilinear_reconstruct(core.mean, factors) for core, factors in zip(state.cores, state.factors)
    )


def map_tasks(func, tasks, threads=1):
    """``[func(t) for t in tasks]``, optionally spread over worker processes.

    Results come back in task order, and every task carries its own seed, so
    the output does not depend on ``threads``.
    """
    tasks = list(tasks)
    if threads <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
        return list(pool.map(func, tasks))


@dataclass
class RestartOutcome:
    seed: int
    state: ModelState = None
    report: FitReport = None
    error: str = ""

    @property
    def ok(self):
        return self.report is not None


def _fit_task(task):
    x, cfg = task
    try:
        state, report = fit(x, cfg)
    except NumericalError as exc:
        return RestartOutcome(seed=cfg.seed, error=str(exc))
    return RestartOutcome(seed=cfg.seed, state=state, report=report)


def restart_seeds(seed, restarts):
    """Restart ``r`` of a fit seeded with ``seed`` uses ``seed + r``."""
    return [int(seed) + r for r in range(int(restarts))]


def fit_restarts(x, cfg, restarts, threads=1):
    """Fit ``restarts`` times and return ``(best, outcomes)``.

    ``best`` is the successful outcome with the highest final ELBO (the first
    one on ties); it is ``None`` when every restart raised
    :class:`NumericalError`.
    """
    if restarts < 1:
        raise ConfigError("at least one restart is required")
    x = np.asarray(x, dtype=np.float64)
    tasks = [(x, cfg.replace(seed=s)) for s in restart_seeds(cfg.seed, restarts)]
    outcomes = map_tasks(_fit_task, tasks, threads)
    best = None
    for out in outcomes:
        if out.ok and (best is None or out.report.final_elbo > best.report.final_elbo):
            best = out
    return best, outcomes
