"""Metropolis-within-Gibbs sampler for (hierarchical) linear models with AR(1) errors.

One engine serves both the single-trial and the multi-participant model.
Each participant ("unit") contributes rows ``y = X b + e`` where ``e`` is an
AR(1) process restarted at chain starts; observations ``dt`` slots apart
have correlation ``rho**dt`` and a row of weight ``w`` has its conditional
variance inflated by ``1/w``. The likelihood is evaluated through the
prediction-error (whitening) decomposition, so no dense covariance matrix is
ever formed.

Coefficient columns are pooled in one of three ways:

* ``unrelated`` - each unit has its own coefficient with an independent prior
* ``common``    - one coefficient shared by every unit
* ``random``    - unit coefficients drawn from ``N(H_i theta, tau^2)``

Update order per sweep: unit coefficients, common coefficients, population
means and sds, residual sd (exact GIG draw under a half-normal prior),
autocorrelation (reflected random-walk Metropolis).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy import optimize, stats

from .errors import SamplerError, ValidationError
from .rng import stream

RHO_BOUND = 0.999
QUANTILES = (2.5, 25.0, 50.0, 75.0, 97.5)


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ValidationError("prior sd must be positive")


@dataclass(frozen=True)
class HalfNormal:
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("half-normal scale must be positive")


@dataclass(frozen=True)
class McmcSettings:
    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 1000
    seed: int = 0
    rho_proposal_sd: float = 0.1
    thin: int = 1
    # "gig": exact draw under the half-normal prior; "ig": inverse-gamma matched to it
    sigma_update: str = "gig"
    adapt_rho: bool = True

    def __post_init__(self):
        if min(self.n_chains, self.n_warmup + 1, self.n_samples, self.thin) < 1:
            raise ValidationError("MCMC settings must be positive")
        if not self.rho_proposal_sd > 0:
            raise ValidationError("rho_proposal_sd must be positive")
        if self.sigma_update not in ("gig", "ig"):
            raise ValidationError("sigma_update must be 'gig' or 'ig'")


# -- diagnostics ---------------------------------------------------------------


def split_rhat(x) -> float:
    """Split-chain potential scale reduction factor for draws of shape (chains, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[1] // 2
    if n < 2:
        return np.nan
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    w = halves.var(axis=1, ddof=1).mean()
    b = n * halves.mean(axis=1).var(ddof=1)
    if w <= 0:
        return np.nan if b <= 0 else np.inf
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), m)
    return np.fft.irfft(f * np.conj(f), m)[:n] / n


def effective_sample_size(x) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    if n < 4:
        return np.nan
    acov = np.array([_autocov(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return np.nan
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum consecutive pairs while positive, enforcing monotone decrease
    pairs = []
    for t in range(0, n - 1, 2):
        p = rho[t] + rho[t + 1]
        if p <= 0:
            break
        if pairs and p > pairs[-1]:
            p = pairs[-1]
        pairs.append(p)
    tau = -1.0 + 2.0 * sum(pairs)
    tau = max(tau, 1.0 / np.log10(m * n + 10))
    return float(m * n / tau)


# -- summaries -----------------------------------------------------------------


@dataclass
class ParamSummary:
    mean: float
    sd: float
    quantiles: dict
    rhat: float
    ess: float
    mcse: float


@dataclass
class PosteriorSummary:
    params: dict
    draws: dict = field(repr=False)
    prob_benefit: Optional[float] = None
    mcid: float = 0.0
    direction: str = "greater"
    converged: bool = True
    rho_accept_rate: Optional[float] = None
    fixed: dict = field(default_factory=dict)
    settings: Optional[McmcSettings] = None
    info: dict = field(default_factory=dict)

    def __getitem__(self, name) -> ParamSummary:
        return self.params[name]

    def flat(self, name) -> np.ndarray:
        return self.draws[name].reshape(-1)

    def table_rows(self) -> list:
        rows = []
        for name, s in self.params.items():
            rows.append(
                [name, s.mean, s.sd, *(s.quantiles[q] for q in QUANTILES), s.rhat, s.ess]
            )
        return rows

    def to_csv(self, path=None) -> str:
        head = "parameter,mean,sd,q2.5,q25,q50,q75,q97.5,rhat,ess"
        lines = [head] + [",".join([r[0], *(_num(v) for v in r[1:])]) for r in self.table_rows()]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text

    def draws_csv(self, path=None) -> str:
        names = list(self.draws)
        first = self.draws[names[0]]
        lines = [",".join(["chain", "iteration", *names])]
        for c in range(first.shape[0]):
            for i in range(first.shape[1]):
                lines.append(",".join([str(c), str(i), *(_num(self.draws[k][c, i]) for k in names)]))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "parameters": {
                k: {
                    "mean": v.mean, "sd": v.sd, "rhat": _jsonable(v.rhat), "ess": _jsonable(v.ess),
                    "mcse": _jsonable(v.mcse),
                    "quantiles": {str(q): v.quantiles[q] for q in QUANTILES},
                }
                for k, v in self.params.items()
            },
            "prob_benefit": self.prob_benefit,
            "mcid": self.mcid,
            "direction": self.direction,
            "converged": self.converged,
            "rho_accept_rate": self.rho_accept_rate,
            "fixed": self.fixed,
            "info": self.info,
        }


def _num(v) -> str:
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def _jsonable(v):
    v = float(v)
    return None if not np.isfinite(v) else v


def summarize_draws(draws: dict, rhat_threshold: float = 1.05):
    params = {}
    converged = True
    for name, x in draws.items():
        flat = x.reshape(-1)
        r = split_rhat(x)
        e = effective_sample_size(x)
        sd = float(flat.std(ddof=1)) if flat.size > 1 else 0.0
        params[name] = ParamSummary(
            mean=float(flat.mean()),
            sd=sd,
            quantiles={q: float(v) for q, v in zip(QUANTILES, np.percentile(flat, QUANTILES))},
            rhat=r,
            ess=e,
            mcse=sd / np.sqrt(e) if e and np.isfinite(e) and e > 0 else np.nan,
        )
        if np.isfinite(r) and r > rhat_threshold or r == np.inf:
            converged = False
    return params, converged


def prob_benefit(draws, mcid: float = 0.0, direction: str = "greater") -> float:
    d = np.asarray(draws, dtype=float).reshape(-1)
    if d.size < 1:
        raise ValidationError("need at least one draw")
    if direction == "greater":
        return float(np.mean(d > mcid))
    if direction == "less":
        return float(np.mean(d < mcid))
    raise ValidationError("direction must be 'greater' or 'less'")


# -- variance updates ----------------------------------------------------------


def sample_gig_variance(rng, n_obs, rss, scale):
    """Draw a variance v with density prop. to v^(-n/2) exp(-rss/2v) times a
    half-normal(scale) prior on sqrt(v)."""
    rss = max(float(rss), 1e-300)
    lam = (1.0 - n_obs) / 2.0
    a = 1.0 / scale**2
    b = np.sqrt(a * rss)
    if b < 1e-8:
        # rss negligible: the density reduces to a gamma in v
        if lam <= 0:
            return max(rss, 1e-300)
        return rng.gamma(lam, 2.0 / a)
    x = stats.geninvgauss.rvs(lam, b, random_state=rng)
    return float(x * np.sqrt(rss / a))


@lru_cache(maxsize=None)
def _ig_match_unit():
    """Inverse-gamma (shape, scale) on v whose sqrt matches the quartiles of HN(1)."""
    target = stats.halfnorm.ppf([0.25, 0.5, 0.75]) ** 2

    def loss(z):
        a, b = np.exp(z)
        q = stats.invgamma.ppf([0.25, 0.5, 0.75], a, scale=b)
        return np.sum((np.log(q) - np.log(target)) ** 2)

    res = optimize.minimize(loss, [0.0, -1.0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
    a, b = np.exp(res.x)
    return float(a), float(b)


def sample_ig_variance(rng, n_obs, rss, scale):
    a0, b0 = _ig_match_unit()
    a = a0 + n_obs / 2.0
    b = b0 * scale**2 + rss / 2.0
    return float(b / rng.gamma(a))


# -- the model -----------------------------------------------------------------


@dataclass
class UnitData:
    """Rows contributed by one participant; rows with weight 0 already removed."""

    uid: str
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    prev: np.ndarray  # local index of the previous row in the same AR chain, or -1
    gap: np.ndarray  # time-slot distance to that row


@dataclass
class ColumnSpec:
    name: str
    regime: str  # unrelated | common | random
    prior: Normal = field(default_factory=lambda: Normal(0.0, 100.0))
    # random regime: population regression design, one row per unit
    H: Optional[np.ndarray] = None
    H_names: tuple = ()


@dataclass
class ModelSetup:
    units: list
    columns: list
    error_model: str = "ar1"  # ar1 | iid
    rho_regime: str = "common"  # common | unrelated
    sigma_regime: str = "common"
    sigma_prior: HalfNormal = field(default_factory=lambda: HalfNormal(100.0))
    hyper_mean_sd: float = 10.0
    tau_prior: HalfNormal = field(default_factory=lambda: HalfNormal(1.0))
    fixed: dict = field(default_factory=dict)
    plain_names: bool = False  # single-unit mode: no [uid] suffix


class _Stacked:
    def __init__(self, setup: ModelSetup):
        units = setup.units
        self.N = len(units)
        sizes = np.array([len(u.y) for u in units], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n = int(self.offsets[-1])
        P = len(setup.columns)
        self.X = np.vstack([u.X.reshape(-1, P) for u in units]) if self.n else np.zeros((0, P))
        self.y = np.concatenate([u.y for u in units]) if self.n else np.zeros(0)
        self.w = np.concatenate([u.w for u in units]) if self.n else np.zeros(0)
        self.unit = np.repeat(np.arange(self.N), sizes)
        prev = np.concatenate([np.where(u.prev >= 0, u.prev + off, -1) for u, off in zip(units, self.offsets)]) \
            if self.n else np.zeros(0, dtype=int)
        self.prev = prev.astype(int)
        self.has_prev = self.prev >= 0
        self.prev_safe = np.where(self.has_prev, self.prev, 0)
        self.gap = np.concatenate([u.gap for u in units]).astype(float) if self.n else np.zeros(0)
        self.sizes = sizes
        self.S = sp.csr_matrix(
            (np.ones(self.n), (self.unit, np.arange(self.n))), shape=(self.N, self.n)
        )

    def whitening(self, rho_row):
        """Per-row (phi, scale, logc) for AR coefficient(s) ``rho_row``."""
        phi = np.where(self.has_prev, np.power(rho_row, self.gap), 0.0)
        r2 = rho_row * rho_row
        v = np.where(self.has_prev, (1.0 - phi * phi) / (1.0 - r2), 1.0 / (1.0 - r2))
        c = v / self.w
        return phi, 1.0 / np.sqrt(c), np.log(c)

    def apply(self, z, phi, scale):
        if z.ndim == 1:
            return (z - phi * z[self.prev_safe]) * scale
        return (z - phi[:, None] * z[self.prev_safe]) * scale[:, None]


def _reflect(x, bound=RHO_BOUND):
    x = np.asarray(x, dtype=float)
    for _ in range(100):
        hi = x > bound
        lo = x < -bound
        if not (hi.any() or lo.any()):
            break
        x = np.where(hi, 2 * bound - x, x)
        x = np.where(lo, -2 * bound - x, x)
    return x


def _batched_normal(rng, prec, rhs):
    """Draw from N(prec^-1 rhs, prec^-1) for a stack of small systems."""
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    z = rng.standard_normal(rhs.shape)
    return mean + np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]


class GibbsSampler:
    def __init__(self, setup: ModelSetup, settings: McmcSettings):
        self.setup = setup
        self.settings = settings
        self.data = _Stacked(setup)
        cols = setup.columns
        self.ind = [j for j, c in enumerate(cols) if c.regime in ("unrelated", "random")]
        self.com = [j for j, c in enumerate(cols) if c.regime == "common"]
        self.rand = [j for j, c in enumerate(cols) if c.regime == "random"]
        for c in cols:
            if c.regime not in ("unrelated", "common", "random"):
                raise ValidationError(f"unknown pooling regime {c.regime!r} for {c.name}")
        if setup.error_model not in ("ar1", "iid"):
            raise ValidationError("error_model must be 'ar1' or 'iid'")
        for reg in (setup.rho_regime, setup.sigma_regime):
            if reg not in ("common", "unrelated"):
                raise ValidationError("rho and sigma support only 'common' or 'unrelated' pooling")
        N = self.data.N
        self.H = {}
        for j in self.rand:
            H = cols[j].H if cols[j].H is not None else np.ones((N, 1))
            H = np.asarray(H, dtype=float).reshape(N, -1)
            if not np.all(np.isfinite(H)):
                raise ValidationError(f"non-finite population covariates for {cols[j].name}")
            self.H[j] = H
        self.fixed = dict(setup.fixed)
        self.sample_rho = setup.error_model == "ar1" and "rho" not in self.fixed
        # prior arrays for unit-level columns
        q = len(self.ind)
        self.prior_mean = np.zeros((N, q))
        self.prior_prec = np.zeros((N, q))
        for k, j in enumerate(self.ind):
            c = cols[j]
            if c.regime == "unrelated":
                self.prior_mean[:, k] = c.prior.mean
                self.prior_prec[:, k] = 1.0 / c.prior.sd**2

    # parameter naming --------------------------------------------------------
    def _unit_name(self, base, i):
        if self.setup.plain_names:
            return base
        return f"{base}[{self.setup.units[i].uid}]"

    def _hyper_names(self, j):
        c = self.setup.columns[j]
        H = self.H[j]
        if H.shape[1] == 1:
            means = [c.name]
        elif c.H_names:
            means = list(c.H_names)
        else:
            means = [f"{c.name}_{k + 1}" for k in range(H.shape[1])]
        return means, f"sd_{c.name}"

    # one chain ----------------------------------------------------------------
    def _run_chain(self, chain: int):
        st = self.settings
        setup = self.setup
        d = self.data
        cols = setup.columns
        rng = stream(st.seed, chain)
        N, q = d.N, len(self.ind)
        ind, com = self.ind, self.com
        fixed = self.fixed

        ysd = float(np.std(d.y)) if d.n > 1 else 1.0
        ysd = ysd if ysd > 0 else 1.0
        ymean = float(np.mean(d.y)) if d.n else 0.0

        # initial state, dispersed across chains
        b = np.zeros((N, q))
        for k, j in enumerate(ind):
            if cols[j].name == "alpha" or cols[j].name.startswith("alpha"):
                b[:, k] = ymean
        b += 0.1 * ysd * rng.standard_normal(b.shape)
        c = np.zeros(len(com))
        for k, j in enumerate(com):
            if cols[j].name.startswith("alpha"):
                c[k] = ymean
        theta = {j: np.zeros(self.H[j].shape[1]) for j in self.rand}
        tau = {j: setup.tau_prior.scale * rng.uniform(0.2, 1.2) for j in self.rand}
        for j in self.rand:
            means, sdname = self._hyper_names(j)
            if sdname in fixed:
                tau[j] = float(fixed[sdname])
            for m_i, mname in enumerate(means):
                if mname in fixed:
                    theta[j][m_i] = float(fixed[mname])
        n_sig = N if setup.sigma_regime == "unrelated" else 1
        n_rho = N if setup.rho_regime == "unrelated" else 1
        sigma2 = np.full(n_sig, (ysd * np.exp(rng.uniform(-0.5, 0.5))) ** 2)
        if "sigma" in fixed:
            sigma2[:] = float(fixed["sigma"]) ** 2
        if setup.error_model == "iid":
            rho = np.zeros(n_rho)
        elif "rho" in fixed:
            rho = np.full(n_rho, float(fixed["rho"]))
        else:
            rho = rng.uniform(-0.5, 0.5, n_rho)
        prop_sd = np.full(n_rho, st.rho_proposal_sd)

        def rho_rows(r):
            return r[d.unit] if n_rho > 1 else np.full(d.n, r[0])

        def sig_rows(s2):
            return s2[d.unit] if n_sig > 1 else np.full(d.n, s2[0])

        phi, scale, logc = d.whitening(rho_rows(rho))
        Xw = d.apply(d.X, phi, scale)
        yw = d.apply(d.y, phi, scale)

        n_total = st.n_warmup + st.n_samples * st.thin
        keep = []
        accepts = np.zeros(n_rho)
        tries = 0
        Xi = Xw[:, ind]
        Xc = Xw[:, com]
        for it in range(n_total):
            inv_s2 = 1.0 / sig_rows(sigma2)
            # unit coefficients
            if q:
                pm = self.prior_mean.copy()
                pp = self.prior_prec.copy()
                for k, j in enumerate(ind):
                    if cols[j].regime == "random":
                        pm[:, k] = self.H[j] @ theta[j]
                        pp[:, k] = 1.0 / max(tau[j] ** 2, 1e-300)
                r = yw - Xc @ c if com else yw
                outer = (Xi[:, :, None] * Xi[:, None, :] * inv_s2[:, None, None]).reshape(d.n, q * q)
                XtX = (d.S @ outer).reshape(N, q, q) if d.n else np.zeros((N, q, q))
                Xtr = d.S @ (Xi * (r * inv_s2)[:, None]) if d.n else np.zeros((N, q))
                prec = XtX + pp[:, :, None] * np.eye(q)[None]
                rhs = Xtr + pp * pm
                b = _batched_normal(rng, prec, rhs)
            # common coefficients
            if com:
                r = yw - np.einsum("nq,nq->n", Xi, b[d.unit]) if q else yw
                pc = np.array([1.0 / cols[j].prior.sd**2 for j in com])
                mc = np.array([cols[j].prior.mean for j in com])
                prec = (Xc * inv_s2[:, None]).T @ Xc + np.diag(pc)
                rhs = (Xc * inv_s2[:, None]).T @ r + pc * mc
                c = _batched_normal(rng, prec[None], rhs[None])[0]
            # population means and sds
            for k, j in ((k, j) for k, j in enumerate(ind) if cols[j].regime == "random"):
                H = self.H[j]
                means, sdname = self._hyper_names(j)
                free = [m_i for m_i, nm in enumerate(means) if nm not in fixed]
                bj = b[:, k]
                if free:
                    Hf = H[:, free]
                    off = bj - H[:, [m for m in range(H.shape[1]) if m not in free]] @ theta[j][
                        [m for m in range(H.shape[1]) if m not in free]] if len(free) < H.shape[1] else bj
                    t2 = max(tau[j] ** 2, 1e-300)
                    prec = Hf.T @ Hf / t2 + np.eye(len(free)) / setup.hyper_mean_sd**2
                    rhs = Hf.T @ off / t2
                    theta[j][free] = _batched_normal(rng, prec[None], rhs[None])[0]
                if sdname not in fixed:
                    ss = float(np.sum((bj - H @ theta[j]) ** 2))
                    tau[j] = np.sqrt(sample_gig_variance(rng, N, ss, setup.tau_prior.scale))
                    # interweaving step: redraw tau with the standardised effects
                    # eta held fixed (b = H theta + tau eta); tau enters the
                    # likelihood linearly there, which unsticks it near zero
                    if d.n and tau[j] > 0:
                        eta = (bj - H @ theta[j]) / tau[j]
                        beta_all = np.zeros((N, len(cols)))
                        beta_all[:, ind] = b
                        if com:
                            beta_all[:, com] = c
                        zrow = Xw[:, j] * eta[d.unit]
                        r = yw - np.einsum("np,np->n", Xw, beta_all[d.unit]) + tau[j] * zrow
                        prec = float(np.sum(zrow * zrow * inv_s2)) + 1.0 / setup.tau_prior.scale**2
                        mean = float(np.sum(zrow * r * inv_s2)) / prec
                        t_new = mean + rng.standard_normal() / np.sqrt(prec)
                        b[:, k] = H @ theta[j] + t_new * eta
                        tau[j] = abs(t_new)
            # residuals on the raw scale, then whitened
            beta = np.zeros((N, len(cols)))
            if q:
                beta[:, ind] = b
            if com:
                beta[:, com] = c
            e_raw = d.y - np.einsum("np,np->n", d.X, beta[d.unit]) if d.n else np.zeros(0)
            ew = d.apply(e_raw, phi, scale)
            # residual variance
            if "sigma" not in fixed:
                draw = sample_gig_variance if st.sigma_update == "gig" else sample_ig_variance
                if n_sig == 1:
                    sigma2[0] = draw(rng, d.n, float(ew @ ew), setup.sigma_prior.scale)
                else:
                    rss = np.bincount(d.unit, weights=ew * ew, minlength=N)
                    for i in range(N):
                        sigma2[i] = draw(rng, d.sizes[i], rss[i], setup.sigma_prior.scale)
            # autocorrelation
            if self.sample_rho:
                s2r = sig_rows(sigma2)
                prop = _reflect(rho + prop_sd * rng.standard_normal(n_rho))
                phi_p, scale_p, logc_p = d.whitening(rho_rows(prop))
                ew_p = d.apply(e_raw, phi_p, scale_p)
                ll_cur = -0.5 * (logc + ew * ew / s2r)
                ll_new = -0.5 * (logc_p + ew_p * ew_p / s2r)
                if n_rho == 1:
                    diff = np.array([ll_new.sum() - ll_cur.sum()])
                else:
                    diff = np.bincount(d.unit, weights=ll_new - ll_cur, minlength=N)
                acc = np.log(rng.random(n_rho)) < diff
                if acc.any():
                    rho = np.where(acc, prop, rho)
                    if n_rho == 1:
                        phi, scale, logc = phi_p, scale_p, logc_p
                    else:
                        phi, scale, logc = d.whitening(rho_rows(rho))
                    Xw = d.apply(d.X, phi, scale)
                    yw = d.apply(d.y, phi, scale)
                    Xi = Xw[:, ind]
                    Xc = Xw[:, com]
                if it < st.n_warmup:
                    if st.adapt_rho:
                        # Robbins-Monro towards 44% acceptance, frozen after warmup
                        step = 1.0 / np.sqrt(it + 10.0)
                        prop_sd = np.clip(prop_sd * np.exp(step * (acc - 0.44)), 1e-4, 1.0)
                else:
                    accepts += acc
                    tries += 1
            if it >= st.n_warmup and (it - st.n_warmup) % st.thin == 0:
                state = []
                if q:
                    state.append(b.reshape(-1))
                state.append(c)
                for j in self.rand:
                    state.append(theta[j])
                    state.append([tau[j]])
                state.append(np.sqrt(sigma2))
                if self.sample_rho:
                    state.append(rho)
                keep.append(np.concatenate([np.asarray(s, dtype=float).ravel() for s in state]))
        rate = accepts / tries if tries else None
        return np.array(keep), rate

    def names(self):
        cols = self.setup.columns
        out = []
        for i in range(self.data.N):
            for j in self.ind:
                out.append(self._unit_name(cols[j].name, i))
        out.extend(cols[j].name for j in self.com)
        for j in self.rand:
            means, sdname = self._hyper_names(j)
            out.extend(means)
            out.append(sdname)
        if self.setup.sigma_regime == "unrelated" and self.data.N > 1:
            out.extend(f"sigma[{u.uid}]" for u in self.setup.units)
        else:
            out.append("sigma")
        if self.sample_rho:
            if self.setup.rho_regime == "unrelated" and self.data.N > 1:
                out.extend(f"rho[{u.uid}]" for u in self.setup.units)
            else:
                out.append("rho")
        return out

    def run(self):
        chains, rates = [], []
        for ch in range(self.settings.n_chains):
            arr, rate = self._run_chain(ch)
            chains.append(arr)
            rates.append(rate)
        stacked = np.stack(chains)  # (chains, samples, params)
        names = self.names()
        draws = {nm: stacked[:, :, k] for k, nm in enumerate(names)}
        # drop fixed parameters from the reported draws
        for nm in list(draws):
            if nm in self.fixed:
                del draws[nm]
        accept = None
        if self.sample_rho:
            accept = float(np.mean([np.mean(r) for r in rates]))
            if accept == 0.0:
                raise SamplerError(
                    "the autocorrelation sampler accepted no proposals; retune rho_proposal_sd"
                )
        return draws, accept
