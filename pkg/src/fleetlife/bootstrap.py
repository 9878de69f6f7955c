"""Random weighted likelihood bootstrap.

Replicate ``b`` draws its weights from ``SeedSequence(master_seed,
spawn_key=(b,))``, i.e. the ``b``-th child of ``SeedSequence(master_seed)``.
A replicate's weights therefore never depend on ``B`` or on how the
replicates are scheduled across worker processes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .likelihood import FitError, FitResult, LTRCProblem, ModelSpec, fit_problem

__all__ = [
    "WeightLaw",
    "BootstrapEnsemble",
    "BootstrapError",
    "replicate_seed",
    "draw_weights",
    "run_bootstrap",
]

MAX_FAILED_FRACTION = 0.05


class BootstrapError(FitError):
    pass


class WeightLaw(str, enum.Enum):
    """Positive weight distributions with E(Z) = sqrt(Var(Z)).

    ``ONES`` (all weights 1) does not satisfy the moment condition; it only
    exists to check that the bootstrap reduces to the plain fit.
    """

    GAMMA_UNIT = "GammaUnit"
    GAMMA_HALF = "GammaHalf"
    GAMMA_TWO = "GammaTwo"
    BETA_SQRT = "BetaSqrt"
    ONES = "Ones"

    @classmethod
    def parse(cls, value) -> "WeightLaw":
        if isinstance(value, WeightLaw):
            return value
        for law in cls:
            if str(value).strip().lower() in (law.value.lower(), law.name.lower()):
                return law
        raise ValueError(f"unknown weight law {value!r}")

    @property
    def moments(self) -> tuple:
        """Exact (mean, variance)."""
        if self is WeightLaw.GAMMA_UNIT:
            return 1.0, 1.0
        if self is WeightLaw.GAMMA_HALF:
            return 0.5, 0.25
        if self is WeightLaw.GAMMA_TWO:
            return 2.0, 4.0
        if self is WeightLaw.BETA_SQRT:
            a = math.sqrt(2.0) - 1.0
            return a / (a + 1), a / ((a + 1) ** 2 * (a + 2))
        return 1.0, 0.0


CALIBRATING_LAWS = (WeightLaw.GAMMA_UNIT, WeightLaw.GAMMA_HALF, WeightLaw.GAMMA_TWO, WeightLaw.BETA_SQRT)


def replicate_seed(master_seed: int, b: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(b),))


def draw_weights(law, n: int, seed) -> np.ndarray:
    """``n`` i.i.d. positive weights; ``seed`` is an int or a SeedSequence."""
    law = WeightLaw.parse(law)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if law is WeightLaw.GAMMA_UNIT:
        w = rng.gamma(1.0, 1.0, n)
    elif law is WeightLaw.GAMMA_HALF:
        w = rng.gamma(1.0, 0.5, n)
    elif law is WeightLaw.GAMMA_TWO:
        w = rng.gamma(1.0, 2.0, n)
    elif law is WeightLaw.BETA_SQRT:
        w = rng.beta(math.sqrt(2.0) - 1.0, 1.0, n)
    else:
        w = np.ones(n)
    # a draw of exactly 0 has probability ~1e-300 but would break the likelihood
    return np.maximum(w, np.finfo(float).tiny)


@dataclass
class BootstrapEnsemble:
    base_fit: FitResult
    replicates: np.ndarray
    seeds: list
    master_seed: int
    law: WeightLaw
    B: int
    failed: list = field(default_factory=list)
    config_hash: str = ""

    @property
    def failed_count(self) -> int:
        return len(self.failed)

    def __len__(self):
        return self.replicates.shape[0]

    def unit_params(self, obs, key: str = "predict_group"):
        """Replicate-by-unit (mu, sigma) arrays of shape (B_ok, n)."""
        return self.base_fit.unit_params(obs, thetas=self.replicates, key=key)

    def as_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "master_seed": int(self.master_seed),
            "law": self.law.value,
            "B": int(self.B),
            "seed_scheme": "SeedSequence(master_seed, spawn_key=(b,))",
            "seeds": [int(s) for s in self.seeds],
            "failed": [int(s) for s in self.failed],
            "names": list(self.base_fit.names),
            "replicates": [[float(x) for x in row] for row in self.replicates],
            "base_fit": self.base_fit.as_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapEnsemble":
        base = FitResult.from_dict(d["base_fit"])
        reps = np.array(d["replicates"], dtype=float).reshape(-1, base.theta.size)
        return cls(
            base_fit=base,
            replicates=reps,
            seeds=list(d["seeds"]),
            master_seed=int(d["master_seed"]),
            law=WeightLaw.parse(d["law"]),
            B=int(d["B"]),
            failed=list(d.get("failed", [])),
            config_hash=d.get("config_hash", ""),
        )

    def digest(self) -> str:
        payload = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _replicate(problem: LTRCProblem, theta_hat, law, master_seed, b):
    problem.set_weights(draw_weights(law, len(problem.obs), replicate_seed(master_seed, b)))
    fit = fit_problem(problem, init=theta_hat, compute_covariance=False)
    return fit.theta if fit.converged else None


def _worker(args):
    spec, obs, coding, theta_hat, law, master_seed, indices = args
    problem = LTRCProblem(spec, obs, coding=coding)
    return [(b, _replicate(problem, theta_hat, law, master_seed, b)) for b in indices]


def run_bootstrap(spec: ModelSpec, obs, law=WeightLaw.GAMMA_UNIT, B: int = 2000, master_seed: int = 0,
                  base_fit: FitResult | None = None, jobs: int = 1, config_hash: str = "") -> BootstrapEnsemble:
    """Refit ``spec`` under ``B`` independent weight draws.

    Replicates start from the base estimate (the plain fit); a replicate
    that does not converge from there is retried from the default start.
    More than 5% non-converged replicates is an error.
    """
    from .likelihood import fit_mle

    law = WeightLaw.parse(law)
    if B < 1:
        raise ValueError("B must be >= 1")
    obs = [o for o in obs if o.in_fit]
    if base_fit is None:
        base_fit = fit_mle(spec, obs)
    if not base_fit.converged:
        raise BootstrapError("base fit did not converge")
    theta_hat = base_fit.theta
    indices = list(range(B))
    if jobs <= 1 or B < 2 * jobs:
        results = _worker((spec, obs, base_fit.coding, theta_hat, law, master_seed, indices))
    else:
        chunks = [indices[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(_worker, [(spec, obs, base_fit.coding, theta_hat, law, master_seed, c) for c in chunks])
            results = sorted((r for part in parts for r in part), key=lambda r: r[0])
    ok = [(b, th) for b, th in results if th is not None]
    failed = [b for b, th in results if th is None]
    if len(failed) / B > MAX_FAILED_FRACTION:
        raise BootstrapError(f"{len(failed)} of {B} bootstrap replicates failed to converge")
    reps = np.array([th for _, th in ok]).reshape(len(ok), theta_hat.size)
    return BootstrapEnsemble(
        base_fit=base_fit,
        replicates=reps,
        seeds=[b for b, _ in ok],
        master_seed=int(master_seed),
        law=law,
        B=B,
        failed=failed,
        config_hash=config_hash,
    )
