"""Hansen's test for superior predictive ability with the stationary bootstrap."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


@dataclass(frozen=True, eq=False)
class LossMatrix:
    """``n`` blocks by ``m`` models."""

    losses: np.ndarray
    model_ids: tuple

    def __post_init__(self):
        L = np.asarray(self.losses, dtype=float)
        if L.ndim != 2 or L.shape[1] != len(self.model_ids):
            raise ValueError("losses must be (n_blocks, n_models) matching model_ids")
        if not np.isfinite(L).all():
            raise ValueError("loss matrix has non-finite entries")
        if len(set(self.model_ids)) != len(self.model_ids):
            raise ValueError("duplicate model ids")
        object.__setattr__(self, "losses", L)
        object.__setattr__(self, "model_ids", tuple(self.model_ids))

    @property
    def n(self) -> int:
        return self.losses.shape[0]

    def column(self, model_id) -> np.ndarray:
        return self.losses[:, self.model_ids.index(model_id)]

    @classmethod
    def from_csv(cls, text: str) -> "LossMatrix":
        """Read the long ``block,model,loss`` layout written by the forecasting step."""
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty loss file")
        models: list[str] = []
        blocks: list[int] = []
        table: dict = {}
        for r in rows:
            b, m = int(r["block"]), r["model"]
            if m not in models:
                models.append(m)
            if b not in blocks:
                blocks.append(b)
            table[(b, m)] = float(r["loss"])
        blocks.sort()
        try:
            L = np.array([[table[(b, m)] for m in models] for b in blocks])
        except KeyError as exc:
            raise ValueError(f"loss file is not aligned across models: missing {exc}") from None
        return cls(L, tuple(models))


@dataclass
class SpaConfig:
    reps: int = 10_000
    block_length: float = 3.0
    seed: int = 0
    variance: str = "bootstrap"  # or "hac": Newey-West long-run variance of each d_k

    def __post_init__(self):
        if self.reps < 1000:
            raise ValueError("need at least 1000 bootstrap replications")
        if not self.block_length >= 1:
            raise ValueError("mean block length must be >= 1")
        if self.variance not in ("bootstrap", "hac"):
            raise ValueError("variance must be 'bootstrap' or 'hac'")


@dataclass
class SpaResult:
    benchmark: str
    statistic: float
    p_consistent: float
    p_lower: float
    p_upper: float
    studentized: dict = field(default_factory=dict)
    mean_diff: dict = field(default_factory=dict)
    omega: dict = field(default_factory=dict)
    degenerate: bool = False

    @property
    def pvalue(self) -> float:
        return self.p_consistent

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "statistic": self.statistic,
            "p_consistent": self.p_consistent,
            "p_lower": self.p_lower,
            "p_upper": self.p_upper,
            "mean_diff": self.mean_diff,
            "omega": self.omega,
            "studentized": self.studentized,
            "degenerate": self.degenerate,
        }


def relative_losses(lm: LossMatrix, benchmark) -> tuple[np.ndarray, tuple]:
    """``d[t, k] = L_benchmark[t] - L_k[t]`` for every competitor ``k`` (positive: competitor better)."""
    if benchmark not in lm.model_ids:
        raise KeyError(f"unknown benchmark {benchmark!r}")
    if len(lm.model_ids) < 2:
        raise ValueError("need at least two models")
    b = lm.model_ids.index(benchmark)
    others = tuple(m for m in lm.model_ids if m != benchmark)
    idx = [lm.model_ids.index(m) for m in others]
    return lm.losses[:, [b]] - lm.losses[:, idx], others


def stationary_bootstrap_indices(n: int, mean_block_len: float, B: int, seed=0) -> np.ndarray:
    """Politis-Romano resampling indices, shape ``(B, n)``.

    Each position starts a new block at a uniform index with probability
    ``1 / mean_block_len`` and otherwise continues the previous index + 1
    modulo ``n``.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = 1.0 / mean_block_len
    starts = rng.integers(0, n, size=(B, n))
    new = rng.random((B, n)) < q
    new[:, 0] = True
    idx = np.empty((B, n), dtype=np.int64)
    idx[:, 0] = starts[:, 0]
    for t in range(1, n):
        idx[:, t] = np.where(new[:, t], starts[:, t], (idx[:, t - 1] + 1) % n)
    return idx


def spa_test(lm: LossMatrix, benchmark, config: SpaConfig | None = None, indices: np.ndarray | None = None) -> SpaResult:
    """Studentized SPA test of ``H0``: no competitor beats ``benchmark`` in expected loss.

    ``omega_k^2`` is the bootstrap variance of ``sqrt(n) * mean(d_k)``.  The
    three p-values differ only in the shift ``g`` subtracted from the
    bootstrap means (lower: ``max(dbar, 0)``, consistent: ``dbar`` when its
    studentized value is at least ``-sqrt(2 ln ln n)`` and 0 otherwise,
    upper: ``dbar``), and ``p = P*(T* >= T)``.
    """
    config = config or SpaConfig()
    d, others = relative_losses(lm, benchmark)
    n = d.shape[0]
    if n < 10:
        raise ValueError("SPA needs at least 10 loss blocks")
    if indices is None:
        indices = stationary_bootstrap_indices(n, config.block_length, config.reps, config.seed)
    dbar = d.mean(axis=0)
    # (B, k) bootstrap means
    boot = np.stack([d[:, k][indices].mean(axis=1) for k in range(d.shape[1])], axis=1)
    if config.variance == "hac":
        omega = np.sqrt(np.maximum([newey_west_variance(d[:, k]) for k in range(d.shape[1])], 0.0))
    else:
        omega = np.sqrt(n * boot.var(axis=0))
    info = dict(
        mean_diff={m: float(v) for m, v in zip(others, dbar)},
        omega={m: float(v) for m, v in zip(others, omega)},
    )
    rn = math.sqrt(n)
    zero = omega <= 1e-12 * max(1.0, float(np.abs(d).max()))
    if zero.any():
        pos = zero & (dbar > 1e-12 * max(1.0, float(np.abs(d).max())))
        if pos.any():
            return SpaResult(str(benchmark), math.inf, 0.0, 0.0, 0.0, degenerate=True, **info)
        if zero.all():
            return SpaResult(str(benchmark), 0.0, 1.0, 1.0, 1.0, degenerate=True, **info)
    keep = ~zero
    dk, om, bk = dbar[keep], omega[keep], boot[:, keep]
    t_k = rn * dk / om
    stat = max(0.0, float(t_k.max()))
    thresh = -math.sqrt(2.0 * math.log(math.log(n)))
    shifts = {
        "lower": np.maximum(dk, 0.0),
        "consistent": dk * (t_k >= thresh),
        "upper": dk,
    }
    p = {}
    for name, g in shifts.items():
        z = rn * (bk - g) / om
        t_star = np.maximum(z.max(axis=1), 0.0)
        p[name] = float(np.mean(t_star >= stat))
    stud = {m: float(rn * v / w) if w > 0 else math.nan for m, v, w in zip(others, dbar, omega)}
    return SpaResult(
        benchmark=str(benchmark),
        statistic=stat,
        p_consistent=p["consistent"],
        p_lower=p["lower"],
        p_upper=p["upper"],
        studentized=stud,
        **info,
    )


def compare_all(lm: LossMatrix, config: SpaConfig | None = None) -> dict[str, SpaResult]:
    """One SPA test per benchmark choice, sharing one set of bootstrap indices."""
    config = config or SpaConfig()
    if len(lm.model_ids) < 2:
        raise ValueError("need at least two models to compare")
    idx = stationary_bootstrap_indices(lm.n, config.block_length, config.reps, config.seed)
    return {str(m): spa_test(lm, m, config, indices=idx) for m in lm.model_ids}


def pvalue_table_csv(results: dict[str, SpaResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(results))
    w.writerow([repr(r.p_consistent) for r in results.values()])
    return buf.getvalue()


def pvalue_table_json(results: dict[str, SpaResult]) -> str:
    return json.dumps(
        {"p_values": {m: r.p_consistent for m, r in results.items()},
         "diagnostics": {m: r.to_dict() for m, r in results.items()}},
        indent=2,
    )


def newey_west_variance(x: np.ndarray, lags: int | None = None) -> float:
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = len(x)
    if lags is None:
        lags = int(math.floor(4 * (n / 100.0) ** (2.0 / 9.0)))
    v = x @ x / n
    for l in range(1, lags + 1):
        w = 1.0 - l / (lags + 1.0)
        v += 2.0 * w * (x[l:] @ x[:-l]) / n
    return float(v)


def diebold_mariano(loss_a, loss_b, lags: int | None = None) -> tuple[float, float]:
    """DM statistic for ``E[L_a - L_b] = 0`` with a Newey-West long-run variance; two-sided p."""
    d = np.asarray(loss_a, dtype=float) - np.asarray(loss_b, dtype=float)
    n = len(d)
    v = newey_west_variance(d, lags)
    if v <= 0:
        return (math.copysign(math.inf, d.mean()) if d.mean() != 0 else 0.0), (0.0 if d.mean() != 0 else 1.0)
    dm = float(d.mean() / math.sqrt(v / n))
    return dm, float(2.0 * stats.norm.sf(abs(dm)))
