"""Posterior draw container, summaries and split-R-hat."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def split_rhat(draws: np.ndarray) -> float:
    """Split-chain potential scale reduction for draws shaped (chains, iterations)."""
    x = np.asarray(draws, dtype=float)
    n = x.shape[1] // 2
    if n < 2:
        return float("nan")
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    within = halves.var(axis=1, ddof=1).mean()
    between = n * halves.mean(axis=1).var(ddof=1)
    if within == 0:
        return 1.0 if between == 0 else float("inf")
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def mc_standard_error(draws: np.ndarray) -> float:
    """Monte Carlo SE of the mean via batch means over the pooled chains."""
    x = np.asarray(draws, dtype=float).reshape(draws.shape[0], -1)
    batches = []
    for chain in x:
        b = max(1, int(np.sqrt(len(chain))))
        m = len(chain) // b
        batches.append(chain[: m * b].reshape(m, b).mean(axis=1))
    bm = np.concatenate(batches)
    return float(bm.std(ddof=1) / np.sqrt(len(bm)))


@dataclass
class PooledPosterior:
    """MCMC draws shaped (chains, kept, ...) plus chain metadata.

    ``labels`` names the common parameters; ``psi_offset`` is where the blip
    parameters start (non-zero for the one-stage model, which also carries
    treatment-free means).
    """

    labels: tuple[str, ...]
    draws: dict[str, np.ndarray]
    n_chains: int
    n_warmup: int
    n_kept: int
    seed: int
    site_ids: tuple[str, ...] = ()
    psi_offset: int = 0
    horseshoe: tuple[int, ...] = ()
    intercepts: tuple[int, ...] = (0,)
    extra: dict = field(default_factory=dict)

    @property
    def psi_labels(self) -> tuple[str, ...]:
        return self.labels[self.psi_offset:]

    def psi_draws(self) -> np.ndarray:
        """Blip common-mean draws flattened over chains: (n_chains * n_kept, n_psi)."""
        th = self.draws["theta"][:, :, self.psi_offset:]
        return th.reshape(-1, th.shape[-1])

    def mean(self) -> np.ndarray:
        return self.psi_draws().mean(axis=0)

    def median(self) -> np.ndarray:
        return np.median(self.psi_draws(), axis=0)

    def quantile(self, q) -> np.ndarray:
        return np.quantile(self.psi_draws(), q, axis=0)

    def rhat(self) -> dict[str, float]:
        th = self.draws["theta"]
        out = {lab: split_rhat(th[:, :, j]) for j, lab in enumerate(self.labels)}
        sig = self.draws["sigma"]
        for j, lab in enumerate(self.labels):
            if np.all(np.isfinite(sig[:, :, j])) and np.ptp(sig[:, :, j]) > 0:
                out[f"sigma[{lab}]"] = split_rhat(sig[:, :, j])
        return out

    def mc_se(self) -> np.ndarray:
        th = self.draws["theta"][:, :, self.psi_offset:]
        return np.array([mc_standard_error(th[:, :, j]) for j in range(th.shape[-1])])

    def rao_blackwell(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Posterior mean and sd of psi from the per-draw Gaussian conditionals."""
        cm = self.draws.get("cond_mean")
        if cm is None or np.isnan(cm).any():
            return None
        cm = cm[:, :, self.psi_offset:].reshape(-1, cm.shape[-1] - self.psi_offset)
        cv = self.draws["cond_var"][:, :, self.psi_offset:].reshape(cm.shape)
        mean = cm.mean(axis=0)
        var = cv.mean(axis=0) + cm.var(axis=0)
        return mean, np.sqrt(var)

    def summary(self, selected: list[int] | None = None) -> dict:
        """JSON-ready summary of every common parameter and between-site SD."""
        th = self.draws["theta"].reshape(-1, len(self.labels))
        sig = self.draws["sigma"].reshape(-1, len(self.labels))
        rh = self.rhat()
        params = {}
        for j, lab in enumerate(self.labels):
            x = th[:, j]
            params[lab] = _stats(x) | {"rhat": _finite(rh.get(lab))}
            s = sig[:, j]
            params[f"sigma[{lab}]"] = _stats(s) | {"rhat": _finite(rh.get(f"sigma[{lab}]"))}
        tau = self.draws.get("tau")
        if tau is not None and np.all(np.isfinite(tau)):
            params["tau"] = _stats(tau.ravel()) | {"rhat": _finite(split_rhat(tau))}
        return {
            "parameters": params,
            "chains": self.n_chains,
            "warmup": self.n_warmup,
            "kept": self.n_kept,
            "seed": self.seed,
            "sites": list(self.site_ids),
            "selected": [self.psi_labels[t] for t in (selected or [])],
        }

    def draws_table(self) -> tuple[list[str], np.ndarray]:
        """Header and rows for a draws CSV (chain, iteration, params, sigmas, tau)."""
        C, N = self.n_chains, self.n_kept
        cols = ["chain", "iteration"] + list(self.labels) + [f"sigma[{l}]" for l in self.labels]
        parts = [np.repeat(np.arange(C), N)[:, None], np.tile(np.arange(N), C)[:, None],
                 self.draws["theta"].reshape(C * N, -1), self.draws["sigma"].reshape(C * N, -1)]
        tau = self.draws.get("tau")
        if tau is not None and np.all(np.isfinite(tau)):
            cols.append("tau")
            parts.append(tau.reshape(C * N, 1))
        return cols, np.hstack(parts)


def summary_bytes(posterior: PooledPosterior, selected: list[int] | None = None) -> bytes:
    """Canonical JSON of :meth:`PooledPosterior.summary` (stable for a fixed seed)."""
    doc = posterior.summary(selected)
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode() + b"\n"


def write_posterior(posterior: PooledPosterior, out_dir: str | Path,
                    selected: list[int] | None = None) -> tuple[Path, Path]:
    """Write ``draws.csv`` and ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols, table = posterior.draws_table()
    draws = out / "draws.csv"
    with open(draws, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in table:
            w.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])
    summary = out / "summary.json"
    summary.write_bytes(summary_bytes(posterior, selected))
    return draws, summary


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _stats(x: np.ndarray) -> dict:
    q = np.quantile(x, [0.025, 0.5, 0.975])
    return {"mean": float(np.mean(x)), "sd": float(np.std(x, ddof=1)), "median": float(q[1]),
            "q2.5": float(q[0]), "q97.5": float(q[2])}
