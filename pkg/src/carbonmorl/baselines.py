"""Comparison schemes sharing the training machinery of the proposed method.

Each scheme differs only in how the three objective scores are turned into
the objectives that the policy improvement step sees.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .morl import check_simplex, standardize

METHODS = ("proposed", "scalarized", "ee_only", "rer")


@dataclass
class BaselineSpec:
    kind: str = "proposed"
    weights: tuple | None = None     # scalarization weights; None -> preference weights
    chi: float = 1.0                 # share of battery discharge counted as renewable

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown method '{self.kind}', expected one of {METHODS}")
        if self.weights is not None:
            self.weights = tuple(check_simplex(self.weights))
        if not 0.0 <= self.chi <= 1.0:
            raise ValueError("chi must lie in [0, 1]")

    @property
    def sustainability(self):
        return "rer" if self.kind == "rer" else "S"

    def objectives(self, q, zeta, standardize_scores=True):
        """Map scores (3, ...) and preferences to ``(objectives, zeta)``."""
        zeta = check_simplex(zeta)
        q = np.asarray(q, dtype=float)
        if self.kind == "ee_only":
            reduced = ee_only_objective(q)
            z = zeta[1:]
            z = z / z.sum() if z.sum() > 0 else np.full(2, 0.5)
            return reduced, z
        if self.kind == "scalarized":
            w = np.asarray(self.weights if self.weights is not None else zeta)
            scores = standardize(q) if standardize_scores else q
            return scalarized_reward(scores, w)[None], np.ones(1)
        return q, zeta


def scalarized_reward(q, weights):
    """sum_r w_r Q_r over the leading objective axis."""
    w = check_simplex(weights)
    q = np.asarray(q, dtype=float)
    return np.tensordot(w, q, axes=(0, 0))


def ee_only_objective(q):
    """Efficiency and delay scores only; sustainability is dropped."""
    return np.asarray(q, dtype=float)[1:3]


def rer_metric(u, u_b, d, e_tot, chi=1.0):
    """Fraction of consumed energy supplied by renewables (last axis = servers).

    Battery discharge counts as renewable with share ``chi``. Zero total
    energy gives 1.
    """
    num = np.sum(np.asarray(u) - np.asarray(u_b) + chi * np.asarray(d), axis=-1)
    den = np.sum(np.asarray(e_tot), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return np.clip(r, 0.0, 1.0)
