"""Simulated prison-survey microdata used as the bundled fixture.

The schema copies the 26 variables of a mental-health-in-prison survey
(types, level codings, plausible missingness); values are drawn from a small
latent-factor model so that variables correlate the way such data usually
do. The rows are synthetic and describe nobody.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .tabular import Dataset, Kind, Schema, Variable, load_csv

__all__ = ["prison_schema", "make_prison_like", "load_prison_fixture", "DISTANCE_EXCLUDED"]

# variables left out of distance computations in the reference run (nominal
# JOB plus the four responsible for near-singular covariance)
DISTANCE_EXCLUDED = ("JOB", "SUICIDE.HR", "SUICIDE.SCORE", "CHILDREN.JUDGE", "PERSONALITY")

_BINARIES = (
    "DISCIPLINARY",
    "SEPARATION",
    "CHILDREN.JUDGE",
    "PLACEMENT",
    "ABUSE",
    "DEPRESSION",
    "AGORAPHOBIA",
    "PTSD",
    "ALCOHOL",
    "SUBSTANCE",
    "SCHIZOPHRENIA",
    "SUICIDE.HR",
    "SUICIDE.PAST",
)


def prison_schema() -> Schema:
    V = Variable
    Q, O, B, N = Kind.QUANTITATIVE, Kind.ORDINAL, Kind.BINARY, Kind.NOMINAL
    return Schema(
        (
            V("AGE", Q),
            V("JOB", N, tuple(range(8)), missing_allowed=True),
            V("DURATION", O, (1, 2, 3, 4, 5)),
            V("DISCIPLINARY", B),
            V("N.CHILDREN", Q, missing_allowed=True),
            V("N.SIBLINGS", Q, missing_allowed=True),
            V("EDUCATION", O, (1, 2, 3, 4, 5), missing_allowed=True),
            V("SEPARATION", B),
            V("CHILDREN.JUDGE", B),
            V("PLACEMENT", B),
            V("ABUSE", B, missing_allowed=True),
            V("SEVERITY", O, (1, 2, 3, 4, 5, 6, 7)),
            V("DEPRESSION", B),
            V("AGORAPHOBIA", B),
            V("PTSD", B),
            V("ALCOHOL", B),
            V("SUBSTANCE", B),
            V("SCHIZOPHRENIA", B),
            V("PERSONALITY", O, (1, 2, 3, 4)),
            V("NS", O, (1, 2, 3)),
            V("HA", O, (1, 2, 3)),
            V("RD", O, (1, 2, 3)),
            V("SUICIDE.SCORE", O, (1, 2, 3, 4, 5, 6)),
            V("SUICIDE.HR", B),
            V("SUICIDE.PAST", B),
            V("DUR.INTERV", Q),
        )
    )


def _ordinal(latent, cuts, rng):
    return 1 + np.searchsorted(np.asarray(cuts), latent + rng.normal(0, 0.6, len(latent)))


def _binary(logit, rng):
    return (rng.random(len(logit)) < 1 / (1 + np.exp(-logit))).astype(float)


def _blank(values, rate, rng):
    values = values.astype(float)
    values[rng.random(len(values)) < rate] = np.nan
    return values


def make_prison_like(n: int = 799, seed: int = 2003) -> Dataset:
    rng = np.random.default_rng(seed)
    illness = rng.normal(size=n)  # psychiatric burden
    adversity = 0.35 * illness + rng.normal(size=n)  # childhood adversity
    impulsive = 0.3 * illness + 0.3 * adversity + rng.normal(size=n)

    age = np.clip(np.round(rng.normal(34, 10, n) - 2.0 * impulsive), 18, 78)
    education = _ordinal(-0.8 * adversity + 0.02 * (age - 34), [-1.3, -0.2, 0.7, 1.6], rng)
    job = np.where(
        rng.random(n) < 0.25,
        7,
        np.clip(np.round(5 - 0.9 * (education - 2) + rng.normal(0, 1.3, n)), 0, 6),
    )
    duration = _ordinal(0.4 * impulsive + 0.02 * (age - 34), [-1.2, -0.1, 0.6, 1.7], rng)
    n_children = rng.poisson(np.clip(0.4 + 0.05 * (age - 18), 0.2, None))
    n_siblings = rng.poisson(np.exp(1.2 + 0.15 * adversity))
    severity = _ordinal(1.1 * illness, [-1.6, -0.9, -0.3, 0.3, 0.9, 1.6], rng)

    def b(logit):
        return _binary(logit, rng)

    cols = {
        "AGE": age,
        "JOB": _blank(job, 0.02, rng),
        "DURATION": duration,
        "DISCIPLINARY": b(-1.2 + 0.8 * impulsive),
        "N.CHILDREN": _blank(n_children, 0.03, rng),
        "N.SIBLINGS": _blank(n_siblings, 0.04, rng),
        "EDUCATION": _blank(education, 0.02, rng),
        "SEPARATION": b(-0.2 + 0.9 * adversity),
        "CHILDREN.JUDGE": b(-1.0 + 1.1 * adversity + 0.3 * impulsive),
        "PLACEMENT": b(-1.4 + 1.0 * adversity),
        "ABUSE": _blank(b(-1.0 + 0.9 * adversity + 0.3 * illness), 0.03, rng),
        "SEVERITY": severity,
        "DEPRESSION": b(-1.0 + 0.9 * illness),
        "AGORAPHOBIA": b(-1.8 + 0.6 * illness),
        "PTSD": b(-1.6 + 0.5 * illness + 0.5 * adversity),
        "ALCOHOL": b(-1.1 + 0.5 * impulsive),
        "SUBSTANCE": b(-0.7 + 0.7 * impulsive - 0.03 * (age - 34)),
        "SCHIZOPHRENIA": b(-2.5 + 0.8 * illness),
        "PERSONALITY": _ordinal(0.6 * impulsive + 0.4 * illness, [-0.5, 0.5, 1.4], rng),
        "NS": _ordinal(0.8 * impulsive, [-0.6, 0.6], rng),
        "HA": _ordinal(0.6 * illness - 0.2 * impulsive, [-0.6, 0.6], rng),
        "RD": _ordinal(rng.normal(size=n) - 0.2 * adversity, [-0.6, 0.6], rng),
    }
    suicide = _ordinal(0.8 * illness + 0.3 * adversity, [-0.9, -0.2, 0.4, 1.0, 1.7], rng)
    cols["SUICIDE.SCORE"] = suicide
    flip = rng.random(n) < 0.04
    cols["SUICIDE.HR"] = np.where(flip, 1 - (suicide >= 5), suicide >= 5).astype(float)
    cols["SUICIDE.PAST"] = b(-1.3 + 0.5 * illness + 0.4 * (suicide - 3))
    cols["DUR.INTERV"] = np.clip(np.round(rng.normal(115, 25, n) + 6 * severity), 40, 240)
    return Dataset(prison_schema(), cols)


def load_prison_fixture() -> Dataset:
    """The bundled 799-row CSV (identical to ``make_prison_like()``)."""
    path = resources.files("synthguard") / "data" / "prison_fixture.csv"
    with resources.as_file(path) as p:
        return load_csv(p, prison_schema())
