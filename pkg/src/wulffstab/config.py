"""Flat key-path configuration files and the experiment description.

Grammar, line by line:

    # comment (blank lines ignored)
    dotted.key.path = value

Values are JSON literals: numbers, quoted strings, booleans, and (nested)
arrays, e.g. ``integrand.matrix = [[1,0,0],[0,2,0],[0,0,4]]``.  Keys collect
into a nested mapping; unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field

import numpy as np


class ConfigError(ValueError):
    """Parse or validation failure; carries line/field diagnostics."""


_KNOWN_KEYS = {
    "integrand.kind", "integrand.matrix", "integrand.eps", "integrand.profile",
    "domain.kind", "domain.r", "domain.eps", "domain.profile", "domain.center",
    "domain.neck", "domain.lobe",
    "grid.h", "grid.refine", "grid.theta_min",
    "solver.tol", "solver.max_iter",
    "surface.resolution",
    "analysis.p", "analysis.slices", "analysis.fit_restarts",
    "analysis.with_slice",
    "output.report", "output.table", "output.field", "output.surface",
    "output.boundary",
    "seed", "threads",
}


def parse_flat_config(text, known_keys=_KNOWN_KEYS):
    """Parse the flat key-path grammar into a nested dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if known_keys is not None and key not in known_keys:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: {key!r} conflicts with a scalar key")
        node[parts[-1]] = parsed
    return out


@dataclass
class ExperimentConfig:
    """Validated description of one run (integrand, domain family, numerics)."""

    integrand_kind: str = "euclidean"
    integrand_matrix: list | None = None
    integrand_eps: float = 0.0
    integrand_profile: int = 1
    domain_kind: str = "wulff"
    domain_r: float = 1.0
    domain_eps: list = dataclass_field(default_factory=lambda: [0.0])
    domain_profile: int = 3
    domain_center: list | None = None
    domain_neck: float = 0.4
    domain_lobe: float = 1.2
    h: float = 1.0 / 16.0
    refine: list | None = None
    theta_min: float = 1e-4
    solver_tol: float = 1e-8
    solver_max_iter: int = 50
    resolution: int = 48
    p: float | None = None
    slices: int = 12
    fit_restarts: int = 2
    with_slice: bool = True
    out_report: str | None = None
    out_table: str | None = None
    out_field: str | None = None
    out_surface: str | None = None
    out_boundary: str | None = None
    seed: int = 0
    threads: int = 1
    dim: int = 3

    @classmethod
    def from_text(cls, text):
        tree = parse_flat_config(text)
        cfg = cls()
        integ = tree.get("integrand", {})
        cfg.integrand_kind = integ.get("kind", cfg.integrand_kind)
        cfg.integrand_matrix = integ.get("matrix", cfg.integrand_matrix)
        cfg.integrand_eps = float(integ.get("eps", cfg.integrand_eps))
        cfg.integrand_profile = int(integ.get("profile", cfg.integrand_profile))
        domain = tree.get("domain", {})
        cfg.domain_kind = domain.get("kind", cfg.domain_kind)
        cfg.domain_r = float(domain.get("r", cfg.domain_r))
        eps = domain.get("eps", cfg.domain_eps)
        cfg.domain_eps = [float(e) for e in (eps if isinstance(eps, list) else [eps])]
        cfg.domain_profile = int(domain.get("profile", cfg.domain_profile))
        cfg.domain_center = domain.get("center", cfg.domain_center)
        cfg.domain_neck = float(domain.get("neck", cfg.domain_neck))
        cfg.domain_lobe = float(domain.get("lobe", cfg.domain_lobe))
        grid = tree.get("grid", {})
        cfg.h = float(grid.get("h", cfg.h))
        cfg.refine = grid.get("refine", cfg.refine)
        cfg.theta_min = float(grid.get("theta_min", cfg.theta_min))
        solver = tree.get("solver", {})
        cfg.solver_tol = float(solver.get("tol", cfg.solver_tol))
        cfg.solver_max_iter = int(solver.get("max_iter", cfg.solver_max_iter))
        cfg.resolution = int(tree.get("surface", {}).get("resolution", cfg.resolution))
        ana = tree.get("analysis", {})
        cfg.p = ana.get("p", cfg.p)
        cfg.slices = int(ana.get("slices", cfg.slices))
        cfg.fit_restarts = int(ana.get("fit_restarts", cfg.fit_restarts))
        cfg.with_slice = bool(ana.get("with_slice", cfg.with_slice))
        out = tree.get("output", {})
        cfg.out_report = out.get("report", cfg.out_report)
        cfg.out_table = out.get("table", cfg.out_table)
        cfg.out_field = out.get("field", cfg.out_field)
        cfg.out_surface = out.get("surface", cfg.out_surface)
        cfg.out_boundary = out.get("boundary", cfg.out_boundary)
        cfg.seed = int(tree.get("seed", cfg.seed))
        cfg.threads = int(tree.get("threads", cfg.threads))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def validate(self):
        if self.integrand_kind not in ("euclidean", "ellipsoidal", "perturbed"):
            raise ConfigError(f"integrand.kind: unknown kind {self.integrand_kind!r}")
        if self.integrand_kind != "euclidean":
            A = np.asarray(self.integrand_matrix, dtype=float) \
                if self.integrand_matrix is not None else None
            if A is None or A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ConfigError("integrand.matrix: need a square matrix")
            self.dim = int(A.shape[0])
        if self.domain_kind not in ("wulff", "sphere", "dumbbell"):
            raise ConfigError(f"domain.kind: unknown kind {self.domain_kind!r}")
        if any(e < 0 for e in self.domain_eps):
            raise ConfigError("domain.eps: amplitudes must be nonnegative")
        if sorted(self.domain_eps, reverse=True) != list(self.domain_eps):
            raise ConfigError("domain.eps: list must be sorted descending")
        if self.h <= 0:
            raise ConfigError("grid.h: spacing must be positive")
        if self.refine is not None:
            ladder = [float(v) for v in self.refine]
            if any(b >= a for a, b in zip(ladder, ladder[1:])):
                raise ConfigError("grid.refine: ladder must be strictly decreasing")
            self.refine = ladder
        if self.resolution < 8:
            raise ConfigError("surface.resolution: need at least 8")
        return self

    def build_integrand(self):
        from .integrand import EllipticIntegrand
        if self.integrand_kind == "euclidean":
            return EllipticIntegrand.euclidean(self.dim)
        A = np.asarray(self.integrand_matrix, dtype=float)
        if self.integrand_kind == "ellipsoidal":
            return EllipticIntegrand.ellipsoidal(A)
        return EllipticIntegrand.perturbed(A, eps=self.integrand_eps,
                                           profile=self.integrand_profile)

    def build_profile(self, integrand, eps=None):
        from .surface import (WulffProfile, PerturbedWulffProfile,
                              SphereProfile, DumbbellProfile)
        if self.domain_kind == "sphere":
            return SphereProfile(self.domain_r)
        if self.domain_kind == "dumbbell":
            return DumbbellProfile(neck=self.domain_neck, lobe=self.domain_lobe)
        e = self.domain_eps[0] if eps is None else eps
        if e == 0.0:
            return WulffProfile(integrand, self.domain_r)
        return PerturbedWulffProfile(integrand, r=self.domain_r, eps=e,
                                     profile=self.domain_profile)

    def center(self):
        if self.domain_center is not None:
            return np.asarray(self.domain_center, dtype=float)
        return np.zeros(self.dim)
