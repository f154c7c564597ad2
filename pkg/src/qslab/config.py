"""Structured experiment configuration: dict schema <-> model objects.

The canonical form is the JSON dict (documented in the README); objects are
built on demand so a loaded config round-trips byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .measures import ProductMeasure
from .model import (EXCLUSION, MISANTHROPE, ZERO_RANGE, JumpKernel, Lattice,
                    Model, RateFunction, TargetSet, g_capped, g_constant,
                    g_from_table, g_identity)

EXPERIMENT_KINDS = ("survival", "phi-iterate", "phi-direct", "spectral",
                    "oracle-check", "domination", "sigma-exit", "couplings")


class ConfigError(ValueError):
    """Malformed experiment configuration."""


def _require(mapping: dict, key: str, ctx: str):
    if key not in mapping:
        raise ConfigError(f"missing {ctx}.{key}")
    return mapping[key]


def g_from_spec(spec: dict):
    kind = _require(spec, "kind", "rates.g")
    if kind == "identity":
        return g_identity, None
    if kind == "constant":
        return g_constant, 1.0
    if kind == "capped":
        cap = int(_require(spec, "cap", "rates.g"))
        return g_capped(cap), float(cap)
    if kind == "table":
        values = _require(spec, "values", "rates.g")
        return g_from_table(values), float(max(values))
    raise ConfigError(f"unknown g kind {kind!r}")


def rates_from_dict(spec: dict) -> RateFunction:
    family = _require(spec, "family", "rates")
    if family == EXCLUSION:
        return RateFunction.exclusion()
    if family == ZERO_RANGE:
        g, g_sup = g_from_spec(_require(spec, "g", "rates"))
        return RateFunction.zero_range(g, g_sup)
    if family == MISANTHROPE:
        g, g_sup = g_from_spec(_require(spec, "g", "rates"))
        b_spec = _require(spec, "b", "rates")
        b_kind = _require(b_spec, "kind", "rates.b")
        if b_kind == "g_over_crowding":
            def b(n, m):
                return g(n) / (m + 1.0)
        elif b_kind == "table2d":
            table = np.asarray(_require(b_spec, "values", "rates.b"),
                               dtype=np.float64)

            def b(n, m):
                return float(table[min(n, table.shape[0] - 1),
                                   min(m, table.shape[1] - 1)])
        else:
            raise ConfigError(f"unknown b kind {b_kind!r}")
        return RateFunction.misanthrope(b, g, g_sup)
    raise ConfigError(f"unknown rate family {family!r}")


def lattice_from_dict(spec: dict) -> Lattice:
    return Lattice(tuple(_require(spec, "extent", "lattice")),
                   spec.get("boundary", "torus"))


def kernel_from_dict(spec: dict) -> JumpKernel:
    return JumpKernel(np.asarray(_require(spec, "offsets", "kernel")),
                      np.asarray(_require(spec, "weights", "kernel"),
                                 dtype=np.float64))


def target_from_dict(spec: dict) -> TargetSet:
    return TargetSet(np.asarray(_require(spec, "sites", "target")),
                     int(_require(spec, "threshold", "target")))


@dataclass
class ExperimentConfig:
    """Validated view over the raw config dict (kept verbatim for hashing)."""

    raw: dict

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig(dict(raw))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        raw = self.raw
        kind = _require(raw, "experiment", "config")
        if kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {kind!r}")
        model_spec = _require(raw, "model", "config")
        for key in ("lattice", "kernel", "rates"):
            _require(model_spec, key, "model")
        rho = raw.get("rho")
        if rho is not None and not 0.0 <= float(rho):
            raise ConfigError(f"density must be nonnegative, got {rho}")
        budgets = raw.get("budgets", {})
        for key, value in budgets.items():
            if key in ("n_traj", "n_particles", "iterations", "order") \
                    and int(value) <= 0:
                raise ConfigError(f"budget {key} must be positive")
            if key in ("t_max", "kappa") and float(value) <= 0:
                raise ConfigError(f"budget {key} must be positive")
        if "seed" in raw and not 0 <= int(raw["seed"]) < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        # object construction surfaces structural errors early
        self.model()
        if "target" in raw:
            self.target().validate_on(self.lattice())

    # -- parsed views -------------------------------------------------------

    def lattice(self) -> Lattice:
        return lattice_from_dict(self.raw["model"]["lattice"])

    def kernel(self) -> JumpKernel:
        return kernel_from_dict(self.raw["model"]["kernel"])

    def rates(self) -> RateFunction:
        return rates_from_dict(self.raw["model"]["rates"])

    def model(self) -> Model:
        return Model(self.lattice(), self.kernel(), self.rates())

    def target(self) -> TargetSet:
        return target_from_dict(self.raw["target"])

    def measure(self) -> ProductMeasure:
        if "rho" not in self.raw:
            raise ConfigError("experiment needs a density rho")
        return ProductMeasure.at_density(float(self.raw["rho"]), self.rates())

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    @property
    def seed(self) -> int:
        if "seed" not in self.raw:
            raise ConfigError("seed required (config field or --seed flag)")
        return int(self.raw["seed"])

    @property
    def budgets(self) -> dict:
        return self.raw.get("budgets", {})

    def budget(self, key: str, default: Any = None):
        val = self.budgets.get(key, default)
        if val is None:
            raise ConfigError(f"budget {key} required for {self.experiment}")
        return val
