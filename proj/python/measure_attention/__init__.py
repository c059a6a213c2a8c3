"""Measure-valued softmax attention, Mercer spectra and the synthetic scaling experiment."""

import json

from . import _core
from ._core import (
    AttnHead,
    AttnParams,
    DiscreteMeasure,
    MercerSpectrum,
    build_recall_params,
    fit_rate,
    gen_norm_sq,
    isometry_map,
    lipschitz_probe,
    measure_attention,
    midpoint_grid,
    mixture,
    product_embed,
    recall_temperature,
    sample_mixture_tokens,
    softmax_weights,
    suite_names,
    synth_density,
    tail_norm,
    transformed_axis,
    truncation_bound,
    verify,
    wasserstein1_1d,
)

__all__ = [
    "AttnHead",
    "AttnParams",
    "DiscreteMeasure",
    "MercerSpectrum",
    "build_recall_params",
    "config",
    "fit_rate",
    "gen_example",
    "gen_norm_sq",
    "isometry_map",
    "lipschitz_probe",
    "measure_attention",
    "midpoint_grid",
    "mixture",
    "product_embed",
    "recall_temperature",
    "run_cell",
    "sample_mixture_tokens",
    "softmax_weights",
    "suite_names",
    "sweep",
    "synth_density",
    "tail_norm",
    "transformed_axis",
    "truncation_bound",
    "verify",
    "wasserstein1_1d",
]


def config(reduced=False, **overrides):
    """Experiment config as a dict; nested keys ("train", "student") merge."""
    cfg = json.loads(_core.default_config(reduced))
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return json.loads(_core.resolve_config(json.dumps(cfg)))


def gen_example(alpha, seed, cfg=None):
    return _core.gen_example(alpha, seed, json.dumps(cfg) if cfg else "")


def run_cell(alpha, n, seed, cfg=None):
    return json.loads(_core.run_cell(alpha, n, seed, json.dumps(cfg) if cfg else ""))


def sweep(cfg, out_dir, jobs=1):
    cells, reused, failed = _core.sweep(json.dumps(cfg), str(out_dir), jobs)
    return {"cells": cells, "reused": reused, "failed": failed}
