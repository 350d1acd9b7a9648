"""Dataset-level runs: simulate, calibrate, static pruning, matched comparisons."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import budget
from ..config import RunConfig, config_to_dict
from ..dtp import prune_topk, token_importance
from ..errors import InvalidArgument, NonConvergence
from ..mag import init_mag
from ..report import PruneReport
from ..vlt import init_weights, model_forward
from .synthetic import Dataset, gen_synthetic

log = logging.getLogger(__name__)


@dataclass
class Model:
    weights: object
    mag: object
    flops: budget.FlopsModel


def build_model(config: RunConfig, mag=None) -> Model:
    cfg = config.model
    return Model(init_weights(cfg), init_mag(cfg) if mag is None else mag,
                 budget.FlopsModel.from_config(cfg, config.include_overhead))


def dataset_for(config: RunConfig) -> Dataset:
    return gen_synthetic(config.model, config.data, config.dataset_size, config.data_seed)


def batch_order(config: RunConfig, dataset: Dataset) -> list:
    """Instance order used for batching.

    Sorted inference groups pairs by planted difficulty (stable, so ties keep
    dataset order); otherwise dataset order is used.
    """
    idx = np.arange(len(dataset))
    if config.sorted_inference:
        idx = np.argsort(dataset.difficulty, kind="stable")
    return [int(i) for i in idx]


@dataclass
class SimulationOutput:
    report: PruneReport
    forwards: list = field(default_factory=list)   # (instance indices, ForwardResult) per batch


def simulate(config: RunConfig, dataset: Dataset, model: Model, temperature: float | None = None,
             dtp_factory=None, keep_forwards: bool = False) -> SimulationOutput:
    """Forward the whole dataset in mini-batches and aggregate one report.

    ``dtp_factory(indices)`` may return a per-batch pruning override (see
    :func:`madtp.vlt.model_forward`).
    """
    cfg = config.model
    temperature = cfg.temperature if temperature is None else temperature
    order = batch_order(config, dataset)
    instances, forwards = {}, []
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        factory = dtp_factory(idx) if dtp_factory is not None else None
        result = model_forward(dataset.images[idx], dataset.texts[idx], cfg, model.weights,
                               model.mag, temperature=temperature, dtp_factory=factory,
                               flops_model=model.flops, instance_ids=idx)
        for inst in result.report.instances:
            instances[inst.index] = replace(inst, difficulty=int(dataset.difficulty[inst.index]))
        if keep_forwards:
            forwards.append((idx, result))
    ordered = [instances[i] for i in range(len(dataset))]
    report = PruneReport(
        config=config_to_dict(config),
        instances=ordered,
        dataset_gflops=(budget.dataset_average_flops([i.gflops for i in ordered])
                        if ordered else None),
        baseline_gflops=budget.baseline_flops(model.flops, cfg.n_patches, cfg.n_words),
        temperature=float(temperature),
    )
    return SimulationOutput(report, forwards)


def run_simulate(config: RunConfig, model: Model | None = None, dataset: Dataset | None = None,
                 temperature: float | None = None, keep_forwards: bool = True) -> SimulationOutput:
    model = build_model(config) if model is None else model
    dataset = dataset_for(config) if dataset is None else dataset
    return simulate(config, dataset, model, temperature, keep_forwards=keep_forwards)


@dataclass
class CalibrationResult:
    temperature: float
    converged: bool
    iterations: int
    trace: list          # (iteration, measured GFLOPs, temperature used)
    target_gflops: float
    report: PruneReport


def run_calibrate(config: RunConfig, target_ratio: float | None = None,
                  model: Model | None = None, dataset: Dataset | None = None,
                  strict: bool = True) -> CalibrationResult:
    """Alternate simulate and temperature updates until the measured
    dataset-average GFLOPs sit within the tolerance of the target.

    Raises :class:`NonConvergence` (carrying the trace) when the iteration cap
    is hit, unless ``strict`` is false.
    """
    ctl = config.controller
    r = config.model.target_ratio if target_ratio is None else target_ratio
    model = build_model(config) if model is None else model
    dataset = dataset_for(config) if dataset is None else dataset
    if len(dataset) == 0:
        raise InvalidArgument("cannot calibrate on an empty dataset")
    base = budget.baseline_flops(model.flops, config.model.n_patches, config.model.n_words)
    t0 = min(max(config.model.temperature, ctl.t_min), ctl.t_max)
    state = budget.BudgetState(target_ratio=r, baseline=base, temperature=t0, eta=ctl.eta,
                               t_min=ctl.t_min, t_max=ctl.t_max)
    trace = []
    for it in range(ctl.max_iters + 1):
        out = simulate(config, dataset, model, state.temperature)
        measured = out.report.dataset_gflops
        trace.append((it, measured, state.temperature))
        log.info("calibrate iter %d: T=%.6g measured=%.6g target=%.6g", it, state.temperature,
                 measured, state.target)
        if abs(measured - state.target) / state.target <= ctl.tolerance:
            return CalibrationResult(state.temperature, True, it, trace, state.target, out.report)
        if it == ctl.max_iters:
            break
        previous = state.temperature
        state = budget.adjust_temperature(state, measured)
        if state.temperature == previous:
            # pinned at a clamp: the forward pass is deterministic, so every
            # further iteration would measure the same cost
            log.info("calibrate: temperature pinned at %.6g, stopping", previous)
            break
    if strict:
        raise NonConvergence(
            f"no convergence to {state.target:.6g} GFLOPs (r={r}) after {len(trace)} iterations; "
            f"last measured {trace[-1][1]:.6g} at T={trace[-1][2]:.6g}", trace)
    return CalibrationResult(state.temperature, False, trace[-1][0], trace, state.target,
                             out.report)


def _check_stp_k(config: RunConfig, k: int):
    cfg = config.model
    if k < 0:
        raise InvalidArgument("k must be non-negative")
    for modality, n in (("vision", cfg.n_patches), ("language", cfg.n_words)):
        # every layer must still have more than k content tokens to drop from
        if cfg.prunes(modality) and n - k * cfg.layers < 1:
            raise InvalidArgument(
                f"k={k} removes {k * cfg.layers} of {n} {modality} tokens over "
                f"{cfg.layers} layers; at least one must remain")


def stp_factory(config: RunConfig, k: int):
    """Static pruning: drop the ``k`` lowest-TIS content tokens at every layer."""
    cfg = config.model

    def per_batch(_indices):
        def factory(modality, layer):
            if k == 0 or not cfg.prunes(modality):
                return None

            def handle(batch, maps, _layer):
                scores = [token_importance(m.a_self, m.a_token, 0, cfg.tis_components).tis
                          for m in maps]
                counts = [x.shape[0] - k for x in batch.tokens]
                return prune_topk(batch, scores, counts, merge=False)
            return handle
        return factory
    return per_batch


def run_stp_baseline(config: RunConfig, k: int | None = None, model: Model | None = None,
                     dataset: Dataset | None = None) -> SimulationOutput:
    k = config.stp_k if k is None else k
    _check_stp_k(config, k)
    model = build_model(config) if model is None else model
    dataset = dataset_for(config) if dataset is None else dataset
    return simulate(config, dataset, model, dtp_factory=stp_factory(config, k))


def matched_factory(config: RunConfig, reference: PruneReport, score: str = "self"):
    """Fixed-count pruning that reproduces ``reference``'s per-instance,
    per-layer output counts, ranking tokens by a single score component.

    Pruned tokens are merged exactly as in the dynamic rule, so the cost of
    every layer matches the reference and GFLOPs are equal by construction.
    """
    cfg = config.model
    by_index = {inst.index: inst for inst in reference.instances}

    def per_batch(indices):
        def factory(modality, layer):
            if not cfg.prunes(modality):
                return None

            def handle(batch, maps, _layer):
                scores, counts = [], []
                for b, m in enumerate(maps):
                    imp = token_importance(m.a_self, m.a_token, 0, cfg.tis_components)
                    scores.append({"self": imp.s_self, "cls": imp.s_cls, "token": imp.s_token,
                                   "tis": imp.tis}[score])
                    rec = by_index[indices[b]].branch(modality)[layer]
                    counts.append(len(rec.kept))
                return prune_topk(batch, scores, counts, merge=True)
            return handle
        return factory
    return per_batch


def planted_retention(report: PruneReport, dataset: Dataset, modality: str = "vision") -> np.ndarray:
    """Per pair, fraction of planted tokens still alive after the last layer.

    Pairs with no planted token get NaN.
    """
    planted = dataset.planted_patches if modality == "vision" else dataset.planted_words
    out = np.full(len(report.instances), np.nan)
    for i, inst in enumerate(report.instances):
        tokens = set(int(p) + 1 for p in planted[inst.index])
        if not tokens:
            continue
        alive = set(inst.branch(modality)[-1].kept)
        out[i] = len(tokens & alive) / len(tokens)
    return out


def sign_test(wins: int, losses: int) -> float:
    """One-sided exact sign test: P(X >= wins) for X ~ Bin(wins + losses, 1/2)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return math.fsum(math.comb(n, j) for j in range(wins, n + 1)) / 2.0 ** n
