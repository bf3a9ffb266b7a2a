"""Command-line interface.

``marglik <command> --config run.json [--threads n] [--out path]``

Commands run the pipeline simulate -> sample -> fit-proposal -> estimate and
the reports expect, tune and compare.  Every JSON report carries ``seed`` and
``config_hash``; wall-clock timings go to a ``.timing.json`` sidecar so the
report itself is byte-identical for a given config whatever ``--threads`` is.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, PhiSpec, RunConfig, load_config
from .core import NumericalError, RngStream
from .is2 import WeightedDraws, compare_models, posterior_expectation, run_is2
from .models import build_model
from .models.io import read_dataset, write_dataset
from .proposal import (
    ExactNormalREProposals,
    GaussianMixtureProposal,
    PriorREProposals,
    fit_laplace_re_proposals,
    fit_re_proposals,
    fit_theta_mixture,
    re_proposals_from_dict,
)
from .sampler import read_draws, run_pm_mh, write_draws
from .tuning import calibrate_N, measure_inflation, tuning_report

log = logging.getLogger("marglik")

COMMANDS = ("simulate", "sample", "fit-proposal", "estimate", "expect", "tune", "compare")


# ---------------------------------------------------------------------------
# JSON output


def _clean(obj):
    """Convert numpy scalars and arrays to plain JSON values; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(doc) -> str:
    """Canonical JSON: sorted keys, shortest round-trip float repr."""
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _emit(doc, out: Path | None, timing: dict | None = None) -> None:
    text = dumps(doc)
    if out is None:
        sys.stdout.write(text)
        return
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text)
    if timing is not None:
        with open(f"{out}.timing.json", "w", encoding="utf-8") as fh:
            fh.write(dumps(timing))


def _stamp(cfg: RunConfig, doc: dict) -> dict:
    return {**doc, "seed": cfg.seed, "config_hash": cfg.config_hash(), "model": cfg.model}


def _require_out(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("out", "this command writes a file; pass --out or set 'out'")
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    return Path(cfg.out)


# ---------------------------------------------------------------------------
# shared setup


def _model(cfg: RunConfig):
    try:
        return build_model(cfg.model, **cfg.hyper)
    except (TypeError, ValueError) as exc:
        raise ConfigError("hyper", str(exc)) from None


def _dataset(cfg: RunConfig, model):
    path = cfg.require_file("data")
    try:
        return read_dataset(path, model)
    except (ValueError, KeyError) as exc:
        raise ConfigError("data", str(exc)) from None


def _draws(cfg: RunConfig, model):
    draws = read_draws(cfg.require_file("draws"))
    if draws.theta_draws.shape[1] != model.d_theta:
        raise ConfigError("draws", f"expected {model.d_theta} theta columns, "
                                   f"found {draws.theta_draws.shape[1]}")
    return draws


def _fit_re(cfg: RunConfig, model, dataset, draws, root: RngStream):
    p = cfg.proposal
    kind = p.re_kind
    if kind == "prior":
        return PriorREProposals(dataset.S, p.antithetic)
    if kind == "exact_normal":
        if not hasattr(model, "conditional_re_posterior"):
            raise ConfigError("proposal.re_kind", f"exact_normal is not available for {cfg.model}")
        return ExactNormalREProposals(model, dataset)
    if kind == "laplace":
        return fit_laplace_re_proposals(model, dataset, w_def=p.w_def, stratified=p.stratified,
                                        antithetic=p.antithetic, rng=root.child("laplace").generator(),
                                        refine=p.refine)
    if draws is None or draws.alpha_draws is None:
        raise ConfigError("proposal.re_kind", "conditional proposals need draws with random effects")
    if dataset is not None and draws.alpha_draws.shape[1] != dataset.S:
        raise ConfigError("draws", "random-effect columns do not match the dataset's subjects")
    return fit_re_proposals(draws, w_def=p.w_def, stratified=p.stratified, antithetic=p.antithetic)


def _fit_theta(cfg: RunConfig, draws, root: RngStream) -> GaussianMixtureProposal:
    p = cfg.proposal
    return fit_theta_mixture(draws, K_max=p.K_max, rng=root.child("mixture").generator(),
                             n_init=p.n_init, tail_df=p.tail_df, inflate=p.inflate, dedupe=p.dedupe)


def _proposals(cfg: RunConfig, model, dataset, root: RngStream):
    """Proposals from ``proposal_file`` if given, else fitted to ``draws``."""
    if cfg.proposal_file is not None:
        with open(cfg.require_file("proposal_file"), encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            g = GaussianMixtureProposal.from_dict(doc["theta"])
            re = re_proposals_from_dict(doc["re"], model, dataset)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("proposal_file", f"malformed proposal document ({exc})") from None
        if len(re) != dataset.S:
            raise ConfigError("proposal_file", "random-effects proposals do not match the dataset")
    elif cfg.draws is not None:
        draws = _draws(cfg, model)
        g = _fit_theta(cfg, draws, root)
        re = _fit_re(cfg, model, dataset, draws, root)
    else:
        raise ConfigError("draws", "set 'draws' (posterior draws) or 'proposal_file'")
    if g.d != model.d_theta:
        raise ConfigError("proposal_file", f"proposal dimension {g.d} != model dimension {model.d_theta}")
    if cfg.proposal.perturb:
        g = g.perturbed(cfg.proposal.perturb_shift_sd, cfg.proposal.perturb_cov_scale)
    return g, re


def _theta_index(model, component) -> int:
    if isinstance(component, int):
        if not 0 <= component < model.d_theta:
            raise ConfigError("phi.component", f"index {component} out of range")
        return component
    names = list(model.theta_names)
    if component not in names:
        raise ConfigError("phi.component", f"unknown parameter {component!r}; expected one of {names}")
    return names.index(component)


def make_phi(spec: PhiSpec, model):
    """Callable mapping ``(M, d)`` draws to ``scale * f(theta_k) + shift``."""
    k = _theta_index(model, spec.component)
    f = np.exp if spec.transform == "exp" else (lambda x: x)
    return lambda th: spec.scale * f(np.asarray(th)[:, k]) + spec.shift


def result_document(result, cfg: RunConfig) -> dict:
    return _stamp(cfg, {
        "log_ml": result.log_ml,
        "se_bootstrap": result.se_log_bootstrap,
        "se_analytic": result.se_log_analytic,
        "ess": result.ess,
        "M": result.M,
        "mean_var_loglik": result.mean_var_loglik,
        "max_weight": result.max_weight,
        "n_target_missed": result.n_target_missed,
        "n_zero_likelihood": result.n_zero_likelihood,
        "per_subject_N_stats": result.per_subject_N_stats(),
    })


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, threads: int = 1) -> dict:
    model = _model(cfg)
    out = _require_out(cfg)
    root = RngStream(cfg.seed)
    if cfg.simulate.theta is None:
        theta = model.sample_theta_prior(1, root.child("theta").generator())[0]
    else:
        theta = np.asarray(cfg.simulate.theta, dtype=float)
        if theta.shape != (model.d_theta,):
            raise ConfigError("simulate.theta", f"expected {model.d_theta} values, got {theta.size}")
    ds = model.simulate(theta, cfg.simulate.S, cfg.simulate.T, root.child("data"))
    write_dataset(ds, out, model)
    side = _stamp(cfg, {"theta": theta, "theta_names": list(model.theta_names),
                        "true_alpha": ds._cache["true_alpha"], "S": ds.S, "T": cfg.simulate.T})
    with open(f"{out}.json", "w", encoding="utf-8") as fh:
        fh.write(dumps(side))
    return side


def cmd_sample(cfg: RunConfig, threads: int = 1) -> dict:
    model = _model(cfg)
    ds = _dataset(cfg, model)
    out = _require_out(cfg)
    root = RngStream(cfg.seed)
    sc = cfg.sampler
    if sc.init is not None and len(sc.init) != model.d_theta:
        raise ConfigError("sampler.init", f"expected {model.d_theta} values")
    props = None
    if sc.re_kind == "laplace":
        props = fit_laplace_re_proposals(model, ds, rng=root.child("laplace").generator(), refine=sc.refine)
    t0 = time.perf_counter()
    draws = run_pm_mh(model, ds, sc.build(), root.child("sample"), re_props=props, threads=threads)
    draws.info["config_hash"] = cfg.config_hash()
    write_draws(draws, out)
    summary = _stamp(cfg, {"n_draws": draws.n, "acceptance_rate": draws.info["acceptance_rate"]})
    with open(f"{out}.timing.json", "w", encoding="utf-8") as fh:
        fh.write(dumps({"seconds": time.perf_counter() - t0}))
    return summary


def cmd_fit_proposal(cfg: RunConfig, threads: int = 1) -> dict:
    model = _model(cfg)
    root = RngStream(cfg.seed)
    draws = _draws(cfg, model)
    ds = _dataset(cfg, model) if cfg.data is not None else None
    if ds is None and cfg.proposal.re_kind != "conditional":
        raise ConfigError("data", f"re_kind {cfg.proposal.re_kind!r} needs the dataset")
    g = _fit_theta(cfg, draws, root)
    re = _fit_re(cfg, model, ds, draws, root)
    doc = _stamp(cfg, {"theta": g.to_dict(), "re": re.to_dict(), "bic": getattr(g, "bic", {})})
    _emit(doc, cfg.out)
    return doc


def _estimate(cfg: RunConfig, threads: int):
    model = _model(cfg)
    ds = _dataset(cfg, model)
    root = RngStream(cfg.seed)
    g, re = _proposals(cfg, model, ds, root)
    if cfg.exact_likelihood and not hasattr(model, "exact_subject_loglik"):
        raise ConfigError("exact_likelihood", f"{cfg.model} has no closed-form likelihood")
    t0 = time.perf_counter()
    result, wd = run_is2(model, ds, g, re, cfg.policy.build(), cfg.M, root.child("is2"), B=cfg.B,
                         antithetic=cfg.proposal.antithetic, stratified=cfg.proposal.stratified,
                         threads=threads, exact_likelihood=cfg.exact_likelihood)
    return model, result, wd, time.perf_counter() - t0


def cmd_estimate(cfg: RunConfig, threads: int = 1) -> dict:
    _, result, wd, secs = _estimate(cfg, threads)
    doc = result_document(result, cfg)
    print(result.summary(), file=sys.stderr if cfg.out is None else sys.stdout)
    _emit(doc, cfg.out, {"seconds": secs, "threads": threads})
    if cfg.out is not None:
        wd.to_csv(f"{cfg.out}.weights.csv")
    return doc


def cmd_expect(cfg: RunConfig, threads: int = 1) -> dict:
    if not cfg.phi:
        raise ConfigError("phi", "at least one expectation spec is required")
    if cfg.weighted_draws is not None:
        model = _model(cfg)
        wd = WeightedDraws.from_csv(cfg.require_file("weighted_draws"))
        if wd.theta.shape[1] != model.d_theta:
            raise ConfigError("weighted_draws", "theta dimension does not match the model")
    else:
        model, _, wd, _ = _estimate(cfg, threads)
    rows = []
    for i, spec in enumerate(cfg.phi):
        try:
            res = posterior_expectation(wd, make_phi(spec, model), spec.describe())
        except ConfigError as exc:
            raise ConfigError(f"phi.{i}.component", str(exc).split(": ", 1)[-1]) from None
        rows.append({"phi": res.descriptor, "estimate": res.estimate, "se": res.se})
    doc = _stamp(cfg, {"expectations": rows, "M": wd.M})
    _emit(doc, cfg.out)
    return doc


def cmd_tune(cfg: RunConfig, threads: int = 1) -> dict:
    tc = cfg.tune
    if any(v <= 0 for v in tc.vs):
        raise ConfigError("tune.vs", "values must be positive")
    if tc.grid is not None and any(s <= 0 for s in tc.grid):
        raise ConfigError("tune.grid", "values must be positive")
    calibration = inflation = None
    if tc.calibrate or tc.inflation_sigma2 is not None:
        model = _model(cfg)
        ds = _dataset(cfg, model)
        root = RngStream(cfg.seed)
        g, re = _proposals(cfg, model, ds, root)
        if tc.calibrate:
            calibration = calibrate_N(model, ds, g, re, tc.theta_probe_count, tc.pilot_N,
                                      cfg.policy.sigma2_target, root.child("calibrate"), cfg.policy.N_min)
        if tc.inflation_sigma2 is not None:
            try:
                inflation = measure_inflation(model, ds, g, tc.inflation_sigma2, tc.inflation_M,
                                              root.child("inflation"))
            except ValueError as exc:
                raise ConfigError("tune.inflation_sigma2", str(exc)) from None
    report = tuning_report(tc.vs, tc.grid, calibration, inflation)
    doc = _stamp(cfg, report.to_dict())
    print(report.table(), file=sys.stderr if cfg.out is None else sys.stdout)
    _emit(doc, cfg.out)
    return doc


def _read_result(cfg: RunConfig, field: str):
    from types import SimpleNamespace

    with open(cfg.require_file(field), encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        ml, se = float(doc["log_ml"]), doc.get("se_bootstrap")
    except (KeyError, TypeError, ValueError):
        raise ConfigError(field, "not a result document (missing log_ml)") from None
    se = float("inf") if se is None else float(se)
    return SimpleNamespace(log_ml=ml, se_log_bootstrap=se, model=doc.get("model")), doc


def cmd_compare(cfg: RunConfig, threads: int = 1) -> dict:
    a, doc_a = _read_result(cfg, "result_a")
    b, doc_b = _read_result(cfg, "result_b")
    log_bf, se = compare_models(a, b)
    try:
        bf = math.exp(log_bf)
    except OverflowError:
        bf = float("inf")
    doc = {
        "log_bf": log_bf, "se": se, "bf": bf,
        "model_a": a.model, "model_b": b.model,
        "config_hash_a": doc_a.get("config_hash"), "config_hash_b": doc_b.get("config_hash"),
        "seed": cfg.seed, "config_hash": cfg.config_hash(),
    }
    _emit(doc, cfg.out)
    return doc


HANDLERS = {
    "simulate": cmd_simulate,
    "sample": cmd_sample,
    "fit-proposal": cmd_fit_proposal,
    "estimate": cmd_estimate,
    "expect": cmd_expect,
    "tune": cmd_tune,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marglik", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        p.add_argument("--out", default=None, help="output path (overrides 'out' in the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        cfg = load_config(args.config)
        if args.out is not None:
            cfg = cfg.model_copy(update={"out": Path(args.out)})
        HANDLERS[args.command](cfg, args.threads)
    except ConfigError as exc:
        print(f"marglik: config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"marglik: numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
