"""Command-line entry points.

``generate``
    Write a synthetic Lorenz dataset, its ground truth and a manifest.
``fit``
    Run an OSLMM or SLMM chain on a dataset CSV and write a posterior archive.
``eval``
    Latent recovery against ground truth, leave-one-channel-out prediction,
    or comparison with an external latent-trajectory file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import math
import sys
from pathlib import Path

import numpy as np

from . import io as oio
from .evaluation import EvalReport, delta_rmse, loco_predict, loco_report, procrustes_align, rmse, summary_stats
from .model import RankDeficientError, orthonormalized_latents
from .samplers import SamplerError, initialize_oslmm, initialize_slmm, run_chain
from .synthetic import DgpConfig, LorenzConfig, MdgpConfig, generate_dgp_trials, generate_mdgp

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATA_FILE = "data.csv"
LATENTS_FILE = "latents.csv"
LOG_SCALES_FILE = "log_scales.csv"
BASIS_FILE = "basis.csv"
MANIFEST_FILE = "manifest.json"

_DGP_KEYS = {f.name for f in dataclasses.fields(DgpConfig)} - {"lorenz"}
_LORENZ_KEYS = {f.name for f in dataclasses.fields(LorenzConfig)}


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------

def parse_generator_config(raw: dict):
    """Build a :class:`DgpConfig` or :class:`MdgpConfig` from a JSON object.

    Keys: ``generator`` (``"dgp"`` or ``"mdgp"``), the :class:`DgpConfig`
    fields, ``perturb_sigma`` (MDGP only), an optional ``lorenz`` object and
    an optional ``out_dir``.
    """
    if not isinstance(raw, dict):
        raise oio.ConfigError("generator config must be a JSON object")
    raw = dict(raw)
    kind = raw.pop("generator", "dgp")
    if kind not in ("dgp", "mdgp"):
        raise oio.ConfigError(f"generator must be 'dgp' or 'mdgp', got {kind!r}")
    raw.pop("out_dir", None)
    perturb = raw.pop("perturb_sigma", None)
    if perturb is not None and kind != "mdgp":
        raise oio.ConfigError("perturb_sigma only applies to the mdgp generator")
    lorenz_raw = raw.pop("lorenz", None)
    unknown = sorted(set(raw) - _DGP_KEYS)
    if unknown:
        raise oio.ConfigError(f"unknown config keys: {', '.join(unknown)}")
    raw.setdefault("seed", oio.default_seed())
    try:
        if lorenz_raw is not None:
            bad = sorted(set(lorenz_raw) - _LORENZ_KEYS)
            if bad:
                raise oio.ConfigError(f"unknown lorenz keys: {', '.join(bad)}")
            if "initial_state" in lorenz_raw:
                lorenz_raw = {**lorenz_raw, "initial_state": tuple(lorenz_raw["initial_state"])}
            raw["lorenz"] = LorenzConfig(**lorenz_raw)
        base = DgpConfig(**raw)
        if kind == "dgp":
            return base
        extra = {} if perturb is None else {"perturb_sigma": perturb}
        return MdgpConfig(base=base, n_trials=base.n_trials, **extra)
    except oio.ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise oio.ConfigError(str(exc)) from exc


def _config_record(cfg) -> dict:
    if isinstance(cfg, MdgpConfig):
        rec = dataclasses.asdict(cfg.base)
        rec.update(generator="mdgp", perturb_sigma=cfg.perturb_sigma, n_trials=cfg.n_trials)
    else:
        rec = dataclasses.asdict(cfg)
        rec["generator"] = "dgp"
    rec["lorenz"]["initial_state"] = list(rec["lorenz"]["initial_state"])
    return rec


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_generate(config_path, out_dir=None) -> Path:
    """Generate a bundle; returns the output directory."""
    raw = oio._read_json(config_path)
    cfg = parse_generator_config(raw)
    out = Path(out_dir or raw.get("out_dir") or Path(config_path).parent)
    if isinstance(cfg, MdgpConfig):
        bundles = generate_mdgp(cfg)
        seed = cfg.base.seed
    else:
        bundles = generate_dgp_trials(cfg)
        seed = cfg.seed
    times = bundles[0].dataset.times
    try:
        oio.write_dataset_csv(out / DATA_FILE, [b.dataset for b in bundles])
        oio.write_trajectories_csv(out / LATENTS_FILE, times, [b.latents for b in bundles])
        oio.write_trajectories_csv(out / LOG_SCALES_FILE, times, [b.log_scales for b in bundles])
        oio.write_basis_csv(out / BASIS_FILE, [b.basis for b in bundles])
    except OSError as exc:
        raise oio.ConfigError(f"cannot write to {out}: {exc.strerror}") from exc
    manifest = {
        "seed": seed,
        "config": _config_record(cfg),
        "files": {name: _file_sha256(out / name)
                  for name in (DATA_FILE, LATENTS_FILE, LOG_SCALES_FILE, BASIS_FILE)},
        "trials": [{"trial": k, "basis_sha256": oio.array_sha256(b.basis)}
                   for k, b in enumerate(bundles)],
    }
    oio.write_json(out / MANIFEST_FILE, manifest)
    return out


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

def timing_summary(seconds) -> dict:
    s = np.asarray(seconds, dtype=float)
    return {"mean": float(s.mean()), "p50": float(np.percentile(s, 50)), "p95": float(np.percentile(s, 95))}


def cmd_fit(config_path, data_path, out_path=None, stream=None):
    """Fit a model and write its posterior archive; returns ``(path, posterior)``."""
    stream = sys.stdout if stream is None else stream
    config = oio.RunConfig.load(config_path)
    trials = oio.read_dataset_csv(data_path)
    P = trials[0].n_channels
    if config.latent_dim > P:
        raise oio.ConfigError(f"latent_dim {config.latent_dim} exceeds the {P} channels in {data_path}")
    shapes = {d.observations.shape for d in trials}
    if len(shapes) != 1 or any(not np.array_equal(d.times, trials[0].times) for d in trials):
        raise oio.DataError(f"{data_path}: trials must share one time grid and channel count")
    if config.model == "oslmm":
        init = initialize_oslmm(trials, config.latent_dim, length_f=config.length_f,
                                length_h=config.length_scale, variance_h=config.variance_scale)
    else:
        init = initialize_slmm(trials, config.latent_dim, length_f=config.length_f,
                               length_w=config.length_scale, variance_w=config.variance_scale)
    posterior = run_chain(config.model, trials, config.chain, config.priors, init)
    out = Path(out_path or config.out or Path(data_path).with_suffix(".posterior"))
    oio.save_archive(out, posterior, config)
    t = timing_summary(posterior.iteration_seconds)
    print(f"model={config.model} Q={config.latent_dim} iterations={config.chain.iterations} "
          f"samples={len(posterior)}", file=stream)
    print(f"seconds/iteration mean={t['mean']:.6f} p50={t['p50']:.6f} p95={t['p95']:.6f}", file=stream)
    print(f"archive={out}", file=stream)
    return out, posterior


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def posterior_mean_latents(posterior) -> np.ndarray:
    """Posterior mean of the orthonormalised latents ``exp(H) * F`` (OSLMM)
    or of ``F`` (SLMM), shape ``(K, Q, T)``."""
    if posterior.kind == "oslmm":
        return np.mean([orthonormalized_latents(s.H, s.F) for s in posterior.samples], axis=0)
    return posterior.mean("F")


def _flat(X) -> np.ndarray:
    """``(K, Q, T)`` -> ``(Q, K*T)``, trials side by side."""
    return np.concatenate(list(X), axis=1)


def _load_truth(truth_dir: Path):
    lat, log = truth_dir / LATENTS_FILE, truth_dir / LOG_SCALES_FILE
    if not (lat.exists() and log.exists()):
        raise oio.DataError(f"ground truth not found: need {LATENTS_FILE} and {LOG_SCALES_FILE} in {truth_dir}")
    _, F = oio.read_trajectories_csv(lat)
    _, H = oio.read_trajectories_csv(log)
    if F.shape != H.shape:
        raise oio.DataError("ground-truth latents and log-scales disagree in shape")
    return orthonormalized_latents(H, F)


def _check_compatible(posterior, trials):
    P = trials[0].n_channels
    s = posterior.samples[0]
    P_arch = s.U.shape[0] if posterior.kind == "oslmm" else s.W.shape[0]
    if P != P_arch or not np.array_equal(np.asarray(posterior.times), trials[0].times):
        raise oio.DataError("archive and dataset disagree on channels or time grid")


def _aligned_rmse(estimate, truth):
    if estimate.shape != truth.shape:
        raise oio.DataError(f"latent shapes differ: {estimate.shape} vs truth {truth.shape}")
    return procrustes_align(_flat(estimate), _flat(truth))


def _per_unit_rmse(aligned_flat, truth_flat, K):
    """RMSE per (trial, latent dimension), ordered trial-major."""
    a = np.split(aligned_flat, K, axis=1)
    b = np.split(truth_flat, K, axis=1)
    return np.array([[rmse(x[q], y[q]) for q in range(x.shape[0])] for x, y in zip(a, b)]).ravel()


def eval_recovery(posterior, truth, times, out_dir: Path) -> EvalReport:
    est = posterior_mean_latents(posterior)
    res = _aligned_rmse(est, truth)
    truth_flat = _flat(truth)
    corr = [float(np.corrcoef(res.aligned[q], truth_flat[q])[0, 1]) for q in range(truth.shape[1])]
    report = EvalReport(rmse=res.residual_rmse,
                        extra={"task": "recovery", "correlation": corr, "rotation": res.rotation})
    oio.write_trajectories_csv(out_dir / "latents_estimate.csv", times, est)
    aligned = np.stack(np.split(res.aligned, est.shape[0], axis=1))
    oio.write_trajectories_csv(out_dir / "latents_aligned.csv", times, aligned)
    return report


def eval_compare(posterior, truth, baseline_path, out_dir: Path) -> EvalReport:
    """``delta_rmse = rmse(baseline) - rmse(model)``; positive favours the model.

    Paired statistics run over per-(trial, dimension) RMSEs of the two
    aligned trajectory sets.
    """
    est = posterior_mean_latents(posterior)
    _, base = oio.read_trajectories_csv(baseline_path)
    if base.shape != truth.shape:
        raise oio.DataError(f"baseline shape {base.shape} does not match truth {truth.shape}")
    model_fit = _aligned_rmse(est, truth)
    base_fit = _aligned_rmse(base, truth)
    K = truth.shape[0]
    per_model = _per_unit_rmse(model_fit.aligned, _flat(truth), K)
    per_base = _per_unit_rmse(base_fit.aligned, _flat(truth), K)
    stats = summary_stats(per_base, per_model) if per_model.size >= 3 else \
        {"spearman_rho": None, "paired_t_p": None, "wilcoxon_p": None}
    return EvalReport(
        rmse=model_fit.residual_rmse,
        delta_rmse=delta_rmse(base_fit.residual_rmse, model_fit.residual_rmse),
        spearman_rho=stats["spearman_rho"], t_p_value=stats["paired_t_p"],
        wilcoxon_p_value=stats["wilcoxon_p"],
        extra={"task": "compare", "baseline_rmse": base_fit.residual_rmse,
               "per_unit_rmse_model": per_model, "per_unit_rmse_baseline": per_base},
    )


def eval_loco(posterior, trials, out_dir: Path, max_samples=None) -> EvalReport:
    if posterior.kind != "oslmm":
        raise oio.DataError("leave-one-channel-out evaluation needs an OSLMM archive")
    rows = []
    all_sse, all_r2 = [], []
    for k, trial in enumerate(trials):
        preds = np.stack([loco_predict(posterior, trial, p, max_samples=max_samples)
                          for p in range(trial.n_channels)])
        rep = loco_report(preds, trial.observations)
        for p in range(trial.n_channels):
            r2 = rep.r2[p]
            rows.append([str(k), str(p + 1), oio.format_float(rep.sse[p]),
                         "" if math.isnan(r2) else oio.format_float(r2)])
        all_sse.append(rep.sse)
        all_r2.append(rep.r2)
    oio.atomic_write(out_dir / "loco.csv", oio._render_csv(["trial", "channel", "sse", "r2"], rows))
    r2 = np.concatenate(all_r2)
    finite = r2[np.isfinite(r2)]
    return EvalReport(
        sse=np.concatenate(all_sse), r2=r2,
        extra={"task": "loco", "mean_r2": float(finite.mean()) if finite.size else None,
               "median_r2": float(np.median(finite)) if finite.size else None},
    )


def cmd_eval(archive_path, data_path, task, baseline=None, out_dir=None, truth_dir=None,
             max_samples=None) -> tuple[Path, EvalReport]:
    _, posterior = oio.load_archive(archive_path)
    trials = oio.read_dataset_csv(data_path)
    _check_compatible(posterior, trials)
    out = Path(out_dir or Path(archive_path).parent)
    truth_root = Path(truth_dir or Path(data_path).parent)
    times = trials[0].times
    if task == "recovery":
        report = eval_recovery(posterior, _load_truth(truth_root), times, out)
    elif task == "compare":
        if baseline is None:
            raise oio.ConfigError("--baseline is required for task 'compare'")
        report = eval_compare(posterior, _load_truth(truth_root), baseline, out)
    elif task == "loco":
        report = eval_loco(posterior, trials, out, max_samples=max_samples)
    else:
        raise oio.ConfigError(f"unknown task {task!r}")
    path = oio.write_json(out / f"{task}.json", report.to_dict())
    return path, report


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oslmm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic Lorenz dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out-dir")

    f = sub.add_parser("fit", help="run MCMC and write a posterior archive")
    f.add_argument("--config", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a posterior archive")
    e.add_argument("--archive", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--task", required=True, choices=("recovery", "loco", "compare"))
    e.add_argument("--baseline", help="latent trajectory CSV for task 'compare'")
    e.add_argument("--truth-dir", help="directory with ground-truth CSVs (default: next to --data)")
    e.add_argument("--out-dir", help="report directory (default: next to --archive)")
    e.add_argument("--max-samples", type=int, help="thin posterior samples used by 'loco'")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            out = cmd_generate(args.config, args.out_dir)
            print(f"wrote {out / DATA_FILE}")
        elif args.command == "fit":
            cmd_fit(args.config, args.data, args.out)
        else:
            path, _ = cmd_eval(args.archive, args.data, args.task, baseline=args.baseline,
                               out_dir=args.out_dir, truth_dir=args.truth_dir,
                               max_samples=args.max_samples)
            print(f"wrote {path}")
    except oio.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (oio.DataError, oio.ArchiveError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SamplerError, RankDeficientError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
