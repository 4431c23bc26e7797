"""Command-line surface: simulate, fit, evaluate, summarize.

Configuration comes from an optional flat key=value file plus command-line
flags (flags win).  Every command writes its files to a temporary directory
first and renames them into place on success, so partially written outputs
never land in the output directory.  All outputs are deterministic given
(seed, config, input files).
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, ingest, read_csv_columns, write_csv, write_dataset
from .sampler import ModelConfig, hpd_interval, run_chain, summarize
from .simulate import (ase_logvol, ase_trajectory, gen_case1, gen_case2,
                       se_beta, two_stage_beta)
from .spline import ncs_fit

_DEFAULTS = {
    "seed": 0, "iters": 15000, "burnin": 5000, "thin": 5, "jobs": 1,
    "baseline": "none", "p": 2, "q": 1, "a": 0.01, "b": 0.01,
    "case": "case1", "subjects": 100, "replicates": 1,
}
_INT_KEYS = {"seed", "iters", "burnin", "thin", "jobs", "p", "q", "subjects", "replicates"}
_FLOAT_KEYS = {"a", "b"}


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings for one command invocation."""

    command: str
    out_dir: Path
    data_dir: Optional[Path]
    fit_dir: Optional[Path]
    draws_path: Optional[Path]
    seed: int
    iters: int
    burnin: int
    thin: int
    p: int
    q: int
    a: float
    b: float
    jobs: int
    baseline: str
    case: str
    subjects: int
    replicates: int

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(p=self.p, q=self.q, a=self.a, b=self.b,
                           n_iter=self.iters, burn_in=self.burnin,
                           thin=self.thin, seed=seed)


def load_config_file(path) -> dict:
    """Parse a flat key=value file ('#' starts a comment)."""
    out = {}
    for line_num, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {line_num}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _resolve(args: argparse.Namespace) -> RunConfig:
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}

    def pick(key):
        flag = getattr(args, key, None)
        if flag is not None:
            return flag
        if key in file_cfg:
            raw = file_cfg[key]
            if key in _INT_KEYS:
                return int(raw)
            if key in _FLOAT_KEYS:
                return float(raw)
            return raw
        return _DEFAULTS.get(key)

    out_dir = getattr(args, "out", None) or file_cfg.get("out")
    if out_dir is None:
        raise ValueError("an output directory is required (--out or config key 'out')")
    data_dir = getattr(args, "data", None) or file_cfg.get("data")
    fit_dir = getattr(args, "fit", None) or file_cfg.get("fit")
    draws = getattr(args, "draws", None) or file_cfg.get("draws")

    cfg = RunConfig(
        command=args.command,
        out_dir=Path(out_dir),
        data_dir=Path(data_dir) if data_dir else None,
        fit_dir=Path(fit_dir) if fit_dir else None,
        draws_path=Path(draws) if draws else None,
        seed=pick("seed"), iters=pick("iters"), burnin=pick("burnin"),
        thin=pick("thin"), p=pick("p"), q=pick("q"), a=pick("a"), b=pick("b"),
        jobs=pick("jobs"), baseline=pick("baseline"), case=pick("case"),
        subjects=pick("subjects"), replicates=pick("replicates"),
    )
    if cfg.baseline not in ("none", "ncs", "two-stage"):
        raise ValueError(f"baseline must be none, ncs or two-stage, got {cfg.baseline!r}")
    if cfg.case not in ("case1", "case2"):
        raise ValueError(f"case must be case1 or case2, got {cfg.case!r}")
    if cfg.replicates < 1 or cfg.jobs < 1:
        raise ValueError("replicates and jobs must be >= 1")
    for path in (cfg.data_dir, cfg.fit_dir, cfg.draws_path):
        if path is not None and not path.exists():
            raise ValueError(f"input path does not exist: {path}")
    return cfg


@contextmanager
def atomic_dir(target: Path):
    """Stage files in a sibling temp directory, rename into place on success."""
    target.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=target.parent, prefix=target.name + ".partial."))
    try:
        yield tmp
        for item in sorted(tmp.iterdir()):
            os.replace(item, target / item.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _rep_dir(base: Path, rep: int, replicates: int) -> Path:
    return base if replicates == 1 else base / f"rep{rep + 1:03d}"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> None:
    for rep in range(cfg.replicates):
        seed = cfg.seed + rep
        gen = gen_case1 if cfg.case == "case1" else gen_case2
        dataset, truth = gen(seed, cfg.subjects)
        with atomic_dir(_rep_dir(cfg.out_dir, rep, cfg.replicates)) as tmp:
            write_dataset(dataset, tmp)
            rows = []
            for i, s in enumerate(dataset.subjects):
                mask = truth.retained[i]
                m_true = truth.mean_curves[truth.groups[i] - 1][mask]
                u_true = truth.dev_curves[i][mask]
                for t, mv, uv in zip(s.times, m_true, u_true):
                    rows.append([s.id, t, mv, uv])
            write_csv(tmp / "truth_curves.csv",
                      ["subject_id", "time", "m_true", "u_true"], rows)
            subj_rows = []
            for i, s in enumerate(dataset.subjects):
                vol = "" if truth.subject_vol is None else truth.subject_vol[i]
                subj_rows.append([s.id, str(s.group), vol])
            write_csv(tmp / "truth_subjects.csv",
                      ["subject_id", "group", "sigma2_U"], subj_rows)
            beta_rows = []
            if truth.beta is not None:
                beta_rows = [[f"beta[{l}]", v] for l, v in enumerate(truth.beta)]
            write_csv(tmp / "truth_beta.csv", ["parameter", "value"], beta_rows)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _group_observed_means(dataset: Dataset) -> dict:
    """Group-mean observed value at each merged time (over subjects seen there)."""
    sums: dict = {}
    counts: dict = {}
    for s in dataset.subjects:
        for t, y in zip(s.times, s.values):
            key = (s.group, float(t))
            sums[key] = sums.get(key, 0.0) + y
            counts[key] = counts.get(key, 0) + 1
    return {key: sums[key] / counts[key] for key in sums}


def _ncs_baseline(dataset: Dataset, tmp: Path, want_two_stage: bool) -> None:
    fits = []
    for s in dataset.subjects:
        if len(s.times) >= 4:
            fits.append(ncs_fit(s.times, s.values).fitted)
        else:
            # too short for a cubic fit: fall back to its large-lambda limit
            phi = np.column_stack([np.ones(len(s.times)), s.times])
            coef, *_ = np.linalg.lstsq(phi, s.values, rcond=None)
            fits.append(phi @ coef)
    rows = []
    for s, fit in zip(dataset.subjects, fits):
        for t, y, f in zip(s.times, s.values, fit):
            rows.append([s.id, t, y, f])
    write_csv(tmp / "ncs_trajectories.csv", ["subject_id", "time", "y", "fit"], rows)

    if want_two_stage:
        gmeans = _group_observed_means(dataset)
        dev_curves = []
        for s, fit in zip(dataset.subjects, fits):
            base = np.array([gmeans[(s.group, float(t))] for t in s.times])
            dev_curves.append(fit - base)
        result = two_stage_beta(dev_curves, [s.times for s in dataset.subjects],
                                np.stack([s.covariates for s in dataset.subjects]))
        ts_rows = [[f"beta[{l}]", b, p]
                   for l, (b, p) in enumerate(zip(result.beta, result.p_values))]
        write_csv(tmp / "two_stage.csv", ["parameter", "estimate", "p_value"], ts_rows)


def _interval(samples) -> tuple:
    if len(samples) < 2:
        return float(samples[0]), float(samples[0])
    return hpd_interval(samples)


def _summary_rows(draws) -> list:
    if draws.n_retained >= 100:
        return [[s.name, s.mean, s.mode, s.sd, s.hpd_lo, s.hpd_hi]
                for s in summarize(draws)]
    # short exploratory runs: means and SDs only, no density summaries
    rows = []
    for name, x in draws.param_draws().items():
        sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
        rows.append([name, float(np.mean(x)), "", sd, "", ""])
    return rows


def _fit_one(obs_path: str, cov_path: str, out_dir: str, cfg: RunConfig, seed: int) -> None:
    dataset = ingest(obs_path, cov_path)
    draws = run_chain(cfg.model_config(seed), dataset)
    with atomic_dir(Path(out_dir)) as tmp:
        params = draws.param_draws()
        names = list(params)
        columns = [params[name] for name in names]
        write_csv(tmp / "draws.csv", names,
                  (list(vals) for vals in zip(*columns)))
        write_csv(tmp / "summary.csv",
                  ["parameter", "mean", "mode", "sd", "hpd_lo", "hpd_hi"],
                  _summary_rows(draws))
        rows = []
        for i, s in enumerate(dataset.subjects):
            mean_draws = draws.mean_curve_draws(i)
            traj_draws = draws.trajectory_draws(i)
            dev_draws = traj_draws - mean_draws
            m_hat = mean_draws.mean(axis=0)
            u_hat = dev_draws.mean(axis=0)
            for j, (t, y) in enumerate(zip(s.times, s.values)):
                lo, hi = _interval(traj_draws[:, j])
                rows.append([s.id, t, y, m_hat[j], u_hat[j], lo, hi])
        write_csv(tmp / "trajectories.csv",
                  ["subject_id", "time", "y", "m_hat", "u_hat", "lo", "hi"], rows)
        if cfg.baseline in ("ncs", "two-stage"):
            _ncs_baseline(dataset, tmp, cfg.baseline == "two-stage")


def cmd_fit(cfg: RunConfig) -> None:
    if cfg.data_dir is None:
        raise ValueError("fit requires --data pointing at the dataset directory")
    jobs = []
    for rep in range(cfg.replicates):
        src = _rep_dir(cfg.data_dir, rep, cfg.replicates)
        obs, cov = src / "observations.csv", src / "covariates.csv"
        for path in (obs, cov):
            if not path.exists():
                raise ValueError(f"missing input file {path}")
        jobs.append((str(obs), str(cov), str(_rep_dir(cfg.out_dir, rep, cfg.replicates)),
                     cfg, cfg.seed + rep))
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_fit_one, *job) for job in jobs]
            for fut in futures:
                fut.result()
    else:
        for job in jobs:
            _fit_one(*job)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _by_subject(cols: dict, value_keys: list) -> dict:
    """Regroup flat (subject_id, time, ...) columns into per-subject arrays."""
    out: dict = {}
    for idx, sid in enumerate(cols["subject_id"]):
        rec = out.setdefault(sid, {key: [] for key in ["time"] + value_keys})
        rec["time"].append(float(cols["time"][idx]))
        for key in value_keys:
            rec[key].append(float(cols[key][idx]))
    for rec in out.values():
        for key in rec:
            rec[key] = np.asarray(rec[key])
    return out


def _evaluate_one(data_dir: Path, fit_dir: Path) -> list:
    truth_cols = read_csv_columns(data_dir / "truth_curves.csv")
    truth = _by_subject(truth_cols, ["m_true", "u_true"])
    subj_cols = read_csv_columns(data_dir / "truth_subjects.csv")
    true_vol = {sid: float(v) for sid, v in zip(subj_cols["subject_id"], subj_cols["sigma2_U"])
                if v not in ("", None)}
    beta_path = data_dir / "truth_beta.csv"
    true_beta = None
    if beta_path.exists():
        beta_cols = read_csv_columns(beta_path)
        if beta_cols.get("value"):
            true_beta = np.array([float(v) for v in beta_cols["value"]])

    results = []

    svr_path = fit_dir / "trajectories.csv"
    if svr_path.exists():
        est = _by_subject(read_csv_columns(svr_path), ["m_hat", "u_hat"])
        sids = list(truth)
        if set(sids) != set(est):
            raise ValueError("trajectories.csv subjects do not match the truth files")
        ase = ase_trajectory([est[s]["m_hat"] + est[s]["u_hat"] for s in sids],
                             [truth[s]["m_true"] + truth[s]["u_true"] for s in sids])
        row = {"method": "svr", "ase_traj": ase}
        draws_path = fit_dir / "draws.csv"
        if draws_path.exists() and true_vol:
            draw_cols = read_csv_columns(draws_path)
            vol_hat = []
            vol_true = []
            for i, sid in enumerate(sids, start=1):
                key = f"sigma2_U[{i}]"
                if key in draw_cols and sid in true_vol:
                    vol_hat.append(np.mean([float(v) for v in draw_cols[key]]))
                    vol_true.append(true_vol[sid])
            if vol_hat:
                row["ase_logvol"] = ase_logvol(np.array(vol_hat), np.array(vol_true))
            if true_beta is not None:
                beta_hat = np.array([
                    np.mean([float(v) for v in draw_cols[f"beta[{l}]"]])
                    for l in range(len(true_beta))
                ])
                for l, se in enumerate(se_beta(beta_hat, true_beta)):
                    row[f"se_beta[{l}]"] = se
        results.append(row)

    ncs_path = fit_dir / "ncs_trajectories.csv"
    if ncs_path.exists():
        est = _by_subject(read_csv_columns(ncs_path), ["fit"])
        sids = list(truth)
        if set(sids) != set(est):
            raise ValueError("ncs_trajectories.csv subjects do not match the truth files")
        ase = ase_trajectory([est[s]["fit"] for s in sids],
                             [truth[s]["m_true"] + truth[s]["u_true"] for s in sids])
        row = {"method": "ncs", "ase_traj": ase}
        ts_path = fit_dir / "two_stage.csv"
        if ts_path.exists() and true_beta is not None:
            ts_cols = read_csv_columns(ts_path)
            beta_hat = np.array([float(v) for v in ts_cols["estimate"]])
            if len(beta_hat) == len(true_beta):
                for l, se in enumerate(se_beta(beta_hat, true_beta)):
                    row[f"se_beta[{l}]"] = se
        results.append(row)

    if not results:
        raise ValueError(f"no fit outputs found under {fit_dir}")
    return results


def _metric_table(results: list) -> tuple[list, list]:
    keys = ["method", "ase_traj", "ase_logvol"]
    extra = sorted({k for row in results for k in row if k.startswith("se_beta")})
    header = keys + extra
    rows = []
    for row in results:
        rows.append([row.get("method", ""),
                     *[("" if row.get(k) is None else row.get(k, ""))
                       for k in header[1:]]])
    return header, rows


def cmd_evaluate(cfg: RunConfig) -> None:
    if cfg.data_dir is None:
        raise ValueError("evaluate requires --data pointing at the dataset directory")
    fit_base = cfg.fit_dir or cfg.data_dir
    all_results = []
    for rep in range(cfg.replicates):
        data_dir = _rep_dir(cfg.data_dir, rep, cfg.replicates)
        fit_dir = _rep_dir(fit_base, rep, cfg.replicates)
        results = _evaluate_one(data_dir, fit_dir)
        all_results.append(results)
        header, rows = _metric_table(results)
        with atomic_dir(_rep_dir(cfg.out_dir, rep, cfg.replicates)) as tmp:
            write_csv(tmp / "metrics.csv", header, rows)
    if cfg.replicates > 1:
        methods = sorted({row["method"] for results in all_results for row in results})
        agg_rows = []
        metric_keys = sorted({k for results in all_results for row in results
                              for k in row if k != "method"})
        for method in methods:
            agg = {"method": method}
            for key in metric_keys:
                vals = [row[key] for results in all_results for row in results
                        if row["method"] == method and key in row]
                if vals:
                    agg[key] = float(np.mean(vals))
            agg_rows.append(agg)
        header, rows = _metric_table(agg_rows)
        with atomic_dir(cfg.out_dir) as tmp:
            write_csv(tmp / "metrics_mean.csv", header, rows)


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------

def cmd_summarize(cfg: RunConfig) -> None:
    if cfg.draws_path is None:
        raise ValueError("summarize requires --draws pointing at a draws.csv")
    cols = read_csv_columns(cfg.draws_path)
    chains = {name: np.array([float(v) for v in values])
              for name, values in cols.items()}
    rows = [[s.name, s.mean, s.mode, s.sd, s.hpd_lo, s.hpd_hi]
            for s in summarize(chains)]
    with atomic_dir(cfg.out_dir) as tmp:
        write_csv(tmp / "summary.csv",
                  ["parameter", "mean", "mode", "sd", "hpd_lo", "hpd_hi"], rows)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svreg",
                                     description="Volatility-aware curve fitting "
                                                 "for multi-subject series")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iters", type=int)
        sp.add_argument("--burnin", type=int)
        sp.add_argument("--thin", type=int)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--baseline", choices=["ncs", "two-stage", "none"])
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--replicates", type=int)
        sp.add_argument("--p", type=int, help="mean-curve order")
        sp.add_argument("--q", type=int, help="deviation-curve order")
        sp.add_argument("--a", type=float, help="inverse-gamma shape")
        sp.add_argument("--b", type=float, help="inverse-gamma scale")

    sp = sub.add_parser("simulate", help="generate synthetic datasets")
    common(sp)
    sp.add_argument("--case", choices=["case1", "case2"])
    sp.add_argument("--subjects", type=int)

    sp = sub.add_parser("fit", help="run the MCMC fit (and optional baselines)")
    common(sp)
    sp.add_argument("--data", help="directory with observations.csv / covariates.csv")

    sp = sub.add_parser("evaluate", help="score fits against simulation truth")
    common(sp)
    sp.add_argument("--data", help="directory with the truth files")
    sp.add_argument("--fit", help="directory with fit outputs (default: --data)")

    sp = sub.add_parser("summarize", help="posterior summary table from draws.csv")
    common(sp)
    sp.add_argument("--draws", help="path to a draws.csv")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "summarize": cmd_summarize,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        _COMMANDS[cfg.command](cfg)
    except (ValueError, OSError) as exc:
        print(f"svreg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
