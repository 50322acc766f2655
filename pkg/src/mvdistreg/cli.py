"""Command-line front end: fit, simulate, residuals, summarize.

All outputs are plain CSV/JSON/SVG files.  Floats are serialized with 17
significant digits so reruns with identical inputs and seed are
byte-identical.  Validation failures exit nonzero with messages naming
the offending field or data line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import pandas as pd
from scipy import special

from .copula import PROB_EPS, batch_omega_pairs, spearman_rho
from .likelihood import LikelihoodEvaluator
from .model import BuiltModel, ParameterState, SpecValidationError, build_model
from .sampler import ChainSettings, run_chain
from .simstudy import DESIGNS, generate
from .svgplot import line_plot_svg

__all__ = ["main", "cmd_fit", "cmd_simulate", "cmd_residuals", "cmd_summarize"]


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    text = str(v)
    if any(ch in text for ch in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_fmt(h) for h in header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_dataset(path) -> pd.DataFrame:
    """CSV with header; rows with missing entries are rejected by file line."""
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise CliError(f"data file not found: {path}")
    except Exception as exc:  # malformed csv
        raise CliError(f"could not parse data file {path}: {exc}")
    if df.columns.size == 0 or df.shape[0] == 0:
        raise CliError(f"data file {path} is empty")
    bad = df.index[df.isna().any(axis=1)]
    if len(bad):
        lines = ", ".join(str(i + 2) for i in bad[:20])  # header is line 1
        more = "" if len(bad) <= 20 else f" (+{len(bad) - 20} more)"
        raise CliError(f"missing values in {path} at line(s) {lines}{more}")
    return df


def _maybe_int(token: str):
    try:
        return int(token)
    except ValueError:
        return token


def load_adjacency(path) -> dict:
    """Edge list, one 'regionA regionB' pair per line."""
    neighbors: dict = {}
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise CliError(f"adjacency file not found: {path}")
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise CliError(f"{path}:{lineno}: expected 'regionA regionB'")
            a, b = (_maybe_int(t) for t in parts)
            neighbors.setdefault(a, set()).add(b)
            neighbors.setdefault(b, set()).add(a)
    return {k: sorted(v) for k, v in neighbors.items()}


def load_spec(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            spec = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"spec file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"spec file {path} is not valid JSON: {exc}")
    if not isinstance(spec, dict):
        raise CliError(f"spec file {path}: top level must be an object")
    return spec


def _settings_from(spec: dict, args) -> ChainSettings:
    chain = dict(spec.get("chain", {}))
    for key in ("iterations", "burnin", "thin", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            chain[key] = val
    chain.setdefault("seed", 0)
    allowed = {
        "iterations",
        "burnin",
        "thin",
        "seed",
        "damping",
        "weight_floor",
        "map_init",
        "map_maxiter",
        "map_tol",
    }
    unknown = set(chain) - allowed
    if unknown:
        raise CliError(f"chain: unknown settings {sorted(unknown)}")
    try:
        return ChainSettings(**chain)
    except (TypeError, ValueError) as exc:
        raise CliError(f"chain: {exc}")


# -- fit ----------------------------------------------------------------------

def _posterior_summary_rows(model: BuiltModel, ev, draws):
    names = model.coefficient_names()
    rows = []

    def add(kind, name, samples):
        q = np.quantile(samples, [0.025, 0.5, 0.975])
        rows.append(
            (kind, name, samples.mean(), samples.std(ddof=1), q[0], q[1], q[2])
        )

    for i, name in enumerate(names):
        add("coefficient", name, draws.beta[:, i])
    for t, name in enumerate(model.tau_names()):
        add("tau2", name, draws.tau2[:, t])
    # derived functionals averaged over the observations
    if not model.univariate:
        m = draws.n_draws
        P = len(model.pairs)
        spear = np.empty((m, P))
        for i in range(m):
            etas = ev.eta_matrix(draws.beta[i])
            lam = etas[:, model.copula_pred_idx]
            spear[i] = spearman_rho(batch_omega_pairs(lam, model.dim)).mean(axis=0)
        for e, (r, c) in enumerate(model.pairs):
            add("derived", f"avg_spearman.{r + 1}{c + 1}", spear[:, e])
    for j, fam in enumerate(model.families):
        m = draws.n_draws
        mean_s = np.empty(m)
        var_s = np.empty(m)
        for i in range(m):
            etas = ev.eta_matrix(draws.beta[i])
            pieces_theta = _theta_for_margin(model, etas, j)
            mean_s[i] = np.nanmean(fam.mean(pieces_theta))
            var_s[i] = np.nanmean(fam.variance(pieces_theta))
        name = model.response_names[j]
        if np.all(np.isfinite(mean_s)):
            add("derived", f"avg_mean.{name}", mean_s)
        if np.all(np.isfinite(var_s)):
            add("derived", f"avg_variance.{name}", var_s)
    return rows


def _theta_for_margin(model: BuiltModel, etas, j):
    fam = model.families[j]
    theta = np.empty((etas.shape[0], fam.n_params))
    for m, (param, k) in enumerate(zip(fam.params, model.margin_pred_idx[j])):
        col = etas[:, k]
        theta[:, m] = col if param.link == "identity" else np.exp(col)
    return theta


def _effective_dof(ev, model: BuiltModel, state: ParameterState) -> float:
    """Unpenalized coefficient count plus per-block trace-based EDF."""
    pieces = ev.pieces_from_etas(ev.eta_matrix(state.beta))
    zeta = ev.draw_zeta(np.random.default_rng(0)) if ev.has_discrete else {}
    edf = 0.0
    weights = {}
    for block in model.blocks:
        k = block.pred_index
        if k not in weights:
            _, w = ev.score_weights(pieces, k, zeta)
            weights[k] = np.maximum(w, 1e-6)
        w = weights[k]
        Z = block.term.Z
        ZWZ = Z.T @ (w[:, None] * Z)
        B = block.nullspace
        if block.tau_index is None:
            edf += Z.shape[1] if B is None else B.shape[1]
            continue
        P = ZWZ + block.term.K / state.tau2[block.tau_index]
        if B is not None:
            P = B.T @ P @ B
            ZWZ = B.T @ ZWZ @ B
        edf += float(np.trace(np.linalg.solve(P, ZWZ)))
    return edf


def _bic(ev, model, state: ParameterState) -> float:
    zeta = ev.draw_zeta(np.random.default_rng(0)) if ev.has_discrete else {}
    ll = float(np.sum(ev.loglik_per_obs(
        ev.pieces_from_etas(ev.eta_matrix(state.beta)), zeta)))
    edf = _effective_dof(ev, model, state)
    return -2.0 * ll + edf * np.log(ev.n)


def cmd_fit(args) -> int:
    spec = load_spec(args.spec)
    data = load_dataset(args.data)
    adjacency = None
    adj_path = args.adjacency or spec.get("adjacency")
    if adj_path:
        adjacency = load_adjacency(adj_path)
    try:
        model = build_model(spec, data, adjacency=adjacency)
    except SpecValidationError as exc:
        raise CliError(str(exc))
    settings = _settings_from(spec, args)

    os.makedirs(args.out, exist_ok=True)
    draws = run_chain(model, data, settings)

    ev = LikelihoodEvaluator(model, data)
    names = model.coefficient_names() + model.tau_names() + ["loglik"]
    rows = [
        list(draws.beta[i]) + list(draws.tau2[i]) + [draws.loglik[i]]
        for i in range(draws.n_draws)
    ]
    _write_csv(os.path.join(args.out, "chain.csv"), names, rows)

    diag_rows = [("map_converged", "", int(draws.map_info["converged"]))]
    diag_rows += [("map_iterations", "", draws.map_info["iterations"])]
    bic = _bic(ev, model, draws.map_state)
    diag_rows += [("bic_at_map", "", bic)]
    diag_rows += [("effective_dof", "", _effective_dof(ev, model, draws.map_state))]
    for label, rate in draws.accept_rates.items():
        diag_rows.append(("acceptance_rate", label, rate))
    for label, count in draws.fallback_counts.items():
        if count:
            diag_rows.append(("fallback_proposals", label, count))
    for msg in draws.warnings:
        diag_rows.append(("warning", msg, ""))
    _write_csv(
        os.path.join(args.out, "diagnostics.csv"), ["metric", "name", "value"], diag_rows
    )

    summary = _posterior_summary_rows(model, ev, draws)
    _write_csv(
        os.path.join(args.out, "summary.csv"),
        ["kind", "name", "mean", "sd", "q025", "q500", "q975"],
        summary,
    )
    _write_csv(
        os.path.join(args.out, "map.csv"),
        ["name", "value"],
        list(zip(model.coefficient_names(), draws.map_state.beta))
        + list(zip(model.tau_names(), draws.map_state.tau2)),
    )

    data.to_csv(os.path.join(args.out, "data.csv"), index=False)
    with open(os.path.join(args.out, "spec.json"), "w", encoding="utf-8") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)
        fh.write("\n")
    meta = {
        "seed": settings.seed,
        "iterations": settings.iterations,
        "burnin": settings.burnin,
        "thin": settings.thin,
        "adjacency": adj_path,
        "n_draws": draws.n_draws,
        "responses": model.response_names,
    }
    with open(os.path.join(args.out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


# -- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.design not in DESIGNS:
        raise CliError(f"unknown design {args.design!r}; known: {sorted(DESIGNS)}")
    os.makedirs(args.out, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).spawn(args.replications)
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss.generate_state(1)[0])
        data, truth = generate(args.design, args.n, rng)
        cols = list(data)
        rows = zip(*(data[c] for c in cols))
        _write_csv(os.path.join(args.out, f"data_rep{i:03d}.csv"), cols, rows)
        with open(
            os.path.join(args.out, f"truth_rep{i:03d}.json"), "w", encoding="utf-8"
        ) as fh:
            json.dump(truth.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


# -- residuals ----------------------------------------------------------------

def _load_fit(fit_dir):
    spec = load_spec(os.path.join(fit_dir, "spec.json"))
    train = load_dataset(os.path.join(fit_dir, "data.csv"))
    try:
        with open(os.path.join(fit_dir, "meta.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{fit_dir} does not look like a fit directory (no meta.json)")
    adjacency = load_adjacency(meta["adjacency"]) if meta.get("adjacency") else None
    try:
        model = build_model(spec, train, adjacency=adjacency)
    except SpecValidationError as exc:
        raise CliError(f"stored spec no longer validates: {exc}")
    chain = pd.read_csv(os.path.join(fit_dir, "chain.csv"))
    coef_names = model.coefficient_names()
    missing = [c for c in coef_names if c not in chain.columns]
    if missing:
        raise CliError(f"chain.csv lacks coefficient columns: {missing[:5]}")
    beta = chain[coef_names].to_numpy()
    return model, train, meta, beta


def _etas_on(model: BuiltModel, beta_row, data) -> np.ndarray:
    n = len(next(iter(data.values()))) if isinstance(data, dict) else len(data)
    etas = np.empty((n, model.n_predictors))
    for pred in model.predictors:
        eta = np.zeros(n)
        for term, block in zip(pred.terms, pred.blocks):
            eta += term.design_for(data) @ beta_row[block.sl]
        etas[:, pred.index] = eta
    return etas


def cmd_residuals(args) -> int:
    model, train, meta, beta = _load_fit(args.fit)
    data = load_dataset(args.data) if args.data else train
    for name in model.response_names:
        if name not in data:
            raise CliError(f"response column {name!r} missing from the data")
    beta_hat = beta.mean(axis=0)
    etas = _etas_on(model, beta_hat, data)
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0)) + 1
    rng = np.random.default_rng(seed)
    out_dir = args.out or args.fit
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    qq_rows = []
    for j, fam in enumerate(model.families):
        name = model.response_names[j]
        y = np.asarray(data[name], dtype=float)
        theta = _theta_for_margin(model, etas, j)
        if fam.discrete:
            b = fam.cdf(y, theta)
            a = fam.left_limit_cdf(y, theta)
            prob = a + rng.uniform(size=len(y)) * (b - a)
        else:
            prob = fam.cdf(y, theta)
        resid = special.ndtri(np.clip(prob, PROB_EPS, 1.0 - PROB_EPS))
        rows += [(i + 1, name, r) for i, r in enumerate(resid)]
        srt = np.sort(resid)
        theo = special.ndtri((np.arange(1, len(srt) + 1) - 0.5) / len(srt))
        qq_rows += [(name, t, s) for t, s in zip(theo, srt)]
    _write_csv(os.path.join(out_dir, "residuals.csv"), ["row", "margin", "residual"], rows)
    _write_csv(
        os.path.join(out_dir, "qq.csv"), ["margin", "theoretical", "sample"], qq_rows
    )
    return 0


# -- summarize ----------------------------------------------------------------

def _reference_values(model: BuiltModel, data, overrides: dict) -> dict:
    mode_cols = set()
    for pred in model.predictors:
        for term in pred.terms:
            if term.kind in ("random_effect", "mrf"):
                mode_cols.update(term.covariates)
    ref = {}
    for col in data.columns:
        if col in overrides:
            ref[col] = overrides[col]
            continue
        series = data[col]
        values = series.to_numpy()
        if col in mode_cols or series.nunique() <= 2:
            # mode for grouping / binary covariates
            uniq, counts = np.unique(values, return_counts=True)
            ref[col] = uniq[np.argmax(counts)]
        else:
            ref[col] = float(np.mean(values.astype(float)))
    return ref


def _parse_functional(tag: str, model: BuiltModel):
    kind, _, rest = tag.partition(":")
    kind = kind.strip()
    if kind == "spearman":
        try:
            r, c = (int(v) for v in rest.split(","))
        except ValueError:
            raise CliError(f"functional {tag!r}: expected 'spearman:r,c'")
        if (r - 1, c - 1) not in model.pairs:
            raise CliError(f"functional {tag!r}: pair out of range")
        return ("spearman", model.pairs.index((r - 1, c - 1)))
    if kind in ("mean", "variance"):
        name = rest.strip()
        if name not in model.response_names:
            raise CliError(f"functional {tag!r}: unknown response {name!r}")
        return (kind, model.response_names.index(name))
    raise CliError(f"unknown functional kind {kind!r} in {tag!r}")


def cmd_summarize(args) -> int:
    model, train, meta, beta = _load_fit(args.fit)
    fspec = load_spec(args.functional)
    covariate = fspec.get("covariate")
    if not covariate or covariate not in train.columns:
        raise CliError(f"functional spec: covariate {covariate!r} not in the data")
    grid_spec = fspec.get("grid", 41)
    col = train[covariate].to_numpy(dtype=float)
    if isinstance(grid_spec, int):
        grid = np.linspace(col.min(), col.max(), grid_spec)
    else:
        grid = np.asarray(grid_spec, dtype=float)
    tags = fspec.get("functionals")
    if not tags:
        raise CliError("functional spec: 'functionals' list is required")
    parsed = [(tag, _parse_functional(tag, model)) for tag in tags]
    ref = _reference_values(model, train, fspec.get("reference", {}))
    grid_data = {}
    for c in train.columns:
        if c == covariate:
            grid_data[c] = grid
        else:
            grid_data[c] = np.repeat(ref[c], len(grid))

    m = beta.shape[0]
    out_dir = args.out or args.fit
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    svg_curves = {}
    import warnings as _warnings

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        etas_all = np.stack([_etas_on(model, beta[i], grid_data) for i in range(m)])
    for tag, (kind, idx) in parsed:
        if kind == "spearman":
            lam = etas_all[:, :, model.copula_pred_idx]
            G = lam.shape[1]
            omega = batch_omega_pairs(
                lam.reshape(m * G, -1), model.dim
            ).reshape(m, G, -1)
            values = spearman_rho(omega[:, :, idx])
        else:
            fam = model.families[idx]
            values = np.empty((m, len(grid)))
            for i in range(m):
                theta = _theta_for_margin(model, etas_all[i], idx)
                values[i] = fam.mean(theta) if kind == "mean" else fam.variance(theta)
        with np.errstate(all="ignore"):
            mean = np.nanmean(values, axis=0)
            defined = np.isfinite(values).all(axis=0)
            lo = np.where(defined, np.nanquantile(values, 0.025, axis=0), np.nan)
            hi = np.where(defined, np.nanquantile(values, 0.975, axis=0), np.nan)
            mean = np.where(np.isfinite(values).any(axis=0), mean, np.nan)
        for g in range(len(grid)):
            rows.append((tag, grid[g], mean[g], lo[g], hi[g]))
        svg_curves[tag] = (mean, lo, hi)
    _write_csv(
        os.path.join(out_dir, "slice.csv"),
        ["functional", covariate, "mean", "q025", "q975"],
        rows,
    )
    if args.svg:
        for tag, (mean, lo, hi) in svg_curves.items():
            safe = tag.replace(":", "_").replace(",", "_")
            band = None if np.any(~np.isfinite(lo)) else (lo, hi)
            line_plot_svg(
                os.path.join(out_dir, f"slice_{safe}.svg"),
                grid,
                [{"y": mean, "label": tag, "band": band}],
                title=tag,
                xlabel=covariate,
            )
    return 0


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvdistreg",
        description="Multivariate Gaussian-copula distributional regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write chain/diagnostics/summary")
    p.add_argument("--spec", required=True, help="model spec (JSON)")
    p.add_argument("--data", required=True, help="data CSV (header required)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--burnin", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="worker bound (single chain ignores it)")
    p.add_argument("--adjacency", default=None, help="edge list for mrf terms")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="write simulation-design datasets")
    p.add_argument("--design", required=True, help=f"one of {sorted(DESIGNS)}")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("residuals", help="normalized quantile residuals of a fit")
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--data", default=None, help="data CSV (defaults to the training data)")
    p.add_argument("--out", default=None, help="output directory (defaults to the fit dir)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_residuals)

    p = sub.add_parser("summarize", help="posterior slices of derived functionals")
    p.add_argument("--fit", required=True, help="fit output directory")
    p.add_argument("--functional", required=True, help="functional spec (JSON)")
    p.add_argument("--out", default=None)
    p.add_argument("--svg", action="store_true", help="also write SVG line plots")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SpecValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
