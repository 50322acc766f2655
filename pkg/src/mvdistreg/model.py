"""Model specification and coefficient layout.

A model couples D parametric margins with a Gaussian copula whose
unrestricted correlation parameters get their own additive predictors.
``build_model`` turns a JSON-compatible config plus a data table into a
:class:`BuiltModel`: one predictor per distributional parameter (margin
parameters first, copula pairs last, row-major), each predictor a list of
effect terms, each term one coefficient block.

Config schema::

    {
      "responses": [{"name": "y1", "family": "gaussian"}, ...],
      "predictors": {"y1": {"mu": [TERM, ...], "sigma": [TERM, ...]}, ...},
      "copula": "constant" | {"2,1": [TERM, ...], ...},
      "mode": "copula" | "univariate",
      "chain": {...}          # consumed by the sampler / CLI
    }

with TERM like ``{"kind": "pspline", "covariate": "x", "knots": 20,
"degree": 3, "order": 2, "a": 0.001, "b": 0.001, "constraint": "auto"}``.
Missing parameter entries default to an intercept-only predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import design
from .copula import n_pairs, pair_indices
from .margins import MarginFamily, get_family

__all__ = [
    "SpecValidationError",
    "Block",
    "Predictor",
    "BuiltModel",
    "ParameterState",
    "build_model",
    "response_matrix",
]


class SpecValidationError(ValueError):
    """A model-spec document failed validation."""


@dataclass
class Block:
    """One coefficient block: an effect term within one predictor."""

    index: int
    pred_index: int
    term: design.EffectTerm
    sl: slice
    nullspace: np.ndarray | None  # orthonormal basis of {A b = 0}, None if unconstrained
    tau_index: int | None  # position in the tau2 vector, None for flat blocks
    label: str

    @property
    def size(self) -> int:
        return self.term.size


@dataclass
class Predictor:
    """Additive predictor attached to one distributional parameter."""

    index: int
    label: str
    link: str
    target: tuple  # ("margin", j, m) or ("copula", pair_position)
    terms: list[design.EffectTerm]
    blocks: list[Block] = field(default_factory=list)


@dataclass
class BuiltModel:
    families: list[MarginFamily]
    response_names: list[str]
    predictors: list[Predictor]
    blocks: list[Block]
    n_coef: int
    n_tau: int
    margin_pred_idx: list[list[int]]  # [j][m] -> predictor index
    copula_pred_idx: list[int]  # pair position -> predictor index
    univariate: bool
    config: dict

    @property
    def dim(self) -> int:
        return len(self.families)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return pair_indices(self.dim)

    @property
    def n_predictors(self) -> int:
        return len(self.predictors)

    def new_state(self) -> "ParameterState":
        return ParameterState(np.zeros(self.n_coef), np.ones(self.n_tau))

    def coefficient_names(self) -> list[str]:
        names = []
        for pred in self.predictors:
            for block in pred.blocks:
                for i in range(block.size):
                    names.append(f"{block.label}.b{i}")
        return names

    def tau_names(self) -> list[str]:
        names = [None] * self.n_tau
        for block in self.blocks:
            if block.tau_index is not None:
                names[block.tau_index] = f"tau2.{block.label}"
        return names


@dataclass
class ParameterState:
    """All regression coefficients plus smoothing variances."""

    beta: np.ndarray
    tau2: np.ndarray

    def copy(self) -> "ParameterState":
        return ParameterState(self.beta.copy(), self.tau2.copy())

    def block(self, block: Block) -> np.ndarray:
        return self.beta[block.sl]


_TERM_KINDS = {"intercept", "linear", "pspline", "random_effect", "mrf"}


def _build_term(cfg: dict, data, where: str, adjacency=None) -> design.EffectTerm:
    kind = cfg.get("kind")
    if kind not in _TERM_KINDS:
        raise SpecValidationError(f"{where}: unknown term kind {kind!r}")
    n = len(next(iter(data.values()))) if isinstance(data, dict) else len(data)
    if kind == "intercept":
        return design.intercept_term(n, prior=cfg.get("prior", "flat"))
    cov = cfg.get("covariate")
    if not cov:
        raise SpecValidationError(f"{where}: term kind {kind!r} needs a 'covariate'")
    try:
        col = data[cov]
    except KeyError:
        raise SpecValidationError(f"{where}: covariate {cov!r} not found in the data")
    a = float(cfg.get("a", design.DEFAULT_HYPER))
    b = float(cfg.get("b", design.DEFAULT_HYPER))
    if kind == "linear":
        return design.linear_term(col, cov, prior=cfg.get("prior", "flat"))
    if kind == "pspline":
        return design.pspline_term(
            col,
            cov,
            num_inner_knots=int(cfg.get("knots", 20)),
            degree=int(cfg.get("degree", 3)),
            penalty_order=int(cfg.get("order", 2)),
            a=a,
            b=b,
        )
    if kind == "random_effect":
        return design.random_effect_term(col, cov, a=a, b=b)
    if adjacency is None:
        raise SpecValidationError(f"{where}: mrf term needs an adjacency (edge list)")
    return design.mrf_term(col, cov, adjacency, a=a, b=b)


def _assemble_predictor(pred: Predictor, term_cfgs: list[dict], data, adjacency):
    where = f"predictor {pred.label!r}"
    n_intercepts = sum(1 for c in term_cfgs if c.get("kind") == "intercept")
    if n_intercepts > 1:
        raise SpecValidationError(f"{where}: at most one intercept term")
    for cfg in term_cfgs:
        term = _build_term(cfg, data, where, adjacency)
        want = cfg.get("constraint", "auto")
        if term.kind in ("pspline", "random_effect", "mrf"):
            constrain = n_intercepts > 0 if want == "auto" else bool(want)
            if constrain:
                term.A = design.centering_constraint(term.Z)
        pred.terms.append(term)


def _parse_copula_section(cfg, dim: int) -> list[list[dict]]:
    pairs = pair_indices(dim)
    if cfg is None or cfg == "constant":
        return [[{"kind": "intercept"}] for _ in pairs]
    if not isinstance(cfg, dict):
        raise SpecValidationError("copula: expected 'constant' or a mapping of pairs")
    by_key = {}
    for key, terms in cfg.items():
        try:
            r, c = (int(v) for v in str(key).split(","))
        except ValueError:
            raise SpecValidationError(
                f"copula: bad pair key {key!r}; use '2,1' style (1-based row,col)"
            )
        if not (1 <= c < r <= dim):
            raise SpecValidationError(f"copula: pair {key!r} out of range for D={dim}")
        by_key[(r - 1, c - 1)] = terms
    missing = [p for p in pairs if p not in by_key]
    if missing:
        raise SpecValidationError(
            f"copula: missing predictors for pairs {[(r+1, c+1) for r, c in missing]}"
        )
    extra = [k for k in by_key if k not in pairs]
    if extra:
        raise SpecValidationError(f"copula: unexpected pair keys {extra}")
    return [by_key[p] for p in pairs]


def build_model(config: dict, data, adjacency=None) -> BuiltModel:
    """Validate a model config against a data table and assemble the layout."""
    responses = config.get("responses")
    if not responses:
        raise SpecValidationError("responses: at least one response is required")
    univariate = config.get("mode", "copula") == "univariate"
    families, names = [], []
    for i, resp in enumerate(responses):
        name = resp.get("name")
        if not name:
            raise SpecValidationError(f"responses[{i}]: missing 'name'")
        if name not in data:
            raise SpecValidationError(f"responses[{i}]: column {name!r} not in the data")
        try:
            families.append(get_family(resp.get("family", "")))
        except ValueError as exc:
            raise SpecValidationError(f"responses[{i}].family: {exc}") from None
        names.append(name)
    dim = len(families)
    if dim == 1 and not univariate:
        raise SpecValidationError(
            "a single response requires mode='univariate'; the copula model needs D >= 2"
        )
    if univariate and dim != 1:
        raise SpecValidationError("mode='univariate' expects exactly one response")

    pred_cfgs = config.get("predictors", {})
    predictors: list[Predictor] = []
    margin_pred_idx: list[list[int]] = []
    for j, (fam, name) in enumerate(zip(families, names)):
        per_param = pred_cfgs.get(name, {})
        unknown = set(per_param) - {p.name for p in fam.params}
        if unknown:
            raise SpecValidationError(
                f"predictors[{name!r}]: unknown parameters {sorted(unknown)} "
                f"for family {fam.name!r}"
            )
        idxs = []
        for m, param in enumerate(fam.params):
            k = len(predictors)
            pred = Predictor(k, f"{name}.{param.name}", param.link, ("margin", j, m), [])
            terms = per_param.get(param.name, [{"kind": "intercept"}])
            _assemble_predictor(pred, terms, data, adjacency)
            predictors.append(pred)
            idxs.append(k)
        margin_pred_idx.append(idxs)

    copula_pred_idx: list[int] = []
    if not univariate:
        pair_terms = _parse_copula_section(config.get("copula", "constant"), dim)
        for pos, (r, c) in enumerate(pair_indices(dim)):
            k = len(predictors)
            pred = Predictor(
                k, f"lambda.{r + 1}{c + 1}", "identity", ("copula", pos), []
            )
            _assemble_predictor(pred, pair_terms[pos], data, adjacency)
            predictors.append(pred)
            copula_pred_idx.append(k)
        if len(copula_pred_idx) != n_pairs(dim):
            raise SpecValidationError("copula: wrong number of pair predictors")

    blocks: list[Block] = []
    offset = 0
    n_tau = 0
    for pred in predictors:
        for term in pred.terms:
            sl = slice(offset, offset + term.size)
            nullspace = (
                design.constraint_nullspace(term.A) if term.A is not None else None
            )
            tau_index = n_tau if term.penalized else None
            if term.penalized:
                n_tau += 1
            blocks.append(
                Block(
                    len(blocks),
                    pred.index,
                    term,
                    sl,
                    nullspace,
                    tau_index,
                    f"{pred.label}.{term.label}",
                )
            )
            pred.blocks.append(blocks[-1])
            offset += term.size

    return BuiltModel(
        families=families,
        response_names=names,
        predictors=predictors,
        blocks=blocks,
        n_coef=offset,
        n_tau=n_tau,
        margin_pred_idx=margin_pred_idx,
        copula_pred_idx=copula_pred_idx,
        univariate=univariate,
        config=config,
    )


def response_matrix(model: BuiltModel, data) -> np.ndarray:
    """(n, D) response matrix; discrete margins must hold integer counts."""
    cols = []
    for fam, name in zip(model.families, model.response_names):
        col = np.asarray(data[name], dtype=float)
        if fam.discrete and np.any(col != np.floor(col)):
            raise SpecValidationError(
                f"response {name!r}: family {fam.name!r} needs integer counts"
            )
        cols.append(col)
    return np.column_stack(cols)
