"""Dataset model, CSV ingestion, and design-matrix construction.

The unit of all estimation is a :class:`LinkedDataset`: n i.i.d. records of
(r, z, y, x, v) where the extra covariate block v is observed exactly when
the selection indicator r is 1.  Working models are declared through
:class:`FeatureMap` objects that name their regressors with tokens
("z", "x0".."x{p-1}", "v0".."v{q-1}") so that misspecified variants can be
produced by swapping the covariate transform.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    ConsistencyError,
    DegeneracyError,
    MissingDataError,
    ParseError,
    ValidationError,
)

TRANSFORMS = ("identity", "sqrt_abs")

_TOKEN_RE = re.compile(r"^(z|x(\d+)|v(\d+))$")


def apply_transform(u: np.ndarray, tag: str) -> np.ndarray:
    if tag == "identity":
        return u
    if tag == "sqrt_abs":
        return np.sqrt(np.abs(u))
    raise ValidationError(f"unknown transform {tag!r}")


@dataclass(frozen=True)
class LinkedRecord:
    """One observation; v is None outside the linked cohort (r = 0)."""

    r: int
    z: int
    y: float
    x: np.ndarray
    v: Optional[np.ndarray]

    def __post_init__(self):
        if self.r not in (0, 1) or self.z not in (0, 1):
            raise ValidationError("r and z must be 0 or 1")
        if (self.v is not None) != (self.r == 1):
            raise ConsistencyError("v must be present exactly when r = 1")


@dataclass(frozen=True)
class FeatureMap:
    """Declarative design-matrix layout for one working model.

    Columns come out in a fixed order: intercept, mains in declaration
    order, then interaction products in declaration order.  ``transform``
    applies to every x/v factor (z is never transformed); individual
    covariates can be overridden through ``transform_overrides``.
    """

    mains: tuple[str, ...]
    interactions: tuple[tuple[str, ...], ...] = ()
    transform: str = "identity"
    transform_overrides: tuple[tuple[str, str], ...] = ()
    include_intercept: bool = True

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValidationError(f"unknown transform {self.transform!r}")
        for tok in self.tokens():
            if not _TOKEN_RE.match(tok):
                raise ValidationError(f"bad covariate token {tok!r}")
        for term in self.interactions:
            if len(term) < 2 or len(term) > 3:
                raise ValidationError("interactions must be pairs or triples")
        for tok, tag in self.transform_overrides:
            if tag not in TRANSFORMS:
                raise ValidationError(f"unknown transform {tag!r}")

    def tokens(self) -> tuple[str, ...]:
        out = list(self.mains)
        for term in self.interactions:
            out.extend(term)
        return tuple(out)

    @property
    def uses_z(self) -> bool:
        return "z" in self.tokens()

    @property
    def uses_v(self) -> bool:
        return any(t.startswith("v") for t in self.tokens())

    def validate_for(self, p: int, q: int, allow: str = "zxv") -> None:
        """Check every token refers to an existing, permitted variable."""
        for tok in self.tokens():
            m = _TOKEN_RE.match(tok)
            kind = tok[0]
            if kind not in allow:
                raise ValidationError(
                    f"token {tok!r} not allowed in this model (allowed: {allow})"
                )
            if kind == "x" and int(m.group(2)) >= p:
                raise ValidationError(f"token {tok!r} out of range for p={p}")
            if kind == "v" and int(m.group(3)) >= q:
                raise ValidationError(f"token {tok!r} out of range for q={q}")

    def column_names(self) -> tuple[str, ...]:
        names = ["1"] if self.include_intercept else []
        tag = dict(self.transform_overrides)

        def label(tok: str) -> str:
            t = "identity" if tok == "z" else tag.get(tok, self.transform)
            return tok if t == "identity" else f"{t}({tok})"

        names.extend(label(t) for t in self.mains)
        names.extend("*".join(label(t) for t in term) for term in self.interactions)
        return tuple(names)

    @property
    def width(self) -> int:
        return len(self.column_names())

    def _factor(self, tok: str, z, x, v, raw_v: bool = False):
        # z may be a scalar override; x is (n, p); v is (n, q) or (n, D, q).
        # raw_v skips the v transform: imputation draws already live on the
        # working model's v scale.
        if tok == "z":
            return np.asarray(z, dtype=float)
        m = _TOKEN_RE.match(tok)
        tag = dict(self.transform_overrides).get(tok, self.transform)
        if tok[0] == "x":
            return apply_transform(x[:, int(m.group(2))], tag)
        if v is None:
            raise MissingDataError(f"model requires {tok} but v is unavailable")
        val = v[..., int(m.group(3))]
        return val if raw_v else apply_transform(val, tag)

    def _terms(self) -> tuple[tuple[str, ...], ...]:
        singles = tuple((t,) for t in self.mains)
        return singles + self.interactions

    def build(self, z, x: np.ndarray, v: Optional[np.ndarray]) -> np.ndarray:
        """Design matrix (n, width) for observed data.

        ``z`` may be an (n,) array or a scalar override used to evaluate
        counterfactual designs.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        zcol = np.broadcast_to(np.asarray(z, dtype=float), (n,))
        out = np.empty((n, self.width))
        c = 0
        if self.include_intercept:
            out[:, 0] = 1.0
            c = 1
        for term in self._terms():
            col = None
            for tok in term:
                f = self._factor(tok, zcol, x, v)
                col = f if col is None else col * f
            out[:, c] = col
            c += 1
        return out

    def affine_on_draws(self, coef: np.ndarray, z, x: np.ndarray,
                        raw_v: bool = True):
        """Split the linear predictor over draws into affine and general parts.

        Returns (base, slopes, general): terms affine in a single draw
        component collapse to base + sum_j slopes[j] * draws[..., j]; any
        remaining terms are listed in ``general`` for per-draw evaluation.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        zrow = np.broadcast_to(np.asarray(z, dtype=float), (n,))
        tag = dict(self.transform_overrides)

        def vfree_product(toks):
            out = None
            for tok in toks:
                f = zrow if tok == "z" else self._factor(tok, zrow, x, None)
                out = f.copy() if out is None else out * f
            return np.ones(n) if out is None else out

        base = np.zeros(n)
        slopes: dict[int, np.ndarray] = {}
        general: list[tuple[float, tuple[str, ...]]] = []
        k = 0
        if self.include_intercept:
            base += coef[0]
            k = 1
        for term in self._terms():
            vtoks = [t for t in term if t.startswith("v")]
            identity_v = raw_v or all(
                tag.get(t, self.transform) == "identity" for t in vtoks)
            if not vtoks:
                base += coef[k] * vfree_product(term)
            elif len(vtoks) == 1 and identity_v:
                j = int(_TOKEN_RE.match(vtoks[0]).group(3))
                contrib = coef[k] * vfree_product(
                    [t for t in term if not t.startswith("v")])
                slopes[j] = slopes.get(j, 0.0) + contrib
            else:
                general.append((coef[k], term))
            k += 1
        return base, slopes, general

    def linear_predictor_on_draws(
        self, coef: np.ndarray, z, x: np.ndarray, v_draws: np.ndarray,
        raw_v: bool = True,
    ) -> np.ndarray:
        """Evaluate X @ coef over imputation draws without materialising X.

        ``v_draws`` has shape (n, D, q); the result is (n, D).  Columns not
        involving v broadcast across the draw axis, which keeps the memory
        footprint at one (n, D) buffer per v-column.  By default draws feed
        the v factors untransformed: they already carry the scale of the
        working models' v column.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, D = x.shape[0], v_draws.shape[1]
        base, slopes, general = self.affine_on_draws(coef, z, x, raw_v)
        if not slopes and not general:
            return np.broadcast_to(base[:, None], (n, D))
        items = sorted(slopes.items())
        if items:
            j0, s0 = items[0]
            eta = v_draws[:, :, j0] * s0[:, None]
            eta += base[:, None]
            items = items[1:]
        else:
            eta = np.broadcast_to(base[:, None], (n, D)).copy()
        for j, slope in items:
            eta += slope[:, None] * v_draws[:, :, j]
        zrow = np.broadcast_to(np.asarray(z, dtype=float), (n,))
        zcol = zrow[:, None]
        for ck, term in general:
            col = None
            for tok in term:
                if tok.startswith("v"):
                    f = self._factor(tok, zcol, x, v_draws, raw_v=raw_v)
                elif tok == "z":
                    f = zcol
                else:
                    f = self._factor(tok, zcol, x, None)[:, None]
                col = f if col is None else col * f
            eta += ck * col
        return eta


@dataclass(frozen=True)
class ModelSpec:
    """The four working-model designs used throughout estimation.

    The selection and imputation designs may only reference x; the
    propensity design may reference x and v; the outcome design may
    reference z, x, and v.
    """

    selection: FeatureMap
    propensity: FeatureMap
    outcome: FeatureMap
    imputation: FeatureMap

    def validate_for(self, p: int, q: int) -> None:
        self.selection.validate_for(p, q, allow="x")
        self.propensity.validate_for(p, q, allow="xv")
        self.outcome.validate_for(p, q, allow="zxv")
        self.imputation.validate_for(p, q, allow="x")

    @classmethod
    def default(cls, p: int, q: int, transform: str = "identity") -> "ModelSpec":
        """Mains-plus-interactions baseline: logistic selection on x,
        propensity on (x, v), outcome on z, x, v with z-interactions,
        Gaussian imputation on x."""
        xs = tuple(f"x{j}" for j in range(p))
        vs = tuple(f"v{j}" for j in range(q))
        inter = tuple(("z", t) for t in xs + vs)
        return cls(
            selection=FeatureMap(mains=xs, transform=transform),
            propensity=FeatureMap(mains=xs + vs, transform=transform),
            outcome=FeatureMap(mains=("z",) + xs + vs, interactions=inter,
                               transform=transform),
            imputation=FeatureMap(mains=xs, transform=transform),
        )


@dataclass(frozen=True)
class LinkedDataset:
    """Immutable n-record dataset; arrays are locked after construction."""

    r: np.ndarray
    z: np.ndarray
    y: np.ndarray
    x: np.ndarray
    v: np.ndarray  # NaN outside the linked cohort
    outcome_family: str

    def __post_init__(self):
        for a in (self.r, self.z, self.y, self.x, self.v):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return self.r.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.v.shape[1]

    @property
    def linked(self) -> np.ndarray:
        return self.r == 1

    @property
    def n_linked(self) -> int:
        return int(self.r.sum())

    def record(self, i: int) -> LinkedRecord:
        v = self.v[i].copy() if self.r[i] == 1 else None
        return LinkedRecord(int(self.r[i]), int(self.z[i]), float(self.y[i]),
                            self.x[i].copy(), v)

    def subset(self, idx: np.ndarray) -> "LinkedDataset":
        """Row-resampled copy (used by the pairs bootstrap); revalidates."""
        return from_arrays(self.r[idx], self.z[idx], self.y[idx],
                           self.x[idx], self.v[idx], self.outcome_family)


def from_arrays(r, z, y, x, v, outcome_family: str) -> LinkedDataset:
    """Validate and assemble a LinkedDataset from raw arrays.

    v must be NaN exactly where r = 0; a missing linked arm raises
    DegeneracyError because neither the propensity nor the outcome model
    could be fit.
    """
    r = np.asarray(r, dtype=np.int8)
    z = np.asarray(z, dtype=np.int8)
    y = np.asarray(y, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = r.shape[0]
    if not (z.shape == y.shape == (n,) and x.shape[0] == n and v.shape[0] == n):
        raise ValidationError("array lengths disagree")
    if x.shape[1] < 1 or v.shape[1] < 1:
        raise ValidationError("need p >= 1 and q >= 1")
    if not np.isin(r, (0, 1)).all() or not np.isin(z, (0, 1)).all():
        raise ValidationError("r and z must be 0/1")
    if not np.isfinite(x).all() or not np.isfinite(y).all():
        raise ValidationError("non-finite x or y")
    if outcome_family not in ("continuous", "binary"):
        raise ValidationError(f"unknown outcome family {outcome_family!r}")
    if outcome_family == "binary" and not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("binary family requires y in {0,1}")
    linked = r == 1
    if np.isnan(v[linked]).any():
        raise ConsistencyError("missing v on a linked (r = 1) row")
    if not np.isnan(v[~linked]).all():
        raise ConsistencyError("v present on an unlinked (r = 0) row")
    if not np.isfinite(v[linked]).all():
        raise ValidationError("non-finite v on a linked row")
    if linked.sum() == 0:
        raise DegeneracyError("no linked records")
    zl = z[linked]
    if zl.min() == zl.max():
        raise DegeneracyError(
            "linked subset contains a single treatment arm; "
            "propensity and outcome models cannot be fit"
        )
    return LinkedDataset(r=r, z=z, y=y, x=x, v=v, outcome_family=outcome_family)


def _expected_header(p: int, q: int) -> list[str]:
    return (["r", "z", "y"] + [f"x{j}" for j in range(1, p + 1)]
            + [f"v{j}" for j in range(1, q + 1)])


def _parse_header(header: list[str]) -> tuple[int, int]:
    cells = [h.strip() for h in header]
    if cells[:3] != ["r", "z", "y"]:
        raise ParseError("header must start with r,z,y")
    p = 0
    i = 3
    while i < len(cells) and cells[i] == f"x{p + 1}":
        p += 1
        i += 1
    q = 0
    while i < len(cells) and cells[i] == f"v{q + 1}":
        q += 1
        i += 1
    if i != len(cells) or p == 0 or q == 0:
        raise ParseError("header must be r,z,y,x1..xp,v1..vq")
    return p, q


def load_csv(path, outcome_family: str) -> LinkedDataset:
    """Read the canonical CSV schema (see :func:`write_csv`) and validate.

    Missing v is encoded as an empty cell and must occur exactly on r = 0
    rows.  Errors carry 1-based line numbers.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise ParseError(f"cannot open {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        p, q = _parse_header(header)
        rs, zs, ys, xs, vs = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + p + q:
                raise ParseError(f"line {lineno}: expected {3 + p + q} cells, "
                                 f"got {len(row)}")
            try:
                rv = int(row[0])
                zv = int(row[1])
                yv = float(row[2])
                xv = [float(c) for c in row[3:3 + p]]
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from None
            vcells = [c.strip() for c in row[3 + p:]]
            empties = [c == "" for c in vcells]
            if rv == 1:
                if any(empties):
                    raise ConsistencyError(f"line {lineno}: r=1 row with missing v")
                try:
                    vv = [float(c) for c in vcells]
                except ValueError as e:
                    raise ParseError(f"line {lineno}: {e}") from None
            else:
                if not all(empties):
                    raise ConsistencyError(f"line {lineno}: r=0 row with v present")
                vv = [np.nan] * q
            rs.append(rv)
            zs.append(zv)
            ys.append(yv)
            xs.append(xv)
            vs.append(vv)
    if not rs:
        raise ParseError("no data rows")
    return from_arrays(rs, zs, ys, np.array(xs), np.array(vs), outcome_family)


def _fmt(value: float) -> str:
    # repr() gives the shortest string that round-trips a float64
    return repr(float(value))


def write_csv(dataset: LinkedDataset, path) -> None:
    """Inverse of :func:`load_csv` up to float formatting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_expected_header(dataset.p, dataset.q))
        for i in range(dataset.n):
            row = [str(int(dataset.r[i])), str(int(dataset.z[i])),
                   _fmt(dataset.y[i])]
            row += [_fmt(c) for c in dataset.x[i]]
            if dataset.r[i] == 1:
                row += [_fmt(c) for c in dataset.v[i]]
            else:
                row += [""] * dataset.q
            writer.writerow(row)


RowFilter = Union[str, np.ndarray, Sequence[int]]


def _resolve_rows(dataset: LinkedDataset, rows: RowFilter) -> np.ndarray:
    if isinstance(rows, str):
        if rows == "all":
            return np.arange(dataset.n)
        if rows == "linked":
            return np.flatnonzero(dataset.linked)
        raise ValidationError(f"unknown row filter {rows!r}")
    idx = np.asarray(rows)
    if idx.dtype == bool:
        return np.flatnonzero(idx)
    return idx.astype(int)


def build_design(
    dataset: LinkedDataset,
    fmap: FeatureMap,
    rows: RowFilter = "all",
    z_override: Optional[int] = None,
) -> np.ndarray:
    """Design matrix for the selected rows, in the map's fixed column order.

    Requesting a v-using map on any r = 0 row raises MissingDataError.
    ``z_override`` evaluates the design at a counterfactual treatment level.
    """
    idx = _resolve_rows(dataset, rows)
    v = None
    if fmap.uses_v:
        if not dataset.linked[idx].all():
            raise MissingDataError("design needs v on rows outside the linked cohort")
        v = dataset.v[idx]
    z = dataset.z[idx] if z_override is None else float(z_override)
    return fmap.build(z, dataset.x[idx], v)
