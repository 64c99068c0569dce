"""Role-tagged survey data: loading, validation, design weights, constraints.

A :class:`Dataset` couples a dictionary of numeric columns with a role map
(response, covariates, design variables, inclusion probability, weight source,
family identifier) and the normalized design-weight vector ``d`` derived from
the tagged weight source.  Population-level moment constraints are described
by :class:`ConstraintSpec` and materialized as an ``n x q`` residual matrix by
:func:`build_constraint_matrix`.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

ROLE_KEYS = ("response", "covariates", "design", "pi", "weight", "weight_mode", "family")
WEIGHT_MODES = ("inverse-probability", "direct")
CONSTRAINT_KINDS = ("subgroup-moment", "general-moment")


def normalize_design_weights(source, mode: str = "direct") -> np.ndarray:
    """Turn a raw weight source into a normalized design-weight vector.

    Parameters
    ----------
    source : array-like
        Strictly positive raw weights (``mode="direct"``) or inclusion
        probabilities (``mode="inverse-probability"``, weights become
        ``1/source``).
    mode : str
        One of ``"direct"`` or ``"inverse-probability"``.

    Returns
    -------
    numpy.ndarray
        Weights scaled to sum exactly to one.
    """
    if mode not in WEIGHT_MODES:
        raise DataError(
            f"normalize_design_weights: unknown mode {mode!r}; expected one of {WEIGHT_MODES}"
        )
    source = np.asarray(source, dtype=float)
    if source.ndim != 1 or source.size == 0:
        raise DataError("normalize_design_weights: source must be a non-empty 1-d array")
    if not np.all(np.isfinite(source)):
        raise DataError("normalize_design_weights: source contains non-finite values")
    if np.any(source <= 0.0):
        raise DataError("normalize_design_weights: source must be strictly positive")
    base = 1.0 / source if mode == "inverse-probability" else source.copy()
    return base / base.sum()


def _validate_roles(roles: dict, columns: dict) -> dict:
    unknown = set(roles) - set(ROLE_KEYS)
    if unknown:
        raise DataError(f"dataset roles: unknown role keys {sorted(unknown)}; expected {ROLE_KEYS}")
    out = dict(roles)
    for key in ("response", "pi", "weight", "family"):
        name = out.get(key)
        if name is None:
            continue
        if not isinstance(name, str):
            raise DataError(f"dataset roles: role {key!r} must name a single column")
        if name not in columns:
            raise DataError(f"dataset roles: column {name!r} tagged as {key!r} is not present")
    for key in ("covariates", "design"):
        names = out.get(key)
        if names is None:
            out[key] = ()
            continue
        if isinstance(names, str):
            raise DataError(f"dataset roles: role {key!r} must be a list of column names")
        names = tuple(names)
        for name in names:
            if name not in columns:
                raise DataError(f"dataset roles: column {name!r} tagged as {key!r} is not present")
        out[key] = names
    mode = out.get("weight_mode", "direct")
    if mode not in WEIGHT_MODES:
        raise DataError(f"dataset roles: weight_mode {mode!r} not in {WEIGHT_MODES}")
    out["weight_mode"] = mode
    return out


@dataclass(frozen=True)
class Dataset:
    """Validated columnar data with roles and normalized design weights."""

    columns: dict[str, np.ndarray]
    roles: dict
    d: np.ndarray

    def __post_init__(self):
        if not self.columns:
            raise DataError("Dataset: at least one column is required")
        lengths = {name: len(col) for name, col in self.columns.items()}
        n = next(iter(lengths.values()))
        if any(m != n for m in lengths.values()):
            raise DataError(f"Dataset: column lengths differ: {lengths}")
        if n == 0:
            raise DataError("Dataset: zero rows")
        roles = _validate_roles(self.roles, self.columns)
        object.__setattr__(self, "roles", roles)
        cols = {name: np.asarray(col, dtype=float) for name, col in self.columns.items()}
        object.__setattr__(self, "columns", cols)
        tagged = set()
        for key in ("response", "pi", "weight", "family"):
            if roles.get(key):
                tagged.add(roles[key])
        tagged.update(roles["covariates"])
        tagged.update(roles["design"])
        for name in tagged:
            if not np.all(np.isfinite(cols[name])):
                raise DataError(f"Dataset: role-tagged column {name!r} has missing or non-finite values")
        if roles.get("pi"):
            pi = cols[roles["pi"]]
            if np.any(pi <= 0.0) or np.any(pi > 1.0):
                raise DataError(f"Dataset: inclusion probabilities in {roles['pi']!r} must lie in (0, 1]")
        d = np.asarray(self.d, dtype=float)
        object.__setattr__(self, "d", d)
        if d.shape != (n,):
            raise DataError(f"Dataset: d has shape {d.shape}, expected ({n},)")
        if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
            raise DataError("Dataset: design weights must be strictly positive and finite")
        if abs(d.sum() - 1.0) > 1e-12:
            raise DataError(f"Dataset: design weights sum to {d.sum()!r}, expected 1 within 1e-12")

    @property
    def n(self) -> int:
        return self.d.shape[0]

    @property
    def y(self) -> np.ndarray:
        name = self.roles.get("response")
        if name is None:
            raise DataError("Dataset: no column is tagged as the response")
        return self.columns[name]

    @property
    def covariate_matrix(self) -> np.ndarray:
        names = self.roles["covariates"]
        if not names:
            return np.empty((self.n, 0))
        return np.column_stack([self.columns[name] for name in names])

    @property
    def pi(self) -> np.ndarray | None:
        name = self.roles.get("pi")
        return None if name is None else self.columns[name]


def make_dataset(columns: dict, roles: dict) -> Dataset:
    """Build a :class:`Dataset`, deriving ``d`` from the tagged weight source.

    Precedence: an explicit ``weight`` column (interpreted per ``weight_mode``)
    wins over a tagged ``pi`` column (inverse-probability weights); with
    neither tag the design weights are uniform.
    """
    roles = _validate_roles(roles, columns)
    n = len(next(iter(columns.values())))
    if roles.get("weight"):
        d = normalize_design_weights(columns[roles["weight"]], roles["weight_mode"])
    elif roles.get("pi"):
        d = normalize_design_weights(columns[roles["pi"]], "inverse-probability")
    else:
        d = np.full(n, 1.0 / n)
    return Dataset(columns=dict(columns), roles=roles, d=d)


def load_dataset(path: str, schema: dict) -> Dataset:
    """Read a CSV file and validate it against a role schema.

    Every column in the file is parsed as a float; empty cells and
    non-numeric entries are rejected with the offending row and column named.
    ``schema`` is a role map with keys drawn from ``ROLE_KEYS``.
    """
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"load_dataset: {path!r} is empty") from None
            header = [name.strip() for name in header]
            if len(set(header)) != len(header):
                raise DataError(f"load_dataset: duplicate column names in {path!r}")
            raw = {name: [] for name in header}
            for rownum, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise DataError(
                        f"load_dataset: row {rownum} of {path!r} has {len(row)} fields, expected {len(header)}"
                    )
                for name, cell in zip(header, row):
                    cell = cell.strip()
                    if cell == "":
                        raise DataError(f"load_dataset: missing value at row {rownum}, column {name!r}")
                    try:
                        raw[name].append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"load_dataset: non-numeric value {cell!r} at row {rownum}, column {name!r}"
                        ) from None
    except OSError as exc:
        raise DataError(f"load_dataset: cannot read {path!r}: {exc}") from exc
    if not raw or not next(iter(raw.values())):
        raise DataError(f"load_dataset: {path!r} has no data rows")
    columns = {name: np.asarray(vals, dtype=float) for name, vals in raw.items()}
    return make_dataset(columns, schema)


def _take(columns: dict, idx: np.ndarray) -> dict:
    return {name: col[idx] for name, col in columns.items()}


def decluster(data: Dataset, seed: int) -> Dataset:
    """Keep one member per family, re-weighting survivors by family size.

    For each family (grouped by the role-tagged family-identifier column) one
    row is selected uniformly at random.  The survivor's pre-normalization
    weight is multiplied by the family size ``n_f``; the adjusted weights are
    stored in a ``declustered_weight`` column (which becomes the weight
    source) and the family sizes in an ``nf`` column.  Deterministic for a
    given ``seed``.
    """
    if not isinstance(seed, (int, np.integer)):
        raise DataError("decluster: seed must be an integer")
    fam_col = data.roles.get("family")
    if fam_col is None:
        raise DataError("decluster: no column is tagged as the family identifier")
    fam = data.columns[fam_col]
    if data.roles.get("weight"):
        raw = data.columns[data.roles["weight"]]
        if data.roles["weight_mode"] == "inverse-probability":
            raw = 1.0 / raw
    elif data.roles.get("pi"):
        raw = 1.0 / data.columns[data.roles["pi"]]
    else:
        raw = np.ones(data.n)

    rng = np.random.default_rng(seed)
    # Group by first appearance so the iteration order never depends on id values.
    order: list[float] = []
    members: dict[float, list[int]] = {}
    for i, f in enumerate(fam):
        if f not in members:
            members[f] = []
            order.append(f)
        members[f].append(i)
    keep = []
    sizes = []
    for f in order:
        idx = members[f]
        keep.append(idx[rng.integers(0, len(idx))])
        sizes.append(len(idx))
    keep = np.asarray(keep, dtype=int)
    sizes = np.asarray(sizes, dtype=float)
    sort = np.argsort(keep)
    keep, sizes = keep[sort], sizes[sort]

    columns = _take(data.columns, keep)
    columns["nf"] = sizes
    columns["declustered_weight"] = raw[keep] * sizes
    roles = dict(data.roles)
    roles["weight"] = "declustered_weight"
    roles["weight_mode"] = "direct"
    return make_dataset(columns, roles)


@dataclass(frozen=True)
class ConstraintEntry:
    """One population moment constraint.

    ``general-moment``: the weighted mean of ``target_column`` equals
    ``gamma``.  ``subgroup-moment``: the weighted mean of
    ``I{group_column == group_value} * (target_column - gamma)`` equals zero.
    """

    kind: str
    target_column: str
    gamma: float
    group_column: str | None = None
    group_value: float | None = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise DataError(f"constraint: unknown kind {self.kind!r}; expected one of {CONSTRAINT_KINDS}")
        if not np.isfinite(self.gamma):
            raise DataError(f"constraint on {self.target_column!r}: gamma must be finite")
        if self.kind == "subgroup-moment":
            if self.group_column is None or self.group_value is None:
                raise DataError(
                    f"constraint on {self.target_column!r}: subgroup-moment needs group_column and group_value"
                )

    @property
    def label(self) -> str:
        if self.kind == "subgroup-moment":
            return f"{self.group_column}={self.group_value:g}|{self.target_column}"
        return self.target_column


@dataclass(frozen=True)
class ConstraintSpec:
    """An ordered collection of population moment constraints."""

    entries: tuple[ConstraintEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def q(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ConstraintMatrix:
    """Materialized constraint residuals, one column per constraint."""

    H: np.ndarray
    labels: tuple[str, ...]
    vacuous: tuple[bool, ...]

    @property
    def q(self) -> int:
        return self.H.shape[1]


def build_constraint_matrix(data: Dataset, spec: ConstraintSpec) -> ConstraintMatrix:
    """Evaluate constraint residuals row by row.

    Column ``k`` holds ``target - gamma_k`` (general) or
    ``I{group == value} * (target - gamma_k)`` (subgroup).  Identically zero
    columns are flagged as vacuous and reported with a warning; they carry no
    information and would make the constraint system singular.
    """
    cols = []
    labels = []
    vacuous = []
    for entry in spec.entries:
        if entry.target_column not in data.columns:
            raise DataError(f"build_constraint_matrix: target column {entry.target_column!r} is not present")
        target = data.columns[entry.target_column]
        if not np.all(np.isfinite(target)):
            raise DataError(f"build_constraint_matrix: target column {entry.target_column!r} has non-finite values")
        resid = target - entry.gamma
        if entry.kind == "subgroup-moment":
            if entry.group_column not in data.columns:
                raise DataError(f"build_constraint_matrix: group column {entry.group_column!r} is not present")
            group = data.columns[entry.group_column]
            resid = np.where(group == entry.group_value, resid, 0.0)
        is_vacuous = bool(np.all(resid == 0.0))
        if is_vacuous:
            warnings.warn(f"constraint {entry.label!r} is identically zero (vacuous)", stacklevel=2)
        cols.append(resid)
        labels.append(entry.label)
        vacuous.append(is_vacuous)
    H = np.column_stack(cols) if cols else np.empty((data.n, 0))
    return ConstraintMatrix(H=H, labels=tuple(labels), vacuous=tuple(vacuous))
