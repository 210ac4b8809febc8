"""Survival datasets, outcome design selection and the dataset CSV format."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised when survival records violate a dataset invariant."""


@dataclass(frozen=True)
class SurvivalRecord:
    id: int
    time: float
    event: int
    exposure: float
    z: tuple[float, ...] = ()
    v: tuple[float, ...] = ()
    true_cluster: int | None = None


@dataclass(frozen=True)
class DesignSelector:
    """Which column groups enter the outcome design, in the fixed order (A, z..., v..., U dummies)."""

    include_exposure: bool = True
    include_z: bool = True
    include_v: bool = True
    include_true_cluster: bool = False


#: (A, z, v): the outcome design used by the proposed estimator.
FULL_DESIGN = DesignSelector()
#: (A, v): exposure plus measured confounders.
NAIVE_DESIGN = DesignSelector(include_z=False)
#: (A, v, U dummies); reserved for the infeasible baseline.
INFEASIBLE_DESIGN = DesignSelector(include_z=False, include_true_cluster=True)


@dataclass(frozen=True)
class OutcomeCoefficients:
    beta_a: float
    beta_x: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        bx = np.asarray(self.beta_x, dtype=float).reshape(-1)
        object.__setattr__(self, "beta_x", bx)
        if not (np.isfinite(self.beta_a) and np.all(np.isfinite(bx))):
            raise ValueError("outcome coefficients must be finite")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[float(self.beta_a)], self.beta_x])

    @classmethod
    def from_vector(cls, beta: Sequence[float]) -> "OutcomeCoefficients":
        b = np.asarray(beta, dtype=float).reshape(-1)
        return cls(float(b[0]), b[1:].copy())


def as_beta_vector(beta: OutcomeCoefficients | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(beta, OutcomeCoefficients):
        return beta.vector
    return np.atleast_1d(np.asarray(beta, dtype=float))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of survival records; row index is the subject index."""

    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray
    exposure: np.ndarray
    z: np.ndarray
    v: np.ndarray
    true_cluster: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("ids", "time", "event", "exposure", "z", "v", "true_cluster"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _readonly(val))

    @property
    def n(self) -> int:
        return int(self.time.shape[0])

    @property
    def dim_z(self) -> int:
        return int(self.z.shape[1])

    @property
    def dim_v(self) -> int:
        return int(self.v.shape[1])

    @property
    def records(self) -> list[SurvivalRecord]:
        tc = self.true_cluster
        return [
            SurvivalRecord(
                id=int(self.ids[i]),
                time=float(self.time[i]),
                event=int(self.event[i]),
                exposure=float(self.exposure[i]),
                z=tuple(float(x) for x in self.z[i]),
                v=tuple(float(x) for x in self.v[i]),
                true_cluster=None if tc is None else int(tc[i]),
            )
            for i in range(self.n)
        ]

    def design(self, sel: DesignSelector = FULL_DESIGN) -> np.ndarray:
        """Outcome design matrix with columns ordered (A, z..., v..., I{U=1}, I{U=2}, ...)."""
        cols = []
        if sel.include_exposure:
            cols.append(self.exposure[:, None])
        if sel.include_z:
            cols.append(self.z)
        if sel.include_v:
            cols.append(self.v)
        if sel.include_true_cluster:
            if self.true_cluster is None:
                raise DatasetError("dataset carries no true_cluster column")
            levels = np.unique(self.true_cluster)
            # reference level is the smallest label
            for lev in levels[1:]:
                cols.append((self.true_cluster == lev).astype(float)[:, None])
        if not cols:
            return np.zeros((self.n, 0))
        return np.hstack(cols).astype(float)

    def column_names(self, sel: DesignSelector = FULL_DESIGN) -> list[str]:
        names = []
        if sel.include_exposure:
            names.append("exposure")
        if sel.include_z:
            names += [f"z{j + 1}" for j in range(self.dim_z)]
        if sel.include_v:
            names += [f"v{j + 1}" for j in range(self.dim_v)]
        if sel.include_true_cluster and self.true_cluster is not None:
            names += [f"U{lev}" for lev in np.unique(self.true_cluster)[1:]]
        return names

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.ids, self.time, self.event, self.exposure, self.z, self.v):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def from_arrays(
        cls,
        time,
        event,
        exposure,
        z=None,
        v=None,
        true_cluster=None,
        ids=None,
    ) -> "Dataset":
        time = np.asarray(time, dtype=float).reshape(-1)
        n = time.shape[0]
        z = np.zeros((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
        v = np.zeros((n, 0)) if v is None else np.asarray(v, dtype=float).reshape(n, -1)
        ids = np.arange(1, n + 1) if ids is None else np.asarray(ids)
        tc = None if true_cluster is None else np.asarray(true_cluster)
        ev = np.asarray(event, dtype=float).reshape(-1)
        exposure = np.asarray(exposure, dtype=float).reshape(-1)
        recs = [
            SurvivalRecord(
                id=int(ids[i]),
                time=float(time[i]),
                event=int(ev[i]) if ev[i] in (0.0, 1.0) else float(ev[i]),
                exposure=float(exposure[i]),
                z=tuple(z[i]),
                v=tuple(v[i]),
                true_cluster=None if tc is None else int(tc[i]),
            )
            for i in range(n)
        ]
        return validate_dataset(recs)


def validate_dataset(raw: Iterable[SurvivalRecord]) -> Dataset:
    """Check invariants on a list of records and pack them into a :class:`Dataset`.

    Records keep their input order. Raises :class:`DatasetError` on an empty
    list, fewer than two records, duplicate ids, nonpositive time, an event flag
    outside {0, 1}, inconsistent covariate dimensions, or all-censored data.
    """
    recs = list(raw)
    if not recs:
        raise DatasetError("empty record list")
    dim_z, dim_v = len(recs[0].z), len(recs[0].v)
    has_tc = recs[0].true_cluster is not None
    for r in recs:
        if len(r.z) != dim_z or len(r.v) != dim_v:
            raise DatasetError(f"dimension mismatch at id {r.id}")
        if (r.true_cluster is not None) != has_tc:
            raise DatasetError(f"true_cluster present on some records only (id {r.id})")
        if has_tc and (int(r.true_cluster) != r.true_cluster or r.true_cluster < 0):
            raise DatasetError(f"true_cluster must be a nonnegative integer (id {r.id})")
        if not np.isfinite(r.time) or r.time <= 0:
            raise DatasetError(f"nonpositive time at id {r.id}")
        if r.event not in (0, 1):
            raise DatasetError(f"event flag outside {{0,1}} at id {r.id}")
        if not np.isfinite(r.exposure) or not np.all(np.isfinite(r.z)) or not np.all(np.isfinite(r.v)):
            raise DatasetError(f"non-finite covariate at id {r.id}")
    if len(recs) < 2:
        raise DatasetError("a dataset needs at least two records")
    ids = [r.id for r in recs]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate ids")
    if not any(r.event == 1 for r in recs):
        raise DatasetError("all-censored data: no events")
    n = len(recs)
    return Dataset(
        ids=np.array(ids, dtype=np.int64),
        time=np.array([r.time for r in recs], dtype=float),
        event=np.array([r.event for r in recs], dtype=np.int64),
        exposure=np.array([r.exposure for r in recs], dtype=float),
        z=np.array([r.z for r in recs], dtype=float).reshape(n, dim_z),
        v=np.array([r.v for r in recs], dtype=float).reshape(n, dim_v),
        true_cluster=np.array([r.true_cluster for r in recs], dtype=np.int64) if has_tc else None,
    )


# ---------------------------------------------------------------------------
# CSV: id,time,event,exposure,z1..zP,v1..vQ[,true_cluster]


def write_dataset_csv(ds: Dataset, path: str | Path) -> None:
    header = ["id", "time", "event", "exposure"]
    header += [f"z{j + 1}" for j in range(ds.dim_z)]
    header += [f"v{j + 1}" for j in range(ds.dim_v)]
    if ds.true_cluster is not None:
        header.append("true_cluster")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [int(ds.ids[i]), repr(float(ds.time[i])), int(ds.event[i]), repr(float(ds.exposure[i]))]
            row += [repr(float(x)) for x in ds.z[i]]
            row += [repr(float(x)) for x in ds.v[i]]
            if ds.true_cluster is not None:
                row.append(int(ds.true_cluster[i]))
            w.writerow(row)


def read_dataset_csv(path: str | Path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:4] != ["id", "time", "event", "exposure"]:
            raise DatasetError(f"{path}: header must start with id,time,event,exposure")
        zcols = [j for j, h in enumerate(header) if h.startswith("z") and h[1:].isdigit()]
        vcols = [j for j, h in enumerate(header) if h.startswith("v") and h[1:].isdigit()]
        tc_col = header.index("true_cluster") if "true_cluster" in header else None
        known = {0, 1, 2, 3, *zcols, *vcols} | ({tc_col} if tc_col is not None else set())
        extra = [header[j] for j in range(len(header)) if j not in known]
        if extra:
            raise DatasetError(f"{path}: unknown columns {extra}")
        recs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ev = float(row[2])
                recs.append(
                    SurvivalRecord(
                        id=int(row[0]),
                        time=float(row[1]),
                        event=int(ev) if ev in (0.0, 1.0) else ev,
                        exposure=float(row[3]),
                        z=tuple(float(row[j]) for j in zcols),
                        v=tuple(float(row[j]) for j in vcols),
                        true_cluster=None if tc_col is None else int(row[tc_col]),
                    )
                )
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return validate_dataset(recs)
