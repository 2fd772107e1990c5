"""
Clustered right-censored survival data: validation, CSV ingestion and design matrices.

A dataset holds one row per participant, stored cluster-contiguous in order of first
appearance. Cluster-level quantities (arm, size N_i, declared W columns) are derived
from the rows. Model terms are evaluated with patsy.
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
import patsy
import yaml

from .errors import (
    ArmVariesWithinCluster,
    ConfigError,
    CovariateVariesWithinCluster,
    MissingColumn,
    NegativeTime,
    NoEventsInArm,
    NonBinaryArm,
    NonBinaryEvent,
    NonNumericCovariate,
    SingleArmDataset,
    TooFewClusters,
    UnknownTerm,
)

logger = logging.getLogger(__name__)

CLUSTER_SIZE_TERM = "N"
CSV_FLOAT_FORMAT = "%.10g"
_BARE_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class DatasetSchema:
    """Column mapping for CSV ingestion."""

    cluster: str = "cluster_id"
    time: str = "time"
    event: str = "event"
    arm: str = "arm"
    covariates: tuple[str, ...] | None = None
    cluster_covariates: tuple[str, ...] = ()

    @property
    def required(self) -> list[str]:
        return [self.cluster, self.time, self.event, self.arm]


@dataclass(frozen=True)
class Subject:
    cluster_index: int
    time: float
    event: int
    covariates: dict[str, float]


@dataclass(frozen=True)
class Cluster:
    label: str
    arm: int
    covariates: dict[str, float]
    subjects: tuple[Subject, ...]

    @property
    def size(self) -> int:
        return len(self.subjects)


@dataclass(frozen=True, eq=False)
class ArmSubset:
    arm: int
    mask: np.ndarray
    time: np.ndarray
    event: np.ndarray
    cluster_index: np.ndarray

    @property
    def n_subjects(self) -> int:
        return len(self.time)

    @property
    def n_clusters(self) -> int:
        return len(np.unique(self.cluster_index))

    def role_indicator(self, role: str) -> np.ndarray:
        """Event indicator of the fitted role: Δ for outcome, 1 − Δ for censoring."""
        return self.event if role == "outcome" else 1 - self.event


@dataclass(frozen=True)
class ModelFormula:
    """
    Ordered right-hand side of an outcome or censoring model.

    Terms are column names, ``N`` (cluster size), arithmetic such as ``N/50`` or ``Z1*Z2``
    (a plain product), ``log(N)`` and cluster means ``mean(Z1)``.
    """

    terms: tuple[str, ...] = ()
    role: str = "outcome"

    def __post_init__(self):
        if self.role not in ("outcome", "censoring"):
            raise ConfigError(f"Formula role must be 'outcome' or 'censoring', got '{self.role}'")
        object.__setattr__(self, "terms", tuple(t.replace(" ", "") for t in self.terms if t.strip()))

    @classmethod
    def parse(cls, rhs: str, role: str = "outcome") -> "ModelFormula":
        """Build from a '+'-separated right-hand side, e.g. 'W1 + W2 + Z1*Z2 + N/50'."""
        rhs = rhs.split("~", 1)[-1]
        if rhs.strip() in ("", "1", "0"):
            return cls((), role)
        return cls(tuple(part.strip() for part in rhs.split("+")), role)

    def with_role(self, role: str) -> "ModelFormula":
        return ModelFormula(self.terms, role)

    def without(self, *terms: str) -> "ModelFormula":
        """Drop terms (used to build the mis-specified working models)."""
        dropped = {t.replace(" ", "") for t in terms}
        return ModelFormula(tuple(t for t in self.terms if t not in dropped), self.role)

    def patsy_terms(self) -> list[str]:
        return [t if _BARE_NAME.match(t) else f"I({t})" for t in self.terms]

    def __str__(self) -> str:
        return " + ".join(self.terms) if self.terms else "1"


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """
    Participants of a cluster-randomized trial, stored cluster-contiguous.

    ``arm`` is per cluster; every other array is per participant. Construction validates
    the invariants the estimators rely on (M >= 2, both arms, an event in each arm).
    """

    cluster_labels: tuple[str, ...]
    arm: np.ndarray
    cluster_index: np.ndarray
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    cluster_covariate_names: tuple[str, ...] = ()
    cluster_sizes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arm = np.array(self.arm, dtype=int)
        cluster_index = np.array(self.cluster_index, dtype=int)
        time = np.array(self.time, dtype=float)
        event = np.array(self.event, dtype=int)
        covariates = np.array(self.covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates.reshape(len(time), -1) if covariates.size else np.zeros((len(time), 0))
        n_clusters = len(self.cluster_labels)
        if n_clusters < 2:
            raise TooFewClusters(f"At least 2 clusters are required, found {n_clusters}")
        if np.any(np.diff(cluster_index) < 0):
            raise ConfigError("Participants must be stored cluster-contiguous")
        sizes = np.bincount(cluster_index, minlength=n_clusters)
        if len(sizes) != n_clusters or np.any(sizes == 0):
            raise ConfigError("Every cluster must own at least one participant")
        if np.any(time < 0):
            raise NegativeTime(f"Observed times must be >= 0, found min {time.min():g}")
        if not np.isin(event, (0, 1)).all():
            raise NonBinaryEvent("Event indicator must be 0/1")
        if not np.isin(arm, (0, 1)).all():
            raise NonBinaryArm("Arm must be 0/1")
        if len(np.unique(arm)) < 2:
            raise SingleArmDataset(f"Both arms must be present, found only arm {arm[0]}")
        subject_arm = arm[cluster_index]
        for a in (0, 1):
            if event[subject_arm == a].sum() == 0:
                raise NoEventsInArm(f"Arm {a} has no observed events")
        for name, value in (
            ("arm", arm),
            ("cluster_index", cluster_index),
            ("time", time),
            ("event", event),
            ("covariates", covariates),
            ("cluster_sizes", sizes),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: DatasetSchema = DatasetSchema()) -> "SurvivalDataset":
        """Validate a participant-level frame and build the dataset."""
        missing = [c for c in schema.required if c not in frame.columns]
        if missing:
            raise MissingColumn(f"Missing required columns: {missing}")
        if schema.covariates is None:
            covariate_names = [c for c in frame.columns if c not in schema.required]
        else:
            covariate_names = list(schema.covariates) + [c for c in schema.cluster_covariates if c not in schema.covariates]
        missing = [c for c in list(covariate_names) + list(schema.cluster_covariates) if c not in frame.columns]
        if missing:
            raise MissingColumn(f"Missing covariate columns: {missing}")
        if CLUSTER_SIZE_TERM in covariate_names:
            raise ConfigError(f"Column name '{CLUSTER_SIZE_TERM}' is reserved for cluster size")
        for col in [schema.time, schema.event, schema.arm] + covariate_names:
            if not pd.api.types.is_numeric_dtype(frame[col]):
                raise NonNumericCovariate(f"Column '{col}' must be numeric")
            if frame[col].isna().any():
                raise NonNumericCovariate(f"Column '{col}' has missing values")
        if (frame[schema.time] < 0).any():
            raise NegativeTime(f"Column '{schema.time}' has negative values")
        if not frame[schema.event].isin([0, 1]).all():
            raise NonBinaryEvent(f"Column '{schema.event}' must be 0/1")
        if not frame[schema.arm].isin([0, 1]).all():
            raise NonBinaryArm(f"Column '{schema.arm}' must be 0/1")

        labels = frame[schema.cluster].astype(str)
        order = pd.unique(labels)
        codes = pd.Categorical(labels, categories=order).codes
        arms_per_cluster = frame.groupby(codes, sort=True)[schema.arm].nunique()
        varying = arms_per_cluster[arms_per_cluster > 1]
        if not varying.empty:
            raise ArmVariesWithinCluster(
                f"Arm varies within cluster(s): {[order[i] for i in varying.index[:5]]}"
            )
        for col in schema.cluster_covariates:
            spread = frame.groupby(codes, sort=True)[col].nunique()
            if (spread > 1).any():
                raise CovariateVariesWithinCluster(f"Cluster covariate '{col}' varies within a cluster")

        # stable sort keeps participant order within each cluster
        perm = np.argsort(codes, kind="mergesort")
        codes_sorted = codes[perm]
        arm_values = frame[schema.arm].to_numpy()[perm]
        first_rows = np.searchsorted(codes_sorted, np.arange(len(order)))
        dataset = cls(
            cluster_labels=tuple(order),
            arm=arm_values[first_rows],
            cluster_index=codes_sorted,
            time=frame[schema.time].to_numpy(dtype=float)[perm],
            event=frame[schema.event].to_numpy(dtype=int)[perm],
            covariates=frame[covariate_names].to_numpy(dtype=float)[perm] if covariate_names else np.zeros((len(frame), 0)),
            covariate_names=tuple(covariate_names),
            cluster_covariate_names=tuple(schema.cluster_covariates),
        )
        logger.debug("Built dataset with M=%d, N=%d", dataset.n_clusters, dataset.n_subjects)
        return dataset

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def n_subjects(self) -> int:
        return len(self.time)

    @property
    def subject_arm(self) -> np.ndarray:
        return self.arm[self.cluster_index]

    @property
    def subject_cluster_size(self) -> np.ndarray:
        return self.cluster_sizes[self.cluster_index]

    @property
    def cluster_starts(self) -> np.ndarray:
        """Row offset of each cluster's first participant (for np.add.reduceat)."""
        return np.concatenate(([0], np.cumsum(self.cluster_sizes)[:-1]))

    @property
    def cluster_slices(self) -> list[slice]:
        return [slice(int(s), int(s + n)) for s, n in zip(self.cluster_starts, self.cluster_sizes)]

    def arm_mask(self, arm: int) -> np.ndarray:
        return self.subject_arm == arm

    def subset_arm(self, arm: int) -> "ArmSubset":
        """Participants of one arm; single-arm, so not itself a SurvivalDataset."""
        mask = self.arm_mask(arm)
        return ArmSubset(
            arm=arm,
            mask=mask,
            time=self.time[mask],
            event=self.event[mask],
            cluster_index=self.cluster_index[mask],
        )

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise UnknownTerm(f"Unknown column '{name}'") from None

    @property
    def clusters(self) -> Iterator[Cluster]:
        """Iterate clusters with their participants (convenience view; not used in hot paths)."""
        w_idx = [self.covariate_names.index(c) for c in self.cluster_covariate_names]
        z_names = [c for c in self.covariate_names if c not in self.cluster_covariate_names]
        z_idx = [self.covariate_names.index(c) for c in z_names]
        for i, start in enumerate(self.cluster_starts):
            rows = range(start, start + self.cluster_sizes[i])
            subjects = tuple(
                Subject(i, float(self.time[r]), int(self.event[r]),
                        {name: float(self.covariates[r, k]) for name, k in zip(z_names, z_idx)})
                for r in rows
            )
            w = {self.covariate_names[k]: float(self.covariates[start, k]) for k in w_idx}
            yield Cluster(self.cluster_labels[i], int(self.arm[i]), w, subjects)

    def to_frame(self) -> pd.DataFrame:
        """Participant-level frame with the canonical column order."""
        frame = pd.DataFrame(
            {
                "cluster_id": np.asarray(self.cluster_labels, dtype=object)[self.cluster_index],
                "time": self.time,
                "event": self.event,
                "arm": self.subject_arm,
            }
        )
        for k, name in enumerate(self.covariate_names):
            frame[name] = self.covariates[:, k]
        return frame

    def design_frame(self) -> pd.DataFrame:
        """V_ij = {N_i, W_i, Z_ij} assembled per participant."""
        frame = pd.DataFrame(self.covariates, columns=list(self.covariate_names))
        frame.insert(0, CLUSTER_SIZE_TERM, self.subject_cluster_size.astype(float))
        return frame

    def select_clusters(self, keep: np.ndarray) -> "SurvivalDataset":
        """New dataset restricted to the clusters flagged in ``keep`` (validated)."""
        keep = np.asarray(keep, dtype=bool)
        rows = keep[self.cluster_index]
        remap = np.cumsum(keep) - 1
        return SurvivalDataset(
            cluster_labels=tuple(lab for lab, k in zip(self.cluster_labels, keep) if k),
            arm=self.arm[keep],
            cluster_index=remap[self.cluster_index[rows]],
            time=self.time[rows],
            event=self.event[rows],
            covariates=self.covariates[rows],
            covariate_names=self.covariate_names,
            cluster_covariate_names=self.cluster_covariate_names,
        )

    def drop_cluster(self, g: int) -> "SurvivalDataset":
        keep = np.ones(self.n_clusters, dtype=bool)
        keep[g] = False
        return self.select_clusters(keep)

    def describe(self) -> dict[str, object]:
        """Small summary used by the CLI header and the simulation probes."""
        return {
            "M": self.n_clusters,
            "N": self.n_subjects,
            "clusters_per_arm": {a: int((self.arm == a).sum()) for a in (1, 0)},
            "censoring_rate": float(1.0 - self.event.mean()),
            "mean_cluster_size": float(self.cluster_sizes.mean()),
        }


def schema_path(path: Path | str) -> Path:
    """Sidecar written next to a saved CSV: ``trial.csv`` -> ``trial.schema.yaml``."""
    return Path(path).with_suffix(".schema.yaml")


def load_schema(path: Path | str) -> DatasetSchema:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    unknown = sorted(set(raw) - set(DatasetSchema.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"Unknown schema keys in {path}: {unknown}")
    for key in ("covariates", "cluster_covariates"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    return DatasetSchema(**raw)


def load_csv(path: Path | str, schema: DatasetSchema | None = None) -> SurvivalDataset:
    """
    Read a participant-level CSV into a validated dataset.

    Without an explicit schema, the sidecar written by ``save_csv`` is used when present,
    otherwise the default column names with no cluster covariates.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing input file: {path}")
    if schema is None:
        sidecar = schema_path(path)
        schema = load_schema(sidecar) if sidecar.exists() else DatasetSchema()
    frame = pd.read_csv(path, dtype={schema.cluster: str})
    if frame.empty:
        raise ValueError(f"No rows found in {path}")
    return SurvivalDataset.from_frame(frame, schema)


def save_csv(dataset: SurvivalDataset, path: Path | str) -> Path:
    """Write the dataset with the canonical header plus its schema sidecar; load_csv(save_csv(d)) reproduces d."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    schema = {
        "covariates": list(dataset.covariate_names),
        "cluster_covariates": list(dataset.cluster_covariate_names),
    }
    schema_path(path).write_text(yaml.safe_dump(schema, sort_keys=False), encoding="utf-8")
    return path


def cluster_mean(values: np.ndarray, cluster_index: np.ndarray) -> np.ndarray:
    """Per-participant mean of ``values`` over the participant's cluster."""
    values = np.asarray(values, dtype=float)
    sums = np.bincount(cluster_index, weights=values)
    counts = np.bincount(cluster_index)
    return (sums / counts)[cluster_index]


def build_design(dataset: SurvivalDataset, formula: ModelFormula) -> np.ndarray:
    """Evaluate the formula terms per participant, in declared order."""
    if not formula.terms:
        return np.zeros((dataset.n_subjects, 0))
    data = {name: dataset.covariates[:, k] for k, name in enumerate(dataset.covariate_names)}
    data[CLUSTER_SIZE_TERM] = dataset.subject_cluster_size.astype(float)
    env = patsy.EvalEnvironment(
        [
            {
                "mean": lambda x: cluster_mean(x, dataset.cluster_index),
                "log": np.log,
                "exp": np.exp,
                "sqrt": np.sqrt,
            }
        ]
    )
    rhs = "0 + " + " + ".join(formula.patsy_terms())
    try:
        matrix = patsy.dmatrix(rhs, data, eval_env=env, NA_action="raise", return_type="matrix")
    except patsy.PatsyError as exc:
        raise UnknownTerm(f"Cannot evaluate formula '{formula}': {exc}") from exc
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape[1] != len(formula.terms):
        raise UnknownTerm(
            f"Formula '{formula}' expanded to {matrix.shape[1]} columns; expected one per term"
        )
    return matrix


def design_for_arm(dataset: SurvivalDataset, formula: ModelFormula, arm: int) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix and row mask restricted to the participants of one arm."""
    mask = dataset.arm_mask(arm)
    return build_design(dataset, formula)[mask], mask


def formulas_equal(a: Sequence[str], b: Sequence[str]) -> bool:
    return [t.replace(" ", "") for t in a] == [t.replace(" ", "") for t in b]


def aggregate_by_level(values: np.ndarray, cluster_sizes: np.ndarray, level: str) -> np.ndarray:
    """
    Average cluster-contiguous per-participant rows.

    ``cluster``: mean over clusters of within-cluster means. ``individual``: pooled mean.
    """
    values = np.asarray(values, dtype=float)
    cluster_sizes = np.asarray(cluster_sizes, dtype=int)
    if level == "individual":
        return values.mean(axis=0)
    if level != "cluster":
        raise ConfigError(f"Level must be 'cluster' or 'individual', got '{level}'")
    starts = np.concatenate(([0], np.cumsum(cluster_sizes)[:-1]))
    sums = np.add.reduceat(values, starts, axis=0)
    shape = (-1,) + (1,) * (values.ndim - 1)
    return (sums / cluster_sizes.reshape(shape)).mean(axis=0)
