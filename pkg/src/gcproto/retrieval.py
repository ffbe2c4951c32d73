"""Prototype-based ranking and evaluation: CMC, mAP, and diagnostics.

A query is matched against every prototype of every class by Euclidean
distance.  Rankings break distance ties by (class_id, prototype_index) so
results are reproducible byte-for-byte.  Average precision treats each
own-class prototype as a relevant item by default; a collapsed mode that
scores only the first own-class hit is available since multi-prototype
galleries admit both readings.

Final metric averaging is done with sequential scalar arithmetic in a
fixed order, so an independently coded brute-force implementation that
follows the same definitions produces bit-identical mAP and CMC values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyPrototypeSetError,
    UnknownClassError,
)
from .store import EmbeddingRecord, EmbeddingSet, PrototypeSet

DEFAULT_MAX_RANK = 25

PROTOCOLS = ("plain", "camera_filtered_regen")
AP_MODES = ("per_prototype", "per_identity")


def distance(p, q) -> float:
    """Euclidean distance between two equal-length vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatchError(
            f"distance between shapes {p.shape} and {q.shape}"
        )
    return float(np.linalg.norm(p - q))


@dataclass(frozen=True)
class Ranking:
    query_id: str
    entries: tuple[tuple[int, int, float], ...]  # (class_id, prototype_index, distance)
    tie_rule_applied: bool


def _order_by_distance(
    dists: np.ndarray, class_arr: np.ndarray, proto_arr: np.ndarray
) -> np.ndarray:
    # last lexsort key is primary: distance, then class, then prototype index
    return np.lexsort((proto_arr, class_arr, dists))


def rank_query(
    query: EmbeddingRecord,
    prototypes: PrototypeSet,
    protocol: str = "plain",
) -> Ranking:
    """Full ascending ranking of one query against every prototype.

    ``protocol`` is echoed validation only: under camera_filtered_regen the
    caller must already have supplied prototypes regenerated for this
    query's camera (the harness orchestrates that); the ranking math is
    identical either way.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r} (choose from {PROTOCOLS})")
    if prototypes.total_count() == 0:
        raise EmptyPrototypeSetError("cannot rank against an empty prototype set")
    mat, class_arr, proto_arr = prototypes.flattened()
    if mat.shape[1] != query.vector.shape[0]:
        raise DimensionMismatchError(
            f"query dimension {query.vector.shape[0]} vs prototypes {mat.shape[1]}"
        )
    dists = np.linalg.norm(mat - query.vector, axis=1)
    order = _order_by_distance(dists, class_arr, proto_arr)
    sorted_d = dists[order]
    tie = bool(np.any(sorted_d[1:] == sorted_d[:-1])) if len(sorted_d) > 1 else False
    entries = tuple(
        (int(class_arr[i]), int(proto_arr[i]), float(dists[i])) for i in order
    )
    return Ranking(query_id=query.id, entries=entries, tie_rule_applied=tie)


@dataclass
class EvalReport:
    cmc: list[float]  # rank-1 .. rank-K accuracy
    top1: float
    map: float
    per_group: dict[str, dict] = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)
    per_query_ap: list | None = None  # [query_id, ap] pairs in query order
    missing_class_query_ids: list[str] = field(default_factory=list)
    n_queries: int = 0


def _ap_from_relevance_ranks(ranks: Sequence[int], mode: str) -> float:
    """AP given the 1-based ranks of the relevant items, best first.

    Scalar accumulation in rank order keeps the value reproducible by any
    implementation that follows the same summation order.
    """
    if len(ranks) == 0:
        return 0.0
    if mode == "per_identity":
        return 1.0 / int(ranks[0])
    total = 0.0
    for i, r in enumerate(ranks, start=1):
        total += i / int(r)
    return total / len(ranks)


def _as_pset_groups(
    queries: EmbeddingSet,
    prototypes_per_query,
) -> list[tuple[PrototypeSet, list[int]]]:
    """Group query row indices by the identity of their prototype set."""
    if isinstance(prototypes_per_query, PrototypeSet):
        return [(prototypes_per_query, list(range(len(queries.records))))]
    groups: dict[int, tuple[PrototypeSet, list[int]]] = {}
    for qi, rec in enumerate(queries.records):
        try:
            pset = prototypes_per_query[rec.id]
        except KeyError:
            raise ConfigError(f"no prototype set supplied for query {rec.id!r}")
        key = id(pset)
        if key not in groups:
            groups[key] = (pset, [])
        groups[key][1].append(qi)
    return list(groups.values())


def evaluate(
    queries: EmbeddingSet,
    prototypes_per_query,
    max_rank: int = DEFAULT_MAX_RANK,
    ap_mode: str = "per_prototype",
    group_buckets: Sequence[str] | None = None,
    gallery_sizes: Mapping[int, int] | None = None,
    config_echo: Mapping | None = None,
    include_per_query_ap: bool = False,
) -> EvalReport:
    """Score queries against prototypes: CMC out to ``max_rank`` plus mAP.

    ``prototypes_per_query`` is either one shared PrototypeSet or a mapping
    from query id to the set eligible for that query (as produced by the
    camera-filter protocol).  Queries whose class has no prototype anywhere
    in their eligible set score AP 0 and are listed in the report rather
    than aborting the run.  ``group_buckets`` (with ``gallery_sizes``,
    class id -> gallery record count) adds a per-bucket mAP breakdown keyed
    on the query class's gallery size.
    """
    if max_rank < 1:
        raise ConfigError("max_rank must be positive")
    if ap_mode not in AP_MODES:
        raise ConfigError(f"unknown ap_mode {ap_mode!r} (choose from {AP_MODES})")
    n = len(queries.records)
    if n == 0:
        raise ConfigError("no queries to evaluate")
    ap_by_query = np.zeros(n)
    first_hit = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    missing: list[str] = []
    for pset, rows in _as_pset_groups(queries, prototypes_per_query):
        if pset.total_count() == 0:
            raise EmptyPrototypeSetError("cannot evaluate against an empty prototype set")
        mat, class_arr, proto_arr = pset.flattened()
        if mat.shape[1] != queries.dim:
            raise DimensionMismatchError(
                f"query dimension {queries.dim} vs prototypes {mat.shape[1]}"
            )
        qmat = queries.features[rows]
        dmat = cdist(qmat, mat)
        for local, qi in enumerate(rows):
            rec = queries.records[qi]
            order = _order_by_distance(dmat[local], class_arr, proto_arr)
            rel = class_arr[order] == rec.class_id
            ranks = np.nonzero(rel)[0] + 1
            if len(ranks) == 0:
                missing.append(rec.id)
                ap_by_query[qi] = 0.0
                continue
            ap_by_query[qi] = _ap_from_relevance_ranks(ranks, ap_mode)
            first_hit[qi] = int(ranks[0])
    # CMC: fraction of queries whose first own-class hit lands within rank k
    cmc = []
    for k in range(1, max_rank + 1):
        cmc.append(int(np.sum(first_hit <= k)) / n)
    map_total = 0.0
    for qi in range(n):
        map_total += float(ap_by_query[qi])
    mean_ap = map_total / n
    per_group: dict[str, dict] = {}
    if group_buckets is not None:
        if gallery_sizes is None:
            raise ConfigError("group_buckets requires gallery_sizes")
        bounds = parse_buckets(group_buckets)
        for label, (lo, hi) in zip(group_buckets, bounds):
            members = [
                qi
                for qi, rec in enumerate(queries.records)
                if lo <= gallery_sizes.get(rec.class_id, 0) <= hi
            ]
            if not members:
                per_group[label] = {"count": 0, "map": None}
                continue
            total = 0.0
            for qi in members:
                total += float(ap_by_query[qi])
            per_group[label] = {"count": len(members), "map": total / len(members)}
    report = EvalReport(
        cmc=cmc,
        top1=cmc[0],
        map=mean_ap,
        per_group=per_group,
        config_echo=dict(config_echo) if config_echo else {},
        per_query_ap=(
            [[queries.records[qi].id, float(ap_by_query[qi])] for qi in range(n)]
            if include_per_query_ap
            else None
        ),
        missing_class_query_ids=missing,
        n_queries=n,
    )
    return report


def parse_buckets(labels: Sequence[str]) -> list[tuple[int, float]]:
    """Parse bucket labels like "1-15" or "50+" into inclusive (lo, hi) ranges.

    The labels must jointly partition the positive integers: sorted by lower
    bound they must start at 1, abut exactly, and end open-ended.
    """
    if not labels:
        raise ConfigError("bucket list is empty")
    bounds: list[tuple[int, float]] = []
    for label in labels:
        text = label.strip()
        try:
            if text.endswith("+"):
                lo, hi = int(text[:-1]), np.inf
            else:
                lo_s, hi_s = text.split("-", 1)
                lo, hi = int(lo_s), int(hi_s)
        except ValueError:
            raise ConfigError(
                f"bad bucket {label!r}: expected 'lo-hi' or 'lo+'"
            ) from None
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad bucket {label!r}: bounds out of order")
        bounds.append((lo, hi))
    ordered = sorted(bounds)
    if ordered[0][0] != 1:
        raise ConfigError("buckets must start at 1")
    for (lo1, hi1), (lo2, _) in zip(ordered, ordered[1:]):
        if hi1 == np.inf or lo2 != hi1 + 1:
            raise ConfigError(
                f"buckets must abut exactly (gap or overlap near {lo2})"
            )
    if ordered[-1][1] != np.inf:
        raise ConfigError("last bucket must be open-ended (lo+)")
    return bounds


def coverage_violations(
    eset: EmbeddingSet, prototypes: PrototypeSet
) -> tuple[int, list[str]]:
    """Count gallery records with no own-class prototype strictly nearest.

    A record violates when its closest own-class prototype is not strictly
    nearer than every other class's closest prototype; exact ties count as
    violations.  Squared distances are compared (ordering-equivalent).
    """
    if prototypes.total_count() == 0:
        raise EmptyPrototypeSetError("no prototypes to check coverage against")
    mat, class_arr, _ = prototypes.flattened()
    if mat.shape[1] != eset.dim:
        raise DimensionMismatchError(
            f"set dimension {eset.dim} vs prototypes {mat.shape[1]}"
        )
    d2 = cdist(eset.features, mat, metric="sqeuclidean")
    violating: list[str] = []
    for i, rec in enumerate(eset.records):
        own = d2[i, class_arr == rec.class_id]
        other = d2[i, class_arr != rec.class_id]
        if len(own) == 0:
            violating.append(rec.id)
            continue
        if len(other) == 0:
            continue
        if not (own.min() < other.min()):
            violating.append(rec.id)
    return len(violating), violating


def prototype_displacement(
    prototypes: PrototypeSet, eset: EmbeddingSet
) -> dict[int, list[float]]:
    """Per class, distance of each prototype to the class centroid."""
    out: dict[int, list[float]] = {}
    for c in prototypes.class_ids:
        if c not in eset.class_index:
            raise UnknownClassError(f"prototype class {c} not present in the set")
        centroid = eset.class_matrix(c).mean(axis=0)
        out[c] = [
            float(np.linalg.norm(p - centroid)) for p in prototypes.per_class[c]
        ]
    return out


def report_to_json_dict(report: EvalReport) -> dict:
    return {
        "cmc": report.cmc,
        "top1": report.top1,
        "map": report.map,
        "per_group": report.per_group,
        "config_echo": report.config_echo,
        "per_query_ap": report.per_query_ap,
        "missing_class_query_ids": report.missing_class_query_ids,
        "n_queries": report.n_queries,
    }


def report_to_json(report: EvalReport) -> str:
    """Stable-key JSON; reloading reproduces every float bit-exactly."""
    return json.dumps(report_to_json_dict(report), sort_keys=True, indent=2)


def report_from_json(text: str) -> EvalReport:
    data = json.loads(text)
    return EvalReport(
        cmc=data["cmc"],
        top1=data["top1"],
        map=data["map"],
        per_group=data["per_group"],
        config_echo=data["config_echo"],
        per_query_ap=data["per_query_ap"],
        missing_class_query_ids=data["missing_class_query_ids"],
        n_queries=data["n_queries"],
    )


def report_to_csv(report: EvalReport) -> str:
    """One `cmc,k,value` row per rank plus one summary row with the mAP."""
    lines = ["metric,k,value"]
    for k, v in enumerate(report.cmc, start=1):
        lines.append(f"cmc,{k},{v!r}")
    lines.append(f"map,,{report.map!r}")
    return "\n".join(lines) + "\n"
