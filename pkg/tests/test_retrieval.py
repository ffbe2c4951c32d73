"""Ranking and evaluation against a plain-Python brute-force oracle.

The oracle below re-derives CMC and mAP from the metric definitions using
lists, math.dist, and sequential scalar sums; `evaluate` must agree with it
bit-for-bit on random instances.
"""

import json
import math

import numpy as np
import pytest

from gcproto.errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyPrototypeSetError,
    UnknownClassError,
)
from gcproto.retrieval import (
    coverage_violations,
    distance,
    evaluate,
    parse_buckets,
    prototype_displacement,
    rank_query,
    report_from_json,
    report_to_csv,
    report_to_json,
)
from gcproto.store import EmbeddingSet, PrototypeSet, build_set


# -- oracle --------------------------------------------------------------


def oracle_rank(qvec, pset: PrototypeSet):
    """(distance, class, proto_idx) triples in ascending order."""
    flat = []
    for c in sorted(pset.per_class):
        for j, p in enumerate(pset.per_class[c]):
            flat.append((math.dist([float(v) for v in qvec], [float(v) for v in p]), c, j))
    flat.sort()
    return flat

def oracle_evaluate(queries: EmbeddingSet, psets, max_rank: int, ap_mode="per_prototype"):
    """Brute-force CMC/mAP; psets is one PrototypeSet or a per-query-id dict."""
    aps, first_hits = [], []
    for rec in queries.records:
        pset = psets if isinstance(psets, PrototypeSet) else psets[rec.id]
        flat = oracle_rank(rec.vector, pset)
        ranks = [i + 1 for i, (_, c, _) in enumerate(flat) if c == rec.class_id]
        if not ranks:
            aps.append(0.0)
            first_hits.append(None)
            continue
        first_hits.append(ranks[0])
        if ap_mode == "per_identity":
            aps.append(1.0 / ranks[0])
        else:
            total = 0.0
            for i, r in enumerate(ranks, start=1):
                total += i / r
            aps.append(total / len(ranks))
    n = len(aps)
    cmc = [sum(1 for f in first_hits if f is not None and f <= k) / n for k in range(1, max_rank + 1)]
    total = 0.0
    for ap in aps:
        total += ap
    return cmc, total / n, aps


def random_instance(rng):
    """Random gallery/query/prototype triple, with deliberate edge cases:
    duplicated prototypes (exercise the tie rule) and missing classes."""
    n_classes = int(rng.integers(2, 7))
    dim = int(rng.integers(2, 6))
    vecs, cls = [], []
    for c in range(n_classes):
        k = int(rng.integers(2, 8))
        vecs.append(rng.normal(c * 2.0, 1.5, size=(k, dim)))
        cls += [c] * k
    gallery = build_set(np.vstack(vecs), cls, [0] * len(cls))

    per_class = {}
    for c in range(n_classes):
        if n_classes > 2 and c == 0 and rng.random() < 0.3:
            continue  # class with no prototypes anywhere
        pts = gallery.class_matrix(c)
        m = int(rng.integers(1, min(4, pts.shape[0]) + 1))
        rows = pts[rng.choice(pts.shape[0], size=m, replace=False)]
        if rng.random() < 0.4:
            rows = np.vstack([rows, rows[0]])  # exact duplicate prototype
        per_class[c] = rows
    pset = PrototypeSet(per_class, "instance")

    nq = int(rng.integers(2, 9))
    qvecs = rng.normal(0, 2.0, size=(nq, dim)) + rng.integers(0, n_classes, nq)[:, None]
    queries = build_set(qvecs, rng.integers(0, n_classes, nq), [0] * nq, id_prefix="q")
    return gallery, queries, pset


# -- distance and ranking ------------------------------------------------


class TestDistance:
    def test_pythagorean(self):
        assert distance([0.0, 0.0], [3.0, 4.0]) == 5.0

    def test_zero(self):
        assert distance([1.5, -2.0], [1.5, -2.0]) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            distance([1.0], [1.0, 2.0])


class TestRankQuery:
    def qrec(self, vec):
        return build_set(np.array([vec]), [0], [0], id_prefix="q").records[0]

    def test_orders_by_distance(self):
        pset = PrototypeSet(
            {0: np.array([[0.0, 0.0]]), 1: np.array([[3.0, 0.0], [1.0, 0.0]])},
            "instance",
        )
        r = rank_query(self.qrec([0.9, 0.0]), pset)
        assert [(c, j) for c, j, _ in r.entries] == [(1, 1), (0, 0), (1, 0)]
        assert r.entries[0][2] == pytest.approx(0.1)
        assert not r.tie_rule_applied

    def test_tie_breaks_by_class_then_index(self):
        pset = PrototypeSet(
            {0: np.array([[-1.0, 0.0]]), 1: np.array([[1.0, 0.0], [1.0, 0.0]])},
            "instance",
        )
        r = rank_query(self.qrec([0.0, 0.0]), pset)
        assert [(c, j) for c, j, _ in r.entries] == [(0, 0), (1, 0), (1, 1)]
        assert r.tie_rule_applied

    def test_matches_oracle_order(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            _, queries, pset = random_instance(rng)
            for rec in queries.records:
                got = [(c, j) for c, j, _ in rank_query(rec, pset).entries]
                want = [(c, j) for _, c, j in oracle_rank(rec.vector, pset)]
                assert got == want

    def test_unknown_protocol(self):
        pset = PrototypeSet({0: np.zeros((1, 2))}, "centroid")
        with pytest.raises(ConfigError):
            rank_query(self.qrec([0.0, 0.0]), pset, protocol="sideways")

    def test_empty_prototypes(self):
        pset = PrototypeSet({0: np.zeros((0, 2))}, "centroid")
        with pytest.raises(EmptyPrototypeSetError):
            rank_query(self.qrec([0.0, 0.0]), pset)

    def test_dim_mismatch(self):
        pset = PrototypeSet({0: np.zeros((1, 3))}, "centroid")
        with pytest.raises(DimensionMismatchError):
            rank_query(self.qrec([0.0, 0.0]), pset)


# -- evaluation ----------------------------------------------------------


class TestEvaluate:
    def line_setup(self):
        """1-D: query at 0, own-class prototypes at 1 and 3, rival at 2."""
        queries = build_set(np.array([[0.0]]), [0], [0], id_prefix="q")
        pset = PrototypeSet(
            {0: np.array([[1.0], [3.0]]), 1: np.array([[2.0]])}, "instance"
        )
        return queries, pset

    def test_ap_hand_value(self):
        queries, pset = self.line_setup()
        rep = evaluate(queries, pset, max_rank=3)
        # relevant at ranks 1 and 3: AP = (1/1 + 2/3) / 2
        assert rep.map == (1.0 + 2.0 / 3.0) / 2.0
        assert rep.cmc == [1.0, 1.0, 1.0]
        assert rep.top1 == 1.0

    def test_per_identity_mode(self):
        queries, pset = self.line_setup()
        rep = evaluate(queries, pset, max_rank=3, ap_mode="per_identity")
        assert rep.map == 1.0

    def test_cmc_counts_first_hit(self):
        queries = build_set(np.array([[0.0], [2.1]]), [0, 0], [0, 0], id_prefix="q")
        pset = PrototypeSet(
            {0: np.array([[1.0]]), 1: np.array([[2.0]])}, "instance"
        )
        rep = evaluate(queries, pset, max_rank=3)
        # q0 hits own class at rank 1; q1 is nearer the rival, rank 2
        assert rep.cmc == [0.5, 1.0, 1.0]
        assert rep.top1 == 0.5

    def test_cmc_monotone_and_bounded(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            _, queries, pset = random_instance(rng)
            rep = evaluate(queries, pset, max_rank=12)
            assert all(a <= b for a, b in zip(rep.cmc, rep.cmc[1:]))
            assert all(0.0 <= v <= 1.0 for v in rep.cmc)

    def test_missing_class_scores_zero_and_is_flagged(self):
        queries = build_set(np.array([[0.0], [5.0]]), [0, 9], [0, 0], id_prefix="q")
        pset = PrototypeSet({0: np.array([[1.0]])}, "centroid")
        rep = evaluate(queries, pset, max_rank=2, include_per_query_ap=True)
        assert rep.missing_class_query_ids == ["q1"]
        assert rep.per_query_ap == [["q0", 1.0], ["q1", 0.0]]
        assert rep.map == 0.5

    def test_matches_oracle_exactly(self):
        rng = np.random.default_rng(29)
        for _ in range(40):
            _, queries, pset = random_instance(rng)
            mode = "per_identity" if rng.random() < 0.3 else "per_prototype"
            rep = evaluate(queries, pset, max_rank=10, ap_mode=mode)
            cmc, mean_ap, _ = oracle_evaluate(queries, pset, 10, mode)
            assert rep.cmc == cmc
            assert rep.map == mean_ap

    def test_per_query_mapping_matches_oracle(self):
        rng = np.random.default_rng(31)
        _, queries, pset_a = random_instance(rng)
        pset_b = pset_a.replace_class(
            pset_a.class_ids[0], pset_a.per_class[pset_a.class_ids[0]] + 0.5
        )
        mapping = {
            rec.id: (pset_a if i % 2 == 0 else pset_b)
            for i, rec in enumerate(queries.records)
        }
        rep = evaluate(queries, mapping, max_rank=6)
        cmc, mean_ap, _ = oracle_evaluate(queries, mapping, 6)
        assert rep.cmc == cmc
        assert rep.map == mean_ap

    def test_mapping_missing_query_id(self):
        _, queries, pset = random_instance(np.random.default_rng(37))
        mapping = {rec.id: pset for rec in queries.records[:-1]}
        with pytest.raises(ConfigError):
            evaluate(queries, mapping)

    def test_zero_coverage_violations_means_perfect_top1_on_gallery(self):
        rng = np.random.default_rng(41)
        centers = np.array([[0.0, 0.0], [30.0, 0.0], [0.0, 30.0]])
        vecs, cls = [], []
        for c, ctr in enumerate(centers):
            vecs.append(ctr + rng.normal(0, 0.5, size=(6, 2)))
            cls += [c] * 6
        gallery = build_set(np.vstack(vecs), cls, [0] * 18)
        pset = PrototypeSet(
            {c: gallery.class_matrix(c).mean(axis=0, keepdims=True) for c in range(3)},
            "centroid",
        )
        count, _ = coverage_violations(gallery, pset)
        assert count == 0
        self_queries = build_set(gallery.features, cls, [0] * 18, id_prefix="q")
        assert evaluate(self_queries, pset, max_rank=1).top1 == 1.0

    def test_validation_errors(self):
        queries, pset = self.line_setup()
        with pytest.raises(ConfigError):
            evaluate(queries, pset, max_rank=0)
        with pytest.raises(ConfigError):
            evaluate(queries, pset, ap_mode="sideways")
        with pytest.raises(EmptyPrototypeSetError):
            evaluate(queries, PrototypeSet({0: np.zeros((0, 1))}, "centroid"))
        with pytest.raises(DimensionMismatchError):
            evaluate(queries, PrototypeSet({0: np.zeros((1, 4))}, "centroid"))
        with pytest.raises(ConfigError):
            evaluate(queries, pset, group_buckets=["1-5", "6+"])


# -- grouping ------------------------------------------------------------


class TestBuckets:
    def test_parse_valid(self):
        assert parse_buckets(["1-15", "16-50", "51+"]) == [(1, 15), (16, 50), (51, np.inf)]

    def test_parse_unsorted_input_ok(self):
        assert parse_buckets(["16+", "1-15"]) == [(16, np.inf), (1, 15)]

    @pytest.mark.parametrize(
        "labels",
        [
            ["1-15", "17+"],        # gap
            ["1-15", "10+"],        # overlap
            ["1-15", "16-20"],      # no open end
            ["2-15", "16+"],        # does not start at 1
            ["1-15", "16~20+"],     # malformed
            ["0-15", "16+"],        # zero lower bound
            [],
        ],
    )
    def test_parse_invalid(self, labels):
        with pytest.raises(ConfigError):
            parse_buckets(labels)

    def test_group_breakdown(self):
        queries = build_set(
            np.array([[0.0], [0.1], [10.0]]), [0, 0, 1], [0] * 3, id_prefix="q"
        )
        pset = PrototypeSet(
            {0: np.array([[0.0]]), 1: np.array([[10.0]])}, "centroid"
        )
        sizes = {0: 4, 1: 40}
        rep = evaluate(
            queries, pset, max_rank=2, group_buckets=["1-15", "16-30", "31+"],
            gallery_sizes=sizes,
        )
        assert rep.per_group["1-15"]["count"] == 2
        assert rep.per_group["1-15"]["map"] == 1.0
        assert rep.per_group["16-30"] == {"count": 0, "map": None}
        assert rep.per_group["31+"]["count"] == 1


# -- diagnostics ---------------------------------------------------------


class TestCoverage:
    def test_centroids_cover_separated_line(self):
        gallery = build_set(np.array([[0.0], [1.0], [3.0]]), [0, 0, 1], [0] * 3)
        pset = PrototypeSet({0: np.array([[0.5]]), 1: np.array([[3.0]])}, "centroid")
        assert coverage_violations(gallery, pset) == (0, [])

    def test_detects_stolen_record(self):
        gallery = build_set(np.array([[0.0], [1.0], [3.0]]), [0, 0, 1], [0] * 3)
        pset = PrototypeSet({0: np.array([[0.5]]), 1: np.array([[1.2]])}, "centroid")
        count, ids = coverage_violations(gallery, pset)
        assert (count, ids) == (1, ["r1"])

    def test_exact_tie_is_a_violation(self):
        gallery = build_set(np.array([[1.0]]), [0], [0])
        pset = PrototypeSet({0: np.array([[0.5]]), 1: np.array([[1.5]])}, "centroid")
        assert coverage_violations(gallery, pset)[0] == 1

    def test_instance_prototypes_cover_unless_duplicated_across_classes(self):
        gallery = build_set(np.array([[0.0, 0.0], [5.0, 0.0]]), [0, 1], [0, 0])
        pset = PrototypeSet(
            {0: np.array([[0.0, 0.0]]), 1: np.array([[5.0, 0.0]])}, "instance"
        )
        assert coverage_violations(gallery, pset)[0] == 0
        clash = build_set(np.array([[0.0, 0.0], [0.0, 0.0]]), [0, 1], [0, 0])
        pclash = PrototypeSet(
            {0: np.array([[0.0, 0.0]]), 1: np.array([[0.0, 0.0]])}, "instance"
        )
        assert coverage_violations(clash, pclash)[0] == 2

    def test_class_without_prototypes_all_violate(self):
        gallery = build_set(np.array([[0.0], [9.0]]), [0, 1], [0, 0])
        pset = PrototypeSet({0: np.array([[0.0]])}, "centroid")
        count, ids = coverage_violations(gallery, pset)
        assert (count, ids) == (1, ["r1"])


class TestDisplacement:
    def test_hand_values(self):
        gallery = build_set(np.array([[0.0, 0.0], [2.0, 0.0]]), [0, 0], [0, 0])
        pset = PrototypeSet({0: np.array([[1.0, 0.0], [3.0, 0.0]])}, "fps")
        assert prototype_displacement(pset, gallery) == {0: [0.0, 2.0]}

    def test_unknown_class(self):
        gallery = build_set(np.array([[0.0]]), [0], [0])
        pset = PrototypeSet({5: np.array([[1.0]])}, "fps")
        with pytest.raises(UnknownClassError):
            prototype_displacement(pset, gallery)


# -- serialization -------------------------------------------------------


class TestReportIo:
    def build_report(self):
        rng = np.random.default_rng(43)
        _, queries, pset = random_instance(rng)
        sizes = {c: 20 for c in pset.class_ids}
        return evaluate(
            queries, pset, max_rank=5, group_buckets=["1-15", "16+"],
            gallery_sizes=sizes, config_echo={"selector": "instance"},
            include_per_query_ap=True,
        )

    def test_json_round_trip_bit_exact(self):
        rep = self.build_report()
        text = report_to_json(rep)
        again = report_to_json(report_from_json(text))
        assert text == again
        back = report_from_json(text)
        assert back.map == rep.map
        assert back.cmc == rep.cmc
        assert back.per_query_ap == rep.per_query_ap

    def test_json_keys_sorted(self):
        text = report_to_json(self.build_report())
        data = json.loads(text)
        assert list(data) == sorted(data)

    def test_csv_layout_and_float_fidelity(self):
        rep = self.build_report()
        lines = report_to_csv(rep).strip().split("\n")
        assert lines[0] == "metric,k,value"
        assert len(lines) == 1 + len(rep.cmc) + 1
        for k, line in enumerate(lines[1:-1], start=1):
            metric, kk, value = line.split(",")
            assert (metric, int(kk)) == ("cmc", k)
            assert float(value) == rep.cmc[k - 1]
        metric, kk, value = lines[-1].split(",")
        assert (metric, kk) == ("map", "")
        assert float(value) == rep.map
