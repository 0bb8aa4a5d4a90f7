"""Anonymization gate and generalization tests, checked against the
independent brute-force oracles in oracles.py."""

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dapriv import crypto
from dapriv.anonymizer import (
    AnonymizationPolicy,
    Hierarchy,
    MalformedRecordError,
    SubmissionPool,
    check_k_anonymity,
    class_entropy,
    encode_record,
    entropy_l_diversity,
    equivalence_classes,
    generalize_to_policy,
)
from oracles import (
    brute_entropy,
    brute_entropy_l_diversity,
    brute_k_anonymity,
    exhaustive_feasibility,
)


def rec(zip_code, diagnosis, gender="F"):
    return {"zip_code": zip_code, "gender": gender, "diagnosis": diagnosis}


ZIP_POLICY = AnonymizationPolicy(
    k=2,
    l=1.0,
    quasi_id_fields=("zip_code",),
    sensitive_field="diagnosis",
    hierarchies={"zip_code": Hierarchy({"kind": "prefix", "lengths": [4, 3]})},
)


class TestEquivalenceClasses:
    def test_two_classes_of_two(self):
        records = [rec("47677", "flu"), rec("47677", "flu"), rec("47602", "flu"), rec("47602", "flu")]
        classes = equivalence_classes(records, ["zip_code"])
        assert sorted(len(m) for m in classes.values()) == [2, 2]

    def test_single_class(self):
        records = [rec("1", "a"), rec("1", "b"), rec("1", "c")]
        assert len(equivalence_classes(records, ["zip_code"])) == 1

    def test_empty_input(self):
        assert equivalence_classes([], ["zip_code"]) == {}

    def test_missing_field_rejected(self):
        with pytest.raises(MalformedRecordError):
            equivalence_classes([{"gender": "F"}], ["zip_code"])


class TestKAnonymity:
    def test_pairs_pass_k2(self):
        records = [rec("1", "a"), rec("1", "b"), rec("2", "c"), rec("2", "d")]
        assert check_k_anonymity(records, ["zip_code"], 2)

    def test_singleton_fails_k2(self):
        records = [rec("1", "a"), rec("1", "b"), rec("3", "c")]
        assert not check_k_anonymity(records, ["zip_code"], 2)

    def test_k1_vacuous(self):
        records = [rec(str(i), "x") for i in range(5)]
        assert check_k_anonymity(records, ["zip_code"], 1)


class TestEntropyDiversity:
    def test_uniform_over_3_exact_boundary(self):
        records = [rec("1", "flu"), rec("1", "asthma"), rec("1", "anemia")]
        assert entropy_l_diversity(records, ["zip_code"], "diagnosis", 3)
        assert not entropy_l_diversity(records, ["zip_code"], "diagnosis", 3.01)

    def test_single_value_fails_any_l_above_1(self):
        records = [rec("1", "flu"), rec("1", "flu")]
        assert entropy_l_diversity(records, ["zip_code"], "diagnosis", 1)
        assert not entropy_l_diversity(records, ["zip_code"], "diagnosis", 1.001)

    def test_half_quarter_quarter(self):
        # entropy = (3/2) log 2 ~ 1.0397: passes l=2, fails l=3
        records = [rec("1", "a"), rec("1", "a"), rec("1", "b"), rec("1", "c")]
        entropy = class_entropy(records, "diagnosis")
        assert math.isclose(entropy, 1.5 * math.log(2))
        assert math.isclose(entropy, brute_entropy(records, "diagnosis"))
        assert entropy_l_diversity(records, ["zip_code"], "diagnosis", 2)
        assert not entropy_l_diversity(records, ["zip_code"], "diagnosis", 3)

    def test_l_above_distinct_values_always_fails(self):
        records = [rec("1", "a"), rec("1", "b")]  # 2 distinct values
        assert not entropy_l_diversity(records, ["zip_code"], "diagnosis", 2.5)


@st.composite
def random_datasets(draw):
    n = draw(st.integers(min_value=1, max_value=20))
    n_fields = draw(st.integers(min_value=1, max_value=3))
    fields = [f"q{i}" for i in range(n_fields)]
    records = []
    for _ in range(n):
        r = {f: str(draw(st.integers(min_value=0, max_value=3))) for f in fields}
        r["s"] = str(draw(st.integers(min_value=0, max_value=4)))
        records.append(r)
    k = draw(st.integers(min_value=1, max_value=5))
    l = draw(st.floats(min_value=1.0, max_value=4.0, allow_nan=False))
    return records, fields, k, l


class TestOracleEquivalence:
    @given(random_datasets())
    @settings(max_examples=200, deadline=None)
    def test_gates_match_brute_force(self, data):
        records, fields, k, l = data
        assert check_k_anonymity(records, fields, k) == brute_k_anonymity(records, fields, k)
        assert entropy_l_diversity(records, fields, "s", l) == brute_entropy_l_diversity(
            records, fields, "s", l
        )


class TestGeneralization:
    def test_noop_when_already_anonymous(self):
        records = [rec("47677", "flu"), rec("47677", "asthma")]
        result = generalize_to_policy(records, ZIP_POLICY)
        assert result.feasible
        assert result.levels == (0,)
        assert list(result.records) == records

    def test_unique_zips_generalize_to_3_digit_prefix(self):
        # pairs share only the first 3 digits: level 1 (4-digit prefix) is
        # not enough, level 2 is
        records = [
            rec("47671", "flu"),
            rec("47682", "asthma"),
            rec("56211", "flu"),
            rec("56222", "asthma"),
        ]
        result = generalize_to_policy(records, ZIP_POLICY)
        assert result.feasible
        assert result.levels == (2,)
        assert {r["zip_code"] for r in result.records} == {"476*", "562*"}
        feasible, outright = exhaustive_feasibility(records, ZIP_POLICY)
        assert feasible and outright

    def test_infeasible_worst_case(self):
        # singleton classes with one shared sensitive value each: k is
        # reachable only at full suppression, where the single class still
        # fails the diversity gate and suppression would drop everything
        policy = AnonymizationPolicy(
            k=2,
            l=2.0,
            quasi_id_fields=("zip_code",),
            sensitive_field="diagnosis",
            hierarchies={"zip_code": Hierarchy({"kind": "suppress"})},
        )
        records = [rec("1", "flu"), rec("2", "flu"), rec("3", "flu")]
        result = generalize_to_policy(records, policy)
        assert not result.feasible
        feasible, _ = exhaustive_feasibility(records, policy)
        assert not feasible

    def test_suppression_path(self):
        # one stubborn singleton with a unique sensitive value; at full
        # suppression everything merges, entropy passes, so no suppression
        # is actually needed -- verify against the exhaustive oracle
        policy = AnonymizationPolicy(
            k=2,
            l=1.0,
            quasi_id_fields=("zip_code",),
            sensitive_field="diagnosis",
            hierarchies={"zip_code": Hierarchy({"kind": "suppress"})},
        )
        records = [rec("1", "flu"), rec("1", "flu"), rec("9", "anemia")]
        result = generalize_to_policy(records, policy)
        feasible, _ = exhaustive_feasibility(records, policy)
        assert result.feasible == feasible

    def test_monotonicity_of_min_class_size(self):
        rng = random.Random(5)
        records = [rec(f"{rng.randrange(10000, 99999)}", "flu") for _ in range(12)]
        policy = ZIP_POLICY

        def min_class(levels):
            from oracles import apply_levels

            g = apply_levels(records, policy, levels)
            return min(len(m) for m in equivalence_classes(g, policy.quasi_id_fields).values())

        for level in range(policy.hierarchy_for("zip_code").max_level):
            assert min_class([level]) <= min_class([level + 1])

    def test_empty_input_feasible(self):
        assert generalize_to_policy([], ZIP_POLICY).feasible


class TestSubmissionPoolRelease:
    def make_pool(self, min_pool_size=5, k=1, l=1.0):
        policy = AnonymizationPolicy(
            k=k,
            l=l,
            quasi_id_fields=("zip_code",),
            sensitive_field="diagnosis",
            hierarchies={"zip_code": Hierarchy({"kind": "prefix", "lengths": [4, 3]})},
            min_pool_size=min_pool_size,
        )
        keypair = crypto.generate_encryption_keypair(random.Random("anon"))
        return SubmissionPool(policy, keypair, seed="shuffle")

    def test_small_pool_withheld(self):
        pool = self.make_pool(min_pool_size=5)
        for i in range(2):
            pool.accept(crypto.seal(encode_record(rec("47677", "flu")), pool.public_key), f"patient:{i}")
        assert pool.release_batch() is None

    def test_release_strips_explicit_ids_and_order(self):
        pool = self.make_pool(min_pool_size=3, k=1)
        for i in range(6):
            r = rec(f"4767{i}", ["flu", "asthma"][i % 2])
            r["name"] = f"patient-{i}"
            pool.accept(crypto.seal(encode_record(r), pool.public_key), f"patient:{i}")
        batch = pool.release_batch()
        assert batch is not None
        assert len(batch.records) == 6
        assert all("name" not in r for r in batch.records)
        # order is a seeded shuffle, not arrival order
        zips = [r["zip_code"] for r in batch.records]
        assert zips != sorted(zips) or zips != [f"4767{i}" for i in range(6)]

    def test_released_batch_repasses_gates(self):
        pool = self.make_pool(min_pool_size=3, k=2, l=1.0)
        for i in range(6):
            pool.accept(
                crypto.seal(encode_record(rec(f"476{i}{i}", ["flu", "asthma"][i % 2])), pool.public_key),
                f"patient:{i}",
            )
        batch = pool.release_batch()
        assert batch is not None
        assert brute_k_anonymity(list(batch.records), ["zip_code"], 2)

    def test_infeasible_releases_nothing(self):
        pool = self.make_pool(min_pool_size=2, k=2, l=2.0)
        pool.policy.hierarchies["zip_code"] = Hierarchy({"kind": "suppress"})
        for i in range(3):
            pool.accept(crypto.seal(encode_record(rec(str(i), "flu")), pool.public_key), f"patient:{i}")
        assert pool.release_batch() is None
