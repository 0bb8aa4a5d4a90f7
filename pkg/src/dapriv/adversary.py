"""The colluding-observer attack.

An honest-but-curious coalition of interacting entities pools the views
it legitimately received (one shard per observer per session) and joins
them on whatever identifier each observer saw. When the identifier is a
stable one (a national id), the join rebuilds rich per-patient profiles;
when each session exposes a fresh public key, the joins find nothing to
merge. The metrics quantify that difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .eventlog import EventLog


@dataclass(frozen=True)
class ObservationShard:
    observer: str
    session: str
    session_token: str
    attributes_seen: dict[str, str]
    timestamp: int
    truth_patient: str  # generator-side ground truth, metrics only


@dataclass
class ReassembledProfile:
    join_key: str
    merged_attributes: dict[str, str] = field(default_factory=dict)
    contributing_observers: set[str] = field(default_factory=set)
    shards: list[ObservationShard] = field(default_factory=list)


def harvest_shards(log: EventLog, coalition: set[str]) -> list[ObservationShard]:
    """One shard per (observer, session), taken verbatim from the event
    log's observation records for coalition members."""
    shards = []
    for event in log.events:
        obs = event.meta.get("observation")
        if obs is None or obs["observer"] not in coalition:
            continue
        shards.append(
            ObservationShard(
                observer=obs["observer"],
                session=obs["session"],
                session_token=obs["token"],
                attributes_seen=dict(obs["attributes"]),
                timestamp=event.timestamp,
                truth_patient=obs["truth_patient"],
            )
        )
    return shards


def audit_shards(log: EventLog, shards: Iterable[ObservationShard]) -> bool:
    """Honest-harvest check: every shard must be backed by a log event with
    identical observation content."""
    seen = set()
    for event in log.events:
        obs = event.meta.get("observation")
        if obs is not None:
            seen.add(
                (
                    obs["observer"],
                    obs["session"],
                    obs["token"],
                    tuple(sorted(obs["attributes"].items())),
                )
            )
    return all(
        (s.observer, s.session, s.session_token, tuple(sorted(s.attributes_seen.items())))
        in seen
        for s in shards
    )


def collude_join(shards: Sequence[ObservationShard]) -> list[ReassembledProfile]:
    """Group shards by equal session token; merge each group's attributes."""
    profiles: dict[str, ReassembledProfile] = {}
    for shard in shards:
        profile = profiles.setdefault(shard.session_token, ReassembledProfile(shard.session_token))
        profile.merged_attributes.update(shard.attributes_seen)
        profile.contributing_observers.add(shard.observer)
        profile.shards.append(shard)
    return list(profiles.values())


@dataclass(frozen=True)
class ReassemblyMetrics:
    linkage_rate: float
    enrichment: float
    precision: float
    patients: int
    profiles: int


def reassembly_rate(
    profiles: Sequence[ReassembledProfile],
    ground_truth: dict[str, dict[str, str]],
) -> ReassemblyMetrics:
    """Quantify the attack against generator ground truth.

    - linkage rate: fraction of patients for whom some profile merges
      shards from >= 2 distinct observers of that patient
    - enrichment: mean over patients of (largest correctly merged profile)
      / (largest single shard), in attribute counts
    - precision: fraction of multi-shard profiles whose shards all belong
      to one patient (1.0 when no profile merged anything)
    """
    patients = sorted(ground_truth)
    linked = 0
    ratios = []
    for pid in patients:
        own_shards = [s for p in profiles for s in p.shards if s.truth_patient == pid]
        if not own_shards:
            continue
        if any(
            len({s.observer for s in p.shards if s.truth_patient == pid}) >= 2
            for p in profiles
        ):
            linked += 1
        pure_profiles = [
            p for p in profiles if p.shards and all(s.truth_patient == pid for s in p.shards)
        ]
        largest_merged = max((len(p.merged_attributes) for p in pure_profiles), default=0)
        largest_shard = max(len(s.attributes_seen) for s in own_shards)
        if largest_shard > 0:
            ratios.append(largest_merged / largest_shard)

    merged_profiles = [p for p in profiles if len(p.shards) >= 2]
    if merged_profiles:
        precision = sum(
            1 for p in merged_profiles if len({s.truth_patient for s in p.shards}) == 1
        ) / len(merged_profiles)
    else:
        precision = 1.0
    observed = [pid for pid in patients if any(s.truth_patient == pid for p in profiles for s in p.shards)]
    return ReassemblyMetrics(
        linkage_rate=linked / len(observed) if observed else 0.0,
        enrichment=sum(ratios) / len(ratios) if ratios else 0.0,
        precision=precision,
        patients=len(observed),
        profiles=len(profiles),
    )


def quasi_id_linkage(
    profiles: Sequence[ReassembledProfile],
    released_batches: Sequence[Sequence[dict]],
    quasi_id_fields: Sequence[str],
) -> dict[str, bool]:
    """Re-identification through a release: a profile is exposed when its
    quasi-id projection matches exactly one released record (then that
    record is surely the profile's patient)."""
    released = [r for batch in released_batches for r in batch]
    out: dict[str, bool] = {}
    for profile in profiles:
        if not all(f in profile.merged_attributes for f in quasi_id_fields):
            out[profile.join_key] = False
            continue
        projection = tuple(profile.merged_attributes[f] for f in quasi_id_fields)
        matches = sum(
            1
            for r in released
            if all(f in r for f in quasi_id_fields)
            and tuple(r[f] for f in quasi_id_fields) == projection
        )
        out[profile.join_key] = matches == 1
    return out


def analytic_linkage_estimate(active_subkeys: int, sessions: int, public_threshold: int) -> float:
    """Exact probability that uniform selection over a fixed-size pool of
    active subkeys (each archived and replaced after ``public_threshold``
    uses) hands the same subkey to two or more of ``sessions`` sequential
    sessions.

    Computed by enumerating selection sequences over use-count states, the
    reference model the measured linkage rate is compared against.
    """
    a = active_subkeys
    if public_threshold == 1 or sessions < 2 or a < 1:
        return 0.0

    from functools import lru_cache

    @lru_cache(maxsize=None)
    def p_no_collision(remaining: int, counts: tuple[int, ...]) -> float:
        # counts: per-slot uses of the CURRENT key in that slot; a key that
        # reaches the threshold is replaced by a fresh key (count resets)
        if remaining == 0:
            return 1.0
        total = 0.0
        for i in range(a):
            c = counts[i]
            if c >= 1:
                continue  # picking a once-used key is a collision
            new = list(counts)
            new[i] = 0 if c + 1 >= public_threshold else c + 1
            total += p_no_collision(remaining - 1, tuple(sorted(new))) / a
        return total

    return 1.0 - p_no_collision(sessions, tuple([0] * a))
