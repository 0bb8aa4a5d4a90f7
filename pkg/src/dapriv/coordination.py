"""Trusted-broker backbone: directory servers, the authorization server,
and broker-created temp communication stores with role-scoped access.

The authorization server never holds plaintext medical data. It brokers
identifiers and keys only: it verifies labs/researchers against the
directories, creates a temp store per session, and hands the same opaque
session identifier to both legitimate parties.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Any, Optional

from . import crypto
from .eventlog import EventLog


class CoordinationError(Exception):
    pass


class DuplicateEntryError(CoordinationError):
    pass


class AclViolation(CoordinationError):
    """A role attempted a store operation its ACL does not permit."""


class AuthorizationError(CoordinationError):
    """Session brokering refused (bad signature, failed verification)."""


@dataclass(frozen=True)
class DirectoryRef:
    directory_id: str
    entry_id: str

    def render(self) -> str:
        return f"{self.directory_id}#{self.entry_id}"

    @classmethod
    def parse(cls, text: str) -> "DirectoryRef":
        if text.count("#") != 1:
            raise CoordinationError(f"malformed directory ref: {text!r}")
        directory_id, entry_id = text.split("#")
        return cls(directory_id=directory_id, entry_id=entry_id)


class EntryKind(str, enum.Enum):
    LAB = "lab"
    RESEARCHER = "researcher"


@dataclass(frozen=True)
class DirectoryEntry:
    ref: DirectoryRef
    kind: EntryKind
    capabilities: frozenset[str]
    public_key: bytes


class Directory:
    def __init__(self, directory_id: str):
        self.directory_id = directory_id
        self.entries: dict[str, DirectoryEntry] = {}

    def register_entry(self, entry: DirectoryEntry) -> DirectoryRef:
        if entry.ref.directory_id != self.directory_id:
            raise CoordinationError("entry belongs to a different directory")
        if entry.ref.entry_id in self.entries:
            raise DuplicateEntryError(f"duplicate ref {entry.ref.render()}")
        self.entries[entry.ref.entry_id] = entry
        return entry.ref

    def get(self, entry_id: str) -> Optional[DirectoryEntry]:
        return self.entries.get(entry_id)


class Verification(str, enum.Enum):
    VERIFIED = "verified"
    UNKNOWN_DIRECTORY = "unknown_directory"
    UNKNOWN_ENTRY = "unknown_entry"
    KIND_MISMATCH = "kind_mismatch"
    CAPABILITY_MISMATCH = "capability_mismatch"

    @property
    def ok(self) -> bool:
        return self is Verification.VERIFIED


@dataclass
class TempStore:
    """Broker-created shared location. Append-only slots; the ACL maps a
    role name to the operations it may perform."""

    session_id: str
    acl: dict[str, frozenset[str]]
    created_by: str
    slots: list[tuple[str, Any]] = field(default_factory=list)


@dataclass(frozen=True)
class LabSession:
    session_id: str
    store: TempStore


@dataclass(frozen=True)
class ResearchChannel:
    session_id: str
    store: TempStore
    anonymizer_public_key: bytes


class AuthServer:
    def __init__(self, auth_id: str, seed, log: EventLog):
        self.auth_id = auth_id
        self._rng = random.Random(seed)
        self.log = log
        self.directories: dict[str, Directory] = {}
        self.physician_keys: dict[bytes, str] = {}  # certifying registry view
        self.stores: dict[str, TempStore] = {}

    # -- registry ---------------------------------------------------------

    def add_directory(self, directory: Directory):
        self.directories[directory.directory_id] = directory

    def register_physician(self, public_key: bytes, label: str):
        self.physician_keys[public_key] = label

    def _new_session_id(self) -> str:
        return self._rng.randbytes(16).hex()

    # -- verification -----------------------------------------------------

    def _lookup(self, ref: DirectoryRef):
        directory = self.directories.get(ref.directory_id)
        if directory is None:
            return Verification.UNKNOWN_DIRECTORY, None
        entry = directory.get(ref.entry_id)
        if entry is None:
            return Verification.UNKNOWN_ENTRY, None
        return Verification.VERIFIED, entry

    def verify_lab(self, ref: DirectoryRef, required_tests: frozenset[str]) -> Verification:
        status, entry = self._lookup(ref)
        if not status.ok:
            return status
        if entry.kind is not EntryKind.LAB:
            return Verification.KIND_MISMATCH
        if not required_tests <= entry.capabilities:
            return Verification.CAPABILITY_MISMATCH
        return Verification.VERIFIED

    def verify_researcher(self, ref: DirectoryRef) -> Verification:
        status, entry = self._lookup(ref)
        if not status.ok:
            return status
        if entry.kind is not EntryKind.RESEARCHER:
            return Verification.KIND_MISMATCH
        return Verification.VERIFIED

    # -- session brokering --------------------------------------------------

    def authorize_lab_session(
        self,
        prescription,
        lab_ref: DirectoryRef,
        patient_id: str,
        lab_entity_id: str,
    ) -> LabSession:
        """Fig of the lab flow, broker side: verify the prescription
        signature against a registered physician key, verify the lab's
        capabilities, then create one temp store and hand the SAME session
        id to patient and lab. No patient identifier reaches the lab
        through this channel."""
        if prescription.physician_pub not in self.physician_keys:
            raise AuthorizationError("prescription signer is not a registered physician")
        if not crypto.verify(
            prescription.signed_payload(),
            prescription.signature,
            prescription.physician_pub,
        ):
            raise AuthorizationError("prescription signature does not verify")
        verdict = self.verify_lab(lab_ref, prescription.tests)
        if not verdict.ok:
            raise AuthorizationError(f"lab verification failed: {verdict.value}")

        session_id = self._new_session_id()
        store = TempStore(
            session_id=session_id,
            acl={
                "patient": frozenset({"read", "write"}),
                "lab": frozenset({"read", "write"}),
            },
            created_by=self.auth_id,
        )
        self.stores[session_id] = store
        self.log.append(self.auth_id, patient_id, "session_grant", session_id)
        self.log.append(self.auth_id, lab_entity_id, "session_grant", session_id)
        return LabSession(session_id=session_id, store=store)

    def setup_research_channel(
        self,
        researcher_ref: DirectoryRef,
        anonymizer_public_key: bytes,
        anonymizer_id: str,
        patient_id: str,
    ) -> ResearchChannel:
        """Research flow, broker side: verify the researcher, create a
        submission store the researcher cannot read, and give the patient
        the anonymizer's current public key."""
        verdict = self.verify_researcher(researcher_ref)
        if not verdict.ok:
            self.log.append(self.auth_id, patient_id, "researcher_rejected", None)
            raise AuthorizationError(f"researcher verification failed: {verdict.value}")
        session_id = self._new_session_id()
        store = TempStore(
            session_id=session_id,
            acl={
                "patient": frozenset({"write"}),
                "anonymizer": frozenset({"read"}),
            },
            created_by=self.auth_id,
        )
        self.stores[session_id] = store
        self.log.append(self.auth_id, anonymizer_id, "channel_created", session_id)
        self.log.append(
            self.auth_id,
            patient_id,
            "anonymizer_key",
            session_id,
            payload=anonymizer_public_key,
        )
        return ResearchChannel(
            session_id=session_id,
            store=store,
            anonymizer_public_key=anonymizer_public_key,
        )


def _authorized(store: TempStore, role: str, action: str) -> bool:
    return action in store.acl.get(role, frozenset())


def store_write(store: TempStore, role: str, item, log: EventLog, actor: str) -> int:
    """Append an item; returns the slot index. Violations are rejected AND
    logged as adversary-observable events."""
    ok = _authorized(store, role, "write")
    log.append(
        actor,
        f"store:{store.session_id}",
        "store_write",
        store.session_id,
        meta={"role": role, "authorized": ok},
    )
    if not ok:
        raise AclViolation(f"role {role!r} may not write to {store.session_id}")
    store.slots.append((role, item))
    return len(store.slots) - 1


def store_read(store: TempStore, role: str, index: int, log: EventLog, actor: str):
    ok = _authorized(store, role, "read")
    log.append(
        f"store:{store.session_id}",
        actor,
        "store_read",
        store.session_id,
        meta={"role": role, "authorized": ok, "slot": index},
    )
    if not ok:
        raise AclViolation(f"role {role!r} may not read from {store.session_id}")
    if index >= len(store.slots):
        raise CoordinationError(f"slot {index} not found in {store.session_id}")
    return store.slots[index][1]
