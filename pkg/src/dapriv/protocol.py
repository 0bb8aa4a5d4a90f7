"""Entity state and the end-to-end flows.

Implements the 15-step lab interaction (prescription, brokered session,
key deposit, sealed result pointer, physician handoff), the patient side
of the research-gathering flow (consent, sanitization, sealed submission
to the anonymizer), and emergency snapshot storage with its mandatory
flag-and-notify semantics.

Entities own their state; all interaction goes through the shared event
log so the adversary and the invariant sweeps see exactly what was
delivered and nothing more.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .anonymizer import SubmissionPool, encode_record
from .coordination import (
    AclViolation,
    AuthorizationError,
    AuthServer,
    DirectoryRef,
    store_read,
    store_write,
)
from .eventlog import EventLog
from .keypool import KeyPool

EXPLICIT_ID_FIELDS = ("name", "national_id")
QUASI_ID_FIELDS = ("birth_date", "zip_code", "gender")


class ProtocolError(Exception):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class MedicalRecord:
    explicit_ids: dict[str, str]  # name, national_id
    quasi_ids: dict[str, str]  # birth_date, zip_code, gender
    sensitive: dict[str, str]
    provenance: list[crypto.Signature] = field(default_factory=list)

    def field_names(self) -> set[str]:
        return set(self.explicit_ids) | set(self.quasi_ids) | set(self.sensitive)

    def flat(self) -> dict[str, str]:
        return {**self.explicit_ids, **self.quasi_ids, **self.sensitive}

    def body_bytes(self) -> bytes:
        return json.dumps(
            {"explicit": self.explicit_ids, "quasi": self.quasi_ids, "sensitive": self.sensitive},
            sort_keys=True,
        ).encode()

    def provenance_ok(self) -> bool:
        body = self.body_bytes()
        return all(crypto.verify(body, sig, sig.signer_public) for sig in self.provenance)


@dataclass(frozen=True)
class Prescription:
    tests: frozenset[str]
    physician_pub: bytes
    nonce: bytes
    signature: crypto.Signature

    def signed_payload(self) -> bytes:
        return json.dumps({"tests": sorted(self.tests), "nonce": self.nonce.hex()}).encode()


@dataclass(frozen=True)
class ResultPointer:
    location: str
    symmetric_key: bytes
    lab_signature: crypto.Signature

    def encode(self) -> bytes:
        return json.dumps(
            {
                "location": self.location,
                "symmetric_key": self.symmetric_key.hex(),
                "lab_signature": self.lab_signature.bytes_.hex(),
                "lab_public": self.lab_signature.signer_public.hex(),
            },
            sort_keys=True,
        ).encode()

    @classmethod
    def decode(cls, blob: bytes) -> "ResultPointer":
        d = json.loads(blob.decode())
        return cls(
            location=d["location"],
            symmetric_key=bytes.fromhex(d["symmetric_key"]),
            lab_signature=crypto.Signature(
                bytes_=bytes.fromhex(d["lab_signature"]),
                signer_public=bytes.fromhex(d["lab_public"]),
            ),
        )


@dataclass
class EmergencySnapshot:
    ciphertext: crypto.SealedEnvelope
    access_log: list[tuple[str, int, bool]] = field(default_factory=list)  # accessor, ts, flag


# ---------------------------------------------------------------------------
# entities
# ---------------------------------------------------------------------------


@dataclass
class Patient:
    entity_id: str
    name: str
    ssn: str
    record: MedicalRecord
    pool: KeyPool
    emergency_contact_id: Optional[str] = None
    notifications: list[str] = field(default_factory=list)


@dataclass
class Physician:
    entity_id: str
    identity: crypto.SigningIdentity
    keypair: crypto.EncryptionKeyPair
    received_results: list[bytes] = field(default_factory=list)


@dataclass
class Lab:
    entity_id: str
    ref: DirectoryRef
    identity: crypto.SigningIdentity
    capabilities: frozenset[str]


@dataclass
class Researcher:
    entity_id: str
    ref: DirectoryRef
    received_batches: list = field(default_factory=list)


@dataclass
class EmergencyContact:
    entity_id: str
    keypair: crypto.EncryptionKeyPair


class EmergencyStorageServer:
    """Holds sealed snapshots only; every access attempt, successful or
    not, appends to the access log and notifies the patient."""

    def __init__(self, entity_id: str, log: EventLog):
        self.entity_id = entity_id
        self.log = log
        self.snapshots: dict[str, list[EmergencySnapshot]] = {}

    def deposit(self, patient: Patient, data: bytes, contact_pub: bytes) -> EmergencySnapshot:
        if patient.emergency_contact_id is None:
            raise ProtocolError("patient has no designated emergency contact")
        snap = EmergencySnapshot(ciphertext=crypto.seal(data, contact_pub))
        self.snapshots.setdefault(patient.entity_id, []).append(snap)
        self.log.append(patient.entity_id, self.entity_id, "emergency_deposit")
        return snap

    def current_snapshot(self, patient_id: str) -> EmergencySnapshot:
        history = self.snapshots.get(patient_id)
        if not history:
            raise ProtocolError(f"no snapshot for {patient_id}")
        return history[-1]

    def access(self, accessor_id: str, private_key: bytes, patient: Patient) -> bytes:
        """Read path; flag + log + patient notification happen before the
        outcome is known, so no attempt can bypass them."""
        snap = self.current_snapshot(patient.entity_id)
        event = self.log.append(
            self.entity_id, patient.entity_id, "emergency_access_notice",
            meta={"accessor": accessor_id},
        )
        snap.access_log.append((accessor_id, event.timestamp, True))
        patient.notifications.append(f"emergency access by {accessor_id}")
        return crypto.open_envelope(snap.ciphertext, private_key).plaintext


class BlobStore:
    """Content-addressed shared store, visible to every entity. Only
    ciphertext ever lands here."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}

    def put(self, blob: bytes) -> str:
        loc = hashlib.sha256(blob).hexdigest()
        self._blobs[loc] = blob
        return loc

    def get(self, loc: str) -> bytes:
        return self._blobs[loc]


# ---------------------------------------------------------------------------
# simulation context
# ---------------------------------------------------------------------------


@dataclass
class SimulationContext:
    log: EventLog
    auth: AuthServer
    blobs: BlobStore
    rng: random.Random  # lab-side randomness (symmetric keys, outcomes)
    token_mode: str = "dapriv_keys"  # or "baseline_ssn"
    # which quasi-id field a patient divulges to the lab at session n:
    divulge_rotation: tuple[tuple[str, ...], ...] = (
        ("birth_date",),
        ("zip_code",),
        ("gender",),
    )
    # generator-side bookkeeping, never visible to entities
    plaintext_holders: dict[str, set[str]] = field(default_factory=dict)
    session_truth: dict[str, str] = field(default_factory=dict)  # session -> patient
    sessions_per_patient: dict[str, int] = field(default_factory=dict)
    submission_audit: dict[str, list[str]] = field(default_factory=dict)  # store -> patients

    def note_plaintext(self, digest: str, holder: str):
        self.plaintext_holders.setdefault(digest, set()).add(holder)


def _observe(
    ctx: SimulationContext,
    observer: str,
    session: str,
    token: str,
    attributes: dict[str, str],
    truth_patient: str,
):
    """Record what one observer legitimately learned in one session. The
    truth_patient field is generator-side ground truth used only by the
    metrics, never by the collusion join."""
    ctx.log.append(
        "network",
        observer,
        "observe",
        session,
        meta={
            "observation": {
                "observer": observer,
                "session": session,
                "token": token,
                "attributes": dict(attributes),
                "truth_patient": truth_patient,
            }
        },
    )


# ---------------------------------------------------------------------------
# lab flow
# ---------------------------------------------------------------------------


def issue_prescription(
    ctx: SimulationContext, physician: Physician, patient: Patient, tests: frozenset[str]
) -> Prescription:
    if not tests:
        raise ProtocolError("prescription must name at least one test")
    if physician.identity.public_part not in ctx.auth.physician_keys:
        raise ProtocolError("physician is not registered with the certifying registry")
    nonce = ctx.rng.randbytes(8)
    payload = json.dumps({"tests": sorted(tests), "nonce": nonce.hex()}).encode()
    pres = Prescription(
        tests=tests,
        physician_pub=physician.identity.public_part,
        nonce=nonce,
        signature=crypto.sign(payload, physician.identity),
    )
    ctx.log.append(physician.entity_id, patient.entity_id, "prescription", payload=payload)
    return pres


@dataclass(frozen=True)
class LabFlowResult:
    status: str  # "completed" | "aborted"
    abort_reason: Optional[str] = None
    session_id: Optional[str] = None
    deposited_public_key: Optional[bytes] = None
    lab_plaintext: Optional[bytes] = None
    physician_plaintext: Optional[bytes] = None

    @property
    def completed(self) -> bool:
        return self.status == "completed"


def run_lab_flow(
    ctx: SimulationContext,
    patient: Patient,
    physician: Physician,
    lab: Lab,
    prescription: Prescription,
    tamper: Optional[str] = None,
) -> LabFlowResult:
    """Execute one full lab session.

    ``tamper`` injects one of the attack cases:
      - "flip_prescription": the patient presents an altered test list
      - "substitute_store_key": a man in the middle replaces the deposited
        public key before the lab reads it
      - "mutate_envelope": one bit of the sealed result pointer is flipped

    Key-pool usage is recorded only when the flow completes.
    """
    presented = prescription
    if tamper == "flip_prescription":
        presented = Prescription(
            tests=prescription.tests | {"mri"},
            physician_pub=prescription.physician_pub,
            nonce=prescription.nonce,
            signature=prescription.signature,
        )

    # broker the session (lab-flow steps 2-7)
    ctx.log.append(patient.entity_id, ctx.auth.auth_id, "authorize_request")
    try:
        session = ctx.auth.authorize_lab_session(
            presented, lab.ref, patient.entity_id, lab.entity_id
        )
    except AuthorizationError as exc:
        return LabFlowResult(status="aborted", abort_reason=f"authorization: {exc}")

    sid = session.session_id
    ctx.session_truth[sid] = patient.entity_id
    session_index = ctx.sessions_per_patient.get(patient.entity_id, 0)
    ctx.sessions_per_patient[patient.entity_id] = session_index + 1

    # the broker sees the session id but never a medical attribute
    _observe(ctx, ctx.auth.auth_id, sid, sid, {}, patient.entity_id)

    # step 8: patient deposits a freshly selected public key
    subkey = patient.pool.select_public_key()
    store_write(session.store, "patient", ("public_key", subkey.public_key), ctx.log, patient.entity_id)

    if tamper == "substitute_store_key":
        # a MITM on the open network overwrites the deposited key with its
        # own; modeled as a raw slot append outside the ACL path
        mitm = crypto.generate_encryption_keypair(random.Random("mitm"))
        session.store.slots.append(("mitm", ("public_key", mitm.public_bytes)))
        ctx.log.append("adversary", f"store:{sid}", "mitm_substitution", sid)

    # step 9: patient approaches the lab carrying only the session id (in
    # baseline mode the stable national id is divulged instead)
    ctx.log.append(patient.entity_id, lab.entity_id, "visit", sid)

    # step 10: lab fetches the (latest) deposited key
    key_slot = max(
        i for i, (_, item) in enumerate(session.store.slots) if item[0] == "public_key"
    )
    deposited = store_read(session.store, "lab", key_slot, ctx.log, lab.entity_id)[1]

    token = patient.ssn if ctx.token_mode == "baseline_ssn" else deposited.hex()
    divulged_fields = ctx.divulge_rotation[session_index % len(ctx.divulge_rotation)]
    attributes = {f: patient.record.quasi_ids[f] for f in divulged_fields}
    attributes["tests"] = ",".join(sorted(prescription.tests))
    _observe(ctx, lab.entity_id, sid, token, attributes, patient.entity_id)

    # step 11: lab produces and stores the encrypted result
    outcome = ctx.rng.choice(["normal", "elevated", "low"])
    result = json.dumps(
        {"session": sid, "tests": sorted(prescription.tests), "outcome": outcome},
        sort_keys=True,
    ).encode()
    result_digest = hashlib.sha256(result).hexdigest()
    ctx.note_plaintext(result_digest, lab.entity_id)
    sk = crypto.new_symmetric_key(ctx.rng)
    loc = ctx.blobs.put(crypto.symmetric_encrypt(sk, result))
    pointer = ResultPointer(
        location=loc,
        symmetric_key=sk,
        lab_signature=crypto.sign(result, lab.identity),
    )

    # step 12: pointer sealed to the deposited key, written to the store
    env = crypto.seal(pointer.encode(), deposited, signer=lab.identity)
    if tamper == "mutate_envelope":
        mutated = bytes([env.ciphertext[0] ^ 0x01]) + env.ciphertext[1:]
        env = crypto.SealedEnvelope(
            recipient_hint=env.recipient_hint,
            ephemeral_pub=env.ephemeral_pub,
            wrapped_key=env.wrapped_key,
            ciphertext=mutated,
        )
    store_write(session.store, "lab", ("result_pointer", env), ctx.log, lab.entity_id)
    ctx.log.append(lab.entity_id, patient.entity_id, "result_ready", sid)

    # step 13: patient opens the pointer with the matching private key
    try:
        priv = patient.pool.find_private_for(subkey.public_key)
        opened = crypto.open_envelope(env, priv)
    except crypto.WrongRecipientError:
        ctx.log.append(patient.entity_id, ctx.auth.auth_id, "abort", sid)
        return LabFlowResult(status="aborted", abort_reason="wrong_recipient", session_id=sid)
    except crypto.IntegrityError:
        ctx.log.append(patient.entity_id, ctx.auth.auth_id, "abort", sid)
        return LabFlowResult(status="aborted", abort_reason="integrity_failure", session_id=sid)
    if opened.signature_valid is not True or opened.signer_public != lab.identity.public_part:
        ctx.log.append(patient.entity_id, ctx.auth.auth_id, "abort", sid)
        return LabFlowResult(status="aborted", abort_reason="lab_signature_invalid", session_id=sid)
    recovered = ResultPointer.decode(opened.plaintext)

    # the patient may read their own result
    try:
        patient_view = crypto.symmetric_decrypt(recovered.symmetric_key, ctx.blobs.get(recovered.location))
    except crypto.IntegrityError:
        ctx.log.append(patient.entity_id, ctx.auth.auth_id, "abort", sid)
        return LabFlowResult(status="aborted", abort_reason="result_tampered", session_id=sid)
    if not crypto.verify(patient_view, recovered.lab_signature, lab.identity.public_part):
        ctx.log.append(patient.entity_id, ctx.auth.auth_id, "abort", sid)
        return LabFlowResult(status="aborted", abort_reason="lab_signature_invalid", session_id=sid)
    ctx.note_plaintext(hashlib.sha256(patient_view).hexdigest(), patient.entity_id)

    # step 14: same (location, key) re-sealed to the physician
    handoff = crypto.seal(recovered.encode(), physician.keypair.public_bytes)
    ctx.log.append(patient.entity_id, physician.entity_id, "result_handoff", sid)

    # step 15: physician fetches, decrypts, validates the lab signature
    opened_handoff = crypto.open_envelope(handoff, physician.keypair.private_bytes)
    phys_pointer = ResultPointer.decode(opened_handoff.plaintext)
    phys_result = crypto.symmetric_decrypt(
        phys_pointer.symmetric_key, ctx.blobs.get(phys_pointer.location)
    )
    if not crypto.verify(phys_result, phys_pointer.lab_signature, lab.identity.public_part):
        return LabFlowResult(status="aborted", abort_reason="lab_signature_invalid", session_id=sid)
    physician.received_results.append(phys_result)
    ctx.note_plaintext(hashlib.sha256(phys_result).hexdigest(), physician.entity_id)

    patient.pool.record_use(subkey)
    return LabFlowResult(
        status="completed",
        session_id=sid,
        deposited_public_key=subkey.public_key,
        lab_plaintext=result,
        physician_plaintext=phys_result,
    )


# ---------------------------------------------------------------------------
# sanitization + research flow
# ---------------------------------------------------------------------------


def sanitize_record(
    record: MedicalRecord, share_policy: set[str]
) -> tuple[dict[str, str], list[str]]:
    """Project the record onto the share policy. Explicit identifiers are
    ALWAYS removed; a policy that asks for them yields a warning instead
    (the patient cannot opt into de-anonymizing the pool)."""
    unknown = share_policy - record.field_names()
    if unknown:
        raise ProtocolError(f"share policy names unknown fields: {sorted(unknown)}")
    warnings = [
        f"explicit identifier {f!r} excluded from sharing"
        for f in sorted(share_policy & set(EXPLICIT_ID_FIELDS))
    ]
    flat = record.flat()
    sanitized = {
        f: flat[f] for f in sorted(share_policy) if f not in EXPLICIT_ID_FIELDS
    }
    return sanitized, warnings


@dataclass(frozen=True)
class ResearchFlowResult:
    submission_session: Optional[str]
    submitted: int
    released: Optional[object]  # ReleasedBatch or None


def run_research_flow(
    ctx: SimulationContext,
    researcher: Researcher,
    physicians: list[Physician],
    patients: list[Patient],
    consent: dict[str, bool],
    share_policy: set[str],
    pool: SubmissionPool,
    anonymizer_id: str = "anonymizer:0",
    bypass_anonymizer: bool = False,
) -> ResearchFlowResult:
    """Fan the researcher's request out through the physicians, collect
    sealed sanitized submissions from consenting patients, and let the
    anonymizer gate the release. Non-consenting patients contribute
    nothing and are indistinguishable from non-recipients."""
    for physician in physicians:
        ctx.log.append(researcher.entity_id, physician.entity_id, "research_request")
        for patient in patients:
            ctx.log.append(
                physician.entity_id,
                patient.entity_id,
                "research_forward",
                meta={"researcher_ref": researcher.ref.render()},
            )

    channel = None
    submitted = 0
    for patient in patients:
        if not consent.get(patient.entity_id, False):
            continue
        ctx.log.append(patient.entity_id, ctx.auth.auth_id, "verify_researcher_request")
        if channel is None:
            try:
                channel = ctx.auth.setup_research_channel(
                    researcher.ref, pool.public_key, anonymizer_id, patient.entity_id
                )
            except AuthorizationError:
                # unverifiable researcher: the whole study collects nothing
                return ResearchFlowResult(submission_session=None, submitted=0, released=None)
        sanitized, _warnings = sanitize_record(patient.record, share_policy)
        if bypass_anonymizer:
            pool.accept_plain(sanitized, patient.entity_id)
        else:
            env = crypto.seal(encode_record(sanitized), channel.anonymizer_public_key)
            slot = store_write(channel.store, "patient", ("submission", env), ctx.log, patient.entity_id)
            item = store_read(channel.store, "anonymizer", slot, ctx.log, anonymizer_id)
            pool.accept(item[1], patient.entity_id)
        ctx.submission_audit.setdefault(
            channel.session_id if channel else "direct", []
        ).append(patient.entity_id)
        submitted += 1

    released = pool.release_batch()
    if released is not None:
        ctx.log.append(anonymizer_id, researcher.entity_id, "batch_release",
                       meta={"count": len(released.records)})
        researcher.received_batches.append(released)
    return ResearchFlowResult(
        submission_session=channel.session_id if channel else None,
        submitted=submitted,
        released=released,
    )
