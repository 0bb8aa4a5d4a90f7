"""A patient's rotating key pool.

The pool holds several logical private keys; each private key owns several
encryption subkeys (the public halves are what interacting entities ever
see). Every completed use increments usage counters. A subkey that reaches
``public_threshold`` uses is archived and replaced by a fresh subkey under
the same private key. A private key whose total uses reach
``private_threshold`` is archived together with ALL its subkeys and replaced
by a fresh private key with a full set of subkeys. Archived material is
retained for the whole run so envelopes sealed to old subkeys stay
decryptable.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

from . import crypto


class PoolError(Exception):
    pass


class UnknownKeyError(PoolError):
    """The public key was not minted by this pool."""


class ArchivedKeyUseError(PoolError):
    """record_use was called on an archived subkey (a protocol bug signal)."""


class KeyStatus(str, enum.Enum):
    ACTIVE = "active"
    ARCHIVED = "archived"


@dataclass
class SubKey:
    subkey_id: str
    parent_private_id: str
    public_key: bytes
    use_count: int = 0
    status: KeyStatus = KeyStatus.ACTIVE


@dataclass
class PrivateKeyEntry:
    private_id: str
    subkeys: list[SubKey] = field(default_factory=list)
    use_count: int = 0
    status: KeyStatus = KeyStatus.ACTIVE


@dataclass(frozen=True)
class RotationReport:
    """What a single record_use caused."""

    archived_subkeys: tuple[str, ...] = ()
    minted_subkeys: tuple[str, ...] = ()
    archived_private: tuple[str, ...] = ()
    minted_private: tuple[str, ...] = ()

    @property
    def rotated(self) -> bool:
        return bool(self.archived_subkeys or self.archived_private)


class KeyPool:
    """Single-owner mutable state; mutate only from the simulation loop."""

    def __init__(
        self,
        n_private: int,
        m_public_per_private: int,
        public_threshold: int,
        private_threshold: int,
        seed,
    ):
        if min(n_private, m_public_per_private, public_threshold, private_threshold) < 1:
            raise PoolError("all pool parameters must be >= 1")
        self.m_public_per_private = m_public_per_private
        self.public_threshold = public_threshold
        self.private_threshold = private_threshold
        self._rng = random.Random(seed)
        self.private_keys: list[PrivateKeyEntry] = []
        self._secrets: dict[bytes, bytes] = {}  # public bytes -> private bytes
        self._parent_of: dict[bytes, str] = {}
        self._next_private = 0
        self._next_subkey = 0
        for _ in range(n_private):
            self._mint_private()

    # -- minting ----------------------------------------------------------

    def _mint_subkey(self, entry: PrivateKeyEntry) -> SubKey:
        pair = crypto.generate_encryption_keypair(self._rng)
        sub = SubKey(
            subkey_id=f"sub{self._next_subkey}",
            parent_private_id=entry.private_id,
            public_key=pair.public_bytes,
        )
        self._next_subkey += 1
        self._secrets[pair.public_bytes] = pair.private_bytes
        self._parent_of[pair.public_bytes] = entry.private_id
        entry.subkeys.append(sub)
        return sub

    def _mint_private(self) -> PrivateKeyEntry:
        entry = PrivateKeyEntry(private_id=f"priv{self._next_private}")
        self._next_private += 1
        self.private_keys.append(entry)
        for _ in range(self.m_public_per_private):
            self._mint_subkey(entry)
        return entry

    # -- queries ----------------------------------------------------------

    def active_subkeys(self) -> list[SubKey]:
        return [
            s
            for p in self.private_keys
            if p.status is KeyStatus.ACTIVE
            for s in p.subkeys
            if s.status is KeyStatus.ACTIVE
        ]

    def all_subkeys(self) -> list[SubKey]:
        return [s for p in self.private_keys for s in p.subkeys]

    def total_recorded_uses(self) -> int:
        return sum(s.use_count for s in self.all_subkeys())

    def select_public_key(self) -> SubKey:
        """Uniformly random active subkey. Does NOT count as a use, so a
        failed session does not burn a key."""
        candidates = self.active_subkeys()
        if not candidates:
            raise PoolError("pool invariant broken: no active subkey")
        return self._rng.choice(candidates)

    def find_private_for(self, public_key: bytes) -> bytes:
        """Decryption key for a public key minted by this pool, active or
        archived (old envelopes must stay decryptable)."""
        try:
            return self._secrets[public_key]
        except KeyError:
            raise UnknownKeyError("public key was not minted by this pool") from None

    def parent_private_id(self, public_key: bytes) -> str:
        try:
            return self._parent_of[public_key]
        except KeyError:
            raise UnknownKeyError("public key was not minted by this pool") from None

    # -- mutation ---------------------------------------------------------

    def record_use(self, subkey: SubKey) -> RotationReport:
        """Count one completed use and apply the threshold rules."""
        if subkey.status is not KeyStatus.ACTIVE:
            raise ArchivedKeyUseError(f"{subkey.subkey_id} is archived")
        entry = next(
            p for p in self.private_keys if p.private_id == subkey.parent_private_id
        )
        if entry.status is not KeyStatus.ACTIVE:
            raise ArchivedKeyUseError(f"{entry.private_id} is archived")

        archived_subkeys: list[str] = []
        minted_subkeys: list[str] = []
        archived_private: list[str] = []
        minted_private: list[str] = []

        subkey.use_count += 1
        if subkey.use_count >= self.public_threshold:
            subkey.status = KeyStatus.ARCHIVED
            archived_subkeys.append(subkey.subkey_id)
            minted_subkeys.append(self._mint_subkey(entry).subkey_id)

        entry.use_count += 1
        if entry.use_count >= self.private_threshold:
            entry.status = KeyStatus.ARCHIVED
            archived_private.append(entry.private_id)
            for s in entry.subkeys:
                if s.status is KeyStatus.ACTIVE:
                    s.status = KeyStatus.ARCHIVED
                    archived_subkeys.append(s.subkey_id)
            fresh = self._mint_private()
            minted_private.append(fresh.private_id)
            minted_subkeys.extend(s.subkey_id for s in fresh.subkeys)

        return RotationReport(
            archived_subkeys=tuple(archived_subkeys),
            minted_subkeys=tuple(minted_subkeys),
            archived_private=tuple(archived_private),
            minted_private=tuple(minted_private),
        )


def create_pool(
    n_private: int,
    m_public_per_private: int,
    public_threshold: int,
    private_threshold: int,
    seed,
) -> KeyPool:
    return KeyPool(n_private, m_public_per_private, public_threshold, private_threshold, seed)
