"""Signing and sealed-envelope primitives.

Every message of value in the simulation travels as a ``SealedEnvelope``:
a symmetric key wrapped to the recipient's public key, the payload
encrypted under that symmetric key, and (optionally) a signature over the
plaintext carried inside the envelope (sign-then-seal, so the final
recipient can check provenance after decryption).

The primitives are real (Ed25519 signatures, X25519 key agreement,
ChaCha20-Poly1305 AEAD) but all randomness is derived deterministically
from caller-supplied seeds so that identical simulation runs produce
byte-identical envelopes.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

SIGNATURE_LEN = 64
PUBLIC_KEY_LEN = 32
_ZERO_NONCE = b"\x00" * 12  # safe: every AEAD key here is single-use


class CryptoError(Exception):
    """Base class for failures in this module."""


class SignatureDecodeError(CryptoError):
    """Signature bytes are malformed (distinct from a verification 'false')."""


class OpenError(CryptoError):
    """An envelope could not be opened."""


class WrongRecipientError(OpenError):
    """The supplied private key does not match the envelope's recipient."""


class IntegrityError(OpenError):
    """Envelope contents were modified after sealing."""


def _sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


@dataclass(frozen=True)
class SigningIdentity:
    """An Ed25519 keypair. ``owner_label`` is simulation metadata only and
    never serialized into envelopes."""

    private_seed: bytes
    public_part: bytes
    owner_label: str = ""

    def __post_init__(self):
        derived = derive_public_part(self.private_seed)
        if derived != self.public_part:
            raise CryptoError("public_part does not match private_seed")


@dataclass(frozen=True)
class Signature:
    bytes_: bytes
    signer_public: bytes


@dataclass(frozen=True)
class EncryptionKeyPair:
    """An X25519 keypair used as a sealing target."""

    private_bytes: bytes
    public_bytes: bytes


@dataclass(frozen=True)
class SealedEnvelope:
    recipient_hint: bytes  # sha256(recipient_pub)[:8], wrong-key detection
    ephemeral_pub: bytes
    wrapped_key: bytes
    ciphertext: bytes


@dataclass(frozen=True)
class OpenedEnvelope:
    plaintext: bytes
    signer_public: Optional[bytes]  # None when the envelope was unsigned
    signature_valid: Optional[bool]  # None when the envelope was unsigned


def derive_public_part(private_seed: bytes) -> bytes:
    key = Ed25519PrivateKey.from_private_bytes(private_seed)
    return key.public_key().public_bytes_raw()


def generate_identity(seed, owner_label: str = "") -> SigningIdentity:
    """Deterministically generate a signing identity from a seed.

    Identical seeds yield byte-identical identities.
    """
    rng = random.Random(seed)
    private_seed = rng.randbytes(32)
    return SigningIdentity(
        private_seed=private_seed,
        public_part=derive_public_part(private_seed),
        owner_label=owner_label,
    )


def generate_encryption_keypair(rng: random.Random) -> EncryptionKeyPair:
    """Draw a fresh X25519 keypair from the given RNG stream."""
    private_bytes = rng.randbytes(32)
    priv = X25519PrivateKey.from_private_bytes(private_bytes)
    return EncryptionKeyPair(
        private_bytes=priv.private_bytes_raw(),
        public_bytes=priv.public_key().public_bytes_raw(),
    )


def sign(payload: bytes, identity: SigningIdentity) -> Signature:
    key = Ed25519PrivateKey.from_private_bytes(identity.private_seed)
    return Signature(bytes_=key.sign(payload), signer_public=identity.public_part)


def verify(payload: bytes, sig: Signature, pub: bytes) -> bool:
    """True iff ``sig`` was produced over exactly ``payload`` by the private
    counterpart of ``pub``. Malformed encodings raise SignatureDecodeError
    rather than returning False."""
    if len(sig.bytes_) != SIGNATURE_LEN:
        raise SignatureDecodeError(
            f"signature must be {SIGNATURE_LEN} bytes, got {len(sig.bytes_)}"
        )
    if len(pub) != PUBLIC_KEY_LEN:
        raise SignatureDecodeError(
            f"verification key must be {PUBLIC_KEY_LEN} bytes, got {len(pub)}"
        )
    try:
        Ed25519PublicKey.from_public_bytes(pub).verify(sig.bytes_, payload)
        return True
    except InvalidSignature:
        return False


def _frame_plaintext(payload: bytes, signer: Optional[SigningIdentity]) -> bytes:
    if signer is None:
        return b"\x00" + payload
    sig = sign(payload, signer)
    return b"\x01" + signer.public_part + sig.bytes_ + payload


def _unframe_plaintext(inner: bytes) -> OpenedEnvelope:
    if not inner:
        raise IntegrityError("empty envelope body")
    flag, rest = inner[0], inner[1:]
    if flag == 0x00:
        return OpenedEnvelope(plaintext=rest, signer_public=None, signature_valid=None)
    if flag != 0x01:
        raise IntegrityError("unknown envelope framing")
    if len(rest) < PUBLIC_KEY_LEN + SIGNATURE_LEN:
        raise IntegrityError("truncated signed envelope body")
    signer_pub = rest[:PUBLIC_KEY_LEN]
    sig_bytes = rest[PUBLIC_KEY_LEN : PUBLIC_KEY_LEN + SIGNATURE_LEN]
    payload = rest[PUBLIC_KEY_LEN + SIGNATURE_LEN :]
    valid = verify(payload, Signature(sig_bytes, signer_pub), signer_pub)
    return OpenedEnvelope(
        plaintext=payload, signer_public=signer_pub, signature_valid=valid
    )


def seal(
    payload: bytes,
    recipient_pub: bytes,
    signer: Optional[SigningIdentity] = None,
) -> SealedEnvelope:
    """Seal ``payload`` to the recipient's public key.

    A pure function of its inputs: the ephemeral key agreement material and
    the single-use symmetric key are both derived from (payload, recipient,
    signer), which keeps whole-run reproducibility without threading an RNG
    through every protocol step.
    """
    signer_pub = signer.public_part if signer is not None else b""
    eph_seed = _sha256(b"dapriv/eph", payload, recipient_pub, signer_pub)
    eph_priv = X25519PrivateKey.from_private_bytes(eph_seed)
    shared = eph_priv.exchange(X25519PublicKey.from_public_bytes(recipient_pub))
    wrap_key = _sha256(b"dapriv/wrap", shared)
    sym_key = _sha256(b"dapriv/sym", payload, recipient_pub, signer_pub)

    inner = _frame_plaintext(payload, signer)
    return SealedEnvelope(
        recipient_hint=_sha256(b"dapriv/hint", recipient_pub)[:8],
        ephemeral_pub=eph_priv.public_key().public_bytes_raw(),
        wrapped_key=ChaCha20Poly1305(wrap_key).encrypt(_ZERO_NONCE, sym_key, None),
        ciphertext=ChaCha20Poly1305(sym_key).encrypt(_ZERO_NONCE, inner, None),
    )


def open_envelope(env: SealedEnvelope, recipient_priv: bytes) -> OpenedEnvelope:
    """Open a sealed envelope with the recipient's private key.

    Raises WrongRecipientError for a non-matching key and IntegrityError for
    any post-seal mutation. A present-but-invalid inner signature does NOT
    raise: the plaintext is returned with ``signature_valid=False`` and the
    caller's policy decides.
    """
    priv = X25519PrivateKey.from_private_bytes(recipient_priv)
    my_pub = priv.public_key().public_bytes_raw()
    if _sha256(b"dapriv/hint", my_pub)[:8] != env.recipient_hint:
        raise WrongRecipientError("envelope was sealed to a different key")
    try:
        eph_pub = X25519PublicKey.from_public_bytes(env.ephemeral_pub)
    except ValueError as exc:
        raise IntegrityError("malformed ephemeral key") from exc
    shared = priv.exchange(eph_pub)
    wrap_key = _sha256(b"dapriv/wrap", shared)
    try:
        sym_key = ChaCha20Poly1305(wrap_key).decrypt(_ZERO_NONCE, env.wrapped_key, None)
        inner = ChaCha20Poly1305(sym_key).decrypt(_ZERO_NONCE, env.ciphertext, None)
    except (InvalidTag, ValueError) as exc:
        raise IntegrityError("envelope failed authentication") from exc
    return _unframe_plaintext(inner)


def new_symmetric_key(rng: random.Random) -> bytes:
    """A fresh single-use symmetric key (e.g. for a result file)."""
    return rng.randbytes(32)


def symmetric_encrypt(key: bytes, plaintext: bytes) -> bytes:
    return ChaCha20Poly1305(key).encrypt(_ZERO_NONCE, plaintext, None)


def symmetric_decrypt(key: bytes, ciphertext: bytes) -> bytes:
    try:
        return ChaCha20Poly1305(key).decrypt(_ZERO_NONCE, ciphertext, None)
    except InvalidTag as exc:
        raise IntegrityError("symmetric ciphertext failed authentication") from exc
