"""Simulated permissioned ledger.

A single in-process ordering service with immediate finality stands in for a
real blockchain network: certificate-based identities issued by a built-in
authority, named channels carrying totally ordered transactions, chaincode
dispatched on commit, and an event feed per subscriber. Signing keys are
derived deterministically from the ledger seed so that a run's audit log is
reproducible byte for byte.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .clock import SimClock
from .errors import (
    AlreadyEnrolledError,
    AssetConflictError,
    AssetNotFoundError,
    ChaincodeError,
    NoSuchChannelError,
    UnauthorizedError,
)

DEFAULT_CHANNEL = "pol"
MEMBERSHIP_CHANNEL = "_members"
ENROLL_TX_TYPE = "ENROLL"
ASSET_CREATE = "ASSET_CREATE"
ASSET_UPDATE = "ASSET_UPDATE"
ASSET_DELETE = "ASSET_DELETE"

CERT_VALIDITY_NS = 365 * 24 * 3600 * 10**9  # one year of simulated time
COMMIT_LATENCY_NS = 1_000_000  # 1 ms per ordered commit


class Role(str, Enum):
    UAV = "UAV"
    PLATFORM = "PLATFORM"
    AUTHORITY = "AUTHORITY"


# -- canonical byte encodings -------------------------------------------------

def lp(data: bytes) -> bytes:
    """Length-prefixed bytes (unsigned 16-bit big-endian prefix)."""
    if len(data) > 0xFFFF:
        raise ValueError("field too long for 16-bit length prefix")
    return struct.pack(">H", len(data)) + data


def lps(text: str) -> bytes:
    return lp(text.encode("utf-8"))


def read_lp(buf: bytes, offset: int) -> tuple[bytes, int]:
    if offset + 2 > len(buf):
        raise ValueError("truncated length prefix")
    (n,) = struct.unpack_from(">H", buf, offset)
    offset += 2
    if offset + n > len(buf):
        raise ValueError("truncated length-prefixed field")
    return buf[offset:offset + n], offset + n


def read_lps(buf: bytes, offset: int) -> tuple[str, int]:
    raw, offset = read_lp(buf, offset)
    return raw.decode("utf-8"), offset


# -- identities ----------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    subject: str
    role: Role
    public_key: bytes
    valid_from: int
    valid_to: int
    issuer_signature: bytes

    def canonical_bytes(self) -> bytes:
        """Everything the issuer signs, in fixed field order."""
        return (
            lps(self.subject)
            + lps(self.role.value)
            + lp(self.public_key)
            + struct.pack(">QQ", self.valid_from, self.valid_to)
        )

    def encode(self) -> bytes:
        return self.canonical_bytes() + lp(self.issuer_signature)

    @staticmethod
    def decode(buf: bytes) -> "Certificate":
        subject, off = read_lps(buf, 0)
        role_name, off = read_lps(buf, off)
        public_key, off = read_lp(buf, off)
        if off + 16 > len(buf):
            raise ValueError("truncated certificate validity window")
        valid_from, valid_to = struct.unpack_from(">QQ", buf, off)
        off += 16
        signature, off = read_lp(buf, off)
        if off != len(buf):
            raise ValueError("trailing bytes after certificate")
        return Certificate(subject, Role(role_name), public_key, valid_from, valid_to, signature)


@dataclass(frozen=True)
class Identity:
    """An enrolled party: certificate plus the locally held signing key."""

    name: str
    role: Role
    public_key: bytes
    certificate: Certificate
    signing_key: Ed25519PrivateKey = field(repr=False, compare=False)

    def sign(self, data: bytes) -> bytes:
        return self.signing_key.sign(data)


@dataclass(frozen=True)
class VerificationResult:
    ok: bool
    reason: str

    def __bool__(self) -> bool:
        return self.ok


# -- ledger records ------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    tx_id: bytes
    channel: str
    tx_type: str
    payload: bytes
    submitter: str
    timestamp: int
    signature: bytes

    def signed_bytes(self) -> bytes:
        return transaction_signed_bytes(self.channel, self.tx_type, self.payload, self.timestamp)


def transaction_signed_bytes(channel: str, tx_type: str, payload: bytes, timestamp: int) -> bytes:
    return lps(channel) + lps(tx_type) + lp(payload) + struct.pack(">Q", timestamp)


def compute_tx_id(channel: str, tx_type: str, payload: bytes, timestamp: int,
                  height: int, submitter: str) -> bytes:
    digest = hashlib.sha256(
        transaction_signed_bytes(channel, tx_type, payload, timestamp)
        + struct.pack(">Q", height)
        + lps(submitter)
    )
    return digest.digest()[:16]


@dataclass(frozen=True)
class ChannelEvent:
    channel: str
    height: int
    tx_type: str
    payload: bytes
    tx_id: bytes


@dataclass(frozen=True)
class Asset:
    asset_id: str
    data: bytes
    owner: str
    version: int


@dataclass(frozen=True)
class Receipt:
    height: int
    tx_id: bytes


class Subscription:
    """In-order, exactly-once feed of committed events for one subscriber."""

    def __init__(self, channel: str, tx_type_filter: Optional[str]):
        self.channel = channel
        self.tx_type_filter = tx_type_filter
        self._queue: deque[ChannelEvent] = deque()

    def _offer(self, event: ChannelEvent) -> None:
        if self.tx_type_filter is None or event.tx_type == self.tx_type_filter:
            self._queue.append(event)

    def poll(self) -> Optional[ChannelEvent]:
        return self._queue.popleft() if self._queue else None

    def drain(self) -> list[ChannelEvent]:
        out = list(self._queue)
        self._queue.clear()
        return out

    def __len__(self) -> int:
        return len(self._queue)


# -- chaincode -----------------------------------------------------------------

class AssetChaincode:
    """Minimal asset CRUD dispatched on commit.

    Handlers validate before mutating, so a rejected transaction leaves the
    state untouched.
    """

    TX_TYPES = (ASSET_CREATE, ASSET_UPDATE, ASSET_DELETE)

    def handles(self, tx_type: str) -> bool:
        return tx_type in self.TX_TYPES

    def apply(self, assets: dict[str, Asset], tx: Transaction) -> None:
        if tx.tx_type == ASSET_CREATE:
            asset_id, data = decode_asset_payload(tx.payload)
            if asset_id in assets:
                raise AssetConflictError(f"asset {asset_id!r} already exists")
            assets[asset_id] = Asset(asset_id, data, owner=tx.submitter, version=1)
        elif tx.tx_type == ASSET_UPDATE:
            asset_id, data = decode_asset_payload(tx.payload)
            current = assets.get(asset_id)
            if current is None:
                raise AssetNotFoundError(f"asset {asset_id!r} not found")
            if current.owner != tx.submitter:
                raise UnauthorizedError(
                    f"{tx.submitter!r} does not own asset {asset_id!r}"
                )
            assets[asset_id] = Asset(asset_id, data, current.owner, current.version + 1)
        elif tx.tx_type == ASSET_DELETE:
            asset_id = decode_asset_delete_payload(tx.payload)
            current = assets.get(asset_id)
            if current is None:
                raise AssetNotFoundError(f"asset {asset_id!r} not found")
            if current.owner != tx.submitter:
                raise UnauthorizedError(
                    f"{tx.submitter!r} does not own asset {asset_id!r}"
                )
            del assets[asset_id]


def encode_asset_payload(asset_id: str, data: bytes) -> bytes:
    return lps(asset_id) + lp(data)


def decode_asset_payload(payload: bytes) -> tuple[str, bytes]:
    asset_id, off = read_lps(payload, 0)
    data, off = read_lp(payload, off)
    if off != len(payload):
        raise ChaincodeError("trailing bytes in asset payload")
    return asset_id, data


def encode_asset_delete_payload(asset_id: str) -> bytes:
    return lps(asset_id)


def decode_asset_delete_payload(payload: bytes) -> str:
    asset_id, off = read_lps(payload, 0)
    if off != len(payload):
        raise ChaincodeError("trailing bytes in asset delete payload")
    return asset_id


# -- the ledger ----------------------------------------------------------------

class _Channel:
    def __init__(self, name: str, admitted_roles: frozenset[Role]):
        self.name = name
        self.admitted_roles = admitted_roles
        self.log: list[Transaction] = []
        self.assets: dict[str, Asset] = {}
        self.subscribers: list[Subscription] = []
        self.chaincodes: list = [AssetChaincode()]


def _derive_signing_key(key_material: bytes, name: str) -> Ed25519PrivateKey:
    seed = hashlib.sha256(key_material + b"|" + name.encode("utf-8")).digest()
    return Ed25519PrivateKey.from_private_bytes(seed)


def _raw_public_bytes(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


class Ledger:
    """Ordering service, membership registry, chaincode host and event hub."""

    def __init__(self, seed: int = 0, clock: Optional[SimClock] = None,
                 authority_name: str = "authority"):
        self.clock = clock if clock is not None else SimClock()
        self._key_material = hashlib.sha256(
            b"uwbpol-ledger-keys|" + int(seed).to_bytes(8, "big", signed=False)
        ).digest()
        self._lock = threading.Lock()
        self._channels: dict[str, _Channel] = {}
        self._registry: dict[str, Certificate] = {}
        self._journal: list[tuple[int, Transaction]] = []  # (height, tx) in commit order

        self.create_channel(MEMBERSHIP_CHANNEL, roles=(Role.AUTHORITY,))
        self.create_channel(DEFAULT_CHANNEL)

        key = _derive_signing_key(self._key_material, authority_name)
        self._authority_key = key
        self._authority_public = _raw_public_bytes(key)
        cert = self._issue_certificate(authority_name, Role.AUTHORITY, self._authority_public)
        self.authority = Identity(authority_name, Role.AUTHORITY, self._authority_public,
                                  cert, key)
        self._registry[authority_name] = cert
        self.submit_transaction(self.authority, MEMBERSHIP_CHANNEL, ENROLL_TX_TYPE, cert.encode())

    # -- identities --

    def _issue_certificate(self, name: str, role: Role, public_key: bytes) -> Certificate:
        valid_from = self.clock.now_ns
        valid_to = valid_from + CERT_VALIDITY_NS
        unsigned = Certificate(name, role, public_key, valid_from, valid_to, b"")
        signature = self._authority_key.sign(unsigned.canonical_bytes())
        return Certificate(name, role, public_key, valid_from, valid_to, signature)

    def enroll_identity(self, name: str, role: Role) -> Identity:
        """Create a fresh keypair and authority-signed certificate for name."""
        with self._lock:
            if name in self._registry:
                raise AlreadyEnrolledError(f"{name!r} is already enrolled")
            key = _derive_signing_key(self._key_material, name)
            public = _raw_public_bytes(key)
            cert = self._issue_certificate(name, role, public)
            self._registry[name] = cert
        identity = Identity(name, role, public, cert, key)
        self.submit_transaction(self.authority, MEMBERSHIP_CHANNEL, ENROLL_TX_TYPE, cert.encode())
        return identity

    def verify_identity(self, cert: Certificate, now_ns: Optional[int] = None) -> VerificationResult:
        """Check issuer signature, validity window and membership."""
        try:
            Ed25519PublicKey.from_public_bytes(self._authority_public).verify(
                cert.issuer_signature, cert.canonical_bytes()
            )
        except (InvalidSignature, ValueError):
            return VerificationResult(False, "unknown-issuer")
        now = self.clock.now_ns if now_ns is None else now_ns
        if now < cert.valid_from:
            return VerificationResult(False, "not-yet-valid")
        if now > cert.valid_to:
            return VerificationResult(False, "expired")
        registered = self._registry.get(cert.subject)
        if registered is None or registered.public_key != cert.public_key:
            return VerificationResult(False, "unknown-subject")
        return VerificationResult(True, "ok")

    # -- channels --

    def create_channel(self, name: str,
                       roles: Iterable[Role] = (Role.UAV, Role.PLATFORM, Role.AUTHORITY)) -> None:
        if name in self._channels:
            raise ValueError(f"channel {name!r} already exists")
        self._channels[name] = _Channel(name, frozenset(roles))

    def _channel(self, name: str) -> _Channel:
        ch = self._channels.get(name)
        if ch is None:
            raise NoSuchChannelError(f"no such channel {name!r}")
        return ch

    def install_chaincode(self, channel: str, chaincode) -> None:
        self._channel(channel).chaincodes.append(chaincode)

    def height(self, channel: str) -> int:
        return len(self._channel(channel).log)

    def transactions(self, channel: str) -> tuple[Transaction, ...]:
        return tuple(self._channel(channel).log)

    # -- transactions --

    def submit_transaction(self, identity: Identity, channel: str, tx_type: str,
                           payload: bytes) -> Receipt:
        """Order, validate, commit, and fan out one transaction."""
        with self._lock:
            verdict = self.verify_identity(identity.certificate)
            if not verdict:
                raise UnauthorizedError(f"identity rejected: {verdict.reason}")
            ch = self._channel(channel)
            if identity.role not in ch.admitted_roles:
                raise UnauthorizedError(
                    f"role {identity.role.value} not admitted to channel {channel!r}"
                )
            timestamp = self.clock.now_ns
            height = len(ch.log) + 1
            signature = identity.sign(
                transaction_signed_bytes(channel, tx_type, payload, timestamp)
            )
            tx = Transaction(
                tx_id=compute_tx_id(channel, tx_type, payload, timestamp, height, identity.name),
                channel=channel,
                tx_type=tx_type,
                payload=payload,
                submitter=identity.name,
                timestamp=timestamp,
                signature=signature,
            )
            for cc in ch.chaincodes:
                if cc.handles(tx_type):
                    cc.apply(ch.assets, tx)  # ChaincodeError aborts the commit
            ch.log.append(tx)
            self._journal.append((height, tx))
            self.clock.advance(COMMIT_LATENCY_NS)
            event = ChannelEvent(channel, height, tx_type, payload, tx.tx_id)
            for sub in ch.subscribers:
                sub._offer(event)
            return Receipt(height, tx.tx_id)

    def subscribe(self, channel: str, tx_type_filter: Optional[str] = None) -> Subscription:
        """New event feed starting at the channel's current height."""
        ch = self._channel(channel)
        sub = Subscription(channel, tx_type_filter)
        ch.subscribers.append(sub)
        return sub

    # -- chaincode state --

    def query_asset(self, channel: str, asset_id: str) -> Asset:
        """Read committed state directly; no transaction is recorded."""
        asset = self._channel(channel).assets.get(asset_id)
        if asset is None:
            raise AssetNotFoundError(f"asset {asset_id!r} not found")
        return asset

    def assets_snapshot(self, channel: str) -> dict[str, Asset]:
        return dict(self._channel(channel).assets)

    # -- audit log --

    def write_audit_log(self, path) -> None:
        """Append-only style dump: one tab-separated record per commit."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for height, tx in self._journal:
                fh.write(format_audit_record(height, tx) + "\n")


def format_audit_record(height: int, tx: Transaction) -> str:
    return "\t".join((
        str(height),
        tx.tx_id.hex(),
        tx.channel,
        tx.tx_type,
        tx.submitter,
        str(tx.timestamp),
        base64.b64encode(tx.payload).decode("ascii"),
        base64.b64encode(tx.signature).decode("ascii"),
    ))


# -- pub/sub bridge --------------------------------------------------------------

class LedgerBridge:
    """Relay between a topic-based pub/sub world and ledger transactions.

    Each mapped topic becomes exactly one transaction per published message;
    each committed transaction of a mapped type comes back out as exactly one
    delivered message. Unmapped topics are dropped with an audit entry.
    """

    def __init__(self, ledger: Ledger, identity: Identity,
                 mappings: dict[str, tuple[str, str]]):
        self.ledger = ledger
        self.identity = identity
        self.mappings = dict(mappings)
        self.dropped: list[tuple[str, bytes]] = []
        self._subs: list[tuple[str, Subscription]] = [
            (topic, ledger.subscribe(channel, tx_type))
            for topic, (channel, tx_type) in self.mappings.items()
        ]

    def publish(self, topic: str, payload: bytes) -> Optional[Receipt]:
        mapping = self.mappings.get(topic)
        if mapping is None:
            self.dropped.append((topic, payload))
            return None
        channel, tx_type = mapping
        return self.ledger.submit_transaction(self.identity, channel, tx_type, payload)

    def poll_delivered(self) -> list[tuple[str, bytes]]:
        out = []
        for topic, sub in self._subs:
            for event in sub.drain():
                out.append((topic, event.payload))
        return out


# -- audit replay -----------------------------------------------------------------

@dataclass
class ReplayResult:
    ok: bool
    records: int
    message: str
    failure_height: Optional[int] = None
    failure_channel: Optional[str] = None
    assets: dict[str, dict[str, Asset]] = field(default_factory=dict)


def replay_audit_log(
    path,
    chaincode_factory: Optional[Callable[[], Sequence]] = None,
) -> ReplayResult:
    """Re-run an audit log from scratch, verifying every record.

    Checks per record: parseability, per-channel height continuity, a
    recomputed tx id, and the submitter's signature under the certificate
    chain reconstructed from ENROLL records (the first of which must be the
    self-signed authority). Chaincode is re-dispatched so the final asset
    state can be compared with the live ledger.
    """
    if chaincode_factory is None:
        chaincode_factory = lambda: [AssetChaincode()]

    registry: dict[str, Certificate] = {}
    authority_public: Optional[bytes] = None
    heights: dict[str, int] = {}
    assets: dict[str, dict[str, Asset]] = {}
    chaincodes: dict[str, Sequence] = {}
    records = 0

    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        return ReplayResult(False, 0, f"cannot read audit log: {exc}")

    if raw and not raw.endswith("\n"):
        # A well-formed log ends every record with a newline.
        return ReplayResult(False, 0, "unexpected end of log (truncated final record)",
                            failure_height=None)

    for lineno, line in enumerate(raw.splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 8:
            return ReplayResult(False, records,
                                f"unexpected end of log (malformed record at line {lineno})")
        try:
            height = int(parts[0])
            tx_id = bytes.fromhex(parts[1])
            channel, tx_type, submitter = parts[2], parts[3], parts[4]
            timestamp = int(parts[5])
            payload = base64.b64decode(parts[6], validate=True)
            signature = base64.b64decode(parts[7], validate=True)
        except (ValueError, binascii.Error) as exc:
            return ReplayResult(False, records,
                                f"unparseable record at line {lineno}: {exc}")

        expected_height = heights.get(channel, 0) + 1
        if height != expected_height:
            return ReplayResult(False, records,
                                f"height gap on channel {channel!r}: got {height}, "
                                f"expected {expected_height}",
                                failure_height=height, failure_channel=channel)

        if compute_tx_id(channel, tx_type, payload, timestamp, height, submitter) != tx_id:
            return ReplayResult(False, records, "tx id mismatch",
                                failure_height=height, failure_channel=channel)

        # Membership bootstraps from ENROLL records.
        if tx_type == ENROLL_TX_TYPE:
            try:
                cert = Certificate.decode(payload)
            except (ValueError, KeyError) as exc:
                return ReplayResult(False, records, f"bad certificate: {exc}",
                                    failure_height=height, failure_channel=channel)
            if authority_public is None:
                if cert.subject != submitter or cert.role is not Role.AUTHORITY:
                    return ReplayResult(False, records,
                                        "first enrollment must be the self-signed authority",
                                        failure_height=height, failure_channel=channel)
                authority_public = cert.public_key
            try:
                Ed25519PublicKey.from_public_bytes(authority_public).verify(
                    cert.issuer_signature, cert.canonical_bytes()
                )
            except (InvalidSignature, ValueError):
                return ReplayResult(False, records, "certificate signature invalid",
                                    failure_height=height, failure_channel=channel)
            registry[cert.subject] = cert

        cert = registry.get(submitter)
        if cert is None:
            return ReplayResult(False, records, f"submitter {submitter!r} not enrolled",
                                failure_height=height, failure_channel=channel)
        try:
            Ed25519PublicKey.from_public_bytes(cert.public_key).verify(
                signature, transaction_signed_bytes(channel, tx_type, payload, timestamp)
            )
        except (InvalidSignature, ValueError):
            return ReplayResult(False, records, "transaction signature invalid",
                                failure_height=height, failure_channel=channel)

        if channel not in chaincodes:
            chaincodes[channel] = chaincode_factory()
            assets[channel] = {}
        tx = Transaction(tx_id, channel, tx_type, payload, submitter, timestamp, signature)
        try:
            for cc in chaincodes[channel]:
                if cc.handles(tx_type):
                    cc.apply(assets[channel], tx)
        except ChaincodeError as exc:
            return ReplayResult(False, records, f"chaincode rejected replayed tx: {exc}",
                                failure_height=height, failure_channel=channel)

        heights[channel] = height
        records += 1

    return ReplayResult(True, records, "ok", assets=assets)
