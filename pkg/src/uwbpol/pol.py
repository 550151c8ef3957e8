"""Proof-of-location handshake.

A UAV broadcasts a position claim as a ledger transaction; the ground
platform ranges it over UWB using session codes pre-shared through the
ledger, estimates its position by multilateration, and commits a verdict
comparing claim and estimate against an error buffer. Both sides run as
pure state machines fed by ledger events, radio frames, and timers; the
orchestrator in run_session wires them to a concrete ledger and channel.
"""

from __future__ import annotations

import math
import random
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

from .errors import (
    ChaincodeError,
    AssetConflictError,
    AssetNotFoundError,
    InsufficientRangesError,
    ProtocolViolationError,
    UnauthorizedError,
    ValidationUnavailableError,
)
from .geo import AnchorSet, EstimateResult, Position, RangeMeasurement, distance, multilaterate
from .ledger import (
    Asset,
    AssetChaincode,
    ChannelEvent,
    DEFAULT_CHANNEL,
    Identity,
    Ledger,
    Transaction,
    lps,
    read_lps,
)
from .uwb import ChannelModel, FrameType, RadioNode, RangingFrame, measure_target

TX_POL_REQUEST = "POL_REQUEST"
TX_POL_VERDICT = "POL_VERDICT"

DEFAULT_BUFFER_M = 1.0
POLL_TIMEOUT_NS = 500_000_000  # 500 ms of simulated time
MAX_RETRIES = 3
RANGING_ROUNDS = 200  # poll/response rounds pooled into one position estimate

SESSION_ASSET_PREFIX = "pol-session-"


class SessionState(Enum):
    INIT = "INIT"
    REQUESTED = "REQUESTED"
    POLLING = "POLLING"
    RANGING = "RANGING"
    VALIDATING = "VALIDATING"
    AUTHORIZED = "AUTHORIZED"
    REJECTED = "REJECTED"
    ABORTED = "ABORTED"


TERMINAL_STATES = frozenset(
    {SessionState.AUTHORIZED, SessionState.REJECTED, SessionState.ABORTED}
)


@dataclass(frozen=True)
class LocationClaim:
    """The position a UAV says it occupies, e.g. from its GNSS receiver."""

    position: Position
    timestamp: int
    source_tag: str = "gnss-sim"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    claim_to_estimate_distance: float
    error_radius: float
    buffer: float
    likelihood: float

    def __post_init__(self):
        if not 0.0 <= self.likelihood <= 1.0:
            raise ValueError(f"likelihood must be in [0, 1], got {self.likelihood!r}")


# -- wire payloads -------------------------------------------------------------

@dataclass(frozen=True)
class PolRequest:
    session_id: bytes
    uav_id: str
    platform_id: str
    code_uav: bytes
    code_platform: bytes
    claim: LocationClaim


def encode_pol_request(req: PolRequest) -> bytes:
    c = req.claim
    return (
        req.session_id
        + lps(req.uav_id)
        + lps(req.platform_id)
        + req.code_uav
        + req.code_platform
        + struct.pack(">dddd", c.position.x, c.position.y, c.position.z, float(c.timestamp))
    )


def decode_pol_request(payload: bytes) -> PolRequest:
    if len(payload) < 16:
        raise ValueError("request payload too short")
    session_id = payload[:16]
    uav_id, off = read_lps(payload, 16)
    platform_id, off = read_lps(payload, off)
    if off + 32 + 32 > len(payload):
        raise ValueError("truncated request payload")
    code_uav = payload[off:off + 16]
    code_platform = payload[off + 16:off + 32]
    off += 32
    x, y, z, ts = struct.unpack_from(">dddd", payload, off)
    off += 32
    if off != len(payload):
        raise ValueError("trailing bytes in request payload")
    return PolRequest(session_id, uav_id, platform_id, code_uav, code_platform,
                      LocationClaim(Position(x, y, z), int(ts)))


def encode_pol_verdict(session_id: bytes, verdict: Verdict) -> bytes:
    return (
        session_id
        + (b"\x01" if verdict.accepted else b"\x00")
        + struct.pack(
            ">dddd",
            verdict.claim_to_estimate_distance,
            verdict.error_radius,
            verdict.buffer,
            verdict.likelihood,
        )
    )


def decode_pol_verdict(payload: bytes) -> tuple[bytes, Verdict]:
    if len(payload) != 16 + 1 + 32:
        raise ValueError(f"verdict payload must be 49 bytes, got {len(payload)}")
    session_id = payload[:16]
    flag = payload[16]
    if flag not in (0, 1):
        raise ValueError(f"invalid accepted flag {flag:#04x}")
    d, er, buf, lik = struct.unpack_from(">dddd", payload, 17)
    return session_id, Verdict(bool(flag), d, er, buf, lik)


# -- session codes -------------------------------------------------------------

def generate_codes(rng: random.Random) -> tuple[bytes, bytes]:
    """Draw the per-session identification codes for UAV and platform."""
    code_uav = rng.randbytes(16)
    code_platform = rng.randbytes(16)
    while code_platform == code_uav:  # pragma: no cover - 2^-128 chance
        code_platform = rng.randbytes(16)
    return code_uav, code_platform


def new_session_id(rng: random.Random) -> bytes:
    return rng.randbytes(16)


# -- validation contract ---------------------------------------------------------

def validate_location(
    claim: LocationClaim,
    estimate: EstimateResult,
    buffer: float,
    sigma_model: float = 0.0,
) -> Verdict:
    """Judge a claim against the ranging estimate.

    Accepts iff the claim-to-estimate distance is within the error buffer.
    The likelihood score is exp(-d^2 / (2 * (sigma_model^2 + error_radius^2)))
    so callers can report a smooth confidence instead of the bare boolean.
    """
    if buffer <= 0:
        raise ValueError("buffer must be > 0")
    if not estimate.converged:
        raise ValidationUnavailableError("estimate did not converge")
    d = distance(claim.position, estimate.position)
    sigma_eff_sq = sigma_model**2 + estimate.error_radius**2
    if sigma_eff_sq > 0:
        likelihood = math.exp(-(d**2) / (2.0 * sigma_eff_sq))
    else:
        likelihood = 1.0 if d == 0.0 else 0.0
    return Verdict(
        accepted=d <= buffer,
        claim_to_estimate_distance=d,
        error_radius=estimate.error_radius,
        buffer=buffer,
        likelihood=likelihood,
    )


# -- chaincode -------------------------------------------------------------------

class PolChaincode:
    """Ledger-side rules for the handshake's two transaction types.

    POL_REQUEST opens a session asset and pins its codes (codes are
    single-use across sessions); POL_VERDICT closes it and must be
    self-consistent, i.e. accepted exactly when distance <= buffer.
    """

    def __init__(self):
        self._seen_codes: set[bytes] = set()

    def handles(self, tx_type: str) -> bool:
        return tx_type in (TX_POL_REQUEST, TX_POL_VERDICT)

    def apply(self, assets: dict[str, Asset], tx: Transaction) -> None:
        if tx.tx_type == TX_POL_REQUEST:
            try:
                req = decode_pol_request(tx.payload)
            except ValueError as exc:
                raise ChaincodeError(f"bad request payload: {exc}") from exc
            asset_id = SESSION_ASSET_PREFIX + req.session_id.hex()
            if asset_id in assets:
                raise AssetConflictError(f"session {req.session_id.hex()} already open")
            if req.code_uav in self._seen_codes or req.code_platform in self._seen_codes:
                raise ChaincodeError("session code reuse rejected")
            self._seen_codes.add(req.code_uav)
            self._seen_codes.add(req.code_platform)
            assets[asset_id] = Asset(asset_id, tx.payload, owner=tx.submitter, version=1)
        elif tx.tx_type == TX_POL_VERDICT:
            try:
                session_id, verdict = decode_pol_verdict(tx.payload)
            except ValueError as exc:
                raise ChaincodeError(f"bad verdict payload: {exc}") from exc
            asset_id = SESSION_ASSET_PREFIX + session_id.hex()
            current = assets.get(asset_id)
            if current is None:
                raise AssetNotFoundError(f"verdict for unknown session {session_id.hex()}")
            if current.version != 1:
                raise ChaincodeError(f"session {session_id.hex()} already closed")
            if verdict.accepted != (verdict.claim_to_estimate_distance <= verdict.buffer):
                raise ChaincodeError("verdict inconsistent with its own distance/buffer")
            assets[asset_id] = Asset(
                asset_id, current.data + tx.payload, current.owner, current.version + 1
            )


def standard_chaincodes():
    """Chaincode set used on the default channel (also for audit replay)."""
    return [AssetChaincode(), PolChaincode()]


# -- state machine events and actions ---------------------------------------------

@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class LedgerEventIn:
    event: ChannelEvent


@dataclass(frozen=True)
class UwbFrameIn:
    frame: RangingFrame


@dataclass(frozen=True)
class RangingResultIn:
    ok: bool
    measurements: tuple[RangeMeasurement, ...] = ()


@dataclass(frozen=True)
class TimeoutIn:
    pass


@dataclass(frozen=True)
class VerdictIn:
    session_id: bytes
    verdict: Verdict


@dataclass(frozen=True)
class SubmitTx:
    tx_type: str
    payload: bytes


@dataclass(frozen=True)
class SendFrame:
    frame: RangingFrame


@dataclass(frozen=True)
class StartRanging:
    pass


@dataclass(frozen=True)
class SetTimer:
    duration_ns: int


@dataclass(frozen=True)
class RecordVerdict:
    verdict: Verdict


@dataclass(frozen=True)
class PolConfig:
    ranging_rounds: int = RANGING_ROUNDS
    poll_timeout_ns: int = POLL_TIMEOUT_NS
    max_retries: int = MAX_RETRIES
    sigma_model: float = 0.0


@dataclass(frozen=True)
class UavContext:
    config: PolConfig
    node_id: str


@dataclass(frozen=True)
class PlatformContext:
    config: PolConfig
    anchor_set: AnchorSet
    poll_src_id: str
    uav_node_id: str
    buffer: float
    dimension: int = 2


@dataclass(frozen=True)
class PolSession:
    """One party's view of a handshake in progress."""

    role: str  # "uav" or "platform"
    session_id: bytes
    uav_id: str
    platform_id: str
    code_uav: bytes
    code_platform: bytes
    state: SessionState = SessionState.INIT
    claim: Optional[LocationClaim] = None
    estimate: Optional[EstimateResult] = None
    verdict: Optional[Verdict] = None
    retries: int = 0
    abort_reason: Optional[str] = None


def _abort(session: PolSession, reason: str) -> PolSession:
    return replace(session, state=SessionState.ABORTED, abort_reason=reason, retries=0)


def _goto(session: PolSession, state: SessionState, **fields) -> PolSession:
    return replace(session, state=state, retries=0, **fields)


def _finish(session: PolSession, verdict: Verdict) -> PolSession:
    state = SessionState.AUTHORIZED if verdict.accepted else SessionState.REJECTED
    return _goto(session, state, verdict=verdict)


def uav_step(session: PolSession, event, ctx: UavContext):
    """UAV-side transition function. Returns (new_session, actions)."""
    cfg = ctx.config
    st = session.state

    if st == SessionState.INIT and isinstance(event, Start):
        payload = encode_pol_request(PolRequest(
            session.session_id, session.uav_id, session.platform_id,
            session.code_uav, session.code_platform, session.claim,
        ))
        return (_goto(session, SessionState.REQUESTED),
                [SubmitTx(TX_POL_REQUEST, payload), SetTimer(cfg.poll_timeout_ns)])

    if st == SessionState.REQUESTED and isinstance(event, LedgerEventIn):
        if event.event.tx_type == TX_POL_REQUEST:
            req = decode_pol_request(event.event.payload)
            if req.session_id == session.session_id:
                return (_goto(session, SessionState.POLLING),
                        [SetTimer(cfg.poll_timeout_ns)])
        raise ProtocolViolationError(st, event)

    if st in (SessionState.POLLING, SessionState.RANGING) and isinstance(event, UwbFrameIn):
        frame = event.frame
        if frame.frame_type is not FrameType.POLL:
            raise ProtocolViolationError(st, event)
        if frame.session_id != session.session_id or frame.code != session.code_platform:
            # Mismatched identity code: stay silent and give up on the session.
            return _abort(session, "code-mismatch"), []
        response = RangingFrame(
            FrameType.RESPONSE, session.session_id,
            ctx.node_id, frame.src_id, session.code_uav,
        )
        return (_goto(session, SessionState.RANGING),
                [SendFrame(response), SetTimer(cfg.poll_timeout_ns)])

    if st == SessionState.RANGING and isinstance(event, RangingResultIn):
        if event.ok:
            return (_goto(session, SessionState.VALIDATING),
                    [SetTimer(cfg.poll_timeout_ns)])
        return session, [SetTimer(cfg.poll_timeout_ns)]

    if st == SessionState.VALIDATING and isinstance(event, VerdictIn):
        if event.session_id != session.session_id:
            raise ProtocolViolationError(st, event)
        return _finish(session, event.verdict), [RecordVerdict(event.verdict)]

    if isinstance(event, TimeoutIn) and st in (
        SessionState.REQUESTED, SessionState.POLLING,
        SessionState.RANGING, SessionState.VALIDATING,
    ):
        if session.retries < cfg.max_retries:
            return (replace(session, retries=session.retries + 1),
                    [SetTimer(cfg.poll_timeout_ns)])
        return _abort(session, "timeout"), []

    raise ProtocolViolationError(st, event)


def platform_step(session: PolSession, event, ctx: PlatformContext):
    """Platform-side transition function. Returns (new_session, actions)."""
    cfg = ctx.config
    st = session.state

    if st == SessionState.INIT and isinstance(event, Start):
        return _goto(session, SessionState.REQUESTED), []

    if st == SessionState.REQUESTED and isinstance(event, LedgerEventIn):
        if event.event.tx_type != TX_POL_REQUEST:
            raise ProtocolViolationError(st, event)
        req = decode_pol_request(event.event.payload)
        poll = RangingFrame(
            FrameType.POLL, req.session_id,
            ctx.poll_src_id, ctx.uav_node_id, req.code_platform,
        )
        armed = replace(
            session,
            session_id=req.session_id,
            uav_id=req.uav_id,
            platform_id=req.platform_id,
            code_uav=req.code_uav,
            code_platform=req.code_platform,
            claim=req.claim,
        )
        return (_goto(armed, SessionState.POLLING),
                [SendFrame(poll), SetTimer(cfg.poll_timeout_ns)])

    if st == SessionState.POLLING and isinstance(event, UwbFrameIn):
        frame = event.frame
        if frame.frame_type is not FrameType.RESPONSE:
            raise ProtocolViolationError(st, event)
        if frame.session_id != session.session_id or frame.code != session.code_uav:
            return _abort(session, "code-mismatch"), []
        return (_goto(session, SessionState.RANGING),
                [StartRanging(), SetTimer(cfg.poll_timeout_ns)])

    if st == SessionState.POLLING and isinstance(event, TimeoutIn):
        if session.retries < cfg.max_retries:
            poll = RangingFrame(
                FrameType.POLL, session.session_id,
                ctx.poll_src_id, ctx.uav_node_id, session.code_platform,
            )
            return (replace(session, retries=session.retries + 1),
                    [SendFrame(poll), SetTimer(cfg.poll_timeout_ns)])
        return _abort(session, "timeout"), []

    if st == SessionState.RANGING and isinstance(event, RangingResultIn):
        if not event.ok:
            if session.retries < cfg.max_retries:
                return (replace(session, retries=session.retries + 1),
                        [StartRanging(), SetTimer(cfg.poll_timeout_ns)])
            return _abort(session, "timeout"), []
        estimate = multilaterate(
            ctx.anchor_set, event.measurements, dimension=ctx.dimension
        )
        if not estimate.converged:
            return _abort(replace(session, estimate=estimate), "validation-unavailable"), []
        verdict = validate_location(session.claim, estimate, ctx.buffer, cfg.sigma_model)
        payload = encode_pol_verdict(session.session_id, verdict)
        return (_goto(session, SessionState.VALIDATING, estimate=estimate),
                [SubmitTx(TX_POL_VERDICT, payload), SetTimer(cfg.poll_timeout_ns)])

    if st == SessionState.RANGING and isinstance(event, TimeoutIn):
        if session.retries < cfg.max_retries:
            return (replace(session, retries=session.retries + 1),
                    [StartRanging(), SetTimer(cfg.poll_timeout_ns)])
        return _abort(session, "timeout"), []

    if st == SessionState.VALIDATING and isinstance(event, VerdictIn):
        if event.session_id != session.session_id:
            raise ProtocolViolationError(st, event)
        return _finish(session, event.verdict), [RecordVerdict(event.verdict)]

    if st == SessionState.VALIDATING and isinstance(event, TimeoutIn):
        if session.retries < cfg.max_retries:
            return (replace(session, retries=session.retries + 1),
                    [SetTimer(cfg.poll_timeout_ns)])
        return _abort(session, "timeout"), []

    raise ProtocolViolationError(st, event)


# -- orchestration ------------------------------------------------------------------

@dataclass(frozen=True)
class UavParty:
    identity: Identity
    node: RadioNode


@dataclass(frozen=True)
class PlatformParty:
    identity: Identity
    anchor_set: AnchorSet
    anchor_nodes: tuple[RadioNode, ...]


@dataclass
class SessionOutcome:
    uav: PolSession
    platform: PolSession
    trace: list = field(default_factory=list)

    @property
    def terminal_state(self) -> SessionState:
        # The platform's view decides the reported outcome; an abort on
        # either side leaves both non-AUTHORIZED.
        if self.uav.state is SessionState.ABORTED or (
            self.platform.state is SessionState.ABORTED
        ):
            return SessionState.ABORTED
        return self.platform.state


class _PartyRuntime:
    def __init__(self, key: str, session: PolSession, step, ctx, identity: Identity):
        self.key = key
        self.session = session
        self.step = step
        self.ctx = ctx
        self.identity = identity
        self.deadline: Optional[int] = None


def run_session(
    uav_party: UavParty,
    platform_party: PlatformParty,
    lg: Ledger,
    channel: ChannelModel,
    claim: LocationClaim,
    session_rng: random.Random,
    buffer: float = DEFAULT_BUFFER_M,
    config: PolConfig = PolConfig(),
    dimension: int = 2,
    poll_tamper: Optional[Callable[[RangingFrame], RangingFrame]] = None,
) -> SessionOutcome:
    """Drive one handshake to a terminal state on both sides.

    poll_tamper, when given, rewrites every platform poll frame before it
    goes on the air (used to model replay attacks on the radio path).
    """
    session_id = new_session_id(session_rng)
    code_uav, code_platform = generate_codes(session_rng)

    uav_rt = _PartyRuntime(
        "uav",
        PolSession("uav", session_id, uav_party.identity.name,
                   platform_party.identity.name, code_uav, code_platform, claim=claim),
        uav_step,
        UavContext(config, uav_party.node.node_id),
        uav_party.identity,
    )
    platform_rt = _PartyRuntime(
        "platform",
        PolSession("platform", b"\x00" * 16, "", platform_party.identity.name,
                   b"\x00" * 16, b"\x00" * 16),
        platform_step,
        PlatformContext(config, platform_party.anchor_set,
                        platform_party.anchor_nodes[0].node_id,
                        uav_party.node.node_id, buffer, dimension),
        platform_party.identity,
    )
    parties = {"uav": uav_rt, "platform": platform_rt}
    subs = {
        "uav": lg.subscribe(DEFAULT_CHANNEL),
        "platform": lg.subscribe(DEFAULT_CHANNEL),
    }
    pending: deque = deque()
    trace: list = []

    def terminal(rt: _PartyRuntime) -> bool:
        return rt.session.state in TERMINAL_STATES

    def dispatch(rt: _PartyRuntime, event) -> None:
        if terminal(rt):
            return
        before = rt.session.state
        rt.session, actions = rt.step(rt.session, event, rt.ctx)
        trace.append((lg.clock.now_ns, rt.key, before.value,
                      type(event).__name__, rt.session.state.value,
                      tuple(type(a).__name__ for a in actions)))
        if terminal(rt):
            rt.deadline = None
        for action in actions:
            execute(rt, action)

    def execute(rt: _PartyRuntime, action) -> None:
        if isinstance(action, SetTimer):
            rt.deadline = lg.clock.now_ns + action.duration_ns
        elif isinstance(action, SubmitTx):
            try:
                lg.submit_transaction(rt.identity, DEFAULT_CHANNEL,
                                      action.tx_type, action.payload)
            except UnauthorizedError:
                rt.session = _abort(rt.session, "unauthorized")
                rt.deadline = None
                trace.append((lg.clock.now_ns, rt.key, rt.session.state.value,
                              "SubmitRejected", SessionState.ABORTED.value, ()))
            except ChaincodeError:
                rt.session = _abort(rt.session, "chaincode-reject")
                rt.deadline = None
        elif isinstance(action, SendFrame):
            frame = replace(action.frame, tx_timestamp=lg.clock.now_ns)
            if poll_tamper is not None and frame.frame_type is FrameType.POLL:
                frame = poll_tamper(frame)
            lg.clock.advance(1_000)  # air time
            if not channel.message_lost():
                other = parties["platform" if rt.key == "uav" else "uav"]
                pending.append((other.key, UwbFrameIn(frame)))
        elif isinstance(action, StartRanging):
            measurements: list[RangeMeasurement] = []
            for _ in range(config.ranging_rounds):
                measurements.extend(measure_target(
                    list(platform_party.anchor_nodes), uav_party.node, channel,
                    rt.session.session_id,
                    code_to_send=rt.session.code_platform,
                    code_expected=rt.session.code_uav,
                ))
            covered = {m.anchor_id for m in measurements}
            if len(covered) >= dimension + 1:
                result = RangingResultIn(True, tuple(measurements))
                pending.append(("uav", RangingResultIn(True)))
                pending.append(("platform", result))
            else:
                pending.append(("platform", RangingResultIn(False)))
        elif isinstance(action, RecordVerdict):
            pass  # the verdict is already part of the session record

    def pump_ledger() -> None:
        # Route committed events to whichever machine is expecting them;
        # events for other sessions or states are simply not for us.
        for key in ("uav", "platform"):
            rt = parties[key]
            for event in subs[key].drain():
                if event.tx_type == TX_POL_REQUEST:
                    if rt.session.state is not SessionState.REQUESTED:
                        continue
                    req = decode_pol_request(event.payload)
                    if key == "uav" and req.session_id != rt.session.session_id:
                        continue
                    pending.append((key, LedgerEventIn(event)))
                elif event.tx_type == TX_POL_VERDICT:
                    sid, verdict = decode_pol_verdict(event.payload)
                    if sid == rt.session.session_id:
                        pending.append((key, VerdictIn(sid, verdict)))

    dispatch(platform_rt, Start())
    dispatch(uav_rt, Start())

    for _ in range(100_000):  # hard stop; honest sessions take a few dozen steps
        pump_ledger()
        if pending:
            key, event = pending.popleft()
            dispatch(parties[key], event)
            continue
        if terminal(uav_rt) and terminal(platform_rt):
            break
        armed = [rt for rt in parties.values() if rt.deadline is not None and not terminal(rt)]
        if not armed:
            # One side finished (or never engaged) and the other has nothing
            # to wait on: close it out.
            for rt in parties.values():
                if not terminal(rt):
                    rt.session = _abort(rt.session, "stalled")
            break
        rt = min(armed, key=lambda r: (r.deadline, r.key))
        lg.clock.advance(max(0, rt.deadline - lg.clock.now_ns))
        rt.deadline = None
        dispatch(rt, TimeoutIn())
    else:
        raise RuntimeError("session did not terminate")

    return SessionOutcome(uav_rt.session, platform_rt.session, trace)
