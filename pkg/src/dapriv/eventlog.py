"""Ordered audit log.

Every interaction in a run is appended here with a monotonically
increasing logical timestamp. The line-delimited rendering (timestamp,
sender, receiver, message-type, session_id, payload-digest) is the audit
surface for the invariant sweeps; ``meta`` carries the structured view of
what the receiver actually learned, which is the adversary's only legal
source of observations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional


@dataclass(frozen=True)
class LogEvent:
    timestamp: int
    sender: str
    receiver: str
    message_type: str
    session_id: Optional[str]
    payload_digest: str
    meta: dict = field(default_factory=dict)

    def to_line(self) -> str:
        return json.dumps(
            {
                "timestamp": self.timestamp,
                "sender": self.sender,
                "receiver": self.receiver,
                "message_type": self.message_type,
                "session_id": self.session_id,
                "payload_digest": self.payload_digest,
            },
            sort_keys=True,
        )


class EventLog:
    def __init__(self):
        self.events: list[LogEvent] = []

    def append(
        self,
        sender: str,
        receiver: str,
        message_type: str,
        session_id: Optional[str] = None,
        payload: bytes = b"",
        meta: Optional[dict[str, Any]] = None,
    ) -> LogEvent:
        event = LogEvent(
            timestamp=len(self.events),
            sender=sender,
            receiver=receiver,
            message_type=message_type,
            session_id=session_id,
            payload_digest=hashlib.sha256(payload).hexdigest(),
            meta=dict(meta or {}),
        )
        self.events.append(event)
        return event

    def to_lines(self) -> list[str]:
        return [e.to_line() for e in self.events]

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.to_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()
