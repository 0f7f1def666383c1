"""Append-only message log shared by the protocol and the cost simulator.

Every communicating operation records its messages here; all byte and
latency figures are later derived from these records alone.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

C2C = "C2C"
S2C = "S2C"
C2S = "C2S"
OFFLINE = "OFFLINE"
CHANNELS = (C2C, S2C, C2S, OFFLINE)


@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    channel: str
    nbytes: int
    tag: str = ""
    phase: str = "train"
    session: str = ""


@dataclass
class Transcript:
    messages: list[Message] = field(default_factory=list)

    def record(self, sender: str, receiver: str, channel: str, nbytes: int,
               tag: str = "", phase: str = "train", session: str = "") -> Message:
        if channel not in CHANNELS:
            raise ValueError(f"unknown channel {channel!r}")
        if nbytes < 0:
            raise ValueError("negative payload")
        msg = Message(sender, receiver, channel, int(nbytes), tag, phase, session)
        self.messages.append(msg)
        return msg

    def extend(self, other: Transcript) -> None:
        self.messages.extend(other.messages)

    def __iter__(self) -> Iterator[Message]:
        return iter(self.messages)

    def __len__(self) -> int:
        return len(self.messages)

    def bytes_by_channel(self) -> dict[str, int]:
        out = dict.fromkeys(CHANNELS, 0)
        for m in self.messages:
            out[m.channel] += m.nbytes
        return out

    def total_bytes(self, channel: str | None = None, tag: str | None = None) -> int:
        return sum(m.nbytes for m in self.messages
                   if (channel is None or m.channel == channel)
                   and (tag is None or m.tag == tag))

    def count(self, channel: str | None = None, tag: str | None = None) -> int:
        return sum(1 for m in self.messages
                   if (channel is None or m.channel == channel)
                   and (tag is None or m.tag == tag))

    def tag_counts(self) -> Counter:
        return Counter(m.tag for m in self.messages)


@dataclass
class Link:
    """A two-party channel view onto a transcript.

    ``endpoints[j]`` is the name of party ``j``. Secure primitives use
    :meth:`exchange` for a symmetric opening (one message each way).
    ``reverse_channel`` labels the party-1-to-party-0 direction when it
    differs, e.g. a client/server pair uses C2S one way and S2C the other.
    """

    transcript: Transcript
    endpoints: tuple[str, str] = ("P0", "P1")
    channel: str = C2C
    session: str = ""
    phase: str = "train"
    dealer: str = "dealer"
    reverse_channel: str | None = None

    def exchange(self, nbytes_each: int, tag: str) -> None:
        a, b = self.endpoints
        back = self.reverse_channel or self.channel
        self.transcript.record(a, b, self.channel, nbytes_each, tag, self.phase, self.session)
        self.transcript.record(b, a, back, nbytes_each, tag, self.phase, self.session)

    def offline(self, nbytes_each: int, tag: str) -> None:
        """Dealer-to-party correlated randomness, metered separately."""
        for p in self.endpoints:
            self.transcript.record(self.dealer, p, OFFLINE, nbytes_each, tag, "offline", self.session)
