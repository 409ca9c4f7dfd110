"""Site summary schema and the site -> coordinator exchange (files or TCP).

A site transmits only its blip estimates, their standard deviations and the
reparametrization rows that link each estimate to the global blip
parameters. Documents are canonical JSON so the coordinator sees identical
bytes whichever transport delivered them.

Wire format for TCP: every frame is a 4-byte big-endian length followed by
canonical JSON. A session is::

    site -> HELLO {protocol_version, fingerprint, site_id}
    coord -> ACK | NACK{code}          (NACK closes the session)
    site -> SUMMARY {summary}          (repeatable)
    coord -> ACK | NACK{code}
    site -> BYE
"""

from __future__ import annotations

import json
import logging
import math
import os
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0
SUMMARY_SUFFIX = ".summary.json"


class RejectCode:
    MALFORMED = "MALFORMED"
    VERSION_MISMATCH = "VERSION_MISMATCH"
    MODEL_MISMATCH = "MODEL_MISMATCH"
    DEGENERATE_SD = "DEGENERATE_SD"
    BAD_MAP_ROW = "BAD_MAP_ROW"
    DUPLICATE_SITE = "DUPLICATE_SITE"
    UNEXPECTED_FRAME = "UNEXPECTED_FRAME"


class SummaryRejected(ValueError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class CollectionError(RuntimeError):
    """The coordinator did not receive every expected site summary."""


@dataclass(frozen=True)
class SummaryEntry:
    label: str
    estimate: float
    sd: float
    map_row: tuple[tuple[int, float], ...]

    def weights(self) -> dict[int, float]:
        return dict(self.map_row)


@dataclass(frozen=True)
class SiteSummary:
    site_id: str
    model_fingerprint: str
    n_obs: int
    dof: int
    entries: tuple[SummaryEntry, ...]
    protocol_version: int = PROTOCOL_VERSION

    def __post_init__(self):
        entries = tuple(sorted(
            (SummaryEntry(e.label, float(e.estimate), float(e.sd),
                          tuple(sorted((int(k), float(w)) for k, w in e.map_row)))
             for e in self.entries),
            key=lambda e: e.label))
        object.__setattr__(self, "entries", entries)

    def to_dict(self) -> dict:
        return {
            "protocol_version": self.protocol_version,
            "site_id": self.site_id,
            "model_fingerprint": self.model_fingerprint,
            "n_obs": self.n_obs,
            "dof": self.dof,
            "entries": [
                {"label": e.label, "estimate": e.estimate, "sd": e.sd,
                 "map_row": [{"psi_index": k, "weight": w} for k, w in e.map_row]}
                for e in self.entries
            ],
        }


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


def encode_summary(summary: SiteSummary) -> bytes:
    return canonical_json(summary.to_dict())


def _parse(doc: bytes | str | Mapping) -> Mapping:
    if isinstance(doc, Mapping):
        return doc
    try:
        obj = json.loads(doc)
    except (ValueError, UnicodeDecodeError) as e:
        raise SummaryRejected(RejectCode.MALFORMED, f"not JSON: {e}") from None
    if not isinstance(obj, dict):
        raise SummaryRejected(RejectCode.MALFORMED, "top level must be an object")
    return obj


def decode_summary(doc: bytes | str | Mapping) -> SiteSummary:
    """Parse without fingerprint checking; structural problems still reject."""
    d = _parse(doc)
    try:
        version = d["protocol_version"]
        if not isinstance(version, int) or isinstance(version, bool):
            raise SummaryRejected(RejectCode.MALFORMED, "protocol_version must be an integer")
        if version != PROTOCOL_VERSION:
            raise SummaryRejected(RejectCode.VERSION_MISMATCH,
                                  f"got {version}, expected {PROTOCOL_VERSION}")
        entries = []
        for e in d["entries"]:
            row = tuple((int(m["psi_index"]), float(m["weight"])) for m in e["map_row"])
            entries.append(SummaryEntry(str(e["label"]), float(e["estimate"]), float(e["sd"]), row))
        summary = SiteSummary(
            site_id=str(d["site_id"]),
            model_fingerprint=str(d["model_fingerprint"]),
            n_obs=int(d["n_obs"]),
            dof=int(d["dof"]),
            entries=tuple(entries),
            protocol_version=version,
        )
    except SummaryRejected:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SummaryRejected(RejectCode.MALFORMED, f"bad field: {e}") from None
    return summary


def validate_summary(doc: bytes | str | Mapping | SiteSummary, expected_fingerprint: str,
                     n_psi: int | None = None) -> SiteSummary:
    s = doc if isinstance(doc, SiteSummary) else decode_summary(doc)
    if s.protocol_version != PROTOCOL_VERSION:
        raise SummaryRejected(RejectCode.VERSION_MISMATCH, str(s.protocol_version))
    if s.model_fingerprint != expected_fingerprint:
        raise SummaryRejected(RejectCode.MODEL_MISMATCH,
                              f"site {s.site_id} fitted {s.model_fingerprint}")
    if not s.entries:
        raise SummaryRejected(RejectCode.MALFORMED, "no entries")
    if len({e.label for e in s.entries}) != len(s.entries):
        raise SummaryRejected(RejectCode.MALFORMED, "duplicate entry labels")
    if s.n_obs < 1 or s.dof < 1:
        raise SummaryRejected(RejectCode.MALFORMED, "n_obs and dof must be positive")
    for e in s.entries:
        if not (math.isfinite(e.estimate) and math.isfinite(e.sd)):
            raise SummaryRejected(RejectCode.MALFORMED, f"non-finite value in {e.label}")
        if e.sd <= 0:
            raise SummaryRejected(RejectCode.DEGENERATE_SD, f"{e.label} has sd {e.sd}")
        if not e.map_row or all(w == 0 for _, w in e.map_row):
            raise SummaryRejected(RejectCode.BAD_MAP_ROW, f"{e.label} maps to the zero vector")
        idx = [k for k, _ in e.map_row]
        if len(set(idx)) != len(idx) or min(idx) < 0 or (n_psi is not None and max(idx) >= n_psi):
            raise SummaryRejected(RejectCode.BAD_MAP_ROW, f"{e.label} has invalid psi indices")
    return s


def transmitted_scalars(summary: SiteSummary) -> int:
    """Count of numeric leaves in the encoded document."""
    def count(x) -> int:
        if isinstance(x, bool):
            return 0
        if isinstance(x, (int, float)):
            return 1
        if isinstance(x, dict):
            return sum(count(v) for v in x.values())
        if isinstance(x, list):
            return sum(count(v) for v in x)
        return 0
    return count(json.loads(encode_summary(summary)))


# -- file exchange ---------------------------------------------------------

def write_summary(summary: SiteSummary, directory: str | Path) -> Path:
    path = Path(directory) / f"{summary.site_id}{SUMMARY_SUFFIX}"
    path.write_bytes(encode_summary(summary))
    return path


def read_summary_dir(directory: str | Path, expected_fingerprint: str,
                     n_psi: int | None = None) -> list[SiteSummary]:
    out: dict[str, SiteSummary] = {}
    for path in sorted(Path(directory).glob(f"*{SUMMARY_SUFFIX}")):
        s = validate_summary(path.read_bytes(), expected_fingerprint, n_psi)
        if s.site_id in out:
            raise SummaryRejected(RejectCode.DUPLICATE_SITE, f"{s.site_id} in {path.name}")
        out[s.site_id] = s
    return [out[k] for k in sorted(out)]


# -- framing ---------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, obj: Any) -> None:
    raw = canonical_json(obj)
    sock.sendall(struct.pack(">I", len(raw)) + raw)


def recv_frame(sock: socket.socket) -> dict | None:
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (n,) = struct.unpack(">I", header)
    if n > MAX_FRAME:
        raise SummaryRejected(RejectCode.MALFORMED, f"frame of {n} bytes exceeds limit")
    body = _recv_exact(sock, n)
    if body is None:
        return None
    obj = _parse(body)
    return dict(obj)


def timeout_from_env(default: float = DEFAULT_TIMEOUT) -> float:
    raw = os.environ.get("BLIPMETA_TIMEOUT_SECS")
    return float(raw) if raw else default


# -- coordinator -----------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        coord: Coordinator = self.server.coordinator  # type: ignore[attr-defined]
        sock = self.request
        sock.settimeout(coord.timeout)
        try:
            hello = recv_frame(sock)
            if hello is None:
                return
            if hello.get("type") != "HELLO":
                send_frame(sock, {"type": "NACK", "code": RejectCode.UNEXPECTED_FRAME})
                return
            if hello.get("protocol_version") != PROTOCOL_VERSION:
                send_frame(sock, {"type": "NACK", "code": RejectCode.VERSION_MISMATCH})
                return
            if hello.get("fingerprint") != coord.fingerprint:
                send_frame(sock, {"type": "NACK", "code": RejectCode.MODEL_MISMATCH})
                return
            send_frame(sock, {"type": "ACK"})
            while True:
                frame = recv_frame(sock)
                if frame is None or frame.get("type") == "BYE":
                    return
                if frame.get("type") != "SUMMARY":
                    send_frame(sock, {"type": "NACK", "code": RejectCode.UNEXPECTED_FRAME})
                    continue
                try:
                    summary = validate_summary(frame.get("summary", {}), coord.fingerprint,
                                               coord.n_psi)
                    coord.register(summary)
                except SummaryRejected as e:
                    send_frame(sock, {"type": "NACK", "code": e.code, "detail": e.detail})
                else:
                    send_frame(sock, {"type": "ACK", "site_id": summary.site_id})
        except (OSError, SummaryRejected) as e:
            log.warning("session from %s ended: %s", self.client_address, e)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Coordinator:
    """Accept site sessions until ``expected`` summaries arrive or the site timeout expires."""

    def __init__(self, expected: int, fingerprint: str, host: str = "127.0.0.1", port: int = 0,
                 timeout: float | None = None, allow_partial: bool = False,
                 n_psi: int | None = None):
        self.expected = expected
        self.fingerprint = fingerprint
        self.timeout = timeout_from_env() if timeout is None else float(timeout)
        self.allow_partial = allow_partial
        self.n_psi = n_psi
        self._summaries: dict[str, SiteSummary] = {}
        self._cond = threading.Condition()
        self._server = _Server((host, port), _Handler)
        self._server.coordinator = self
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def register(self, summary: SiteSummary) -> None:
        with self._cond:
            if summary.site_id in self._summaries:
                raise SummaryRejected(RejectCode.DUPLICATE_SITE, summary.site_id)
            if len(self._summaries) >= self.expected:
                raise SummaryRejected(RejectCode.UNEXPECTED_FRAME, "collection is full")
            self._summaries[summary.site_id] = summary
            self._cond.notify_all()

    def start(self) -> "Coordinator":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def wait(self) -> list[SiteSummary]:
        with self._cond:
            seen = -1
            while len(self._summaries) < self.expected:
                if len(self._summaries) != seen:
                    seen = len(self._summaries)
                    deadline = time.monotonic() + self.timeout
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(remaining)
            got = dict(self._summaries)
        missing = self.expected - len(got)
        if missing:
            if not self.allow_partial:
                raise CollectionError(f"{missing} of {self.expected} sites missing after "
                                      f"{self.timeout:g}s")
            log.warning("proceeding with %d of %d sites (%d missing)", len(got),
                        self.expected, missing)
        return [got[k] for k in sorted(got)]

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def collect(expected: int, fingerprint: str, host: str = "127.0.0.1", port: int = 0,
            timeout: float | None = None, allow_partial: bool = False,
            n_psi: int | None = None, on_ready=None) -> list[SiteSummary]:
    with Coordinator(expected, fingerprint, host, port, timeout, allow_partial, n_psi) as coord:
        if on_ready is not None:
            on_ready(coord.address)
        return coord.wait()


def serve_site(address: tuple[str, int], summaries: Iterable[SiteSummary],
               fingerprint: str | None = None, timeout: float | None = None,
               protocol_version: int = PROTOCOL_VERSION) -> list[dict]:
    """Push summaries to a coordinator; returns the coordinator's reply per frame.

    The first reply answers HELLO. If it is a NACK nothing else is sent.
    """
    summaries = list(summaries)
    if fingerprint is None:
        fingerprint = summaries[0].model_fingerprint
    timeout = timeout_from_env() if timeout is None else timeout
    replies = []
    with socket.create_connection(address, timeout=timeout) as sock:
        send_frame(sock, {"type": "HELLO", "protocol_version": protocol_version,
                          "fingerprint": fingerprint,
                          "site_id": summaries[0].site_id if summaries else ""})
        reply = recv_frame(sock) or {"type": "NACK", "code": "CLOSED"}
        replies.append(reply)
        if reply.get("type") != "ACK":
            return replies
        for s in summaries:
            send_frame(sock, {"type": "SUMMARY", "summary": s.to_dict()})
            replies.append(recv_frame(sock) or {"type": "NACK", "code": "CLOSED"})
        send_frame(sock, {"type": "BYE"})
    return replies
