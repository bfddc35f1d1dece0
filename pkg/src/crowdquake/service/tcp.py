"""Newline-delimited JSON over TCP: signal ingest and the outbound warning feed."""

from __future__ import annotations

import asyncio
import json
import logging
from collections import Counter

from .engine import DetectionEngine, warning_line

log = logging.getLogger(__name__)

YIELD_EVERY = 512


def parse_address(addr: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        host, port = default_host, addr
    try:
        port_no = int(port)
    except ValueError:
        raise ValueError(f"bad address {addr!r}; expected host:port") from None
    if not 0 <= port_no < 65536:
        raise ValueError(f"port out of range in {addr!r}")
    return host or default_host, port_no


class IngestServer:
    """Accepts any number of ingest connections. Each line is one signal;
    at end of input the server answers with a single acknowledgement line
    ``{"accepted": n, "rejected": m, "codes": {...}}``."""

    def __init__(self, engine: DetectionEngine, feed_queue: int = 1000):
        self.engine = engine
        self.feed_queue = feed_queue
        self._servers: list[asyncio.base_events.Server] = []
        self.ingest_address: tuple[str, int] | None = None
        self.feed_address: tuple[str, int] | None = None

    async def start(self, listen: str | None, feed: str | None = None) -> None:
        if listen:
            host, port = parse_address(listen)
            srv = await asyncio.start_server(self._handle_ingest, host, port)
            self._servers.append(srv)
            self.ingest_address = srv.sockets[0].getsockname()[:2]
            log.info("ingest listening on %s:%s", *self.ingest_address)
        if feed:
            host, port = parse_address(feed)
            srv = await asyncio.start_server(self._handle_feed, host, port)
            self._servers.append(srv)
            self.feed_address = srv.sockets[0].getsockname()[:2]
            log.info("warning feed on %s:%s", *self.feed_address)

    async def stop(self) -> None:
        for srv in self._servers:
            srv.close()
            await srv.wait_closed()
        self._servers.clear()

    async def _handle_ingest(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        accepted = 0
        codes: Counter = Counter()
        n = 0
        try:
            while True:
                try:
                    line = await reader.readline()
                except ValueError:  # line longer than the stream limit
                    codes["parse_error"] += 1
                    self.engine.rejects["parse_error"] += 1
                    continue
                if not line:
                    break
                if not line.strip():
                    continue
                _, code = self.engine.ingest_line(line)
                if code is None:
                    accepted += 1
                else:
                    codes[code] += 1
                n += 1
                if n % YIELD_EVERY == 0:
                    await asyncio.sleep(0)
            ack = {"accepted": accepted, "rejected": sum(codes.values()), "codes": dict(codes)}
            writer.write((json.dumps(ack) + "\n").encode())
            await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            log.info("ingest connection dropped after %d lines", n)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass

    async def _handle_feed(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        queue: asyncio.Queue = asyncio.Queue(maxsize=self.feed_queue)

        def push(warning: dict) -> None:
            # slow subscribers lose their oldest warnings, never the detector
            if queue.full():
                queue.get_nowait()
            queue.put_nowait(warning)

        self.engine.listeners.append(push)
        try:
            while True:
                warning = await queue.get()
                writer.write((warning_line(warning) + "\n").encode())
                await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self.engine.listeners.remove(push)
            writer.close()


def send_lines(host: str, port: int, lines, timeout: float = 60.0) -> dict:
    """Blocking client: stream ``lines`` to an ingest server and return its ack."""
    import socket

    with socket.create_connection((host, port), timeout=timeout) as sock:
        buf = []
        size = 0
        for line in lines:
            b = (line.rstrip("\n") + "\n").encode()
            buf.append(b)
            size += len(b)
            if size > 1 << 16:
                sock.sendall(b"".join(buf))
                buf, size = [], 0
        if buf:
            sock.sendall(b"".join(buf))
        sock.shutdown(socket.SHUT_WR)
        data = bytearray()
        while True:
            chunk = sock.recv(4096)
            if not chunk:
                break
            data.extend(chunk)
    if not data:
        raise ConnectionError("server closed without acknowledgement")
    return json.loads(data.split(b"\n", 1)[0])
