"""Framed device <-> server protocol.

Frame layout (little-endian)::

    magic  'W' 'L'   2 bytes
    type   u8        1=WEIGHTS 2=EPSILONS 3=EXPERIENCE 4=CONTROL
    seq    u32
    len    u32       payload length, at most 16 MiB
    payload
    crc32  u32       over header + payload

Per direction, ``seq`` starts at 1 and increases by exactly one per frame.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from weldloop import qnet

log = logging.getLogger(__name__)

MAGIC = b"WL"
HEADER = struct.Struct("<2sBII")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0
DEFAULT_PORT = 5757

WEIGHTS, EPSILONS, EXPERIENCE, CONTROL = 1, 2, 3, 4

# CONTROL commands
START_EPISODE, ERROR, SHUTDOWN, ACK = 1, 2, 3, 4
# episode modes
MODE_TRAIN, MODE_TEST, MODE_RANDOM = 0, 1, 2

FLAG_TEST = 0x01
FLAG_RANDOM = 0x02


class ProtocolError(Exception):
    pass


class FrameTooLarge(ProtocolError):
    pass


class SessionAborted(Exception):
    """Raised when the peer goes silent; ``resume_episode`` is the first
    episode that did not complete."""

    def __init__(self, message: str, resume_episode: int):
        super().__init__(message)
        self.resume_episode = resume_episode


class DeviceError(ProtocolError):
    pass


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class WeightsMsg:
    policy: qnet.QuantizedPolicy

    @property
    def version(self) -> int:
        return self.policy.version


@dataclass(frozen=True)
class EpsilonsMsg:
    episode_id: int
    values: tuple[float, ...]


@dataclass(frozen=True)
class StepRecord:
    obs_or: float
    obs_oe: float
    action_squashed: float
    power_watts: float


@dataclass(frozen=True)
class ExperienceMsg:
    episode_id: int
    steps: tuple[StepRecord, ...]
    final_obs: tuple[float, float]
    flags: int = 0

    @property
    def is_test(self) -> bool:
        return bool(self.flags & FLAG_TEST)


@dataclass(frozen=True)
class ControlMsg:
    cmd: int
    episode_id: int = 0
    version: int = 0
    mode: int = MODE_TRAIN
    text: str = ""


Message = Union[WeightsMsg, EpsilonsMsg, ExperienceMsg, ControlMsg]

_EPS_HEAD = struct.Struct("<IH")
_EXP_HEAD = struct.Struct("<IH")
_CTRL_HEAD = struct.Struct("<BIIBH")


def f32(x: float) -> float:
    return float(np.float32(x))


def encode_payload(msg: Message) -> tuple[int, bytes]:
    if isinstance(msg, WeightsMsg):
        return WEIGHTS, qnet.to_blob(msg.policy)
    if isinstance(msg, EpsilonsMsg):
        return EPSILONS, _EPS_HEAD.pack(msg.episode_id, len(msg.values)) + np.asarray(msg.values, "<f4").tobytes()
    if isinstance(msg, ExperienceMsg):
        body = np.array([(s.obs_or, s.obs_oe, s.action_squashed, s.power_watts) for s in msg.steps], "<f4")
        return EXPERIENCE, (_EXP_HEAD.pack(msg.episode_id, len(msg.steps)) + body.tobytes()
                            + np.asarray(msg.final_obs, "<f4").tobytes() + bytes([msg.flags]))
    if isinstance(msg, ControlMsg):
        text = msg.text.encode("utf-8")
        return CONTROL, _CTRL_HEAD.pack(msg.cmd, msg.episode_id, msg.version, msg.mode, len(text)) + text
    raise TypeError(f"not a protocol message: {msg!r}")


def decode_payload(msg_type: int, payload: bytes) -> Message:
    try:
        if msg_type == WEIGHTS:
            return WeightsMsg(qnet.from_blob(payload))
        if msg_type == EPSILONS:
            episode, count = _EPS_HEAD.unpack_from(payload)
            if len(payload) != _EPS_HEAD.size + 4 * count:
                raise ProtocolError("EPSILONS length mismatch")
            values = np.frombuffer(payload, "<f4", count, _EPS_HEAD.size)
            return EpsilonsMsg(episode, tuple(float(v) for v in values))
        if msg_type == EXPERIENCE:
            episode, n = _EXP_HEAD.unpack_from(payload)
            if len(payload) != _EXP_HEAD.size + 16 * n + 8 + 1:
                raise ProtocolError("EXPERIENCE length mismatch")
            body = np.frombuffer(payload, "<f4", 4 * n, _EXP_HEAD.size).reshape(n, 4).astype(float)
            final = np.frombuffer(payload, "<f4", 2, _EXP_HEAD.size + 16 * n).astype(float)
            steps = tuple(StepRecord(*row) for row in body.tolist())
            return ExperienceMsg(episode, steps, (final[0], final[1]), payload[-1])
        if msg_type == CONTROL:
            cmd, episode, version, mode, n = _CTRL_HEAD.unpack_from(payload)
            if len(payload) != _CTRL_HEAD.size + n:
                raise ProtocolError("CONTROL length mismatch")
            return ControlMsg(cmd, episode, version, mode, payload[_CTRL_HEAD.size:].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed payload for type {msg_type}: {exc}") from exc
    raise ProtocolError(f"unknown message type {msg_type}")


def encode_frame(msg: Message, seq: int) -> bytes:
    msg_type, payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    head = HEADER.pack(MAGIC, msg_type, seq, len(payload))
    return head + payload + CRC.pack(zlib.crc32(head + payload))


@dataclass
class Frame:
    msg_type: int
    seq: int
    payload: bytes

    def message(self) -> Message:
        return decode_payload(self.msg_type, self.payload)


@dataclass
class FrameDecoder:
    """Incremental decoder.  Never raises on malformed input; problems are
    counted instead (``crc_errors``, ``oversize``, ``skipped_bytes``)."""

    buffer: bytearray = field(default_factory=bytearray)
    crc_errors: int = 0
    oversize: int = 0
    skipped_bytes: int = 0

    def feed(self, data: bytes) -> list[Frame]:
        self.buffer += data
        frames = []
        buf = self.buffer
        pos = 0
        while True:
            start = buf.find(MAGIC, pos)
            if start < 0:
                # keep a trailing 'W' that may begin the next magic
                keep = 1 if buf.endswith(MAGIC[:1]) else 0
                self.skipped_bytes += len(buf) - pos - keep
                pos = len(buf) - keep
                break
            self.skipped_bytes += start - pos
            pos = start
            if len(buf) - pos < HEADER.size:
                break
            _, msg_type, seq, length = HEADER.unpack_from(buf, pos)
            if length > MAX_PAYLOAD:
                self.oversize += 1
                self.skipped_bytes += 1
                pos += 1
                continue
            end = pos + HEADER.size + length + CRC.size
            if len(buf) < end:
                break
            body_end = end - CRC.size
            (crc,) = CRC.unpack_from(buf, body_end)
            if zlib.crc32(buf[pos:body_end]) != crc:
                self.crc_errors += 1
                pos = end
                continue
            frames.append(Frame(msg_type, seq, bytes(buf[pos + HEADER.size:body_end])))
            pos = end
        del buf[:pos]
        return frames


def decode_frames(data: bytes) -> list[tuple[int, Message]]:
    """Decode a complete byte string into ``(seq, message)`` pairs."""
    return [(f.seq, f.message()) for f in FrameDecoder().feed(data)]


def decode_frame(data: bytes) -> tuple[int, Message]:
    frames = FrameDecoder().feed(data)
    if len(frames) != 1:
        raise ProtocolError(f"expected exactly one frame, found {len(frames)}")
    return frames[0].seq, frames[0].message()


# -- transport ------------------------------------------------------------------

_EOF = object()


class Channel:
    """One end of a framed connection.

    A reader thread decodes incoming frames into a bounded queue; when the
    consumer falls behind the reader blocks, which stalls the socket and in
    turn the sender (backpressure).
    """

    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT, queue_size: int = 8):
        self.sock = sock
        self.timeout = timeout
        self.decoder = FrameDecoder()
        self.inbox: queue.Queue = queue.Queue(maxsize=queue_size)
        self.tx_seq = 0
        self.rx_seq = 0
        self.sent: list[tuple[int, int]] = []  # (seq, msg_type) log
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        try:
            while True:
                data = self.sock.recv(65536)
                if not data:
                    break
                for frame in self.decoder.feed(data):
                    self.inbox.put(frame)
                if self.decoder.oversize:
                    self.inbox.put(FrameTooLarge("oversize frame announced by peer"))
                    break
        except OSError as exc:
            self.inbox.put(exc)
        self.inbox.put(_EOF)

    def send(self, msg: Message) -> int:
        with self._send_lock:
            self.tx_seq += 1
            data = encode_frame(msg, self.tx_seq)
            self.sent.append((self.tx_seq, data[2]))
            self.sock.sendall(data)
            return self.tx_seq

    def recv(self, timeout: float | None = None) -> Message:
        try:
            item = self.inbox.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise TimeoutError("no frame received before timeout") from None
        if item is _EOF:
            self.inbox.put(_EOF)
            raise ConnectionError("peer closed the connection")
        if isinstance(item, Exception):
            raise item
        if item.seq != self.rx_seq + 1:
            raise ProtocolError(f"out-of-order frame: seq {item.seq} after {self.rx_seq}")
        self.rx_seq = item.seq
        return item.message()

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def loopback_pair(timeout: float = DEFAULT_TIMEOUT) -> tuple[Channel, Channel]:
    a, b = socket.socketpair()
    return Channel(a, timeout), Channel(b, timeout)


def connect(address: str, timeout: float = DEFAULT_TIMEOUT) -> Channel:
    host, _, port = address.rpartition(":")
    sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
    sock.settimeout(None)
    return Channel(sock, timeout)


def listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def accept(listener: socket.socket, timeout: float = DEFAULT_TIMEOUT) -> Channel:
    listener.settimeout(timeout)
    try:
        sock, _ = listener.accept()
    except socket.timeout:
        raise TimeoutError("no device connected before timeout") from None
    sock.settimeout(None)
    return Channel(sock, timeout)


# -- sessions -------------------------------------------------------------------


class ServerSession:
    """Server side of the episode loop.

    ``trainer`` provides ``weights(episode) -> QuantizedPolicy``,
    ``epsilons(episode) -> sequence of floats``, ``mode(episode) -> int`` and
    ``on_experience(episode, ExperienceMsg)``.
    """

    def __init__(self, channel: Channel, trainer):
        self.channel = channel
        self.trainer = trainer
        self.completed: set[int] = set()
        self.duplicates = 0
        self.experience_count = 0

    def run_episode(self, episode: int) -> ExperienceMsg:
        ch = self.channel
        policy = self.trainer.weights(episode)
        ch.send(WeightsMsg(policy))
        ch.send(EpsilonsMsg(episode, tuple(f32(v) for v in self.trainer.epsilons(episode))))
        ch.send(ControlMsg(START_EPISODE, episode, policy.version, self.trainer.mode(episode)))
        while True:
            try:
                msg = ch.recv()
            except TimeoutError:
                raise SessionAborted(f"device silent during episode {episode}", episode) from None
            if isinstance(msg, ExperienceMsg):
                if msg.episode_id == episode:
                    break
                if msg.episode_id in self.completed:
                    self.duplicates += 1
                    log.warning("ignoring duplicate EXPERIENCE for episode %d", msg.episode_id)
                    continue
                raise ProtocolError(f"EXPERIENCE for episode {msg.episode_id} while running {episode}")
            if isinstance(msg, ControlMsg) and msg.cmd == ERROR:
                raise DeviceError(f"device error in episode {episode}: {msg.text}")
            raise ProtocolError(f"unexpected message {type(msg).__name__} while running episode {episode}")
        self.completed.add(episode)
        self.experience_count += 1
        self.trainer.on_experience(episode, msg)
        return msg

    def run(self, episodes, shutdown: bool = True) -> None:
        for episode in episodes:
            self.run_episode(episode)
        if shutdown:
            self.channel.send(ControlMsg(SHUTDOWN))


def server_session(listener: socket.socket, trainer, episodes, timeout: float = DEFAULT_TIMEOUT) -> ServerSession:
    ch = accept(listener, timeout)
    try:
        session = ServerSession(ch, trainer)
        session.run(episodes)
        return session
    finally:
        ch.close()


class DeviceSession:
    """Device side: applies WEIGHTS, holds fresh EPSILONS and runs an episode on
    START_EPISODE.  ``runtime`` is a :class:`weldloop.device.DeviceRuntime`."""

    def __init__(self, channel: Channel, runtime):
        self.channel = channel
        self.runtime = runtime
        self.pending_eps: EpsilonsMsg | None = None
        self.errors: list[str] = []
        self.versions_seen: list[int] = []

    def _error(self, text: str, episode: int = 0):
        log.warning("device error: %s", text)
        self.errors.append(text)
        self.channel.send(ControlMsg(ERROR, episode, self.runtime.version, text=text))

    def handle(self, msg: Message) -> bool:
        """Process one message; returns False once the server asked to stop."""
        rt = self.runtime
        if isinstance(msg, WeightsMsg):
            if rt.policy is not None and msg.version < rt.version:
                self._error(f"stale weights version {msg.version} < {rt.version}")
            else:
                rt.load(msg.policy)
                self.versions_seen.append(msg.version)
        elif isinstance(msg, EpsilonsMsg):
            if rt.policy is None:
                self._error("EPSILONS before WEIGHTS", msg.episode_id)
            else:
                self.pending_eps = msg
        elif isinstance(msg, ControlMsg):
            if msg.cmd == SHUTDOWN:
                return False
            if msg.cmd != START_EPISODE:
                self._error(f"unexpected control command {msg.cmd}", msg.episode_id)
            elif rt.policy is None or rt.version != msg.version:
                self._error(f"episode {msg.episode_id} needs weights v{msg.version}, have v{rt.version}",
                            msg.episode_id)
            elif self.pending_eps is None or self.pending_eps.episode_id != msg.episode_id:
                self._error(f"no fresh epsilons for episode {msg.episode_id}", msg.episode_id)
            else:
                eps, self.pending_eps = self.pending_eps, None
                try:
                    exp = rt.run_episode(msg.episode_id, eps.values, msg.mode)
                except Exception as exc:  # reported to the server, session continues
                    self._error(str(exc), msg.episode_id)
                else:
                    self.channel.send(exp)
        else:
            self._error(f"unexpected {type(msg).__name__}")
        return True

    def run(self) -> None:
        while True:
            try:
                msg = self.channel.recv()
            except ConnectionError:
                return
            if not self.handle(msg):
                return


def device_session(address: str, runtime, timeout: float = DEFAULT_TIMEOUT) -> DeviceSession:
    ch = connect(address, timeout)
    try:
        session = DeviceSession(ch, runtime)
        session.run()
        return session
    finally:
        ch.close()
