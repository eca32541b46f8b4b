"""Emulated trusted execution boundary.

An :class:`EnclaveSession` behaves like an SGX enclave as far as the rest of
the system can observe:

* code is fixed at creation (the transform registry freezes);
* every call crosses a gate that copies data in and out of a pre-reserved
  memory region and charges a modeled crossing cost;
* a hard memory budget bounds what a call may hold at once;
* transforms run with no file, socket or process access;
* data enters and leaves sealed with AES-256-GCM-SIV, the frame identity
  ``(stream_id, seq_no)`` bound as associated data.

The key is provisioned from outside (attestation is assumed done).
"""
from __future__ import annotations

import enum
import itertools
import mmap
import os
import struct
import sys
import threading
import time
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV

from .transforms import (
    DEFAULT_REGISTRY,
    Registry,
    TransformDef,
    TransformKind,
    UnknownTransform,
    apply_transform,
    encode_state,
    register_transform,
)

__all__ = [
    "AuthFailure", "BudgetUnsatisfiable", "CostModel", "Direction", "EnclaveConfig",
    "EnclaveError", "EnclaveSession", "IOViolation", "MemoryBudgetExceeded", "NoKey",
    "NonceReuse", "SealedBlob", "StateHandle", "TransformPanic", "create_enclave",
    "crossing_time", "key_from_env", "register_transform", "seal", "unseal",
]

KiB = 1024
MiB = 1024 * KiB
DEFAULT_MEMORY_BUDGET = 90 * MiB
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
DEFAULT_KEY_ENV = "ENCLAVEFLOW_KEY"

# Stream id reserved for state exports; data streams never use it.
STATE_STREAM = 2**32 - 1


class EnclaveError(Exception):
    pass


class NoKey(EnclaveError):
    pass


class BudgetUnsatisfiable(EnclaveError):
    pass


class MemoryBudgetExceeded(EnclaveError):
    pass


class AuthFailure(EnclaveError):
    pass


class NonceReuse(EnclaveError):
    pass


class TransformPanic(EnclaveError):
    pass


class IOViolation(EnclaveError):
    pass


class Direction(enum.Enum):
    IN = "in"
    IN_OUT = "in_out"


@dataclass(frozen=True)
class CostModel:
    """Crossing-cost parameters, all in seconds.

    Copying back out is cheaper per byte than copying in, so that a round
    trip stays within 1 + per_byte_copy_out / per_byte_copy of a one-way
    copy at every chunk size.
    """

    per_call_overhead: float = 2.35e-6
    per_byte_copy: float = 1.0e-9
    per_byte_copy_out: float = 0.15e-9
    plateau_chunk: int = 64 * KiB

    def __post_init__(self):
        for name in ("per_call_overhead", "per_byte_copy", "per_byte_copy_out", "plateau_chunk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def crossing_time(model: CostModel, nbytes: int, direction: Direction = Direction.IN) -> float:
    """Modeled time of one call moving ``nbytes`` across the boundary."""
    if nbytes < 0:
        raise ValueError("nbytes must be non-negative")
    per_byte = model.per_byte_copy
    if direction is Direction.IN_OUT:
        per_byte += model.per_byte_copy_out
    return model.per_call_overhead + nbytes * per_byte


@dataclass(frozen=True)
class SealedBlob:
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data) -> "SealedBlob":
        data = bytes(data)
        if len(data) < NONCE_SIZE + TAG_SIZE:
            raise AuthFailure("sealed blob shorter than nonce + tag")
        return cls(data[:NONCE_SIZE], data[NONCE_SIZE:-TAG_SIZE], data[-TAG_SIZE:])

    def __len__(self):
        return NONCE_SIZE + len(self.ciphertext) + TAG_SIZE


def frame_identity(stream_id: int, seq_no: int) -> bytes:
    """Nonce and associated data for a frame: u32 stream_id || u64 seq_no."""
    return struct.pack(">IQ", stream_id, seq_no)


def _check_key(key) -> bytes:
    if key is None:
        raise NoKey("no key provisioned")
    key = bytes(key)
    if len(key) != KEY_SIZE:
        raise NoKey(f"key must be {KEY_SIZE} bytes, got {len(key)}")
    return key


def seal(key: bytes, plaintext, stream_id: int, seq_no: int, _aead=None) -> SealedBlob:
    """Encrypt outside any enclave (data owner, or the ENCRYPTED mode)."""
    ident = frame_identity(stream_id, seq_no)
    aead = _aead or AESGCMSIV(_check_key(key))
    out = aead.encrypt(ident, bytes(plaintext), ident)
    return SealedBlob(ident, out[:-TAG_SIZE], out[-TAG_SIZE:])


def unseal(key: bytes, blob: SealedBlob, stream_id: int, seq_no: int, _aead=None) -> bytes:
    aead = _aead or AESGCMSIV(_check_key(key))
    try:
        return aead.decrypt(blob.nonce, blob.ciphertext + blob.tag,
                            frame_identity(stream_id, seq_no))
    except InvalidTag:
        raise AuthFailure("authentication failed") from None


def key_from_env(var: str = DEFAULT_KEY_ENV) -> bytes:
    value = os.environ.get(var)
    if not value:
        raise NoKey(f"environment variable {var} is not set")
    try:
        return _check_key(bytes.fromhex(value.strip()))
    except ValueError:
        raise NoKey(f"{var} must hold {KEY_SIZE} hex-encoded bytes") from None


def generate_key() -> bytes:
    return os.urandom(KEY_SIZE)


@dataclass
class EnclaveConfig:
    key: bytes | None
    memory_budget: int = DEFAULT_MEMORY_BUDGET
    cost: CostModel = field(default_factory=CostModel)
    realistic_delay: bool = False


@dataclass
class EnclaveMetrics:
    calls: int = 0
    encrypt_calls: int = 0
    decrypt_calls: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    simulated_crossing_time: float = 0.0


# --- I/O confinement --------------------------------------------------------
# Audit hooks cannot be removed, so one hook is installed per process and
# consults a thread-local flag set only while a transform runs.
_inside = threading.local()
_hook_lock = threading.Lock()
_hook_installed = False
_BLOCKED_PREFIXES = (
    "open", "socket.", "subprocess.", "os.system", "os.exec", "os.spawn",
    "os.posix_spawn", "os.fork", "os.forkpty", "os.putenv", "os.unsetenv",
    "os.remove", "os.rename", "os.mkdir", "os.rmdir", "os.listdir", "os.scandir",
    "shutil.", "ctypes.dlopen", "urllib.", "http.", "ftplib.", "smtplib.",
)


def _audit(event, args):
    if getattr(_inside, "active", False) and event.startswith(_BLOCKED_PREFIXES):
        raise IOViolation(f"{event} is not available inside the enclave")


def _install_hook():
    global _hook_installed
    with _hook_lock:
        if not _hook_installed:
            sys.addaudithook(_audit)
            _hook_installed = True


class _Arena:
    """Bump allocator over the session's reserved region."""

    def __init__(self, region: mmap.mmap):
        self.region = region
        self.top = 0

    def take(self, nbytes: int) -> memoryview:
        start = self.top
        self.top += nbytes
        return memoryview(self.region)[start:self.top]

    def reset(self):
        self.top = 0


class EnclaveContext:
    """What a transform sees: scratch memory, nothing else."""

    __slots__ = ("_session",)

    def __init__(self, session: "EnclaveSession"):
        self._session = session

    def alloc(self, nbytes: int) -> memoryview:
        self._session._charge(nbytes)
        return self._session._arena.take(nbytes)


class StateHandle:
    """Opaque reference to reducer state kept inside a session."""

    __slots__ = ("_id",)
    _ids = itertools.count(1)

    def __init__(self):
        self._id = next(self._ids)

    def __repr__(self):
        return f"<StateHandle #{self._id}>"


class EnclaveSession:
    """One emulated enclave. Single-threaded: one call at a time."""

    def __init__(self, config: EnclaveConfig, registry: Registry | None = None):
        self.key = _check_key(config.key)
        if config.memory_budget <= 0:
            raise BudgetUnsatisfiable("memory budget must be positive")
        try:
            # Reserve the whole budget up front, as the real EPC requires.
            self._region = mmap.mmap(-1, config.memory_budget)
        except (OSError, OverflowError, ValueError) as exc:
            raise BudgetUnsatisfiable(
                f"cannot reserve {config.memory_budget} bytes: {exc}") from None
        self.config = config
        self.memory_budget = config.memory_budget
        self.transforms = (registry or DEFAULT_REGISTRY).freeze()
        self.metrics = EnclaveMetrics()
        self.used_memory = 0
        self._resident: dict[StateHandle, int] = {}
        self._states: dict[StateHandle, object] = {}
        self._arena = _Arena(self._region)
        self._aead = AESGCMSIV(self.key)
        self._sealed: set[tuple[int, int]] = set()
        self._sleep_debt = 0.0
        _install_hook()

    # -- accounting ------------------------------------------------------
    @property
    def resident_memory(self) -> int:
        return sum(self._resident.values())

    def _charge(self, nbytes: int) -> None:
        if self.used_memory + self.resident_memory + nbytes > self.memory_budget:
            raise MemoryBudgetExceeded(
                f"{nbytes} more bytes would exceed the {self.memory_budget}-byte budget "
                f"({self.used_memory} in use, {self.resident_memory} resident)")
        self.used_memory += nbytes

    def _cross(self, nbytes_in: int, nbytes_out: int) -> None:
        m = self.config.cost
        t = m.per_call_overhead + nbytes_in * m.per_byte_copy + nbytes_out * m.per_byte_copy_out
        self.metrics.simulated_crossing_time += t
        self.metrics.bytes_in += nbytes_in
        self.metrics.bytes_out += nbytes_out
        if self.config.realistic_delay:
            self._sleep_debt += t
            if self._sleep_debt >= 1e-3:
                start = time.perf_counter()
                time.sleep(self._sleep_debt)
                self._sleep_debt -= time.perf_counter() - start

    def _copy_in(self, data) -> memoryview:
        n = len(data)
        self._charge(n)
        view = self._arena.take(n)
        view[:] = data
        return view

    def _encrypt(self, plaintext, stream_id: int, seq_no: int) -> SealedBlob:
        ident = (stream_id, seq_no)
        if ident in self._sealed:
            raise NonceReuse(f"(stream {stream_id}, seq {seq_no}) was already sealed")
        self._sealed.add(ident)
        return seal(self.key, plaintext, stream_id, seq_no, _aead=self._aead)

    # -- ecalls ----------------------------------------------------------
    def sgxencrypt(self, plaintext, stream_id: int, seq_no: int) -> SealedBlob:
        if plaintext is None:
            raise TypeError("plaintext must be bytes-like")
        before = self.used_memory
        try:
            inside = self._copy_in(plaintext)
            blob = self._encrypt(inside, stream_id, seq_no)
            self._charge(len(blob))
        finally:
            self._arena.reset()
            self.used_memory = before
        self.metrics.encrypt_calls += 1
        self._cross(len(plaintext), len(blob))
        return blob

    def sgxdecrypt(self, blob: SealedBlob, stream_id: int, seq_no: int) -> bytes:
        before = self.used_memory
        plaintext = b""
        try:
            inside = self._copy_in(blob.to_bytes())
            plaintext = unseal(self.key, SealedBlob.from_bytes(inside), stream_id, seq_no,
                               _aead=self._aead)
        finally:
            self._arena.reset()
            self.used_memory = before
            self.metrics.decrypt_calls += 1
            self._cross(len(blob), len(plaintext))
        return plaintext

    def sgxprocess(self, transform_name: str, blob: SealedBlob, state: StateHandle | None,
                   stream_id: int, seq_no: int) -> tuple[SealedBlob, StateHandle]:
        """Run a registered transform on a sealed chunk.

        The output is sealed under the same frame identity as the input.
        ``state`` is None on the first call; pass back the returned handle
        on every later call for the same reducer.
        """
        tdef = self.transforms.get(transform_name)
        if tdef is None:
            raise UnknownTransform(f"no transform named {transform_name!r}")
        raw = blob.to_bytes()
        self.metrics.calls += 1
        before = self.used_memory
        out_blob = None
        failure = None
        try:
            self._charge(tdef.memory_hint)
            inside = self._copy_in(raw)
            plaintext = unseal(self.key, SealedBlob.from_bytes(inside), stream_id, seq_no,
                               _aead=self._aead)
            handle = state if state is not None else StateHandle()
            current = self._states[handle] if state is not None else tdef.init()
            try:
                _inside.active = True
                applied = apply_transform(tdef, current, plaintext, EnclaveContext(self))
            except Exception as exc:
                # Keep only the exception type: messages may quote plaintext.
                failure = type(exc).__name__
            finally:
                _inside.active = False
            if failure is None:
                self._charge(len(applied.payload))
                out_blob = self._encrypt(applied.payload, stream_id, seq_no)
                self._states[handle] = applied.state
                # Reducer accumulators stay enclave-side and count against the budget.
                if tdef.kind is TransformKind.REDUCE or applied.state is not None:
                    self._resident[handle] = len(encode_state(applied.state))
        finally:
            self._arena.reset()
            self.used_memory = before
            self._cross(len(raw), len(out_blob) if out_blob is not None else 0)
        if failure is not None:
            raise TransformPanic(f"transform {transform_name!r} failed ({failure})")
        return out_blob, handle

    def seal_state(self, handle: StateHandle, stream_id: int = STATE_STREAM,
                   seq_no: int = 0) -> SealedBlob:
        """Export a reducer's state sealed, for the key holder to open."""
        if handle not in self._states:
            raise KeyError("unknown state handle")
        data = encode_state(self._states[handle])
        blob = self._encrypt(data, stream_id, seq_no)
        self.metrics.encrypt_calls += 1
        self._cross(0, len(blob))
        return blob

    def release_state(self, handle: StateHandle) -> None:
        self._states.pop(handle, None)
        self._resident.pop(handle, None)

    def ecall_copy(self, data, direction: Direction = Direction.IN) -> bytes | None:
        """Copy a buffer in (and back out); used by the chunk-size sweep."""
        before = self.used_memory
        try:
            inside = self._copy_in(data)
            out = bytes(inside) if direction is Direction.IN_OUT else None
        finally:
            self._arena.reset()
            self.used_memory = before
        self.metrics.calls += 1
        self._cross(len(data), len(data) if direction is Direction.IN_OUT else 0)
        return out

    def close(self) -> None:
        self._states.clear()
        self._resident.clear()
        try:
            self._region.close()
        except BufferError:
            # A transform still holds an arena view; the map is freed with it.
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def create_enclave(config: EnclaveConfig, registry: Registry | None = None) -> EnclaveSession:
    return EnclaveSession(config, registry)


def sgxencrypt(session: EnclaveSession, plaintext, stream_id: int, seq_no: int) -> SealedBlob:
    return session.sgxencrypt(plaintext, stream_id, seq_no)


def sgxdecrypt(session: EnclaveSession, blob: SealedBlob, stream_id: int, seq_no: int) -> bytes:
    return session.sgxdecrypt(blob, stream_id, seq_no)


def sgxprocess(session: EnclaveSession, transform_name: str, blob: SealedBlob,
               state: StateHandle | None, stream_id: int, seq_no: int):
    return session.sgxprocess(transform_name, blob, state, stream_id, seq_no)
