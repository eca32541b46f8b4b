"""Encrypted push/pull stream pipelines with an emulated enclave boundary."""
from . import dataflow  # registers the built-in transforms
from .enclave import (
    CostModel,
    Direction,
    EnclaveConfig,
    EnclaveSession,
    SealedBlob,
    create_enclave,
    sgxdecrypt,
    sgxencrypt,
    sgxprocess,
)
from .kernels import BACKEND
from .transforms import DEFAULT_REGISTRY, Registry, TransformDef, TransformKind, register_transform
from .wire import Endpoint, Flags, Frame, decode_frame, encode_frame

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CostModel", "DEFAULT_REGISTRY", "Direction", "EnclaveConfig", "EnclaveSession",
    "Endpoint", "Flags", "Frame", "Registry", "SealedBlob", "TransformDef", "TransformKind",
    "create_enclave", "dataflow", "decode_frame", "encode_frame", "register_transform",
    "sgxdecrypt", "sgxencrypt", "sgxprocess",
]
