"""
Binary checkpoint files.

Layout (all integers little-endian):

    magic        6 bytes  b"PIPMM\\0"
    version      u16
    config       u32 length + UTF-8 JSON
    parameters   u32 count, then per parameter:
                   u16 name length + UTF-8 name, u8 requires_grad,
                   u8 ndim, ndim x u32 dims, float64 payload
    optimizer    u32 length + UTF-8 JSON hyperparameters (0 = none),
                 then the m and v buffers in the parameter layout
    rng          u32 length + UTF-8 JSON bit-generator state (0 = none)
    step         u64

Loading parses the whole file before anything is applied to a model.
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from ..core.nn import Module
from ..core.optim import OptimizerState
from ..errors import ContractError, FormatError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"PIPMM\0"
VERSION = 1

OPTIMIZER_FIELDS = ('beta1', 'beta2', 'eps', 'lr', 'mode', 'step')

ArrayTable = Dict[str, np.ndarray]


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    params: ArrayTable
    requires_grad: Dict[str, bool]
    optimizer: Optional[OptimizerState] = None
    rng_state: Optional[Dict[str, Any]] = None
    step: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def restore(self, model: Module) -> Module:
        """Load weights and freeze flags into ``model``."""
        model.load_state_dict(self.params)
        for name, p in model.named_parameters():
            p.requires_grad = self.requires_grad[name]
        return model

    def rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack('<' + fmt, *values))

    def blob(self, data: bytes, width: str = 'I') -> None:
        self.pack(width, len(data))
        self.parts.append(data)

    def json(self, value: Any) -> None:
        self.blob(b'' if value is None else json.dumps(value, sort_keys=True).encode('utf-8'))

    def arrays(self, table: ArrayTable, flags: Optional[Dict[str, bool]] = None) -> None:
        self.pack('I', len(table))
        for name, arr in table.items():
            arr = np.ascontiguousarray(arr, dtype='<f8')
            self.blob(name.encode('utf-8'), 'H')
            self.pack('B', int(flags[name]) if flags else 0)
            self.pack('B', arr.ndim)
            for dim in arr.shape:
                self.pack('I', dim)
            self.parts.append(arr.tobytes())

    def getvalue(self) -> bytes:
        return b''.join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack('<' + fmt, self.take(struct.calcsize('<' + fmt), what))

    def blob(self, what: str, width: str = 'I') -> bytes:
        (length,) = self.unpack(width, what)
        return self.take(length, what)

    def json(self, what: str) -> Any:
        start = self.offset
        raw = self.blob(what)
        if not raw:
            return None
        try:
            return json.loads(raw.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"invalid {what} JSON: {e}", offset=start) from None

    def arrays(self, what: str) -> Tuple[ArrayTable, Dict[str, bool]]:
        (count,) = self.unpack('I', what)
        table: ArrayTable = OrderedDict()
        flags: Dict[str, bool] = {}
        for _ in range(count):
            start = self.offset
            try:
                name = self.blob(what, 'H').decode('utf-8')
            except UnicodeDecodeError:
                raise FormatError(f"invalid {what} name", offset=start) from None
            flag, ndim = self.unpack('BB', what)
            shape = tuple(self.unpack('I', what)[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            payload = self.take(8 * size, f"{what} {name}")
            table[name] = np.frombuffer(payload, dtype='<f8').reshape(shape).astype(np.float64)
            flags[name] = bool(flag)
        return table, flags


def _optimizer_state(hyper: Any, m: ArrayTable, v: ArrayTable, offset: int) -> OptimizerState:
    if not isinstance(hyper, dict):
        raise FormatError("optimizer hyperparameters must be a JSON object", offset=offset)
    unknown = sorted(set(hyper) - set(OPTIMIZER_FIELDS))
    if unknown:
        raise FormatError(f"unknown optimizer hyperparameters {unknown}", offset=offset)
    if 'lr' not in hyper:
        raise FormatError("optimizer hyperparameters lack a learning rate", offset=offset)
    try:
        return OptimizerState(m=dict(m), v=dict(v), **hyper)
    except ContractError as e:
        raise FormatError(f"invalid optimizer state: {e}", offset=offset) from None


def save_checkpoint(model: Module, path: Union[str, Path], config: Dict[str, Any] = None,
                    optimizer: Optional[OptimizerState] = None,
                    rng: Optional[np.random.Generator] = None, step: int = 0) -> None:
    """Write ``model`` (weights, freeze flags) plus training state to ``path``."""
    writer = _Writer()
    writer.parts.append(MAGIC)
    writer.pack('H', VERSION)
    writer.json(config or {})

    params = OrderedDict((n, p.data) for n, p in model.named_parameters())
    writer.arrays(params, {n: p.requires_grad for n, p in model.named_parameters()})

    if optimizer is None:
        writer.json(None)
    else:
        writer.json({key: getattr(optimizer, key) for key in OPTIMIZER_FIELDS})
        writer.arrays(OrderedDict(sorted(optimizer.m.items())))
        writer.arrays(OrderedDict(sorted(optimizer.v.items())))

    writer.json(None if rng is None else rng.bit_generator.state)
    writer.pack('Q', step)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    tmp.write_bytes(writer.getvalue())
    os.replace(tmp, path)
    logger.debug("saved checkpoint %s (%d parameters)", path, len(params))


def load_checkpoint(path: Union[str, Path], model: Optional[Module] = None) -> Checkpoint:
    """
    Parse a checkpoint file.

    When ``model`` is given the weights and freeze flags are restored into
    it, but only after the whole file has been validated.
    """
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(len(MAGIC), 'magic')
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    (version,) = reader.unpack('H', 'version')
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    config = reader.json('config') or {}
    params, flags = reader.arrays('parameters')

    optimizer = None
    hyper_offset = reader.offset
    hyper = reader.json('optimizer')
    if hyper is not None:
        m, _ = reader.arrays('optimizer m')
        v, _ = reader.arrays('optimizer v')
        optimizer = _optimizer_state(hyper, m, v, hyper_offset)

    rng_state = reader.json('rng')
    (step,) = reader.unpack('Q', 'step')
    if reader.offset != len(reader.data):
        raise FormatError("trailing bytes after checkpoint", offset=reader.offset)

    checkpoint = Checkpoint(config, params, flags, optimizer, rng_state, step)
    if model is not None:
        own = dict(model.named_parameters())
        for name, arr in params.items():
            if name in own and own[name].shape != arr.shape:
                raise ShapeError(f"checkpoint parameter {name} has shape {arr.shape}, "
                                 f"model has {own[name].shape}", arr.shape, own[name].shape)
        checkpoint.restore(model)
    return checkpoint
