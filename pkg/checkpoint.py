"""
Model Checkpoints
Little-endian binary: magic "MHGG", format u32, a JSON header block, then named
float32 tensors (name length u32, name, rank u32, dims u32[], payload)
"""

import json
import struct
from dataclasses import asdict
from typing import Dict, Optional, Tuple

import numpy as np

from errors import CheckpointError
from fileutil import atomic_write
from model import ModelConfig, ModelParams

MAGIC = b'MHGG'
FORMAT_VERSION = 1


def _tensor_record(name: str, values: np.ndarray) -> bytes:
    encoded = name.encode('utf-8')
    values = np.asarray(values, dtype='<f4')
    parts = [struct.pack('<I', len(encoded)), encoded, struct.pack('<I', values.ndim)]
    parts.extend(struct.pack('<I', dim) for dim in values.shape)
    parts.append(values.tobytes(order='C'))
    return b''.join(parts)


def checkpoint_bytes(params: ModelParams, grammar_hash: str, extra: Optional[Dict] = None) -> bytes:
    header = {
        'grammar_hash': grammar_hash,
        'num_rules': params.decoder.num_rules,
        'model_config': asdict(params.config),
        'extra': extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')

    records = [_tensor_record(name, t.data) for name, t in params.named_parameters()]
    records.extend(_tensor_record(name, getattr(stats, attr)) for name, stats, attr in params.named_buffers())

    return b''.join([
        MAGIC,
        struct.pack('<I', FORMAT_VERSION),
        struct.pack('<I', len(header_bytes)),
        header_bytes,
        struct.pack('<I', len(records)),
    ] + records)


def save_checkpoint(path: str, params: ModelParams, grammar_hash: str, extra: Optional[Dict] = None):
    atomic_write(path, checkpoint_bytes(params, grammar_hash, extra))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError('checkpoint is truncated')
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack('<I', self.take(4))[0]


def load_checkpoint(path: str, expected_grammar_hash: Optional[str] = None) -> Tuple[ModelParams, Dict]:
    """
    Rebuild ModelParams from a checkpoint file

    Raises CheckpointError on a bad file, or when expected_grammar_hash is given
    and differs from the hash recorded at save time.
    """
    with open(path, 'rb') as f:
        reader = _Reader(f.read())

    if reader.take(4) != MAGIC:
        raise CheckpointError(f'{path} is not an MHG checkpoint')
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f'unsupported checkpoint format {version}')
    try:
        header = json.loads(reader.take(reader.u32()).decode('utf-8'))
        config = ModelConfig(**header['model_config'])
        num_rules = int(header['num_rules'])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f'bad checkpoint header: {e}') from e

    if expected_grammar_hash is not None and header.get('grammar_hash') != expected_grammar_hash:
        raise CheckpointError(
            f'checkpoint was trained on grammar {header.get("grammar_hash", "?")[:12]}, '
            f'not {expected_grammar_hash[:12]}')

    tensors = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode('utf-8')
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(shape)
        tensors[name] = values.astype(np.float64)
    if reader.offset != len(reader.data):
        raise CheckpointError('trailing bytes after the last tensor')

    params = ModelParams.init(config, num_rules, seed=0)
    targets = [(name, t, None) for name, t in params.named_parameters()]
    targets.extend((name, stats, attr) for name, stats, attr in params.named_buffers())
    for name, owner, attr in targets:
        if name not in tensors:
            raise CheckpointError(f'checkpoint is missing tensor {name}')
        values = tensors.pop(name)
        current = owner.data if attr is None else getattr(owner, attr)
        if values.shape != current.shape:
            raise CheckpointError(f'tensor {name} has shape {values.shape}, expected {current.shape}')
        if attr is None:
            owner.data = values
        else:
            setattr(owner, attr, values)
    if tensors:
        raise CheckpointError(f'unexpected tensors in checkpoint: {sorted(tensors)[:3]}')
    return params, header
