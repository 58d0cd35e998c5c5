"""
Checkpoint directories: manifest.json plus one raw little-endian float32 blob
per tensor. Loading verifies every blob hash.
"""

import os
import logging
from dataclasses import asdict
from typing import Optional, Tuple

import numpy as np
import torch

from data import TaskProtocol
from errors import CheckpointMismatchError, FormatError
from model import ModelConfig, ModelState
from utils import build_id, read_json, sha256_bytes, write_json

logger = logging.getLogger(__name__)

FORMAT = 'promptpan-checkpoint/1'
MANIFEST = 'manifest.json'


def _model_config(d: dict) -> ModelConfig:
    d = dict(d)
    for key in ('image_size', 'backbone_channels'):
        d[key] = tuple(d[key])
    return ModelConfig(**d)


def save_checkpoint(state: ModelState, protocol: TaskProtocol, directory: str,
                    config_hash: str, extra: Optional[dict] = None) -> dict:
    """Write the state after its current step; returns the manifest."""
    os.makedirs(directory, exist_ok=True)
    tensors = []
    for index, (name, tensor) in enumerate(state.state_dict().items()):
        blob = tensor.detach().cpu().to(torch.float32).numpy().astype('<f4').tobytes()
        file_name = f"{index:04d}.bin"
        with open(os.path.join(directory, file_name), 'wb') as f:
            f.write(blob)
        tensors.append({
            'name': name, 'shape': list(tensor.shape), 'dtype': 'float32',
            'sha256': sha256_bytes(blob), 'file': file_name,
        })

    manifest = {
        'format': FORMAT,
        'config_hash': config_hash,
        'build_id': build_id(),
        'model_config': asdict(state.cfg),
        'protocol': protocol.to_dict(),
        'step': state.num_steps,
        'steps': [
            {'step': ps.step, 'classes': list(ps.local_classes), 'num_prompts': ps.num_prompts}
            for ps in state.prompt_sets
        ],
        'frozen_mask': state.frozen_mask,
        'tensors': tensors,
        'checksum': sha256_bytes(''.join(t['sha256'] for t in tensors).encode()),
        'extra': extra or {},
    }
    write_json(os.path.join(directory, MANIFEST), manifest)
    logger.info(f"Checkpoint step {state.num_steps} written to {directory}")
    return manifest


def read_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise FormatError(f"{directory}: no checkpoint manifest")
    manifest = read_json(path)
    if manifest.get('format') != FORMAT:
        raise FormatError(f"{directory}: unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(directory: str, expected_hash: Optional[str] = None,
                    dtype: torch.dtype = torch.float32) -> Tuple[ModelState, TaskProtocol, dict]:
    """Rebuild the model from a checkpoint; a differing config hash refuses to load."""
    manifest = read_manifest(directory)
    if expected_hash is not None and manifest['config_hash'] != expected_hash:
        raise CheckpointMismatchError(
            f"{directory}: checkpoint config {manifest['config_hash']} differs from {expected_hash}"
        )

    cfg = _model_config(manifest['model_config'])
    state = ModelState(cfg)
    for step in manifest['steps']:
        state._append_step(step['classes'])
        if state.num_prompts(step['step']) != step['num_prompts']:
            raise FormatError(f"{directory}: prompt count mismatch at step {step['step']}")

    loaded = {}
    for entry in manifest['tensors']:
        path = os.path.join(directory, entry['file'])
        if not os.path.exists(path):
            raise FormatError(f"{directory}: missing tensor blob {entry['file']} ({entry['name']})")
        with open(path, 'rb') as f:
            blob = f.read()
        if sha256_bytes(blob) != entry['sha256']:
            raise FormatError(f"{directory}: hash mismatch for tensor {entry['name']}")
        array = np.frombuffer(blob, dtype='<f4').reshape(entry['shape'])
        loaded[entry['name']] = torch.from_numpy(array.copy())
    try:
        state.load_state_dict(loaded, strict=True)
    except RuntimeError as e:
        raise FormatError(f"{directory}: tensors do not fit the model ({e})")

    state.to(dtype)
    for name, frozen in manifest['frozen_mask'].items():
        state.set_frozen(name, frozen)
    protocol = TaskProtocol.from_dict(manifest['protocol'])
    logger.info(f"Checkpoint step {state.num_steps} loaded from {directory}")
    return state, protocol, manifest
