"""
Checkpoint directories.

    <dir>/manifest.json          config, step, RNG state, shapes, blob index
    <dir>/<param_path>.f32       row-major little-endian float32 parameter values
    <dir>/adam.m.<param_path>.f32, adam.v.<param_path>.f32   optimizer moments
    <dir>/vocab.txt              the vocabulary the ids refer to

Saving is canonical (sorted JSON, fixed byte order), so save -> load -> save reproduces
every file byte for byte.
"""

import os
import logging
from dataclasses import dataclass

import numpy as np

from app import autograd as ag
from app.config import ModelConfig, TrainConfig
from app.errors import CheckpointError
from app.model import ModelParams, parameter_census, shape_manifest
from app.utils import ensure_dir, get_file_size, read_json, safe_file_operation, sanitize_filename, write_json
from app.vocab import load_vocab

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.txt"
BLOB_DTYPE = np.dtype("<f4")


@dataclass
class OptimState:
    """Adam moments per parameter plus the update counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6


@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: OptimState
    step: int
    rng: np.random.Generator
    vocab: object
    train_config: TrainConfig = None
    path: str = None


def init_optim_state(params, beta1=0.9, beta2=0.98, eps=1e-6):
    return OptimState(
        m={name: np.zeros_like(t.data) for name, t in params.items()},
        v={name: np.zeros_like(t.data) for name, t in params.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def blob_name(param_path, prefix=""):
    return sanitize_filename(f"{prefix}{param_path}") + ".f32"


def _write_blob(path, array):
    with open(path, "wb") as handle:
        handle.write(np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes())


def _read_blob(path, shape):
    array = np.fromfile(path, dtype=BLOB_DTYPE)
    expected = int(np.prod(shape))
    if array.size != expected:
        raise CheckpointError(f"{path}: holds {array.size} values, manifest shape {shape} needs {expected}")
    return array.reshape(shape).astype(np.float32)


def rng_state(rng):
    return rng.bit_generator.state


def rng_from_state(state):
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


@safe_file_operation
def save_checkpoint(directory, params, opt_state, step, rng, vocab, train_config=None):
    """
    Writes a checkpoint directory.

    Args:
        directory (str): Target directory (created if missing).
        params (ModelParams): Parameters to store.
        opt_state (OptimState): Adam moments and counter.
        step (int): Completed training steps.
        rng (np.random.Generator): The training RNG; its state is restored on load.
        vocab (Vocab): Vocabulary the model ids refer to.
        train_config (TrainConfig): The run configuration, if any.

    Returns:
        str: The checkpoint directory.
    """
    ensure_dir(directory)
    blobs = {}
    moments = {"m": {}, "v": {}}
    for name, tensor in params.items():
        blobs[name] = blob_name(name)
        _write_blob(os.path.join(directory, blobs[name]), tensor.data)
        for kind, store in (("m", opt_state.m), ("v", opt_state.v)):
            moments[kind][name] = blob_name(name, prefix=f"adam.{kind}.")
            _write_blob(os.path.join(directory, moments[kind][name]), store[name])
    vocab.save(os.path.join(directory, VOCAB_NAME))

    manifest = {
        "format": FORMAT_VERSION,
        "step": int(step),
        "model": params.config.model_dump(mode="json"),
        "train_config": None if train_config is None else train_config.model_dump(mode="json"),
        "census": parameter_census(params.config),
        "shapes": shape_manifest(params),
        "params": blobs,
        "moments": moments,
        "optimizer": {
            "step": int(opt_state.step),
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
        },
        "rng_state": rng_state(rng),
        "vocab": VOCAB_NAME,
        "vocab_tags": vocab.num_tags,
    }
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    write_json(manifest_path, manifest)
    logging.info(
        f"Saved checkpoint at step {step} to {directory} "
        f"({get_file_size(manifest_path) + sum(get_file_size(os.path.join(directory, b)) for b in blobs.values()):.2f} MB)"
    )
    return directory


@safe_file_operation
def load_checkpoint(directory):
    """
    Restores everything `save_checkpoint` wrote.

    Returns:
        Checkpoint: params (requires_grad set), optimizer state, step, RNG, vocab, config.
    """
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"{directory} is not a checkpoint directory (no {MANIFEST_NAME})")
    manifest = read_json(manifest_path)
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format')}")

    config = ModelConfig.model_validate(manifest["model"])
    tensors = {}
    for name, filename in manifest["params"].items():
        shape = tuple(manifest["shapes"][name])
        tensors[name] = ag.Tensor(_read_blob(os.path.join(directory, filename), shape), requires_grad=True, name=name)
    params = ModelParams(tensors, config)
    if parameter_census(config)["total"] != params.num_parameters():
        raise CheckpointError(f"{directory}: parameter count does not match the model config")

    optimizer = manifest["optimizer"]
    opt_state = OptimState(
        m={name: _read_blob(os.path.join(directory, f), params[name].shape) for name, f in manifest["moments"]["m"].items()},
        v={name: _read_blob(os.path.join(directory, f), params[name].shape) for name, f in manifest["moments"]["v"].items()},
        step=optimizer["step"],
        beta1=optimizer["beta1"],
        beta2=optimizer["beta2"],
        eps=optimizer["eps"],
    )
    vocab = load_vocab(os.path.join(directory, manifest["vocab"]), num_tags=manifest.get("vocab_tags", 0))
    if len(vocab) != config.vocab_size:
        raise CheckpointError(f"{directory}: vocab has {len(vocab)} tokens, model expects {config.vocab_size}")
    train_config = None if manifest["train_config"] is None else TrainConfig.model_validate(manifest["train_config"])
    logging.info(f"Loaded checkpoint from {directory} at step {manifest['step']}")
    return Checkpoint(
        params=params,
        opt_state=opt_state,
        step=manifest["step"],
        rng=rng_from_state(manifest["rng_state"]),
        vocab=vocab,
        train_config=train_config,
        path=directory,
    )
