"""Small torch helpers shared by the trainable modules.

Everything random here flows through an explicit torch.Generator so a model
built twice from the same seed is parameter-identical; none of the code
touches torch's global RNG state.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from . import storage


def make_generator(seed) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def uniform_(tensor, bound, generator) -> None:
    """In-place uniform [-bound, bound] from the given generator."""
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


def init_linear(linear, generator) -> None:
    """Torch's default fan-in uniform init, but from an explicit generator."""
    bound = 1.0 / math.sqrt(linear.weight.shape[1])
    uniform_(linear.weight, bound, generator)
    if linear.bias is not None:
        uniform_(linear.bias, bound, generator)


def init_embedding(embedding, generator, bound=None) -> None:
    if bound is None:
        bound = 1.0 / math.sqrt(embedding.weight.shape[1])
    uniform_(embedding.weight, bound, generator)


def make_optimizer(params, name, lr):
    params = list(params)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def single_thread() -> None:
    """Pin torch to one thread; multi-thread reductions reorder float sums."""
    torch.set_num_threads(1)


def state_to_numpy(module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_module(path, module, meta) -> None:
    """Checkpoint = json meta + the module's state dict, via the binary format."""
    storage.write_tensors(path, meta, state_to_numpy(module))


def load_module(path, module):
    """Restore a state dict saved by save_module into `module`; returns meta.

    Shape mismatches surface as errors from load_state_dict rather than
    being silently broadcast.
    """
    meta, arrays = storage.read_tensors(path)
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)
    return meta
