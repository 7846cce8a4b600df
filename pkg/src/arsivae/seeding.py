"""Named random substreams derived from a single root seed."""
import hashlib
from typing import Union

import numpy as np
import torch

SeedPart = Union[int, str]


def derive_seed(root: int, *names: SeedPart) -> int:
    """Map (root, name, ...) to a 63-bit seed. Stable across runs and platforms."""
    key = "/".join([str(int(root))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def torch_generator(root: int, *names: SeedPart, device: str = "cpu") -> torch.Generator:
    gen = torch.Generator(device=device)
    gen.manual_seed(derive_seed(root, *names))
    return gen


def numpy_generator(root: int, *names: SeedPart) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
