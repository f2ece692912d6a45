"""
Utils
"""

# Standard Library
import hashlib
import json
import zlib
from typing import Any
from typing import Dict

# 3rd party
import numpy as np
import yaml
from yaml.loader import SafeLoader


def load_config(config_file: str) -> Dict[str, Any]:
    """
    Load an experiment configuration from a yaml or json file.

    Json is a subset of yaml, so the same loader serves both formats.

    :param config_file: path to the configuration file.
    :return: configuration mapping (empty if the file is empty).
    """
    with open(config_file, "r", encoding="utf-8") as file_pointer:
        data = yaml.load(file_pointer, Loader=SafeLoader)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{config_file}: top level must be a mapping")
    return data


def dump_json(data: Any, path: str) -> None:
    """
    Write ``data`` as indented json, keys sorted, trailing newline.
    """
    with open(path, "w", encoding="utf-8") as file_pointer:
        json.dump(data, file_pointer, indent=2, sort_keys=True)
        file_pointer.write("\n")


def sha256_bytes(data: bytes) -> str:
    """
    >>> sha256_bytes(b"")[:12]
    'e3b0c44298fc'
    """
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str) -> str:
    """
    Hash a file in chunks.

    :param path: path to the file.
    :return: hex digest.
    """
    digest = hashlib.sha256()
    with open(path, "rb") as file_pointer:
        for block in iter(lambda: file_pointer.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def substream_seed(seed: int, name: str) -> int:
    """
    Derive the seed of a named random sub-stream (``init``, ``data_order``,
    ``sampling``...) from the master seed.

    The derivation only depends on ``seed`` and ``name``, so every component
    can be reproduced on its own.

    >>> substream_seed(42, "init") == substream_seed(42, "init")
    True
    >>> substream_seed(42, "init") == substream_seed(42, "data_order")
    False
    """
    sequence = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def rng_for(seed: int, name: str) -> np.random.Generator:
    """
    Random generator for the named sub-stream of ``seed``.
    """
    return np.random.default_rng(substream_seed(seed, name))


def _human_readable_time(seconds: float) -> str:
    """
    Convert seconds to a human-readable time.

    >>> _human_readable_time(0)
    '0s'
    >>> _human_readable_time(61)
    '1m 1s'
    >>> _human_readable_time(3601)
    '1h 0m 1s'
    >>> _human_readable_time(90061.123)
    '1d 1h 1m 1s'

    :param seconds: number of seconds.
    :return: human-readable time.
    """
    minutes, seconds = divmod(seconds, 60)
    hours, minutes = divmod(minutes, 60)
    days, hours = divmod(hours, 24)

    if days > 0:
        return f"{days:.0f}d {hours:.0f}h {minutes:.0f}m {seconds:.0f}s"
    if hours > 0:
        return f"{hours:.0f}h {minutes:.0f}m {seconds:.0f}s"
    if minutes > 0:
        return f"{minutes:.0f}m {seconds:.0f}s"
    return f"{seconds:.0f}s"


def eta_message(done: int, total: int, elapsed: float) -> str:
    """
    Progress string with elapsed time and estimated time to completion.

    >>> eta_message(1, 4, 10.0)
    '10s: 1/4 (25.00%) ETA: 30s'
    """
    progress = done / total if total else 1.0
    eta = (elapsed / done) * (total - done) if done else 0.0
    return f"{_human_readable_time(elapsed)}: {done:,}/{total:,} ({progress:.2%}) ETA: {_human_readable_time(eta)}"
