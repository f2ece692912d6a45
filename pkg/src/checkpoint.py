"""
Checkpoint file format.

Layout::

    b"DDCKPT\\x00\\x01"        magic (8 bytes)
    header length           little-endian uint64
    header                  utf-8 json
    payloads                raw little-endian tensors at the declared offsets

The header holds the format version, the ModelConfig, the tokenizer hash,
free training metadata and the tensor table
``name -> {offset, shape, dtype}`` (offsets relative to the end of the
header). Reloading gives back bit-identical tensors.

Usage::

    ckpt = Checkpoint(config, params, tokenizer_hash, {"seed": 0})
    ckpt.save("teacher-0.ckpt")
    same = Checkpoint.load("teacher-0.ckpt")
"""

# Standard Library
import json
import logging
import struct
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Dict

# 3rd party
import numpy as np

# My stuff
from model import ModelConfig
from model import ModelConfigError
from model import ModelParams
from model import check_params
from utils import file_sha256

MAGIC = b"DDCKPT\x00\x01"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    """
    Unreadable, truncated or inconsistent checkpoint file.
    """


@dataclass
class Checkpoint:
    """
    Model parameters plus everything needed to reuse them.

    ``params`` may hold tensors beyond the ModelConfig layout (a classifier
    head, for instance); they are saved and reloaded like the others.
    """

    config: ModelConfig
    params: ModelParams
    tokenizer_hash: str
    metadata: Dict[str, Any] = field(default_factory=dict)

    def header(self) -> Dict[str, Any]:
        """
        Json header with the tensor table.
        """
        tensors = {}
        offset = 0
        for name in sorted(self.params):
            array = self.params[name]
            dtype = np.dtype(array.dtype).newbyteorder("<").str
            if dtype not in _DTYPES:
                raise CheckpointError(f"{name}: unsupported dtype {array.dtype}")
            tensors[name] = {"offset": offset, "shape": list(array.shape), "dtype": dtype}
            offset += array.size * _DTYPES[dtype].itemsize
        return {
            "format_version": FORMAT_VERSION,
            "model_config": self.config.to_dict(),
            "tokenizer_hash": self.tokenizer_hash,
            "metadata": self.metadata,
            "tensors": tensors,
        }

    def save(self, path: str) -> str:
        """
        Write the checkpoint.

        :param path: destination file.
        :return: sha256 of the written file.
        """
        check_params(self.params, self.config)
        header = self.header()
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as file_pointer:
            file_pointer.write(MAGIC)
            file_pointer.write(struct.pack("<Q", len(blob)))
            file_pointer.write(blob)
            for name in sorted(self.params):
                dtype = _DTYPES[header["tensors"][name]["dtype"]]
                file_pointer.write(np.ascontiguousarray(self.params[name], dtype=dtype).tobytes())
        digest = file_sha256(path)
        logging.debug("checkpoint %s written (%d tensors, sha256 %s)", path, len(self.params), digest[:12])
        return digest

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        """
        Read a checkpoint written by ``save``.

        :raise CheckpointError: bad magic, truncated payloads, unknown
            version or inconsistent config.
        """
        try:
            with open(path, "rb") as file_pointer:
                raw = file_pointer.read()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if raw[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        start = len(MAGIC) + 8
        if len(raw) < start:
            raise CheckpointError(f"{path}: truncated header")
        (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : start])
        try:
            header = json.loads(raw[start : start + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupted header") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
        try:
            config = ModelConfig.from_dict(header["model_config"])
        except (ModelConfigError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: invalid model config: {exc}") from exc

        payload = memoryview(raw)[start + header_len :]
        params: ModelParams = {}
        for name, entry in header["tensors"].items():
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise CheckpointError(f"{path}: {name} has unsupported dtype {entry['dtype']}")
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + count * dtype.itemsize
            if end > len(payload):
                raise CheckpointError(f"{path}: {name} payload is truncated")
            array = np.frombuffer(payload[entry["offset"] : end], dtype=dtype).reshape(entry["shape"])
            params[name] = array.astype(dtype.newbyteorder("="), copy=True)
        try:
            check_params(params, config)
        except ModelConfigError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        return cls(config, params, header["tokenizer_hash"], header.get("metadata", {}))


def load_checkpoint(path: str) -> Checkpoint:
    """Shortcut for ``Checkpoint.load``."""
    return Checkpoint.load(path)
