import hashlib
import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from models.schemas import ModelConfig
from services.event_log import ActivityVocabulary
from services.features import FeatureScaler
from services.transformer import ModelParams
from utils.errors import CorruptFile, VersionMismatch
from utils.tensor import Parameter

logger = logging.getLogger(__name__)

MAGIC = b"PRCF"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")  # magic, format version, header length
_CRC = struct.Struct("<I")


@dataclass
class ModelBundle:
    """Everything inference needs, as stored in one model file."""

    config: ModelConfig
    params: ModelParams
    vocabulary: ActivityVocabulary
    scaler: FeatureScaler
    train_fraction: float = 0.8


def config_hash(config: ModelConfig, vocabulary: ActivityVocabulary) -> str:
    canonical = json.dumps(
        {"config": config.model_dump(mode="json"), "vocabulary": list(vocabulary.labels)},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ModelStorage:
    """Reads and writes the single-file model format.

    Layout: magic, u32 version, u32 header length, JSON header, float64 LE
    parameter blobs in manifest order, u32 CRC-32 over everything before it.
    """

    def encode(self, bundle: ModelBundle) -> bytes:
        header = {
            "format_version": FORMAT_VERSION,
            "config": bundle.config.model_dump(mode="json"),
            "vocabulary": list(bundle.vocabulary.labels),
            "scaler": bundle.scaler.to_dict(),
            "train_fraction": bundle.train_fraction,
            "parameters": [[p.name, list(p.shape)] for p in bundle.params],
            "config_hash": config_hash(bundle.config, bundle.vocabulary),
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = b"".join([
            _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)),
            header_bytes,
            *(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in bundle.params),
        ])
        return body + _CRC.pack(zlib.crc32(body))

    def save(self, bundle: ModelBundle, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = self.encode(bundle)
        with tempfile.NamedTemporaryFile(dir=path.parent, prefix=".model-", delete=False) as tmp:
            tmp.write(payload)
            tmp_path = tmp.name
        os.replace(tmp_path, path)
        logger.info(f"✅ Model saved to {path} ({len(payload)} bytes, {bundle.params.num_values()} weights)")
        return path

    def decode(self, payload: bytes, source: str = "<bytes>",
               expected_vocabulary: Optional[ActivityVocabulary] = None) -> ModelBundle:
        if len(payload) < _PREAMBLE.size + _CRC.size:
            raise CorruptFile("file is too short to be a model file", source=source)
        magic, version, header_len = _PREAMBLE.unpack_from(payload, 0)
        if magic != MAGIC:
            raise CorruptFile("not a model file (bad magic bytes)", source=source)
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"format version {version}, this build reads {FORMAT_VERSION}", source=source)
        body, (stored_crc,) = payload[:-_CRC.size], _CRC.unpack_from(payload, len(payload) - _CRC.size)
        if zlib.crc32(body) != stored_crc:
            raise CorruptFile("checksum mismatch", source=source)

        try:
            header = json.loads(body[_PREAMBLE.size:_PREAMBLE.size + header_len].decode("utf-8"))
            config = ModelConfig(**header["config"])
            vocabulary = ActivityVocabulary(header["vocabulary"])
            scaler = FeatureScaler.from_dict(header["scaler"])
        except (ValueError, KeyError) as e:
            raise CorruptFile(f"unreadable header: {e}", source=source)

        if header.get("config_hash") != config_hash(config, vocabulary):
            raise VersionMismatch("config hash does not match the stored config and vocabulary", source=source)
        if expected_vocabulary is not None and expected_vocabulary != vocabulary:
            raise VersionMismatch("model was written under a different vocabulary", source=source)

        offset = _PREAMBLE.size + header_len
        params = []
        for name, shape in header["parameters"]:
            count = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * count > len(body):
                raise CorruptFile(f"parameter {name!r} runs past the end of the file", source=source)
            values = np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(np.float64)
            params.append(Parameter(name, values.reshape(shape)))
            offset += 8 * count
        if offset != len(body):
            raise CorruptFile(f"{len(body) - offset} trailing bytes after the parameters", source=source)

        return ModelBundle(config, ModelParams(params), vocabulary, scaler, float(header["train_fraction"]))

    def load(self, path: Union[str, Path], expected_vocabulary: Optional[ActivityVocabulary] = None) -> ModelBundle:
        path = Path(path)
        logger.info(f"Loading model from {path}")
        bundle = self.decode(path.read_bytes(), str(path), expected_vocabulary)
        logger.info(f"✅ Loaded {bundle.config.task.value} model with {len(bundle.params)} parameter tensors")
        return bundle


def save_params(params: ModelParams, path: Union[str, Path], *, config: ModelConfig,
                vocabulary: ActivityVocabulary, scaler: FeatureScaler, train_fraction: float = 0.8) -> Path:
    return ModelStorage().save(ModelBundle(config, params, vocabulary, scaler, train_fraction), path)


def load_params(path: Union[str, Path]) -> ModelParams:
    return ModelStorage().load(path).params
