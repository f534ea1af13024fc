"""
regionspot/services/checkpoint.py - Checkpoint Container

Layout: b"RSPT" | format version (u32 LE) | header length (u64 LE) | JSON header | raw arrays.
The header holds configs, counters and an index table of named little-endian arrays.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch

from regionspot.core.config import AlignmentConfig
from regionspot.core.exceptions import CheckpointError, ShapeError, UnsupportedVersionError
from regionspot.core.logging import get_logger
from regionspot.models.encoders import EncoderSpec, SourceTap
from regionspot.models.fusion import FusionConfig
from regionspot.models.head import RegionSpotHead

logger = get_logger(__name__)

MAGIC = b"RSPT"
FORMAT_VERSION = 1
SUPPORTED_DTYPES = ("<f4", "<u1", "<i8")
_PREAMBLE = struct.Struct("<4sIQ")


# =============================================================================
# ARRAY CONTAINER
# =============================================================================

def encode_array_container(arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> bytes:
    """Serialize named arrays plus a JSON-able meta dict; key order is fixed."""
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        array = np.asarray(arrays[name])
        dtype = array.dtype.newbyteorder("<").str if array.dtype.kind != "u" else "<u1"
        if dtype not in SUPPORTED_DTYPES:
            raise CheckpointError(f"Array '{name}' has unsupported dtype {array.dtype}")
        data = np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset,
                      "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)


def decode_array_container(raw: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Inverse of encode_array_container."""
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError("Container is truncated")
    magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError("Not a RegionSpot array container", details={"magic": magic.hex()})
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"Checkpoint format version {version} is not supported",
            details={"version": version, "supported": [FORMAT_VERSION]},
        )
    start = _PREAMBLE.size
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Container header is unreadable: {exc}") from exc

    data_start = start + header_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        if entry["dtype"] not in SUPPORTED_DTYPES:
            raise CheckpointError(f"Array '{entry['name']}' has unsupported dtype {entry['dtype']}")
        begin = data_start + entry["offset"]
        chunk = raw[begin:begin + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"Array '{entry['name']}' is truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["meta"], arrays


def write_array_container(path: Union[str, Path], arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_array_container(arrays, meta))
    return path


def read_array_container(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    return decode_array_container(Path(path).read_bytes())


# =============================================================================
# CHECKPOINT
# =============================================================================

@dataclass
class Checkpoint:
    """Everything needed to rebuild the head and resume or reproduce a run."""

    encoder_spec: EncoderSpec
    fusion_config: FusionConfig
    alignment: AlignmentConfig
    source_tap: SourceTap
    parameters: Dict[str, np.ndarray]
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_meta: Dict[str, Any] = field(default_factory=dict)
    iteration: int = 0
    stage: int = 0
    rng_state: Optional[np.ndarray] = None
    train_config: Optional[Dict[str, Any]] = None
    version: int = FORMAT_VERSION

    # -------------------------------------------------------------------------
    # Construction
    # -------------------------------------------------------------------------

    @classmethod
    def from_model(
        cls,
        head: RegionSpotHead,
        encoder_spec: EncoderSpec,
        alignment: AlignmentConfig,
        source_tap: SourceTap = SourceTap.TRANSFORMER_DECODER,
        optimizer: Optional[torch.optim.Optimizer] = None,
        iteration: int = 0,
        stage: int = 0,
        generator: Optional[torch.Generator] = None,
        train_config: Optional[Dict[str, Any]] = None,
    ) -> "Checkpoint":
        parameters = {
            name: value.detach().to(torch.float32).cpu().numpy().copy()
            for name, value in head.state_dict().items()
        }
        optimizer_state, optimizer_meta = ({}, {})
        if optimizer is not None:
            optimizer_state, optimizer_meta = _flatten_optimizer(optimizer, head)
        return cls(
            encoder_spec=encoder_spec,
            fusion_config=head.config,
            alignment=alignment,
            source_tap=SourceTap(source_tap),
            parameters=parameters,
            optimizer_state=optimizer_state,
            optimizer_meta=optimizer_meta,
            iteration=iteration,
            stage=stage,
            rng_state=generator.get_state().numpy().copy() if generator is not None else None,
            train_config=train_config,
        )

    def build_head(self) -> RegionSpotHead:
        """Fresh head with this checkpoint's configs and weights."""
        head = RegionSpotHead(
            self.fusion_config,
            d_loc=self.encoder_spec.d_loc,
            d_vil=self.encoder_spec.d_vil,
            temperature_init=self.alignment.temperature_init,
            learn_temperature=self.alignment.learn_temperature,
        )
        self.apply_to(head)
        head.eval()
        return head

    def apply_to(self, head: RegionSpotHead) -> None:
        """Load weights into head; every name and shape is checked before anything is copied."""
        expected = head.state_dict()
        missing = sorted(set(expected) - set(self.parameters))
        unexpected = sorted(set(self.parameters) - set(expected))
        if missing or unexpected:
            raise ShapeError("Checkpoint parameters do not match the model",
                             expected=missing, actual=unexpected,
                             details={"missing": missing, "unexpected": unexpected})
        for name, value in expected.items():
            if tuple(value.shape) != tuple(self.parameters[name].shape):
                raise ShapeError(f"Parameter '{name}' has the wrong shape",
                                 expected=list(value.shape), actual=list(self.parameters[name].shape))
        state = {name: torch.from_numpy(array.copy()) for name, array in self.parameters.items()}
        head.load_state_dict(state, strict=True)

    def optimizer_state_dict(self) -> Dict[str, Any]:
        """Rebuild a torch optimizer state_dict from the flattened arrays."""
        state: Dict[int, Dict[str, torch.Tensor]] = {}
        for key, array in self.optimizer_state.items():
            _, index, slot = key.split(".", 2)
            state.setdefault(int(index), {})[slot] = torch.from_numpy(array.copy())
        groups = []
        for group in self.optimizer_meta.get("param_groups", []):
            group = dict(group)
            if "betas" in group:
                group["betas"] = tuple(group["betas"])
            groups.append(group)
        return {"state": state, "param_groups": groups}

    # -------------------------------------------------------------------------
    # Serialization
    # -------------------------------------------------------------------------

    def _meta(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "encoder_spec": self.encoder_spec.model_dump(mode="json"),
            "fusion_config": self.fusion_config.model_dump(mode="json"),
            "alignment": self.alignment.model_dump(mode="json"),
            "source_tap": self.source_tap.value,
            "iteration": self.iteration,
            "stage": self.stage,
            "optimizer": self.optimizer_meta,
            "train_config": self.train_config,
        }

    def _arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"param.{name}": value for name, value in self.parameters.items()}
        arrays.update({f"optim.{key}": value for key, value in self.optimizer_state.items()})
        if self.rng_state is not None:
            arrays["rng.state"] = self.rng_state.astype(np.uint8)
        return arrays

    def to_bytes(self) -> bytes:
        return encode_array_container(self._arrays(), self._meta())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        meta, arrays = decode_array_container(raw)
        if meta.get("version") != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"Checkpoint version {meta.get('version')} is not supported",
                details={"version": meta.get("version"), "supported": [FORMAT_VERSION]},
            )
        try:
            return cls(
                encoder_spec=EncoderSpec.model_validate(meta["encoder_spec"]),
                fusion_config=FusionConfig.model_validate(meta["fusion_config"]),
                alignment=AlignmentConfig.model_validate(meta["alignment"]),
                source_tap=SourceTap(meta["source_tap"]),
                parameters={k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")},
                optimizer_state={k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")},
                optimizer_meta=meta.get("optimizer") or {},
                iteration=int(meta["iteration"]),
                stage=int(meta["stage"]),
                rng_state=arrays.get("rng.state"),
                train_config=meta.get("train_config"),
            )
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"Checkpoint header is incomplete: {exc}") from exc


def _flatten_optimizer(optimizer: torch.optim.Optimizer, head: RegionSpotHead) -> Tuple[Dict[str, np.ndarray], Dict]:
    state_dict = optimizer.state_dict()
    arrays: Dict[str, np.ndarray] = {}
    for index, slots in state_dict["state"].items():
        for slot, value in slots.items():
            tensor = value if isinstance(value, torch.Tensor) else torch.tensor(value)
            arrays[f"state.{index}.{slot}"] = tensor.detach().to(torch.float32).cpu().numpy().copy()
    groups = []
    for group in state_dict["param_groups"]:
        groups.append({key: (list(value) if isinstance(value, tuple) else value) for key, value in group.items()})
    return arrays, {"type": type(optimizer).__name__, "param_groups": groups}


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write the container atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint.to_bytes())
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path.name} at iteration {checkpoint.iteration}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())
