"""File formats: Middlebury ``.flo`` flows with a packed-bit mask sidecar, PNG images and JSONL records."""

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import TypeVar

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ValidationError

from ufc_matcher.core.exceptions import ContractError, FormatError
from ufc_matcher.models.flow import FlowField

logger = logging.getLogger(__name__)

FLO_MAGIC = 202021.25
FLO_HEADER_BYTES = 12
MAX_EXTENT = 1_000_000
MASK_SUFFIX = ".mask"

RecordT = TypeVar("RecordT", bound=BaseModel)


def mask_path_for(path: Path) -> Path:
    return Path(path).with_suffix(MASK_SUFFIX)


def flo_write(flow: FlowField, path: Path) -> Path:
    """Write ``flow`` as ``.flo`` plus its validity sidecar; returns the flow path."""
    h, w = flow.height, flow.width
    if h >= MAX_EXTENT or w >= MAX_EXTENT:
        raise ContractError(f"Flow extents {h}x{w} exceed the .flo limit of {MAX_EXTENT}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([FLO_MAGIC], dtype="<f4").tobytes() + np.array([w, h], dtype="<i4").tobytes()
    payload = flow.grid.detach().cpu().numpy().astype("<f4").tobytes()
    path.write_bytes(header + payload)
    mask = flow.valid.cpu().numpy().reshape(-1).astype(np.uint8)
    mask_path_for(path).write_bytes(np.packbits(mask, bitorder="little").tobytes())
    return path


def flo_read(path: Path) -> FlowField:
    """Read a ``.flo`` file; without a mask sidecar the mask comes from image bounds."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read flow file {path}: {e}") from e
    if len(data) < 4:
        raise FormatError(f"{path}: missing .flo magic", offset=len(data))
    magic = float(np.frombuffer(data[:4], dtype="<f4")[0])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic}", offset=0)
    if len(data) < FLO_HEADER_BYTES:
        raise FormatError(f"{path}: truncated .flo header", offset=len(data))
    w, h = (int(v) for v in np.frombuffer(data[4:12], dtype="<i4"))
    if not (0 < w < MAX_EXTENT and 0 < h < MAX_EXTENT):
        raise FormatError(f"{path}: invalid .flo extents {w}x{h}", offset=4)
    expected = FLO_HEADER_BYTES + 8 * w * h
    if len(data) < expected:
        raise FormatError(f"{path}: truncated .flo payload, expected {expected} bytes", offset=len(data))
    if len(data) > expected:
        raise FormatError(f"{path}: trailing bytes after .flo payload", offset=expected)
    values = np.frombuffer(data[FLO_HEADER_BYTES:], dtype="<f4").reshape(h, w, 2)
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: non-finite flow values", offset=FLO_HEADER_BYTES)
    grid = torch.from_numpy(values.astype(np.float32)).to(torch.get_default_dtype())

    sidecar = mask_path_for(path)
    if not sidecar.exists():
        logger.warning(f"No mask sidecar for {path}; deriving validity from image bounds")
        return FlowField.with_bounds(grid)
    packed = sidecar.read_bytes()
    needed = (h * w + 7) // 8
    if len(packed) != needed:
        raise FormatError(
            f"{sidecar}: expected {needed} mask bytes, got {len(packed)}", offset=min(len(packed), needed)
        )
    bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), bitorder="little")[: h * w]
    return FlowField(grid=grid, valid=torch.from_numpy(bits.reshape(h, w).astype(bool)))


def read_image(path: Path) -> torch.Tensor:
    """RGB image as an ``H x W x 3`` array in ``[0, 1]``."""
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise FormatError(f"Cannot read image {path}: {e}") from e
    return torch.from_numpy(pixels).to(torch.get_default_dtype())


def to_uint8(image: torch.Tensor) -> np.ndarray:
    return (image.detach().cpu().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).numpy()


def write_image(image: torch.Tensor, path: Path) -> Path:
    """Write an ``H x W x 3`` RGB or ``H x W`` grayscale array in ``[0, 1]`` as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def write_records(records: Sequence[BaseModel], path: Path) -> Path:
    """One JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(record.model_dump_json() + "\n" for record in records))
    return path


def read_records(path: Path, model: type[RecordT]) -> list[RecordT]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise FormatError(f"Cannot read records from {path}: {e}") from e
    records = []
    offset = 0
    for lineno, line in enumerate(lines, start=1):
        if line.strip():
            try:
                records.append(model.model_validate_json(line))
            except ValidationError as e:
                raise FormatError(f"{path}: invalid record on line {lineno}: {e}", offset=offset) from e
        offset += len(line.encode()) + 1
    return records
