"""Self-supervised synthetic pairs: random warps, analytic ground-truth flow and procedural textures."""

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError
from scipy.interpolate import RBFInterpolator

from ufc_matcher.core.config import Settings, WarpKind, get_settings
from ufc_matcher.core.exceptions import ContractError, DomainError, GenerationError, UsageError
from ufc_matcher.core.numerics import bilinear_resize
from ufc_matcher.models.flow import FlowField, WarpSpec
from ufc_matcher.models.records import PairRecord
from ufc_matcher.services.flow_io import flo_write, read_image, read_records, write_image, write_records
from ufc_matcher.services.zoom import warp_image

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 100
TPS_GRID = 4
INVERSE_FIT_GRID = 24
INVERSE_FIT_SPAN = 0.75
INVERSE_NEWTON_STEPS = 3
JACOBIAN_STEP = 1e-6
CANVAS_MARGIN = 1.25
MANIFEST_NAME = "manifest.jsonl"
TEXTURES = ("checkerboard", "noise", "gradient")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def warp_ranges(strength: float) -> dict[str, float]:
    """Sampling ranges at a given strength; lengths are in units of the image extent."""
    return {
        "rotation_deg": 15.0 * strength,
        "scale": 0.25 * strength,
        "translation": 0.1 * strength,
        "corner_jitter": 0.1 * strength,
        "node_jitter": 0.08 * strength,
    }


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform from four point correspondences (``h33 = 1``)."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst, strict=True):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    h = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def _unit_square_corners() -> np.ndarray:
    return np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])


def _tps_nodes() -> np.ndarray:
    g = np.linspace(-0.5, 0.5, TPS_GRID)
    xs, ys = np.meshgrid(g, g)
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def _draw(kind: WarpKind, rng: np.random.Generator, ranges: dict[str, float]) -> dict:
    if kind == WarpKind.AFFINE:
        theta = math.radians(ranges["rotation_deg"]) * rng.uniform(-1, 1)
        scale = 1.0 + ranges["scale"] * rng.uniform(-1, 1)
        tx, ty = ranges["translation"] * rng.uniform(-1, 1, size=2)
        matrix = [
            [scale * math.cos(theta), -scale * math.sin(theta), float(tx)],
            [scale * math.sin(theta), scale * math.cos(theta), float(ty)],
            [0.0, 0.0, 1.0],
        ]
        return {"matrix": matrix}
    if kind == WarpKind.HOMOGRAPHY:
        corners = _unit_square_corners()
        moved = corners + ranges["corner_jitter"] * rng.uniform(-1, 1, size=corners.shape)
        return {"matrix": homography_from_points(corners, moved).tolist()}
    nodes = _tps_nodes()
    displaced = nodes + ranges["node_jitter"] * rng.uniform(-1, 1, size=nodes.shape)
    return {"nodes": [tuple(p) for p in nodes.tolist()], "displaced": [tuple(p) for p in displaced.tolist()]}


def _is_degenerate(spec: WarpSpec) -> bool:
    if spec.matrix is None:
        return False
    # the projective denominator must keep one sign over the image
    m = np.asarray(spec.matrix)
    denominators = _unit_square_corners() @ m[2, :2] + m[2, 2]
    return bool((denominators <= 1e-6).any()) or float(np.linalg.det(m)) <= 1e-6


def sample_warp(kind: WarpKind, seed: int, strength: float) -> WarpSpec:
    """Reproducible random warp; degenerate draws are resampled up to ``MAX_ATTEMPTS`` times."""
    if not 0 < strength <= 1:
        raise DomainError(f"Warp strength must lie in (0, 1], got {strength}")
    rng = np.random.default_rng(seed)
    ranges = warp_ranges(strength)
    for _attempt in range(MAX_ATTEMPTS):
        try:
            spec = WarpSpec(kind=kind, seed=seed, strength=strength, ranges=ranges, **_draw(kind, rng, ranges))
        except (ValidationError, np.linalg.LinAlgError):
            continue
        if not _is_degenerate(spec):
            return spec
    raise GenerationError(f"No invertible {kind.value} warp after {MAX_ATTEMPTS} draws (seed {seed})")


def _to_normalized(points: np.ndarray, height: int, width: int) -> np.ndarray:
    extent = max(height, width)
    centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return (points - centre) / extent


def _to_pixels(points: np.ndarray, height: int, width: int) -> np.ndarray:
    extent = max(height, width)
    centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    return points * extent + centre


def _apply_matrix(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    homogeneous = np.concatenate([points, np.ones((len(points), 1))], axis=1) @ matrix.T
    return homogeneous[:, :2] / homogeneous[:, 2:3]


def apply_warp(spec: WarpSpec, points: np.ndarray) -> np.ndarray:
    """Map normalized source points to normalized target points."""
    if spec.matrix is not None:
        return _apply_matrix(np.asarray(spec.matrix, dtype=np.float64), points)
    tps = RBFInterpolator(np.asarray(spec.nodes), np.asarray(spec.displaced), kernel="thin_plate_spline")
    return np.asarray(tps(points))


def apply_inverse(spec: WarpSpec, points: np.ndarray) -> np.ndarray:
    """Map normalized target points back to the source.

    TPS warps have no closed-form inverse: a reverse TPS is fitted on a dense grid of
    forward-mapped points, then refined by Newton steps on the forward warp.
    """
    if spec.matrix is not None:
        try:
            inverse = np.linalg.inv(np.asarray(spec.matrix, dtype=np.float64))
        except np.linalg.LinAlgError as e:
            raise ContractError(f"{spec.kind.value} warp is not invertible") from e
        return _apply_matrix(inverse, points)
    g = np.linspace(-INVERSE_FIT_SPAN, INVERSE_FIT_SPAN, INVERSE_FIT_GRID)
    xs, ys = np.meshgrid(g, g)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    forward = RBFInterpolator(np.asarray(spec.nodes), np.asarray(spec.displaced), kernel="thin_plate_spline")
    reverse = RBFInterpolator(forward(grid), grid, kernel="thin_plate_spline")
    estimate = np.asarray(reverse(points))
    dx, dy = np.array([JACOBIAN_STEP, 0.0]), np.array([0.0, JACOBIAN_STEP])
    for _ in range(INVERSE_NEWTON_STEPS):
        residual = forward(estimate) - points
        jacobian = np.stack(
            [forward(estimate + dx) - forward(estimate - dx), forward(estimate + dy) - forward(estimate - dy)], axis=-1
        ) / (2 * JACOBIAN_STEP)
        estimate = estimate - np.linalg.solve(jacobian, residual[..., None])[..., 0]
    return estimate


def warp_to_flow(spec: WarpSpec, height: int, width: int, reverse: bool = False) -> FlowField:
    """Ground-truth backward flow ``F(j) = w^-1(j) - j`` over the target grid.

    With ``reverse`` the flow lives on the source grid instead: ``F(i) = w(i) - i``.
    """
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    normalized = _to_normalized(pixels, height, width)
    mapped = apply_warp(spec, normalized) if reverse else apply_inverse(spec, normalized)
    flow = (_to_pixels(mapped, height, width) - pixels).reshape(height, width, 2)
    if not np.isfinite(flow).all():
        raise ContractError(f"{spec.kind.value} warp maps pixels to infinity")
    return FlowField.with_bounds(torch.from_numpy(flow).to(torch.get_default_dtype()))


def center_crop(image: torch.Tensor, size: int) -> torch.Tensor:
    h, w = image.shape[0], image.shape[1]
    if size > h or size > w:
        raise ContractError(f"Cannot crop {size}x{size} from {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[top : top + size, left : left + size]


def render_pair(
    image: torch.Tensor, spec: WarpSpec, crop: int | None = None
) -> tuple[torch.Tensor, torch.Tensor, FlowField]:
    """Source image, its warp and the ground-truth flow, optionally centre-cropped."""
    h, w = image.shape[0], image.shape[1]
    flow = warp_to_flow(spec, h, w)
    target, _ = warp_image(image, flow)
    if crop is None:
        return image, target, flow
    grid = center_crop(flow.grid, crop)
    valid = center_crop(flow.valid, crop)
    cropped_flow = FlowField.with_bounds(grid.contiguous(), valid.contiguous())
    return center_crop(image, crop), center_crop(target, crop), cropped_flow


def _smooth_noise(rng: np.random.Generator, size: int, octaves: int = 5) -> torch.Tensor:
    """Value noise: random lattices at doubling frequency, bilinearly upsampled and summed."""
    total = torch.zeros(size, size, 3)
    amplitude, weight = 1.0, 0.0
    for octave in range(octaves):
        cells = 2 ** (octave + 2)
        lattice = torch.from_numpy(rng.uniform(0, 1, size=(cells, cells, 3))).to(total.dtype)
        total = total + amplitude * bilinear_resize(lattice, size, size)
        weight += amplitude
        amplitude *= 0.5
    return total / weight


def _checkerboard(rng: np.random.Generator, size: int) -> torch.Tensor:
    cells = int(rng.integers(4, 13))
    colours = torch.from_numpy(rng.uniform(0, 1, size=(2, 3)))
    ys, xs = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    parity = ((ys * cells // size) + (xs * cells // size)) % 2
    return colours[parity].to(torch.get_default_dtype())


def _gradient(rng: np.random.Generator, size: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.linspace(0, 1, size, dtype=torch.float64), torch.linspace(0, 1, size, dtype=torch.float64), indexing="ij"
    )
    image = torch.zeros(size, size, 3, dtype=torch.float64)
    for channel in range(3):
        angle = rng.uniform(0, 2 * math.pi)
        ramp = math.cos(angle) * xs + math.sin(angle) * ys
        cx, cy, radius = rng.uniform(0, 1, size=3)
        rings = torch.cos(2 * math.pi * ((xs - cx) ** 2 + (ys - cy) ** 2).sqrt() / (0.1 + 0.3 * radius))
        image[..., channel] = 0.5 * (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-12) + 0.25 * (rings + 1)
    return image.to(torch.get_default_dtype())


def procedural_texture(name: str, seed: int, size: int) -> torch.Tensor:
    """Bundled base image in ``[0, 1]``; fine value noise keeps every region textured."""
    rng = np.random.default_rng(seed)
    if name == "checkerboard":
        base = _checkerboard(rng, size)
    elif name == "noise":
        base = _smooth_noise(rng, size)
    elif name == "gradient":
        base = _gradient(rng, size)
    else:
        raise GenerationError(f"Unknown texture '{name}'. Available: {', '.join(TEXTURES)}")
    detail = _smooth_noise(rng, size).to(base.dtype)
    return (0.7 * base + 0.3 * detail).clamp(0.0, 1.0)


class SyntheticDatasetService:
    """Generates, lists and fingerprints synthetic pair datasets."""

    def __init__(self, settings: Settings | None = None) -> None:
        self.settings = settings or get_settings()

    def _user_images(self) -> list[Path]:
        image_dir = self.settings.image_dir
        if image_dir is None:
            return []
        if not image_dir.is_dir():
            raise UsageError(f"Image directory not found: {image_dir}")
        files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise UsageError(f"No PNG or JPEG images in {image_dir}")
        return files

    def pair_seed(self, index: int) -> int:
        return self.settings.dataset_seed * 1_000_003 + index

    def _base_image(self, index: int, seed: int, canvas: int, user_images: list[Path]) -> tuple[torch.Tensor, str]:
        if user_images:
            path = user_images[index % len(user_images)]
            image = read_image(path)
            return bilinear_resize(image, canvas, canvas), path.name
        name = TEXTURES[index % len(TEXTURES)]
        return procedural_texture(name, seed, canvas), name

    def _generate_one(self, index: int, out_dir: Path, user_images: list[Path]) -> PairRecord:
        settings = self.settings
        size = settings.dataset_image_size
        canvas = 2 * math.ceil(size * CANVAS_MARGIN / 2)
        kinds = settings.dataset_warp_kinds
        kind = kinds[index % len(kinds)]
        seed = self.pair_seed(index)
        base, base_name = self._base_image(index, seed, canvas, user_images)
        spec = sample_warp(kind, seed, settings.dataset_strength)
        source, target, flow = render_pair(base, spec, crop=size)

        pair_id = f"pair_{index:05d}"
        source_path = Path("images") / f"{pair_id}_source.png"
        target_path = Path("images") / f"{pair_id}_target.png"
        flow_path = Path("flows") / f"{pair_id}.flo"
        write_image(source, out_dir / source_path)
        write_image(target, out_dir / target_path)
        flo_write(flow, out_dir / flow_path)
        return PairRecord(
            pair_id=pair_id,
            seed=seed,
            warp_kind=kind,
            strength=settings.dataset_strength,
            base=base_name,
            source_path=source_path,
            target_path=target_path,
            flow_path=flow_path,
            warp=spec,
        )

    def generate(self, out_dir: Path | None = None) -> list[PairRecord]:
        """Render ``dataset_count`` pairs and write the manifest; deterministic from ``dataset_seed``."""
        out_dir = Path(out_dir or self.settings.data_dir)
        if not self.settings.dataset_warp_kinds:
            raise GenerationError("dataset_warp_kinds is empty")
        out_dir.mkdir(parents=True, exist_ok=True)
        user_images = self._user_images()
        count = self.settings.dataset_count
        logger.info(f"Generating {count} synthetic pairs in {out_dir}")
        with ThreadPoolExecutor(max_workers=self.settings.threads) as pool:
            records = list(pool.map(lambda i: self._generate_one(i, out_dir, user_images), range(count)))
        write_records(records, out_dir / MANIFEST_NAME)
        return records

    @staticmethod
    def load(data_dir: Path) -> list[PairRecord]:
        manifest = Path(data_dir) / MANIFEST_NAME
        if not manifest.exists():
            raise UsageError(f"No dataset manifest at {manifest}; run gen-data first")
        return read_records(manifest, PairRecord)

    @staticmethod
    def checksum(data_dir: Path) -> str:
        """SHA-256 over the manifest and every file it lists, in manifest order."""
        data_dir = Path(data_dir)
        digest = hashlib.sha256()
        digest.update((data_dir / MANIFEST_NAME).read_bytes())
        for record in SyntheticDatasetService.load(data_dir):
            for rel in (record.source_path, record.target_path, record.flow_path):
                digest.update((data_dir / rel).read_bytes())
        return digest.hexdigest()
