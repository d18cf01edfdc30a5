"""Synthetic training data: deformed meshes seen through a weak-perspective camera.

Each sample starts from the coarse rest mesh, adds a smooth displacement
field (a few random plane waves), maps it to the fine mesh with ``U`` and
to joints with ``R``, draws a camera and renders a grey-scale image by
splatting the projected fine vertices as Gaussian blobs.

Coordinates are abstract length units. The image covers the square
``[-VIEW_HALF_WIDTH, VIEW_HALF_WIDTH]^2`` of the projection plane, with +y
pointing up (row 0 is the top edge).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blockio
from .errors import ConfigError, DataError, DimensionError
from .losses import GroundTruth
from .mesh import Topology, TriangleMesh, build_adjacency, load_matrix, read_obj, save_matrix, write_obj

SCALE_RANGE = (0.5, 2.0)
TRANSLATION_RANGE = (-20.0, 20.0)
VIEW_HALF_WIDTH = 48.0
SPLAT_SIGMA_PX = 1.0
NUM_WAVES = 3
# displacement amplitude as a fraction of the rest-pose bounding-box diagonal
DEFAULT_DEFORMATION = 0.08

SAMPLE_MAGIC = b"FMSAMPLE"
DATASET_FORMAT = "fastmetro-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray            # (H, W, 1)
    gt: GroundTruth
    camera: np.ndarray           # (3,) = (s, t_x, t_y)
    coarse_vertices3d: np.ndarray
    deformation_seed: int

    @property
    def scale(self) -> float:
        return float(self.camera[0])

    @property
    def translation(self) -> np.ndarray:
        return self.camera[1:]


def bbox_diagonal(points: np.ndarray) -> float:
    points = np.asarray(points)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def project_points(points: np.ndarray, scale: float, translation) -> np.ndarray:
    """``s * Pi(X) + t`` for one sample (same arithmetic as the model head)."""
    selector = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    return (points @ selector) * scale + np.asarray(translation, dtype=np.float64)


def smooth_displacement(rest: np.ndarray, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Sum of ``NUM_WAVES`` random plane waves evaluated at the rest positions."""
    extent = max(bbox_diagonal(rest), 1e-12)
    disp = np.zeros_like(rest)
    for _ in range(NUM_WAVES):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(0.5, 1.5) * np.pi / extent
        phase = rng.uniform(0.0, 2.0 * np.pi)
        vec = rng.normal(size=3) * (amplitude / np.sqrt(NUM_WAVES))
        disp += np.sin(freq * rest @ direction + phase)[:, None] * vec
    return disp


def render(points2d: np.ndarray, image_size: tuple[int, int],
           half_width: float = VIEW_HALF_WIDTH, sigma_px: float = SPLAT_SIGMA_PX) -> np.ndarray:
    """Splat 2D points as Gaussians; returns ``(H, W, 1)`` intensities in ``[0, 1)``."""
    h, w = image_size
    xs = -half_width + (np.arange(w) + 0.5) * (2.0 * half_width / w)
    ys = half_width - (np.arange(h) + 0.5) * (2.0 * half_width / h)
    sigma = sigma_px * 2.0 * half_width / w
    dx = xs[None, :] - points2d[:, 0:1]                # (P, W)
    dy = ys[None, :] - points2d[:, 1:2]                # (P, H)
    gx = np.exp(-dx * dx / (2 * sigma * sigma))
    gy = np.exp(-dy * dy / (2 * sigma * sigma))
    density = gy.T @ gx                                # separable Gaussian, (H, W)
    return (1.0 - np.exp(-density))[:, :, None]


def make_sample(topology: Topology, rest: np.ndarray, seed: int, index: int,
                image_size: tuple[int, int], deformation: float = DEFAULT_DEFORMATION) -> SyntheticSample:
    rng = np.random.default_rng([seed, index])
    deformation_seed = int(rng.integers(0, 2**31 - 1))
    amplitude = deformation * bbox_diagonal(rest)
    coarse = rest + smooth_displacement(rest, np.random.default_rng(deformation_seed), amplitude)
    scale = rng.uniform(*SCALE_RANGE)
    trans = rng.uniform(*TRANSLATION_RANGE, size=2)
    fine = topology.upsample.to_scipy() @ coarse
    joints = topology.regressor.to_scipy() @ fine
    joints2d = project_points(joints, scale, trans)
    image = render(project_points(fine, scale, trans), image_size)
    gt = GroundTruth(np.asarray(fine), np.asarray(joints), joints2d)
    return SyntheticSample(image, gt, np.array([scale, *trans]), coarse, deformation_seed)


@dataclass
class SyntheticDataset:
    topology: Topology
    samples: list[SyntheticSample]
    seed: int
    image_size: tuple[int, int]
    deformation: float = DEFAULT_DEFORMATION

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices) -> "SyntheticDataset":
        return SyntheticDataset(self.topology, [self.samples[i] for i in indices], self.seed,
                                self.image_size, self.deformation)

    def split(self, holdout: int) -> tuple["SyntheticDataset", "SyntheticDataset | None"]:
        """The last ``holdout`` samples become the evaluation split."""
        if holdout == 0:
            return self, None
        if not 0 < holdout < len(self):
            raise ConfigError(f"holdout {holdout} must leave at least one training sample of {len(self)}")
        cut = len(self) - holdout
        return self.subset(range(cut)), self.subset(range(cut, len(self)))

    def arrays(self, indices=None) -> dict[str, np.ndarray]:
        """Stacked arrays for a batch: images, vertices3d, joints3d, joints2d, camera."""
        picked = self.samples if indices is None else [self.samples[i] for i in indices]
        return {
            "images": np.stack([s.image for s in picked]),
            "vertices3d": np.stack([s.gt.vertices3d for s in picked]),
            "joints3d": np.stack([s.gt.joints3d for s in picked]),
            "joints2d": np.stack([s.gt.joints2d for s in picked]),
            "camera": np.stack([s.camera for s in picked]),
        }

    @property
    def scale_reference(self) -> float:
        """Bounding-box diagonal of the fine rest mesh, the natural error yardstick."""
        fine = self.topology.upsample.to_scipy() @ self.topology.coarse.positions
        return bbox_diagonal(fine)


def generate_dataset(count: int, topology: Topology, seed: int, image_size=(56, 56),
                     deformation: float = DEFAULT_DEFORMATION) -> SyntheticDataset:
    """``count`` samples from the topology's coarse rest mesh; sample ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ConfigError(f"sample count must be at least 1, got {count}")
    if deformation < 0:
        raise ConfigError("deformation amplitude must be non-negative")
    coarse = topology.coarse
    if coarse is None or coarse.positions is None:
        raise DataError("dataset generation needs a coarse mesh with rest positions")
    image_size = tuple(int(v) for v in image_size)
    samples = [make_sample(topology, coarse.positions, seed, i, image_size, deformation) for i in range(count)]
    return SyntheticDataset(topology, samples, seed, image_size, deformation)


# -- on-disk format -------------------------------------------------------------------

def _sample_name(i: int) -> str:
    return f"samples/{i:05d}.bin"


def save_dataset(directory, dataset: SyntheticDataset) -> Path:
    """Write ``manifest.json``, the mesh, U, R and one blob per sample."""
    root = Path(directory)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    topo = dataset.topology
    write_obj(root / "mesh.obj", topo.coarse)
    save_matrix(root / "upsample.txt", topo.upsample)
    save_matrix(root / "regressor.txt", topo.regressor)
    names = []
    for i, s in enumerate(dataset.samples):
        name = _sample_name(i)
        blockio.write(root / name, SAMPLE_MAGIC, {"index": i, "deformation_seed": s.deformation_seed}, {
            "image": s.image, "vertices3d": s.gt.vertices3d, "joints3d": s.gt.joints3d,
            "joints2d": s.gt.joints2d, "camera": s.camera, "coarse_vertices3d": s.coarse_vertices3d,
        })
        names.append(name)
    manifest = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION,
        "mesh": "mesh.obj", "upsample": "upsample.txt", "joint_regressor": "regressor.txt",
        "count": len(dataset), "seed": dataset.seed, "image_size": list(dataset.image_size),
        "deformation": dataset.deformation, "num_joints": topo.num_joints,
        "num_vertices": topo.num_vertices, "num_fine_vertices": topo.num_fine_vertices,
        "samples": names,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_dataset(directory) -> SyntheticDataset:
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{root}/manifest.json: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{root}: not a {DATASET_FORMAT} v{DATASET_VERSION} directory")
    coarse: TriangleMesh = read_obj(root / manifest["mesh"])
    n = coarse.vertex_count
    up = load_matrix(root / manifest["upsample"], row_stochastic=True)
    if up.cols != n:
        raise DataError(f"U has {up.cols} columns but the mesh has {n} vertices")
    reg = load_matrix(root / manifest["joint_regressor"], expected_shape=(manifest["num_joints"], up.rows))
    topology = Topology(build_adjacency(coarse), up, reg, coarse, None)
    names = manifest["samples"]
    if len(names) != manifest["count"]:
        raise DataError(f"manifest lists {len(names)} samples but count is {manifest['count']}")
    image_size = tuple(manifest["image_size"])
    expected = {"image": (*image_size, 1), "vertices3d": (up.rows, 3), "joints3d": (reg.rows, 3),
                "joints2d": (reg.rows, 2), "camera": (3,), "coarse_vertices3d": (n, 3)}
    samples = []
    for name in names:
        meta, blocks = blockio.read(root / name, SAMPLE_MAGIC)
        for key, shape in expected.items():
            if key not in blocks:
                raise DataError(f"{name}: missing block {key!r}")
            if blocks[key].shape != shape:
                raise DimensionError(f"{name}: block {key!r} has shape {blocks[key].shape}, expected {shape}")
        gt = GroundTruth(blocks["vertices3d"], blocks["joints3d"], blocks["joints2d"])
        samples.append(SyntheticSample(blocks["image"], gt, blocks["camera"], blocks["coarse_vertices3d"],
                                       int(meta["deformation_seed"])))
    return SyntheticDataset(topology, samples, int(manifest["seed"]), image_size,
                            float(manifest.get("deformation", DEFAULT_DEFORMATION)))
