"""Synthetic pose-grid dataset: generation, binary persistence, splits.

Records hold the raw noisy depth image together with the grasp id, the pose
label, the per-image noise seed, and the projected clip anchors, so that
preprocessing stays replayable under different specs.  Every byte of a
dataset is a pure function of (generation spec, master seed): noise seeds
mix (seed, grasp, pose, image) and equilibrium warm starts reset at fixed
64-pose block boundaries, independent of worker count.

File format (little-endian): magic ``SPLYDS01``, u32 version=1, u32 height,
u32 width, u32 record_count; per record u32 grasp_id, 5xf32 label (meters,
radians), u64 noise_seed, 4xf32 anchor pixels, h*w*f32 depth row-major.
A JSON manifest lives next to the file as ``<name>.manifest.json``.
"""

from __future__ import annotations

import json
import multiprocessing
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from softply import serialize
from softply.geometry import PoseGridSpec, grid_pose
from softply.plysim import PlyMaterialSpec, build_mesh, set_boundary, solve_equilibrium
from softply.render import CameraModel, NoiseModel, apply_noise, project_anchors, rasterize

MAGIC = b"SPLYDS01"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIIII")
WARM_BLOCK = 64          # poses per warm-start chain; fixed for determinism


class DatasetError(ValueError):
    """Raised for malformed dataset files or invalid plans."""


def record_dtype(height: int, width: int) -> np.dtype:
    return np.dtype([
        ("grasp_id", "<u4"),
        ("label", "<f4", (5,)),
        ("noise_seed", "<u8"),
        ("anchors", "<f4", (2, 2)),
        ("depth", "<f4", (height, width)),
    ], align=False)


def mix_seed(*parts: int) -> int:
    """SplitMix64-style hash of integer parts into a 64-bit seed."""
    h = np.uint64(0x9E3779B97F4A7C15)
    for p in parts:
        h = np.uint64(h ^ np.uint64(p & 0xFFFFFFFFFFFFFFFF))
        h = np.uint64(h + np.uint64(0x9E3779B97F4A7C15))
        h = np.uint64((h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9))
        h = np.uint64((h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB))
        h = np.uint64(h ^ (h >> np.uint64(31)))
    return int(h)


@dataclass(frozen=True)
class GenSpec:
    """Everything dataset generation depends on."""

    material: PlyMaterialSpec
    grasps: tuple
    grid: PoseGridSpec
    camera: CameraModel
    sigma_per_meter: float
    dropout_prob: float
    images_per_pose: int
    master_seed: int
    solver_tol: float = 1e-6
    solver_max_iters: int = 500


@dataclass(frozen=True)
class SplitPlan:
    unused_pose_fraction: float = 0.2
    train_fraction: float = 0.8       # of the non-unused poses
    held_out_grasp_ids: tuple = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.unused_pose_fraction < 1.0:
            raise DatasetError("unused_pose_fraction must be in [0, 1)")
        if not 0.0 < self.train_fraction <= 1.0:
            raise DatasetError("train_fraction must be in (0, 1]")


@dataclass
class SplitAssignment:
    """Record indices per split; every record lands in exactly one."""

    train: np.ndarray
    test: np.ndarray
    unused_pose: np.ndarray
    unused_grasp: np.ndarray
    train_poses: np.ndarray           # pose indices behind the train records
    plan: SplitPlan

    def to_dict(self) -> dict:
        return {
            "plan": {
                "unused_pose_fraction": self.plan.unused_pose_fraction,
                "train_fraction": self.plan.train_fraction,
                "held_out_grasp_ids": list(self.plan.held_out_grasp_ids),
                "seed": self.plan.seed,
            },
            "train": self.train.tolist(),
            "test": self.test.tolist(),
            "unused_pose": self.unused_pose.tolist(),
            "unused_grasp": self.unused_grasp.tolist(),
            "train_poses": self.train_poses.tolist(),
        }

    @staticmethod
    def from_dict(obj: dict) -> "SplitAssignment":
        plan = SplitPlan(obj["plan"]["unused_pose_fraction"],
                         obj["plan"]["train_fraction"],
                         tuple(obj["plan"]["held_out_grasp_ids"]),
                         obj["plan"]["seed"])
        as_arr = lambda key: np.asarray(obj[key], dtype=np.int64)
        return SplitAssignment(as_arr("train"), as_arr("test"),
                               as_arr("unused_pose"), as_arr("unused_grasp"),
                               as_arr("train_poses"), plan)


class Dataset:
    """Memory-mapped read access to a dataset file plus its manifest."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise DatasetError(f"{self.path}: file shorter than the header")
        magic, version, height, width, count = HEADER.unpack(head)
        if magic != MAGIC:
            raise DatasetError(f"{self.path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise DatasetError(f"{self.path}: unsupported version {version}")
        self.height, self.width, self.count = height, width, count
        stride = record_dtype(height, width).itemsize
        size = self.path.stat().st_size - HEADER.size
        if size != count * stride:
            bad = size // stride
            raise DatasetError(
                f"{self.path}: truncated at record {bad} "
                f"(byte offset {HEADER.size + bad * stride})")
        if count:
            self.records = np.memmap(self.path, dtype=record_dtype(height, width),
                                     mode="r", offset=HEADER.size, shape=(count,))
        else:
            self.records = np.zeros((0,), dtype=record_dtype(height, width))
        self.manifest = self._load_manifest()

    def manifest_path(self) -> Path:
        return manifest_path_for(self.path)

    def _load_manifest(self) -> Optional[dict]:
        mp = self.manifest_path()
        if mp.exists():
            return json.loads(mp.read_text())
        return None

    def save_manifest(self) -> None:
        self.manifest_path().write_text(json.dumps(self.manifest, indent=1))

    @property
    def poses_per_config(self) -> int:
        return int(self.manifest["poses_per_config"])

    @property
    def images_per_pose(self) -> int:
        return int(self.manifest["images_per_pose"])

    def pose_index_of(self, record_idx) -> np.ndarray:
        per_grasp = self.poses_per_config * self.images_per_pose
        return (np.asarray(record_idx) % per_grasp) // self.images_per_pose


def manifest_path_for(path) -> Path:
    return Path(str(path) + ".manifest.json")


class DatasetWriter:
    """Sequential record writer; patches the record count on close."""

    def __init__(self, path, height: int, width: int):
        self.path = Path(path)
        self.height, self.width = height, width
        self.count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, height, width, 0))

    def append(self, records: np.ndarray) -> None:
        expect = record_dtype(self.height, self.width)
        if records.dtype != expect:
            raise DatasetError(f"record dtype mismatch: {records.dtype}")
        self._fh.write(records.tobytes())
        self.count += len(records)

    def close(self) -> None:
        self._fh.seek(0)
        self._fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, self.height,
                                   self.width, self.count))
        self._fh.close()


def generate(spec: GenSpec, out_path, jobs: int = 1,
             progress: Optional[Callable[[str], None]] = None) -> Dataset:
    """Render the full grasp x pose x image grid into a dataset file.

    Work splits into fixed 64-pose blocks per grasp config; each block resets
    the mesh to flat and warm-starts successive poses from the previous
    equilibrium, so results do not depend on `jobs`.  Records are written in
    (grasp slot, pose index, image index) order.  Poses whose equilibrium
    fails to converge are skipped and logged; more than 0.1% skips aborts.
    """
    out_path = Path(out_path)
    n_poses = spec.grid.pose_count()
    blocks = [(slot, lo, min(lo + WARM_BLOCK, n_poses))
              for slot in range(len(spec.grasps))
              for lo in range(0, n_poses, WARM_BLOCK)]

    writer = DatasetWriter(out_path, spec.camera.height, spec.camera.width)
    skipped: list[dict] = []
    try:
        if jobs > 1:
            with multiprocessing.Pool(jobs, initializer=_worker_init,
                                      initargs=(spec,)) as pool:
                for i, (recs, skips) in enumerate(
                        pool.imap(_block_task, blocks, chunksize=1)):
                    writer.append(recs)
                    skipped.extend(skips)
                    if progress:
                        progress(f"block {i + 1}/{len(blocks)}")
        else:
            _worker_init(spec)
            for i, block in enumerate(blocks):
                recs, skips = _block_task(block)
                writer.append(recs)
                skipped.extend(skips)
                if progress:
                    progress(f"block {i + 1}/{len(blocks)}")
    finally:
        writer.close()

    expected = len(spec.grasps) * n_poses * spec.images_per_pose
    if skipped and len(skipped) * spec.images_per_pose > 0.001 * expected:
        raise DatasetError(
            f"{len(skipped)} poses failed to converge "
            f"(> 0.1% of {expected} records); first: {skipped[0]}")

    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_file": out_path.name,
        "height": spec.camera.height,
        "width": spec.camera.width,
        "record_count": writer.count,
        "poses_per_config": n_poses,
        "images_per_pose": spec.images_per_pose,
        "master_seed": spec.master_seed,
        "grasp_ids": [g.id for g in spec.grasps],
        "grid": serialize.grid_to_dict(spec.grid),
        "grasps": serialize.grasps_to_list(spec.grasps),
        "material": serialize.material_to_dict(spec.material),
        "camera": serialize.camera_to_dict(spec.camera),
        "noise": {"sigma_per_meter": spec.sigma_per_meter,
                  "dropout_prob": spec.dropout_prob},
        "solver": {"tol": spec.solver_tol, "max_iters": spec.solver_max_iters},
        "skipped": skipped,
        "splits": None,
    }
    manifest_path_for(out_path).write_text(json.dumps(manifest, indent=1))
    return Dataset(out_path)


_WORKER_SPEC: Optional[GenSpec] = None


def _worker_init(spec: GenSpec) -> None:
    global _WORKER_SPEC
    _WORKER_SPEC = spec


def _block_task(block: tuple) -> tuple[np.ndarray, list]:
    spec = _WORKER_SPEC
    slot, lo, hi = block
    grasp = spec.grasps[slot]
    cam = spec.camera
    mesh = build_mesh(spec.material, grasp)
    dtype = record_dtype(cam.height, cam.width)
    out = np.zeros((hi - lo) * spec.images_per_pose, dtype=dtype)
    skipped = []
    n = 0
    for pose_idx in range(lo, hi):
        state = grid_pose(spec.grid, pose_idx)
        set_boundary(mesh, state)
        res = solve_equilibrium(mesh, tol=spec.solver_tol,
                                max_iters=spec.solver_max_iters)
        if not res.converged:
            skipped.append({"grasp_id": grasp.id, "pose_index": pose_idx,
                            "residual": res.residual})
            mesh.reset_flat()
            continue
        clean = rasterize(cam, mesh)
        anchors = project_anchors(cam, mesh)
        for img_idx in range(spec.images_per_pose):
            seed = mix_seed(spec.master_seed, grasp.id, pose_idx, img_idx)
            noisy = apply_noise(clean, NoiseModel(spec.sigma_per_meter,
                                                  spec.dropout_prob, seed),
                                cam.z_near, cam.z_far)
            rec = out[n]
            rec["grasp_id"] = grasp.id
            rec["label"] = state.as_array().astype(np.float32)
            rec["noise_seed"] = seed
            rec["anchors"] = anchors.astype(np.float32)
            rec["depth"] = noisy.values
            n += 1
    return out[:n], skipped


def split(ds: Dataset, plan: SplitPlan) -> SplitAssignment:
    """Partition records into train/test/unused-pose/unused-grasp.

    Held-out grasps go whole to unused-grasp.  A seeded fraction of pose
    labels (all their images, across the remaining grasps) forms the
    unused-pose set; the remaining poses split into train/test by pose so a
    pose's images never straddle the two.
    """
    n_poses = ds.poses_per_config
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(n_poses)
    n_unused = int(round(plan.unused_pose_fraction * n_poses))
    unused_poses = set(perm[:n_unused].tolist())
    usable = perm[n_unused:]
    n_train = int(round(plan.train_fraction * len(usable)))
    train_poses = np.sort(usable[:n_train])
    train_set = set(train_poses.tolist())

    grasp_ids = np.asarray(ds.records["grasp_id"], dtype=np.int64)
    held = set(int(g) for g in plan.held_out_grasp_ids)
    known = set(int(g) for g in ds.manifest["grasp_ids"])
    if not held <= known:
        raise DatasetError(f"held-out grasp ids {held - known} not in dataset")
    pose_of = ds.pose_index_of(np.arange(ds.count))

    in_held = np.isin(grasp_ids, sorted(held))
    in_unused = np.isin(pose_of, sorted(unused_poses)) & ~in_held
    in_train = np.isin(pose_of, train_poses) & ~in_held & ~in_unused
    in_test = ~in_held & ~in_unused & ~in_train

    assignment = SplitAssignment(
        train=np.flatnonzero(in_train).astype(np.int64),
        test=np.flatnonzero(in_test).astype(np.int64),
        unused_pose=np.flatnonzero(in_unused).astype(np.int64),
        unused_grasp=np.flatnonzero(in_held).astype(np.int64),
        train_poses=train_poses.astype(np.int64),
        plan=plan)
    if assignment.train.size == 0:
        raise DatasetError("split plan leaves the train set empty")
    return assignment


def save_split(ds: Dataset, assignment: SplitAssignment) -> None:
    if ds.manifest is None:
        raise DatasetError("dataset has no manifest to record splits in")
    ds.manifest["splits"] = assignment.to_dict()
    ds.save_manifest()


def load_split(ds: Dataset) -> SplitAssignment:
    if not ds.manifest or not ds.manifest.get("splits"):
        raise DatasetError(f"{ds.path}: manifest holds no split assignment")
    return SplitAssignment.from_dict(ds.manifest["splits"])


def subsample(ds: Dataset, assignment: SplitAssignment, fraction: float,
              seed: int = 0) -> np.ndarray:
    """Seeded nested subsampling of train poses; returns train record indices.

    For a fixed seed the selected pose sets are nested across fractions
    (the 25% set is a subset of the 50% set, and so on).
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return assignment.train.copy()
    rng = np.random.default_rng(seed)
    order = rng.permutation(assignment.train_poses)
    keep = set(order[:int(round(fraction * len(order)))].tolist())
    pose_of = ds.pose_index_of(assignment.train)
    mask = np.isin(pose_of, sorted(keep))
    return assignment.train[mask]
