"""Dataset manifest, image IO, and frame-batched loading with async prefetch.

A dataset lives in one directory: a JSON manifest with relative paths to
the neutral OBJ mesh, per-frame float32 vertex buffers, per-view camera
parameters, and PNG images indexed by (frame, view). Training consumes one
frame at a time: all of that frame's views form a batch, and the next
batch's images are decoded on a background thread while the current batch
trains. At most two decoded batches are resident at any time.
"""

from __future__ import annotations

import json
import os
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingAsset, SchemaError
from .geometry import FramePose, MeshSequence, TriMesh, load_obj, load_vertex_buffer
from .imageio import image_nbytes, read_png
from .renderer import Camera

SCHEMA_VERSION = 1


@dataclass
class DatasetManifest:
    root: str
    neutral_mesh: str
    regions: dict[str, list[int]]
    frames: list[dict]  # {"index", "vertices", "rigid_rotation", "rigid_translation"}
    cameras: list[Camera]
    train_views: list[int]
    test_views: list[int]
    images: list[list[str]]  # images[frame][view]
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def path(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def load_neutral(self) -> TriMesh:
        vertices, faces = load_obj(self.path(self.neutral_mesh))
        masks = {name: np.asarray(idx, dtype=np.int32) for name, idx in self.regions.items()}
        return TriMesh(vertices=vertices, faces=faces, region_masks=masks)

    def load_sequence(self) -> MeshSequence:
        neutral = self.load_neutral()
        frames = []
        for rec in self.frames:
            verts = load_vertex_buffer(self.path(rec["vertices"]), neutral.n_vertices)
            frames.append(
                FramePose(
                    vertex_positions=verts,
                    rigid_rotation=np.asarray(rec["rigid_rotation"], dtype=np.float64),
                    rigid_translation=np.asarray(rec["rigid_translation"], dtype=np.float64),
                )
            )
        return MeshSequence(neutral=neutral, frames=frames)

    def load_image(self, frame: int, view: int) -> np.ndarray:
        return read_png(self.path(self.images[frame][view]))

    def camera(self, view: int) -> Camera:
        return self.cameras[view]

    def batch_nbytes(self, view_ids=None) -> int:
        ids = list(view_ids) if view_ids is not None else range(self.n_views)
        return sum(image_nbytes(self.cameras[v].width, self.cameras[v].height) for v in ids)


def save_manifest(manifest: DatasetManifest, path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "neutral_mesh": manifest.neutral_mesh,
        "regions": {k: list(map(int, v)) for k, v in manifest.regions.items()},
        "background": list(manifest.background),
        "frames": manifest.frames,
        "cameras": [cam.to_dict() for cam in manifest.cameras],
        "train_views": list(manifest.train_views),
        "test_views": list(manifest.test_views),
        "images": manifest.images,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def load_manifest(path) -> DatasetManifest:
    """Parse and eagerly validate a dataset manifest.

    Raises SchemaError on structural problems and MissingAsset naming the
    first file that is referenced but absent.
    """
    if not os.path.exists(path):
        raise MissingAsset(f"manifest not found: {path}")
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {version!r}")
    required = ["neutral_mesh", "frames", "cameras", "train_views", "test_views", "images"]
    for key in required:
        if key not in payload:
            raise SchemaError(f"{path}: missing required field {key!r}")

    root = os.path.dirname(os.path.abspath(path))
    try:
        cameras = [Camera.from_dict(d) for d in payload["cameras"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad camera record ({exc})") from exc

    train_views = [int(v) for v in payload["train_views"]]
    test_views = [int(v) for v in payload["test_views"]]
    if set(train_views) & set(test_views):
        raise SchemaError(f"{path}: train and test views overlap")
    n_views = len(cameras)
    for v in train_views + test_views:
        if not 0 <= v < n_views:
            raise SchemaError(f"{path}: view index {v} out of range")

    images = payload["images"]
    frames = payload["frames"]
    if len(images) != len(frames):
        raise SchemaError(f"{path}: {len(frames)} frames but {len(images)} image rows")
    for row in images:
        if len(row) != n_views:
            raise SchemaError(f"{path}: image row has {len(row)} entries, expected {n_views}")

    manifest = DatasetManifest(
        root=root,
        neutral_mesh=payload["neutral_mesh"],
        regions={k: [int(i) for i in v] for k, v in payload.get("regions", {}).items()},
        frames=frames,
        cameras=cameras,
        train_views=train_views,
        test_views=test_views,
        images=images,
        background=tuple(payload.get("background", (1.0, 1.0, 1.0))),
    )

    for rel in [manifest.neutral_mesh] + [rec["vertices"] for rec in frames]:
        if not os.path.exists(manifest.path(rel)):
            raise MissingAsset(f"missing asset: {manifest.path(rel)}")
    for row in images:
        for rel in row:
            if not os.path.exists(manifest.path(rel)):
                raise MissingAsset(f"missing asset: {manifest.path(rel)}")
    return manifest


@dataclass
class FrameBatch:
    """All views of one frame, decoded."""

    frame_index: int
    view_ids: list[int]
    cameras: list[Camera]
    images: list[np.ndarray]
    _release_cb: object = field(default=None, repr=False)

    @property
    def views(self):
        return list(zip(self.cameras, self.images))

    def release(self) -> None:
        """Return this batch's residency slot to the loader (idempotent)."""
        cb, self._release_cb = self._release_cb, None
        if cb is not None:
            cb()

    @property
    def nbytes(self) -> int:
        return sum(im.nbytes for im in self.images)


class BatchStream:
    """Iterator of FrameBatch with one-batch-ahead asynchronous prefetch.

    Frames are sampled uniformly at random with replacement; views within a
    batch are presented in a seeded random order. The sampling sequence is
    produced entirely on the worker thread from one seeded generator, so a
    fixed seed yields an identical stream regardless of thread timing.

    Residency accounting: a batch occupies a slot from the moment decoding
    starts until the consumer releases it (automatically, when the next
    batch is requested). Two slots exist, so decoded-image memory never
    exceeds two batches.
    """

    def __init__(self, manifest: DatasetManifest, seed: int, view_ids=None, n_batches: int | None = None):
        self.manifest = manifest
        self.view_ids = list(view_ids) if view_ids is not None else list(manifest.train_views)
        if not self.view_ids:
            raise SchemaError("batch stream needs at least one view")
        self.n_batches = n_batches
        self._queue: queue.Queue = queue.Queue(maxsize=1)
        self._slots = threading.Semaphore(2)
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._resident = 0
        self.peak_resident_batches = 0
        self.peak_resident_bytes = 0
        self._resident_bytes = 0
        self._batch_nbytes = manifest.batch_nbytes(self.view_ids)
        self._prev: FrameBatch | None = None
        self._seed = seed
        self._thread = threading.Thread(target=self._worker, daemon=True)
        self._thread.start()

    # -- accounting ----------------------------------------------------------

    def _acquire_slot(self):
        while not self._slots.acquire(timeout=0.1):
            if self._stop.is_set():
                return False
        with self._lock:
            self._resident += 1
            self._resident_bytes += self._batch_nbytes
            self.peak_resident_batches = max(self.peak_resident_batches, self._resident)
            self.peak_resident_bytes = max(self.peak_resident_bytes, self._resident_bytes)
        return True

    def _release_slot(self):
        with self._lock:
            self._resident -= 1
            self._resident_bytes -= self._batch_nbytes
        self._slots.release()

    # -- worker ----------------------------------------------------------------

    def _worker(self):
        rng = np.random.default_rng(self._seed)
        produced = 0
        while not self._stop.is_set():
            if self.n_batches is not None and produced >= self.n_batches:
                self._put(StopIteration())
                return
            frame = int(rng.integers(self.manifest.n_frames))
            order = [self.view_ids[i] for i in rng.permutation(len(self.view_ids))]
            if not self._acquire_slot():
                return
            try:
                images = [self.manifest.load_image(frame, v) for v in order]
            except Exception as exc:  # surfaced on the batch that needs it
                self._release_slot()
                self._put(exc)
                return
            batch = FrameBatch(
                frame_index=frame,
                view_ids=order,
                cameras=[self.manifest.camera(v) for v in order],
                images=images,
                _release_cb=self._release_slot,
            )
            self._put(batch)
            produced += 1

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue
        # stream closed; drop the item but free its slot
        if isinstance(item, FrameBatch):
            item.release()

    # -- consumer ----------------------------------------------------------------

    def __iter__(self):
        return self

    def __next__(self) -> FrameBatch:
        if self._prev is not None:
            self._prev.release()
            self._prev = None
        item = self._queue.get()
        if isinstance(item, StopIteration):
            self.close()
            raise item
        if isinstance(item, Exception):
            self.close()
            raise item
        self._prev = item
        return item

    def close(self):
        self._stop.set()
        if self._prev is not None:
            self._prev.release()
            self._prev = None
        try:
            while True:
                item = self._queue.get_nowait()
                if isinstance(item, FrameBatch):
                    item.release()
        except queue.Empty:
            pass
        self._thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def batch_stream(
    manifest: DatasetManifest, seed: int, view_ids=None, n_batches: int | None = None
) -> BatchStream:
    """Stream of frame batches for training; see BatchStream."""
    return BatchStream(manifest, seed, view_ids=view_ids, n_batches=n_batches)
