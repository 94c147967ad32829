"""Patch bags, grid geometry, graph construction, serialization, and the
synthetic bag generator.

A bag is one slide surrogate: per-patch feature vectors plus integer grid
coordinates. Graphs connect patches whose grid distance is at most 2*sqrt(2)
(the full 5x5 neighborhood), and a learnable global node can be attached for
attention pooling.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import substream

MAGIC = b"SRMB"
FORMAT_VERSION = 1

# squared grid distance for the 5x5 neighborhood: (2*sqrt(2))**2, boundary included
NEIGHBOR_RADIUS_SQ = 8


class DataError(ValueError):
    """Invalid bag or graph contents."""


class FormatError(DataError):
    """Malformed bag file; message carries the failing byte offset."""


@dataclass
class PatchBag:
    bag_id: str
    features: np.ndarray  # (N, D) float64
    grid_coords: np.ndarray  # (N, 2) int64, (col, row)
    bag_label: int
    instance_labels: np.ndarray | None = None  # (N,) bool

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.grid_coords = np.asarray(self.grid_coords, dtype=np.int64)
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=bool)
        n = self.features.shape[0]
        if n < 1:
            raise DataError(f"bag {self.bag_id!r}: need at least one patch")
        if self.grid_coords.shape != (n, 2):
            raise DataError(f"bag {self.bag_id!r}: coords shape {self.grid_coords.shape} != ({n}, 2)")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"bag {self.bag_id!r}: non-finite feature values")
        if len({(int(c), int(r)) for c, r in self.grid_coords}) != n:
            raise DataError(f"bag {self.bag_id!r}: duplicate grid coordinates")
        if self.instance_labels is not None and self.instance_labels.shape != (n,):
            raise DataError(f"bag {self.bag_id!r}: instance label length mismatch")

    @property
    def num_patches(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchBag):
            return NotImplemented
        if self.bag_id != other.bag_id or self.bag_label != other.bag_label:
            return False
        if not np.array_equal(self.features, other.features):
            return False
        if not np.array_equal(self.grid_coords, other.grid_coords):
            return False
        if (self.instance_labels is None) != (other.instance_labels is None):
            return False
        return self.instance_labels is None or np.array_equal(
            self.instance_labels, other.instance_labels
        )


@dataclass
class PatchGraph:
    bag: PatchBag
    edge_src: np.ndarray  # directed edges j -> i, no self-loops stored
    edge_dst: np.ndarray
    has_global_node: bool = False
    global_index: int | None = None

    @property
    def num_nodes(self) -> int:
        return self.bag.num_patches + (1 if self.has_global_node else 0)


@dataclass(frozen=True)
class Contour:
    start_x: int
    start_y: int
    w: int
    h: int


def align_contour(c: Contour, step_size: int) -> Contour:
    """Snap a contour's origin down to the step grid, growing w/h to cover it."""
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    if c.start_x < 0 or c.start_y < 0 or c.w <= 0 or c.h <= 0:
        raise ValueError(f"invalid contour {c}")
    dx = c.start_x % step_size
    dy = c.start_y % step_size
    return Contour(c.start_x - dx, c.start_y - dy, c.w + dx, c.h + dy)


def build_edges(grid_coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges j->i for all pairs with squared grid distance in (0, 8].

    Returns (src, dst) sorted by destination. Self-loops are not stored; the
    model adds them at compute time.
    """
    coords = np.asarray(grid_coords, dtype=np.int64)
    n = coords.shape[0]
    if len({(int(c), int(r)) for c, r in coords}) != n:
        raise DataError("duplicate grid coordinates")
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    adjacent = (d2 > 0) & (d2 <= NEIGHBOR_RADIUS_SQ)
    dst, src = np.nonzero(adjacent)  # symmetric predicate, so either orientation works
    return src.astype(np.int64), dst.astype(np.int64)


def build_graph(bag: PatchBag, with_global_node: bool = True) -> PatchGraph:
    src, dst = build_edges(bag.grid_coords)
    g = PatchGraph(bag=bag, edge_src=src, edge_dst=dst)
    return attach_global_node(g) if with_global_node else g


def attach_global_node(g: PatchGraph) -> PatchGraph:
    """Add the pooling node: one edge patch->global per patch, none back."""
    if g.has_global_node:
        raise DataError("graph already has a global node")
    n = g.bag.num_patches
    src = np.concatenate([g.edge_src, np.arange(n, dtype=np.int64)])
    dst = np.concatenate([g.edge_dst, np.full(n, n, dtype=np.int64)])
    return PatchGraph(bag=g.bag, edge_src=src, edge_dst=dst, has_global_node=True, global_index=n)


# -- synthetic generator ----------------------------------------------------


@dataclass
class SynthConfig:
    num_bags: int = 200
    grid_extent: int = 40
    nodes_per_bag: int = 300
    feature_dim: int = 16
    positive_ratio: float = 0.05
    num_classes: int = 2
    class_shift: float = 1.0
    noise_scale: float = 1.0
    # fractional jitter on the per-bag node count
    size_jitter: float = 0.15


class GenerationError(RuntimeError):
    pass


def _grow_region(
    rng: np.random.Generator,
    size: int,
    in_bounds,
    seed_cell: tuple[int, int],
) -> list[tuple[int, int]]:
    """Grow a 4-connected region of exactly ``size`` cells from a seed."""
    region = {seed_cell}
    order = [seed_cell]
    frontier = []
    seen_frontier = set()

    def push_neighbors(cell):
        c, r = cell
        for nc, nr in ((c + 1, r), (c - 1, r), (c, r + 1), (c, r - 1)):
            nb = (nc, nr)
            if in_bounds(nb) and nb not in region and nb not in seen_frontier:
                frontier.append(nb)
                seen_frontier.add(nb)

    push_neighbors(seed_cell)
    while len(region) < size:
        if not frontier:
            raise GenerationError("region growth exhausted the available cells")
        k = int(rng.integers(len(frontier)))
        cell = frontier[k]
        frontier[k] = frontier[-1]
        frontier.pop()
        seen_frontier.discard(cell)
        if cell in region:
            continue
        region.add(cell)
        order.append(cell)
        push_neighbors(cell)
    return order


def _smooth_field(rng: np.random.Generator, coords: np.ndarray, extent: int) -> np.ndarray:
    """Low-frequency random scalar field over grid coordinates."""
    out = np.zeros(coords.shape[0])
    xy = coords.astype(np.float64)
    for _ in range(3):
        freq = rng.uniform(0.5, 2.0, size=2) * (2.0 * math.pi / extent)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.normal()
        out += amp * np.cos(xy @ freq + phase)
    return out


def generate_synthetic_dataset(cfg: SynthConfig, seed: int) -> list[PatchBag]:
    """Deterministic synthetic bags with spatially correlated features.

    Each bag tiles a random connected tissue mask. Positive bags plant one
    4-connected blob of ceil(ratio * N) positive instances whose features are
    shifted along a class direction and share a per-blob latent component, so
    neighboring positive patches look alike and spatial context is predictive.
    """
    rng = substream(seed, "synth")
    d = cfg.feature_dim
    class_dirs = {}
    for c in range(1, cfg.num_classes):
        v = rng.normal(size=d)
        class_dirs[c] = v / np.linalg.norm(v)

    extent = cfg.grid_extent

    def in_bounds(cell):
        return 0 <= cell[0] < extent and 0 <= cell[1] < extent

    bags = []
    for b in range(cfg.num_bags):
        label = b % cfg.num_classes
        lo = max(1, int(cfg.nodes_per_bag * (1.0 - cfg.size_jitter)))
        hi = int(cfg.nodes_per_bag * (1.0 + cfg.size_jitter))
        n = int(rng.integers(lo, hi + 1))
        if n > extent * extent:
            raise GenerationError(f"bag size {n} exceeds grid capacity {extent * extent}")

        seed_cell = (int(rng.integers(extent)), int(rng.integers(extent)))
        cells = _grow_region(rng, n, in_bounds, seed_cell)
        coords = np.array(sorted(cells), dtype=np.int64)

        features = cfg.noise_scale * rng.normal(size=(n, d))
        field = _smooth_field(rng, coords, extent)
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        features += np.outer(field, direction)

        inst = np.zeros(n, dtype=bool)
        if label > 0:
            k = math.ceil(cfg.positive_ratio * n)
            if k == 0:
                raise GenerationError(f"bag {b}: positive ratio {cfg.positive_ratio} yields 0 instances")
            cell_set = set(cells)
            blob_seed = cells[int(rng.integers(len(cells)))]
            blob = _grow_region(rng, k, lambda cell: cell in cell_set, blob_seed)
            index_of = {(int(c), int(r)): i for i, (c, r) in enumerate(coords)}
            blob_idx = np.array(sorted(index_of[cell] for cell in blob), dtype=np.int64)
            inst[blob_idx] = True
            latent = rng.normal(size=d) * 0.5
            features[blob_idx] += cfg.class_shift * class_dirs[label] + latent

        # keep values float32-representable so the on-disk format round-trips exactly
        features = features.astype(np.float32).astype(np.float64)
        bags.append(
            PatchBag(
                bag_id=f"bag{b:04d}",
                features=features,
                grid_coords=coords,
                bag_label=label,
                instance_labels=inst,
            )
        )
    return bags


# -- bag serialization -------------------------------------------------------
#
# Little-endian layout:
#   magic "SRMB" | u32 version=1 | u32 N | u32 D | u32 label | u8 has_instance_labels
#   N*D float32 features (row-major) | N pairs of int32 (col, row)
#   [N bytes of 0/1 instance labels when flagged]

_HEADER = struct.Struct("<4sIIIIB")


def save_bag(bag: PatchBag, path) -> None:
    n, d = bag.features.shape
    blob = bytearray()
    blob += _HEADER.pack(MAGIC, FORMAT_VERSION, n, d, bag.bag_label, int(bag.instance_labels is not None))
    blob += bag.features.astype("<f4").tobytes()
    blob += bag.grid_coords.astype("<i4").tobytes()
    if bag.instance_labels is not None:
        blob += bag.instance_labels.astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_bag(path) -> PatchBag:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes at offset 0")
    magic, version, n, d, label, has_inst = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    offset = _HEADER.size
    feat_bytes = n * d * 4
    coord_bytes = n * 8
    expected = offset + feat_bytes + coord_bytes + (n if has_inst else 0)
    if len(raw) != expected:
        raise FormatError(f"expected {expected} bytes, got {len(raw)}: truncation at offset {len(raw)}")
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += feat_bytes
    coords = np.frombuffer(raw, dtype="<i4", count=n * 2, offset=offset).reshape(n, 2)
    offset += coord_bytes
    inst = None
    if has_inst:
        inst_raw = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset)
        if not np.all(inst_raw <= 1):
            raise FormatError(f"instance labels must be 0/1 at offset {offset}")
        inst = inst_raw.astype(bool)
    return PatchBag(
        bag_id=Path(path).stem,
        features=features.astype(np.float64),
        grid_coords=coords.astype(np.int64),
        bag_label=int(label),
        instance_labels=inst,
    )


# -- dataset manifest --------------------------------------------------------

SPLITS = ("train", "val", "test")


def assign_splits(num_bags: int, seed: int, fractions=(0.6, 0.15, 0.25)) -> list[str]:
    """Seeded split per bag index. train/val counts round to nearest; test takes
    the remainder, so proportions are within one bag of the request."""
    rng = substream(seed, "split")
    order = rng.permutation(num_bags)
    n_train = round(fractions[0] * num_bags)
    n_val = round(fractions[1] * num_bags)
    splits = [""] * num_bags
    for rank, idx in enumerate(order):
        if rank < n_train:
            splits[idx] = "train"
        elif rank < n_train + n_val:
            splits[idx] = "val"
        else:
            splits[idx] = "test"
    return splits


def write_manifest(entries: list[dict], path) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps({k: e[k] for k in ("id", "path", "label", "split")}) + "\n")


def read_manifest(path) -> list[dict]:
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            e = json.loads(line)
            missing = {"id", "path", "label", "split"} - set(e)
            if missing:
                raise DataError(f"manifest line {line_no}: missing fields {sorted(missing)}")
            if e["split"] not in SPLITS:
                raise DataError(f"manifest line {line_no}: bad split {e['split']!r}")
            entries.append(e)
    return entries


def load_split(manifest_path, split: str) -> list[PatchBag]:
    base = Path(manifest_path).parent
    bags = []
    for e in read_manifest(manifest_path):
        if e["split"] == split:
            p = Path(e["path"])
            bags.append(load_bag(p if p.is_absolute() else base / p))
    return bags
