"""Paired datasets: manifest I/O, preprocessing recipes and a synthetic generator.

The synthetic generator builds 32x32 greyscale pairs from three independent
factors, each taking values in ``{0, 1, 2, 3}``:

* A: a bright block in one quadrant, present only in the primary image at
  full amplitude (strong primary feature);
* B: diagonal stripes in a central 8x8 window, faint in the primary image and
  at full amplitude in the privileged image (weak primary, strong privileged);
* C: a bar along one side of the frame, present only in the privileged image.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .losses import ContractError

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ["id", "primary", "privileged", "label_a", "label_b", "label_c", "split", "group"]
SPLITS = ("train", "valid", "test")
FACTORS = ("a", "b", "c")
N_LEVELS = 4


@dataclass
class PairedSample:
    id: str
    x: np.ndarray
    x_priv: np.ndarray | None
    labels: dict[str, int]
    split: str
    group: str


@dataclass
class PairedArrays:
    """A split of a paired dataset held in memory, in manifest order."""

    ids: list[str]
    primary: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    privileged: np.ndarray | None  # (n, H, W, C) images or (n, G) counts
    labels: dict[str, np.ndarray]
    groups: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def privileged_kind(self) -> str | None:
        if self.privileged is None:
            return None
        return "counts" if self.privileged.ndim == 2 else "image"

    def subset(self, idx) -> "PairedArrays":
        idx = np.asarray(idx)
        return PairedArrays(
            ids=[self.ids[i] for i in idx],
            primary=self.primary[idx],
            privileged=None if self.privileged is None else self.privileged[idx],
            labels={k: v[idx] for k, v in self.labels.items()},
            groups=[self.groups[i] for i in idx] if self.groups else [],
        )

    def samples(self) -> Iterator[PairedSample]:
        for i, sid in enumerate(self.ids):
            yield PairedSample(
                id=sid,
                x=self.primary[i],
                x_priv=None if self.privileged is None else self.privileged[i],
                labels={k: int(v[i]) for k, v in self.labels.items()},
                split="",
                group=self.groups[i] if self.groups else "",
            )


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticConfig:
    size: int = 32
    a_strong: float = 1.0
    a_weak: float = 0.15
    sigma_aug: float = 0.3
    base_noise: float = 0.02
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 1000
    group_size: int = 10
    privileged: str = "image"  # or "counts"
    n_genes: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.a_weak < self.sigma_aug < self.a_strong:
            raise ContractError("need a_weak < sigma_aug < a_strong for the weak/strong split")
        if self.size != 32:
            raise ContractError("the synthetic pattern library is laid out for 32x32 images")
        if self.privileged not in ("image", "counts"):
            raise ContractError(f"privileged must be 'image' or 'counts', got {self.privileged!r}")
        if self.n_genes < 2 or self.n_genes % 2:
            raise ContractError("n_genes must be an even number >= 2")


def _quadrant_blocks(size: int = 32) -> np.ndarray:
    pats = np.zeros((N_LEVELS, size, size), np.float32)
    for q in range(N_LEVELS):
        r, c = divmod(q, 2)
        pats[q, 2 + 18 * r : 12 + 18 * r, 2 + 18 * c : 12 + 18 * c] = 1.0
    return pats


def _stripe_region(size: int = 32) -> np.ndarray:
    # A small central window: the stripes carry only 16 active pixels per level,
    # so at a_weak their total energy stays near the augmentation noise.
    mask = np.zeros((size, size), bool)
    mask[12:20, 12:20] = True
    return mask


def _diagonal_stripes(size: int = 32) -> np.ndarray:
    i, j = np.indices((size, size))
    region = _stripe_region(size)
    return np.stack([((i + j) % N_LEVELS == b) & region for b in range(N_LEVELS)]).astype(np.float32)


def _border_bars(size: int = 32) -> np.ndarray:
    pats = np.zeros((N_LEVELS, size, size), np.float32)
    pats[0, 0:2, 4:28] = 1.0  # top
    pats[1, 4:28, size - 2 :] = 1.0  # right
    pats[2, size - 2 :, 4:28] = 1.0  # bottom
    pats[3, 4:28, 0:2] = 1.0  # left
    return pats


def pattern_library(size: int = 32) -> dict[str, np.ndarray]:
    """Binary ``(4, size, size)`` pattern stacks for factors a, b and c."""
    return {"a": _quadrant_blocks(size), "b": _diagonal_stripes(size), "c": _border_bars(size)}


def _quantise(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_synthetic(cfg: SyntheticConfig) -> dict[str, PairedArrays]:
    """Draw train/valid/test splits; images are quantised to 8-bit levels."""
    rng = np.random.default_rng(cfg.seed)
    pats = pattern_library(cfg.size)
    out = {}
    n_groups_seen = 0
    for split, n in zip(SPLITS, (cfg.n_train, cfg.n_valid, cfg.n_test)):
        a, b, c = rng.integers(0, N_LEVELS, size=(3, n))
        noise = rng.normal(0.0, cfg.base_noise, size=(n, cfg.size, cfg.size)).astype(np.float32)
        x = _quantise(cfg.a_strong * pats["a"][a] + cfg.a_weak * pats["b"][b] + noise)[..., None]
        if cfg.privileged == "image":
            x_priv = _quantise(cfg.a_strong * pats["b"][b] + cfg.a_strong * pats["c"][c])[..., None]
        else:
            half = cfg.n_genes // 2
            rate = np.concatenate([np.repeat(1.0 + 3.0 * b[:, None], half, 1), np.repeat(1.0 + 3.0 * c[:, None], half, 1)], 1)
            x_priv = rng.poisson(rate).astype(np.float32)
        groups = [f"g{n_groups_seen + k // cfg.group_size:05d}" for k in range(n)]
        n_groups_seen += -(-n // cfg.group_size)
        out[split] = PairedArrays(
            ids=[f"{split}-{k:05d}" for k in range(n)],
            primary=x,
            privileged=x_priv,
            labels={"a": a, "b": b, "c": c},
            groups=groups,
        )
    return out


# ---------------------------------------------------------------------------
# on-disk format


def _write_png(path: Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"could not write {path}")


def _read_png(path: Path, record_id: str) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"record {record_id}: missing file {path}")
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise OSError(f"record {record_id}: unreadable image {path}")
    if arr.ndim == 2:
        arr = arr[..., None]
    elif arr.shape[2] == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    return (arr.astype(np.float32) / 255.0).astype(np.float32)


def write_dataset(splits: dict[str, PairedArrays], root: str | Path) -> Path:
    """Write ``{root}/manifest.csv`` plus PNG trees (counts are stored inline)."""
    root = Path(root)
    (root / "primary").mkdir(parents=True, exist_ok=True)
    (root / "privileged").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for split, arrs in splits.items():
            for i, sid in enumerate(arrs.ids):
                prim = f"primary/{sid}.png"
                _write_png(root / prim, arrs.primary[i])
                if arrs.privileged is None:
                    priv = ""
                elif arrs.privileged_kind == "image":
                    priv = f"privileged/{sid}.png"
                    _write_png(root / priv, arrs.privileged[i])
                else:
                    priv = ";".join(repr(float(v)) for v in arrs.privileged[i])
                row = {"id": sid, "primary": prim, "privileged": priv, "split": split}
                row["group"] = arrs.groups[i] if arrs.groups else sid
                for f in FACTORS:
                    row[f"label_{f}"] = int(arrs.labels[f][i]) if f in arrs.labels else ""
                writer.writerow(row)
    return manifest


def read_manifest(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ContractError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        rows = list(reader)
    ids = [r["id"] for r in rows]
    if len(set(ids)) != len(ids):
        raise ContractError("manifest ids are not unique")
    split_of: dict[str, str] = {}
    for r in rows:
        if r["split"] not in SPLITS:
            raise ContractError(f"record {r['id']}: unknown split {r['split']!r}")
        if split_of.setdefault(r["group"], r["split"]) != r["split"]:
            raise ContractError(f"group {r['group']} straddles splits")
    return rows


def load_paired(root: str | Path, split: str, shuffle_seed: int | None = None) -> Iterator[PairedSample]:
    """Stream the samples of one split in manifest order, or shuffled by seed."""
    root = Path(root)
    rows = [r for r in read_manifest(root) if r["split"] == split]
    order = np.arange(len(rows))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(rows))
    for i in order:
        r = rows[i]
        priv = None
        if r["privileged"]:
            if r["privileged"].endswith(".png"):
                priv = _read_png(root / r["privileged"], r["id"])
            else:
                priv = np.array([float(v) for v in r["privileged"].split(";")], dtype=np.float32)
        labels = {f: int(r[f"label_{f}"]) for f in FACTORS if r[f"label_{f}"] != ""}
        yield PairedSample(r["id"], _read_png(root / r["primary"], r["id"]), priv, labels, r["split"], r["group"])


def load_split(root: str | Path, split: str) -> PairedArrays:
    samples = list(load_paired(root, split))
    if not samples:
        raise ContractError(f"split {split!r} is empty in {root}")
    has_priv = [s.x_priv is not None for s in samples]
    if any(has_priv) and not all(has_priv):
        raise ContractError("privileged inputs must be present for all records of a split or none")
    keys = set(samples[0].labels)
    return PairedArrays(
        ids=[s.id for s in samples],
        primary=np.stack([s.x for s in samples]),
        privileged=np.stack([s.x_priv for s in samples]) if all(has_priv) else None,
        labels={k: np.array([s.labels[k] for s in samples]) for k in sorted(keys)},
        groups=[s.group for s in samples],
    )


# ---------------------------------------------------------------------------
# preprocessing recipes


@dataclass(frozen=True)
class PatchRecipe:
    source_size: tuple[int, int] = (984, 984)
    resize_to: tuple[int, int] | None = (1024, 1024)
    patch_size: int = 256

    def __post_init__(self):
        h, w = self.resize_to or self.source_size
        if h % self.patch_size or w % self.patch_size:
            raise ContractError(f"{self.patch_size}px patches do not tile a {h}x{w} image")

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.resize_to or self.source_size
        return h // self.patch_size, w // self.patch_size


def resize_for_recipe(image: np.ndarray, recipe: PatchRecipe) -> np.ndarray:
    if tuple(image.shape[:2]) != tuple(recipe.source_size):
        raise ContractError(f"image is {image.shape[:2]}, recipe expects {recipe.source_size}")
    if recipe.resize_to is None or tuple(recipe.resize_to) == tuple(recipe.source_size):
        return image
    h, w = recipe.resize_to
    out = cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)
    return out.reshape(h, w, *image.shape[2:])


def extract_patches(image: np.ndarray, recipe: PatchRecipe) -> list[np.ndarray]:
    """Resize, then cut into non-overlapping patches in row-major order."""
    img = resize_for_recipe(image, recipe)
    p = recipe.patch_size
    rows, cols = recipe.grid
    return [img[r * p : (r + 1) * p, c * p : (c + 1) * p] for r in range(rows) for c in range(cols)]


def assemble_patches(patches: list[np.ndarray], recipe: PatchRecipe) -> np.ndarray:
    rows, cols = recipe.grid
    return np.concatenate([np.concatenate(patches[r * cols : (r + 1) * cols], axis=1) for r in range(rows)], axis=0)


def filter_genes(counts: np.ndarray, min_samples: int = 50, min_count: float = 5) -> tuple[np.ndarray, np.ndarray]:
    """Keep genes whose count exceeds ``min_count`` in at least ``min_samples`` samples."""
    counts = np.asarray(counts)
    if counts.ndim != 2:
        raise ContractError("counts must be an (n_samples, n_genes) matrix")
    if np.any(counts < 0):
        raise ContractError("counts must be nonnegative")
    keep = np.flatnonzero((counts > min_count).sum(axis=0) >= min_samples)
    return counts[:, keep], keep


def read_counts_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Counts matrix CSV: a header of gene names, one row per sample."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), len(header))


def write_counts_csv(path: str | Path, genes: list[str], counts: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(genes)
        writer.writerows(counts.tolist())


def read_label_mapping(path: str | Path) -> dict[str, str | None]:
    """Two-column CSV ``label,group``; an empty or ``exclude`` group drops the label."""
    mapping: dict[str, str | None] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            g = row["group"].strip()
            mapping[row["label"].strip()] = None if g in ("", "exclude") else g
    return mapping


def apply_label_mapping(labels: list[str], mapping: dict[str, str | None]) -> tuple[list[str], np.ndarray]:
    """Map raw labels to groups; returns the kept groups and their row indices."""
    kept, idx = [], []
    for i, lab in enumerate(labels):
        g = mapping.get(lab)
        if g is not None:
            kept.append(g)
            idx.append(i)
    return kept, np.asarray(idx, dtype=int)
