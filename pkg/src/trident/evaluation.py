"""Frozen-encoder probing and representation analyses."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import ImageAugmentConfig, augment_batch, make_rng
from .data import PairedArrays
from .losses import ContractError
from .models import to_tensor
from .training import class_weights, lr_schedule

log = logging.getLogger(__name__)

FRACTIONS = (1.0, 0.5, 0.2, 0.1, 0.05, 0.01, 0.002)
RESULT_FIELDS = ["method", "privileged", "loss", "task", "fraction", "accuracy"]


class UnsupportedOperation(ContractError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    class_weighting: bool = True
    fraction: float = 1.0
    seed: int = 0
    batch_size: int = 64
    max_lr: float = 1e-3
    warmup_fraction: float = 0.1
    aug: ImageAugmentConfig | None = field(default_factory=ImageAugmentConfig)

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ContractError("fraction must lie in (0, 1]")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")


# ---------------------------------------------------------------------------
# representations


@torch.no_grad()
def encode_array(encoder: nn.Module, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = encoder.training
    encoder.eval()
    out = [encoder(to_tensor(x[i : i + batch_size])).numpy() for i in range(0, len(x), batch_size)]
    encoder.train(was_training)
    return np.concatenate(out).astype(np.float32)


@dataclass
class RepresentationMatrix:
    values: np.ndarray
    sample_ids: list[str]
    checkpoint_id: str = ""

    def save(self, path: str | Path) -> Path:
        """Raw little-endian float32 matrix plus a ``.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
        sidecar = {
            "shape": list(self.values.shape),
            "dtype": "<f4",
            "sample_ids": self.sample_ids,
            "checkpoint_id": self.checkpoint_id,
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RepresentationMatrix":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        values = np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"]).copy()
        return cls(values, meta["sample_ids"], meta["checkpoint_id"])


def extract_representations(encoder: nn.Module, data: PairedArrays, checkpoint_id: str = "") -> RepresentationMatrix:
    """Un-augmented forward pass over ``data`` in manifest order."""
    return RepresentationMatrix(encode_array(encoder, data.primary), list(data.ids), checkpoint_id)


# ---------------------------------------------------------------------------
# linear probes


def stratified_subsample(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-stratified subsample (largest-remainder allocation)."""
    labels = np.asarray(labels)
    if fraction >= 1.0:
        return np.arange(len(labels))
    classes, counts = np.unique(labels, return_counts=True)
    total = max(2, int(round(fraction * len(labels))))
    quota = counts * total / len(labels)
    take = np.floor(quota).astype(int)
    for k in np.argsort(-(quota - take), kind="stable")[: total - take.sum()]:
        take[k] += 1
    if np.any(take == 0):
        warnings.warn(
            f"fraction {fraction} leaves classes {classes[take == 0].tolist()} without training samples",
            stacklevel=2,
        )
    chosen = [rng.choice(np.flatnonzero(labels == c), size=t, replace=False) for c, t in zip(classes, take) if t]
    return np.sort(np.concatenate(chosen))


class ProbeHead(nn.Module):
    """Batch normalisation followed by one dense softmax layer."""

    def __init__(self, in_dim: int, n_classes: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(in_dim)
        self.fc = nn.Linear(in_dim, n_classes)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc(self.bn(z))


@dataclass
class ProbeResult:
    label: str
    fraction: float
    accuracy: float
    head: ProbeHead
    n_train: int


def train_probes(
    encoder: nn.Module,
    train: PairedArrays,
    test: PairedArrays,
    cfg: ProbeConfig,
    labels=("a",),
    n_classes: int | None = None,
) -> dict[str, ProbeResult]:
    """Train one probe head per label on frozen representations.

    The training subset is stratified on the first label. Training inputs are
    augmented afresh each epoch; the test split is encoded without augmentation.
    """
    labels = list(labels)
    for lab in labels:
        if lab not in train.labels or lab not in test.labels:
            raise ContractError(f"label {lab!r} missing from train or test data")
    rng = make_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    idx = stratified_subsample(train.labels[labels[0]], cfg.fraction, rng)
    x_train = train.primary[idx]
    n = len(idx)
    bs = min(cfg.batch_size, n)
    per_epoch = n // bs
    total = cfg.epochs * per_epoch

    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    try:
        repr_dim = encode_array(encoder, x_train[:2]).shape[1]
        heads, opts, weights, targets = {}, {}, {}, {}
        for lab in labels:
            y = np.asarray(train.labels[lab])[idx]
            k = n_classes or int(max(train.labels[lab].max(), test.labels[lab].max())) + 1
            heads[lab] = ProbeHead(repr_dim, k)
            opts[lab] = torch.optim.Adam(heads[lab].parameters(), lr=0.0)
            weights[lab] = torch.as_tensor(class_weights(y, k), dtype=torch.float32) if cfg.class_weighting else None
            targets[lab] = torch.as_tensor(y, dtype=torch.long)
        step = 0
        for _ in range(cfg.epochs):
            z = torch.from_numpy(encode_array(encoder, augment_batch(x_train, cfg.aug, rng)))
            order = rng.permutation(n)
            for k in range(per_epoch):
                b = torch.as_tensor(order[k * bs : (k + 1) * bs])
                lr = lr_schedule(step, total, cfg.max_lr, cfg.warmup_fraction)
                for lab in labels:
                    heads[lab].train()
                    for g in opts[lab].param_groups:
                        g["lr"] = lr
                    loss = F.cross_entropy(heads[lab](z[b]), targets[lab][b], weight=weights[lab])
                    opts[lab].zero_grad(set_to_none=True)
                    loss.backward()
                    opts[lab].step()
                step += 1
        z_test = torch.from_numpy(encode_array(encoder, test.primary))
        results = {}
        for lab in labels:
            heads[lab].eval()
            with torch.no_grad():
                pred = heads[lab](z_test).argmax(1).numpy()
            acc = float(np.mean(pred == np.asarray(test.labels[lab])))
            results[lab] = ProbeResult(lab, cfg.fraction, acc, heads[lab], n)
    finally:
        for p in encoder.parameters():
            p.requires_grad_(True)
    return results


def train_probe(encoder: nn.Module, train: PairedArrays, test: PairedArrays, cfg: ProbeConfig, label: str = "a") -> ProbeResult:
    return train_probes(encoder, train, test, cfg, [label])[label]


def fraction_sweep(
    encoder: nn.Module,
    train: PairedArrays,
    test: PairedArrays,
    cfg: ProbeConfig,
    label: str,
    fractions=FRACTIONS,
) -> dict[float, float]:
    """Probe accuracy for each classifier-training fraction."""
    out = {}
    for frac in fractions:
        sub = ProbeConfig(**{**cfg.__dict__, "fraction": frac})
        out[frac] = train_probe(encoder, train, test, sub, label).accuracy
    return out


# ---------------------------------------------------------------------------
# representation / gene correlations


@dataclass
class CorrelationReport:
    scores: np.ndarray  # (G,) max |corr| per gene
    argmax: np.ndarray  # (G,) element index achieving it
    bin_edges: np.ndarray | None = None
    bin_counts: np.ndarray | None = None
    genes: list[str] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = self.genes or [f"gene_{i}" for i in range(len(self.scores))]
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gene", "score", "element"])
            for g, s, j in zip(names, self.scores, self.argmax):
                writer.writerow([g, repr(float(s)), int(j)])
        return path


def _standardise(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    norm = np.sqrt(np.sum(xc**2, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, xc / norm, 0.0)


def correlation_matrix(reps: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Pearson correlation of every gene (rows) with every element (columns).

    Zero-variance genes or elements correlate as 0.
    """
    return _standardise(np.asarray(counts, np.float64)).T @ _standardise(np.asarray(reps, np.float64))


def gene_correlations(reps, counts, genes: list[str] | None = None) -> CorrelationReport:
    values = reps.values if isinstance(reps, RepresentationMatrix) else np.asarray(reps)
    counts = np.asarray(counts)
    if values.ndim != 2 or counts.ndim != 2:
        raise ContractError("representations and counts must be 2-D")
    if values.shape[0] != counts.shape[0]:
        raise ContractError(f"row mismatch: {values.shape[0]} representations vs {counts.shape[0]} count rows")
    if values.shape[0] < 3:
        raise ContractError("need at least 3 samples for a correlation")
    c = np.abs(correlation_matrix(values, counts))
    arg = np.argmax(c, axis=1)
    scores = np.clip(c[np.arange(c.shape[0]), arg], 0.0, 1.0)
    report = CorrelationReport(scores, arg, genes=list(genes or []))
    if len(scores) >= 2:
        report.bin_edges, report.bin_counts = correlation_histogram(report)
    return report


def histogram_bin_count(values: np.ndarray) -> int:
    """max(Sturges, Freedman-Diaconis); Sturges alone when the IQR is 0."""
    v = np.asarray(values, np.float64)
    n = v.size
    sturges = math.ceil(math.log2(n)) + 1
    q75, q25 = np.percentile(v, [75, 25])
    iqr = q75 - q25
    if iqr == 0:
        return sturges
    width = 2.0 * iqr * n ** (-1.0 / 3.0)
    return max(sturges, math.ceil((v.max() - v.min()) / width))


def correlation_histogram(report: CorrelationReport | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = report.scores if isinstance(report, CorrelationReport) else np.asarray(report)
    if scores.size < 2:
        raise ContractError("need at least two scores for a histogram")
    k = histogram_bin_count(scores)
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(scores, bins=np.linspace(lo, hi, k + 1))
    return edges, counts


# ---------------------------------------------------------------------------
# summed GradCAM


@dataclass
class GradCAMResult:
    heatmap: np.ndarray  # (H, W), min-max normalised
    raw: np.ndarray  # (H, W), upsampled sum before normalisation
    per_element: np.ndarray  # (D, h, w) ReLU'd map of every representation element


def _features_and_head(encoder: nn.Module):
    feats = getattr(encoder, "features", None)
    if feats is None:
        raise UnsupportedOperation(f"{type(encoder).__name__} has no spatial feature layer for GradCAM")
    pool = getattr(encoder, "from_features", None) or (lambda a: a.mean(dim=(2, 3)))
    return feats, pool


def gradcam_sum(encoder: nn.Module, image: np.ndarray) -> GradCAMResult:
    """GradCAM treating every representation element as a class, summed."""
    feats, pool = _features_and_head(encoder)
    was_training = encoder.training
    encoder.eval()
    try:
        x = to_tensor(np.asarray(image)[None])
        with torch.no_grad():
            acts = feats(x)[0]  # (K, h, w)
        jac = torch.autograd.functional.jacobian(lambda a: pool(a[None])[0], acts)  # (D, K, h, w)
    finally:
        encoder.train(was_training)
    weights = jac.mean(dim=(2, 3))  # (D, K)
    per_element = F.relu(torch.einsum("dk,khw->dhw", weights, acts))
    h, w = x.shape[-2:]
    raw = F.interpolate(per_element.sum(0)[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    raw = raw.double().numpy()
    span = raw.max() - raw.min()
    heat = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    return GradCAMResult(heat, raw, per_element.double().numpy())


def upsample_map(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(m, dtype=torch.float64)[None, None]
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def write_heatmap_png(path: str | Path, heatmap: np.ndarray) -> Path:
    import cv2

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), np.round(np.clip(heatmap, 0, 1) * 255).astype(np.uint8))
    return path


# ---------------------------------------------------------------------------
# result tables


def method_name(meta: dict) -> tuple[str, bool]:
    """Human-readable method and privileged flag from checkpoint metadata."""
    kind = meta.get("kind", "joint")
    if kind == "supervised":
        return "Supervised", False
    if kind == "gene_regression":
        return "Direct Gene Prediction", True
    topo = meta.get("topology", {})
    n, m = topo.get("n_primary", 2), topo.get("n_privileged", 0)
    real_priv = m > 0 and topo.get("privileged_input", "privileged") == "privileged"
    if n == 2 and m == 1:
        return ("TriDeNT" if real_priv else "TriDeNT (Unprivileged)"), real_priv
    if n == 1 and m == 1:
        return "Siamese (Privileged)", real_priv
    return "Siamese (Unprivileged)", False


def write_results_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in RESULT_FIELDS})
    return path


def read_results_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_FIELDS:
            raise ContractError(f"{path}: header must be {','.join(RESULT_FIELDS)}")
        return [
            {**r, "fraction": float(r["fraction"]), "accuracy": float(r["accuracy"]), "privileged": r["privileged"] == "True"}
            for r in reader
        ]


def loss_label(model_meta: dict, extra: dict) -> str:
    """Loss family recorded for a checkpoint (``crossentropy``/``mse`` for head baselines)."""
    kind = model_meta.get("kind", "joint")
    if kind == "supervised":
        return "crossentropy"
    if kind == "gene_regression":
        return "mse"
    return extra.get("run_config", {}).get("loss", {}).get("family", "vicreg")


def evaluate_suite(
    checkpoints: dict[str, str | Path],
    train: PairedArrays,
    test: PairedArrays,
    tasks=("a", "b", "c"),
    fractions=(1.0,),
    cfg: ProbeConfig | None = None,
) -> list[dict]:
    """Probe every checkpoint on every (task, fraction); missing checkpoints are skipped."""
    from .models import load_checkpoint

    cfg = cfg or ProbeConfig()
    rows = []
    for key, path in checkpoints.items():
        if not Path(path).exists():
            warnings.warn(f"checkpoint {key} not found at {path}; skipping", stacklevel=2)
            continue
        model, extra = load_checkpoint(path)
        meta = model.metadata()
        method, priv = method_name(meta)
        loss = loss_label(meta, extra)
        for frac in fractions:
            sub = ProbeConfig(**{**cfg.__dict__, "fraction": frac})
            accs = train_probes(model.encoder, train, test, sub, tasks)
            for task in tasks:
                rows.append({"method": method, "privileged": priv, "loss": loss, "task": task, "fraction": frac, "accuracy": accs[task].accuracy})
    return rows


def plot_fraction_curves(rows: list[dict], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tasks = sorted({r["task"] for r in rows})
    fig, axes = plt.subplots(1, len(tasks), figsize=(4.5 * len(tasks), 3.5), squeeze=False)
    for ax, task in zip(axes[0], tasks):
        series: dict[tuple, list] = {}
        for r in rows:
            if r["task"] == task:
                series.setdefault((r["method"], r["loss"]), []).append((r["fraction"], r["accuracy"]))
        for (method, loss), pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{method} / {loss}")
        ax.set_xscale("log")
        ax.set_xlabel("classifier training fraction")
        ax.set_ylabel("accuracy")
        ax.set_title(f"task {task}")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_histogram(report: CorrelationReport, path: str | Path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    edges, counts = correlation_histogram(report)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.stairs(counts, edges, fill=True)
    ax.set_xlabel("max |correlation|")
    ax.set_ylabel("genes")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
