"""Encoders, projectors and the multi-branch joint-embedding model."""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .augment import ImageAugmentConfig, GeneAugmentConfig, RngStream, augment_batch
from .losses import BranchSet, ContractError


class EncoderKind(str, Enum):
    CONV = "conv"
    MLP = "mlp"
    RESNET50 = "resnet50"


@dataclass(frozen=True)
class NormSpec:
    # Keras convention: running = momentum * running + (1 - momentum) * batch.
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def batchnorm(self, width: int, dims: int = 1) -> nn.Module:
        cls = nn.BatchNorm2d if dims == 2 else nn.BatchNorm1d
        return cls(width, eps=self.bn_epsilon, momentum=1.0 - self.bn_momentum)


@dataclass(frozen=True)
class EncoderSpec:
    kind: EncoderKind = EncoderKind.CONV
    input_shape: tuple[int, ...] = (32, 32, 1)
    channels: tuple[int, ...] = (32, 64, 128, 128)
    widths: tuple[int, ...] = (8192, 8192, 2048)
    seed: int = 0
    norm: NormSpec = field(default_factory=NormSpec)

    def __post_init__(self):
        object.__setattr__(self, "kind", EncoderKind(self.kind))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "widths", tuple(self.widths))
        if isinstance(self.norm, dict):
            object.__setattr__(self, "norm", NormSpec(**self.norm))
        if self.kind is EncoderKind.MLP and len(self.input_shape) != 1:
            raise ContractError("an MLP encoder takes flat vectors")
        if self.kind is not EncoderKind.MLP and len(self.input_shape) != 3:
            raise ContractError("image encoders take [H, W, C] inputs")

    @property
    def repr_dim(self) -> int:
        if self.kind is EncoderKind.CONV:
            return self.channels[-1]
        if self.kind is EncoderKind.MLP:
            return self.widths[-1]
        return 2048

    @classmethod
    def full_scale(cls, input_shape=(256, 256, 3), seed: int = 0) -> "EncoderSpec":
        return cls(kind=EncoderKind.RESNET50, input_shape=input_shape, seed=seed)

    @classmethod
    def counts_mlp(cls, n_genes: int, widths=(8192, 8192, 2048), seed: int = 0) -> "EncoderSpec":
        return cls(kind=EncoderKind.MLP, input_shape=(n_genes,), widths=widths, seed=seed)


@dataclass(frozen=True)
class ProjectorSpec:
    widths: tuple[int, ...] = (8192, 8192, 8192)
    norm: NormSpec = field(default_factory=NormSpec)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if isinstance(self.norm, dict):
            object.__setattr__(self, "norm", NormSpec(**self.norm))
        if not self.widths or min(self.widths) < 1:
            raise ContractError("projector widths must be >= 1")

    @classmethod
    def desk(cls) -> "ProjectorSpec":
        return cls(widths=(512, 512, 512))


@dataclass(frozen=True)
class BranchTopology:
    n_primary: int = 2
    n_privileged: int = 1
    share_primary_weights: bool = True
    use_projectors: bool = True
    # The privileged branch reuses the primary encoder and projector.
    share_privileged_weights: bool = False
    # "primary" feeds x to the privileged branch too (unprivileged TriDeNT).
    privileged_input: str = "privileged"

    def __post_init__(self):
        if self.n_primary not in (1, 2) or self.n_privileged not in (0, 1):
            raise ContractError("supported topologies have N in {1, 2} and M in {0, 1}")
        if self.n_primary + self.n_privileged < 2:
            raise ContractError("need at least two branches")
        if self.privileged_input not in ("privileged", "primary"):
            raise ContractError(f"unknown privileged_input {self.privileged_input!r}")

    @classmethod
    def named(cls, name: str, **kw) -> "BranchTopology":
        presets = {
            "trident": dict(n_primary=2, n_privileged=1),
            "siamese-priv": dict(n_primary=1, n_privileged=1),
            "siamese-unpriv": dict(n_primary=2, n_privileged=0),
            "trident-unpriv": dict(n_primary=2, n_privileged=1, privileged_input="primary"),
        }
        if name not in presets:
            raise ContractError(f"unknown topology {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **kw})


def _mlp(in_dim: int, widths, norm: NormSpec) -> nn.Sequential:
    layers: list[nn.Module] = []
    dims = [in_dim, *widths]
    for i in range(len(widths)):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(widths) - 1:
            layers += [norm.batchnorm(dims[i + 1]), nn.ReLU()]
    return nn.Sequential(*layers)


class ConvEncoder(nn.Module):
    """Stride-2 conv blocks followed by global average pooling."""

    def __init__(self, in_channels: int, channels, norm: NormSpec):
        super().__init__()
        blocks = []
        prev = in_channels
        for ch in channels:
            blocks.append(
                nn.Sequential(nn.Conv2d(prev, ch, 3, stride=2, padding=1, bias=False), norm.batchnorm(ch, 2), nn.ReLU())
            )
            prev = ch
        self.features = nn.Sequential(*blocks)
        self.repr_dim = prev

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).mean(dim=(2, 3))


class ResNetEncoder(nn.Module):
    def __init__(self, in_channels: int):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.features = nn.Sequential(*list(net.children())[:-2])
        self.repr_dim = 2048

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).mean(dim=(2, 3))


class MLPEncoder(nn.Module):
    def __init__(self, in_dim: int, widths, norm: NormSpec):
        super().__init__()
        self.net = _mlp(in_dim, widths, norm)
        self.repr_dim = widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def build_encoder(spec: EncoderSpec) -> nn.Module:
    """Build a freshly initialised encoder; the same seed gives the same weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        if spec.kind is EncoderKind.CONV:
            return ConvEncoder(spec.input_shape[2], spec.channels, spec.norm)
        if spec.kind is EncoderKind.MLP:
            return MLPEncoder(spec.input_shape[0], spec.widths, spec.norm)
        return ResNetEncoder(spec.input_shape[2])


def build_projector(spec: ProjectorSpec | None, in_dim: int, seed: int = 0) -> nn.Module:
    """MLP projector, or the identity when ``spec`` is ``None``."""
    if in_dim < 1:
        raise ContractError("projector input dimension must be >= 1")
    if spec is None:
        return nn.Identity()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _mlp(in_dim, spec.widths, spec.norm)


def to_tensor(batch: np.ndarray) -> torch.Tensor:
    """``(n, H, W, C)`` images become NCHW float tensors; vectors pass through."""
    t = torch.as_tensor(np.ascontiguousarray(batch), dtype=torch.float32)
    return t.permute(0, 3, 1, 2).contiguous() if t.ndim == 4 else t


def encode(encoder: nn.Module, batch: np.ndarray, spec: EncoderSpec | None = None) -> torch.Tensor:
    if spec is not None and tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise ContractError(f"encoder expects inputs of shape {spec.input_shape}, got {batch.shape[1:]}")
    return encoder(to_tensor(batch))


@dataclass
class BranchOutput:
    embeddings: list[torch.Tensor]
    representations: list[torch.Tensor]
    n_primary: int

    def branchset(self) -> BranchSet:
        arrs = [e.detach().double().numpy() for e in self.embeddings]
        return BranchSet(arrs[: self.n_primary], arrs[self.n_primary :])


class JointEmbeddingModel(nn.Module):
    """Primary encoder/projector pairs plus an optional privileged pair.

    With shared primary weights, every primary branch calls the very same
    modules ``encoders[0]`` / ``projectors[0]``.
    """

    def __init__(
        self,
        topology: BranchTopology,
        encoder_spec: EncoderSpec,
        projector_spec: ProjectorSpec | None,
        priv_encoder_spec: EncoderSpec | None = None,
        priv_projector_spec: ProjectorSpec | None = None,
    ):
        super().__init__()
        self.topology = topology
        self.encoder_spec = encoder_spec
        self.priv_encoder_spec = priv_encoder_spec or encoder_spec
        self.projector_spec = projector_spec if topology.use_projectors else None
        self.priv_projector_spec = (priv_projector_spec or projector_spec) if topology.use_projectors else None
        n_sets = 1 if topology.share_primary_weights else topology.n_primary
        self.encoders = nn.ModuleList()
        self.projectors = nn.ModuleList()
        for i in range(n_sets):
            spec = EncoderSpec(**{**_spec_dict(encoder_spec), "seed": encoder_spec.seed + 101 * i})
            enc = build_encoder(spec)
            self.encoders.append(enc)
            self.projectors.append(build_projector(self.projector_spec, enc.repr_dim, seed=spec.seed + 1))
        self.priv_encoder: nn.Module | None = None
        self.priv_projector: nn.Module | None = None
        if topology.n_privileged and not topology.share_privileged_weights:
            pspec = self.priv_encoder_spec
            pspec = EncoderSpec(**{**_spec_dict(pspec), "seed": pspec.seed + 7919})
            self.priv_encoder = build_encoder(pspec)
            self.priv_projector = build_projector(self.priv_projector_spec, self.priv_encoder.repr_dim, seed=pspec.seed + 1)
            if self.priv_projector_spec is None and self.priv_encoder.repr_dim != self.encoders[0].repr_dim:
                raise ContractError("without projectors both encoders must share a representation size")

    @property
    def encoder(self) -> nn.Module:
        return self.encoders[0]

    def branch_modules(self) -> list[tuple[nn.Module, nn.Module]]:
        t = self.topology
        mods = [(self.encoders[min(i, len(self.encoders) - 1)], self.projectors[min(i, len(self.projectors) - 1)]) for i in range(t.n_primary)]
        if t.n_privileged:
            if t.share_privileged_weights:
                mods.append((self.encoders[0], self.projectors[0]))
            else:
                mods.append((self.priv_encoder, self.priv_projector))
        return mods

    def forward(self, inputs: list[torch.Tensor]) -> BranchOutput:
        mods = self.branch_modules()
        if len(inputs) != len(mods):
            raise ContractError(f"expected {len(mods)} branch inputs, got {len(inputs)}")
        reps = [enc(x) for (enc, _), x in zip(mods, inputs)]
        embs = [proj(z) for (_, proj), z in zip(mods, reps)]
        return BranchOutput(embs, reps, self.topology.n_primary)

    def metadata(self) -> dict[str, Any]:
        return {
            "kind": "joint",
            "topology": asdict(self.topology),
            "encoder": _spec_dict(self.encoder_spec),
            "priv_encoder": _spec_dict(self.priv_encoder_spec),
            "projector": None if self.projector_spec is None else _spec_dict(self.projector_spec),
            "priv_projector": None if self.priv_projector_spec is None else _spec_dict(self.priv_projector_spec),
        }


class HeadModel(nn.Module):
    """An encoder with a dense output head (supervised or regression baselines)."""

    def __init__(self, encoder_spec: EncoderSpec, n_outputs: int, task: str):
        super().__init__()
        self.encoder_spec = encoder_spec
        self.task = task
        self.encoder = build_encoder(encoder_spec)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(encoder_spec.seed + 1)
            self.head = nn.Sequential(encoder_spec.norm.batchnorm(self.encoder.repr_dim), nn.Linear(self.encoder.repr_dim, n_outputs))
        self.n_outputs = n_outputs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x))

    def metadata(self) -> dict[str, Any]:
        return {"kind": self.task, "encoder": _spec_dict(self.encoder_spec), "n_outputs": self.n_outputs}


def _spec_dict(spec) -> dict[str, Any]:
    d = asdict(spec)
    for k, v in d.items():
        if isinstance(v, Enum):
            d[k] = v.value
        elif isinstance(v, tuple):
            d[k] = list(v)
    return d


def model_from_metadata(meta: dict[str, Any]) -> nn.Module:
    if meta["kind"] == "joint":
        return JointEmbeddingModel(
            BranchTopology(**meta["topology"]),
            EncoderSpec(**meta["encoder"]),
            None if meta["projector"] is None else ProjectorSpec(**meta["projector"]),
            EncoderSpec(**meta["priv_encoder"]),
            None if meta["priv_projector"] is None else ProjectorSpec(**meta["priv_projector"]),
        )
    return HeadModel(EncoderSpec(**meta["encoder"]), meta["n_outputs"], meta["kind"])


@dataclass(frozen=True)
class BranchAugment:
    primary: ImageAugmentConfig | None = None
    privileged: ImageAugmentConfig | GeneAugmentConfig | None = None


def make_branch_inputs(
    primary: np.ndarray,
    privileged: np.ndarray | None,
    topology: BranchTopology,
    aug: BranchAugment,
    rng: RngStream,
) -> list[np.ndarray]:
    """Independent augmentations of x for each primary branch, then of x* (or x)."""
    views = [augment_batch(primary, aug.primary, rng) for _ in range(topology.n_primary)]
    if topology.n_privileged:
        if topology.privileged_input == "primary":
            views.append(augment_batch(primary, aug.primary, rng))
        else:
            if privileged is None:
                raise ContractError("topology has a privileged branch but no privileged input was supplied")
            views.append(augment_batch(privileged, aug.privileged, rng))
    return views


def forward_branches(
    model: JointEmbeddingModel,
    primary: np.ndarray,
    privileged: np.ndarray | None,
    aug: BranchAugment,
    rng: RngStream,
) -> BranchOutput:
    views = make_branch_inputs(primary, privileged, model.topology, aug, rng)
    return model([to_tensor(v) for v in views])


# ---------------------------------------------------------------------------
# checkpoints: a zip of raw little-endian float32 arrays plus a JSON manifest


def save_checkpoint(path: str | Path, model: nn.Module, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, tensor) in enumerate(model.state_dict().items()):
            arr = tensor.detach().cpu().numpy().astype("<f4")
            entry = f"arrays/{i:04d}.f32"
            zf.writestr(entry, arr.tobytes(order="C"))
            arrays[name] = {"shape": list(arr.shape), "dtype": "<f4", "file": entry}
        manifest = {"model": model.metadata(), "arrays": arrays, "metadata": extra or {}}
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict[str, Any]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        model = model_from_metadata(manifest["model"])
        reference = model.state_dict()
        state = {}
        for name, info in manifest["arrays"].items():
            arr = np.frombuffer(zf.read(info["file"]), dtype=info["dtype"]).reshape(info["shape"])
            state[name] = torch.from_numpy(arr.copy()).to(reference[name].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, manifest["metadata"]


def parameter_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def read_checkpoint_manifest(path: str | Path) -> dict[str, Any]:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))

