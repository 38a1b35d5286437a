"""Convolutional tagger: multi-shape front end, residual temporal back end,
normalised 512-unit embedding, 10-way softmax head.

The front end runs vertical (timbral) and horizontal (temporal) filters in
parallel over the mel input, max-pools each branch across the entire
frequency axis, and concatenates along channels, so the back end sees a
purely temporal signal.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigMismatch, CorruptCheckpoint, InvalidConfig, ShapeMismatch

CHECKPOINT_FORMAT = "genretag-checkpoint"

# Modules retrained from scratch in the transfer-learning regime; everything
# else is the frozen feature extractor.
HEAD_MODULES = ("embed", "embed_ln", "head")


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 96
    n_classes: int = 10
    embedding_dim: int = 512
    timbral_heights: tuple[int, ...] = (38, 86)
    timbral_width: int = 7
    temporal_widths: tuple[int, ...] = (32, 64, 128)
    front_channels: int = 32
    backend_channels: int = 64
    backend_kernel: int = 7
    backend_layers: int = 3

    def validate(self) -> None:
        if self.n_mels < 1 or self.n_classes < 2 or self.embedding_dim < 1:
            raise InvalidConfig("n_mels, n_classes, embedding_dim must be positive (classes >= 2)")
        if self.front_channels < 1 or self.backend_channels < 1:
            raise InvalidConfig("channel counts must be positive")
        if self.backend_kernel < 1 or self.backend_layers < 1:
            raise InvalidConfig("backend kernel and layer count must be positive")
        if self.timbral_width < 1 or any(w < 1 for w in self.temporal_widths):
            raise InvalidConfig("kernel widths must be positive")
        if not self.timbral_heights or not self.temporal_widths:
            raise InvalidConfig("at least one timbral and one temporal shape required")
        for h in self.timbral_heights:
            if not 1 <= h <= self.n_mels:
                raise InvalidConfig(f"timbral height {h} exceeds the {self.n_mels}-band input")


def _pad_time(x: torch.Tensor, kernel: int) -> torch.Tensor:
    # Same-length output in time for odd or even kernels.
    return F.pad(x, ((kernel - 1) // 2, kernel // 2))


class _ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, T) tensors."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel)
        self.norm = _ChannelLayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv(_pad_time(x, self.conv.kernel_size[0])))
        return x + F.relu(h)


class TaggerNetwork(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.input_norm = nn.LayerNorm(config.n_mels)
        self.timbral = nn.ModuleList(
            nn.Conv2d(1, config.front_channels, (h, config.timbral_width))
            for h in config.timbral_heights
        )
        self.temporal = nn.ModuleList(
            nn.Conv2d(1, config.front_channels, (1, w)) for w in config.temporal_widths
        )
        n_branches = len(config.timbral_heights) + len(config.temporal_widths)
        front_out = config.front_channels * n_branches
        self.front_norm = _ChannelLayerNorm(front_out)
        self.backend_entry = nn.Conv1d(front_out, config.backend_channels, config.backend_kernel)
        self.backend_entry_norm = _ChannelLayerNorm(config.backend_channels)
        self.backend = nn.ModuleList(
            _ResidualBlock(config.backend_channels, config.backend_kernel)
            for _ in range(config.backend_layers)
        )
        self.embed = nn.Linear(2 * config.backend_channels, config.embedding_dim)
        self.embed_ln = nn.LayerNorm(config.embedding_dim)
        self.head = nn.Linear(config.embedding_dim, config.n_classes)

    def front_end(self, x: torch.Tensor) -> torch.Tensor:
        """(B, n_mels, T) -> (B, channels, T); height collapses to 1 via the
        full-frequency max-pool regardless of filter shape."""
        x = self.input_norm(x.transpose(1, 2)).transpose(1, 2).unsqueeze(1)
        branches = []
        for conv in (*self.timbral, *self.temporal):
            h = conv(_pad_time(x, conv.kernel_size[1]))
            branches.append(F.relu(h).amax(dim=2))
        return torch.cat(branches, dim=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 3:
            raise ShapeMismatch(f"expected (batch, {self.config.n_mels}, T), got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.n_mels:
            raise ShapeMismatch(f"expected {self.config.n_mels} mel bands, got {x.shape[1]}")
        h = self.front_norm(self.front_end(x))
        h = F.relu(self.backend_entry_norm(self.backend_entry(_pad_time(h, self.config.backend_kernel))))
        for block in self.backend:
            h = block(h)
        pooled = torch.cat([h.amax(dim=2), h.mean(dim=2)], dim=1)
        embedding = F.relu(self.embed_ln(self.embed(pooled)))
        probs = F.softmax(self.head(embedding), dim=1)
        return embedding, probs


def build_model(config: ModelConfig | None = None, seed: int = 0) -> TaggerNetwork:
    """Construct the network with seeded fan-in-scaled uniform init."""
    config = config or ModelConfig()
    torch.manual_seed(seed)
    return TaggerNetwork(config)


def forward_batch(net: TaggerNetwork, mels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference convenience: numpy in, (embeddings, probs) numpy out."""
    net.eval()
    with torch.no_grad():
        emb, probs = net(torch.as_tensor(np.ascontiguousarray(mels), dtype=torch.float32))
    return emb.numpy(), probs.numpy()


def freeze_feature_layers(net: TaggerNetwork) -> TaggerNetwork:
    """Leave only the embedding dense layer and the classifier trainable."""
    for name, param in net.named_parameters():
        param.requires_grad = name.split(".", 1)[0] in HEAD_MODULES
    return net


def trainable_parameters(net: TaggerNetwork):
    return [p for p in net.parameters() if p.requires_grad]


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def checkpoint_from_network(net: TaggerNetwork, meta: dict | None = None) -> ModelCheckpoint:
    params = {name: tensor.detach().cpu().numpy().copy() for name, tensor in net.state_dict().items()}
    return ModelCheckpoint(config=net.config, params=params, meta=dict(meta or {}))


def save_checkpoint(source: TaggerNetwork | ModelCheckpoint, path: str | Path, meta: dict | None = None) -> Path:
    """Write an archive of index.json plus one raw little-endian float32 blob
    per parameter; the round trip is bit-exact."""
    ckpt = source if isinstance(source, ModelCheckpoint) else checkpoint_from_network(source, meta)
    if meta is not None and isinstance(source, ModelCheckpoint):
        ckpt = ModelCheckpoint(config=ckpt.config, params=ckpt.params, meta=dict(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": asdict(ckpt.config),
        "meta": ckpt.meta,
        "params": [
            {"name": name, "shape": list(arr.shape), "dtype": "<f4"}
            for name, arr in ckpt.params.items()
        ],
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("index.json", json.dumps(index, indent=1))
        for name, arr in ckpt.params.items():
            zf.writestr(f"params/{name}.bin", np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None) -> ModelCheckpoint:
    """Read a checkpoint archive back; validates structure and, when given,
    architecture compatibility."""
    path = Path(path)
    if not path.is_file():
        raise CorruptCheckpoint(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "index.json" not in names:
                raise CorruptCheckpoint(f"{path} has no index.json")
            index = json.loads(zf.read("index.json"))
            if index.get("format") != CHECKPOINT_FORMAT:
                raise CorruptCheckpoint(f"{path} is not a {CHECKPOINT_FORMAT} archive")
            raw_config = dict(index["config"])
            for key in ("timbral_heights", "temporal_widths"):
                raw_config[key] = tuple(raw_config[key])
            config = ModelConfig(**raw_config)
            params: dict[str, np.ndarray] = {}
            seen = set()
            for entry in index["params"]:
                name, shape = entry["name"], tuple(entry["shape"])
                if name in seen:
                    raise CorruptCheckpoint(f"parameter {name} listed twice in {path}")
                seen.add(name)
                member = f"params/{name}.bin"
                if member not in names:
                    raise CorruptCheckpoint(f"{path} is missing blob for {name}")
                raw = zf.read(member)
                expected = int(np.prod(shape, dtype=np.int64)) * 4
                if len(raw) != expected:
                    raise CorruptCheckpoint(
                        f"blob for {name} holds {len(raw)} bytes, expected {expected}"
                    )
                params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except zipfile.BadZipFile as exc:
        raise CorruptCheckpoint(f"{path} is not a readable archive: {exc}") from exc
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path} has a malformed index: {exc}") from exc
    ckpt = ModelCheckpoint(config=config, params=params, meta=dict(index.get("meta", {})))
    _check_params_match_config(ckpt, path)
    if expect_config is not None and config != expect_config:
        raise ConfigMismatch(
            f"checkpoint {path} was built for {config}, run expects {expect_config}"
        )
    return ckpt


def _check_params_match_config(ckpt: ModelCheckpoint, path: Path) -> None:
    reference = TaggerNetwork(ckpt.config).state_dict()
    ckpt_names = set(ckpt.params)
    ref_names = set(reference)
    if ckpt_names != ref_names:
        missing = sorted(ref_names - ckpt_names)[:3]
        extra = sorted(ckpt_names - ref_names)[:3]
        raise ConfigMismatch(f"{path}: parameter set mismatch (missing {missing}, extra {extra})")
    for name, tensor in reference.items():
        if tuple(tensor.shape) != ckpt.params[name].shape:
            raise ConfigMismatch(
                f"{path}: {name} has shape {ckpt.params[name].shape}, "
                f"config implies {tuple(tensor.shape)}"
            )


def network_from_checkpoint(ckpt: ModelCheckpoint) -> TaggerNetwork:
    net = TaggerNetwork(ckpt.config)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.params.items()}
    net.load_state_dict(state, strict=True)
    return net
