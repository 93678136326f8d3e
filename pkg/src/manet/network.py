"""U-Net style encoder with a base (segmentation) and a manifold decoder.

Parameter names carry the branch as prefix: ``encoder.*``, ``base.*`` and
``manifold.*``. The base branch reads only encoder features and its own
parameters, so the manifold branch can be dropped for inference.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

MANIFOLD_CHANNELS = 2
MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"
CHECKPOINT_FORMAT = "manet-checkpoint-v1"


class NetworkError(ValueError):
    pass


@dataclass
class NetworkConfig:
    dims: int = 2
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 8
    depth: int = 2

    def validate(self):
        if self.dims not in (2, 3):
            raise NetworkError(f"dims must be 2 or 3, got {self.dims}")
        if self.depth < 2:
            raise NetworkError(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4:
            raise NetworkError(f"base_width must be >= 4, got {self.base_width}")
        if self.num_classes < 2:
            raise NetworkError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise NetworkError(f"in_channels must be >= 1, got {self.in_channels}")
        return self


def _layers(dims):
    if dims == 2:
        return nn.Conv2d, nn.InstanceNorm2d, nn.MaxPool2d
    return nn.Conv3d, nn.InstanceNorm3d, nn.MaxPool3d


class ConvBlock(nn.Sequential):
    """(conv3 -> instance norm -> ReLU) x 2. Convs carry no bias; the norm's affine shift replaces it."""

    def __init__(self, dims, in_ch, out_ch):
        conv, norm, _ = _layers(dims)
        super().__init__(
            conv(in_ch, out_ch, 3, padding=1, bias=False),
            norm(out_ch, affine=True),
            nn.ReLU(),
            conv(out_ch, out_ch, 3, padding=1, bias=False),
            norm(out_ch, affine=True),
            nn.ReLU(),
        )


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        _, _, pool = _layers(cfg.dims)
        widths = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        self.stages = nn.ModuleList()
        in_ch = cfg.in_channels
        for w in widths:
            self.stages.append(ConvBlock(cfg.dims, in_ch, w))
            in_ch = w
        self.pool = pool(2)

    def forward(self, x):
        features = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.pool(x)
            x = stage(x)
            features.append(x)
        return features


class UpBlock(nn.Module):
    """Nearest upsample, conv to halve channels, concat skip, conv block."""

    def __init__(self, dims, in_ch, out_ch):
        super().__init__()
        conv, norm, _ = _layers(dims)
        self.reduce = nn.Sequential(
            conv(in_ch, out_ch, 3, padding=1, bias=False),
            norm(out_ch, affine=True),
            nn.ReLU(),
        )
        self.block = ConvBlock(dims, 2 * out_ch, out_ch)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.reduce(x)
        return self.block(torch.cat([skip, x], dim=1))


class Decoder(nn.Module):
    def __init__(self, cfg, out_channels):
        super().__init__()
        conv, _, _ = _layers(cfg.dims)
        widths = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        self.ups = nn.ModuleList(
            UpBlock(cfg.dims, widths[i + 1], widths[i]) for i in reversed(range(cfg.depth))
        )
        self.head = conv(widths[0], out_channels, 1)

    def forward(self, features):
        x = features[-1]
        for up, skip in zip(self.ups, reversed(features[:-1])):
            x = up(x, skip)
        return self.head(x)


class MANet(nn.Module):
    def __init__(self, cfg, with_manifold=True):
        super().__init__()
        self.cfg = cfg.validate()
        self.encoder = Encoder(cfg)
        self.base = Decoder(cfg, cfg.num_classes)
        self.manifold = Decoder(cfg, MANIFOLD_CHANNELS) if with_manifold else None

    @property
    def has_manifold(self):
        return self.manifold is not None

    def check_input(self, x):
        cfg = self.cfg
        if x.ndim != cfg.dims + 2:
            raise NetworkError(f"expected a [B, C, *spatial] tensor with {cfg.dims} spatial dims, got {tuple(x.shape)}")
        if x.shape[1] != cfg.in_channels:
            raise NetworkError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        step = 2**cfg.depth
        if any(s % step for s in x.shape[2:]):
            raise NetworkError(f"spatial size {tuple(x.shape[2:])} not divisible by 2^depth = {step}")

    def forward(self, x, with_manifold=True):
        """Return ``(seg_logits, manifold_logits)``; the latter is None when skipped or stripped."""
        self.check_input(x)
        features = self.encoder(x)
        seg = self.base(features)
        mf = self.manifold(features) if (with_manifold and self.manifold is not None) else None
        return seg, mf


def build_network(cfg, seed=0, with_manifold=True):
    """Deterministic construction: the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = MANet(cfg, with_manifold=True)
    if not with_manifold:
        net.manifold = None
    return net


def argmax_lowest(logits, dim=1):
    """Argmax with ties going to the lowest index."""
    # torch.argmax does not document its tie rule; scan channels explicitly
    best = logits.select(dim, 0)
    idx = torch.zeros_like(best, dtype=torch.long)
    for c in range(1, logits.shape[dim]):
        v = logits.select(dim, c)
        better = v > best
        best = torch.where(better, v, best)
        idx = torch.where(better, torch.full_like(idx, c), idx)
    return idx


@torch.no_grad()
def predict(net, x):
    """Label map from the base branch only. ``x``: [B, C, *spatial] tensor or array."""
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
    x = x.to(next(net.parameters()).dtype)
    seg, _ = net(x, with_manifold=False)
    return argmax_lowest(seg)


def parameter_groups(names):
    groups = {"encoder": 0, "base": 0, "manifold": 0}
    for n in names:
        groups[n.split(".", 1)[0]] += 1
    return groups


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(net, directory, extra=None):
    """Write ``manifest.json`` + ``params.bin`` (little-endian f32, concatenated in manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in net.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "network": asdict(net.cfg),
        "params": entries,
        "extra": extra or {},
    }
    (directory / PARAMS_NAME).write_bytes(b"".join(chunks))
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return directory


def read_manifest(directory):
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise NetworkError(f"checkpoint manifest missing: {path}")
    manifest = json.loads(path.read_text())
    if "params" not in manifest or "network" not in manifest:
        raise NetworkError(f"{path}: not a parameter manifest")
    return manifest


def load_state(directory):
    """Return ``(manifest, {name: float32 array})``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob_path = directory / PARAMS_NAME
    if not blob_path.is_file():
        raise NetworkError(f"checkpoint parameters missing: {blob_path}")
    blob = blob_path.read_bytes()
    expected = sum(e["nbytes"] for e in manifest["params"])
    if len(blob) != expected:
        raise NetworkError(f"{blob_path}: expected {expected} bytes, found {len(blob)}")
    state = {}
    for e in manifest["params"]:
        if e["dtype"] != "f32":
            raise NetworkError(f"parameter {e['name']}: unsupported dtype {e['dtype']}")
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        state[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return manifest, state


def load_checkpoint(directory):
    manifest, state = load_state(directory)
    cfg = NetworkConfig(**manifest["network"])
    with_manifold = any(k.startswith("manifold.") for k in state)
    net = MANet(cfg, with_manifold=with_manifold)
    expected = set(net.state_dict())
    if set(state) != expected:
        missing = sorted(expected - set(state))[:3]
        unexpected = sorted(set(state) - expected)[:3]
        raise NetworkError(f"manifest mismatch: missing {missing}, unexpected {unexpected}")
    net.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    return net


def strip_manifold_branch(src, dst):
    """Copy checkpoint ``src`` to ``dst`` without any ``manifold.*`` parameter."""
    manifest, state = load_state(src)
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for e in manifest["params"]:
        if e["name"].startswith("manifold."):
            continue
        arr = np.ascontiguousarray(state[e["name"]], dtype="<f4")
        entries.append({**e, "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {**manifest, "params": entries}
    (dst / PARAMS_NAME).write_bytes(b"".join(chunks))
    (dst / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return dst
