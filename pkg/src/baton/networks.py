"""Music encoder, ST-GCN motion encoder, pairing head, random mask and denoiser.

Also the checkpoint format for a :class:`ModelBundle`::

    b"BATONCKP"                     8-byte magic
    uint32 LE                       header length in bytes
    header                          UTF-8 JSON: format_version, stage, configs,
                                    metadata, tensor index [{name, shape}]
    float32 LE data                 tensors concatenated in index order
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import COCO_UPPER_BODY, DEFAULT_BANDS, MUSIC_PER_MOTION, N_JOINTS, POSE_DIM, JointLayout

CHECKPOINT_MAGIC = b"BATONCKP"
CHECKPOINT_VERSION = 1
VELOCITY_SCALE = 30.0


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match its declared configuration."""


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class MusicEncoderConfig:
    n_bands: int = DEFAULT_BANDS
    n_groups: int = 3
    residual_layers_per_group: int = 3
    channels: tuple[int, ...] = (64, 128, 256)
    temporal_pool_factors: tuple[int, ...] = (3, 1, 1)
    out_dim: int = 256
    kernel_size: int = 3
    dilation_base: int = 2

    def __post_init__(self):
        if self.dilation_base < 1:
            raise ValueError("dilation_base must be >= 1")
        if len(self.channels) != self.n_groups or len(self.temporal_pool_factors) != self.n_groups:
            raise ValueError("channels and temporal_pool_factors need one entry per group")
        if math.prod(self.temporal_pool_factors) != MUSIC_PER_MOTION:
            raise ValueError("temporal pooling must reduce 90 Hz music to 30 fps (product 3)")


@dataclass(frozen=True)
class MotionEncoderConfig:
    st_gcn_layers: int = 4
    channels: tuple[int, ...] = (32, 64, 128, 256)
    temporal_kernel: int = 9
    out_dim: int = 256
    layout: JointLayout = COCO_UPPER_BODY
    dilation_base: int = 2

    def __post_init__(self):
        if self.dilation_base < 1:
            raise ValueError("dilation_base must be >= 1")
        if len(self.channels) != self.st_gcn_layers:
            raise ValueError("need one channel count per ST-GCN layer")
        if self.temporal_kernel % 2 != 1:
            raise ValueError("temporal kernel must be odd")
        adj = self.layout.adjacency()
        reach = np.linalg.matrix_power(adj + np.eye(N_JOINTS), N_JOINTS)
        if (reach == 0).any():
            raise ValueError("skeleton graph must be connected")


@dataclass(frozen=True)
class PairHeadConfig:
    hidden: int = 256
    # initial output probability; 1/32 is the true-pair rate of a 32-clip batch
    prior: float = 1.0 / 32.0

    def __post_init__(self):
        if not 0.0 < self.prior < 1.0:
            raise ValueError("prior must be in (0, 1)")


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    model_dim: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    timestep_embedding_dim: int = 256
    music_dim: int = 256
    pose_dim: int = POSE_DIM

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")


@dataclass(frozen=True)
class ModelConfig:
    music: MusicEncoderConfig = MusicEncoderConfig()
    motion: MotionEncoderConfig = MotionEncoderConfig()
    head: PairHeadConfig = PairHeadConfig()
    denoiser: DenoiserConfig = DenoiserConfig()

    def __post_init__(self):
        if self.denoiser.music_dim != self.music.out_dim:
            raise ValueError("denoiser.music_dim must equal music.out_dim")

    @classmethod
    def full(cls, n_bands: int = DEFAULT_BANDS) -> "ModelConfig":
        """Reference sizes (256-wide encoders and denoiser)."""
        return cls(music=MusicEncoderConfig(n_bands=n_bands))

    @classmethod
    def desk(cls, n_bands: int = DEFAULT_BANDS) -> "ModelConfig":
        """Small preset that trains in minutes on one CPU core."""
        return cls(
            music=MusicEncoderConfig(n_bands=n_bands, channels=(32, 32, 64),
                                     residual_layers_per_group=2, out_dim=64),
            motion=MotionEncoderConfig(channels=(16, 32, 32, 64), temporal_kernel=5, out_dim=64),
            head=PairHeadConfig(hidden=128),
            denoiser=DenoiserConfig(layers=3, model_dim=96, heads=4, ffn_dim=256,
                                    timestep_embedding_dim=96, music_dim=64),
        )

    @classmethod
    def tiny(cls, n_bands: int = 8) -> "ModelConfig":
        """Smallest useful preset, for gradient checks."""
        return cls(
            music=MusicEncoderConfig(n_bands=n_bands, channels=(4, 4, 6),
                                     residual_layers_per_group=1, out_dim=6),
            motion=MotionEncoderConfig(channels=(3, 4, 4, 5), temporal_kernel=3, out_dim=5),
            head=PairHeadConfig(hidden=7),
            denoiser=DenoiserConfig(layers=1, model_dim=8, heads=2, ffn_dim=12,
                                    timestep_embedding_dim=8, music_dim=6),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motion"]["layout"] = self.motion.layout.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        def build(kind, raw):
            kw = {}
            for f in fields(kind):
                if f.name not in raw:
                    continue
                v = raw[f.name]
                if f.name == "layout":
                    v = JointLayout.from_dict(v)
                elif isinstance(v, list):
                    v = tuple(v)
                kw[f.name] = v
            return kind(**kw)

        return cls(
            music=build(MusicEncoderConfig, d.get("music", {})),
            motion=build(MotionEncoderConfig, d.get("motion", {})),
            head=build(PairHeadConfig, d.get("head", {})),
            denoiser=build(DenoiserConfig, d.get("denoiser", {})),
        )


def _kaiming_init(module: nn.Module) -> None:
    # torch's default conv init shrinks activations layer by layer until the
    # biases dominate and every clip pools to nearly the same vector
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# music encoder


class _ResidualConv(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int = 1):
        super().__init__()
        pad = dilation * (kernel // 2)
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=pad, dilation=dilation)
        self.conv2 = nn.Conv1d(channels, channels, kernel, padding=pad, dilation=dilation)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class MusicEncoder(nn.Module):
    """Band energies ``[B, M, F]`` -> one embedding per motion frame ``[B, M/3, out_dim]``.

    Three groups of residual temporal convolutions, each closed by a max-pool
    whose temporal factors multiply to 3. Dilation grows geometrically with
    depth so the deepest layers span more than one beat even at slow tempi.
    """

    def __init__(self, cfg: MusicEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.inp = nn.Conv1d(cfg.n_bands, cfg.channels[0], 1)
        groups = []
        prev = cfg.channels[0]
        for g, (ch, pool) in enumerate(zip(cfg.channels, cfg.temporal_pool_factors)):
            layers: list[nn.Module] = []
            if ch != prev:
                layers.append(nn.Conv1d(prev, ch, 1))
            layers += [_ResidualConv(ch, cfg.kernel_size, cfg.dilation_base ** (g + j))
                       for j in range(cfg.residual_layers_per_group)]
            layers.append(nn.MaxPool1d(pool) if pool > 1 else nn.Identity())
            groups.append(nn.Sequential(*layers))
            prev = ch
        self.groups = nn.ModuleList(groups)
        self.out = nn.Linear(prev, cfg.out_dim)
        _kaiming_init(self)

    def forward(self, music: torch.Tensor) -> torch.Tensor:
        if music.ndim != 3 or music.shape[-1] != self.cfg.n_bands:
            raise ValueError(f"expected [B, M, {self.cfg.n_bands}], got {tuple(music.shape)}")
        if music.shape[1] % MUSIC_PER_MOTION:
            raise ValueError(f"music length {music.shape[1]} is not a multiple of {MUSIC_PER_MOTION}")
        h = self.inp(torch.log1p(music.clamp_min(0)).transpose(1, 2))
        for g in self.groups:
            h = g(h)
        return self.out(F.silu(h).transpose(1, 2))


# ---------------------------------------------------------------------------
# motion encoder


def normalized_adjacency(layout: JointLayout) -> np.ndarray:
    a = layout.adjacency() + np.eye(N_JOINTS)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


class _STGCNBlock(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int, dilation: int = 1):
        super().__init__()
        self.gcn = nn.Conv2d(cin, cout, 1)
        self.tcn = nn.Conv2d(cout, cout, (kernel, 1), padding=(dilation * (kernel // 2), 0),
                             dilation=(dilation, 1))
        self.res = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, adj):
        # x: [B, C, N, J]
        y = torch.einsum("bcnj,jk->bcnk", self.gcn(x), adj)
        y = self.tcn(F.silu(y))
        return F.silu(y + self.res(x))


class MotionEncoder(nn.Module):
    """ST-GCN over the skeleton graph, mean-pooled over joints and time."""

    def __init__(self, cfg: MotionEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer(
            "adj", torch.tensor(normalized_adjacency(cfg.layout), dtype=torch.float32), persistent=False
        )
        blocks = []
        prev = 4
        for i, ch in enumerate(cfg.channels):
            blocks.append(_STGCNBlock(prev, ch, cfg.temporal_kernel, cfg.dilation_base ** i))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Linear(prev, cfg.out_dim)
        _kaiming_init(self)

    def frame_features(self, motion: torch.Tensor) -> torch.Tensor:
        """``[B, N, 13, 2]`` (or ``[B, N, 26]``) -> per-frame features ``[B, N, out_dim]``."""
        if motion.shape[-1] == POSE_DIM:
            motion = motion.reshape(*motion.shape[:-1], N_JOINTS, 2)
        if motion.ndim != 4 or motion.shape[-2:] != (N_JOINTS, 2):
            raise ValueError(f"expected [B, N, {N_JOINTS}, 2], got {tuple(motion.shape)}")
        if motion.shape[1] < 2:
            raise ValueError("motion encoder needs at least 2 frames")
        # positions plus per-frame velocity (zero for the first frame), velocity scaled to ~unit range
        vel = torch.diff(motion, dim=1, prepend=motion[:, :1]) * VELOCITY_SCALE
        h = torch.cat([motion, vel], dim=-1).permute(0, 3, 1, 2)
        adj = self.adj.to(h.dtype)
        for blk in self.blocks:
            h = blk(h, adj)
        return self.out(h.mean(dim=3).transpose(1, 2))

    def forward(self, motion: torch.Tensor) -> torch.Tensor:
        return self.frame_features(motion).mean(dim=1)


# ---------------------------------------------------------------------------
# pairing head, mask, denoiser


class PairHead(nn.Module):
    """Probability that a (music, motion) pair belongs together.

    Dense layers over the concatenated pair vector. Each half is first mapped
    into a shared space by a small MLP; the scorer then sees both halves plus
    their product and squared difference, so agreement is directly learnable.
    """

    def __init__(self, music_dim: int, motion_dim: int, cfg: PairHeadConfig):
        super().__init__()
        self.music_dim = music_dim
        h = cfg.hidden
        self.music_proj = nn.Sequential(nn.Linear(music_dim, h), nn.SiLU(), nn.Linear(h, h))
        self.motion_proj = nn.Sequential(nn.Linear(motion_dim, h), nn.SiLU(), nn.Linear(h, h))
        self.net = nn.Sequential(nn.Linear(4 * h, h), nn.SiLU(), nn.Linear(h, 1))
        # start at the in-batch base rate: a head that starts near 0.5 spends the
        # first epoch pushing every score down and drags the encoders with it
        nn.init.zeros_(self.net[-1].weight)
        nn.init.constant_(self.net[-1].bias, math.log(cfg.prior / (1.0 - cfg.prior)))

    def forward(self, music_vec: torch.Tensor, motion_vec: torch.Tensor) -> torch.Tensor:
        z = torch.cat([music_vec, motion_vec], dim=-1)
        u = self.music_proj(z[..., :self.music_dim])
        v = self.motion_proj(z[..., self.music_dim:])
        h = torch.cat([u, v, u * v, (u - v) ** 2], dim=-1)
        return torch.sigmoid(self.net(h)).squeeze(-1)

    def pairwise(self, music_vec: torch.Tensor, motion_vec: torch.Tensor) -> torch.Tensor:
        """Scores for every in-batch combination, ``[B, B]`` with rows = music."""
        b = music_vec.shape[0]
        m = music_vec[:, None, :].expand(b, b, -1)
        x = motion_vec[None, :, :].expand(b, b, -1)
        return self(m, x)


class RandomMask(nn.Module):
    """Swaps a whole clip's music embedding for a learned null embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.null = nn.Parameter(torch.randn(dim) * 0.02)

    def unconditional(self, music_emb: torch.Tensor) -> torch.Tensor:
        return self.null.to(music_emb.dtype).expand_as(music_emb)

    def forward(self, music_emb: torch.Tensor, uncond_rate: float,
                generator: torch.Generator | None = None) -> torch.Tensor:
        if not 0.0 <= uncond_rate <= 1.0:
            raise ValueError(f"uncond_rate must be in [0, 1], got {uncond_rate}")
        if uncond_rate == 0.0:
            return music_emb
        drop = torch.rand(music_emb.shape[0], generator=generator) < uncond_rate
        drop = drop.reshape(-1, *([1] * (music_emb.ndim - 1)))
        return torch.where(drop, self.unconditional(music_emb), music_emb)


def random_mask(music_emb: torch.Tensor, uncond_rate: float, rng: torch.Generator | None,
                mask: RandomMask) -> torch.Tensor:
    return mask(music_emb, uncond_rate, rng)


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = positions.double()[..., None] * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class _DenoiserLayer(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.model_dim
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.norm3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, d))

    def forward(self, h, cond):
        q = self.norm1(h)
        h = h + self.self_attn(q, q, q, need_weights=False)[0]
        h = h + self.cross_attn(self.norm2(h), cond, cond, need_weights=False)[0]
        return h + self.ffn(self.norm3(h))


class Denoiser(nn.Module):
    """Cross-modality transformer: noisy motion attends to itself and to the music.

    Softmax attention throughout; sequences here are short enough that a
    linear-time attention kernel buys nothing.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.inp = nn.Linear(cfg.pose_dim, d)
        self.cond = nn.Linear(cfg.music_dim, d)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.timestep_embedding_dim, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.layers = nn.ModuleList(_DenoiserLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.pose_dim)
        self.mask = RandomMask(cfg.music_dim)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, music_emb: torch.Tensor) -> torch.Tensor:
        B, N, _ = x_t.shape
        if music_emb.shape[:2] != (B, N):
            raise ValueError(f"music embedding {tuple(music_emb.shape)} not aligned with motion {tuple(x_t.shape)}")
        dtype = x_t.dtype
        pos = sinusoidal_embedding(torch.arange(N), self.cfg.model_dim).to(dtype)
        temb = self.time_mlp(sinusoidal_embedding(t.reshape(B), self.cfg.timestep_embedding_dim).to(dtype))
        h = self.inp(x_t) + pos + temb[:, None, :]
        cond = self.cond(music_emb) + pos
        for layer in self.layers:
            h = layer(h, cond)
        return self.out(self.norm(h))


# ---------------------------------------------------------------------------
# bundle + checkpoints


@dataclass
class ModelBundle:
    """All trainable networks plus the stage they were last trained in."""

    config: ModelConfig
    music_encoder: MusicEncoder
    motion_encoder: MotionEncoder
    pair_head: PairHead
    denoiser: Denoiser | None = None
    stage: str = "init"
    metadata: dict[str, Any] = field(default_factory=dict)
    training_log: Any = field(default=None, repr=False, compare=False)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, with_denoiser: bool = False) -> "ModelBundle":
        torch.manual_seed(seed)
        bundle = cls(
            config=config,
            music_encoder=MusicEncoder(config.music),
            motion_encoder=MotionEncoder(config.motion),
            pair_head=PairHead(config.music.out_dim, config.motion.out_dim, config.head),
        )
        if with_denoiser:
            bundle.denoiser = Denoiser(config.denoiser)
        return bundle

    def modules(self) -> dict[str, nn.Module]:
        mods = {
            "music_encoder": self.music_encoder,
            "motion_encoder": self.motion_encoder,
            "pair_head": self.pair_head,
        }
        if self.denoiser is not None:
            mods["denoiser"] = self.denoiser
        return mods

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, mod in self.modules().items():
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def eval(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self


def write_checkpoint(path: str | Path, header: dict, tensors: Mapping[str, torch.Tensor]) -> None:
    index = []
    blobs = []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    head = dict(header, format_version=CHECKPOINT_VERSION, tensors=index)
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {entry['name']}")
        arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, tensors


def save_bundle(bundle: ModelBundle, path: str | Path,
                extra_tensors: Mapping[str, torch.Tensor] | None = None) -> None:
    header = {
        "stage": bundle.stage,
        "config": bundle.config.to_dict(),
        "has_denoiser": bundle.denoiser is not None,
        "metadata": bundle.metadata,
    }
    tensors = bundle.state_tensors()
    if extra_tensors:
        tensors.update(extra_tensors)
    write_checkpoint(path, header, tensors)


def load_bundle(path: str | Path) -> tuple[ModelBundle, dict[str, torch.Tensor]]:
    """Rebuild a bundle from a checkpoint; returns it with any non-model tensors."""
    header, tensors = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config record: {exc}") from exc
    bundle = ModelBundle.initialize(config, with_denoiser=header.get("has_denoiser", False))
    bundle.stage = header.get("stage", "init")
    bundle.metadata = header.get("metadata", {})
    used = set()
    for prefix, mod in bundle.modules().items():
        expected = mod.state_dict()
        loaded = {}
        for k, v in expected.items():
            name = f"{prefix}.{k}"
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name}")
            if tuple(tensors[name].shape) != tuple(v.shape):
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {tuple(tensors[name].shape)}, config implies {tuple(v.shape)}"
                )
            loaded[k] = tensors[name].to(v.dtype)
            used.add(name)
        mod.load_state_dict(loaded)
    extra = {k: v for k, v in tensors.items() if k not in used}
    return bundle.eval(), extra


def motion_features(encoder: MotionEncoder, clips: Sequence, batch_size: int = 64) -> np.ndarray:
    """Pooled latent features ``[n, out_dim]`` for pose sequences or ``[N, 13, 2]`` arrays."""
    arrays = [np.asarray(getattr(c, "frames", c), dtype=np.float32) for c in clips]
    out = []
    encoder.eval()
    with torch.no_grad():
        for i in range(0, len(arrays), batch_size):
            chunk = arrays[i:i + batch_size]
            if len({a.shape for a in chunk}) == 1:
                out.append(encoder(torch.from_numpy(np.stack(chunk))).double().numpy())
            else:
                out.extend(encoder(torch.from_numpy(a)[None]).double().numpy() for a in chunk)
    return np.concatenate([np.atleast_2d(o) for o in out], axis=0)
