"""Scenario encoder, action decoder and the checkpoint container.

Shapes: B scenarios, M agents (ego first, padded), T history steps,
K prediction steps, D latent width.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import motion
from .features import ACC_SCALE, FEATURE_DIM, POS_SCALE, VEL_SCALE, YAW_RATE_SCALE

CHECKPOINT_MAGIC = b"KTRJCKPT"
CHECKPOINT_VERSION = 1
MOTION_MODELS = ("CV", "CTRA", "none")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    motion_model: str = "CTRA"
    d_model: int = 128
    heads: int = 4
    ff_dim: int = 256
    encoder_layers: int = 2
    merge_layers: int = 2
    map_channels: tuple = (16, 32, 64, 128)
    raster_size: int = 128
    bounded_head: bool = True
    bounds_lower: tuple = (-8.0, -0.7)
    bounds_upper: tuple = (8.0, 0.7)

    def __post_init__(self):
        if self.motion_model not in MOTION_MODELS:
            raise ValueError(f"motion_model must be one of {MOTION_MODELS}")
        self.map_channels = tuple(self.map_channels)
        self.bounds_lower = tuple(float(v) for v in self.bounds_lower)
        self.bounds_upper = tuple(float(v) for v in self.bounds_upper)


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)
    return pe


def _encoder(cfg: ModelConfig, layers: int) -> nn.TransformerEncoder:
    # smooth activations keep the whole network differentiable for gradient checks
    layer = nn.TransformerEncoderLayer(cfg.d_model, cfg.heads, cfg.ff_dim, dropout=0.0,
                                       activation="gelu", batch_first=True)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class ObjectEncoder(nn.Module):
    """Per-object history -> latent via self-attention and masked mean pooling.

    Weights are shared across agents.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Linear(FEATURE_DIM, cfg.d_model)
        self.blocks = _encoder(cfg, cfg.encoder_layers)
        self.d_model = cfg.d_model

    def forward(self, history: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # history (N, T, F), mask (N, T) True where observed
        if not mask.any(dim=1).all():
            raise ValueError("every encoded history needs at least one observed step")
        pe = sinusoidal_encoding(history.shape[1], self.d_model).to(history.dtype)
        tokens = self.embed(history) + pe
        out = self.blocks(tokens, src_key_padding_mask=~mask)
        w = mask.to(out.dtype).unsqueeze(-1)
        return (out * w).sum(dim=1) / w.sum(dim=1)


class MapEncoder(nn.Module):
    """Strided convolutional stages, global average pool, linear projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = (1,) + cfg.map_channels
        stages = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            stages += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GELU()]
        self.stages = nn.Sequential(*stages)
        self.proj = nn.Linear(chans[-1], cfg.d_model)
        self.size = cfg.raster_size

    def forward(self, raster: torch.Tensor) -> torch.Tensor:
        if raster.shape[-2:] != (self.size, self.size):
            raise ValueError(f"map raster {tuple(raster.shape[-2:])} != configured "
                             f"{(self.size, self.size)}")
        return self.proj(self.stages(raster).mean(dim=(-2, -1)))


class Merger(nn.Module):
    """Attention over {map, agent_1..agent_M}; equivariant in the agents."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.map_type = nn.Parameter(torch.zeros(cfg.d_model))
        self.blocks = _encoder(cfg, cfg.merge_layers)

    def forward(self, z_map: torch.Tensor, z_agents: torch.Tensor,
                agent_mask: torch.Tensor) -> torch.Tensor:
        tokens = torch.cat([(z_map + self.map_type).unsqueeze(1), z_agents], dim=1)
        pad = torch.cat([torch.zeros_like(agent_mask[:, :1]), ~agent_mask], dim=1)
        return self.blocks(tokens, src_key_padding_mask=pad)


class ActionDecoder(nn.Module):
    """Shared-weight LSTM cell unrolled for K steps.

    Step input: own previous action, own previous point and the mean point
    of the other agents. With a motion model the emitted action is pushed
    through it immediately so the next step sees the resulting point.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cell = nn.LSTMCell(6, cfg.d_model)
        self.head = nn.Linear(cfg.d_model, 2)
        self.kind = cfg.motion_model
        self.bounded = cfg.bounded_head
        lo = torch.tensor(cfg.bounds_lower, dtype=torch.float64)
        hi = torch.tensor(cfg.bounds_upper, dtype=torch.float64)
        from .objectives import BoundSpec
        lo32, hi32 = BoundSpec(cfg.bounds_lower, cfg.bounds_upper).float32_limits()
        self.register_buffer("lower", lo, persistent=False)
        self.register_buffer("upper", hi, persistent=False)
        self.register_buffer("lower32", torch.as_tensor(lo32), persistent=False)
        self.register_buffer("upper32", torch.as_tensor(hi32), persistent=False)
        if self.kind == "CV":
            scale = (VEL_SCALE, VEL_SCALE)
        else:
            scale = (ACC_SCALE, YAW_RATE_SCALE)
        self.register_buffer("action_scale", torch.tensor(scale, dtype=torch.float64),
                             persistent=False)

    def squash(self, raw: torch.Tensor) -> torch.Tensor:
        lo, hi = self.lower.to(raw.dtype), self.upper.to(raw.dtype)
        if not self.bounded:
            return (lo + hi) / 2 + raw * (hi - lo) / 4
        out = lo + (hi - lo) * torch.sigmoid(raw)
        if raw.dtype == torch.float32:
            lo, hi = self.lower32, self.upper32
        return torch.maximum(torch.minimum(out, hi), lo)

    def forward(self, latents: torch.Tensor, init: torch.Tensor, first_action: torch.Tensor,
                agent_mask: torch.Tensor, steps: int, dt: float):
        if steps < 1:
            raise ValueError("decoder needs steps >= 1")
        scale = self.action_scale.to(latents.dtype)
        h = latents
        c = torch.zeros_like(latents)
        state = motion.KinematicState(init[..., 0], init[..., 1], init[..., 2], init[..., 3],
                                      init[..., 4], init[..., 5])
        point = init[..., :2]
        action = first_action
        m = agent_mask.to(latents.dtype).unsqueeze(-1)
        count = m.sum(dim=1, keepdim=True)
        actions, points, yaws, speeds = [], [], [], []
        for _ in range(steps):
            total = (point * m).sum(dim=1, keepdim=True)
            others = (total - point * m) / (count - m).clamp(min=1.0)
            inp = torch.cat([action / scale, point / POS_SCALE, others / POS_SCALE], dim=-1)
            b, n = inp.shape[:2]
            h, c = self.cell(inp.reshape(b * n, -1), (h.reshape(b * n, -1), c.reshape(b * n, -1)))
            h, c = h.reshape(b, n, -1), c.reshape(b, n, -1)
            raw = self.head(h)
            if self.kind == "none":
                point = init[..., :2] + POS_SCALE * raw
            else:
                action = self.squash(raw)
                state = motion.step(self.kind, state, action, dt)
                point = state.position
                actions.append(action)
                yaws.append(state.yaw)
                speeds.append(state.v)
            points.append(point)
        out = {"trajectory": torch.stack(points, dim=-2)}
        if actions:
            out["actions"] = torch.stack(actions, dim=-2)
            out["yaw"] = torch.stack(yaws, dim=-1)
            out["speed"] = torch.stack(speeds, dim=-1)
        return out


class HybridModel(nn.Module):
    """Encoder (objects + map + merger) followed by the action decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.object_encoder = ObjectEncoder(cfg)
        self.map_encoder = MapEncoder(cfg)
        self.merger = Merger(cfg)
        self.decoder = ActionDecoder(cfg)

    def encode(self, batch: dict) -> torch.Tensor:
        hist, hmask, amask = batch["history"], batch["history_mask"], batch["agent_mask"]
        b, m, t, f = hist.shape
        flat_mask = hmask.reshape(b * m, t).clone()
        # padded agents get one dummy observed step and are masked downstream
        flat_mask[~amask.reshape(-1), 0] = True
        z = self.object_encoder(hist.reshape(b * m, t, f), flat_mask).reshape(b, m, -1)
        z_map = self.map_encoder(batch["raster"])
        return self.merger(z_map, z, amask)

    def first_action(self, batch: dict) -> torch.Tensor:
        last = batch["last_attributes"]
        if self.config.motion_model == "CV":
            return last[..., 0:2]
        if self.config.motion_model == "CTRA":
            return torch.stack([last[..., 2], last[..., 4]], dim=-1)
        return torch.zeros_like(last[..., :2])

    def forward(self, batch: dict, steps: int) -> dict:
        merged = self.encode(batch)
        out = self.decoder(merged[:, 1:], batch["init"], self.first_action(batch),
                           batch["agent_mask"], steps, batch["dt"])
        out["latents"] = merged
        return out


# ---------------------------------------------------------------- checkpoints

def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, model: HybridModel, config: dict,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    """Write a versioned container: magic, u32 version, u64 header length,
    JSON header, then the float32 little-endian payload."""
    tensors = [(f"model/{k}", v) for k, v in model.state_dict().items()]
    opt_meta = None
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        steps = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                name = names[id(p)]
                tensors.append((f"optim/{name}/exp_avg", st["exp_avg"]))
                tensors.append((f"optim/{name}/exp_avg_sq", st["exp_avg_sq"]))
                steps[name] = int(st["step"])
        opt_meta = {"steps": steps, "lr": optimizer.param_groups[0]["lr"],
                    "betas": list(optimizer.param_groups[0]["betas"]),
                    "eps": optimizer.param_groups[0]["eps"]}
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "fingerprint": config_fingerprint(config),
        "tensors": entries,
        "optimizer": opt_meta,
        "extra": extra or {},
    }).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict, dict]:
    """(header, name -> float32 array)."""
    path = Path(path)
    if not path.exists() and path.with_suffix(".ckpt").exists():
        path = path.with_suffix(".ckpt")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    payload = np.frombuffer(data[20 + hlen:], dtype="<f4")
    arrays = {e["name"]: payload[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
              for e in header["tensors"]}
    return header, arrays


def model_from_config(config: dict) -> HybridModel:
    return HybridModel(ModelConfig(**config["model"]))


def load_checkpoint(path, expected_config: dict | None = None) -> tuple[HybridModel, dict]:
    """Rebuild the model stored at ``path``.

    If ``expected_config`` is given its fingerprint must match the stored one.
    """
    header, arrays = read_checkpoint(path)
    if config_fingerprint(header["config"]) != header["fingerprint"]:
        raise CheckpointError("checkpoint header fingerprint is inconsistent with its config")
    if expected_config is not None and config_fingerprint(expected_config) != header["fingerprint"]:
        raise CheckpointError("checkpoint config fingerprint does not match the requested config")
    model = model_from_config(header["config"])
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
             if k.startswith("model/")}
    expected = model.state_dict()
    if set(state) != set(expected) or any(state[k].shape != expected[k].shape for k in state):
        raise CheckpointError("checkpoint parameters do not match the model layout")
    model.load_state_dict(state)
    return model, header["config"]


def restore_optimizer(path, model: HybridModel, optimizer: torch.optim.Optimizer) -> None:
    """Load stored Adam moments into ``optimizer`` (built on ``model``)."""
    header, arrays = read_checkpoint(path)
    meta = header.get("optimizer")
    if not meta:
        return
    params = dict(model.named_parameters())
    for name, steps in meta["steps"].items():
        optimizer.state[params[name]] = {
            "step": torch.tensor(float(steps)),
            "exp_avg": torch.from_numpy(arrays[f"optim/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"].copy()),
        }


def model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["map_channels"] = list(d["map_channels"])
    d["bounds_lower"] = list(d["bounds_lower"])
    d["bounds_upper"] = list(d["bounds_upper"])
    return d
