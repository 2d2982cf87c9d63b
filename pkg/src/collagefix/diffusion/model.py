"""The dual-denoiser model: synthesizer + detail extractor + schedule."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .blocks import GlobalReferenceEncoder
from .schedule import NoiseSchedule, make_schedule, q_sample
from .unet import DenoiserConfig, DenoiserUNet, FeatureStack

CROSS_REFERENCE = "cross-reference"
GLOBAL_EMBEDDING = "global-embedding"


@dataclass(frozen=True)
class ModelFlags:
    """Input/architecture ablation switches; all on = full model."""

    use_mask_synth: bool = True
    use_mask_detail: bool = True
    use_timestep_detail: bool = True
    use_noisy_input_detail: bool = True
    detail_mode: str = CROSS_REFERENCE

    def to_dict(self) -> dict:
        return {"use_mask_synth": self.use_mask_synth,
                "use_mask_detail": self.use_mask_detail,
                "use_timestep_detail": self.use_timestep_detail,
                "use_noisy_input_detail": self.use_noisy_input_detail,
                "detail_mode": self.detail_mode}


class DualDenoiser(nn.Module):
    """Synthesizer conditioned on [x_t, coarse, mask] plus a detail extractor
    over [noisy reference, reference, mask] whose pre-self-attention tokens
    feed the synthesizer's cross-attention sites."""

    def __init__(self, config: DenoiserConfig, schedule: NoiseSchedule | None = None,
                 flags: ModelFlags | None = None):
        super().__init__()
        self.config = config
        self.schedule = schedule or make_schedule()
        self.flags = flags or ModelFlags()
        self.synth = DenoiserUNet(config)
        if self.flags.detail_mode == GLOBAL_EMBEDDING:
            embed_dim = max(config.stage_channels())
            self.detail = GlobalReferenceEncoder(3, embed_dim)
            self.global_adapters = nn.ModuleList(
                [nn.Linear(embed_dim, c) for _, c in config.site_shapes()])
        elif self.flags.detail_mode == CROSS_REFERENCE:
            self.detail = DenoiserUNet(config)
        else:
            raise ValueError(f"unknown detail mode {self.flags.detail_mode!r}")

    def extract_details(self, reference: Tensor, mask: Tensor, t: Tensor,
                        eps: Tensor) -> FeatureStack:
        """Run the detail branch and capture its attention-site tokens.

        reference: (B, 3, H, W) in diffusion space; mask: (B, 1, H, W);
        t: (B,) integer steps; eps: noise matching the reference shape.
        """
        if self.flags.detail_mode == GLOBAL_EMBEDDING:
            token = self.detail(reference)
            feats = [adapter(token) for adapter in self.global_adapters]
            return FeatureStack(feats)
        noisy = q_sample(reference, t, eps, self.schedule)
        if not self.flags.use_noisy_input_detail:
            noisy = torch.zeros_like(noisy)
        if not self.flags.use_mask_detail:
            mask = torch.zeros_like(mask)
        if not self.flags.use_timestep_detail:
            t = torch.zeros_like(t)
        x = torch.cat([noisy, reference, mask], dim=1)
        _, stack = self.detail(x, t, capture=True)
        return stack

    def predict_eps(self, x_t: Tensor, coarse: Tensor, mask: Tensor, t: Tensor,
                    features: FeatureStack | None) -> Tensor:
        """Synthesizer noise prediction with optional detail injection."""
        if not self.flags.use_mask_synth:
            mask = torch.zeros_like(mask)
        x = torch.cat([x_t, coarse, mask], dim=1)
        out, _ = self.synth(x, t, features=features)
        return out


class SingleDenoiser(nn.Module):
    """Plain unconditional denoiser over x_t; the SDEdit-style baseline."""

    def __init__(self, config: DenoiserConfig, schedule: NoiseSchedule | None = None):
        super().__init__()
        self.config = config
        self.schedule = schedule or make_schedule()
        self.flags = None
        self.net = DenoiserUNet(config)

    def predict_eps(self, x_t: Tensor, t: Tensor) -> Tensor:
        out, _ = self.net(x_t, t)
        return out


def pad_input_channels(weight: Tensor, extra: int) -> Tensor:
    """Append zero-filled input-channel slices to a first-layer conv kernel.

    The original slices are carried over bit-identically, so feeding zeros in
    the new channels reproduces the unpadded layer's output exactly.
    """
    if extra < 0:
        raise ValueError(f"extra must be >= 0, got {extra}")
    if extra == 0:
        return weight.clone()
    out_ch, in_ch, kh, kw = weight.shape
    pad = torch.zeros(out_ch, extra, kh, kw, dtype=weight.dtype, device=weight.device)
    return torch.cat([weight, pad], dim=1)


def expand_unet_input(unet: DenoiserUNet, extra: int) -> DenoiserUNet:
    """Rebuild a UNet to accept `extra` more input channels, zero-padding the
    stem kernel and copying every other parameter unchanged."""
    new_config = replace(unet.config, in_channels=unet.config.in_channels + extra)
    grown = DenoiserUNet(new_config)
    state = {k: v.clone() for k, v in unet.state_dict().items()}
    state["stem.weight"] = pad_input_channels(state["stem.weight"], extra)
    grown.load_state_dict(state)
    return grown


# ---------------------------------------------------------------------------
# checkpoint format: JSON header + named little-endian tensors + checksum


def _payload_and_index(state: dict[str, Tensor]) -> tuple[bytes, list[dict]]:
    chunks = []
    index = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        blob = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    return b"".join(chunks), index


def save_checkpoint(model, path: str | Path, extra_meta: dict | None = None) -> None:
    schedule = model.schedule
    header = {
        "format": "collagefix-checkpoint-v1",
        "kind": "dual" if isinstance(model, DualDenoiser) else "single",
        "config": model.config.to_dict(),
        "flags": model.flags.to_dict() if model.flags is not None else None,
        "schedule": {"T": schedule.T, "alpha_1": float(schedule.alpha[1]),
                     "alpha_T": float(schedule.alpha[schedule.T])},
        "meta": extra_meta or {},
    }
    payload, index = _payload_and_index(model.state_dict())
    header["tensors"] = index
    header["sha256"] = hashlib.sha256(payload).hexdigest()
    header_blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(b"CFCK")
        f.write(struct.pack("<Q", len(header_blob)))
        f.write(header_blob)
        f.write(payload)


def load_checkpoint(path: str | Path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"CFCK":
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    sched = header["schedule"]
    schedule = make_schedule(sched["T"], sched["alpha_1"], sched["alpha_T"])
    config = DenoiserConfig.from_dict(header["config"])
    if header["kind"] == "dual":
        model = DualDenoiser(config, schedule, ModelFlags(**header["flags"]))
    else:
        model = SingleDenoiser(config, schedule)
    state = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(entry["dtype"]))
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model, header["meta"]


def checkpoint_hash(path: str | Path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
