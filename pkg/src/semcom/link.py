"""Sender -> channel -> receiver glue shared by training and evaluation.

The sender one-hot encodes a map, packs it (for bandwidth accounting), and
power-normalizes the planes. The channel corrupts the normalized symbols.
The receiver undoes the power scale with the out-of-band header, then either
applies the fast denoiser (inference) or feeds the raw noisy planes to the
model (training), always padding absent classes with clean zero planes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel as ch
from . import codec
from . import fds as fds_mod


@dataclass(frozen=True)
class LinkResult:
    stack: codec.OneHotStack       # clean sender-side stack
    payload_bits: int              # compressed wire size (header + body)
    received_raw: np.ndarray       # noisy symbols reshaped to planes (still scaled)
    received_planes: np.ndarray    # de-scaled planes, approximately {0, 1} + noise


def transmit_map(class_map, c_total, cfg, power=1.0):
    """Run one map through encode -> pack -> normalize -> AWGN -> de-scale."""
    stack = codec.one_hot_encode(class_map, c_total)
    payload = codec.rle_pack(stack)
    frame = codec.power_normalize(stack, power)
    noisy = ch.transmit(frame, cfg)
    raw = noisy.reshape(stack.planes.shape)
    planes = raw / frame.scale
    return LinkResult(stack, payload.bit_count, raw, planes)


def receiver_condition(link, c_total, fds_cfg=None):
    """Conditioning stack for the diffusion model: [C_total, H, W] float32.

    With an FdsConfig the planes are denoised and binarized; without one the
    raw de-scaled noisy planes pass through (the training-time path).
    """
    if fds_cfg is not None:
        full = fds_mod.fds(link.received_planes, link.stack.present_classes, c_total, fds_cfg)
        return full.astype(np.float32)
    full = np.zeros((c_total,) + link.received_planes.shape[1:], dtype=np.float32)
    full[list(link.stack.present_classes)] = link.received_planes.astype(np.float32)
    return full
