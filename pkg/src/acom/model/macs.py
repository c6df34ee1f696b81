"""Multiply-accumulate accounting for one second of input."""

from __future__ import annotations

from dataclasses import dataclass, field

from acom.errors import ConfigError


@dataclass
class MacReport:
    split: int
    per_layer: list = field(default_factory=list)
    device_total: int = 0
    cloud_total: int = 0
    quantizer_total: int = 0

    def lines(self):
        for index, macs in self.per_layer:
            yield f"layer={index} macs={macs}"
        yield (
            f"split={self.split} device_macs={self.device_total} cloud_macs={self.cloud_total} "
            f"quantizer_macs={self.quantizer_total} device_gmacs={self.device_total / 1e9:.6f}"
        )


def layer_frames(model, seconds: float = 1.0) -> list:
    """Frames entering each layer for ``seconds`` of input (last entry: model output)."""
    frames = [int(round(model.input_rate * seconds))]
    for layer in model.layers:
        frames.append(layer.out_frames(frames[-1]))
    return frames


def mac_count(model, M: int | None = None, stages: int = 0, size: int = 0) -> MacReport:
    """MACs of the device layers 1..M, the RVQ search at layer M, and the cloud layers.

    Dense layers cost T*in*out, convolutions T_out*kernel*in*out, the RVQ
    search T*K*V*D distance terms; pooling and nonlinearities are free.
    """
    M = model.split if M is None else M
    if not 0 <= M <= model.num_layers:
        raise ConfigError(f"split point must be in [0, {model.num_layers}], got {M}")
    frames = layer_frames(model)
    per_layer = [(i + 1, layer.macs(frames[i])) for i, layer in enumerate(model.layers)]
    dim = model.layers[M - 1].out_dim if M else model.input_dim
    quantizer = frames[M] * stages * size * dim
    device = sum(m for _, m in per_layer[:M]) + quantizer
    cloud = sum(m for _, m in per_layer[M:])
    return MacReport(M, per_layer, device, cloud, quantizer)
