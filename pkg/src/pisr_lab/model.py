"""Variant zoo: the base segmenter alone, two naive feature-mixing heads, and PISR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pisr_lab import encodings as enc
from pisr_lab import pra
from pisr_lab import segmenter as seg
from pisr_lab import tensor as T
from pisr_lab.tensor import Tensor

VARIANTS = ("baseline", "concat", "eprod", "sem_only", "pisr_no_rw", "pisr")


class UnknownVariantError(ValueError):
    pass


@dataclass
class HeadOutputs:
    S_logits: Tensor
    S: Tensor
    M: Tensor
    O: Tensor


@dataclass
class ModelOutputs:
    final: HeadOutputs
    intermediate: HeadOutputs | None = None
    extras: dict = field(default_factory=dict)


@dataclass
class ModelSpec:
    variant: str
    k: int
    channels: int
    n_sem: int
    thing_ids: tuple[int, ...]
    height: int
    width: int
    enc_gain: float = 1.0

    @property
    def n_categories(self) -> int:
        return self.n_sem + self.k


class Model:
    def __init__(self, spec: ModelSpec, params: seg.Params):
        self.spec = spec
        self.params = params
        # encoding rows are RMS-normalized before the gate; this gain scales
        # them wherever they feed a learned layer
        self.enc_scale = spec.enc_gain
        self.force_unit_gate = spec.variant == "pisr_no_rw"

    @property
    def variant(self) -> str:
        return self.spec.variant

    @property
    def dtype(self):
        return self.params["backbone.conv0.kernel"].dtype

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Model(self.spec, params)

    def pra_params(self) -> pra.PraParams:
        return pra.PraParams.from_named(self.params, enc_scale=self.enc_scale)

    def forward(self, image) -> ModelOutputs:
        s = self.spec
        p = self.params
        image = T.as_tensor(np.asarray(image, dtype=self.dtype))
        F = seg.backbone(p, image)
        base = HeadOutputs(*seg.heads(p, "heads", F))
        if s.variant == "baseline":
            return ModelOutputs(base)

        h, w = s.height, s.width
        hw = h * w
        C = F.shape[0]
        S_flat = T.reshape(base.S, (s.n_sem, hw))
        F_flat = T.reshape(F, (C, hw))
        extras: dict = {}
        if s.k > 0:
            cands = enc.select_centers(base.M.data, s.k)
            mask = enc.things_mask(base.S.data, s.thing_ids)
            I = enc.instance_heatmaps(cands, T.reshape(base.O, (2, hw)), mask, h, w, s.k)
            extras["candidates"] = cands
            extras["I"] = I
        else:
            I = None

        if s.variant == "concat":
            rows = [S_flat] + ([I] if I is not None else []) + [F_flat]
            stacked = T.reshape(T.concat_rows(rows), (-1, h, w))
            feat = T.relu(seg.conv(p, "mix", stacked))
        elif s.variant == "eprod":
            rows = [S_flat] + ([I] if I is not None else [])
            stacked = T.reshape(T.concat_rows(rows), (-1, h, w))
            feat = T.mul(seg.conv(p, "mix", stacked), F)
        else:
            E_sem = enc.semantic_encodings(S_flat, F_flat)
            E_pan = E_sem if I is None else enc.concat_panoptic(E_sem, enc.instance_encodings(I, F_flat))
            # raw encodings are pixel sums, so large regions would drown small
            # ones and the attention output would scale with |F|^3
            E_hat = T.rms_normalize_rows(E_pan)
            if self.force_unit_gate:
                omega = Tensor(np.ones((E_pan.shape[0], 1), dtype=self.dtype))
                E_tilde = E_hat
            else:
                omega, E_tilde = enc.reweight(p, E_hat, input_scale=self.enc_scale)
            feat = pra.forward(self.pra_params(), E_tilde, F)
            extras.update(E_pan=E_pan, E_hat=E_hat, omega=omega, E_tilde=E_tilde)
        final = HeadOutputs(*seg.heads(p, "final", feat))
        return ModelOutputs(final, base, extras)


def build_variant(variant: str, k: int = 8, channels: int = 32, n_sem: int = 4, thing_ids=(2, 3),
                  height: int = 64, width: int = 64, seed: int = 0, dtype=np.float32,
                  enc_gain: float = 1.0) -> Model:
    """Fresh model of the named variant.

    ``sem_only`` is PISR restricted to class encodings (K forced to 0);
    ``pisr_no_rw`` is PISR with every gate pinned to 1 and no gating network.
    """
    if variant not in VARIANTS:
        raise UnknownVariantError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    if variant == "baseline":
        k = 0
    if variant == "sem_only":
        k = 0
    spec = ModelSpec(variant, k, channels, n_sem, tuple(thing_ids), height, width, enc_gain)
    params = seg.init(seed, channels, n_sem, np.float64)
    if variant != "baseline":
        seg.init_heads(params, "final", seed, channels, n_sem)
    if variant == "concat":
        seg.init_conv(params, "mix", seed, n_sem + k + channels, channels, 1)
    elif variant == "eprod":
        seg.init_conv(params, "mix", seed, n_sem + k, channels, 1)
    elif variant in ("sem_only", "pisr_no_rw", "pisr"):
        params.update(pra.init(seed, channels, n_sem + k).named())
        if variant != "pisr_no_rw":
            enc.init_reweighter(params, seed, channels)
    model = Model(spec, params)
    return model if np.dtype(dtype) == np.float64 else model.astype(dtype)
