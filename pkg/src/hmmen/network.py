"""Full model assembly: the fused network and its three ablation variants.

Variant topologies:
  baseline_unet  dual encoders, per-level concat + 1x1 fusion, plain skip adds
  w_mmeb         mutual enhancement replaces concat fusion, plain skip adds
  w_fab          concat fusion, alignment block replaces the plain skip
  hmmen          mutual enhancement + alignment (full model)

The decoder chain is shared by all variants: dec_k = DB(dec_{k+1}) + skip_k,
where skip_k is the variant-specific fusion/alignment output at level k.  In
the alignment variants skip_k consumes dec_{k+1} (the half-resolution decoder
feature) and upsamples it internally, so parameter name sets across variants
differ only in the fuse./mmeb./fab. prefixes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict

import numpy as np
import torch

from .decoder import (decode_block, init_decode_block, init_prediction_head,
                      prediction_head)
from .encoder import (EncoderConfig, encode_stream, init_encoder, init_ir_stem,
                      ir_stem)
from .errors import ContractViolation
from .fab import fab_forward, fab_forward_lowest, init_fab, init_fab_lowest
from .mmeb import init_mmeb, mmeb_forward
from .numerics import (ConvSpec, FeatureMap, ParameterStore, check_feature_map,
                       conv2d, init_conv, load_param_archive, resize_bilinear,
                       save_param_archive)

VARIANTS = ("baseline_unet", "w_mmeb", "w_fab", "hmmen")


def uses_mmeb(variant: str) -> bool:
    return variant in ("w_mmeb", "hmmen")


def uses_fab(variant: str) -> bool:
    return variant in ("w_fab", "hmmen")


class Model:
    """A variant topology plus its parameter store."""

    def __init__(self, variant: str, config: EncoderConfig | None = None,
                 seed: int = 0):
        if variant not in VARIANTS:
            raise ContractViolation(
                f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.config = config or EncoderConfig()
        self.seed = seed
        self.params = ParameterStore()
        gen = torch.Generator().manual_seed(seed)
        ch = self.config.stage_channels
        exp = self.config.expansion_factor

        init_ir_stem(self.params, "ir_stem", gen)
        init_encoder(self.params, "encoder.rgb", self.config, gen)
        init_encoder(self.params, "encoder.ir", self.config, gen)
        if uses_mmeb(variant):
            for k in range(5):
                init_mmeb(self.params, f"mmeb.{k}", ch[k], gen)
        else:
            for k in range(5):
                init_conv(self.params, f"fuse.{k}", 2 * ch[k], ch[k], (1, 1), gen)
        if uses_fab(variant):
            for k in range(4):
                init_fab(self.params, f"fab.{k}", ch[k + 1], ch[k], gen)
            init_fab_lowest(self.params, "fab.4", ch[4], gen)
        for k in range(4):
            init_decode_block(self.params, f"decoder.{k}", ch[k + 1], ch[k], exp, gen)
        init_prediction_head(self.params, "head", ch[0], gen)

    # -- forward -----------------------------------------------------------

    def _fused_levels(self, pyr_rgb, pyr_ir, mmeb_hook=None):
        """Per-level (f_rgb, f_ir, plain_skip) triples after fusion."""
        ch = self.config.stage_channels
        out = []
        for k in range(5):
            if uses_mmeb(self.variant):
                ef_rgb, ef_ir = mmeb_forward(pyr_rgb[k], pyr_ir[k], self.params,
                                             f"mmeb.{k}", weight_hook=mmeb_hook)
                out.append((ef_rgb, ef_ir, ef_rgb + ef_ir))
            else:
                fused = conv2d(torch.cat([pyr_rgb[k], pyr_ir[k]], dim=1),
                               ConvSpec(2 * ch[k], ch[k], (1, 1)),
                               self.params[f"fuse.{k}.w"],
                               self.params[f"fuse.{k}.b"])
                out.append((fused, pyr_ir[k], fused))
        return out

    def forward(self, rgb: FeatureMap, ir: FeatureMap, mmeb_hook=None,
                fab_offset_hook=None, return_penultimate: bool = False):
        check_feature_map(rgb, "rgb")
        check_feature_map(ir, "ir")
        if rgb.shape[1] != 3:
            raise ContractViolation(f"rgb must have 3 channels, got {rgb.shape[1]}")
        if ir.shape[1] != 1:
            raise ContractViolation(f"ir must have 1 channel, got {ir.shape[1]}")
        if rgb.shape[2:] != ir.shape[2:] or rgb.shape[0] != ir.shape[0]:
            raise ContractViolation(
                f"rgb {tuple(rgb.shape)} and ir {tuple(ir.shape)} do not match")
        ch = self.config.stage_channels
        exp = self.config.expansion_factor

        pyr_rgb = encode_stream(rgb, self.params, "encoder.rgb", self.config)
        pyr_ir = encode_stream(ir_stem(ir, self.params, "ir_stem"),
                               self.params, "encoder.ir", self.config)
        levels = self._fused_levels(pyr_rgb, pyr_ir, mmeb_hook)

        if uses_fab(self.variant):
            dec = fab_forward_lowest(levels[4][0], levels[4][1], self.params,
                                     "fab.4", offset_hook=fab_offset_hook)
        else:
            dec = levels[4][2]
        for k in range(3, -1, -1):
            up = decode_block(dec, self.params, f"decoder.{k}", ch[k + 1],
                              ch[k], exp)
            if uses_fab(self.variant):
                skip = fab_forward(dec, levels[k][0], levels[k][1], self.params,
                                   f"fab.{k}", offset_hook=fab_offset_hook)
            else:
                skip = levels[k][2]
            dec = up + skip
        logits = prediction_head(dec, self.params, "head", ch[0])
        if return_penultimate:
            return logits, dec
        return logits

    def predict_probs(self, rgb: FeatureMap, ir: FeatureMap) -> FeatureMap:
        with torch.no_grad():
            return torch.sigmoid(self.forward(rgb, ir))

    def dump_heatmap(self, rgb: FeatureMap, ir: FeatureMap) -> np.ndarray:
        """Channel-mean absolute activation of the last pre-head feature,
        min-max normalized to [0, 1] at full input resolution.

        A degenerate (constant) activation map normalizes to all zeros.
        """
        with torch.no_grad():
            _, pen = self.forward(rgb, ir, return_penultimate=True)
            heat = pen.abs().mean(dim=1, keepdim=True)
            heat = resize_bilinear(heat, rgb.shape[2], rgb.shape[3])
            lo = heat.min()
            hi = heat.max()
            if (hi - lo).item() <= 0:
                heat = torch.zeros_like(heat)
            else:
                heat = (heat - lo) / (hi - lo)
        return heat[0, 0].cpu().numpy()

    # -- checkpointing -----------------------------------------------------

    def config_digest(self) -> str:
        blob = json.dumps({"variant": self.variant, **asdict(self.config)},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save_checkpoint(self, path, epoch: int = 0, learning_rate: float = 0.0,
                        metric_snapshot: dict | None = None) -> None:
        meta = {
            "variant": self.variant,
            "epoch": epoch,
            "learning_rate": learning_rate,
            "seed": self.seed,
            "config_digest": self.config_digest(),
            "stage_channels": list(self.config.stage_channels),
            "expansion_factor": self.config.expansion_factor,
            "metric_snapshot": metric_snapshot or {},
        }
        save_param_archive(path, self.params.state_arrays(),
                           json.dumps(meta, sort_keys=True, indent=1))

    @classmethod
    def load_checkpoint(cls, path) -> tuple["Model", dict]:
        arrays, meta_json = load_param_archive(path)
        meta = json.loads(meta_json)
        config = EncoderConfig(tuple(meta["stage_channels"]),
                               meta["expansion_factor"])
        model = cls(meta["variant"], config, seed=meta["seed"])
        model.params.load_arrays(arrays)
        return model, meta
