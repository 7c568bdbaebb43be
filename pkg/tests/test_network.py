import numpy as np
import pytest
import torch

from hmmen.decoder import decode_block, prediction_head
from hmmen.encoder import EncoderConfig, encode_stream, ir_stem
from hmmen.errors import ContractViolation
from hmmen.fab import fab_forward, fab_forward_lowest
from hmmen.network import VARIANTS, Model

SMALL = EncoderConfig((4, 4, 8, 8, 8), 2)


def small_model(variant, seed=0):
    return Model(variant, SMALL, seed=seed)


def tiny_inputs(n=1, size=32, seed=0):
    gen = torch.Generator().manual_seed(seed)
    rgb = torch.rand(n, 3, size, size, generator=gen)
    ir = torch.rand(n, 1, size, size, generator=gen)
    return rgb, ir


class TestForwardShapes:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_logits_match_input_resolution(self, variant):
        model = small_model(variant)
        rgb, ir = tiny_inputs(n=2, size=64)
        out = model.forward(rgb, ir)
        assert out.shape == (2, 1, 64, 64)

    def test_full_size_full_width_forward(self):
        model = Model("hmmen", seed=0)
        rgb, ir = tiny_inputs(size=256)
        assert model.forward(rgb, ir).shape == (1, 1, 256, 256)

    def test_input_contract_violations(self):
        model = small_model("baseline_unet")
        with pytest.raises(ContractViolation):
            model.forward(torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 32))
        with pytest.raises(ContractViolation):
            model.forward(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32))
        with pytest.raises(ContractViolation):
            model.forward(torch.rand(1, 3, 32, 32), torch.rand(1, 1, 64, 64))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ContractViolation):
            Model("unet_plus", SMALL)


class TestTopology:
    def test_variants_differ_only_in_fusion_prefixes(self):
        names = {v: set(small_model(v).params.names()) for v in VARIANTS}
        block_prefixes = ("fuse.", "mmeb.", "fab.")
        for a in VARIANTS:
            for b in VARIANTS:
                for n in names[a] ^ names[b]:
                    assert n.startswith(block_prefixes), \
                        f"{n} differs between {a} and {b}"

    def test_shared_backbone_identical_across_variants(self):
        shared = None
        for v in VARIANTS:
            s = {n for n in small_model(v).params.names()
                 if not n.startswith(("fuse.", "mmeb.", "fab."))}
            shared = s if shared is None else shared
            assert s == shared

    def test_fusion_parameters_present_per_variant(self):
        for v, want_mmeb, want_fab in (("baseline_unet", False, False),
                                       ("w_mmeb", True, False),
                                       ("w_fab", False, True),
                                       ("hmmen", True, True)):
            names = small_model(v).params.names()
            assert any(n.startswith("mmeb.") for n in names) == want_mmeb
            assert any(n.startswith("fab.") for n in names) == want_fab
            assert any(n.startswith("fuse.") for n in names) == (not want_mmeb)


class TestGradients:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_every_parameter_receives_gradient(self, variant):
        model = small_model(variant, seed=3)
        with torch.no_grad():
            # the offset head is zero-initialized, which legitimately blocks
            # gradient into its first conv; jitter to probe the generic regime
            for _, p in model.params.items():
                p.add_(torch.randn_like(p) * 0.02)
        rgb, ir = tiny_inputs(n=2, size=32, seed=3)
        model.params.zero_grad()
        (model.forward(rgb, ir) ** 2).sum().backward()
        for name, p in model.params.items():
            assert p.grad is not None, f"{name} has no gradient"
            assert p.grad.norm().item() > 0, f"{name} gradient is zero"

    def test_spot_check_against_finite_differences(self):
        model = small_model("hmmen", seed=1)
        model.params = model.params.to(torch.float64)
        with torch.no_grad():
            # keep preactivations and sampling offsets away from hinge points
            for _, p in model.params.items():
                p.add_(torch.randn_like(p) * 0.02)
        rgb, ir = tiny_inputs(size=32, seed=1)
        rgb, ir = rgb.double(), ir.double()

        def loss():
            return (model.forward(rgb, ir) ** 2).sum()

        model.params.zero_grad()
        loss().backward()
        rng = np.random.default_rng(0)
        names = list(model.params.names())
        # tiny step: an early-layer perturbation shifts every downstream
        # activation, so the window around ReLU6 hinges must stay narrow
        step = 1e-6
        for name in rng.choice(names, size=10, replace=False):
            p = model.params[name]
            flat = p.data.reshape(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
            hi = float(loss().detach())
            with torch.no_grad():
                flat[i] = orig - step
            lo = float(loss().detach())
            with torch.no_grad():
                flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            analytic = p.grad.reshape(-1)[i].item()
            scale = max(abs(analytic), abs(numeric), 1e-6)
            assert abs(analytic - numeric) / scale <= 1e-2, \
                f"{name}[{i}]: analytic {analytic} vs numeric {numeric}"


class TestBlockBypass:
    def test_hmmen_with_neutral_blocks_is_rgb_unet(self):
        # zero enhancement gates + zeroed alignment blocks must reduce the
        # full model to a pure RGB encoder-decoder with additive skips
        model = small_model("hmmen", seed=7)
        with torch.no_grad():
            for name in model.params.names():
                if name.startswith("fab."):
                    model.params[name].zero_()
        rgb, ir = tiny_inputs(size=32, seed=7)
        zero_gates = lambda wr, wi: (torch.zeros_like(wr), torch.zeros_like(wi))
        out = model.forward(rgb, ir, mmeb_hook=zero_gates)

        ch = SMALL.stage_channels
        pyr = encode_stream(rgb, model.params, "encoder.rgb", SMALL)
        dec = pyr[4]
        for k in range(3, -1, -1):
            dec = decode_block(dec, model.params, f"decoder.{k}", ch[k + 1],
                               ch[k], SMALL.expansion_factor) + pyr[k]
        ref = prediction_head(dec, model.params, "head", ch[0])
        assert (out - ref).abs().max().item() <= 1e-5

    def test_hmmen_forward_composes_published_blocks(self):
        # re-derive the full forward pass from the individual block functions
        model = small_model("hmmen", seed=11)
        rgb, ir = tiny_inputs(size=32, seed=11)
        out = model.forward(rgb, ir)

        from hmmen.mmeb import mmeb_forward
        ch = SMALL.stage_channels
        p = model.params
        pyr_rgb = encode_stream(rgb, p, "encoder.rgb", SMALL)
        pyr_ir = encode_stream(ir_stem(ir, p, "ir_stem"), p, "encoder.ir", SMALL)
        levels = [mmeb_forward(pyr_rgb[k], pyr_ir[k], p, f"mmeb.{k}")
                  for k in range(5)]
        dec = fab_forward_lowest(levels[4][0], levels[4][1], p, "fab.4")
        for k in range(3, -1, -1):
            up = decode_block(dec, p, f"decoder.{k}", ch[k + 1], ch[k],
                              SMALL.expansion_factor)
            skip = fab_forward(dec, levels[k][0], levels[k][1], p, f"fab.{k}")
            dec = up + skip
        ref = prediction_head(dec, p, "head", ch[0])
        assert (out - ref).abs().max().item() <= 1e-5


class TestOutputsAndHeatmap:
    def test_predict_probs_in_unit_interval(self):
        model = small_model("w_mmeb", seed=2)
        rgb, ir = tiny_inputs(size=32)
        probs = model.predict_probs(rgb, ir)
        assert probs.min().item() >= 0.0 and probs.max().item() <= 1.0

    def test_heatmap_contract(self):
        model = small_model("hmmen", seed=2)
        rgb, ir = tiny_inputs(size=32)
        heat = model.dump_heatmap(rgb, ir)
        assert heat.shape == (32, 32)
        assert heat.dtype == np.float32 or heat.dtype == np.float64
        assert heat.min() >= 0.0 and heat.max() <= 1.0
        assert heat.max() == pytest.approx(1.0)

    def test_heatmap_degenerate_activation_is_zero(self):
        model = small_model("baseline_unet", seed=2)
        with torch.no_grad():
            for _, p in model.params.items():
                p.zero_()
        rgb, ir = tiny_inputs(size=32)
        heat = model.dump_heatmap(rgb, ir)
        assert np.all(heat == 0.0)


class TestCheckpointing:
    def test_round_trip_preserves_outputs(self, tmp_path):
        model = small_model("hmmen", seed=4)
        rgb, ir = tiny_inputs(size=32, seed=4)
        before = model.forward(rgb, ir).detach()
        path = tmp_path / "model.ckpt"
        model.save_checkpoint(path, epoch=12, learning_rate=5e-5,
                              metric_snapshot={"val_iou": 0.5})
        loaded, meta = Model.load_checkpoint(path)
        assert meta["variant"] == "hmmen"
        assert meta["epoch"] == 12
        assert meta["learning_rate"] == 5e-5
        assert meta["metric_snapshot"]["val_iou"] == 0.5
        assert meta["config_digest"] == model.config_digest()
        after = loaded.forward(rgb, ir).detach()
        assert torch.equal(before, after)

    def test_variant_mismatch_on_load_is_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        small_model("baseline_unet").save_checkpoint(path)
        import json

        from hmmen.numerics import load_param_archive, save_param_archive
        arrays, meta_json = load_param_archive(path)
        meta = json.loads(meta_json)
        meta["variant"] = "hmmen"  # claims blocks whose params are absent
        bad = tmp_path / "bad.ckpt"
        save_param_archive(bad, arrays, json.dumps(meta))
        with pytest.raises(ContractViolation):
            Model.load_checkpoint(bad)

    def test_same_seed_same_parameters(self):
        a = small_model("w_fab", seed=21)
        b = small_model("w_fab", seed=21)
        for (na, pa), (nb, pb) in zip(a.params.items(), b.params.items()):
            assert na == nb and torch.equal(pa, pb)

    def test_config_digest_distinguishes_variants(self):
        assert (small_model("hmmen").config_digest()
                != small_model("w_fab").config_digest())
