import math

import numpy as np
import pytest
import torch

from depthgrow.backbones import (
    FINAL_HEAD,
    BackboneSpec,
    ConvStemSpec,
    PatchTokenizerSpec,
    backbone_preset,
    build_backbone,
    build_prefix,
    full_network,
    make_head,
    parameter_count,
)
from depthgrow.errors import ConfigError
from depthgrow.partition import make_plan


@pytest.mark.parametrize("name,blocks", [
    ("residual-18", 8), ("residual-34", 16), ("residual-50", 16),
    ("residual-101", 33), ("residual-152", 50),
    ("transformer-b", 12), ("transformer-l", 24),
    ("transformer-b32-overlap", 12),
])
def test_preset_block_counts(name, blocks):
    assert backbone_preset(name, 5).block_count == blocks


def test_unknown_preset():
    with pytest.raises(ConfigError):
        backbone_preset("residual-19", 5)


def test_unsupported_family():
    with pytest.raises(ConfigError):
        BackboneSpec(family="recurrent", block_count=1,
                     stem=ConvStemSpec(8), block_widths=(8,),
                     num_classes=2, input_shape=(3, 8, 8))


def test_transformer_width_mismatch():
    with pytest.raises(ConfigError):
        BackboneSpec(family="transformer-encoder", block_count=2,
                     stem=PatchTokenizerSpec(4, 4, 16),
                     block_widths=(16, 32), num_classes=2,
                     input_shape=(3, 8, 8), attn_heads=2)


def test_single_block_custom_backbone():
    spec = BackboneSpec(family="residual-basic", block_count=1,
                        stem=ConvStemSpec(4, kernel_size=3, stride=1, pool=0),
                        block_widths=(4,), num_classes=3,
                        input_shape=(1, 8, 8))
    net = full_network(build_backbone(spec, seed=0), head_seed=1)
    out = net(torch.randn(2, 1, 8, 8))
    assert out.shape == (2, 3)


# --- parameter-count oracles -------------------------------------------------
# Independent per-layer arithmetic, written out against the architecture
# definition rather than the module tree.

def basic_block_params(c_in, c_out, stride):
    shortcut = c_in * c_out + 2 * c_out if (stride != 1 or c_in != c_out) else 0
    return 9 * c_in * c_out + 2 * c_out + 9 * c_out**2 + 2 * c_out + shortcut


def bottleneck_params(c_in, c_out, stride):
    w = c_out // 4
    shortcut = c_in * c_out + 2 * c_out if (stride != 1 or c_in != c_out) else 0
    return (c_in * w + 2 * w) + (9 * w * w + 2 * w) + (w * c_out + 2 * c_out) + shortcut


def resnet_params_oracle(layers, basic, num_classes):
    total = 7 * 7 * 3 * 64 + 2 * 64  # 7x7 stem conv + BN
    block = basic_block_params if basic else bottleneck_params
    c_in = 64
    for layer_idx, count in enumerate(layers):
        c_out = (64 if basic else 256) * 2**layer_idx
        for b in range(count):
            stride = 2 if layer_idx > 0 and b == 0 else 1
            total += block(c_in, c_out, stride)
            c_in = c_out
    total += c_in * num_classes + num_classes
    return total


@pytest.mark.parametrize("name,layers,basic,classes,known", [
    ("residual-18", (2, 2, 2, 2), True, 1000, 11_689_512),
    ("residual-18", (2, 2, 2, 2), True, 5, None),
    ("residual-50", (3, 4, 6, 3), False, 1000, 25_557_032),
    ("residual-101", (3, 4, 23, 3), False, 5, None),
    ("residual-152", (3, 8, 36, 3), False, 5, None),
])
def test_full_network_parameter_counts(name, layers, basic, classes, known):
    oracle = resnet_params_oracle(layers, basic, classes)
    if known is not None:
        assert oracle == known
    spec = backbone_preset(name, classes)
    net = full_network(build_backbone(spec, device="meta"))
    assert parameter_count(net) == oracle


def test_vit_parameter_count_oracle():
    # ViT-B/16 at 224x224: patch embed + class token + positional table,
    # 12 encoder layers, closing LN, classifier.
    d, L, tokens, classes = 768, 12, 196, 1000
    stem = 16 * 16 * 3 * d + d + d + (tokens + 1) * d
    per_layer = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) \
        + (d * 4 * d + 4 * d) + (4 * d * d + d)
    oracle = stem + L * per_layer + 2 * d + d * classes + classes
    assert oracle == 86_567_656
    spec = backbone_preset("transformer-b16", classes)
    net = full_network(build_backbone(spec, device="meta"))
    assert parameter_count(net) == oracle


def test_torchvision_forward_equality_resnet():
    torchvision = pytest.importorskip("torchvision")
    for name, builder in (("residual-18", torchvision.models.resnet18),
                          ("residual-50", torchvision.models.resnet50)):
        spec = backbone_preset(name, 13, input_size=64)
        mine = full_network(build_backbone(spec, seed=0), head_seed=1)
        theirs = builder(num_classes=13)
        assert (parameter_count(mine)
                == sum(p.numel() for p in theirs.parameters()))
        mine.load_state_dict(_translate_resnet_state(theirs.state_dict()))
        mine.eval(), theirs.eval()
        x = torch.randn(2, 3, 64, 64, generator=torch.Generator().manual_seed(7))
        with torch.no_grad():
            torch.testing.assert_close(mine(x), theirs(x), rtol=1e-5, atol=1e-5)


def _translate_resnet_state(tv_state):
    translated = {}
    block = 0
    layer_of = {}
    for key in tv_state:
        if key.startswith("layer"):
            layer, idx = key.split(".")[0], int(key.split(".")[1])
            layer_of.setdefault((layer, idx), None)
    for layer, idx in sorted(layer_of, key=lambda t: (t[0], t[1])):
        layer_of[(layer, idx)] = block
        block += 1
    for key, value in tv_state.items():
        if key.startswith("conv1."):
            translated["stem.conv." + key.split(".", 1)[1]] = value
        elif key.startswith("bn1."):
            translated["stem.bn." + key.split(".", 1)[1]] = value
        elif key.startswith("fc."):
            translated["classifier.fc." + key.split(".", 1)[1]] = value
        elif key.startswith("layer"):
            parts = key.split(".")
            i = layer_of[(parts[0], int(parts[1]))]
            rest = ".".join(parts[2:])
            rest = rest.replace("downsample.", "shortcut.")
            translated[f"blocks.{i}.{rest}"] = value
        else:
            raise AssertionError(f"unmapped torchvision key {key}")
    return translated


def test_torchvision_vit_parameter_parity():
    torchvision = pytest.importorskip("torchvision")
    theirs = torchvision.models.vit_b_16(num_classes=21)
    spec = backbone_preset("transformer-b16", 21)
    mine = full_network(build_backbone(spec, device="meta"))
    assert parameter_count(mine) == sum(p.numel() for p in theirs.parameters())
    del theirs


# --- tokenizer ----------------------------------------------------------------

@pytest.mark.parametrize("size,patch,stride,expected", [
    (224, 16, 16, 196),   # (224-16)/16 + 1 = 14 per axis
    (224, 32, 16, 169),   # (224-32)/16 + 1 = 13 per axis
    (16, 16, 16, 1),      # image equals patch: single token
    (16, 16, 8, 1),
])
def test_token_counts(size, patch, stride, expected):
    tok = PatchTokenizerSpec(patch, stride, 32)
    assert tok.token_count(size, size) == expected


def test_token_count_matches_stem_output():
    from depthgrow.blocks import PatchEmbedStem
    stem = PatchEmbedStem(3, (32, 32), 8, 4, 16)
    out = stem(torch.randn(2, 3, 32, 32))
    grid = (32 - 8) // 4 + 1
    assert out.shape == (2, grid * grid + 1, 16)


def test_tokens_are_linear_patch_projections():
    from depthgrow.blocks import PatchEmbedStem
    stem = PatchEmbedStem(1, (8, 8), 4, 4, 6)
    with torch.no_grad():
        stem.pos_embed.zero_()
        stem.class_token.zero_()
    x = torch.randn(1, 1, 8, 8)
    tokens = stem(x)
    w = stem.proj.weight.reshape(6, -1)
    first_patch = x[0, :, 0:4, 0:4].reshape(-1)
    expected = w @ first_patch + stem.proj.bias
    torch.testing.assert_close(tokens[0, 1], expected)
    last_patch = x[0, :, 4:8, 4:8].reshape(-1)
    torch.testing.assert_close(tokens[0, 4], w @ last_patch + stem.proj.bias)


def test_patch_larger_than_image_rejected():
    with pytest.raises(ConfigError):
        PatchTokenizerSpec(16, 16, 8).token_grid(8, 8)
    with pytest.raises(ConfigError):
        PatchTokenizerSpec(8, 12, 8)


def test_overlap_preset_strides():
    assert backbone_preset("transformer-b32", 5).stem.stride == 32
    assert backbone_preset("transformer-b32-overlap", 5).stem.stride == 16


# --- forward contracts ---------------------------------------------------------

def _tiny_handset_network():
    """1-block CNN with hand-set weights; BN scaled to be an exact identity."""
    spec = BackboneSpec(family="residual-basic", block_count=1,
                        stem=ConvStemSpec(2, kernel_size=3, stride=1, pool=0),
                        block_widths=(2,), num_classes=2,
                        input_shape=(1, 4, 4))
    net = full_network(build_backbone(spec, seed=0), head_seed=0)
    bn_identity = math.sqrt(1.0 + 1e-5)
    with torch.no_grad():
        net.stem.conv.weight[0].fill_(0.1)
        net.stem.conv.weight[1].fill_(-0.05)
        for bn in (net.stem.bn, net.blocks[0].bn1, net.blocks[0].bn2):
            bn.weight.fill_(bn_identity)
            bn.bias.zero_()
            bn.running_mean.zero_()
            bn.running_var.fill_(1.0)
        net.blocks[0].conv1.weight.zero_()
        net.blocks[0].conv2.weight.zero_()
        net.classifier.fc.weight.copy_(torch.tensor([[1.0, 0.0], [-1.0, 2.0]]))
        net.classifier.fc.bias.copy_(torch.tensor([0.5, -0.25]))
    net.eval()
    return net


def test_hand_computed_forward():
    # Constant 4x4 input through an all-0.1 3x3 kernel (padding 1): corners
    # see 4 taps (0.4), edges 6 (0.6), interior 9 (0.9). Channel 1 is all
    # negative and dies at the ReLU. The residual block is the identity
    # (zeroed convs + identity shortcut), so GAP gives
    # (4*0.4 + 8*0.6 + 4*0.9)/16 = 0.625 on channel 0 and 0 on channel 1.
    # Logits: [0.625 + 0.5, -0.625 - 0.25] = [1.125, -0.875].
    net = _tiny_handset_network()
    out = net(torch.ones(1, 1, 4, 4))
    torch.testing.assert_close(out, torch.tensor([[1.125, -0.875]]),
                               rtol=0, atol=1e-6)


def test_zero_weight_classifier_gives_zero_logits():
    net = _tiny_handset_network()
    with torch.no_grad():
        net.classifier.fc.weight.zero_()
        net.classifier.fc.bias.zero_()
    out = net(torch.randn(5, 1, 4, 4))
    assert torch.all(out == 0)
    assert out.shape == (5, 2)


def test_batch_row_count():
    spec = backbone_preset("tiny-transformer", 10, input_size=32)
    net = full_network(build_backbone(spec, seed=0), head_seed=1)
    net.eval()
    for b in (1, 4, 9):
        assert net(torch.randn(b, 3, 32, 32)).shape == (b, 10)


def test_forward_shape_mismatch():
    spec = backbone_preset("tiny-residual-basic", 5, input_size=32)
    net = full_network(build_backbone(spec, seed=0), head_seed=1)
    with pytest.raises(ValueError):
        net(torch.randn(2, 3, 16, 16))
    with pytest.raises(ValueError):
        net(torch.randn(2, 1, 32, 32))


def test_deterministic_eval_forward():
    spec = backbone_preset("tiny-transformer", 5, input_size=32)
    net = full_network(build_backbone(spec, seed=3), head_seed=4)
    net.eval()
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        torch.testing.assert_close(net(x), net(x), rtol=0, atol=0)


# --- prefixes ------------------------------------------------------------------

@pytest.mark.parametrize("preset,stages", [
    ("tiny-residual-basic", 2), ("tiny-residual-bottleneck", 4),
    ("tiny-transformer", 3),
])
def test_prefix_matches_manual_composition(preset, stages):
    spec = backbone_preset(preset, 5, input_size=32)
    blocklist = build_backbone(spec, seed=0)
    plan = make_plan(spec.block_count, stages)
    x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    for k in range(1, stages + 1):
        net = build_prefix(blocklist, plan, k, head_seed=k)
        net.eval()
        h = blocklist.stem(x)
        for block in blocklist.blocks[: plan.prefix_length(k)]:
            h = block(h)
        with torch.no_grad():
            torch.testing.assert_close(net(x), net.head(h), rtol=0, atol=0)
        assert net.n_active_blocks == plan.prefix_length(k)


def test_prefix_stage_out_of_range():
    spec = backbone_preset("tiny-residual-basic", 5)
    blocklist = build_backbone(spec, seed=0)
    plan = make_plan(4, 2)
    with pytest.raises(ConfigError):
        build_prefix(blocklist, plan, 3)
    with pytest.raises(ConfigError):
        build_prefix(blocklist, plan, 0)


def test_final_stage_prefix_equals_full_network():
    spec = backbone_preset("tiny-residual-basic", 5, input_size=32)
    blocklist = build_backbone(spec, seed=0)
    plan = make_plan(spec.block_count, 2)
    head = make_head(spec, spec.block_count, FINAL_HEAD,
                     torch.Generator().manual_seed(9))
    prefix = build_prefix(blocklist, plan, 2, head=head, head_role=FINAL_HEAD)
    full = full_network(blocklist)
    full.classifier.load_state_dict(head.state_dict())
    prefix.eval(), full.eval()
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        torch.testing.assert_close(prefix(x), full(x), rtol=0, atol=0)
    assert prefix.head_name == "classifier"


def test_head_parameter_count_depends_only_on_input_width():
    spec = backbone_preset("tiny-residual-basic", 5, input_size=32)
    h1 = make_head(spec, 2, "progressive")   # width 32
    h2 = make_head(spec, 3, "progressive")   # width 32 again
    assert (parameter_count(h1) == parameter_count(h2))
    h3 = make_head(spec, 4, "progressive")   # width 64: only proj differs
    proj_delta = (64 - 32) * spec.head_embed_width
    assert parameter_count(h3) - parameter_count(h1) == proj_delta
