import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bcosnet.backbone import BRANCH_IDS, BranchTails, SharedTrunk, TrunkConfig, trunk_forward
from bcosnet.losses import LossWeights, TripletConfig, total_loss
from bcosnet.model import BCOSNet, ModelConfig
from bcosnet.training import OptimConfig, Trainer
from bcosnet.data import LabeledBatch


def test_config_validation():
    with pytest.raises(ValueError):
        TrunkConfig("resnet")
    with pytest.raises(ValueError):
        TrunkConfig(out_channels=4)
    with pytest.raises(ValueError):
        TrunkConfig(stride=32)


@torch.no_grad()
def test_osnet_like_full_size_batch():
    trunk = SharedTrunk(TrunkConfig()).eval()
    out = trunk(torch.randn(64, 3, 256, 128))
    assert out.shape == (64, 512, 16, 8)
    assert out.shape[1] > 0


@torch.no_grad()
def test_tiny_stride16_shape():
    trunk = SharedTrunk(TrunkConfig("tiny_test", 32, stride=16)).eval()
    assert trunk(torch.randn(2, 3, 64, 32)).shape == (2, 32, 4, 2)


@torch.no_grad()
@pytest.mark.parametrize("variant", ["tiny_test", "osnet_like"])
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_zero_input_zero_output(variant, mode):
    trunk = SharedTrunk(TrunkConfig(variant, 32))
    for m in trunk.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            torch.nn.init.zeros_(m.bias)
        if getattr(m, "bias", None) is not None and isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
            torch.nn.init.zeros_(m.bias)
    trunk.train(mode == "train")
    out = trunk(torch.zeros(2, 3, 64, 32))
    assert torch.count_nonzero(out) == 0


@settings(max_examples=12, deadline=None)
@given(st.sampled_from([8, 16]), st.integers(1, 6), st.integers(1, 4))
def test_shape_contract_tiny(stride, hm, wm):
    trunk = SharedTrunk(TrunkConfig("tiny_test", 16, stride=stride)).eval()
    h, w = stride * hm, stride * wm
    with torch.no_grad():
        out = trunk(torch.randn(1, 3, h, w))
    assert out.shape[2:] == (h // stride, w // stride)


@torch.no_grad()
@pytest.mark.parametrize("stride", [8, 16])
def test_shape_contract_osnet(stride):
    trunk = SharedTrunk(TrunkConfig("osnet_like", 32, stride=stride)).eval()
    for h, w in ((64, 32), (96, 48), (128, 64)):
        assert trunk(torch.randn(1, 3, h, w)).shape[2:] == (h // stride, w // stride)


def test_eval_determinism():
    torch.manual_seed(0)
    trunk = SharedTrunk(TrunkConfig("osnet_like", 32)).eval()
    x = torch.randn(3, 3, 64, 32)
    with torch.no_grad():
        assert torch.equal(trunk(x), trunk(x))


def test_input_checks():
    trunk = SharedTrunk(TrunkConfig("tiny_test", 16))
    with pytest.raises(ValueError):
        trunk(torch.randn(2, 1, 64, 32))
    bad = torch.randn(2, 3, 64, 32)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        trunk(bad)
    with pytest.raises(ValueError):
        trunk_forward([torch.randn(3, 64, 32), torch.randn(3, 32, 32)], trunk)
    out = trunk_forward([torch.randn(3, 64, 32), torch.randn(3, 64, 32)], trunk.eval())
    assert out.shape[0] == 2


@torch.no_grad()
def test_private_tails():
    cfg = TrunkConfig("tiny_test", 32)
    tails = BranchTails(cfg).eval()
    fmap = torch.randn(2, 32, 4, 2)
    assert torch.equal(tails(fmap, "local"), tails.tails["local"](fmap))
    assert not torch.equal(tails(fmap, "local"), tails(fmap, "global"))
    out = tails(fmap, "gcp")
    assert out.shape == (2, 32, 4, 2)


@torch.no_grad()
def test_shared_tails_identical():
    tails = BranchTails(TrunkConfig("tiny_test", 32, share_tail_stages=True)).eval()
    fmap = torch.randn(2, 32, 4, 2)
    outs = [tails(fmap, b) for b in BRANCH_IDS]
    for o in outs[1:]:
        assert torch.equal(o, outs[0])


def test_tail_rejects_unknown_branch():
    tails = BranchTails(TrunkConfig("tiny_test", 16), branches=("local",))
    fmap = torch.randn(1, 16, 4, 2)
    with pytest.raises(ValueError):
        tails(fmap, "head")
    with pytest.raises(ValueError):
        tails(fmap, "global")
    shared = BranchTails(TrunkConfig("tiny_test", 16, share_tail_stages=True), branches=("local",))
    with pytest.raises(ValueError):
        shared(fmap, "ovr")


@pytest.mark.parametrize("variant,size,stride", [("tiny_test", (64, 32), 8), ("osnet_like", (128, 64), 16)])
def test_gradient_reaches_every_trunk_parameter(variant, size, stride):
    torch.manual_seed(0)
    cfg = ModelConfig(num_classes=4, trunk=TrunkConfig(variant, 32, stride=stride), reduced_channels=16)
    model = BCOSNet(cfg)
    trainer = Trainer(model, OptimConfig(), LossWeights(), TripletConfig())
    labels = torch.arange(4).repeat_interleave(2)
    batch = LabeledBatch(torch.randn(8, 3, *size), labels, torch.zeros(8, dtype=torch.long), list(range(8)))
    _, per_branch = trainer.compute_losses(batch)
    total, _ = total_loss(per_branch, trainer.weights)
    total.backward()
    dead = [n for n, p in model.trunk.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert not dead
