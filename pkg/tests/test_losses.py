import math

import pytest
import torch

from faceprotect.losses import (LossWeights, NonFiniteLossError, PatchDiscriminator, loss_deviate,
                                loss_discriminator, loss_perceptual, loss_pixel, loss_total,
                                lsgan_discriminator, lsgan_generator)


def test_deviate_closed_forms():
    e = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    assert loss_deviate(e, e).item() == pytest.approx(1.0)
    assert loss_deviate(e, -e).item() == pytest.approx(-1.0)
    assert loss_deviate(e, e.flip(1)).item() == pytest.approx(0.0)


def test_deviate_errors():
    with pytest.raises(ValueError, match="dimensions"):
        loss_deviate(torch.ones(1, 2), torch.ones(1, 3))
    with pytest.raises(ValueError, match="zero-norm"):
        loss_deviate(torch.zeros(1, 2), torch.ones(1, 2))


def test_pixel_closed_form():
    a = torch.zeros(1, 3, 4, 4)
    assert loss_pixel(a, a + 0.5).item() == pytest.approx(0.25)
    with pytest.raises(ValueError, match="shape"):
        loss_pixel(a, torch.zeros(1, 3, 4, 5))


def test_perceptual_averages_layers():
    a = [torch.zeros(2, 3, 4, 4), torch.zeros(2, 5, 2, 2)]
    b = [torch.ones(2, 3, 4, 4), 2 * torch.ones(2, 5, 2, 2)]
    assert loss_perceptual(a, b).item() == pytest.approx((1 + 4) / 2)
    assert loss_perceptual(a, a).item() == 0
    with pytest.raises(ValueError, match="mismatched"):
        loss_perceptual(a, b[:1])


def test_lsgan_closed_forms():
    ones, zeros = torch.ones(4), torch.zeros(4)
    assert lsgan_generator(ones).item() == 0
    assert lsgan_generator(zeros).item() == 1
    assert lsgan_discriminator(ones, zeros).item() == 0
    assert lsgan_discriminator(zeros, ones).item() == 2


def test_discriminator_patch_map():
    d = PatchDiscriminator()
    s = d(torch.zeros(2, 3, 64, 64))
    assert s.shape == (2, 1, 4, 4)
    assert loss_discriminator(d, torch.zeros(2, 3, 64, 64), torch.zeros(2, 3, 64, 64)).dim() == 0


def test_total_is_weighted_sum():
    parts = {"adv": torch.tensor(1.0), "pixel": torch.tensor(2.0), "lpips": 3.0, "deviate": torch.tensor(4.0)}
    assert float(loss_total(parts)) == pytest.approx(0.2 + 1.0 + 3.0 + 0.6)


def test_total_rejects_non_finite():
    parts = {"adv": 0.0, "pixel": torch.tensor(math.nan), "lpips": 0.0, "deviate": 0.0}
    with pytest.raises(NonFiniteLossError) as exc:
        loss_total(parts)
    assert exc.value.term == "pixel"


@pytest.mark.parametrize("bad", [-1.0, math.inf, math.nan])
def test_weights_validated(bad):
    with pytest.raises(ValueError):
        LossWeights(adv=bad)
