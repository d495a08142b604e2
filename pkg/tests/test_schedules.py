import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pathassist.exceptions import ConfigurationError, InvalidInputError
from pathassist.schedules import (ALIGN_STEPS, FINETUNE_STEPS, PLIP_DEFAULT, STAGE2_CONNECTOR, STAGE3_CONNECTOR,
                                  STAGE3_LORA, ScheduleSpec, effective_batch, lr_at, make_scheduler, plip_lr,
                                  schedule_from_dict, warmup_cosine)


def _rel(a, b):
    return abs(a - b) / abs(b)


def test_plip_reported_points():
    assert _rel(plip_lr(0, PLIP_DEFAULT), 1e-5) < 1e-12
    assert _rel(plip_lr(1000, PLIP_DEFAULT), 1e-4) < 1e-12
    assert _rel(plip_lr(PLIP_DEFAULT.total_steps, PLIP_DEFAULT), 5e-5) < 1e-12


def test_plip_decays_only_at_interval_boundaries():
    iv = PLIP_DEFAULT.interval_steps
    assert plip_lr(iv - 1, PLIP_DEFAULT) == 1e-4
    assert plip_lr(iv, PLIP_DEFAULT) < 1e-4
    assert plip_lr(iv, PLIP_DEFAULT) == plip_lr(2 * iv - 1, PLIP_DEFAULT)
    ratio = plip_lr(2 * iv, PLIP_DEFAULT) / plip_lr(iv, PLIP_DEFAULT)
    assert ratio == pytest.approx((0.5) ** (1 / 30), rel=1e-12)


@pytest.mark.parametrize("spec,floor", [(STAGE2_CONNECTOR, 0.0), (STAGE3_CONNECTOR, 1e-6), (STAGE3_LORA, 1e-6)])
def test_cosine_endpoints_exact(spec, floor):
    assert warmup_cosine(0, spec) == 1e-5
    assert warmup_cosine(spec.warmup_steps, spec) == spec.peak_lr
    assert warmup_cosine(spec.total_steps, spec) == floor


def test_reported_horizons_and_batches():
    assert effective_batch(16, 6, 6) == 576 and effective_batch(16, 6, 4) == 384
    assert ALIGN_STEPS == 9 * math.ceil(518_413 / 576)
    assert FINETUNE_STEPS == 12 * math.ceil(35_543 / 384)
    assert STAGE3_LORA.peak_lr == 2e-4
    with pytest.raises(InvalidInputError):
        effective_batch(0, 1, 1)


@pytest.mark.parametrize("spec", [
    ScheduleSpec("warmup_interval_decay", 1e-5, 1e-4, 5e-5, 7, 60, 20),
    ScheduleSpec("warmup_cosine", 1e-5, 2e-4, 1e-6, 5, 50),
])
def test_iterated_scheduler_equals_closed_form(spec):
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.SGD([p], lr=123.0)
    sched = make_scheduler(opt, [spec])
    for step in range(spec.total_steps + 1):
        assert opt.param_groups[0]["lr"] == lr_at(step, spec)
        opt.step()
        sched.step()


@given(st.integers(1, 20), st.integers(1, 10), st.data())
def test_interval_schedule_monotone_after_warmup(n, interval, data):
    warm = data.draw(st.integers(0, interval - 1))
    spec = ScheduleSpec("warmup_interval_decay", 1e-6, 1e-3, 1e-5, warm, n * interval, interval)
    lrs = [plip_lr(s, spec) for s in range(warm, spec.total_steps + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == spec.floor_lr


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ScheduleSpec("linear", 0, 1, 0, 0, 1)
    with pytest.raises(ConfigurationError):
        ScheduleSpec("warmup_interval_decay", 0, 1, 0, 0, 10, 3)
    with pytest.raises(ConfigurationError):
        ScheduleSpec("warmup_interval_decay", 0, 1, 0, 5, 10, 5)
    with pytest.raises(ConfigurationError):
        ScheduleSpec("warmup_cosine", 0, 1, 2, 0, 10)
    with pytest.raises(InvalidInputError):
        warmup_cosine(11, ScheduleSpec("warmup_cosine", 0, 1, 0, 0, 10))
    with pytest.raises(ConfigurationError):
        schedule_from_dict({"kind": "warmup_cosine"})


def test_rescaled_keeps_shape():
    small = PLIP_DEFAULT.rescaled(300)
    assert small.interval_steps == 10 and small.total_steps == 300
    assert plip_lr(300, small) == pytest.approx(5e-5, rel=1e-12)
    with pytest.raises(ConfigurationError):
        PLIP_DEFAULT.rescaled(301)
