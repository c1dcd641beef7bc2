import numpy as np
import pytest
import torch

from posefill import GeneratorConfig, StickFigureSpec, TrainSchedule, synth_sample
from posefill.pose import NUM_KEYPOINTS, Keypoints17


def make_keypoints(positions, width=None):
    """Keypoints17 from {index: (x, y)}; everything else invisible."""
    xy = np.zeros((NUM_KEYPOINTS, 2))
    visible = np.zeros(NUM_KEYPOINTS, dtype=bool)
    for k, (x, y) in positions.items():
        xy[k] = (x, y)
        visible[k] = True
    return Keypoints17(xy, visible)


@pytest.fixture
def tiny_gen_config():
    """Two-stage config small enough for per-test construction."""
    return GeneratorConfig(resolutions=((18, 10), (36, 20)),
                           channels={18: 24, 36: 16}, style_dim=24)


@pytest.fixture
def tiny_schedule():
    return TrainSchedule(stage_budgets=(64, 64), batch_size=4, fade_budget=100,
                         d_width=16, progressive=True)


@pytest.fixture(scope="session")
def stick_spec():
    return StickFigureSpec()


@pytest.fixture(scope="session")
def sample_72(stick_spec):
    return synth_sample(stick_spec, seed=5, height=72, width=40)


def random_sample(seed, height=18, width=10, spec=None):
    return synth_sample(spec or StickFigureSpec(), seed=seed, height=height, width=width)


class ListDataset:
    def __init__(self, samples):
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


@pytest.fixture
def list_dataset_18():
    return ListDataset([random_sample(s) for s in range(8)])


def assert_state_equal(a, b):
    """Bitwise equality of two TrainStates (parameters, moments, counters, RNG)."""
    sa, sb = a.generator.state_dict(), b.generator.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert torch.equal(sa[k], sb[k]), f"generator tensor {k} differs"
    for k in a.generator.ema:
        assert torch.equal(a.generator.ema[k], b.generator.ema[k]), f"ema {k} differs"
    da, db = a.discriminators.state_dict(), b.discriminators.state_dict()
    assert da.keys() == db.keys()
    for k in da:
        assert torch.equal(da[k], db[k]), f"discriminator tensor {k} differs"
    oa, ob = a.g_opt.state_dict(), b.g_opt.state_dict()
    assert len(oa["state"]) == len(ob["state"])
    for idx in oa["state"]:
        for k, v in oa["state"][idx].items():
            w = ob["state"][idx][k]
            if isinstance(v, torch.Tensor):
                assert torch.equal(v, w), f"g_opt state {idx}/{k} differs"
            else:
                assert v == w
    oa, ob = a.d_opt.state_dict(), b.d_opt.state_dict()
    for idx in oa["state"]:
        for k, v in oa["state"][idx].items():
            w = ob["state"][idx][k]
            if isinstance(v, torch.Tensor):
                assert torch.equal(v, w), f"d_opt state {idx}/{k} differs"
            else:
                assert v == w
    assert a.step == b.step
    assert a.stage == b.stage
    assert a.images_seen == b.images_seen
    assert torch.equal(a.rng_latent.get_state(), b.rng_latent.get_state())
    assert torch.equal(a.rng_aug.get_state(), b.rng_aug.get_state())
    assert torch.equal(a.rng_data.get_state(), b.rng_data.get_state())
