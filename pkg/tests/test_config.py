import pytest

from taskpreempt.config import HarnessConfig, apply_scale, load_config

CONFIGS = ["desk.yaml", "smoke.yaml", "paper.yaml", "sweep-desk.yaml"]


@pytest.mark.parametrize("name", CONFIGS)
def test_shipped_configs_load(name, request):
    path = request.config.rootpath / "configs" / name
    config = load_config(path)
    assert isinstance(config, HarnessConfig)


def test_round_trip_dict():
    c = HarnessConfig(r_grid=[0.25, 0.5])
    assert HarnessConfig.from_dict(c.to_dict()) == c


def test_rejects_bad_values():
    with pytest.raises(ValueError):
        HarnessConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        HarnessConfig(r_grid=[1.0])
    with pytest.raises(ValueError):
        HarnessConfig(primitives=["pause"])
    with pytest.raises(ValueError):
        HarnessConfig.from_dict({"low": {"input_bytes": 1000}})


def test_scales():
    paper = apply_scale(HarnessConfig(), "paper")
    assert paper.low.input_bytes == 512 << 20 and paper.repetitions == 20
    assert apply_scale(HarnessConfig(), "desk").low.input_bytes == 64 << 20
