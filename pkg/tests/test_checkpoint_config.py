import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from qair.checkpoint import config_hash, load_archive, load_state, save_archive, save_state
from qair.config import RunConfig, build_config, dump_config, load_config, parse_overrides
from qair.errors import ConfigError


def test_archive_roundtrip_bit_exact(tmp_path):
    arrays = {"a": np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32), "b": torch.arange(5)}
    save_archive(tmp_path / "x.npz", arrays, {"stage": 2, "note": "ok"})
    got, meta = load_archive(tmp_path / "x.npz")
    assert got["a"].tobytes() == arrays["a"].tobytes()
    assert np.array_equal(got["b"], np.arange(5)) and meta == {"stage": 2, "note": "ok"}


def test_state_roundtrip_with_optimizer(tmp_path):
    torch.manual_seed(0)
    model = torch.nn.Linear(4, 3)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    model(torch.randn(2, 4)).sum().backward()
    opt.step()
    state = {"model": model.state_dict(), "optimizer": opt.state_dict(), "step": 7, "difficulty": {"avg_psnr": 21.5}}
    save_state(tmp_path / "s.npz", state, {"config_hash": "abc"})
    got, meta = load_state(tmp_path / "s.npz")
    assert meta == {"config_hash": "abc"} and got["step"] == 7 and got["difficulty"]["avg_psnr"] == 21.5
    for k, v in model.state_dict().items():
        assert torch.equal(got["model"][k], v)
    opt2 = torch.optim.AdamW(torch.nn.Linear(4, 3).parameters(), lr=1e-3)
    opt2.load_state_dict(got["optimizer"])
    for k in (0, 1):
        for name in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(opt2.state_dict()["state"][k][name], opt.state_dict()["state"][k][name])


tree = st.recursive(
    st.one_of(st.integers(-1000, 1000), st.floats(allow_nan=False, allow_infinity=False), st.text(max_size=5), st.booleans()),
    lambda children: st.one_of(
        st.lists(children, max_size=3),
        st.dictionaries(st.text("abcxyz", min_size=1, max_size=4), children, max_size=3),
    ),
    max_leaves=10,
)


@settings(max_examples=40, deadline=None)
@given(data=st.dictionaries(st.text("abcxyz", min_size=1, max_size=4), tree, min_size=1, max_size=3))
def test_nested_state_roundtrip(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("st") / "s.npz"
    save_state(path, data)
    assert load_state(path)[0] == data


def test_defaults_match_published_values():
    cfg = RunConfig()
    assert (cfg.stage1.lr, cfg.stage1.batch, cfg.stage1.n_tokens) == (4e-5, 32, 16)
    s2 = cfg.stage2
    assert (s2.lr, s2.patch, s2.betas) == (2e-4, 128, [0.9, 0.999])
    assert (s2.lambda_cl, s2.lambda_clip, s2.lambda_dpl, s2.tau, s2.gamma, s2.lambda_easy) == (0.1, 0.05, 0.1, 0.07, 0.25, 2.0)


def test_desk_preset():
    cfg = build_config(preset="desk")
    assert cfg.dataset.image_size == 64
    assert cfg.stage2.restorer.base_channels == 8 and cfg.stage2.restorer.blocks == [1, 1, 1, 1]
    assert 500 <= cfg.stage2.iters <= 2000


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        build_config({"bogus": 1})
    with pytest.raises(ConfigError, match="stage2.restorer."):
        build_config({"stage2": {"restorer": {"depth": 3}}})
    with pytest.raises(ConfigError):
        build_config(preset="huge")
    with pytest.raises(ConfigError):
        parse_overrides(["stage2.iters"])


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("preset: desk\nseed: 5\nstage2:\n  iters: 50\n")
    cfg = load_config(path, overrides=["stage2.restorer.blocks=[1,1,1,2]", "dataset.kinds=[noise]"])
    assert cfg.seed == 5 and cfg.stage2.iters == 50 and cfg.dataset.image_size == 64
    assert cfg.stage2.restorer.blocks == [1, 1, 1, 2] and cfg.dataset.kinds == ["noise"]
    path.write_text(dump_config(cfg))
    again = load_config(path, preset="full")
    assert config_hash(again.to_dict()) == config_hash(cfg.to_dict())


def test_invalid_nested_value():
    with pytest.raises(ConfigError):
        build_config({"stage2": {"restorer": {"blocks": [1, 1]}}})
