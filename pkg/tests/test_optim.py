import numpy as np
import pytest

from ccir import (
    OptimizerState,
    ParameterSet,
    Tensor,
    adamw_step,
    halved_lr,
    load_checkpoint,
    save_checkpoint,
)


def test_zero_grads_no_decay_is_identity():
    params = ParameterSet({"w": Tensor([[1.0, -2.0], [3.0, 4.0]])})
    state = OptimizerState.initial(params)
    new_p, new_s = adamw_step(params, params.zeros_like(), state, lr=0.1, weight_decay=0.0)
    assert new_p["w"] == params["w"]
    assert new_s.step == 1


def test_first_step_hand_value():
    # scalar p=1, grad=1: m_hat=1, v_hat=1, update = lr * 1/(1+eps) ~ lr
    params = ParameterSet({"p": Tensor([1.0])})
    state = OptimizerState.initial(params)
    grads = ParameterSet({"p": Tensor([1.0])})
    new_p, new_s = adamw_step(
        params, grads, state, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0
    )
    assert abs(float(new_p["p"].data[0]) - 0.9) < 1e-6
    assert new_s.step == 1


def test_decay_is_decoupled():
    # with zero grads, decay still shrinks the parameter by lr*wd*p
    params = ParameterSet({"p": Tensor([2.0])})
    state = OptimizerState.initial(params)
    new_p, _ = adamw_step(
        params, params.zeros_like(), state, lr=0.1, weight_decay=0.5
    )
    assert abs(float(new_p["p"].data[0]) - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-6


def test_path_mismatch_lists_paths():
    params = ParameterSet({"a": Tensor([1.0]), "b": Tensor([1.0])})
    state = OptimizerState.initial(params)
    with pytest.raises(KeyError, match="b"):
        adamw_step(params, ParameterSet({"a": Tensor([1.0])}), state)
    with pytest.raises(KeyError, match="c"):
        adamw_step(
            params,
            ParameterSet({"a": Tensor([1.0]), "b": Tensor([1.0]), "c": Tensor([1.0])}),
            state,
        )


def test_frozen_subset_update_keeps_other_moments():
    params = ParameterSet({"enc/w": Tensor([1.0]), "head/w": Tensor([1.0])})
    state = OptimizerState.initial(params)
    live = params.subset(lambda p: not p.startswith("enc/"))
    grads = ParameterSet({"head/w": Tensor([1.0])})
    new_live, new_state = adamw_step(live, grads, state, lr=0.1)
    assert new_live.paths() == ["head/w"]
    # moments for the frozen path survive for later unfreezing
    assert "enc/w" in new_state.m and "enc/w" in new_state.v
    merged = params.merge(new_live)
    assert merged["enc/w"] == params["enc/w"]


def test_adamw_matches_reference_loop():
    # several steps against a straightforward standalone implementation
    rng = np.random.default_rng(11)
    p0 = rng.normal(size=(3, 2)).astype(np.float32)
    params = ParameterSet({"w": Tensor(p0)})
    state = OptimizerState.initial(params)
    lr, b1, b2, eps, wd = 3e-2, 0.9, 0.999, 1e-8, 0.01

    ref_p = p0.astype(np.float64).copy()
    ref_m = np.zeros_like(ref_p)
    ref_v = np.zeros_like(ref_p)
    for t in range(1, 6):
        g = rng.normal(size=ref_p.shape).astype(np.float32)
        params, state = adamw_step(
            params, ParameterSet({"w": Tensor(g)}), state, lr, b1, b2, eps, wd
        )
        g64 = g.astype(np.float64)
        ref_m = b1 * ref_m + (1 - b1) * g64
        ref_v = b2 * ref_v + (1 - b2) * g64 * g64
        mh = ref_m / (1 - b1**t)
        vh = ref_v / (1 - b2**t)
        ref_p = ref_p - lr * mh / (np.sqrt(vh) + eps) - lr * wd * ref_p
    np.testing.assert_allclose(params["w"].data, ref_p.astype(np.float32), atol=1e-5)
    assert state.step == 5


def test_lr_schedule_halves_every_ten_epochs():
    assert halved_lr(5e-4, 0) == 5e-4
    assert halved_lr(5e-4, 9) == 5e-4
    assert halved_lr(5e-4, 10) == 2.5e-4
    assert halved_lr(5e-4, 19) == 2.5e-4
    assert halved_lr(5e-4, 20) == 1.25e-4
    with pytest.raises(ValueError):
        halved_lr(5e-4, -1)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    params = ParameterSet(
        {
            "enc/w": Tensor(rng.normal(size=(4, 3)).astype(np.float32)),
            "enc/b": Tensor(rng.normal(size=(3,)).astype(np.float32)),
            "head/scale": Tensor([2.5]),
        }
    )
    state = OptimizerState(params.zeros_like(), params.zeros_like(), step=17)
    f = tmp_path / "model.nck"
    save_checkpoint(f, params, state)
    loaded_p, loaded_s = load_checkpoint(f)
    assert loaded_p == params
    assert loaded_s is not None
    assert loaded_s.step == 17
    assert loaded_s.m == state.m and loaded_s.v == state.v


def test_checkpoint_bytes_deterministic(tmp_path):
    params = ParameterSet({"b": Tensor([1.0, 2.0]), "a": Tensor([[3.0]])})
    f1, f2 = tmp_path / "a.nck", tmp_path / "b.nck"
    save_checkpoint(f1, params)
    save_checkpoint(f2, ParameterSet({"a": Tensor([[3.0]]), "b": Tensor([1.0, 2.0])}))
    assert f1.read_bytes() == f2.read_bytes()


def test_checkpoint_magic_and_truncation(tmp_path):
    params = ParameterSet({"w": Tensor([1.0])})
    f = tmp_path / "model.nck"
    save_checkpoint(f, params)
    raw = f.read_bytes()
    assert raw[:4] == b"NCK1"

    bad = tmp_path / "bad.nck"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)

    trunc = tmp_path / "trunc.nck"
    trunc.write_bytes(raw[:-2])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(trunc)


def test_checkpoint_without_state(tmp_path):
    params = ParameterSet({"w": Tensor([1.0])})
    f = tmp_path / "model.nck"
    save_checkpoint(f, params)
    loaded_p, loaded_s = load_checkpoint(f)
    assert loaded_p == params
    assert loaded_s is None


def test_reserved_prefix_rejected(tmp_path):
    with pytest.raises(ValueError, match="opt/"):
        save_checkpoint(tmp_path / "x.nck", ParameterSet({"opt/evil": Tensor([1.0])}))
