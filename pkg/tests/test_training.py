import numpy as np
import pytest

from emission_sr.core import DomainTag
from emission_sr.errors import ConfigError, DataError, DimensionError
from emission_sr.network import (
    NetworkConfig,
    Provenance,
    ProvenanceKind,
    dirac_checkpoint,
    init_parameters,
)
from emission_sr.quantile import Target, fit, patch_pool
from emission_sr.training import (
    AdamState,
    InjectionConfig,
    TrainConfig,
    adam_step,
    build_injection_set,
    fine_tune,
    loss_value,
    super_resolve,
    train,
    write_history,
)

from conftest import make_patch, smooth_field

NET = NetworkConfig(channels=8, blocks=1, attention_reduction=4, global_skip=True)


@pytest.mark.parametrize("kind", ["L1", "L2"])
def test_loss_gradient(rng, kind):
    pred, target = rng.normal(size=(2, 1, 4, 4)), rng.normal(size=(2, 1, 4, 4))
    value, grad = loss_value(pred, target, kind)
    e = np.zeros_like(pred)
    e[1, 0, 2, 3] = 1e-6
    fd = (loss_value(pred + e, target, kind)[0] - loss_value(pred - e, target, kind)[0]) / 2e-6
    assert grad[1, 0, 2, 3] == pytest.approx(fd, rel=1e-5)
    with pytest.raises(ConfigError):
        loss_value(pred, target, "L3")
    with pytest.raises(DimensionError):
        loss_value(pred, target[:1], kind)


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0, 3.0]), "frozen.w": np.zeros(1)}
    grads = {"w": np.array([0.5, -4.0, 0.0]), "frozen.w": np.ones(1)}
    state = AdamState()
    adam_step(params, grads, state, 0.1, frozen=("frozen",))
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 3.0], atol=1e-6)
    assert params["frozen.w"][0] == 0 and state.t == 1


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, patience=6)
    with pytest.raises(ConfigError):
        TrainConfig(loss="huber")
    TrainConfig(epochs=0, patience=10)


def _data(rng, n, domain=DomainTag.simulated()):
    return [make_patch(smooth_field(rng), domain, pid=f"{domain}{i}") for i in range(n)]


def test_zero_epochs_returns_init(rng, patches):
    init = init_parameters(NET, 0)
    t = fit(patch_pool(patches), 100)
    ck, hist = train(TrainConfig(epochs=0), patches, patches, t, init)
    assert ck == init and hist == []


def test_training_improves_and_is_deterministic(rng, tmp_path):
    data = _data(rng, 60)
    tr, va = data[:48], data[48:]
    t = fit(patch_pool(tr), 200)
    cfg = TrainConfig(epochs=4, batch_size=8, learning_rate=2e-3, patience=4, seed=3)
    init = init_parameters(NET, 1)
    ck, hist = train(cfg, tr, va, t, init, Provenance(ProvenanceKind.TRAINED_ON_S))
    assert len(hist) == 4
    assert hist[-1].train_loss < hist[0].train_loss
    assert ck.val_nmse_db == min(h.val_nmse_db for h in hist)
    assert ck.provenance.kind is ProvenanceKind.TRAINED_ON_S and ck.adam_m is not None
    again, _ = train(cfg, tr, va, t, init, Provenance(ProvenanceKind.TRAINED_ON_S))
    assert again == ck
    write_history(hist, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_nmse_db,val_ssim,lr"


def test_train_rejects_empty(rng, patches):
    t = fit(patch_pool(patches), 100)
    with pytest.raises(DataError):
        train(TrainConfig(epochs=1, patience=1), patches, [], t, init_parameters(NET, 0))


def test_injection_composition(rng):
    src = _data(rng, 20)
    tgt = _data(rng, 10, DomainTag.observed(1))
    for p in (0.0, 0.3, 1.0):
        s = build_injection_set(InjectionConfig(p, 10, src, tgt, seed=2))
        n_obs = sum(x.domain == DomainTag.observed(1) for x in s)
        assert len(s) == 10 and n_obs == round(10 * p)
        assert len({x.patch_id for x in s}) == 10
    with pytest.raises(DataError):
        InjectionConfig(1.0, 11, src, tgt)
    with pytest.raises(ConfigError):
        InjectionConfig(1.5, 10, src, tgt)


def test_fine_tune_provenance(rng):
    data = _data(rng, 12)
    t = fit(patch_pool(data), 100)
    cfg = TrainConfig(epochs=1, batch_size=4, patience=1)
    base = init_parameters(NET, 0, Provenance(ProvenanceKind.TRAINED_ON_ST))
    ck, _ = fine_tune(base, data[:8], data[8:], t, cfg, 0.4)
    assert ck.provenance == Provenance(ProvenanceKind.FINE_TUNED_DA, 0.4)
    with pytest.raises(ConfigError):
        fine_tune(init_parameters(NET, 0), data[:8], data[8:], t, cfg, 0.4)


def test_super_resolve_with_dirac_is_nearest_neighbour(rng):
    pool = rng.lognormal(size=5000)
    t = fit(pool, 1000, Target.NORMAL)
    lr = rng.choice(pool, size=(2, 6, 6))
    plain = NetworkConfig(channels=4, blocks=1, attention_reduction=2)
    out = super_resolve(dirac_checkpoint(plain), t, t, lr)
    expect = np.repeat(np.repeat(lr, 2, axis=1), 2, axis=2)
    assert np.max(np.abs(out - expect)) < 1e-3 * np.ptp(pool)
    other = fit(pool[:2000], 100)
    with pytest.raises(ConfigError):
        super_resolve(dirac_checkpoint(plain), t, other, lr)
    with pytest.raises(ConfigError):
        dirac_checkpoint(NET)


def test_loss_closed_forms():
    assert loss_value(np.array([2.0]), np.array([0.0]), "L2") == (4.0, np.array([4.0]))
    v, g = loss_value(np.ones(3), np.ones(3), "L1")
    assert v == 0 and not g.any()


def test_adam_zero_grad_decays_moments():
    params = {"w": np.array([1.0, 2.0])}
    state = AdamState()
    adam_step(params, {"w": np.array([1.0, -1.0])}, state, 0.1)
    m = state.m["w"].copy()
    before = params["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_allclose(state.m["w"], 0.9 * m)
    # the decayed first moment still moves the parameters; a zero moment would not
    assert not np.array_equal(params["w"], before)
    frozen = {"w": np.array([1.0])}
    adam_step(frozen, {"w": np.zeros(1)}, AdamState(), 0.1)
    assert frozen["w"][0] == 1.0


def test_fine_tune_zero_epochs_keeps_weights(rng, patches):
    t = fit(patch_pool(patches), 100)
    base = init_parameters(NET, 0, Provenance(ProvenanceKind.TRAINED_ON_S))
    ck, hist = fine_tune(base, patches, patches, t, TrainConfig(epochs=0), 0.0)
    assert hist == [] and all(np.array_equal(ck.params[k], base.params[k]) for k in base.params)
    assert ck.provenance == Provenance(ProvenanceKind.FINE_TUNED_DA, 0.0)


def test_init_weight_std():
    ck = init_parameters(NetworkConfig(channels=32, blocks=1, attention_reduction=8), 0)
    w = np.concatenate([ck.params["block0.conv1.w"].ravel(), ck.params["block0.conv2.w"].ravel()])
    assert w.size >= 1e4
    assert np.std(w) == pytest.approx(np.sqrt(2 / (32 * 9)), rel=0.1)
    assert not ck.params["block0.conv1.b"].any()
    assert ck == init_parameters(NetworkConfig(channels=32, blocks=1, attention_reduction=8), 0)


def test_200_patch_run_beats_bicubic():
    from dataclasses import replace

    from emission_sr.core import slice_into_patches
    from emission_sr.experiments import load_config
    from emission_sr.metrics import dataset_nmse_db
    from emission_sr.resample import bicubic_upsample
    from emission_sr.synthetic import gen_simulated_frame

    cfg = replace(load_config().field_config(), height=128, width=128, seed=8)
    data = []
    t = 0
    while len(data) < 250:
        data += [make_patch(p.values, pid=f"{t}-{p.origin}") for p in slice_into_patches(gen_simulated_frame(cfg, t)) if not p.empty]
        t += 1
    tr, va = data[:200], data[200:250]
    tf = fit(patch_pool(tr), 500)
    ck, hist = train(
        TrainConfig(epochs=4, batch_size=16, learning_rate=1e-3, patience=4, seed=0), tr, va, tf, init_parameters(NET, 0)
    )
    bicubic = dataset_nmse_db((p.hr, bicubic_upsample(p.lr)) for p in va)
    assert ck.val_nmse_db < bicubic
    assert hist[-1].val_nmse_db < hist[0].val_nmse_db
