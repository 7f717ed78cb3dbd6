import numpy as np
import pytest

from reid_lab import trainer as trainer_mod
from reid_lab.data import AugmentConfig, Dataset, Sample, SyntheticSpec, generate_confusable
from reid_lab.gradcheck import CASES, check_end_to_end_case
from reid_lab.losses import LossConfig
from reid_lab.model import init_head, init_model
from reid_lab.numerics import RngStream
from reid_lab.trainer import (
    ModelSpec,
    OptimizerState,
    TrainConfig,
    TrainReport,
    amsgrad_update,
    extract_features,
    loss_and_grads,
    lr_schedule,
    train,
    train_step,
)


def test_amsgrad_zero_gradient_first_step():
    p = np.array([1.0, -2.0])
    amsgrad_update(p, np.zeros(2), OptimizerState(), 0.1, "p")
    assert np.array_equal(p, [1.0, -2.0])


def test_amsgrad_first_step_closed_form():
    for g in (0.3, 5.0, 1e-3):
        p = np.array([1.0])
        amsgrad_update(p, np.array([g]), OptimizerState(), 0.01, "p")
        assert p[0] == pytest.approx(1.0 - 0.01 * g / (g + 1e-8), rel=1e-14)
        assert 1.0 - p[0] == pytest.approx(0.01, rel=1e-5)


def test_amsgrad_vhat_monotone(rng):
    state = OptimizerState()
    p = rng.normal(size=(3, 4))
    prev = None
    for _ in range(1000):
        amsgrad_update(p, rng.normal(scale=rng.uniform(0.01, 10), size=p.shape), state, 1e-3, "p")
        assert np.all(state.vhat["p"] >= state.v["p"])
        if prev is not None:
            assert np.all(state.vhat["p"] >= prev)
        prev = state.vhat["p"].copy()
    assert state.step == 1000


def test_amsgrad_shape_mismatch():
    with pytest.raises(ValueError):
        amsgrad_update(np.zeros(2), np.zeros(3), OptimizerState(), 0.1)


def test_lr_schedule():
    assert lr_schedule(1, 5e-4) == 5e-4
    assert lr_schedule(19, 5e-4) == 5e-4
    assert lr_schedule(20, 5e-4) == pytest.approx(5e-5, rel=1e-15)
    assert lr_schedule(39, 5e-4) == pytest.approx(5e-5, rel=1e-15)
    assert lr_schedule(40, 5e-4) == pytest.approx(5e-6, rel=1e-15)
    assert lr_schedule(300, 5e-4) == pytest.approx(5e-6, rel=1e-15)
    with pytest.raises(ValueError):
        lr_schedule(0, 1.0)


def _toy_batch(rng, n=6, d=5, C=3):
    return rng.normal(size=(n, d)), np.arange(n) % C


def test_train_step_zero_lr_keeps_parameters(rng):
    model = init_model([5, 6, 4], seed=0)
    head = init_head(4, 3, seed=0)
    before = {k: v.copy() for k, v in {**model.parameters(), **head.parameters()}.items()}
    res = train_step(model, head, _toy_batch(rng), [LossConfig("cp", beta=0.085)], OptimizerState(), 0.0)
    assert np.isfinite(res.output.loss) and res.output.loss > 0
    for k, v in {**model.parameters(), **head.parameters()}.items():
        assert np.array_equal(v, before[k])


def test_train_step_stationary_point_keeps_parameters(rng):
    # zero weights and a class-balanced batch: every gradient vanishes exactly
    model = init_model([5, 6, 4], seed=0)
    head = init_head(4, 3, seed=0)
    for p in {**model.parameters(), **head.parameters()}.values():
        p[...] = 0.0
    res = train_step(model, head, _toy_batch(rng), [LossConfig("xent")], OptimizerState(), 0.1)
    assert res.output.loss == pytest.approx(np.log(3))
    # the class-mean of p - onehot is ~1e-17 rather than 0; AMSGrad divides it by |g| + eps
    for p in {**model.parameters(), **head.parameters()}.values():
        assert np.abs(p).max() <= 0.1 * 1e-6


def test_train_step_updates_all_parameters(rng):
    model = init_model([5, 6, 4], seed=0, latent_dim=2)
    head = init_head(2, 3, seed=0)
    before = {k: v.copy() for k, v in {**model.parameters(), **head.parameters()}.items()}
    terms = [LossConfig("vib", beta=0.01)]
    train_step(model, head, _toy_batch(rng), terms, OptimizerState(), 1e-2, rng=RngStream(0))
    for k, v in {**model.parameters(), **head.parameters()}.items():
        assert not np.array_equal(v, before[k]), k


@pytest.mark.parametrize("case", CASES)
def test_end_to_end_gradients(case):
    assert check_end_to_end_case(case) <= 1e-5
    assert check_end_to_end_case(case, seed=3, activation="relu", sizes=(4, 8, 8, 5)) <= 1e-5


def test_vib_terms_need_vib_head(rng):
    model = init_model([5, 4], seed=0)
    with pytest.raises(ValueError, match="VIB"):
        loss_and_grads(model, init_head(4, 3, 0), *_toy_batch(rng), [LossConfig("vib", beta=0.01)])
    with pytest.raises(ValueError):
        train_step(model, init_head(4, 3, 0), (np.zeros((0, 5)), np.zeros(0, int)), [LossConfig("xent")],
                   OptimizerState(), 0.1)


def _separable(n_per=30, seed=0):
    r = np.random.default_rng(seed)
    centers = np.array([[4.0, 0, 0, 0], [0, 4.0, 0, 0], [0, 0, 4.0, 0]])
    ds = Dataset()
    for c in range(3):
        for j in range(n_per):
            ds.train.append(Sample(centers[c] + 0.3 * r.normal(size=4), c, j % 2))
    return ds


def test_train_separable_toy_converges():
    cfg = TrainConfig(losses=[LossConfig("xent")], epochs=50, lr=1e-2, seed=0)
    _, _, report = train(_separable(), cfg, ModelSpec(hidden=(16,), feature_dim=8))
    assert len(report.records) == 50
    assert report.records[-1].loss < 0.1


def test_train_is_deterministic(tmp_path):
    ds = generate_confusable(SyntheticSpec(num_identities=16, confusable_pairs=2), seed=1)
    cfg = TrainConfig(losses=[LossConfig("vib", beta=0.01)], epochs=5, seed=3, eval_every=2)
    _, _, a = train(ds, cfg)
    _, _, b = train(ds, cfg)
    assert len(a.records) == 5
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.final == b.final
    back = TrainReport.read_csv(tmp_path / "a.csv")
    np.testing.assert_equal([vars(r) for r in back.records], [vars(r) for r in a.records])
    assert np.isfinite(a.records[-1].sigma_mean)


def test_train_validation_errors():
    with pytest.raises(ValueError):
        train(Dataset(), TrainConfig())
    ds = _separable(5)
    with pytest.raises(ValueError, match="classes"):
        train(ds, TrainConfig(losses=[LossConfig("xent", num_classes=7)], epochs=1))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()


def test_cp_raises_entropy_over_xent():
    ds = generate_confusable(SyntheticSpec(), seed=0)
    _, _, xent = train(ds, TrainConfig(losses=[LossConfig("xent")], seed=0))
    _, _, cp = train(ds, TrainConfig(losses=[LossConfig("cp", beta=0.085)], seed=0))
    assert cp.records[-1].entropy > xent.records[-1].entropy


def test_extract_features_modes(rng):
    model = init_model([4, 6], seed=0, latent_dim=3)
    X = rng.normal(size=(5, 4))
    a = extract_features(model, X, "deterministic")
    assert np.array_equal(a, extract_features(model, X, "deterministic"))
    assert a.shape == (5, 6)
    mu = extract_features(model, X)
    assert mu.shape == (5, 3)
    model.mu_weight[...] = 0
    model.mu_bias[...] = 0
    assert not extract_features(model, X, "vib_mean").any()
    with pytest.raises(ValueError):
        extract_features(init_model([4, 6], seed=0), X, "vib_mean")
    with pytest.raises(ValueError):
        extract_features(model, X, "sampled")


def test_vib_feature_dim_is_half_width_by_default():
    ds = generate_confusable(SyntheticSpec(num_identities=8, confusable_pairs=1), seed=0)
    model, head, _ = train(ds, TrainConfig(losses=[LossConfig("vib", beta=0.01)], epochs=1), ModelSpec(feature_dim=64))
    assert model.latent_dim == 32 and head.weight.shape[1] == 32
    assert extract_features(model, ds.query).shape[1] == 32


def _image_dataset():
    r = np.random.default_rng(0)
    ds = Dataset()
    for identity in range(3):
        base = r.uniform(0, 255, size=(12, 8, 3))
        for j in range(4):
            img = np.clip(base + r.normal(scale=5, size=base.shape), 0, 255)
            split = "train" if j < 2 else ("query" if j == 2 else "gallery")
            ds.split(split).append(Sample(img, identity, j))
    return ds


def test_augmentation_only_touches_training_batches(monkeypatch):
    calls = []
    real = trainer_mod.prepare_inputs

    def spy(samples, aug, rng=None):
        calls.append(rng is not None)
        return real(samples, aug, rng)

    monkeypatch.setattr(trainer_mod, "prepare_inputs", spy)
    aug = AugmentConfig(image_size=(8, 4))
    ds = _image_dataset()
    cfg = TrainConfig(losses=[LossConfig("xent")], epochs=2, batch_size=4, eval_every=1)
    model, _, report = train(ds, cfg, ModelSpec(hidden=(8,), feature_dim=4), aug=aug)
    # 2 epochs x 2 batches with augmentation; every evaluation extracts features without it
    assert calls.count(True) == 4
    assert calls.count(False) >= 4
    assert np.isfinite(report.records[-1].mAP)
    f1 = extract_features(model, ds.query, aug=aug)
    assert np.array_equal(f1, extract_features(model, ds.query, aug=aug))
