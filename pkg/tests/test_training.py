import numpy as np
import pytest

from robinlab import autodiff as ad
from robinlab import attacks, data, models, training
from robinlab.attacks import AttackConfig
from robinlab.training import TrainConfig

from fd import fd_gradient, max_rel_err


def test_warmup_endpoints():
    assert training.warmup_fraction(0, 10) == 0.0
    assert abs(training.warmup_fraction(10, 10) - 1.0) < 1e-15
    assert abs(training.warmup_fraction(5, 10) - 0.5) < 1e-15


def test_warmup_rejects_epoch_past_total():
    with pytest.raises(ValueError):
        training.warmup_fraction(11, 10)
    with pytest.raises(ValueError):
        training.warmup_fraction(-1, 10)


def test_warmup_is_monotone():
    vals = [training.warmup_fraction(t, 20) for t in range(21)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# standard training
# ---------------------------------------------------------------------------

def test_standard_train_separable_task():
    ds = data.gen_gaussians(2, 100, 0.1, seed=0)
    # least-squares separability holds (see data tests), so training should fit
    spec = models.mlp_spec(2, (64, 64), 2)
    params = training.standard_train(spec, ds, TrainConfig(epochs=10, batch_size=32,
                                                           lr=0.1, seed=0))
    assert training.accuracy(spec, params, ds) > 0.99


def test_zero_epochs_returns_initialization():
    ds = data.gen_gaussians(2, 10, 0.2, seed=1)
    spec = models.mlp_spec(2, (4,), 2)
    params = training.standard_train(spec, ds, TrainConfig(epochs=0, seed=3))
    init = models.init_model(spec, 3)
    for name in init.tensors:
        np.testing.assert_array_equal(params.tensors[name].data,
                                      init.tensors[name].data)


def test_training_deterministic_in_seed():
    ds = data.gen_gaussians(3, 30, 0.25, seed=2)
    spec = models.mlp_spec(2, (8,), 3)
    cfg = TrainConfig(epochs=4, batch_size=16, lr=0.1, seed=12)
    a = training.standard_train(spec, ds, cfg)
    b = training.standard_train(spec, ds, cfg)
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)


def test_lr_schedule_decays_at_half():
    cfg = TrainConfig(epochs=10, lr=0.1)
    assert cfg.lr_at(0) == 0.1
    assert cfg.lr_at(4) == 0.1
    assert abs(cfg.lr_at(5) - 0.01) < 1e-15
    custom = TrainConfig(epochs=9, lr=1.0, lr_decay_epochs=(3, 6), lr_decay_factor=0.5)
    assert custom.lr_at(7) == 0.25


def test_training_loss_decreases_early():
    # majority of 5 seeds show a drop over the first epochs
    wins = 0
    for s in range(5):
        ds = data.gen_gaussians(3, 60, 0.3, seed=40 + s)
        spec = models.mlp_spec(2, (16,), 3)
        log = []
        training.standard_train(spec, ds, TrainConfig(epochs=5, batch_size=32,
                                                      lr=0.1, seed=s), log)
        wins += log[-1]["clean_loss"] < log[0]["clean_loss"]
    assert wins >= 3


# ---------------------------------------------------------------------------
# adversarial training
# ---------------------------------------------------------------------------

def _paired_configs(epochs, seed, eps):
    atk = AttackConfig(norm="l2", epsilon=eps, steps=5, random_init=True, seed=seed)
    std = TrainConfig(epochs=epochs, batch_size=32, lr=0.1, seed=seed)
    adv = TrainConfig(epochs=epochs, batch_size=32, lr=0.1, seed=seed,
                      defense="adv", attack=atk)
    return std, adv


def test_zero_budget_adversarial_equals_standard_trajectory():
    ds = data.gen_gaussians(2, 40, 0.2, seed=3)
    spec = models.mlp_spec(2, (8,), 2)
    std_cfg, adv_cfg = _paired_configs(4, seed=7, eps=0.0)
    p_std = training.standard_train(spec, ds, std_cfg)
    p_adv = training.adversarial_train(spec, ds, adv_cfg)
    for name in p_std.tensors:
        np.testing.assert_array_equal(p_std.tensors[name].data,
                                      p_adv.tensors[name].data)


def test_single_step_update_matches_manual_sgd():
    # T=1, one batch: theta_1 = theta_0 - lr * (grad CE(mixed batch) + wd * theta_0)
    ds = data.gen_gaussians(2, 4, 0.2, seed=5)  # 8 points, one batch of 8
    spec = models.mlp_spec(2, (4,), 2)
    atk = AttackConfig(norm="l2", epsilon=0.1, steps=2, random_init=False)
    cfg = TrainConfig(epochs=1, batch_size=8, lr=0.05, weight_decay=0.01,
                      defense="adv", attack=atk, seed=21)
    got = training.train_model(spec, ds, cfg)

    # rebuild the same mixed batch by hand: epoch 1 of 1 -> fraction 1,
    # so every example is replaced by its PGD perturbation
    theta0 = models.init_model(spec, cfg.seed)
    order = np.random.default_rng(
        training._derive(cfg.seed, "shuffle", 0)).permutation(8)
    xb, yb = ds.inputs[order], ds.labels[order]
    assert training.warmup_fraction(1, 1) == 1.0
    adv = attacks.pgd_attack(
        attacks.as_logits_fn(spec, theta0), xb, yb,
        AttackConfig(norm="l2", epsilon=0.1, steps=2, random_init=False,
                     seed=training._derive(cfg.seed, "attack", 0, 0))).adversarial

    logits = models.forward(spec, theta0, ad.tensor(adv))
    loss = models.classification_loss(logits, yb)
    ad.backward(loss)
    for name, t in theta0.tensors.items():
        want = t.data - 0.05 * (t.grad + 0.01 * t.data)
        np.testing.assert_allclose(got.tensors[name].data, want, atol=1e-12)


def test_adversarial_training_improves_margin():
    # robust accuracy is near-identical on this easy geometry (see ledger),
    # but the adversarially trained boundary should sit measurably farther
    # from the data than the standard one
    ds = data.gen_gaussians(2, 80, 0.25, seed=11)
    test = data.gen_gaussians(2, 80, 0.25, seed=90)
    spec = models.mlp_spec(2, (16,), 2)
    std_cfg, adv_cfg = _paired_configs(8, seed=1, eps=0.6)
    p_std = training.standard_train(spec, ds, std_cfg)
    p_adv = training.adversarial_train(spec, ds, adv_cfg)
    d_std = attacks.boundary_distance(attacks.as_logits_fn(spec, p_std),
                                      test.inputs, test.labels, "l2", 3.0, 0.02)
    d_adv = attacks.boundary_distance(attacks.as_logits_fn(spec, p_adv),
                                      test.inputs, test.labels, "l2", 3.0, 0.02)
    assert np.median(d_adv.distance) > np.median(d_std.distance)


def test_attack_error_names_batch(monkeypatch):
    ds = data.gen_gaussians(2, 8, 0.2, seed=0)
    spec = models.mlp_spec(2, (4,), 2)
    cfg = TrainConfig(epochs=1, batch_size=8, lr=0.1, defense="adv",
                      attack=AttackConfig(epsilon=0.1, steps=1), seed=0)

    def boom(*args, **kwargs):
        raise attacks.AttackError("NaN gradient for example 3")

    monkeypatch.setattr(training, "_craft_adversarial", boom)
    with pytest.raises(training.TrainingError, match="epoch 0, batch 0"):
        training.train_model(spec, ds, cfg)


# ---------------------------------------------------------------------------
# surrogate losses
# ---------------------------------------------------------------------------

def _tiny_setup(k=3, n=6, seed=2):
    ds = data.gen_gaussians(k, n, 0.3, seed=seed)
    spec = models.mlp_spec(2, (5,), k)
    params = models.init_model(spec, seed=seed)
    return ds, spec, params


def test_trades_lambda_zero_is_exactly_cross_entropy():
    ds, spec, params = _tiny_setup()
    atk = AttackConfig(epsilon=0.2, steps=3)
    loss = training.trades_loss(spec, params, ds.inputs, ds.labels, 0.0, atk)
    ce = models.classification_loss(
        models.forward(spec, params.detached(), ad.constant(ds.inputs)), ds.labels)
    assert loss.item() == ce.item()


def test_trades_second_term_vanishes_when_adv_equals_clean():
    ds, spec, params = _tiny_setup()
    obj = training.trades_objective(spec, params, ds.inputs, ds.inputs,
                                    ds.labels, lam=3.0)
    ce = models.classification_loss(
        models.forward(spec, params.detached(), ad.constant(ds.inputs)), ds.labels)
    assert abs(obj.item() - ce.item()) < 1e-12


def test_trades_objective_matches_direct_summation():
    ds, spec, params = _tiny_setup()
    rng = np.random.default_rng(0)
    x_adv = ds.inputs + 0.05 * rng.normal(size=ds.inputs.shape)
    lam = 1.7
    got = training.trades_objective(spec, params, ds.inputs, x_adv,
                                    ds.labels, lam).item()

    z_clean = models.logits_of(spec, params, ds.inputs)
    z_adv = models.logits_of(spec, params, x_adv)
    p = ad.softmax_rows(z_clean)
    q = ad.softmax_rows(z_adv)
    ce = -np.log(p[np.arange(len(ds)), ds.labels]).mean()
    kl = (p * (np.log(p) - np.log(q))).sum(axis=1).mean()
    assert abs(got - (ce + lam * kl)) < 1e-10


def test_mart_objective_matches_direct_summation():
    ds, spec, params = _tiny_setup(k=4, n=5, seed=9)
    rng = np.random.default_rng(1)
    x_adv = ds.inputs + 0.05 * rng.normal(size=ds.inputs.shape)
    lam = 0.8
    got = training.mart_objective(spec, params, ds.inputs, x_adv,
                                  ds.labels, lam).item()

    z_clean = models.logits_of(spec, params, ds.inputs)
    z_adv = models.logits_of(spec, params, x_adv)
    p = ad.softmax_rows(z_clean)
    q = ad.softmax_rows(z_adv)
    n = len(ds)
    idx = np.arange(n)
    qm = q.copy()
    qm[idx, ds.labels] = -1
    runner = qm.argmax(axis=1)
    bce = (-np.log(q[idx, ds.labels]) - np.log1p(-q[idx, runner])).mean()
    kl = (p * (np.log(p) - np.log(q))).sum(axis=1)
    weight = 1.0 - p[idx, ds.labels]
    assert abs(got - (bce + lam * (kl * weight).mean())) < 1e-10


def test_mart_weight_vanishes_at_full_confidence():
    # drive one clean prediction to probability ~1 and check the KL weight
    logits = ad.constant(np.array([[40.0, 0.0, 0.0]]))
    w = 1.0 - ad.true_class_prob(logits, np.array([0])).data[0]
    assert w < 1e-15


def test_mart_lambda_zero_uniform_binary_is_two_log_two():
    spec = models.mlp_spec(2, (), 1)
    params = models.init_model(spec, seed=0)
    for t in params.tensors.values():
        t.data[:] = 0.0  # uniform sigmoid prediction
    x = np.zeros((4, 2))
    y = np.array([0, 1, 0, 1])
    got = training.mart_objective(spec, params, x, x, y, lam=0.0).item()
    assert abs(got - 2.0 * np.log(2.0)) < 1e-12


def test_surrogate_losses_match_finite_differences():
    # gradients w.r.t. every model weight, adversarial point held fixed
    ds, spec, params = _tiny_setup(k=3, n=4, seed=4)
    rng = np.random.default_rng(3)
    x_adv = np.asarray(ds.inputs + 0.03 * rng.normal(size=ds.inputs.shape))
    names = list(params.tensors)
    shapes = [params.tensors[n].data.shape for n in names]

    def run(objective, lam):
        fresh = models.init_model(spec, seed=4)
        loss = objective(spec, fresh, ds.inputs, x_adv, ds.labels, lam)
        ad.backward(loss)
        got = np.concatenate([fresh.tensors[n].grad.ravel() for n in names])

        def value(theta):
            probe = models.init_model(spec, seed=4)
            offset = 0
            for n, shp in zip(names, shapes):
                size = int(np.prod(shp))
                probe.tensors[n].data[:] = theta[offset:offset + size].reshape(shp)
                offset += size
            return objective(spec, probe, ds.inputs, x_adv, ds.labels, lam).item()

        theta0 = np.concatenate([params.tensors[n].data.ravel() for n in names])
        want = fd_gradient(value, theta0)
        assert max_rel_err(got, want) < 1e-5

    run(training.trades_objective, 1.3)
    run(training.mart_objective, 0.9)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, defense="nope")
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, defense="trades")  # needs an attack config
    with pytest.raises(ValueError):
        training.standard_train(None, None, TrainConfig(epochs=1, defense="adv",
                                                        attack=AttackConfig()))