import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from profiscan.estimator import TrajectoryOptimizer
from profiscan.mesh import make_test_piece, make_training_piece
from profiscan.policy import PpoConfig


@pytest.fixture(scope="module")
def fitted():
    est = TrajectoryOptimizer(ppo=PpoConfig(rollout_length=256, batch_size=64, epochs=2), total_steps=512, seed=2)
    return est.fit(make_training_piece(300, 80, 30, 0))


def test_params_and_clone():
    est = TrajectoryOptimizer(total_steps=1000, overlap=0.1)
    p = est.get_params()
    assert p["total_steps"] == 1000 and p["overlap"] == 0.1
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(seed=9)
    assert est.seed == 9


def test_not_fitted():
    with pytest.raises(NotFittedError):
        TrajectoryOptimizer().predict(make_test_piece())


@pytest.mark.parametrize("kw", [{"total_steps": 0}, {"seed": -1}, {"overlap": 1.5}, {"advance_dir": (0, 0, 1)},
                                {"pass_width": -3.0}])
def test_bad_params_rejected_at_fit(kw):
    with pytest.raises(ValueError):
        TrajectoryOptimizer(**kw).fit(make_test_piece())


def test_fit_rejects_non_mesh():
    with pytest.raises(TypeError):
        TrajectoryOptimizer().fit(np.zeros((3, 3)))


def test_fit_predict_score(fitted):
    assert len(fitted.history_) == 2
    assert fitted.n_passes_ == 1
    test = make_test_piece()
    traj = fitted.predict(test)
    assert traj.meta["kind"] == "rl" and traj.capture_count > 10
    again = fitted.predict(test)
    assert traj.equals(again)
    base = fitted.predict_baseline(test, step=1.0)
    assert base.meta["kind"] == "baseline"
    s = fitted.score(test)
    assert -1 <= s <= 0
    rep = fitted.report(test, base)
    assert rep.n_profiles == base.capture_count
