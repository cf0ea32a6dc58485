import numpy as np
import pytest
import torch
from sklearn.base import clone

from latentview.data import IdentityCodec, generate_synthetic_dataset
from latentview.estimators import DDIMInverter, NovelViewSynthesizer, TUNetRegressor
from latentview.exceptions import NotFittedError
from latentview.priors import ZeroPrior
from latentview.training import PairDataset
from latentview.tunet import CameraTensors


def test_params_and_clone():
    for est in (DDIMInverter(t_star=500), TUNetRegressor(epochs=3), NovelViewSynthesizer(strategy="B")):
        c = clone(est)
        assert c.get_params() == est.get_params()
    assert TUNetRegressor(epochs=3).set_params(epochs=5).epochs == 5


def test_inverter_roundtrip(rng):
    inv = DDIMInverter(ZeroPrior((4, 8, 8))).fit()
    x = rng.normal(size=(3, 4, 8, 8)).astype(np.float32)
    back = inv.inverse_transform(inv.transform(x))
    assert np.allclose(back, x, atol=1e-5)
    with pytest.raises(NotFittedError):
        DDIMInverter(ZeroPrior()).transform(x)
    with pytest.raises(ValueError):
        DDIMInverter().fit()


def test_regressor_fit_predict():
    scenes = generate_synthetic_dataset(2, 26, seed=3, image_size=(16, 16))
    g = torch.Generator().manual_seed(0)
    mu = {(s.scene_id, f.index): torch.randn((4, 16, 16), generator=g) for s in scenes for f in s.frames}
    reg = TUNetRegressor(epochs=1, batch_size=4, pairs_per_scene=2)
    with pytest.raises(NotFittedError):
        reg.predict(np.zeros((1, 4, 16, 16)), None, None, [0])
    with pytest.raises(TypeError):
        reg.fit([1, 2])
    reg.fit(PairDataset(scenes, mu))
    assert len(reg.loss_history_) == 1
    cams = CameraTensors.from_cameras([scenes[0].frame(0).camera])
    tar = CameraTensors.from_cameras([scenes[0].frame(5).camera])
    out = reg.predict(np.zeros((1, 4, 16, 16)), cams, tar, [1])
    assert out.shape == (1, 4, 16, 16) and np.isfinite(out).all()


def test_synthesizer_requires_parts():
    with pytest.raises(ValueError):
        NovelViewSynthesizer(prior=ZeroPrior(), codec=IdentityCodec(4, (16, 16))).fit()
