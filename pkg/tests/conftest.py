import pytest

from anomseg import toynet as tn
from anomseg.synthworld import WorldConfig, generate_scene


@pytest.fixture(scope="session")
def small_world():
    """A small but fully populated dataset shared across module tests."""
    cfg = WorldConfig()
    return {
        "cfg": cfg,
        "train": [generate_scene(cfg, i, "train") for i in range(40)],
        "proxy": [generate_scene(cfg, 1000 + i, "proxy-anom") for i in range(20)],
        "test": [generate_scene(cfg, 2000 + i, "test") for i in range(20)],
        "novel": [generate_scene(cfg, 3000 + i, "novel") for i in range(20)],
    }


@pytest.fixture(scope="session")
def trained_models(small_world):
    """Base classifier plus its entropy-max fine-tuned variant."""
    data = [(s.image, s.mask) for s in small_world["train"]]
    params = tn.init_params(seed=0)
    base, base_trace = tn.train(
        params, data, tn.CrossEntropyObjective(), epochs=8, lr=0.05, seed=0
    )
    objective = tn.EntropyMaxObjective(
        [s.image for s in small_world["proxy"]], lam=0.5
    )
    entmax, _ = tn.train(base, data, objective, epochs=5, lr=0.05, seed=100)
    return {"base": base, "entmax": entmax, "base_trace": base_trace}
