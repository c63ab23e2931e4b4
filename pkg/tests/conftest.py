import sys
import numpy as np
import pytest

from sigrecipe import encoders as E
from sigrecipe import trainer as TR
from sigrecipe.model import ModelConfig, init_params


def tiny_config(**kw) -> ModelConfig:
    vit = E.VitConfig(patch_size=4, width=16, depth=1, heads=2, posemb_len=16, embed_dim=16)
    text = E.TextConfig(width=16, depth=1, heads=2, embed_dim=16, max_len=64)
    return ModelConfig(vit, text, **kw)


def tiny_plan(**kw) -> TR.TrainPlan:
    base = dict(total_steps=40, warmup_steps=4, batch_size=4)
    base.update(kw)
    return TR.TrainPlan(**base)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def params(cfg):
    return init_params(cfg, np.random.default_rng(0))


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One short staged run shared by several tests: all branches, metrics on disk."""
    metrics = tmp_path_factory.mktemp("run") / "metrics.jsonl"
    cfg = tiny_config()
    plan = tiny_plan()
    events = {}

    def hook(name, state):
        events[name] = state.clone()

    states = TR.run_stages(plan, TR.DataConfig(seed=3), cfg, TR.BranchConfig(naflex_seq_lens=(4, 16)),
                           metrics_path=metrics, hook=hook, seed=3)
    return cfg, plan, states, events, TR.read_metrics(metrics)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.status_line(n))
