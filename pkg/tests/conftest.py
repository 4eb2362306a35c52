import pytest

from deskpaws.config import load_config

TINY = [
    "data.classes=3",
    "data.per_class=60",
    "data.dim=6",
    "data.labeled_per_class=5",
    "data.separation=4.0",
    "model.input_dim=6",
    "model.hidden_dim=12",
    "model.proj_hidden=12",
    "model.embed_dim=8",
    "support.classes=3",
    "support.per_class=3",
    "views.num_local=2",
    "optim.batch_size=16",
    "optim.epochs=3",
    "train.eval_every=1",
    "finetune.epochs=2,3",
    "finetune.lrs=0.01,0.05",
]


@pytest.fixture
def tiny_overrides():
    return list(TINY)


@pytest.fixture
def tiny_config():
    return load_config(None, TINY)


def pytest_terminal_summary(terminalreporter):
    import sys

    for mod in list(sys.modules.values()):
        results = getattr(mod, "ACCEPTANCE_RESULTS", None)
        if isinstance(results, dict) and results:
            terminalreporter.section("acceptance criteria")
            for key in sorted(results):
                terminalreporter.write_line(results[key])
            break
