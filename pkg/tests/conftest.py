import numpy as np
import pytest

from dirfed import backbone as bb


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def tiny_backbone():
    cfg = bb.BackboneConfig(vocab_size=21, embed_dim=8, max_seq_len=6, num_blocks=1, seed=3)
    return bb.init_backbone(cfg).freeze()


@pytest.fixture
def tiny_config():
    from dirfed.config import ExperimentConfig

    return ExperimentConfig(
        run_id="tiny",
        vocab_size=30,
        users_per_domain=20,
        num_clusters=4,
        pooled_size=20,
        embed_dim=8,
        max_seq_len=8,
        num_blocks=1,
        pretrain_epochs=1,
        rank=2,
        rounds=2,
        local_epochs=1,
        batch_size=32,
        post_epochs=1,
    )


@pytest.fixture
def make_clients(tiny_config):
    """Factory: ``make_clients(method, **config_changes) -> (config, clients)``."""
    from dirfed import runner

    def build(method, **changes):
        cfg = tiny_config.replace(method=method, **changes)
        datasets, pooled, feats = runner.build_world(cfg)
        backbone, _ = runner.build_backbone(cfg, datasets, pooled, feats)
        return cfg, runner.build_clients(cfg, datasets, backbone)

    return build


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = []
    for mod in list(sys.modules.values()):
        lines.extend(getattr(mod, "ACCEPTANCE_REPORT", None) or [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
