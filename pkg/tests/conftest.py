import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from activeload.data import SyntheticConfig, generate_synthetic, normalize, split
from activeload.embedding import EmbeddingNetConfig, build_network
from activeload.nn import TrainConfig, train

TINY_NET = EmbeddingNetConfig(hidden_width=16, embedding_dim=8, conv_filters=4)
TINY_TRAIN = TrainConfig(max_epochs=5, patience=2, learning_rate=0.01)


def pretrained(data, seed=0, net_cfg=TINY_NET, train_cfg=TINY_TRAIN):
    net = build_network(net_cfg, seed)
    train(net, data["avail"], data["val"], train_cfg)
    return net


@pytest.fixture(scope="session")
def small_data():
    return normalize(split(generate_synthetic(SyntheticConfig(10, 40, seed=0)), seed=0))


@pytest.fixture(scope="session")
def small_net(small_data):
    return pretrained(small_data)


# one line per acceptance criterion, echoed after the run
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
