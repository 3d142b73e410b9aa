import copy

import numpy as np
import pytest

from phenoauth.protocol import Node, ProtocolParams, enroll_group, reference_images
from phenoauth.puf_sim import DpufDevice, PufConfig

REFERENCE_SEEDS = [9001, 9002]
GROUP_SEEDS = [101, 102, 103]
# Held-out impostors: never enrolled and never used as tuning references.
IMPOSTOR_SEEDS = [7001, 7002]


@pytest.fixture(scope="session")
def config():
    return PufConfig()


@pytest.fixture(scope="session")
def params(config):
    return ProtocolParams(puf=config)


@pytest.fixture(scope="session")
def references(config):
    return reference_images(config, REFERENCE_SEEDS, 8, np.random.default_rng(55))


@pytest.fixture(scope="session")
def enrolled_group(config, params, references):
    """Three devices enrolled as a group; treat as read-only, use ``fresh_group``."""
    nodes = [Node(DpufDevice(s, config), f"dev{i}", params, np.random.default_rng(i),
                  reference_images=references)
             for i, s in enumerate(GROUP_SEEDS)]
    enroll_group(nodes)
    return nodes


def clone_node(node, seed):
    """Independent copy sharing the (immutable) device: fresh read noise, copied NVM."""
    twin = Node(node.device, node.label, node.params, np.random.default_rng(seed),
                self_id=node.nvm.self_id, reference_images=node.reference_images)
    twin.nvm = copy.deepcopy(node.nvm)
    twin.dataset, twin.peer_data, twin.training = node.dataset, node.peer_data, node.training
    return twin


@pytest.fixture
def fresh_group(enrolled_group, request):
    base = abs(hash(request.node.nodeid)) % 2**32
    return [clone_node(n, [base, i]) for i, n in enumerate(enrolled_group)]
