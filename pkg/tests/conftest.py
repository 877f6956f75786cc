from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from teforge.core import build_path_set  # noqa: E402
from teforge.instances import counterexample_demands, counterexample_topology  # noqa: E402


@pytest.fixture
def topo():
    return counterexample_topology()


@pytest.fixture
def demands():
    return counterexample_demands()


@pytest.fixture
def paths(topo, demands):
    return build_path_set(topo, demands.pairs)
