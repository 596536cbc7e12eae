import pytest

from pokebnn.builders import build_pokebnn
from pokebnn.cost import count_elementwise


@pytest.fixture(scope="session")
def pokebnn_1x_elementwise():
    return count_elementwise(build_pokebnn(1))
