import pytest
from importlib import resources

from factline.deploy import Deployment
from factline.model import ConceptRegistry


@pytest.fixture(scope="session")
def registry() -> ConceptRegistry:
    reg = ConceptRegistry()
    with resources.as_file(resources.files("factline").joinpath("config/concepts.json")) as p:
        reg.load_file(p)
    return reg


@pytest.fixture
def deployment(tmp_path) -> Deployment:
    return Deployment(tmp_path / "data")
