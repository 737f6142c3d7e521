import dataclasses

import pytest

from paracap.alignment import align_dataset, load_embeddings
from paracap.dataset import load_dataset
from paracap.fixture import build_fixture
from paracap.ordering import OrderingConfig, init_model, train


@dataclasses.dataclass
class Toy:
    paths: dict
    dataset: object
    table: object
    alignments: list


@pytest.fixture(scope="session")
def toy(tmp_path_factory) -> Toy:
    paths = build_fixture(tmp_path_factory.mktemp("fixture"))
    dataset = load_dataset(paths["dataset"])
    table = load_embeddings(paths["embeddings"])
    alignments = align_dataset(dataset, table, 0.6)
    return Toy(paths=paths, dataset=dataset, table=table, alignments=alignments)


@pytest.fixture(scope="session")
def trained(toy):
    """The canonical training run: lr 0.05, 300 epochs, seed 42."""
    cfg = OrderingConfig(feature_dim=toy.dataset.feature_dim + 4)
    model = init_model(cfg, seed=42)
    curve = train(model, toy.dataset, toy.alignments, lr=0.05, epochs=300)
    return model, curve
