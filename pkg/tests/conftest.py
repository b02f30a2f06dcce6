import numpy as np
import pytest

from qfmap.data import TabularDataset, apply_selector, mrmr_select, stratified_split


def digits_subset(classes: int = 5, n: int = 100) -> TabularDataset:
    """First ``n`` scikit-learn digit images whose label is below ``classes``."""
    from sklearn.datasets import load_digits

    d = load_digits()
    keep = d.target < classes
    return TabularDataset(d.data[keep][:n].astype(float), d.target[keep][:n], classes)


def toy_splits(p: int = 4, seed: int = 0, classes: int = 5):
    """50/50 split of the digits subset, reduced to ``p`` angle features by mRMR."""
    train, test = stratified_split(digits_subset(classes), 0.5, seed)
    sel = mrmr_select(train, p)
    return apply_selector(sel, train), apply_selector(sel, test)


@pytest.fixture(scope="session")
def digits_raw():
    return digits_subset()


@pytest.fixture(scope="session")
def toy():
    return toy_splits()


@pytest.fixture
def small_random_data():
    rng = np.random.default_rng(0)
    return TabularDataset(rng.uniform(0, 2 * np.pi, (16, 2)), rng.integers(0, 2, 16), 2)
