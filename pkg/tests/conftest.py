import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240915)


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def csv_file(tmp_path):
    def make(text, name="data.csv"):
        return write_text(tmp_path / name, text)

    return make
