import numpy as np
import pytest

from ppde_tools.exceptions import ConfigurationError, ShapeError
from ppde_tools.paths import DiscretePath
from ppde_tools.read_datasets import read_config, read_path, write_path


def test_csv_path_with_header(tmp_path):
    path = tmp_path / 'x.csv'
    path.write_text('t,x_1\n0.0,1.0\n0.5,2.0\n1.0,0.0\n', encoding='utf-8')
    x = read_path(str(path))
    assert x.grid.nodes.tolist() == [0.0, 0.5, 1.0]
    assert x.evaluate(0.25)[0] == pytest.approx(1.5)


def test_written_paths_read_back(tmp_path, wiggly_path):
    for name in ('x.csv', 'x.json'):
        target = write_path(wiggly_path, str(tmp_path / name))
        x = read_path(target)
        assert np.allclose(x.values, wiggly_path.values)
        assert np.allclose(x.grid.nodes, wiggly_path.grid.nodes)


def test_ragged_rows(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('0.0,1.0\n0.5\n', encoding='utf-8')
    with pytest.raises(ShapeError):
        read_path(str(path))


def test_missing_and_invalid_config(tmp_path):
    with pytest.raises(ConfigurationError):
        read_config(str(tmp_path / 'nope.json'))
    path = tmp_path / 'broken.json'
    path.write_text('{"run": ', encoding='utf-8')
    with pytest.raises(ConfigurationError):
        read_config(str(path))


def test_constant_path_rows():
    x = DiscretePath.from_rows([[0.0, 1.0, 2.0], [1.0, 1.0, 2.0]])
    assert x.dimension == 2
    assert x.to_rows()[1] == [1.0, 1.0, 2.0]
