import numpy as np
import pytest

from ppde_tools.exceptions import DomainError, ShapeError
from ppde_tools.paths import (DiscretePath, TimeGrid, d_infinity, history_of, stop, sup_norm,
                              sup_norm_batch, vertical_bump)


class TestTimeGrid:
    def test_uniform_nodes(self):
        grid = TimeGrid.uniform(2.0, 4)
        assert grid.nodes.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
        assert grid.horizon == 2.0
        assert grid.steps == 4
        assert grid.max_step == pytest.approx(0.5)

    @pytest.mark.parametrize('horizon, steps', [(0.0, 10), (-1.0, 10), (1.0, 0), (1.0, 2.5)])
    def test_invalid_uniform(self, horizon, steps):
        with pytest.raises(DomainError):
            TimeGrid.uniform(horizon, steps)

    def test_nodes_must_start_at_zero_and_increase(self):
        with pytest.raises(DomainError):
            TimeGrid([0.1, 0.5, 1.0])
        with pytest.raises(DomainError):
            TimeGrid([0.0, 0.5, 0.5, 1.0])
        with pytest.raises(ShapeError):
            TimeGrid([0.0])

    def test_index_lookup(self):
        grid = TimeGrid.uniform(1.0, 10)
        assert grid.index_of(0.3) == 3
        assert grid.index_of(0.35) is None
        assert grid.first_index_at_or_after(0.35) == 4
        assert grid.last_index_at_or_before(0.35) == 3
        assert grid.snap(0.36) == pytest.approx(0.4)

    def test_time_outside_horizon(self):
        grid = TimeGrid.uniform(1.0, 10)
        with pytest.raises(DomainError):
            grid.check_time(1.5)

    def test_equality(self):
        assert TimeGrid.uniform(1.0, 10) == TimeGrid.uniform(1.0, 10)
        assert TimeGrid.uniform(1.0, 10) != TimeGrid.uniform(1.0, 20)


class TestDiscretePath:
    def test_rejects_bad_values(self, grid):
        with pytest.raises(ShapeError):
            DiscretePath(grid, np.zeros((1, 5)))
        values = np.zeros((1, grid.steps + 1))
        values[0, 3] = np.nan
        with pytest.raises(DomainError):
            DiscretePath(grid, values)

    def test_evaluate_interpolates(self):
        grid = TimeGrid.uniform(1.0, 2)
        x = DiscretePath(grid, [[0.0, 1.0, 3.0]])
        assert x.evaluate(0.25)[0] == pytest.approx(0.5)
        assert x.evaluate(0.75)[0] == pytest.approx(2.0)

    def test_history_appends_off_grid_node(self):
        grid = TimeGrid.uniform(1.0, 2)
        x = DiscretePath(grid, [[0.0, 1.0, 3.0]])
        times, values = x.history(0.75)
        assert times.tolist() == [0.0, 0.5, 0.75]
        assert values[0].tolist() == [0.0, 1.0, 2.0]
        times, values = history_of(grid, x.values, 0.5)
        assert times.tolist() == [0.0, 0.5]

    def test_stop_freezes_after_t(self, wiggly_path):
        frozen = stop(wiggly_path, 0.4)
        k = frozen.grid.index_of(0.4)
        assert np.all(frozen.values[:, k:] == wiggly_path.values[:, k:k + 1])
        assert np.array_equal(frozen.values[:, :k + 1], wiggly_path.values[:, :k + 1])

    def test_stop_off_grid(self):
        grid = TimeGrid.uniform(1.0, 2)
        x = DiscretePath(grid, [[0.0, 1.0, 3.0]])
        assert stop(x, 0.25).values[0].tolist() == [0.0, 0.5, 0.5]

    def test_json_and_rows(self, wiggly_path):
        again = DiscretePath.from_json(wiggly_path.to_json())
        assert np.allclose(again.values, wiggly_path.values)
        again = DiscretePath.from_rows(wiggly_path.to_rows())
        assert again.grid == wiggly_path.grid

    def test_resample_requires_same_horizon(self, wiggly_path):
        with pytest.raises(ShapeError):
            wiggly_path.resample(TimeGrid.uniform(2.0, 10))
        coarse = wiggly_path.resample(TimeGrid.uniform(1.0, 10))
        assert coarse.values[0, -1] == pytest.approx(wiggly_path.values[0, -1])


class TestDistances:
    def test_sup_norm(self):
        grid = TimeGrid.uniform(1.0, 2)
        x = DiscretePath(grid, [[3.0, 0.0, 0.0], [4.0, 1.0, 0.0]])
        assert sup_norm(x) == pytest.approx(5.0)
        assert sup_norm_batch(x.values[None])[0] == pytest.approx(5.0)

    def test_d_infinity(self, wiggly_path, origin):
        assert d_infinity(0.3, wiggly_path, 0.3, wiggly_path) == 0.0
        a = d_infinity(0.2, wiggly_path, 0.6, origin)
        b = d_infinity(0.6, origin, 0.2, wiggly_path)
        assert a == pytest.approx(b)
        assert a >= 0.4

    def test_d_infinity_mismatched_grids(self, wiggly_path):
        other = DiscretePath.constant(TimeGrid.uniform(1.0, 10), [0.0])
        with pytest.raises(ShapeError):
            d_infinity(0.0, wiggly_path, 0.0, other)

    def test_vertical_bump(self, origin):
        bumped = vertical_bump(origin, 0.5, 0.25)
        k = origin.grid.index_of(0.5)
        assert np.all(bumped.values[0, k:] == 0.25)
        assert np.all(bumped.values[0, :k] == 0.0)
