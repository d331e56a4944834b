import pytest

from stepembed.utils.parallel import run_parallel


def _square(x):
    return x * x


def _fail_on_two(x):
    if x == 2:
        raise ValueError("due")
    return x


def test_sequential_keeps_order():
    assert run_parallel(_square, [3, 1, 2], parallel=False) == [9, 1, 4]


def test_pool_keeps_input_order():
    assert run_parallel(_square, list(range(6)), workers=2) == [0, 1, 4, 9, 16, 25]


def test_empty_input():
    assert run_parallel(_square, []) == []


def test_task_error_is_raised():
    with pytest.raises(ValueError, match="due"):
        run_parallel(_fail_on_two, [1, 2, 3], workers=2)
