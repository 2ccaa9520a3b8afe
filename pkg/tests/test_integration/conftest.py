import pandas as pd
import pytest

from imblab import app


@pytest.fixture
def cli():
    """Run the command line in-process and return its exit code.

    Example
    -------
    ```
    def test_my_thing(cli, tmp_path)
        assert cli("theory", "--c", "2", ...) == 0
    ```

    """

    def _cli(*args) -> int:
        return app.main([str(a) for a in args])

    return _cli


@pytest.fixture
def read_csv():
    """Read an output table without losing float precision."""

    def _read(path) -> pd.DataFrame:
        return pd.read_csv(path, float_precision="round_trip")

    return _read
