import pytest
import structlog


@pytest.fixture(autouse=True)
def _reset_structlog():
    # configure_logging() binds the current sys.stderr, which pytest closes
    # after a capturing test; restore the defaults so later tests don't log
    # into a closed stream.
    yield
    structlog.reset_defaults()
