import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--seeds",
        action="store",
        default=None,
        help="override the seed count for multi-seed acceptance criteria",
    )


@pytest.fixture(scope="session")
def seed_count(request):
    value = request.config.getoption("--seeds")
    return int(value) if value else 5
