from tests.common_fixtures import *  # noqa: F401,F403
