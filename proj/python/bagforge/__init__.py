from ._bagforge import *  # noqa: F401,F403
from ._bagforge import __doc__  # noqa: F401
