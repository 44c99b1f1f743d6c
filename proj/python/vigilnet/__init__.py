from ._vigilnet import *  # noqa: F401,F403
from ._vigilnet import __doc__  # noqa: F401
