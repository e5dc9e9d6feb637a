import os
import re

import setuptools

# the version lives in dfc/_version.py so that the package can report it without being installed
VERSIONFILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "dfc", "_version.py")
with open(VERSIONFILE, "rt") as f:
    match = re.search(r"^__version__ = ['\"]([^'\"]*)['\"]", f.read(), re.M)
if match is None:
    raise RuntimeError(f"Unable to find version string in {VERSIONFILE}.")

setuptools.setup(version=match.group(1))
