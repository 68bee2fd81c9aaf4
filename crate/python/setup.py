"""Builds the modnet_py extension module by delegating to cargo.

Usage (from the repository root):
    pip install --no-build-isolation ./python
or, for development:
    pip install --no-build-isolation -e ./python
"""

import pathlib
import shutil
import subprocess

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

REPO_ROOT = pathlib.Path(__file__).resolve().parent.parent


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        subprocess.run(
            ["cargo", "build", "--release", "-p", "modnet-py"],
            check=True,
            cwd=REPO_ROOT,
        )
        built = None
        for name in ("libmodnet_py.so", "libmodnet_py.dylib", "modnet_py.dll"):
            candidate = REPO_ROOT / "target" / "release" / name
            if candidate.exists():
                built = candidate
                break
        if built is None:
            raise RuntimeError("cargo did not produce the modnet_py cdylib")
        dest = pathlib.Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, dest)


setup(
    name="modnet-py",
    version="0.1.0",
    description="Python bindings for the modnet subnetwork-training library",
    ext_modules=[Extension("modnet_py", sources=[])],
    cmdclass={"build_ext": CargoBuildExt},
    zip_safe=False,
)
