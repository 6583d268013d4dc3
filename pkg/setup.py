from setuptools import find_packages, setup

from flatdiv import __version__

with open("requirements.txt") as handle:
    requirements = [line.strip() for line in handle if line.strip() and not line.startswith("pytest")]

setup(
    name="flatdiv",
    version=__version__,
    description="Sharpness-diversity laboratory for flat ensembles",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.11",
    install_requires=requirements,
    extras_require={"test": ["pytest>=7.4.0"]},
    entry_points={"console_scripts": ["flatdiv=flatdiv.main:app"]},
)
