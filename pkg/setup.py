import os

from setuptools import setup, find_packages


def read_requirements(path):
    with open(os.path.join(os.path.dirname(__file__), path)) as file:
        lines = (line.split("#")[0].strip() for line in file)
        return [line for line in lines if line]


setup(
    name="exactcoreset",
    version="0.1",
    description="Exact coresets of point cloud registration residuals",
    readme="README.md",
    python_requires=">=3.10",
    license="MIT",
    packages=find_packages(exclude=["tests*"]),
    install_requires=read_requirements("requirements.txt"),
    include_package_data=True,
    extras_require={"dev": ["pytest"]},
    entry_points={"console_scripts": ["exactcoreset=exactcoreset.cli:main"]},
)
