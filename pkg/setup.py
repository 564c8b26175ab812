import os
import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()


def read(fname):
    return open(os.path.join(os.path.dirname(__file__), fname)).read()


requirements = read("requirements.txt")

setuptools.setup(
    name="sliceorch",
    version="0.1.0",
    author="Arkhn",
    author_email="contact@arkhn.org",
    description="Safe deep reinforcement learning for end-to-end network slice orchestration",
    long_description=long_description,
    long_description_content_type="text/markdown",
    url="https://github.com/arkhn/sliceorch/",
    packages=setuptools.find_packages(exclude=["test", "benchmark"]),
    package_data={"sliceorch": ["schema/*.json"]},
    install_requires=requirements,
    entry_points={"console_scripts": ["sliceorch=sliceorch.cli:main"]},
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
)
