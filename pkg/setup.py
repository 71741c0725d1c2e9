from setuptools import setup, find_packages

setup(
    name="latent-lab",
    version="0.1.0",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.10",
    install_requires=[
        "numpy",
        "networkx",
        "voluptuous",
        "PyYAML",
        "tqdm",
    ],
    entry_points={
        "console_scripts": ["latent-lab=latent_lab.cli:main"],
    },
)
