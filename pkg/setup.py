import setuptools
from setuptools import setup

with open("README.md", "r") as f:
    long_description = f.read()

setup(
    # Information
    name="mctsep",
    description="Tree search, preference data and policy training for text household agents",
    long_description=long_description,
    long_description_content_type="text/markdown",
    version="0.1.0",
    license="MIT",
    keywords="monte carlo tree search preference optimization agents nlp llm",
    install_requires=[
        "numpy",
        "hydra-core",
        "gymnasium",
        "tqdm",
        "openai",
    ],
    entry_points={
        "console_scripts": [
            "mctsep=mctsep.cli:entry",
        ],
    },
    extras_require={
        "dev": [
            "black",
            "isort>=5.12",
            "pytest<8.0",
            "hypothesis",
            "flake8",
            "pre-commit",
        ]
    },
    package_dir={"": "./"},
    packages=setuptools.find_packages(where="./", include=["mctsep*"]),
    package_data={
        "mctsep": [
            "config/config.yaml",
            "environments/gridhouse/layouts.json",
            "prompt_builder/templates/*.txt",
        ]
    },
    include_package_data=True,
    python_requires=">=3.8",
)
