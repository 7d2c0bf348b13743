from setuptools import setup, find_packages
import os

# Read README.md if it exists
long_description = ""
if os.path.exists("README.md"):
    with open("README.md", encoding="utf-8") as f:
        long_description = f.read()

setup(
    name="cavplan",
    version="0.3.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    package_dir={'cavplan': 'cavplan'},
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.9.0",
        "pandas>=2.0.0",
        "pytest>=7.0.0",
        "canonicaljson>=1.6.3",
        "pydantic>=2.0.0",
        "python-dotenv>=0.19.0",
        "tomli>=2.0.0; python_version < '3.11'",
    ],
    description="Lane-change and trajectory planning for automated vehicles at signalized intersections",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
    entry_points={
        "console_scripts": [
            "cavplan=cavplan.cli:main",
        ],
    },
)
