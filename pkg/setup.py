# coding: utf-8

import os
import io

from setuptools import setup, find_packages


def read(fname):
    with io.open(os.path.join(os.path.dirname(__file__), fname), encoding='utf-8') as f:
        return f.read()


setup(
    name='bevprompt',
    version='0.1.0',
    packages=find_packages('src'),
    package_dir={'': 'src'},
    package_data={'bevprompt': ['schemas/*.json']},
    python_requires=">=3.8",
    install_requires=[
        "torch>=1.10",
        "numpy",
        "numpy-quaternion",
        "scipy",
        "tqdm",
        "jsonschema>=3.2",
    ],
    extras_require={
        "test": ["pytest"],
    },
    scripts=[
        "src/scripts/run_bevprompt.py",
    ],
    description='2D-detection prompts for roadside monocular 3D detection at desk scale.',
    long_description=read('README.md')
)
