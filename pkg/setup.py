"""
To push a new version to PyPi, update the version number
in echub/version.py and then run the following commands:

    $ python setup.py sdist
    $ python3 -m twine upload dist/*


"""
from setuptools import setup

filename = 'echub/version.py'
exec(open(filename).read())

setup(
    name             = 'ensemble-curriculum-hub',
    version          = __version__,
    keywords         = 'eeg motor-imagery ensemble distillation curriculum',
    license          = 'Apache License 2.0',
    description      = 'Ensemble curriculum learning with intra-ensemble distillation for EEG',
    long_description = open('README.md').read(),
    long_description_content_type = "text/markdown",
    zip_safe         = True,
    include_package_data = True,
    python_requires  = '>=3.8',
    install_requires = ['Flask', 'watchdog', 'robotframework', 'tornado', 'numpy', 'scipy'],
    extras_require   = {
        'test': ['pytest', 'hypothesis', 'robotframework-requests', 'requests'],
    },
    classifiers      = [
        "Development Status :: 3 - Alpha",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Intended Audience :: Science/Research",
        ],
    packages         =[
        'echub',
        'echub.blueprints',
        'echub.blueprints.api',
        ],
    scripts          =[],
    entry_points={
        'console_scripts': [
            "echub = echub.__main__:main"
        ]
    }
)
