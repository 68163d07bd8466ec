from setuptools import setup

setup(
    packages=[
        'promptcompvl',
        'promptcompvl.autodiff',
        '_promptcompvl_scripts',
    ],
    package_dir={
        'promptcompvl': 'src/promptcompvl',
        'promptcompvl.autodiff': 'src/promptcompvl/autodiff',
        '_promptcompvl_scripts': 'scripts',
    },
    package_data={
        'promptcompvl': ['py.typed'],
    },
    entry_points={
        'console_scripts': [
            'promptcompvl=_promptcompvl_scripts._czsl:main',
        ],
    },
)
