from setuptools import setup

setup(name="deep_relational",
        version="0.1",
        packages=["deep_relational", "deep_relational.tests"],
        install_requires=["numpy", "scipy", "PyYAML", "argh", "icecream", "tqdm"],
        entry_points={"console_scripts": ["deep-relational = deep_relational.run_model:main"]},
        )
