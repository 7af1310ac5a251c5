from setuptools import setup, find_namespace_packages


setup(
    name='synthreg',
    packages=find_namespace_packages(where="src"),
    package_dir={'': 'src'},
    version='1.0.0',
    include_package_data=True,
    package_data={'synthreg.command_line.config': ['*.cfg']},
    install_requires=['numpy', 'scipy', 'matplotlib', 'nibabel']
)
