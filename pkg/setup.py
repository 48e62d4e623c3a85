import setuptools

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setuptools.setup(
    name='vel_lattice',
    version='1.0.0',
    author='Alfredo Velasco',
    author_email='alfredo0234@gmail.com',
    description='Replicated lattice variables and a deterministic network simulator',
    long_description=long_description,
    long_description_content_type="text/markdown",
    url='https://github.com/VelascoAMath/vel_lattice/',
    project_urls = {
        "Bug Tracker": "https://github.com/VelascoAMath/vel_lattice/issues"
    },
    license='MIT',
    packages=['vel_lattice'],
    package_data={'vel_lattice': ['scenarios/*.json']},
    python_requires='>=3.8',
    install_requires=['tqdm', 'graphviz', 'pandas'],
    extras_require={
        'test': ['pytest', 'hypothesis'],
        'docs': ['sphinx'],
    },
    entry_points={
        'console_scripts': ['vel-lattice=vel_lattice.Lattice_CLI:main'],
    },
)
