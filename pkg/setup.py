from setuptools import setup, find_packages

setup(
    name='stylecapsule',
    version='1.0.0',
    description='Two-stage face stylization that ships a trained style model instead of the style dataset.',
    long_description='A style model (encoder, decoder, noise remapper) is trained on style images alone and saved '
                     'as a package of weights.  Stylization adapts a copy of the encoder to source faces offline, '
                     'online or per image at test time, with the decoder and remapper frozen.',
    packages=find_packages(exclude=['tests']),
    install_requires=[
        'torch>=2.0',
        'numpy',
        'scipy',
        'Pillow',
        'tqdm',
    ],
    entry_points={
        'console_scripts': ['stylecapsule = stylecapsule.cli:main'],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.10',
    ],
    keywords='style transfer face stylization gan',
    python_requires='>=3.10',
)
