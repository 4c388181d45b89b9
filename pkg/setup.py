from setuptools import setup, find_packages

setup(
    name="htsc-cif",
    version="0.1.0",
    description="Hierarchical three-level training with a front-door causal decoder for report generation on a synthetic multimodal corpus",
    long_description=open("README.md", encoding="utf-8").read(),
    long_description_content_type="text/markdown",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    python_requires=">=3.11",
    install_requires=["numpy>=1.24", "networkx>=3.3", "nltk>=3.8", "pandas>=2.0"],
    extras_require={"dev": ["pytest>=7.4"], "docs": ["sphinx>=7"]},
    entry_points={"console_scripts": ["htsc=htsc.main:main"]},
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    include_package_data=True,
)
