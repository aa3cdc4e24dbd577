import setuptools

# Read the contents of the README.md file for the long description
with open("README.md", "r", encoding="utf-8") as f:
    long_description = f.read()

# Read the contents of the requirements.txt file for installation
with open("requirements.txt", "r") as f:
    requirements = [line.strip() for line in f if line.strip()]

# Define package metadata
VERSION = "0.1.0"  # Package version
AUTHOR_USER_NAME = "Branis Ghoul"
AUTHOR_EMAIL = "branisghoul02@hotmail.com"

# Package configuration using setuptools
setuptools.setup(
    name="deltaKit",
    version=VERSION,
    author=AUTHOR_USER_NAME,
    author_email=AUTHOR_EMAIL,
    description="deltaKit: gated delta-rule linear attention with channel-wise learning rates.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    package_dir={"": "src"},
    packages=setuptools.find_packages(where="src"),
    python_requires=">=3.9",

    # Added dependencies from requirements.txt
    install_requires=requirements,
    entry_points={
        "console_scripts": ["deltakit=deltaKit.app.cli:main"],
    },
)
