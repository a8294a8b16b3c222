import setuptools
import os

# Get the absolute path of requirements.txt
req_path = os.path.join(os.path.dirname(__file__), "requirements.txt")

with open(req_path, "r", encoding="utf-8") as f:
    requirements = [line for line in f.read().splitlines() if line.strip()]

with open(os.path.join(os.path.dirname(__file__), "README.md"), "r", encoding="utf-8") as fh:
    long_description = fh.read()

setuptools.setup(
    name="dualbranch-ins",
    version="0.1.0",
    description="Dual-branch INS/GNSS error-state Kalman filter with NHC and inequality constraints",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(include=["DualBranchINS", "DualBranchINS_harness"]),
    python_requires='>=3.8',
    license='MIT',
    install_requires=requirements,
    extras_require={"dev": ["pytest>=7.0"]},
    keywords="ins, gnss, kalman-filter, error-state-ekf, non-holonomic-constraint, inequality-constraints, quadratic-programming, sensor-fusion, navigation",
    include_package_data=True,
    entry_points={
        'console_scripts': [
            'dualbranch=DualBranchINS_harness.ins_cli:main',
        ],
    },
)
