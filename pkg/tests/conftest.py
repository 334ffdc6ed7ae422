"""Shared builders for the test suite.

Most tests work on tiny hand-sized scenes: a handful of surfels in front of a
16x16 camera.  The builders here keep those scenes reproducible without each
test re-rolling its own conventions.
"""

import subprocess
import sys

import numpy as np

from layersplat.gaussians import GaussianLayer
from layersplat.geometry import CameraIntrinsics, Pose


def tiny_intrinsics(width=16, height=16, fx=20.0, fy=21.0):
    return CameraIntrinsics(width=width, height=height, fx=fx, fy=fy,
                            cx=width / 2.0, cy=height / 2.0)


def identity_pose():
    return Pose(quat=np.array([1.0, 0.0, 0.0, 0.0]), center=np.zeros(3))


def random_layer(n, layer_id, rng, depth=2.5, spread=0.6):
    """A loose cluster of surfels roughly facing the +z camera at the origin."""
    mu = rng.normal([0.0, 0.0, depth], spread, size=(n, 3))
    log_scale = rng.uniform(-1.2, -0.3, size=(n, 2))
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    opacity_logit = rng.normal(0.5, 0.8, size=n)
    sh = rng.normal(0.3, 0.4, size=(n, 4, 3))
    return GaussianLayer(mu=mu, log_scale=log_scale, quat=quat,
                         opacity_logit=opacity_logit, sh=sh, layer_id=layer_id)


def run_cli(*argv, check=True):
    """Run a `layersplat` subcommand in a subprocess; returns CompletedProcess."""
    proc = subprocess.run([sys.executable, "-m", "layersplat",
                           *map(str, argv)],
                          capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(
            f"layersplat {' '.join(map(str, argv))} failed "
            f"({proc.returncode}):\n{proc.stdout}\n{proc.stderr}")
    return proc
