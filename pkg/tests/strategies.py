"""Shared hypothesis strategies and small geometry helpers."""
import numpy as np
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from structslam.camera import CameraIntrinsics, PoseSE3

K500 = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
small = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
seeds = st.integers(0, 2**31 - 1)


def random_pose(rng, scale=1.0) -> PoseSE3:
    return PoseSE3(Rotation.random(random_state=rng).as_matrix(), rng.normal(scale=scale, size=3))


poses = seeds.map(lambda s: random_pose(np.random.default_rng(s)))


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


@st.composite
def segments3(draw):
    a = draw(vec3)
    b = draw(vec3)
    if np.linalg.norm(a - b) < 1e-2:
        b = a + np.array([1.0, 0.5, 0.25])
    return a, b
