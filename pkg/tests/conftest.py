import numpy as np
import pytest

from rbmflow.rbm_sim import ReflectedPath


def synthetic_disk_path(angles, dls, interior=0.5):
    """Path on the unit disk that touches the boundary at ``angles``.

    ``angles[k]`` is ``None`` for an interior step; ``dls[k]`` is the local
    time gained at contact step ``k``. Step 0 is an interior start.
    """
    pos, lt, con = [], [], []
    L = 0.0
    for a, dl in zip(angles, dls):
        if a is None:
            pos.append([interior, 0.0])
            con.append(False)
        else:
            pos.append([np.cos(a), np.sin(a)])
            L += dl
            con.append(True)
        lt.append(L)
    pos = np.array(pos)
    return ReflectedPath(pos[0].copy(), 1e-4, pos, np.array(lt), np.array(con))


@pytest.fixture
def disk_path_factory():
    return synthetic_disk_path
