import os
import threading

import numpy as np
import pytest

from slicecast.refbackends import make_synthetic_case
from slicecast.volio import LabelVolume
from slicecast.wireproto import BackendConnection, serve


def connect_handler(handler):
    """Serve a handler over OS pipes in a daemon thread; returns the client."""
    c2s_r, c2s_w = os.pipe()
    s2c_r, s2c_w = os.pipe()
    thread = threading.Thread(
        target=serve,
        args=(handler, os.fdopen(c2s_r, "rb"), os.fdopen(s2c_w, "wb")),
        daemon=True,
    )
    thread.start()
    return BackendConnection(reader=os.fdopen(s2c_r, "rb"),
                             writer=os.fdopen(c2s_w, "wb"))


@pytest.fixture
def two_bars():
    return make_synthetic_case("two_bars")


@pytest.fixture
def touching_bars():
    return make_synthetic_case("touching_bars")


def full_occupancy_labels(n_slices=160, h=8, w=8):
    """Both objects present on every slice, like long-bone masks in knee MRI."""
    labels = np.zeros((n_slices, h, w), dtype=np.int32)
    labels[:, : h // 2, :] = 1
    labels[:, h // 2 :, :] = 2
    return LabelVolume(labels=labels, label_names={1: "femur", 2: "tibia"})
