"""Hand-specified small parameter sets shared by several test modules."""

import numpy as np

# hidden 2, one control
GRU_FIXTURE = {
    "recurrent": [
        [[0.3, -0.2], [0.1, 0.4]],
        [[-0.5, 0.2], [0.25, 0.1]],
        [[0.6, -0.3], [0.2, 0.5]],
    ],
    "input": [[0.7, -0.4], [0.2, 0.9], [-0.6, 0.3]],
    "control": [[[0.5], [-0.25]], [[0.1], [0.3]], [[-0.8], [0.45]]],
    "bias": [[0.05, -0.1], [0.2, 0.0], [0.15, -0.05]],
}

LSTM_FIXTURE = {
    "recurrent": [
        [[0.3, -0.2], [0.1, 0.4]],
        [[-0.5, 0.2], [0.25, 0.1]],
        [[0.6, -0.3], [0.2, 0.5]],
        [[0.05, 0.35], [-0.45, 0.15]],
    ],
    "input": [[0.7, -0.4], [0.2, 0.9], [-0.6, 0.3], [0.1, 0.2]],
    "control": [[[0.5], [-0.25]], [[0.1], [0.3]], [[-0.8], [0.45]], [[0.2], [-0.1]]],
    "bias": [[0.05, -0.1], [0.2, 0.0], [0.15, -0.05], [0.3, -0.2]],
}

H0 = [0.1, -0.2]
C0 = [0.4, -0.3]
X = 0.3
P = [1.0]


def arrays(fixture):
    return {k: np.asarray(v, dtype=np.float64) for k, v in fixture.items()}
