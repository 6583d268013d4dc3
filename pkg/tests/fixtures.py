"""
Shared parameter sets and hand-computed expectations for the test suite.
"""

import numpy as np


class QuadFixtures:
    """Quadratic simulator sizes small enough for unit tests."""

    SMALL = {
        "n_tr": 300, "d_in": 50, "n_te": 200, "sigma": 1.0,
        "eta": 0.02, "rho": 0.1, "k": 2,
    }

    PARTITIONED = {
        "n_tr": 1000, "d_in": 50, "n_te": 200, "sigma": 1.0,
        "eta": 0.02, "rho": 0.1, "k": 2, "S": 10,
    }

    # q = 20 as at full scale; every cell used with it contracts at the spectral edge
    BOUNDS = {"n_tr": 600, "d_in": 30, "n_te": 10, "sigma": 1.0, "rho": 0.1}
    BOUNDS_RHO0 = 0.5

    # Trust-region vs PGA instances at the default PGA options
    BALL = {"n_tr": 300, "d_in": 50, "eta": 0.02, "rho": 0.1, "k": 2, "rho0": 0.5}


class PredictionFixtures:
    """Hand-checkable member outputs."""

    @staticmethod
    def opposite_pair() -> np.ndarray:
        """Two members, one sample, two classes: (1, 0) and (0, 1)."""
        return np.array([[[1.0, 0.0]], [[0.0, 1.0]]])

    @staticmethod
    def ten_samples_three_differ():
        """Two members over ten samples, argmax differs on exactly three."""
        first = np.tile([0.9, 0.1], (10, 1))
        second = first.copy()
        second[:3] = [0.2, 0.8]
        labels = np.zeros(10, dtype=int)
        return np.stack([first, second]), labels

    @staticmethod
    def der_example():
        """
        Two members over 20 samples.

        Member errors are 0.10 each and they disagree on 4 of 20 samples, so DER = 0.20/0.10 = 2.
        """
        labels = np.zeros(20, dtype=int)
        first = np.tile([0.8, 0.2], (20, 1))
        second = first.copy()
        first[0] = [0.3, 0.7]
        first[1] = [0.3, 0.7]
        second[2] = [0.3, 0.7]
        second[3] = [0.3, 0.7]
        return np.stack([first, second]), labels


class TaskFixtures:
    """Toy classification settings for fast training tests."""

    SEPARABLE = {"n_train": 500, "n_test": 300, "d_in": 20, "n_classes": 5, "separation": 6.0}

    TINY = {"n_train": 60, "n_test": 40, "d_in": 5, "n_classes": 3, "separation": 4.0,
            "severities": [1, 3]}

    SMOKE_ENSEMBLE = {"m": 2, "optimizer": "sgd", "hidden": 32, "epochs": 5, "lr": 0.1,
                      "batch_size": 32, "rho": 0.0}

    FAST_SHARPNESS = {"n_batches": 5, "batch_size": 5, "ascent_steps": 5}
