"""
Named experiment presets.

A preset is a partial config tree for one command. The harness applies it first, then the
TOML file, then --set overrides.
"""

import copy
from typing import Any, Dict, List

from flatdiv.core.error_handler import ConfigValidationError

# Perturbation radius grids
RHO_GRIDS: Dict[str, List[float]] = {
    "quadratic": [0.5, 0.45, 0.4, 0.35, 0.3],
    "partition_wide": [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
    "overview": [0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.2, 0.3],
    "overparam": [0.01, 0.015, 0.02, 0.025, 0.03, 0.05, 0.1, 0.2, 0.3, 0.4],
    "grid_search": [0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
    "toy": [0.0, 0.01, 0.05, 0.1, 0.2, 0.3],
    "unit": [round(0.05 * i, 2) for i in range(21)],
}

_QUAD_SIZES = {"n_tr": 3000, "d_in": 150}

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "theory-curve": {
        "partitioned": {
            "curve": {**_QUAD_SIZES, "eta": 0.01, "S": 10, "k": 2, "sigma": 1.0, "rho0": 0.5,
                      "rho_grid": RHO_GRIDS["unit"], "variants": ["SAM", "SharpBalance"]},
        },
        "sam-only": {
            "curve": {**_QUAD_SIZES, "eta": 0.01, "S": 1, "k": 2, "sigma": 1.0, "rho0": 0.5,
                      "rho_grid": RHO_GRIDS["unit"], "variants": ["SAM"]},
        },
        "partition-wide": {
            "curve": {**_QUAD_SIZES, "eta": 0.01, "S": 10, "k": 2, "sigma": 1.0, "rho0": 0.5,
                      "rho_grid": RHO_GRIDS["partition_wide"], "variants": ["SAM", "SharpBalance"]},
        },
    },
    "verify": {
        "smoke": {
            "sweep": {"n_tr": 300, "d_in": 50, "n_te": 200, "n_data": 10, "n_init": 20,
                      "k_values": [2], "eta_values": [0.02], "rho_values": [0.1], "S_values": [1]},
        },
        "sam-pga": {
            "sweep": {**_QUAD_SIZES, "n_te": 1000, "n_data": 50, "n_init": 50, "method": "pga",
                      "k_values": [2], "eta_values": [0.004], "rho_values": RHO_GRIDS["quadratic"],
                      "S_values": [1]},
        },
        # Every cell is outside the contraction region at this size and is skipped
        # unless sweep.skip_noncontracting = false
        "sam-grid": {
            "sweep": {**_QUAD_SIZES, "n_te": 1000, "n_data": 50, "n_init": 50,
                      "k_values": [2, 4, 8], "eta_values": [0.01, 0.05, 0.1],
                      "rho_values": [0.3, 0.4, 0.5], "S_values": [1]},
        },
        # Same grid shape with step sizes inside the contraction region
        "sam-grid-contracting": {
            "sweep": {**_QUAD_SIZES, "n_te": 1000, "n_data": 50, "n_init": 50,
                      "k_values": [2, 4, 8], "eta_values": [0.001, 0.002, 0.004],
                      "rho_values": [0.3, 0.4, 0.5], "S_values": [1]},
        },
        # eta 0.3 and 0.5 cells are outside the contraction region and are skipped
        "partitioned-grid": {
            "sweep": {**_QUAD_SIZES, "n_te": 1000, "n_data": 50, "n_init": 50,
                      "k_values": [4, 8, 12], "eta_values": [0.1, 0.3, 0.5],
                      "rho_values": [0.4], "S_values": [10]},
        },
    },
    "train": {
        "smoke": {
            "task": {"n_train": 500, "n_test": 300, "separation": 6.0},
            "ensemble": {"m": 2, "optimizer": "sgd", "hidden": 32, "epochs": 5, "lr": 0.1, "rho": 0.0},
            "sharpness": {"n_batches": 10},
            "save_checkpoints": True,
        },
        "rho-sweep": {
            "ensemble": {"m": 3, "optimizer": "sam"},
            "n_ensembles": 5,
            "rho_sweep": RHO_GRIDS["toy"],
        },
        "sharpbalance": {
            "ensemble": {"m": 3, "rho": 0.2, "k_frac": 0.4, "T_d": 10},
            "n_ensembles": 5,
            "compare_optimizers": ["sam", "sharpbalance"],
        },
        "three-ensembles": {
            "ensemble": {"m": 3, "optimizer": "sharpbalance"},
            "n_ensembles": 3,
        },
    },
    "measure": {
        "norm-variants": {
            "sharpness_norms": ["l2_adaptive", "linf_adaptive", "average_case"],
        },
    },
}


def list_presets(command: str) -> List[str]:
    return sorted(PRESETS.get(command, {}))


def get_preset(command: str, name: str) -> Dict[str, Any]:
    """
    Get a copy of a preset's config tree.

    Raises:
        ConfigValidationError: unknown command or preset name
    """
    available = PRESETS.get(command, {})
    if name not in available:
        raise ConfigValidationError(
            f"unknown preset '{name}' for {command}; available: {', '.join(list_presets(command)) or 'none'}",
            details={"command": command, "preset": name},
        )
    return copy.deepcopy(available[name])
