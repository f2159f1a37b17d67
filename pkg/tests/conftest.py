import numpy as np
import pytest

from ehsim.simcore import (
    ECG_KEYS,
    PPG_KEYS,
    EcgParams,
    GaussianComponent,
    PpgParams,
    SimParams,
    default_params,
)


def single_component_params(ecg=None, ppg=None, omega=2 * np.pi, delta_pat=0.0, lambda_p=1.0):
    """Params where every component is silent except the ones given."""
    ecg = ecg or {}
    ppg = ppg or {}
    e = {k: ecg.get(k, GaussianComponent(0.0, 0.0, 0.1)) for k in ECG_KEYS}
    p = {k: ppg.get(k, GaussianComponent(0.0, 0.0, 0.1)) for k in PPG_KEYS}
    return SimParams(omega, EcgParams(e), PpgParams(p, delta_pat=delta_pat, lambda_p=lambda_p))


@pytest.fixture
def params():
    return default_params()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
